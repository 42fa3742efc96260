use super::*;
use crate::data::Domain;
use crate::model::{expected_elbo, Architecture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(obs: ObsModel, seed: u64) -> VaeModel {
    VaeModel::new(Architecture::new(12, 16, 3, obs), seed)
}

fn random_data(obs: ObsModel, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n * 12)
        .map(|_| match obs {
            ObsModel::Bernoulli => rng.random_range(0..2u8),
            ObsModel::DiscretizedLogistic => rng.random(),
        })
        .collect();
    Dataset::new(items, 12, obs.domain()).unwrap()
}

fn small_cfg() -> BitsBackConfig {
    BitsBackConfig {
        latent_precision: 10,
        q_precision: 20,
        ..BitsBackConfig::default()
    }
}

#[test]
fn standard_posterior_gives_uniform_table() {
    for r in [8, 14] {
        let disc = LatentDiscretization::new(r).unwrap();
        let q = discretized_q(&GaussianPosterior::standard(1), &disc).unwrap();
        assert!(q[0].freqs().iter().all(|&f| f == 1 << r), "r = {r}");
    }
}

#[test]
fn narrow_posterior_concentrates_in_its_bin() {
    let r = 8;
    let disc = LatentDiscretization::new(r).unwrap();
    for bin in [3usize, 100, 128, 200] {
        let c = disc.centre(bin);
        let post = GaussianPosterior::new(
            Tensor::vector(vec![c]).unwrap(),
            Tensor::vector(vec![LOG_STD_MIN]).unwrap(),
        )
        .unwrap();
        let q = &discretized_q(&post, &disc).unwrap()[0];
        assert!(
            q.prob(bin) >= 1.0 - 2f64.powi(-(r as i32) + 2),
            "bin {bin}: {}",
            q.prob(bin)
        );
    }
}

#[test]
fn random_posteriors_give_complete_tables() {
    let disc = LatentDiscretization::new(14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let mean = Tensor::from_fn(&[2], |_| rng.random_range(-6.0..6.0));
        let log_std = Tensor::from_fn(&[2], |_| rng.random_range(LOG_STD_MIN..LOG_STD_MAX));
        let post = GaussianPosterior::new(mean, log_std).unwrap();
        for t in discretized_q(&post, &disc).unwrap() {
            assert_eq!(t.len(), 1 << 14);
            assert_eq!(t.freqs().iter().map(|&f| f as u64).sum::<u64>(), 1 << 28);
            assert!(t.freqs().iter().all(|&f| f >= 1));
        }
    }
}

#[test]
fn bins_partition_the_line() {
    let disc = LatentDiscretization::new(6).unwrap();
    let normal = Normal::standard();
    for i in 0..disc.bins() {
        let (a, b) = disc.edges(i);
        let mass = normal.cdf(b) - normal.cdf(a);
        assert!(
            (mass - 1.0 / 64.0).abs() < 1e-12,
            "bin {i}: {:e}",
            mass - 1.0 / 64.0
        );
        let c = disc.centre(i) as f64;
        assert!(a < c && c < b);
        assert_eq!(disc.bin_of(c), i);
    }
    assert_eq!(disc.bin_of(-1e300), 0);
    assert_eq!(disc.bin_of(1e300), 63);
}

#[test]
fn tail_masses_match_cdf_differences() {
    let normal = Normal::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-6.0..6.0);
        let b = a + rng.random_range(0.0..3.0);
        let reference = normal.cdf(b) - normal.cdf(a);
        assert!((normal_mass(a, b) - reference).abs() < 1e-14);
    }
    // Far tail: the naive difference underflows but the mass does not.
    assert!(normal_mass(9.0, 9.5) > 0.0);
    assert!(normal_mass(-9.5, -9.0) > 0.0);
}

#[test]
fn zero_steps_return_the_amortized_posterior() {
    let model = tiny(ObsModel::Bernoulli, 1);
    let data = random_data(ObsModel::Bernoulli, 1, 2);
    let cfg = OptimalInferenceConfig::new(0, 5e-3);
    assert_eq!(
        optimal_posterior_k(&model, data.item(0), &cfg).unwrap(),
        model.encode(data.item(0)).unwrap()
    );
}

#[test]
fn refinement_is_reproducible_and_improves_the_elbo() {
    let model = VaeModel::new(Architecture::new(6, 12, 2, ObsModel::Bernoulli), 9);
    let data = random_data(ObsModel::Bernoulli, 2, 3);
    let items: Vec<Vec<u8>> = data.as_flat().chunks(6).map(|c| c.to_vec()).collect();
    let cfg = OptimalInferenceConfig {
        k: 40,
        adam: AdamConfig::with_lr(5e-2),
        seed_rule: 4,
    };
    let mut before = 0.0;
    let mut after = 0.0;
    for x in &items {
        let refined = optimal_posterior_k(&model, x, &cfg).unwrap();
        assert_eq!(refined, optimal_posterior_k(&model, x, &cfg).unwrap());
        before += expected_elbo(&model, x, &model.encode(x).unwrap(), 200).unwrap();
        after += expected_elbo(&model, x, &refined, 200).unwrap();
    }
    assert!(after > before, "expected ELBO {before} -> {after}");
}

#[test]
fn invalid_refinement_settings_are_rejected() {
    let mut cfg = OptimalInferenceConfig::new(1, -1.0);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.adam.lr = 1e-3;
    cfg.adam.beta1 = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn round_trips_in_every_mode() {
    for obs in [ObsModel::Bernoulli, ObsModel::DiscretizedLogistic] {
        let model = tiny(obs, 11);
        let data = random_data(obs, 25, 12);
        let cfg = small_cfg();
        let modes = [
            CodingMode::Amortized,
            CodingMode::Optimal(OptimalInferenceConfig::new(1, 5e-3)),
            CodingMode::Optimal(OptimalInferenceConfig::new(3, 5e-3)),
        ];
        for mode in modes {
            let run = compress_traced(&model, &data, &cfg, mode).unwrap();
            let bytes = run.stream.to_bytes();
            let parsed = CompressedStream::from_bytes(&bytes).unwrap();
            assert_eq!(parsed, run.stream);
            assert_eq!(
                decompress(&model, &parsed).unwrap(),
                data,
                "{obs:?} {mode:?}"
            );
            for t in &run.traces {
                assert!((t.state_delta as f64 - t.net_bits()).abs() <= 64.0);
            }
            let total: i64 = run.traces.iter().map(|t| t.state_delta).sum();
            assert_eq!(total, run.stream.net_bits());
        }
    }
}

#[test]
fn zero_step_stream_equals_amortized_stream() {
    let model = tiny(ObsModel::Bernoulli, 13);
    let data = random_data(ObsModel::Bernoulli, 10, 14);
    let cfg = small_cfg();
    let a = compress_amortized(&model, &data, &cfg).unwrap().to_bytes();
    let k0 = compress_optimal_k(&model, &data, &cfg, &OptimalInferenceConfig::new(0, 5e-3))
        .unwrap()
        .to_bytes();
    assert_eq!(a, k0);
    assert_eq!(
        a,
        compress_amortized(&model, &data, &cfg).unwrap().to_bytes()
    );
}

#[test]
fn mismatched_model_or_mode_is_refused() {
    let model = tiny(ObsModel::Bernoulli, 15);
    let data = random_data(ObsModel::Bernoulli, 5, 16);
    let cfg = small_cfg();
    let opt = OptimalInferenceConfig::new(2, 5e-3);
    let stream = compress_optimal_k(&model, &data, &cfg, &opt).unwrap();
    let other = tiny(ObsModel::Bernoulli, 17);
    assert!(matches!(decompress(&other, &stream), Err(Error::Stream(_))));
    assert!(matches!(
        decompress_amortized(&model, &stream),
        Err(Error::Stream(_))
    ));
    let wrong = OptimalInferenceConfig::new(3, 5e-3);
    assert!(matches!(
        decompress_optimal_k(&model, &stream, &wrong),
        Err(Error::Stream(_))
    ));
    assert_eq!(decompress_optimal_k(&model, &stream, &opt).unwrap(), data);
}

#[test]
fn corrupted_streams_are_detected() {
    let model = tiny(ObsModel::Bernoulli, 18);
    let data = random_data(ObsModel::Bernoulli, 5, 19);
    let stream = compress_amortized(&model, &data, &small_cfg()).unwrap();
    let bytes = stream.to_bytes();
    assert!(CompressedStream::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    for pos in [0, 9, 20, bytes.len() - 12] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(
            matches!(CompressedStream::from_bytes(&bad), Err(Error::Stream(_))),
            "flip at {pos}"
        );
    }
    let mut drained = stream.clone();
    drained.state = AnsState::new();
    assert!(matches!(
        decompress(&model, &drained),
        Err(Error::Stream(_))
    ));
}

#[test]
fn wrong_domain_is_rejected() {
    let model = tiny(ObsModel::Bernoulli, 20);
    let grey = Dataset::new(vec![7u8; 24], 12, Domain::Grey256).unwrap();
    assert!(compress_amortized(&model, &grey, &small_cfg()).is_err());
}

#[test]
fn empty_dataset_costs_nothing() {
    let model = tiny(ObsModel::Bernoulli, 21);
    let empty = Dataset::new(Vec::new(), 12, Domain::Binary).unwrap();
    let stream = compress_amortized(&model, &empty, &small_cfg()).unwrap();
    let report = rate_report(&stream, Some(0.0), None);
    assert_eq!(report.net_bits, 0);
    assert_eq!(report.bpd, 0.0);
    assert_eq!(decompress(&model, &stream).unwrap().len(), 0);
}

#[test]
fn seed_budget_follows_the_latent_size() {
    let cfg = BitsBackConfig::default();
    assert_eq!(cfg.seed_words(1), 2);
    assert_eq!(cfg.seed_words(16), 14);
}
