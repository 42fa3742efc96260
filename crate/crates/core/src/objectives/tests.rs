use super::*;
use crate::data::{synth_from_model, Domain};
use crate::model::{brute_marginal, expected_elbo, Architecture, ObsModel};

fn tiny(d: usize, l: usize, seed: u64) -> VaeModel {
    VaeModel::new(Architecture::new(d, 8, l, ObsModel::Bernoulli), seed)
}

fn toy_data(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n * d).map(|_| rng.random_range(0..2u8)).collect();
    Dataset::new(items, d, Domain::Binary).unwrap()
}

fn all_objectives() -> Vec<Objective> {
    vec![
        Objective::Wake,
        Objective::ReverseSleep,
        Objective::HalfAsleep(MixtureConfig { alpha: 0.5 }),
        Objective::Sleep,
        Objective::Denoising(DenoisingConfig::default()),
    ]
}

fn assert_bitwise(a: &(f32, Vec<Tensor>), b: &(f32, Vec<Tensor>)) {
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.len(), b.1.len());
    for (x, y) in a.1.iter().zip(&b.1) {
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn half_asleep_endpoints_equal_wake_and_reverse_sleep() {
    let model = VaeModel::new(Architecture::new(12, 10, 3, ObsModel::Bernoulli), 1);
    let data = toy_data(40, 12, 2);
    let b = 20;
    let rows = data.take(b);
    let grads = |obj: Objective, rows: &[u8], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder_loss_and_grads(
            &model,
            &obj,
            SampleSource::Prior,
            rows,
            b,
            Some(&data),
            &mut rng,
        )
        .unwrap()
    };
    for seed in 0..3 {
        let wake = grads(Objective::Wake, rows.as_flat(), seed);
        let a0 = grads(
            Objective::HalfAsleep(MixtureConfig { alpha: 0.0 }),
            rows.as_flat(),
            seed,
        );
        assert_bitwise(&wake, &a0);

        let reverse = grads(Objective::ReverseSleep, &[], seed);
        let a1 = grads(
            Objective::HalfAsleep(MixtureConfig { alpha: 1.0 }),
            &[],
            seed,
        );
        assert_bitwise(&reverse, &a1);
    }
}

#[test]
fn mixture_counts() {
    let m = MixtureConfig { alpha: 0.5 };
    assert_eq!(m.model_samples(100), 50);
    assert_eq!(m.model_samples(3), 2);
    assert_eq!(MixtureConfig { alpha: 0.0 }.model_samples(100), 0);
    assert_eq!(MixtureConfig { alpha: 1.0 }.model_samples(7), 7);
    assert_eq!(
        Objective::HalfAsleep(MixtureConfig { alpha: 0.3 }).data_rows(10),
        7
    );
    assert_eq!(Objective::Sleep.data_rows(10), 0);
    assert_eq!(
        Objective::Denoising(DenoisingConfig::default()).data_rows(10),
        10
    );
}

#[test]
fn config_errors() {
    for alpha in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(
            Objective::HalfAsleep(MixtureConfig { alpha }).validate(),
            Err(Error::Config(_))
        ));
    }
    for sigma in [-0.1, f32::NAN, f32::INFINITY] {
        let o = Objective::Denoising(DenoisingConfig {
            sigma,
            alpha_mix: 0.5,
        });
        assert!(matches!(o.validate(), Err(Error::Config(_))));
    }
    assert!(Objective::Denoising(DenoisingConfig {
        sigma: 0.0,
        alpha_mix: 1.0
    })
    .validate()
    .is_ok());
    assert!(Objective::parse("half_asleep", Some(2.0), None).is_err());
    assert!(Objective::parse("denoising", None, Some(-1.0)).is_err());
    assert!(Objective::parse("dreaming", None, None).is_err());
    assert_eq!(
        Objective::parse("half-asleep", Some(0.25), None).unwrap(),
        Objective::HalfAsleep(MixtureConfig { alpha: 0.25 })
    );
    assert_eq!(
        Objective::parse("reverse_sleep", None, None).unwrap(),
        Objective::ReverseSleep
    );
    assert_eq!(
        SampleSource::parse("aggregate").unwrap(),
        SampleSource::AggregatePosterior
    );
    assert!(SampleSource::parse("posterior?").is_err());

    let model = tiny(4, 1, 0);
    let data = toy_data(10, 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = EncoderTrainConfig::new(Objective::Wake, 1, 1e-3);
    cfg.batch_size = 0;
    assert!(train_encoder(&mut model.clone(), &data, &cfg, &mut rng, |_, _, _| Ok(())).is_err());
    let cfg = EncoderTrainConfig::new(Objective::Wake, 1, -1.0);
    assert!(train_encoder(&mut model.clone(), &data, &cfg, &mut rng, |_, _, _| Ok(())).is_err());
    let wrong = toy_data(10, 5, 0);
    let cfg = EncoderTrainConfig::new(Objective::Wake, 1, 1e-3);
    assert!(train_encoder(&mut model.clone(), &wrong, &cfg, &mut rng, |_, _, _| Ok(())).is_err());
    let empty = Dataset::new(Vec::new(), 4, Domain::Binary).unwrap();
    assert!(train_encoder(&mut model.clone(), &empty, &cfg, &mut rng, |_, _, _| Ok(())).is_err());
    // a batch with the wrong number of data rows
    assert!(encoder_loss_and_grads(
        &model,
        &Objective::Wake,
        SampleSource::Prior,
        &[0; 8],
        3,
        None,
        &mut rng
    )
    .is_err());
    // aggregate sampling without a pool
    assert!(encoder_loss_and_grads(
        &model,
        &Objective::ReverseSleep,
        SampleSource::AggregatePosterior,
        &[],
        3,
        None,
        &mut rng
    )
    .is_err());
}

#[test]
fn encoder_training_never_touches_the_decoder() {
    let data = toy_data(30, 6, 3);
    for (i, objective) in all_objectives().into_iter().enumerate() {
        for source in [SampleSource::Prior, SampleSource::AggregatePosterior] {
            let mut model = tiny(6, 2, 4);
            let before = model.clone();
            let cfg = EncoderTrainConfig {
                objective,
                source,
                batch_size: 8,
                lr: 1e-2,
                epochs: 3,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            train_encoder(&mut model, &data, &cfg, &mut rng, |_, _, _| Ok(())).unwrap();
            assert_eq!(model.decoder, before.decoder, "{}", objective.name());
            assert_eq!(model.decoder_checksum(), before.decoder_checksum());
            assert_ne!(
                model.encoder,
                before.encoder,
                "{} left the encoder alone",
                objective.name()
            );
        }
    }
}

#[test]
fn zero_learning_rate_is_identity() {
    let data = toy_data(25, 6, 5);
    let mut model = tiny(6, 2, 6);
    let before = model.clone();
    let cfg = JointConfig {
        epochs: 3,
        batch_size: 7,
        lr: 0.0,
        ..JointConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_vae_joint(&mut model, &data, None, &cfg, &mut rng, |_, _, _| Ok(())).unwrap();
    assert_eq!(model, before);
    for objective in all_objectives() {
        let cfg = EncoderTrainConfig::new(objective, 2, 0.0);
        train_encoder(&mut model, &data, &cfg, &mut rng, |_, _, _| Ok(())).unwrap();
        assert_eq!(model, before);
    }
}

#[test]
fn joint_training_reports_both_splits_on_schedule() {
    let train = toy_data(20, 6, 7);
    let test = toy_data(10, 6, 8);
    let mut model = tiny(6, 2, 9);
    let cfg = JointConfig {
        epochs: 5,
        batch_size: 10,
        lr: 1e-3,
        eval_every: 2,
        eval_seed: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = Vec::new();
    let trace = train_vae_joint(
        &mut model,
        &train,
        Some(&test),
        &cfg,
        &mut rng,
        |e, m, pts| {
            assert_eq!(pts.len(), 2);
            assert_eq!(pts[1].bpd, evaluate_bpd(m, &test, 3).unwrap());
            seen.push(e);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, vec![2, 4, 5]);
    assert_eq!(trace.len(), 6);
    assert_eq!(trace[0].split, Split::Train);
    assert_eq!(trace[5].epoch, 5);
}

#[test]
fn single_point_training_reaches_the_marginal() {
    let x = vec![1u8, 0, 1, 1];
    let data = Dataset::new(x.clone(), 4, Domain::Binary).unwrap();
    let mut model = tiny(4, 1, 11);
    let cfg = JointConfig {
        epochs: 500,
        batch_size: 1,
        lr: 1e-2,
        ..JointConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    train_vae_joint(&mut model, &data, None, &cfg, &mut rng, |_, _, _| Ok(())).unwrap();
    let post = model.encode(&x).unwrap();
    let elbo = expected_elbo(&model, &x, &post, 4000).unwrap();
    let log_px = brute_marginal(&model, &x, 10_000).unwrap().log_px;
    assert!(elbo <= log_px + 1e-9);
    assert!(log_px - elbo < 0.02, "elbo {elbo} vs log p(x) {log_px}");
}

#[test]
fn optimal_inference_on_train_set_is_wake_training() {
    let data = toy_data(30, 6, 12);
    let mut a = tiny(6, 2, 13);
    let mut b = a.clone();
    let la = optimal_inference_dataset(&mut a, &data, 3, 5e-4, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap();
    let cfg = EncoderTrainConfig::new(Objective::Wake, 3, 5e-4);
    let lb = train_encoder(
        &mut b,
        &data,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(4),
        |_, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn optimal_inference_shrinks_posterior_kl() {
    let mut model = tiny(4, 1, 14);
    let eval = Dataset::new(vec![1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1], 4, Domain::Binary).unwrap();
    let before: Vec<f64> = eval
        .iter()
        .map(|x| {
            brute_marginal(&model, x, 10_000)
                .unwrap()
                .kl_from(&model.encode(x).unwrap())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    optimal_inference_dataset(&mut model, &eval, 400, 5e-3, &mut rng).unwrap();
    for (x, kl0) in eval.iter().zip(&before) {
        let kl = brute_marginal(&model, x, 10_000)
            .unwrap()
            .kl_from(&model.encode(x).unwrap());
        assert!(kl < *kl0, "{x:?}: {kl} !< {kl0}");
    }
}

#[test]
fn gap_of_a_model_with_itself_is_zero() {
    let model = tiny(6, 2, 15);
    let data = toy_data(12, 6, 16);
    let report = measure_gap(&model, &model, &data, 5, 7).unwrap();
    assert!(report.gap.iter().all(|&g| g == 0.0));
    assert!(report.gap_se.iter().all(|&g| g == 0.0));
    assert_eq!(report.gap_bpd, 0.0);
    assert_eq!(report.amortized_bpd, report.optimized_bpd);
    let mean = report.amortized.iter().sum::<f64>() / 12.0;
    assert!((report.amortized_bpd - bpd(mean, 6)).abs() < 1e-12);
}

#[test]
fn gap_refuses_different_decoders() {
    let a = tiny(6, 2, 15);
    let b = tiny(6, 2, 16);
    let data = toy_data(4, 6, 16);
    assert!(matches!(
        measure_gap(&a, &b, &data, 2, 0),
        Err(Error::Config(_))
    ));
    let mut c = a.clone();
    c.reinit_encoder(3);
    assert!(measure_gap(&a, &c, &data, 2, 0).is_ok());
    assert!(measure_gap(&a, &c, &data, 0, 0).is_err());
}

#[test]
fn converged_gap_is_non_negative_per_datum() {
    let mut model = tiny(4, 1, 17);
    let data = toy_data(6, 4, 18);
    let cfg = JointConfig {
        epochs: 200,
        batch_size: 6,
        lr: 5e-3,
        ..JointConfig::default()
    };
    train_vae_joint(
        &mut model,
        &data,
        None,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(0),
        |_, _, _| Ok(()),
    )
    .unwrap();
    let eval = toy_data(6, 4, 19);
    let mut opt = model.clone();
    optimal_inference_dataset(
        &mut opt,
        &eval,
        1500,
        5e-3,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let report = measure_gap(&model, &opt, &eval, 1000, 0).unwrap();
    for (g, se) in report.gap.iter().zip(&report.gap_se) {
        assert!(*g >= -2.0 * se, "gap {g} ± {se}");
    }
}

#[test]
fn training_losses_settle() {
    let pretrained = {
        let mut m = tiny(8, 2, 20);
        let data = toy_data(200, 8, 21);
        let cfg = JointConfig {
            epochs: 20,
            batch_size: 20,
            lr: 5e-3,
            ..JointConfig::default()
        };
        train_vae_joint(
            &mut m,
            &data,
            None,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            |_, _, _| Ok(()),
        )
        .unwrap();
        m
    };
    let (train, _) = synth_from_model(&pretrained, 400, 1, 3).unwrap();
    for objective in all_objectives() {
        let mut model = pretrained.clone();
        model.reinit_encoder(5);
        let mut cfg = EncoderTrainConfig::new(objective, 30, 3e-3);
        cfg.batch_size = 50;
        let losses = train_encoder(
            &mut model,
            &train,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(6),
            |_, _, _| Ok(()),
        )
        .unwrap();
        let mut running = losses[0];
        for (e, &loss) in losses.iter().enumerate().skip(1) {
            assert!(
                loss <= running + 0.05 * running.abs(),
                "{} epoch {e}: {loss} above running mean {running}",
                objective.name()
            );
            running += (loss - running) / (e + 1) as f64;
        }
        assert!(
            losses.last().unwrap() < &losses[0],
            "{} did not improve",
            objective.name()
        );
    }
}

/// On a tiny data distribution whose support is enumerable, wake training on
/// plentiful data and reverse-sleep training reach the same population
/// objective.
#[test]
fn wake_and_reverse_sleep_agree_on_an_enumerable_domain() {
    let truth = tiny(4, 1, 22);
    let states: Vec<Vec<u8>> = (0..16u8)
        .map(|s| (0..4).map(|i| (s >> i) & 1).collect())
        .collect();
    let log_p: Vec<f64> = states
        .iter()
        .map(|x| brute_marginal(&truth, x, 4000).unwrap().log_px)
        .collect();
    let total: f64 = log_p.iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-6);

    let (train, _) = synth_from_model(&truth, 20_000, 1, 9).unwrap();
    let population_bpd = |m: &VaeModel| {
        let mut acc = 0.0;
        for (x, lp) in states.iter().zip(&log_p) {
            acc -= lp.exp() * expected_elbo(m, x, &m.encode(x).unwrap(), 2000).unwrap();
        }
        bpd(acc, 4)
    };
    let mut finals = Vec::new();
    for objective in [Objective::Wake, Objective::ReverseSleep] {
        let mut model = truth.clone();
        model.reinit_encoder(1);
        let mut cfg = EncoderTrainConfig::new(objective, 15, 2e-3);
        cfg.batch_size = 200;
        train_encoder(
            &mut model,
            &train,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(2),
            |_, _, _| Ok(()),
        )
        .unwrap();
        finals.push(population_bpd(&model));
    }
    assert!(
        (finals[0] - finals[1]).abs() < 1e-3,
        "wake {} vs reverse sleep {}",
        finals[0],
        finals[1]
    );
}

#[test]
fn consistency_traces_have_one_point_per_epoch() {
    let pretrained = tiny(6, 2, 23);
    let cfg = ConsistencyConfig {
        n_train: 60,
        n_test: 20,
        epochs: 4,
        seeds: vec![0, 1],
        batch_size: 20,
        ..ConsistencyConfig::default()
    };
    let traces = consistency_experiment(&pretrained, &cfg).unwrap();
    assert_eq!(traces.len(), 6);
    assert!(traces.iter().all(|t| t.test_bpd.len() == 4));
    let summary = summarize_traces(&traces, "wake");
    assert_eq!(summary.len(), 4);
    let w: Vec<&ConsistencyTrace> = traces
        .iter()
        .filter(|t| t.objective == Objective::Wake)
        .collect();
    let mean = (w[0].test_bpd[3] + w[1].test_bpd[3]) / 2.0;
    assert!((summary[3].0 - mean).abs() < 1e-12);
    assert!(summarize_traces(&traces, "denoising").is_empty());
    // runs are reproducible
    assert_eq!(consistency_experiment(&pretrained, &cfg).unwrap(), traces);
}

#[test]
fn denoising_with_zero_noise_is_wake() {
    let model = tiny(6, 2, 24);
    let data = toy_data(10, 6, 25);
    let rows = data.take(5);
    let d = Objective::Denoising(DenoisingConfig {
        sigma: 0.0,
        alpha_mix: 0.5,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, grads) = encoder_loss_and_grads(
        &model,
        &d,
        SampleSource::Prior,
        rows.as_flat(),
        5,
        None,
        &mut rng,
    )
    .unwrap();
    // same data, two noise draws: the loss is the average of two wake losses
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let _ = standard_noise(5, 6, &mut rng);
    let na = standard_noise(5, 2, &mut rng);
    let nb = standard_noise(5, 2, &mut rng);
    let ea: f32 = model
        .elbo_batch(rows.as_flat(), &na)
        .unwrap()
        .iter()
        .sum::<f32>()
        / 5.0;
    let eb: f32 = model
        .elbo_batch(rows.as_flat(), &nb)
        .unwrap()
        .iter()
        .sum::<f32>()
        / 5.0;
    assert!((loss + 0.5 * (ea + eb)).abs() < 1e-4 * loss.abs().max(1.0));
    assert!(grads.iter().all(|g| g.all_finite()));
}
