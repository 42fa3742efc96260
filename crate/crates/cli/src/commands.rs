//! Subcommand bodies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bbvae::bits_back::{
    compress_traced, decompress_timed, rate_report, BitsBackConfig, CodingMode, CompressedStream,
    OptimalInferenceConfig,
};
use bbvae::data::{save_bbds, synth_from_model};
use bbvae::experiment::{write_metrics, MetricsRow};
use bbvae::model::save_checkpoint;
use bbvae::objectives::{
    consistency_on, evaluate_bpd, measure_gap, optimal_inference_dataset, summarize_traces,
    train_encoder, train_vae_joint, ConsistencyConfig, EncoderTrainConfig, JointConfig, Objective,
    SampleSource,
};
use bbvae::{Architecture, Domain, ObsModel, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::inputs::{
    check_compatible, checkpoint_path, data_source, default_latent, load_model, load_splits,
    load_target, parse_k_list, resolve,
};
use crate::manifest::Manifest;
use crate::{
    CliError, CliResult, CompressArgs, ConsistencyArgs, DecompressArgs, FinetuneArgs, GapArgs,
    TradeoffArgs, TrainArgs,
};

pub const MODEL_FILE: &str = "model.bblv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STREAM_FILE: &str = "stream.bbst";
pub const RATE_FILE: &str = "rate.json";
pub const DECODED_FILE: &str = "decoded.bbds";
pub const GAP_FILE: &str = "gap.csv";
pub const GAP_DATUM_FILE: &str = "gap_per_datum.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRADEOFF_FILE: &str = "tradeoff.csv";

fn positive(v: usize, what: &str) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::config(format!("{what} must be positive")));
    }
    Ok(v)
}

/// Output subdirectory for one seed; the run directory itself when there is
/// only one seed.
fn seed_dir(out: &Path, seeds: &[u64], seed: u64) -> CliResult<PathBuf> {
    if seeds.len() == 1 {
        return Ok(out.to_path_buf());
    }
    let dir = out.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn single_k(cfg_k: &Option<Vec<usize>>) -> CliResult<Option<usize>> {
    match cfg_k.as_deref() {
        None => Ok(None),
        Some([k]) => Ok(Some(*k)),
        Some(_) => Err(CliError::config(
            "config 'k' must hold a single value for compress",
        )),
    }
}

/// JSON number with the f32's shortest decimal form.
fn f32_json(v: f32) -> serde_json::Value {
    json!(v.to_string().parse::<f64>().expect("f32 prints as a float"))
}

fn coding_mode(k: usize, lr: f32) -> CodingMode {
    CodingMode::Optimal(OptimalInferenceConfig::new(k, lr)).normalized()
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let src = data_source(&a.data, &r)?;
    let (train, test) = load_splits(&src, &a.data, &r)?;
    let obs = match train.domain() {
        Domain::Binary => ObsModel::Bernoulli,
        Domain::Grey256 => ObsModel::DiscretizedLogistic,
    };
    let hidden = positive(a.hidden.or(r.cfg.hidden).unwrap_or(200), "hidden")?;
    let latent = positive(
        a.latent
            .or(r.cfg.latent)
            .unwrap_or(default_latent(train.domain())),
        "latent",
    )?;
    let epochs = positive(a.epochs.or(r.cfg.epochs).unwrap_or(100), "epochs")?;
    let batch_size = a.batch_size.or(r.cfg.batch_size).unwrap_or(100);
    let lr = a.lr.or(r.cfg.lr).unwrap_or(3e-4);
    let arch = Architecture::new(train.dim(), hidden, latent, obs);

    let mut manifest = Manifest::new("train", &r.seeds);
    manifest.config = json!({
        "dataset": src.describe(), "hidden": hidden, "latent": latent, "obs": obs.name(),
        "epochs": epochs, "batch_size": batch_size, "lr": f32_json(lr), "eval_every": a.eval_every,
    });
    manifest.dataset("train", &src.describe(), &train);
    if let Some(t) = &test {
        manifest.dataset("test", &src.describe(), t);
    }

    let mut rows = Vec::new();
    for &seed in &r.seeds {
        let dir = seed_dir(&r.out, &r.seeds, seed)?;
        let ckpt_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir)?;
        let cfg = JointConfig {
            epochs,
            batch_size,
            lr,
            eval_every: a.eval_every,
            eval_seed: seed,
        };
        let mut model = VaeModel::new(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut saved = Vec::new();
        let trace = train_vae_joint(
            &mut model,
            &train,
            test.as_ref(),
            &cfg,
            &mut rng,
            |epoch, m, points| {
                let path = ckpt_dir.join(format!("epoch-{epoch:04}.bblv"));
                save_checkpoint(m, &path)?;
                saved.push((path, m.checksum()));
                let summary: Vec<String> = points
                    .iter()
                    .map(|p| format!("{} {:.4}", p.split.name(), p.bpd))
                    .collect();
                eprintln!("seed {seed} epoch {epoch}: {} bpd", summary.join(", "));
                Ok(())
            },
        )?;
        let model_path = dir.join(MODEL_FILE);
        save_checkpoint(&model, &model_path)?;
        manifest.model("trained", &model_path, &model);
        manifest.output("model", &model_path)?;
        for (path, _) in &saved {
            manifest.output("checkpoint", path)?;
        }
        rows.extend(trace.iter().map(|p| MetricsRow {
            epoch: p.epoch,
            split: p.split.name().to_string(),
            objective: "joint".to_string(),
            seed,
            bpd: p.bpd,
        }));
    }
    let metrics = r.out.join(METRICS_FILE);
    write_metrics(&metrics, &rows)?;
    manifest.output("metrics", &metrics)?;
    for row in rows.iter().filter(|row| row.epoch == epochs) {
        println!("seed {} {} bpd {:.4}", row.seed, row.split, row.bpd);
    }
    manifest.finish(&r.out)
}

pub fn finetune(a: FinetuneArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let src = data_source(&a.data, &r)?;
    let (train, test) = load_splits(&src, &a.data, &r)?;
    let ckpt = checkpoint_path(&a.checkpoint, &r)?;
    let base = load_model(&ckpt)?;
    check_compatible(&base, &train)?;
    if let Some(t) = &test {
        check_compatible(&base, t)?;
    }
    let name = a
        .objective
        .clone()
        .or_else(|| r.cfg.objective.clone())
        .unwrap_or_else(|| "half-asleep".into());
    let objective = Objective::parse(&name, a.alpha.or(r.cfg.alpha), a.sigma.or(r.cfg.sigma))?;
    let cfg = EncoderTrainConfig {
        objective,
        source: SampleSource::parse(&a.source)?,
        batch_size: a.batch_size.or(r.cfg.batch_size).unwrap_or(100),
        lr: a.lr.or(r.cfg.lr).unwrap_or(5e-4),
        epochs: positive(a.epochs.or(r.cfg.epochs).unwrap_or(100), "epochs")?,
    };
    cfg.validate()?;

    let mut manifest = Manifest::new("finetune-encoder", &r.seeds);
    manifest.config = json!({
        "dataset": src.describe(), "checkpoint": ckpt, "objective": objective.name(),
        "objective_settings": format!("{objective:?}"), "source": cfg.source.name(),
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": f32_json(cfg.lr),
    });
    manifest.model("pretrained", &ckpt, &base);
    manifest.dataset("train", &src.describe(), &train);
    if let Some(t) = &test {
        manifest.dataset("test", &src.describe(), t);
    }

    let mut rows = Vec::new();
    for &seed in &r.seeds {
        let dir = seed_dir(&r.out, &r.seeds, seed)?;
        let mut model = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_encoder(&mut model, &train, &cfg, &mut rng, |epoch, m, loss| {
            let mut line = format!("seed {seed} epoch {epoch}: loss {loss:.4}");
            if let Some(t) = &test {
                let bpd = evaluate_bpd(m, t, seed)?;
                let _ = write!(line, ", test {bpd:.4} bpd");
                rows.push(MetricsRow {
                    epoch,
                    split: "test".into(),
                    objective: objective.name().into(),
                    seed,
                    bpd,
                });
            }
            eprintln!("{line}");
            Ok(())
        })?;
        rows.push(MetricsRow {
            epoch: cfg.epochs,
            split: "train".into(),
            objective: objective.name().into(),
            seed,
            bpd: evaluate_bpd(&model, &train, seed)?,
        });
        let path = dir.join(MODEL_FILE);
        save_checkpoint(&model, &path)?;
        manifest.model("finetuned", &path, &model);
        manifest.output("model", &path)?;
    }
    let metrics = r.out.join(METRICS_FILE);
    write_metrics(&metrics, &rows)?;
    manifest.output("metrics", &metrics)?;
    for row in rows.iter().filter(|row| row.epoch == cfg.epochs) {
        println!("seed {} {} bpd {:.4}", row.seed, row.split, row.bpd);
    }
    manifest.finish(&r.out)
}

pub fn gap(a: GapArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let mut ckpts = a.checkpoint.clone();
    if ckpts.is_empty() {
        ckpts.extend(r.cfg.checkpoint.clone());
    }
    if ckpts.is_empty() {
        return Err(CliError::config("no checkpoint; pass --checkpoint"));
    }
    let src = data_source(&a.data, &r)?;
    let (train, test) = load_splits(&src, &a.data, &r)?;
    let (eval_role, eval) = match test {
        Some(t) => ("test", t),
        None => ("train", train),
    };
    let epochs = positive(a.epochs.or(r.cfg.epochs).unwrap_or(100), "epochs")?;
    let lr = a.lr.or(r.cfg.lr).unwrap_or(5e-4);
    let n_noise = positive(a.n_noise, "n_noise")?;
    let seed = r.seeds[0];

    let mut manifest = Manifest::new("gap", &r.seeds);
    manifest.config = json!({
        "dataset": src.describe(), "eval_split": eval_role, "checkpoints": ckpts,
        "epochs": epochs, "lr": f32_json(lr), "n_noise": n_noise,
    });
    manifest.dataset(eval_role, &src.describe(), &eval);

    let mut summary = String::from("checkpoint,amortized_bpd,optimized_bpd,gap_bpd\n");
    let mut per_datum =
        String::from("checkpoint,index,amortized_nats,optimized_nats,gap_nats,gap_se_nats\n");
    for path in &ckpts {
        let amortized = load_model(path)?;
        check_compatible(&amortized, &eval)?;
        manifest.model("evaluated", path, &amortized);
        let mut optimized = amortized.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        optimal_inference_dataset(&mut optimized, &eval, epochs, lr, &mut rng)?;
        let report = measure_gap(&amortized, &optimized, &eval, n_noise, seed)?;
        let label = path.display().to_string().replace(',', "_");
        let _ = writeln!(
            summary,
            "{label},{:?},{:?},{:?}",
            report.amortized_bpd, report.optimized_bpd, report.gap_bpd
        );
        for i in 0..eval.len() {
            let _ = writeln!(
                per_datum,
                "{label},{i},{:?},{:?},{:?},{:?}",
                report.amortized[i], report.optimized[i], report.gap[i], report.gap_se[i]
            );
        }
        println!(
            "{}: amortized {:.4} optimized {:.4} gap {:.4} bpd",
            path.display(),
            report.amortized_bpd,
            report.optimized_bpd,
            report.gap_bpd
        );
    }
    for (file, text, role) in [
        (GAP_FILE, &summary, "gap"),
        (GAP_DATUM_FILE, &per_datum, "gap per datum"),
    ] {
        let path = r.out.join(file);
        write_text(&path, text)?;
        manifest.output(role, &path)?;
    }
    manifest.finish(&r.out)
}

pub fn consistency(a: ConsistencyArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0, 1, 2])?;
    let ckpt = checkpoint_path(&a.checkpoint, &r)?;
    let pretrained = load_model(&ckpt)?;
    let names: Vec<String> = if !a.objective.is_empty() {
        a.objective.clone()
    } else if let Some(o) = &r.cfg.objective {
        o.split(',').map(|s| s.trim().to_string()).collect()
    } else {
        vec!["wake".into(), "sleep".into(), "reverse-sleep".into()]
    };
    let objectives = names
        .iter()
        .map(|n| Objective::parse(n, r.cfg.alpha, r.cfg.sigma))
        .collect::<bbvae::Result<Vec<_>>>()?;
    let cfg = ConsistencyConfig {
        n_train: positive(a.n_train.or(r.cfg.n_train).unwrap_or(10_000), "n_train")?,
        n_test: positive(a.n_test.or(r.cfg.n_test).unwrap_or(1_000), "n_test")?,
        objectives,
        epochs: positive(a.epochs.or(r.cfg.epochs).unwrap_or(100), "epochs")?,
        lr: a.lr.or(r.cfg.lr).unwrap_or(1e-3),
        batch_size: a.batch_size.or(r.cfg.batch_size).unwrap_or(100),
        seeds: r.seeds.clone(),
        data_seed: a.data_seed,
    };
    EncoderTrainConfig {
        objective: Objective::Wake,
        source: SampleSource::Prior,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        epochs: cfg.epochs,
    }
    .validate()?;

    let mut manifest = Manifest::new("consistency", &r.seeds);
    manifest.config = json!({
        "checkpoint": ckpt, "objectives": names, "n_train": cfg.n_train, "n_test": cfg.n_test,
        "epochs": cfg.epochs, "lr": f32_json(cfg.lr), "batch_size": cfg.batch_size, "data_seed": cfg.data_seed,
    });
    manifest.model("pretrained", &ckpt, &pretrained);

    let (train, test) = synth_from_model(&pretrained, cfg.n_train, cfg.n_test, cfg.data_seed)?;
    for (name, data) in [("synth-train.bbds", &train), ("synth-test.bbds", &test)] {
        let path = r.out.join(name);
        save_bbds(data, &path)?;
        manifest.dataset(
            name.trim_end_matches(".bbds"),
            &path.display().to_string(),
            data,
        );
        manifest.output("synthetic data", &path)?;
    }
    let traces = consistency_on(&pretrained, &train, &test, &cfg)?;

    let mut rows = Vec::new();
    for t in &traces {
        rows.extend(t.test_bpd.iter().enumerate().map(|(e, &bpd)| MetricsRow {
            epoch: e + 1,
            split: "test".into(),
            objective: t.objective.name().into(),
            seed: t.seed,
            bpd,
        }));
    }
    let mut summary = String::from("objective,epoch,mean_bpd,std_bpd\n");
    for o in &cfg.objectives {
        let curve = summarize_traces(&traces, o.name());
        for (e, (mean, std)) in curve.iter().enumerate() {
            let _ = writeln!(summary, "{},{},{mean:?},{std:?}", o.name(), e + 1);
        }
        if let Some((mean, std)) = curve.last() {
            println!("{}: final test {mean:.4} +- {std:.4} bpd", o.name());
        }
    }
    let metrics = r.out.join(METRICS_FILE);
    write_metrics(&metrics, &rows)?;
    manifest.output("metrics", &metrics)?;
    let path = r.out.join(SUMMARY_FILE);
    write_text(&path, &summary)?;
    manifest.output("summary", &path)?;
    manifest.finish(&r.out)
}

pub fn compress(a: CompressArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let mut manifest = Manifest::new("compress", &r.seeds);
    let ckpt = checkpoint_path(&a.checkpoint, &r)?;
    let model = load_model(&ckpt)?;
    let src = data_source(&a.data, &r)?;
    let data = load_target(&src, &a.data, &r, &a.split)?;
    check_compatible(&model, &data)?;
    let k = match a.k {
        Some(k) => k,
        None => single_k(&r.cfg.k)?.unwrap_or(0),
    };
    let lr = a.lr.or(r.cfg.lr).unwrap_or(5e-3);
    let cfg = BitsBackConfig {
        seed: r.seeds[0],
        ..BitsBackConfig::default()
    };
    let mode = coding_mode(k, lr);

    let run = compress_traced(&model, &data, &cfg, mode)?;
    let path = r.out.join(STREAM_FILE);
    write_text_bytes(&path, &run.stream.to_bytes())?;
    let report = rate_report(&run.stream, Some(run.seconds), None);
    let rate = json!({
        "k": k, "lr": f32_json(lr), "count": report.count, "dims": report.dims, "net_bits": report.net_bits,
        "bpd": report.bpd, "compress_secs_per_item": report.compress_secs_per_item,
        "stream_bytes": std::fs::metadata(&path)?.len(),
    });
    let rate_path = r.out.join(RATE_FILE);
    write_text(
        &rate_path,
        &(serde_json::to_string_pretty(&rate).expect("json") + "\n"),
    )?;

    manifest.config = json!({
        "dataset": src.describe(), "split": a.split, "checkpoint": ckpt, "k": k, "lr": f32_json(lr),
        "latent_precision": cfg.latent_precision, "q_precision": cfg.q_precision,
        "obs_precision": cfg.obs_precision, "bits_back_seed": cfg.seed,
    });
    manifest.model("coder", &ckpt, &model);
    manifest.dataset("input", &src.describe(), &data);
    manifest.output("stream", &path)?;
    manifest.output("rate", &rate_path)?;
    println!(
        "{} items, {} net bits, {:.4} bpd",
        report.count, report.net_bits, report.bpd
    );
    manifest.finish(&r.out)
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn decompress(a: DecompressArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let mut manifest = Manifest::new("decompress", &r.seeds);
    let ckpt = checkpoint_path(&a.checkpoint, &r)?;
    let model = load_model(&ckpt)?;
    let bytes = std::fs::read(&a.input)
        .map_err(|e| CliError::data(format!("cannot read stream {}: {e}", a.input.display())))?;
    let stream = CompressedStream::from_bytes(&bytes).map_err(|e| match e {
        bbvae::Error::Parse { .. } => CliError {
            code: 4,
            kind: "stream",
            message: e.to_string(),
        },
        other => other.into(),
    })?;
    let (data, secs) = decompress_timed(&model, &stream)?;
    let path = r.out.join(DECODED_FILE);
    save_bbds(&data, &path)?;

    manifest.config = json!({
        "checkpoint": ckpt, "input": a.input, "k": stream.header.mode.k(),
        "decompress_secs_per_item": if data.is_empty() { 0.0 } else { secs / data.len() as f64 },
    });
    manifest.model("coder", &ckpt, &model);
    manifest.dataset("decoded", &path.display().to_string(), &data);
    manifest.output("decoded", &path)?;
    println!("{} items restored to {}", data.len(), path.display());
    manifest.finish(&r.out)
}

pub fn tradeoff(a: TradeoffArgs) -> CliResult<()> {
    let r = resolve(&a.common, &[0])?;
    let mut manifest = Manifest::new("tradeoff", &r.seeds);
    let ckpt = checkpoint_path(&a.checkpoint, &r)?;
    let model = load_model(&ckpt)?;
    let src = data_source(&a.data, &r)?;
    let data = load_target(&src, &a.data, &r, &a.split)?;
    check_compatible(&model, &data)?;
    let ks = match (&a.k, &r.cfg.k) {
        (Some(s), _) => parse_k_list(s)?,
        (None, Some(ks)) if !ks.is_empty() => ks.clone(),
        _ => vec![0, 1, 2, 5, 10],
    };
    let lr = a.lr.or(r.cfg.lr).unwrap_or(5e-3);
    let cfg = BitsBackConfig {
        seed: r.seeds[0],
        ..BitsBackConfig::default()
    };

    let mut csv = String::from("k,bpd,net_bits,compress_s_per_img,decompress_s_per_img\n");
    for &k in &ks {
        let run = compress_traced(&model, &data, &cfg, coding_mode(k, lr))?;
        let decompress_secs = if a.verify {
            let (decoded, secs) = decompress_timed(&model, &run.stream)?;
            if decoded.as_flat() != data.as_flat() {
                return Err(bbvae::Error::Stream(format!(
                    "K={k}: decoded data differs from the input"
                ))
                .into());
            }
            Some(secs)
        } else {
            None
        };
        let rep = rate_report(&run.stream, Some(run.seconds), decompress_secs);
        let dec = rep
            .decompress_secs_per_item
            .map_or(String::new(), |s| format!("{s:?}"));
        let _ = writeln!(
            csv,
            "{k},{:?},{},{:?},{dec}",
            rep.bpd,
            rep.net_bits,
            rep.compress_secs_per_item.unwrap_or(0.0)
        );
        eprintln!("K={k}: {:.4} bpd", rep.bpd);
    }
    let path = r.out.join(TRADEOFF_FILE);
    write_text(&path, &csv)?;
    print!("{csv}");

    manifest.config = json!({
        "dataset": src.describe(), "split": a.split, "checkpoint": ckpt, "k": ks, "lr": f32_json(lr),
        "verify": a.verify, "bits_back_seed": cfg.seed,
    });
    manifest.model("coder", &ckpt, &model);
    manifest.dataset("input", &src.describe(), &data);
    manifest.output("tradeoff", &path)?;
    manifest.finish(&r.out)
}
