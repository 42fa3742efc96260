use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bbvae::data::{load_bbds, save_bbds, write_bbds};
use bbvae::experiment::parse_metrics;
use bbvae::model::load_checkpoint;
use bbvae::{Dataset, Domain};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bbvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbvae"))
        .args(args)
        .env_remove("BBVAE_DATA_ROOT")
        .output()
        .expect("run bbvae")
}

fn ok(args: &[&str]) -> String {
    let out = bbvae(args);
    assert!(
        out.status.success(),
        "bbvae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = bbvae(args);
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Binary 4x4 images: a bar whose position depends on the index, plus a
/// sprinkle of hash noise.
fn toy(n: usize, salt: usize) -> Dataset {
    let mut items = Vec::with_capacity(n * 16);
    for i in 0..n {
        let bar = (i + salt) % 4;
        for p in 0..16 {
            let noise = (i * 131 + p * 17 + salt * 7) % 23 == 0;
            items.push(u8::from((p % 4 == bar) != noise));
        }
    }
    Dataset::new(items, 16, Domain::Binary).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    train: PathBuf,
    test: PathBuf,
    model: PathBuf,
}

/// Small trained model shared by the coding tests.
fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.bbds");
    let test = dir.path().join("test.bbds");
    save_bbds(&toy(300, 0), &train).unwrap();
    save_bbds(&toy(40, 1), &test).unwrap();
    let run = dir.path().join("train-run");
    ok(&[
        "train",
        "--dataset",
        s(&train),
        "--test-dataset",
        s(&test),
        "--hidden",
        "8",
        "--latent",
        "2",
        "--epochs",
        "4",
        "--eval-every",
        "2",
        "--lr",
        "0.01",
        "--out",
        s(&run),
    ]);
    let model = run.join("model.bblv");
    Fixture {
        dir,
        train,
        test,
        model,
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn train_writes_checkpoints_metrics_and_manifest() {
    let f = fixture();
    let run = f.dir.path().join("train-run");
    let ckpts = run.join("checkpoints");
    for e in ["epoch-0002.bblv", "epoch-0004.bblv"] {
        assert!(ckpts.join(e).is_file(), "{e}");
    }
    let model = load_checkpoint(&f.model).unwrap();
    assert_eq!(
        (model.arch.data_dim, model.arch.hidden, model.arch.latent),
        (16, 8, 2)
    );
    assert_eq!(
        load_checkpoint(ckpts.join("epoch-0004.bblv"))
            .unwrap()
            .checksum(),
        model.checksum()
    );

    let rows = parse_metrics(&std::fs::read_to_string(run.join("metrics.csv")).unwrap()).unwrap();
    let mut keys: Vec<(usize, &str)> = rows.iter().map(|r| (r.epoch, r.split.as_str())).collect();
    keys.sort();
    assert_eq!(
        keys,
        vec![(2, "test"), (2, "train"), (4, "test"), (4, "train")]
    );
    assert!(rows
        .iter()
        .all(|r| r.bpd.is_finite() && r.bpd > 0.0 && r.objective == "joint"));

    let m = manifest(&run);
    assert_eq!(m["command"], "train");
    assert_eq!(m["seeds"], serde_json::json!([0]));
    assert_eq!(m["config"]["latent"], 2);
    assert_eq!(
        m["models"][0]["checksum"],
        format!("{:016x}", model.checksum())
    );
    let train_bytes = write_bbds(&load_bbds(&f.train).unwrap());
    assert_eq!(m["datasets"][0]["sha256"], sha256_hex(&train_bytes));
    let outputs = m["outputs"].as_array().unwrap();
    let model_rec = outputs.iter().find(|o| o["role"] == "model").unwrap();
    assert_eq!(
        model_rec["sha256"],
        sha256_hex(&std::fs::read(&f.model).unwrap())
    );
    assert_eq!(
        outputs.iter().filter(|o| o["role"] == "checkpoint").count(),
        2
    );
}

#[test]
fn compress_then_decompress_is_byte_identical() {
    let f = fixture();
    for k in ["0", "3"] {
        let c = f.dir.path().join(format!("c{k}"));
        let d = f.dir.path().join(format!("d{k}"));
        ok(&[
            "compress",
            "--checkpoint",
            s(&f.model),
            "--dataset",
            s(&f.test),
            "--k",
            k,
            "--out",
            s(&c),
        ]);
        ok(&[
            "decompress",
            "--checkpoint",
            s(&f.model),
            "--input",
            s(&c.join("stream.bbst")),
            "--out",
            s(&d),
        ]);
        assert_eq!(
            std::fs::read(d.join("decoded.bbds")).unwrap(),
            std::fs::read(&f.test).unwrap(),
            "K={k}"
        );
        let rate: Value =
            serde_json::from_str(&std::fs::read_to_string(c.join("rate.json")).unwrap()).unwrap();
        assert_eq!(rate["count"], 40);
        assert_eq!(rate["k"], k.parse::<u64>().unwrap());
        assert!(rate["bpd"].as_f64().unwrap() > 0.0);
        let m = manifest(&c);
        assert_eq!(m["command"], "compress");
        assert!(m["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .any(|o| o["role"] == "stream"));
    }
}

#[test]
fn tradeoff_k0_row_matches_compress() {
    let f = fixture();
    let c = f.dir.path().join("c");
    ok(&[
        "compress",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&f.test),
        "--out",
        s(&c),
    ]);
    let rate: Value =
        serde_json::from_str(&std::fs::read_to_string(c.join("rate.json")).unwrap()).unwrap();

    let t = f.dir.path().join("t");
    ok(&[
        "tradeoff",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&f.test),
        "--k",
        "0..2",
        "--verify",
        "--out",
        s(&t),
    ]);
    let csv = std::fs::read_to_string(t.join("tradeoff.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("k,bpd,net_bits,compress_s_per_img,decompress_s_per_img")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        ["0", "1", "2"]
    );
    assert_eq!(
        rows[0][1].parse::<f64>().unwrap(),
        rate["bpd"].as_f64().unwrap()
    );
    assert_eq!(
        rows[0][2].parse::<i64>().unwrap(),
        rate["net_bits"].as_i64().unwrap()
    );
    assert!(rows.iter().all(|r| !r[4].is_empty()));
}

#[test]
fn finetune_gap_and_consistency_runs() {
    let f = fixture();
    let ft = f.dir.path().join("ft");
    ok(&[
        "finetune-encoder",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&f.train),
        "--test-dataset",
        s(&f.test),
        "--objective",
        "half-asleep",
        "--alpha",
        "0.5",
        "--epochs",
        "2",
        "--seed",
        "0,1",
        "--out",
        s(&ft),
    ]);
    let rows = parse_metrics(&std::fs::read_to_string(ft.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == "test").count(), 4);
    let base = load_checkpoint(&f.model).unwrap();
    for seed in 0..2 {
        let m = load_checkpoint(ft.join(format!("seed-{seed}/model.bblv"))).unwrap();
        assert_eq!(m.decoder_checksum(), base.decoder_checksum());
        assert_ne!(m.checksum(), base.checksum());
    }

    let series = f.dir.path().join("train-run/checkpoints");
    let g = f.dir.path().join("gap");
    ok(&[
        "gap",
        "--checkpoint",
        s(&series.join("epoch-0002.bblv")),
        s(&series.join("epoch-0004.bblv")),
        "--dataset",
        s(&f.train),
        "--test-dataset",
        s(&f.test),
        "--epochs",
        "3",
        "--n-noise",
        "2",
        "--out",
        s(&g),
    ]);
    let gap = std::fs::read_to_string(g.join("gap.csv")).unwrap();
    assert_eq!(gap.lines().count(), 3);
    assert_eq!(
        std::fs::read_to_string(g.join("gap_per_datum.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2 * 40
    );

    let c = f.dir.path().join("cons");
    ok(&[
        "consistency",
        "--checkpoint",
        s(&f.model),
        "--n-train",
        "50",
        "--n-test",
        "20",
        "--epochs",
        "2",
        "--seed",
        "0,1",
        "--out",
        s(&c),
    ]);
    let summary = std::fs::read_to_string(c.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
    assert_eq!(load_bbds(c.join("synth-train.bbds")).unwrap().len(), 50);
}

#[test]
fn config_file_is_used_and_flags_override_it() {
    let f = fixture();
    let cfg = f.dir.path().join("run.cfg");
    let out = f.dir.path().join("from-config");
    std::fs::write(
        &cfg,
        format!(
            "# compress\ncheckpoint = {}\ndataset = {}\nk = 2\nout = {}\n",
            s(&f.model),
            s(&f.test),
            s(&out)
        ),
    )
    .unwrap();
    ok(&["compress", "--config", s(&cfg)]);
    assert_eq!(manifest(&out)["config"]["k"], 2);
    ok(&["compress", "--config", s(&cfg), "--k", "0"]);
    assert_eq!(manifest(&out)["config"]["k"], 0);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let out = f.dir.path().join("x");
    let o = s(&out);

    // Configuration problems.
    let (c, err) = code(&[
        "compress",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&f.test),
    ]);
    assert_eq!(c, 2, "{err}");
    assert!(
        err.starts_with("bbvae: error[config]:") && err.trim_end().lines().count() == 1,
        "{err}"
    );
    let bad_cfg = f.dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "colour = red\n").unwrap();
    assert_eq!(code(&["compress", "--config", s(&bad_cfg)]).0, 2);
    assert_eq!(
        code(&[
            "finetune-encoder",
            "--checkpoint",
            s(&f.model),
            "--dataset",
            s(&f.train),
            "--objective",
            "nap",
            "--out",
            o
        ])
        .0,
        2
    );
    assert_eq!(
        code(&[
            "tradeoff",
            "--checkpoint",
            s(&f.model),
            "--dataset",
            s(&f.test),
            "--k",
            "5..1",
            "--out",
            o
        ])
        .0,
        2
    );

    // Data problems.
    let missing = f.dir.path().join("missing.bbds");
    let (c, err) = code(&[
        "compress",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&missing),
        "--out",
        o,
    ]);
    assert_eq!(c, 3, "{err}");
    assert!(err.starts_with("bbvae: error[data]:"), "{err}");
    let garbage = f.dir.path().join("garbage.bbds");
    std::fs::write(&garbage, b"BBDS\x07").unwrap();
    assert_eq!(
        code(&[
            "compress",
            "--checkpoint",
            s(&f.model),
            "--dataset",
            s(&garbage),
            "--out",
            o
        ])
        .0,
        3
    );
    let wide = f.dir.path().join("wide.bbds");
    save_bbds(
        &Dataset::new(vec![0; 20], 20, Domain::Binary).unwrap(),
        &wide,
    )
    .unwrap();
    assert_eq!(
        code(&[
            "compress",
            "--checkpoint",
            s(&f.model),
            "--dataset",
            s(&wide),
            "--out",
            o
        ])
        .0,
        3
    );
    assert_eq!(
        code(&[
            "train",
            "--dataset",
            "binary-mnist",
            "--data-root",
            s(&missing),
            "--out",
            o
        ])
        .0,
        3
    );

    // Stream integrity problems.
    let c0 = f.dir.path().join("c0");
    ok(&[
        "compress",
        "--checkpoint",
        s(&f.model),
        "--dataset",
        s(&f.test),
        "--out",
        s(&c0),
    ]);
    let stream = std::fs::read(c0.join("stream.bbst")).unwrap();
    let damaged = f.dir.path().join("damaged.bbst");
    let mut bytes = stream.clone();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&damaged, &bytes).unwrap();
    let (c, err) = code(&[
        "decompress",
        "--checkpoint",
        s(&f.model),
        "--input",
        s(&damaged),
        "--out",
        o,
    ]);
    assert_eq!(c, 4, "{err}");
    assert!(err.starts_with("bbvae: error[stream]:"), "{err}");
    let other = f.dir.path().join("train-run/checkpoints/epoch-0002.bblv");
    assert_eq!(
        code(&[
            "decompress",
            "--checkpoint",
            s(&other),
            "--input",
            s(&c0.join("stream.bbst")),
            "--out",
            o
        ])
        .0,
        4
    );
}
