//! Flat `key = value` experiment configs and CSV metrics.
//!
//! Config lines look like `objective = half-asleep`; blank lines and lines
//! starting with `#` are skipped. Lists (`seeds`) are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Keys accepted by [`ExperimentConfig`].
pub const CONFIG_KEYS: &[&str] = &[
    "objective",
    "alpha",
    "sigma",
    "lr",
    "epochs",
    "batch_size",
    "seeds",
    "k",
    "dataset",
    "train",
    "test",
    "checkpoint",
    "out",
    "hidden",
    "latent",
    "n_train",
    "n_test",
];

/// Parsed key/value pairs with their line numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let key = k.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if let Some((first, _)) = entries.insert(key.clone(), (i + 1, v.trim().to_string())) {
                return Err(Error::config(format!(
                    "line {}: '{key}' already set on line {first}",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Typed lookup; `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("line {line}: cannot parse {key} = '{v}'"))),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::config(format!("line {line}: cannot parse {key} item '{s}'"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

/// Every setting an experiment config may carry. Absent keys stay `None` so
/// command-line flags and built-in defaults can fill them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub objective: Option<String>,
    pub alpha: Option<f64>,
    pub sigma: Option<f32>,
    pub lr: Option<f32>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub k: Option<Vec<usize>>,
    /// Dataset kind or directory (`binary-mnist`, `grey-mnist`, a path).
    pub dataset: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub hidden: Option<usize>,
    pub latent: Option<usize>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::config(format!("unknown config key '{unknown}'")));
        }
        Ok(Self {
            objective: kv.raw("objective").map(str::to_string),
            alpha: kv.get("alpha")?,
            sigma: kv.get("sigma")?,
            lr: kv.get("lr")?,
            epochs: kv.get("epochs")?,
            batch_size: kv.get("batch_size")?,
            seeds: kv.get_list("seeds")?,
            k: kv.get_list("k")?,
            dataset: kv.raw("dataset").map(str::to_string),
            train: kv.raw("train").map(PathBuf::from),
            test: kv.raw("test").map(PathBuf::from),
            checkpoint: kv.raw("checkpoint").map(PathBuf::from),
            out: kv.raw("out").map(PathBuf::from),
            hidden: kv.get("hidden")?,
            latent: kv.get("latent")?,
            n_train: kv.get("n_train")?,
            n_test: kv.get("n_test")?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvConfig::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub objective: String,
    pub seed: u64,
    pub bpd: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,objective,seed,bpd";

/// CSV text with a header line. BPD is written with enough digits to
/// round-trip an `f64`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        for field in [&r.split, &r.objective] {
            assert!(
                !field.contains([',', '\n', '"']),
                "metrics field {field:?} needs quoting"
            );
        }
        writeln!(
            out,
            "{},{},{},{},{:?}",
            r.epoch, r.split, r.objective, r.seed, r.bpd
        )
        .expect("string write");
    }
    out
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Parses CSV written by [`metrics_csv`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::parse(0, "missing metrics header"));
    }
    let mut offset = METRICS_HEADER.len() as u64 + 1;
    let mut rows = Vec::new();
    for line in lines {
        let bad = |what: &str| Error::parse(offset, format!("bad {what} in metrics line '{line}'"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("field count"));
        }
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| bad("epoch"))?,
            split: f[1].to_string(),
            objective: f[2].to_string(),
            seed: f[3].parse().map_err(|_| bad("seed"))?,
            bpd: f[4].parse().map_err(|_| bad("bpd"))?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = "# fine-tune run\nobjective = half-asleep\nalpha=0.5\n\nlr = 5e-4\nepochs = 100\nseeds = 0, 1,2\nk = 0,1,2,5,10\ntrain = data/train.bbds\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.objective.as_deref(), Some("half-asleep"));
        assert_eq!(cfg.alpha, Some(0.5));
        assert_eq!(cfg.lr, Some(5e-4));
        assert_eq!(cfg.epochs, Some(100));
        assert_eq!(cfg.seeds, Some(vec![0, 1, 2]));
        assert_eq!(cfg.k, Some(vec![0, 1, 2, 5, 10]));
        assert_eq!(cfg.train, Some(PathBuf::from("data/train.bbds")));
        assert_eq!(cfg.sigma, None);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "objective",
            "= 3",
            "lr = fast",
            "epochs = -1",
            "colour = red",
            "seeds = 1,x",
            "lr = 1\nlr = 2",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let err = ExperimentConfig::parse("\n\nlr = fast")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            MetricsRow {
                epoch: 1,
                split: "train".into(),
                objective: "wake".into(),
                seed: 0,
                bpd: 0.123_456_789_012_345_6,
            },
            MetricsRow {
                epoch: 100,
                split: "test".into(),
                objective: "half-asleep".into(),
                seed: 2,
                bpd: 0.2,
            },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("epoch,split,objective,seed,bpd\n1,train,wake,0,0.12345678901234"));
        assert_eq!(parse_metrics(&text).unwrap(), rows);
        assert!(parse_metrics("epoch,bpd\n").is_err());
        assert!(matches!(
            parse_metrics("epoch,split,objective,seed,bpd\n1,train,wake,0\n"),
            Err(Error::Parse { offset: 31, .. })
        ));
    }
}
