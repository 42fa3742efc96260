//! Resolving flags, config files and datasets into concrete inputs.

use std::path::{Path, PathBuf};

use bbvae::data::{self, binarize, load_bbds, load_mnist};
use bbvae::experiment::ExperimentConfig;
use bbvae::model::load_checkpoint;
use bbvae::{Dataset, Domain, VaeModel};

use crate::{CliError, CliResult, Common, DataArgs};

pub const DEFAULT_DATA_ROOT: &str = "data/mnist";

/// Flags merged over the optional config file.
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub data_root: PathBuf,
}

/// `default_seeds` applies when neither `--seed` nor the config sets any.
pub fn resolve(common: &Common, default_seeds: &[u64]) -> CliResult<Resolved> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            bbvae::Error::Io(io) => {
                CliError::config(format!("cannot read config {}: {io}", path.display()))
            }
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::config("no output directory; pass --out"))?;
    let seeds = if common.seed.is_empty() {
        cfg.seeds.clone().unwrap_or_else(|| default_seeds.to_vec())
    } else {
        common.seed.clone()
    };
    if seeds.is_empty() {
        return Err(CliError::config("seed list is empty"));
    }
    let data_root = common
        .data_root
        .clone()
        .or_else(data::data_root_from_env)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT));
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::config(format!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })?;
    Ok(Resolved {
        cfg,
        out,
        seeds,
        data_root,
    })
}

/// Where data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist {
        binary: bool,
        root: PathBuf,
    },
    Files {
        train: PathBuf,
        test: Option<PathBuf>,
    },
}

impl DataSource {
    pub fn describe(&self) -> String {
        match self {
            DataSource::Mnist { binary: true, root } => format!("binary-mnist:{}", root.display()),
            DataSource::Mnist {
                binary: false,
                root,
            } => format!("grey-mnist:{}", root.display()),
            DataSource::Files { train, test } => match test {
                Some(t) => format!("{},{}", train.display(), t.display()),
                None => train.display().to_string(),
            },
        }
    }
}

pub fn data_source(args: &DataArgs, r: &Resolved) -> CliResult<DataSource> {
    let name = args
        .dataset
        .clone()
        .or_else(|| r.cfg.dataset.clone())
        .or_else(|| r.cfg.train.as_ref().map(|p| p.display().to_string()))
        .ok_or_else(|| CliError::config("no dataset; pass --dataset"))?;
    let test = args.test_dataset.clone().or_else(|| r.cfg.test.clone());
    let mnist = |binary| {
        if test.is_some() {
            return Err(CliError::config(
                "--test-dataset only applies to file datasets",
            ));
        }
        Ok(DataSource::Mnist {
            binary,
            root: r.data_root.clone(),
        })
    };
    match name.as_str() {
        "binary-mnist" | "mnist-binary" | "binary" => mnist(true),
        "grey-mnist" | "gray-mnist" | "mnist-grey" | "grey" | "mnist" => mnist(false),
        path => Ok(DataSource::Files {
            train: PathBuf::from(path),
            test,
        }),
    }
}

fn read_file(path: &Path) -> CliResult<Dataset> {
    load_bbds(path).map_err(|e| match e {
        bbvae::Error::Io(io) => {
            CliError::data(format!("cannot read dataset {}: {io}", path.display()))
        }
        other => other.into(),
    })
}

fn limit(data: Dataset, n: Option<usize>, what: &str) -> CliResult<Dataset> {
    match n {
        Some(0) => Err(CliError::config(format!("{what} must be positive"))),
        Some(n) if n > data.len() => Err(CliError::config(format!(
            "{what} = {n} but the dataset has {} items",
            data.len()
        ))),
        Some(n) => Ok(data.take(n)),
        None => Ok(data),
    }
}

/// Training split and (when available) test split.
pub fn load_splits(
    src: &DataSource,
    args: &DataArgs,
    r: &Resolved,
) -> CliResult<(Dataset, Option<Dataset>)> {
    let n_train = args.n_train.or(r.cfg.n_train);
    let n_test = args.n_test.or(r.cfg.n_test);
    let (train, test) = match src {
        DataSource::Mnist { binary, root } => {
            let splits = load_mnist(root).map_err(|e| match e {
                bbvae::Error::Io(io) => CliError::data(format!(
                    "cannot read MNIST from {} ({io}); set --data-root or {}",
                    root.display(),
                    data::DATA_ROOT_ENV
                )),
                other => other.into(),
            })?;
            if *binary {
                (binarize(&splits.train), Some(binarize(&splits.test)))
            } else {
                (splits.train, Some(splits.test))
            }
        }
        DataSource::Files { train, test } => (
            read_file(train)?,
            test.as_deref().map(read_file).transpose()?,
        ),
    };
    let train = limit(train, n_train, "n_train")?;
    let test = test.map(|t| limit(t, n_test, "n_test")).transpose()?;
    Ok((train, test))
}

/// The single dataset a coding command works on: the named MNIST split, or
/// the file itself.
pub fn load_target(
    src: &DataSource,
    args: &DataArgs,
    r: &Resolved,
    split: &str,
) -> CliResult<Dataset> {
    let (train, test) = load_splits(src, args, r)?;
    match (src, split) {
        (DataSource::Files { .. }, _) => Ok(train),
        (DataSource::Mnist { .. }, "train") => Ok(train),
        (DataSource::Mnist { .. }, "test") => Ok(test.expect("MNIST has a test split")),
        (_, other) => Err(CliError::config(format!(
            "unknown split '{other}' (train or test)"
        ))),
    }
}

pub fn checkpoint_path(flag: &Option<PathBuf>, r: &Resolved) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| r.cfg.checkpoint.clone())
        .ok_or_else(|| CliError::config("no checkpoint; pass --checkpoint"))
}

pub fn load_model(path: &Path) -> CliResult<VaeModel> {
    load_checkpoint(path).map_err(|e| match e {
        bbvae::Error::Io(io) => {
            CliError::data(format!("cannot read checkpoint {}: {io}", path.display()))
        }
        other => other.into(),
    })
}

/// Model input must match what the checkpoint was trained on.
pub fn check_compatible(model: &VaeModel, data: &Dataset) -> CliResult<()> {
    if data.dim() != model.data_dim() || data.domain() != model.arch.domain() {
        return Err(CliError::data(format!(
            "dataset is {} x {} {}, model expects {} {}",
            data.len(),
            data.dim(),
            data.domain().name(),
            model.data_dim(),
            model.arch.domain().name()
        )));
    }
    Ok(())
}

pub fn default_latent(domain: Domain) -> usize {
    match domain {
        Domain::Binary => 16,
        _ => 32,
    }
}

/// `0..10` (inclusive), `0,1,2,5,10` or a single number.
pub fn parse_k_list(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::config(format!("cannot parse K list '{s}'"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let ks: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    if ks.is_empty() {
        return Err(bad());
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_lists() {
        assert_eq!(parse_k_list("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_k_list("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_k_list("0, 1,2,5,10").unwrap(), vec![0, 1, 2, 5, 10]);
        assert_eq!(parse_k_list("7").unwrap(), vec![7]);
        for bad in ["", "3..1", "a..b", "1,,2", "-1"] {
            assert_eq!(parse_k_list(bad).unwrap_err().code, 2, "{bad}");
        }
    }
}
