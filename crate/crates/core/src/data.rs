//! Datasets: IDX (MNIST) ingestion, binarization, synthetic draws from a
//! trained model, and the `BBDS` cache format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{sample_batch, LatentSource, VaeModel};

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_ROOT_ENV: &str = "BBVAE_DATA_ROOT";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const BBDS_MAGIC: &[u8; 4] = b"BBDS";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Values in `{0, 1}`.
    Binary,
    /// Values in `0..=255`.
    Grey256,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::Binary => 0,
            Domain::Grey256 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Domain::Binary),
            1 => Some(Domain::Grey256),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Binary => "binary",
            Domain::Grey256 => "grey256",
        }
    }

    /// Factor that maps raw values onto the network's `[0, 1]` input range.
    pub fn input_scale(self) -> f32 {
        match self {
            Domain::Binary => 1.0,
            Domain::Grey256 => 1.0 / 255.0,
        }
    }

    pub fn validate(self, values: &[u8]) -> Result<()> {
        if self == Domain::Binary {
            if let Some(pos) = values.iter().position(|&v| v > 1) {
                return Err(Error::Domain(format!(
                    "value {} at index {pos} is not binary",
                    values[pos]
                )));
            }
        }
        Ok(())
    }
}

/// Flat collection of equally sized integer vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    items: Vec<u8>,
    dim: usize,
    domain: Domain,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(items: Vec<u8>, dim: usize, domain: Domain) -> Result<Self> {
        if dim == 0 || items.len() % dim != 0 {
            return Err(Error::shape(
                "dataset",
                format!("{} values do not split into rows of {dim}", items.len()),
            ));
        }
        domain.validate(&items)?;
        Ok(Self {
            items,
            dim,
            domain,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} items", labels.len(), self.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn item(&self, i: usize) -> &[u8] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    /// All items, row-major.
    pub fn as_flat(&self) -> &[u8] {
        &self.items
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[u8]> {
        self.items.chunks_exact(self.dim)
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            items: self.items[..n * self.dim].to_vec(),
            dim: self.dim,
            domain: self.domain,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Items at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut items = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            items.extend_from_slice(self.item(i));
        }
        Dataset {
            items,
            dim: self.dim,
            domain: self.domain,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Training and test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(at as u64, format!("truncated IDX header reading {what}")))
}

/// Parses an IDX unsigned-byte rank-3 image file; images are flattened.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "item count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(Error::parse(
            bytes.len() as u64,
            format!(
                "truncated IDX payload: expected {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if dim == 0 {
        return Err(Error::parse(8, "zero-sized IDX images"));
    }
    Dataset::new(bytes[16..expected].to_vec(), dim, Domain::Grey256)
}

/// Parses an IDX unsigned-byte rank-1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            0,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, "item count")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("truncated IDX labels: expected {expected} bytes"),
        ));
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let data = parse_idx_images(&fs::read(images)?)?;
    match labels {
        Some(path) => data.with_labels(parse_idx_labels(&fs::read(path)?)?),
        None => Ok(data),
    }
}

/// Loads the standard MNIST train/test IDX files from `root`.
pub fn load_mnist(root: impl AsRef<Path>) -> Result<Splits> {
    let root = root.as_ref();
    let labels = |name: &str| {
        let p = root.join(name);
        p.exists().then_some(p)
    };
    let train_labels = labels(MNIST_TRAIN_LABELS);
    let test_labels = labels(MNIST_TEST_LABELS);
    Ok(Splits {
        train: load_idx(root.join(MNIST_TRAIN_IMAGES), train_labels.as_deref())?,
        test: load_idx(root.join(MNIST_TEST_IMAGES), test_labels.as_deref())?,
    })
}

/// Directory named by [`DATA_ROOT_ENV`], if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Static thresholding at half intensity: grey `v` maps to 1 iff `v > 127.5`.
/// Binary input is returned unchanged.
pub fn binarize(data: &Dataset) -> Dataset {
    if data.domain == Domain::Binary {
        return data.clone();
    }
    Dataset {
        items: data.items.iter().map(|&v| u8::from(v >= 128)).collect(),
        dim: data.dim,
        domain: Domain::Binary,
        labels: data.labels.clone(),
    }
}

/// Train/test datasets drawn from a frozen model with prior latents. The two
/// splits use disjoint random streams of the same seed.
pub fn synth_from_model(
    model: &VaeModel,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        const CHUNK: usize = 500;
        let mut items = Vec::with_capacity(n * model.data_dim());
        let mut left = n;
        while left > 0 {
            let k = left.min(CHUNK);
            items.extend(sample_batch(model, k, LatentSource::Prior, &mut rng)?);
            left -= k;
        }
        Dataset::new(items, model.data_dim(), model.arch.domain())
    };
    Ok((draw(n_train, 0)?, draw(n_test, 1)?))
}

/// Serializes to `BBDS`: magic, domain tag u8, count u32, dim u32, then the
/// raw values (all integers little-endian).
pub fn write_bbds(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + data.items.len());
    out.extend_from_slice(BBDS_MAGIC);
    out.push(data.domain.tag());
    out.extend((data.len() as u32).to_le_bytes());
    out.extend((data.dim as u32).to_le_bytes());
    out.extend_from_slice(&data.items);
    out
}

pub fn read_bbds(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 13 {
        return Err(Error::parse(bytes.len() as u64, "truncated BBDS header"));
    }
    if &bytes[..4] != BBDS_MAGIC {
        return Err(Error::parse(0, "bad BBDS magic"));
    }
    let domain = Domain::from_tag(bytes[4])
        .ok_or_else(|| Error::parse(4, format!("unknown domain tag {}", bytes[4])))?;
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let expected = 13 + count * dim;
    if bytes.len() != expected {
        return Err(Error::parse(
            bytes.len().min(expected) as u64,
            format!(
                "BBDS payload should end at byte {expected}, file has {}",
                bytes.len()
            ),
        ));
    }
    Dataset::new(bytes[13..].to_vec(), dim, domain).map_err(|e| match e {
        Error::Domain(msg) => Error::parse(13, msg),
        other => other,
    })
}

pub fn save_bbds(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_bbds(data))?;
    Ok(())
}

pub fn load_bbds(path: impl AsRef<Path>) -> Result<Dataset> {
    read_bbds(&fs::read(path)?)
}
