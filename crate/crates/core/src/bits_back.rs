//! Bits-back coding of a dataset with a frozen VAE.
//!
//! Per datum the compressor pops a latent bin from the stack using the
//! discretized posterior, pushes the datum under `p(x|z)` and then pushes the
//! bin under the prior. The decompressor runs the same steps backwards. The
//! net cost per datum approaches the negative ELBO.
//!
//! Latents are discretized per dimension into `2^r_z` bins of equal prior
//! mass, so the prior push costs exactly `r_z` bits. The posterior tables use
//! a finer precision `r_q` so that every bin can keep a nonzero frequency.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::adam::{AdamConfig, AdamState, Param};
use crate::ans::{quantize_pmf, seed_state, AnsState, QuantizedPmf};
use crate::autodiff::{disc_logistic_point, softplus, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    GaussianPosterior, ObsDistribution, ObsModel, VaeModel, LOG_STD_MAX, LOG_STD_MIN,
};
use crate::tensor::Tensor;

pub const STREAM_MAGIC: &[u8; 4] = b"BBST";
pub const STREAM_VERSION: u32 = 1;

/// Standardized half-width beyond which posterior mass is treated as zero.
const Q_SUPPORT_SIGMAS: f64 = 12.0;

/// Equal-prior-mass grid over each latent dimension.
#[derive(Debug, Clone)]
pub struct LatentDiscretization {
    precision: u32,
    q_precision: u32,
    // 2^r + 1 edges; the first and last are infinite.
    edges: Vec<f64>,
    centres: Vec<f32>,
}

impl LatentDiscretization {
    /// `precision` bits per latent dimension; posterior tables use twice as
    /// many.
    pub fn new(precision: u32) -> Result<Self> {
        Self::with_q_precision(precision, 2 * precision)
    }

    pub fn with_q_precision(precision: u32, q_precision: u32) -> Result<Self> {
        if !(1..=20).contains(&precision) {
            return Err(Error::config(format!(
                "latent precision {precision} outside 1..=20"
            )));
        }
        if q_precision < precision || q_precision > crate::ans::MAX_PRECISION {
            return Err(Error::config(format!(
                "posterior precision {q_precision} must lie in {precision}..={}",
                crate::ans::MAX_PRECISION
            )));
        }
        let n = 1usize << precision;
        let mut edges = Vec::with_capacity(n + 1);
        edges.push(f64::NEG_INFINITY);
        for i in 1..n {
            edges.push(normal_quantile(i as f64 / n as f64));
        }
        edges.push(f64::INFINITY);
        let centres = (0..n)
            .map(|i| normal_quantile((i as f64 + 0.5) / n as f64) as f32)
            .collect();
        Ok(Self {
            precision,
            q_precision,
            edges,
            centres,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn q_precision(&self) -> u32 {
        self.q_precision
    }

    pub fn bins(&self) -> usize {
        self.centres.len()
    }

    /// Lower and upper edge of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    /// Representative latent value of bin `i`: the prior median inside it.
    pub fn centre(&self, i: usize) -> f32 {
        self.centres[i]
    }

    /// Bin containing `z`.
    pub fn bin_of(&self, z: f64) -> usize {
        self.edges[1..self.edges.len() - 1].partition_point(|&e| e <= z)
    }

    /// Uniform table at `precision` bits.
    pub fn prior_pmf(&self) -> QuantizedPmf {
        QuantizedPmf::uniform(self.bins(), self.precision).expect("power-of-two alphabet")
    }

    /// Exact posterior mass of every bin for one dimension.
    pub fn bin_masses(&self, mean: f64, std: f64) -> Vec<f64> {
        let n = self.bins();
        let mut masses = vec![0.0; n];
        let lo = self.bin_of(mean - Q_SUPPORT_SIGMAS * std);
        let hi = self.bin_of(mean + Q_SUPPORT_SIGMAS * std);
        for (i, m) in masses.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let a = (self.edges[i] - mean) / std;
            let b = (self.edges[i + 1] - mean) / std;
            *m = normal_mass(a, b);
        }
        masses
    }
}

/// Standard normal quantile, polished with one Newton step on the tail
/// that holds `p`.
fn normal_quantile(p: f64) -> f64 {
    let x = Normal::standard().inverse_cdf(p);
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if p < 0.5 {
        x - (upper_tail(-x) - p) / density
    } else {
        x + (upper_tail(x) - (1.0 - p)) / density
    }
}

fn upper_tail(t: f64) -> f64 {
    if t == f64::INFINITY {
        0.0
    } else if t == f64::NEG_INFINITY {
        1.0
    } else {
        0.5 * erfc(t / std::f64::consts::SQRT_2)
    }
}

/// `Φ(b) − Φ(a)` evaluated on whichever tail keeps precision.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    }
}

/// Per-dimension quantized posterior tables over the latent bins.
pub fn discretized_q(
    post: &GaussianPosterior,
    disc: &LatentDiscretization,
) -> Result<Vec<QuantizedPmf>> {
    post.mean
        .data()
        .iter()
        .zip(post.log_std.data())
        .map(|(&m, &s)| {
            let masses = disc.bin_masses(m as f64, (s as f64).exp());
            quantize_pmf(&masses, disc.q_precision)
        })
        .collect()
}

/// Quantized tables for every pixel of an observation distribution.
pub fn observation_pmfs(dist: &ObsDistribution, precision: u32) -> Result<Vec<QuantizedPmf>> {
    (0..dist.dim())
        .map(|i| quantize_pmf(&dist.pmf(i), precision))
        .collect()
}

/// Settings for per-datum posterior refinement at coding time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalInferenceConfig {
    /// Number of Adam steps; zero keeps the amortized posterior.
    pub k: usize,
    pub adam: AdamConfig,
    /// Mixed into every per-datum noise seed.
    pub seed_rule: u64,
}

impl Default for OptimalInferenceConfig {
    fn default() -> Self {
        Self {
            k: 0,
            adam: AdamConfig::with_lr(5e-3),
            seed_rule: 0,
        }
    }
}

impl OptimalInferenceConfig {
    pub fn new(k: usize, lr: f32) -> Self {
        Self {
            k,
            adam: AdamConfig::with_lr(lr),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.adam;
        if !a.lr.is_finite() || a.lr < 0.0 {
            return Err(Error::config(format!(
                "learning rate {} must be finite and >= 0",
                a.lr
            )));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(a.eps.is_finite() && a.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        if self.k > u32::MAX as usize {
            return Err(Error::config("step count too large"));
        }
        Ok(())
    }
}

/// Seed of the reparameterization noise for step `step` on datum `x`.
fn step_seed(seed_rule: u64, x: &[u8], step: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"bbvae-kstep-noise-v1");
    h.update(seed_rule.to_le_bytes());
    h.update((x.len() as u64).to_le_bytes());
    h.update(x);
    h.update((step as u64).to_le_bytes());
    h.finalize().into()
}

/// Refines `encode(x)` with `k` Adam steps on the single-sample ELBO over the
/// posterior mean and log-std. The noise of each step is a function of
/// `(seed_rule, x, step)` only.
pub fn optimal_posterior_k(
    model: &VaeModel,
    x: &[u8],
    cfg: &OptimalInferenceConfig,
) -> Result<GaussianPosterior> {
    cfg.validate()?;
    let init = model.encode(x)?;
    if cfg.k == 0 {
        return Ok(init);
    }
    let l = model.latent_dim();
    let mut mean = Param::new("posterior.mean", init.mean.reshape(vec![1, l])?);
    let mut log_std = Param::new("posterior.log_std", init.log_std.reshape(vec![1, l])?);
    let mut adam = AdamState::new(cfg.adam, &[&mean, &log_std]);
    for step in 0..cfg.k {
        let mut rng = ChaCha20Rng::from_seed(step_seed(cfg.seed_rule, x, step));
        let noise = Tensor::from_fn(&[1, l], |_| StandardNormal.sample(&mut rng));
        let mut tape = Tape::new();
        let m = tape.param(mean.value.clone());
        let s = tape.param(log_std.value.clone());
        let (elbo, _) = model.elbo_from_posterior(&mut tape, m, s, x, &noise, false)?;
        let loss = tape.scale(elbo, -1.0);
        let loss = tape.sum(loss);
        if !tape.value(loss).all_finite() {
            return Err(Error::NonFinite(format!(
                "posterior refinement loss at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        let (gm, gs) = (
            grads.get(m).expect("param grad"),
            grads.get(s).expect("param grad"),
        );
        adam.step(&mut [&mut mean, &mut log_std], &[gm, gs])?;
        for v in log_std.value.data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
    let post = GaussianPosterior::new(
        mean.value.reshape(vec![l])?,
        log_std.value.reshape(vec![l])?,
    )?;
    Ok(post)
}

/// How the posterior used for coding is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodingMode {
    Amortized,
    Optimal(OptimalInferenceConfig),
}

impl CodingMode {
    /// `Optimal` with zero steps is the amortized coder and is written as such.
    pub fn normalized(self) -> Self {
        match self {
            CodingMode::Optimal(cfg) if cfg.k == 0 => CodingMode::Amortized,
            other => other,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            CodingMode::Amortized => 0,
            CodingMode::Optimal(cfg) => cfg.k,
        }
    }

    fn posterior(&self, model: &VaeModel, x: &[u8]) -> Result<GaussianPosterior> {
        match self {
            CodingMode::Amortized => model.encode(x),
            CodingMode::Optimal(cfg) => optimal_posterior_k(model, x, cfg),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self.normalized() {
            CodingMode::Amortized => out.push(0),
            CodingMode::Optimal(cfg) => {
                out.push(1);
                out.extend((cfg.k as u32).to_le_bytes());
                for v in [cfg.adam.lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps] {
                    out.extend(v.to_le_bytes());
                }
                out.extend(cfg.seed_rule.to_le_bytes());
            }
        }
    }
}

/// Coder precisions and the seed of the initial stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitsBackConfig {
    pub latent_precision: u32,
    pub q_precision: u32,
    pub obs_precision: u32,
    pub seed: u64,
}

impl Default for BitsBackConfig {
    fn default() -> Self {
        Self {
            latent_precision: 14,
            q_precision: 28,
            obs_precision: 16,
            seed: 0,
        }
    }
}

impl BitsBackConfig {
    /// Words of seed bits: `max(64, 2·L·r_z)` bits rounded up.
    pub fn seed_words(&self, latent: usize) -> usize {
        let bits = (2 * latent * self.latent_precision as usize).max(64);
        bits.div_ceil(32)
    }

    fn discretization(&self) -> Result<LatentDiscretization> {
        LatentDiscretization::with_q_precision(self.latent_precision, self.q_precision)
    }
}

/// Stream header; everything the decompressor needs besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub model_checksum: u64,
    pub mode: CodingMode,
    pub fingerprint: u64,
    pub count: u32,
    pub data_dim: u32,
    pub obs: ObsModel,
    pub latent_precision: u8,
    pub q_precision: u8,
    pub obs_precision: u8,
    pub seed: u64,
    pub seed_words: u32,
    pub initial_bits: u64,
}

impl StreamHeader {
    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        out.extend(STREAM_VERSION.to_le_bytes());
        out.extend(self.model_checksum.to_le_bytes());
        self.mode.write(&mut out);
        out.extend(self.fingerprint.to_le_bytes());
        out.extend(self.count.to_le_bytes());
        out.extend(self.data_dim.to_le_bytes());
        out.push(self.obs.tag());
        out.extend([self.latent_precision, self.q_precision, self.obs_precision]);
        out.extend(self.seed.to_le_bytes());
        out.extend(self.seed_words.to_le_bytes());
        out.extend(self.initial_bits.to_le_bytes());
        out
    }

    fn config(&self) -> BitsBackConfig {
        BitsBackConfig {
            latent_precision: self.latent_precision as u32,
            q_precision: self.q_precision as u32,
            obs_precision: self.obs_precision as u32,
            seed: self.seed,
        }
    }
}

/// A complete compressed stream: header plus final coder state.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedStream {
    pub header: StreamHeader,
    pub state: AnsState,
}

fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl CompressedStream {
    /// Header, header checksum, ANS state, state checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.body();
        let sum = digest64(&out);
        out.extend(sum.to_le_bytes());
        let state = self.state.to_bytes();
        let state_sum = digest64(&state);
        out.extend(state);
        out.extend(state_sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = StreamReader { buf: bytes, pos: 0 };
        if r.take(4)? != STREAM_MAGIC {
            return Err(Error::stream("bad stream magic"));
        }
        let version = r.u32()?;
        if version != STREAM_VERSION {
            return Err(Error::stream(format!(
                "unsupported stream version {version}"
            )));
        }
        let model_checksum = r.u64()?;
        let mode = match r.u8()? {
            0 => CodingMode::Amortized,
            1 => {
                let k = r.u32()? as usize;
                let lr = r.f32()?;
                let beta1 = r.f32()?;
                let beta2 = r.f32()?;
                let eps = r.f32()?;
                let seed_rule = r.u64()?;
                CodingMode::Optimal(OptimalInferenceConfig {
                    k,
                    adam: AdamConfig {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    },
                    seed_rule,
                })
            }
            t => return Err(Error::stream(format!("unknown coding mode {t}"))),
        };
        let fingerprint = r.u64()?;
        let count = r.u32()?;
        let data_dim = r.u32()?;
        let obs_tag = r.u8()?;
        let obs = ObsModel::from_tag(obs_tag)
            .ok_or_else(|| Error::stream(format!("unknown obs tag {obs_tag}")))?;
        let latent_precision = r.u8()?;
        let q_precision = r.u8()?;
        let obs_precision = r.u8()?;
        let seed = r.u64()?;
        let seed_words = r.u32()?;
        let initial_bits = r.u64()?;
        let body_end = r.pos;
        let stored = r.u64()?;
        if stored != digest64(&bytes[..body_end]) {
            return Err(Error::stream("header checksum mismatch"));
        }
        let (state, used) = AnsState::from_bytes(&bytes[r.pos..])?;
        let state_bytes = &bytes[r.pos..r.pos + used];
        r.pos += used;
        if r.u64()? != digest64(state_bytes) {
            return Err(Error::stream("payload checksum mismatch"));
        }
        if r.pos != bytes.len() {
            return Err(Error::stream("trailing bytes after stream"));
        }
        Ok(Self {
            header: StreamHeader {
                model_checksum,
                mode,
                fingerprint,
                count,
                data_dim,
                obs,
                latent_precision,
                q_precision,
                obs_precision,
                seed,
                seed_words,
                initial_bits,
            },
            state,
        })
    }

    /// Bits added on top of the seed state.
    pub fn net_bits(&self) -> i64 {
        self.state.bit_length() as i64 - self.header.initial_bits as i64
    }
}

struct StreamReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> StreamReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::stream(format!(
                "stream truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Hash of a fixed probe computation through the scalar kernels and the
/// model's networks. Streams record it so a decoder running on different
/// arithmetic is refused instead of silently producing garbage.
pub fn arithmetic_fingerprint(model: &VaeModel) -> Result<u64> {
    let mut h = Sha256::new();
    h.update(b"bbvae-fingerprint-v1");
    for i in 0..64 {
        let v = (i as f32 - 31.5) * 0.173;
        h.update(v.tanh().to_le_bytes());
        h.update(v.exp().to_le_bytes());
        h.update(softplus(v).to_le_bytes());
        let w = v as f64;
        h.update(erfc(w).to_le_bytes());
        h.update(w.exp_m1().to_le_bytes());
        h.update(
            disc_logistic_point((i * 4) as u8, 0.5 + 0.01 * w, -2.0 + 0.05 * w)
                .0
                .to_le_bytes(),
        );
    }
    let d = model.data_dim();
    let probe: Vec<u8> = match model.arch.obs {
        ObsModel::Bernoulli => (0..d).map(|i| (i % 3 == 0) as u8).collect(),
        ObsModel::DiscretizedLogistic => (0..d).map(|i| (i * 37 % 256) as u8).collect(),
    };
    let post = model.encode(&probe)?;
    for v in post.mean.data().iter().chain(post.log_std.data()) {
        h.update(v.to_le_bytes());
    }
    let dist = model.decode(&post.mean)?;
    h.update(dist.log_prob(&probe)?.to_le_bytes());
    let out = h.finalize();
    Ok(u64::from_le_bytes(out[..8].try_into().expect("8 bytes")))
}

/// Coding costs of one datum, in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatumTrace {
    /// Latent bin per dimension.
    pub bins: Vec<usize>,
    /// Information popped under the posterior tables.
    pub q_bits: f64,
    /// Information pushed under the observation tables.
    pub obs_bits: f64,
    /// Information pushed under the prior tables.
    pub prior_bits: f64,
    /// Change of the state's bit length while coding this datum.
    pub state_delta: i64,
}

impl DatumTrace {
    /// `obs + prior − q`: the coded-bin negative ELBO in bits.
    pub fn net_bits(&self) -> f64 {
        self.obs_bits + self.prior_bits - self.q_bits
    }
}

/// Compression output together with per-datum accounting and timing.
#[derive(Debug, Clone)]
pub struct CompressionRun {
    pub stream: CompressedStream,
    pub traces: Vec<DatumTrace>,
    pub seconds: f64,
}

fn check_model_data(model: &VaeModel, data: &Dataset) -> Result<()> {
    if data.dim() != model.data_dim() {
        return Err(Error::shape(
            "compress",
            format!(
                "dataset dim {} for model dim {}",
                data.dim(),
                model.data_dim()
            ),
        ));
    }
    if data.domain() != model.arch.domain() {
        return Err(Error::config(format!(
            "{} data cannot be coded with a {} model",
            data.domain().name(),
            model.arch.obs.name()
        )));
    }
    if data.len() > u32::MAX as usize {
        return Err(Error::config("too many data items for one stream"));
    }
    Ok(())
}

fn centres(disc: &LatentDiscretization, bins: &[usize]) -> Result<Tensor> {
    Tensor::matrix(
        1,
        bins.len(),
        bins.iter().map(|&b| disc.centre(b)).collect(),
    )
}

/// Compresses `data` in order, recording per-datum costs.
pub fn compress_traced(
    model: &VaeModel,
    data: &Dataset,
    cfg: &BitsBackConfig,
    mode: CodingMode,
) -> Result<CompressionRun> {
    check_model_data(model, data)?;
    if let CodingMode::Optimal(opt) = mode {
        opt.validate()?;
    }
    let started = Instant::now();
    let disc = cfg.discretization()?;
    let prior = disc.prior_pmf();
    let l = model.latent_dim();
    let seed_words = cfg.seed_words(l);
    let mut state = seed_state(seed_words, cfg.seed);
    let initial_bits = state.bit_length();
    let mut traces = Vec::with_capacity(data.len());

    for x in data.iter() {
        let before = state.bit_length() as i64;
        let post = mode.posterior(model, x)?;
        let q = discretized_q(&post, &disc)?;
        let mut bins = Vec::with_capacity(l);
        let mut q_bits = 0.0;
        for table in &q {
            let b = state.pop(table)?;
            q_bits += table.cost_bits(b);
            bins.push(b);
        }
        let dist = model.decode(&centres(&disc, &bins)?)?;
        let mut obs_bits = 0.0;
        for (i, table) in observation_pmfs(&dist, cfg.obs_precision)?
            .iter()
            .enumerate()
        {
            let s = x[i] as usize;
            obs_bits += table.cost_bits(s);
            state.push(s, table)?;
        }
        for &b in &bins {
            state.push(b, &prior)?;
        }
        traces.push(DatumTrace {
            bins,
            q_bits,
            obs_bits,
            prior_bits: (l as u32 * cfg.latent_precision) as f64,
            state_delta: state.bit_length() as i64 - before,
        });
    }

    let header = StreamHeader {
        model_checksum: model.checksum(),
        mode: mode.normalized(),
        fingerprint: arithmetic_fingerprint(model)?,
        count: data.len() as u32,
        data_dim: model.data_dim() as u32,
        obs: model.arch.obs,
        latent_precision: cfg.latent_precision as u8,
        q_precision: cfg.q_precision as u8,
        obs_precision: cfg.obs_precision as u8,
        seed: cfg.seed,
        seed_words: seed_words as u32,
        initial_bits,
    };
    Ok(CompressionRun {
        stream: CompressedStream { header, state },
        traces,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Decompresses with the coding mode recorded in the stream.
pub fn decompress(model: &VaeModel, stream: &CompressedStream) -> Result<Dataset> {
    let h = &stream.header;
    if h.model_checksum != model.checksum() {
        return Err(Error::stream(format!(
            "stream was written with model {:016x}, got {:016x}",
            h.model_checksum,
            model.checksum()
        )));
    }
    if h.data_dim as usize != model.data_dim() || h.obs != model.arch.obs {
        return Err(Error::stream("stream shape does not match the model"));
    }
    if h.fingerprint != arithmetic_fingerprint(model)? {
        return Err(Error::stream(
            "arithmetic fingerprint differs from the compressing build",
        ));
    }
    let cfg = h.config();
    if cfg.seed_words(model.latent_dim()) != h.seed_words as usize {
        return Err(Error::stream("seed word count inconsistent with the model"));
    }
    let disc = cfg
        .discretization()
        .map_err(|e| Error::stream(e.to_string()))?;
    let prior = disc.prior_pmf();
    let (l, d) = (model.latent_dim(), model.data_dim());
    let exhausted = |e: Error| match e {
        Error::Underflow(msg) => Error::stream(format!("stream exhausted: {msg}")),
        other => other,
    };

    let mut state = stream.state.clone();
    let mut items = vec![0u8; h.count as usize * d];
    for n in (0..h.count as usize).rev() {
        let mut bins = vec![0usize; l];
        for b in bins.iter_mut().rev() {
            *b = state.pop(&prior).map_err(exhausted)?;
        }
        let dist = model.decode(&centres(&disc, &bins)?)?;
        let tables = observation_pmfs(&dist, cfg.obs_precision)?;
        let x = &mut items[n * d..(n + 1) * d];
        for (i, table) in tables.iter().enumerate().rev() {
            x[i] = state.pop(table).map_err(exhausted)? as u8;
        }
        let post = h.mode.posterior(model, x)?;
        let q = discretized_q(&post, &disc)?;
        for (table, &b) in q.iter().zip(&bins).rev() {
            state.push(b, table)?;
        }
    }
    if state != seed_state(h.seed_words as usize, h.seed) {
        return Err(Error::stream("final state does not match the seed state"));
    }
    Dataset::new(items, d, model.arch.domain())
}

pub fn compress_amortized(
    model: &VaeModel,
    data: &Dataset,
    cfg: &BitsBackConfig,
) -> Result<CompressedStream> {
    Ok(compress_traced(model, data, cfg, CodingMode::Amortized)?.stream)
}

/// Refuses streams not written by the amortized coder.
pub fn decompress_amortized(model: &VaeModel, stream: &CompressedStream) -> Result<Dataset> {
    if stream.header.mode != CodingMode::Amortized {
        return Err(Error::stream("stream was not written in amortized mode"));
    }
    decompress(model, stream)
}

pub fn compress_optimal_k(
    model: &VaeModel,
    data: &Dataset,
    cfg: &BitsBackConfig,
    opt: &OptimalInferenceConfig,
) -> Result<CompressedStream> {
    Ok(compress_traced(model, data, cfg, CodingMode::Optimal(*opt))?.stream)
}

/// Refuses streams whose recorded refinement settings differ from `opt`.
pub fn decompress_optimal_k(
    model: &VaeModel,
    stream: &CompressedStream,
    opt: &OptimalInferenceConfig,
) -> Result<Dataset> {
    opt.validate()?;
    if stream.header.mode != CodingMode::Optimal(*opt).normalized() {
        return Err(Error::stream(
            "stream coding mode differs from the requested settings",
        ));
    }
    decompress(model, stream)
}

/// Net rate and wall-clock cost of one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub count: usize,
    pub dims: usize,
    pub net_bits: i64,
    pub bpd: f64,
    pub compress_secs_per_item: Option<f64>,
    pub decompress_secs_per_item: Option<f64>,
}

/// Bit-length delta over the seed state divided by the coded dimensions.
pub fn rate_report(
    stream: &CompressedStream,
    compress_secs: Option<f64>,
    decompress_secs: Option<f64>,
) -> RateReport {
    let count = stream.header.count as usize;
    let dims = count * stream.header.data_dim as usize;
    let net_bits = stream.net_bits();
    let per_item = |s: f64| if count == 0 { 0.0 } else { s / count as f64 };
    RateReport {
        count,
        dims,
        net_bits,
        bpd: if dims == 0 {
            0.0
        } else {
            net_bits as f64 / dims as f64
        },
        compress_secs_per_item: compress_secs.map(per_item),
        decompress_secs_per_item: decompress_secs.map(per_item),
    }
}

/// Decompresses and reports the elapsed wall-clock seconds.
pub fn decompress_timed(model: &VaeModel, stream: &CompressedStream) -> Result<(Dataset, f64)> {
    let started = Instant::now();
    let data = decompress(model, stream)?;
    Ok((data, started.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests;
