//! The VAE: MLP encoder and decoder, a standard-normal prior, and either a
//! Bernoulli or a discretized-logistic observation model.

mod checkpoint;
mod likelihood;
mod oracle;
mod sampling;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use likelihood::{
    log_prior, log_q, ObsDistribution, BERNOULLI_LOGIT_BOUND, LOGISTIC_LOG_SCALE_MIN,
};
pub use oracle::{brute_marginal, expected_elbo, MarginalOracle};
pub use sampling::{sample_batch, sample_model, LatentSource};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adam::Param;
use crate::autodiff::{Tape, Var};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp on posterior log-standard-deviations.
pub const LOG_STD_MIN: f32 = -7.0;
/// Upper clamp on posterior log-standard-deviations.
pub const LOG_STD_MAX: f32 = 2.0;

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObsModel {
    Bernoulli,
    DiscretizedLogistic,
}

impl ObsModel {
    pub fn tag(self) -> u8 {
        match self {
            ObsModel::Bernoulli => 0,
            ObsModel::DiscretizedLogistic => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ObsModel::Bernoulli),
            1 => Some(ObsModel::DiscretizedLogistic),
            _ => None,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            ObsModel::Bernoulli => Domain::Binary,
            ObsModel::DiscretizedLogistic => Domain::Grey256,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObsModel::Bernoulli => "bernoulli",
            ObsModel::DiscretizedLogistic => "discretized_logistic",
        }
    }

    /// Decoder output columns per data dimension.
    fn params_per_dim(self) -> usize {
        match self {
            ObsModel::Bernoulli => 1,
            ObsModel::DiscretizedLogistic => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub obs: ObsModel,
}

impl Architecture {
    pub fn new(data_dim: usize, hidden: usize, latent: usize, obs: ObsModel) -> Self {
        Self {
            data_dim,
            hidden,
            latent,
            obs,
        }
    }

    pub fn domain(&self) -> Domain {
        self.obs.domain()
    }
}

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Param,
    pub bias: Param,
}

/// Affine layers with `tanh` between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
                let weight =
                    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit));
                Layer {
                    weight: Param::new(format!("{prefix}.l{i}.w"), weight),
                    bias: Param::new(format!("{prefix}.l{i}.b"), Tensor::zeros(&[fan_out])),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.value.len())
    }

    /// Records the forward pass; returns the output and the parameter
    /// handles in [`Mlp::params`] order.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = input;
        let mut handles = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.value.clone(), trainable);
            let b = tape.leaf(layer.bias.value.clone(), trainable);
            handles.extend([w, b]);
            h = tape.affine(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok((h, handles))
    }

    /// Zeroes the final layer so the output is identically zero.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.value.data_mut().fill(0.0);
            last.bias.value.data_mut().fill(0.0);
        }
    }
}

/// Which parameter group receives gradients in a recorded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Encoder,
    Decoder,
    Both,
}

impl Trainable {
    fn encoder(self) -> bool {
        matches!(self, Trainable::Encoder | Trainable::Both)
    }

    fn decoder(self) -> bool {
        matches!(self, Trainable::Decoder | Trainable::Both)
    }
}

/// Gaussian `q(z|x)` with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if !mean.same_shape(&log_std) || mean.rank() != 1 {
            return Err(Error::shape(
                "posterior",
                format!("mean {:?}, log_std {:?}", mean.shape(), log_std.shape()),
            ));
        }
        if !mean.all_finite() || !log_std.all_finite() {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        if log_std
            .data()
            .iter()
            .any(|&s| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&s))
        {
            return Err(Error::Domain(format!(
                "log_std outside [{LOG_STD_MIN}, {LOG_STD_MAX}]"
            )));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(latent: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[latent]),
            log_std: Tensor::zeros(&[latent]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `z = mean + exp(log_std) · noise`.
pub fn reparam_sample(post: &GaussianPosterior, noise: &Tensor) -> Result<Tensor> {
    if noise.len() != post.dim() {
        return Err(Error::shape(
            "reparam_sample",
            format!("noise {:?} for {} latents", noise.shape(), post.dim()),
        ));
    }
    let data = post
        .mean
        .data()
        .iter()
        .zip(post.log_std.data())
        .zip(noise.data())
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    Tensor::vector(data)
}

/// Handles recorded for one ELBO evaluation.
pub(crate) struct ElboGraph {
    /// Per-row ELBO in nats, shape `[B]`.
    pub rows: Var,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

/// Encoder/decoder pair plus the fixed standard-normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl VaeModel {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Architecture {
            data_dim: d,
            hidden: h,
            latent: l,
            obs,
        } = arch;
        let encoder = Mlp::new("encoder", &[d, h, h, 2 * l], &mut rng);
        let decoder = Mlp::new("decoder", &[l, h, h, obs.params_per_dim() * d], &mut rng);
        Self {
            arch,
            encoder,
            decoder,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    /// Fresh encoder weights drawn from `seed`, decoder untouched.
    pub fn reinit_encoder(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Architecture {
            data_dim: d,
            hidden: h,
            latent: l,
            ..
        } = self.arch;
        self.encoder = Mlp::new("encoder", &[d, h, h, 2 * l], &mut rng);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    /// 64-bit digest of the decoder weights alone.
    pub fn decoder_checksum(&self) -> u64 {
        digest_params(&self.decoder.params())
    }

    /// 64-bit digest of every weight; equals the checkpoint-file checksum.
    pub fn checksum(&self) -> u64 {
        checkpoint::payload_checksum(self)
    }

    pub(crate) fn check_x(&self, x: &[u8]) -> Result<()> {
        if x.len() % self.arch.data_dim != 0 || x.is_empty() {
            return Err(Error::shape(
                "data",
                format!("{} values for data_dim {}", x.len(), self.arch.data_dim),
            ));
        }
        self.arch.domain().validate(x)
    }

    /// Network input for rows of raw data: binary as-is, grey scaled to `[0, 1]`.
    pub fn network_input(&self, x: &[u8]) -> Result<Tensor> {
        self.check_x(x)?;
        let rows = x.len() / self.arch.data_dim;
        let scale = self.arch.domain().input_scale();
        Tensor::matrix(
            rows,
            self.arch.data_dim,
            x.iter().map(|&v| v as f32 * scale).collect(),
        )
    }

    /// Records the encoder; returns `(mean, clamped log_std, handles)`.
    pub(crate) fn encoder_graph(
        &self,
        tape: &mut Tape,
        input: Var,
        trainable: bool,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let l = self.arch.latent;
        let (out, handles) = self.encoder.forward(tape, input, trainable)?;
        let mean = tape.slice_cols(out, 0, l)?;
        let raw = tape.slice_cols(out, l, 2 * l)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std, handles))
    }

    /// Records the decoder and the observation log-likelihood of `targets`
    /// given latent rows `z`; returns per-row log p(x|z) and handles.
    pub(crate) fn log_obs_graph(
        &self,
        tape: &mut Tape,
        z: Var,
        targets: &[u8],
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.arch.data_dim;
        let (out, handles) = self.decoder.forward(tape, z, trainable)?;
        let rows = match self.arch.obs {
            ObsModel::Bernoulli => {
                let lp = tape.bernoulli_log_prob(out, targets, BERNOULLI_LOGIT_BOUND)?;
                tape.row_sum(lp)
            }
            ObsModel::DiscretizedLogistic => {
                let mean = tape.slice_cols(out, 0, d)?;
                let raw = tape.slice_cols(out, d, 2 * d)?;
                let log_scale = tape.clamp(raw, LOGISTIC_LOG_SCALE_MIN, LOGISTIC_LOG_SCALE_MAX);
                let lp = tape.disc_logistic(mean, log_scale, targets)?;
                tape.row_sum(lp)
            }
        };
        Ok((rows, handles))
    }

    /// Single-sample ELBO rows given posterior parameters already on the tape.
    pub(crate) fn elbo_from_posterior(
        &self,
        tape: &mut Tape,
        mean: Var,
        log_std: Var,
        targets: &[u8],
        noise: &Tensor,
        decoder_trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let l = self.arch.latent;
        let rows = tape.value(mean).rows();
        if noise.rows() != rows || noise.cols() != l {
            return Err(Error::shape(
                "elbo",
                format!("noise {:?} for {rows}×{l} latents", noise.shape()),
            ));
        }
        let eps = tape.constant(noise.clone());
        let std = tape.exp(log_std);
        let spread = tape.mul(std, eps)?;
        let z = tape.add(mean, spread)?;

        let (log_px, dec) = self.log_obs_graph(tape, z, targets, decoder_trainable)?;

        // log p(z) = −½Σz² − L·½ln2π
        let z2 = tape.mul(z, z)?;
        let z2 = tape.row_sum(z2);
        let log_pz = tape.scale(z2, -0.5);

        // log q(z|x) at the reparameterized z = −½Σε² − Σlog_std − L·½ln2π
        let eps_term: Vec<f32> = (0..rows)
            .map(|r| -0.5 * noise.row(r).iter().map(|e| e * e).sum::<f32>())
            .collect();
        let eps_term = tape.constant(Tensor::vector(eps_term)?);
        let ls = tape.row_sum(log_std);
        let log_q = tape.sub(eps_term, ls)?;

        // the ½ln2π terms cancel between log p(z) and log q(z|x)
        let joint = tape.add(log_px, log_pz)?;
        let elbo = tape.sub(joint, log_q)?;
        Ok((elbo, dec))
    }

    /// Single-sample ELBO for each row of `targets`, with the encoder fed
    /// `enc_input` (normally the same data, scaled).
    pub(crate) fn elbo_graph(
        &self,
        tape: &mut Tape,
        enc_input: Tensor,
        targets: &[u8],
        noise: &Tensor,
        trainable: Trainable,
    ) -> Result<ElboGraph> {
        let input = tape.constant(enc_input);
        let (mean, log_std, encoder) = self.encoder_graph(tape, input, trainable.encoder())?;
        let (rows, decoder) =
            self.elbo_from_posterior(tape, mean, log_std, targets, noise, trainable.decoder())?;
        Ok(ElboGraph {
            rows,
            encoder,
            decoder,
        })
    }

    /// `q(z|x)` for one datum.
    pub fn encode(&self, x: &[u8]) -> Result<GaussianPosterior> {
        if x.len() != self.arch.data_dim {
            return Err(Error::shape(
                "encode",
                format!("{} values for data_dim {}", x.len(), self.arch.data_dim),
            ));
        }
        let mut batch = self.encode_batch(x)?;
        Ok(batch.pop().expect("one row"))
    }

    /// `q(z|x)` for each row of a flat batch.
    pub fn encode_batch(&self, x: &[u8]) -> Result<Vec<GaussianPosterior>> {
        let input = self.network_input(x)?;
        let mut tape = Tape::new();
        let input = tape.constant(input);
        let (mean, log_std, _) = self.encoder_graph(&mut tape, input, false)?;
        let (mv, sv) = (tape.value(mean), tape.value(log_std));
        (0..mv.rows())
            .map(|r| {
                Ok(GaussianPosterior {
                    mean: Tensor::vector(mv.row(r).to_vec())?,
                    log_std: Tensor::vector(sv.row(r).to_vec())?,
                })
            })
            .collect()
    }

    /// Observation distribution `p(x|z)` for one latent vector.
    pub fn decode(&self, z: &Tensor) -> Result<ObsDistribution> {
        let mut batch = self.decode_batch(z)?;
        Ok(batch.pop().expect("one row"))
    }

    /// Observation distributions for each row of a `[B × L]` latent matrix
    /// (or a single `[L]` vector).
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<ObsDistribution>> {
        if z.cols() != self.arch.latent {
            return Err(Error::shape(
                "decode",
                format!("latent {:?} for latent_dim {}", z.shape(), self.arch.latent),
            ));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (out, _) = self.decoder.forward(&mut tape, zv, false)?;
        let out = tape.value(out);
        (0..out.rows())
            .map(|r| ObsDistribution::from_decoder_row(self.arch.obs, out.row(r)))
            .collect()
    }

    /// `log p(x|z)` in nats.
    pub fn log_obs(&self, x: &[u8], z: &Tensor) -> Result<f64> {
        self.check_x(x)?;
        self.decode(z)?.log_prob(x)
    }

    /// Single-sample ELBO (nats) at `z = reparam_sample(encode(x), noise)`.
    pub fn elbo(&self, x: &[u8], noise: &Tensor) -> Result<f32> {
        Ok(self.elbo_batch(x, noise)?[0])
    }

    /// Single-sample ELBO per row; `noise` is `[B × L]`.
    pub fn elbo_batch(&self, x: &[u8], noise: &Tensor) -> Result<Vec<f32>> {
        let input = self.network_input(x)?;
        let noise = if noise.rank() == 1 {
            noise.clone().reshape(vec![1, noise.len()])?
        } else {
            noise.clone()
        };
        let mut tape = Tape::new();
        let g = self.elbo_graph(&mut tape, input, x, &noise, Trainable::Nothing)?;
        Ok(tape.value(g.rows).data().to_vec())
    }

    /// Per-row single-sample ELBO and the gradient of its sum with respect
    /// to every weight, in [`VaeModel::params`] order.
    pub fn elbo_gradients(&self, x: &[u8], noise: &Tensor) -> Result<(Vec<f32>, Vec<Tensor>)> {
        let input = self.network_input(x)?;
        let mut tape = Tape::new();
        let g = self.elbo_graph(&mut tape, input, x, noise, Trainable::Both)?;
        let rows = tape.value(g.rows).data().to_vec();
        let total = tape.sum(g.rows);
        let mut grads = tape.backward(total)?;
        let grads = g
            .encoder
            .iter()
            .chain(&g.decoder)
            .map(|&h| grads.take(h).expect("parameter gradient"))
            .collect();
        Ok((rows, grads))
    }

    /// Single-sample ELBO per row for given posterior parameters.
    pub fn elbo_with_posterior(
        &self,
        x: &[u8],
        post: &GaussianPosterior,
        noise: &Tensor,
    ) -> Result<f32> {
        self.check_x(x)?;
        let l = self.arch.latent;
        let mut tape = Tape::new();
        let mean = tape.constant(post.mean.clone().reshape(vec![1, l])?);
        let log_std = tape.constant(post.log_std.clone().reshape(vec![1, l])?);
        let noise = noise.clone().reshape(vec![1, l])?;
        let (rows, _) = self.elbo_from_posterior(&mut tape, mean, log_std, x, &noise, false)?;
        Ok(tape.value(rows).item())
    }

    pub fn bpd(&self, neg_elbo_nats: f64) -> f64 {
        bpd(neg_elbo_nats, self.arch.data_dim)
    }
}

/// Bits per dimension of a negative log-likelihood (or negative ELBO) in nats.
pub fn bpd(neg_elbo_nats: f64, dims: usize) -> f64 {
    assert!(dims > 0, "bpd needs a positive dimension count");
    neg_elbo_nats / (dims as f64 * std::f64::consts::LN_2)
}

pub(crate) fn digest_params(params: &[&Param]) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub(crate) const LOGISTIC_LOG_SCALE_MAX: f32 = 2.0;
