use rand::Rng;

use super::{GaussianPosterior, ObsModel, HALF_LN_2PI, LOGISTIC_LOG_SCALE_MAX};
use crate::autodiff::disc_logistic_point;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logit bound giving Bernoulli probabilities in `[2⁻¹⁶, 1 − 2⁻¹⁶]`.
pub const BERNOULLI_LOGIT_BOUND: f32 = 11.090_339; // ln(2¹⁶ − 1)

/// Log-scale floor for the discretized logistic; keeps the scale above 1e-6.
pub const LOGISTIC_LOG_SCALE_MIN: f32 = -13.8;

/// Per-pixel observation distribution `p(x|z)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsDistribution {
    /// Clamped logits, one per pixel.
    Bernoulli { logits: Vec<f32> },
    /// Mean and clamped log-scale on the `[0, 1]` intensity axis.
    Logistic { mean: Vec<f32>, log_scale: Vec<f32> },
}

impl ObsDistribution {
    pub(crate) fn from_decoder_row(obs: ObsModel, row: &[f32]) -> Result<Self> {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Ok(match obs {
            ObsModel::Bernoulli => ObsDistribution::Bernoulli {
                logits: row
                    .iter()
                    .map(|v| v.clamp(-BERNOULLI_LOGIT_BOUND, BERNOULLI_LOGIT_BOUND))
                    .collect(),
            },
            ObsModel::DiscretizedLogistic => {
                let d = row.len() / 2;
                ObsDistribution::Logistic {
                    mean: row[..d].to_vec(),
                    log_scale: row[d..]
                        .iter()
                        .map(|v| v.clamp(LOGISTIC_LOG_SCALE_MIN, LOGISTIC_LOG_SCALE_MAX))
                        .collect(),
                }
            }
        })
    }

    /// Bernoulli distribution with the given probabilities of a 1; the
    /// probabilities are clamped to the allowed range.
    pub fn bernoulli_from_probs(probs: &[f64]) -> Self {
        let logits = probs
            .iter()
            .map(|&p| {
                ((p / (1.0 - p)).ln() as f32).clamp(-BERNOULLI_LOGIT_BOUND, BERNOULLI_LOGIT_BOUND)
            })
            .collect();
        ObsDistribution::Bernoulli { logits }
    }

    pub fn dim(&self) -> usize {
        match self {
            ObsDistribution::Bernoulli { logits } => logits.len(),
            ObsDistribution::Logistic { mean, .. } => mean.len(),
        }
    }

    pub fn alphabet_size(&self) -> usize {
        match self {
            ObsDistribution::Bernoulli { .. } => 2,
            ObsDistribution::Logistic { .. } => 256,
        }
    }

    /// Probability that pixel `i` is 1 (Bernoulli only).
    pub fn prob_one(&self, i: usize) -> f64 {
        match self {
            ObsDistribution::Bernoulli { logits } => sigmoid64(logits[i] as f64),
            ObsDistribution::Logistic { .. } => panic!("prob_one on a logistic distribution"),
        }
    }

    /// Exact probability mass function of pixel `i` over its alphabet.
    pub fn pmf(&self, i: usize) -> Vec<f64> {
        match self {
            ObsDistribution::Bernoulli { .. } => {
                let p = self.prob_one(i);
                vec![1.0 - p, p]
            }
            ObsDistribution::Logistic { mean, log_scale } => (0..=255u8)
                .map(|k| {
                    disc_logistic_point(k, mean[i] as f64, log_scale[i] as f64)
                        .0
                        .exp()
                })
                .collect(),
        }
    }

    /// `log p(x)` in nats.
    pub fn log_prob(&self, x: &[u8]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "log_prob",
                format!("{} values for {} pixels", x.len(), self.dim()),
            ));
        }
        match self {
            ObsDistribution::Bernoulli { logits } => x
                .iter()
                .zip(logits)
                .map(|(&v, &l)| {
                    let l = l as f64;
                    match v {
                        0 => Ok(-softplus64(l)),
                        1 => Ok(-softplus64(-l)),
                        other => Err(Error::Domain(format!("binary value {other}"))),
                    }
                })
                .sum(),
            ObsDistribution::Logistic { mean, log_scale } => Ok(x
                .iter()
                .zip(mean.iter().zip(log_scale))
                .map(|(&v, (&m, &s))| disc_logistic_point(v, m as f64, s as f64).0)
                .sum()),
        }
    }

    /// Per-pixel expected value on the data scale (Bernoulli: `p`; logistic:
    /// expected level in `0..=255`).
    pub fn mean_values(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| match self {
                ObsDistribution::Bernoulli { .. } => self.prob_one(i),
                ObsDistribution::Logistic { .. } => self
                    .pmf(i)
                    .iter()
                    .enumerate()
                    .map(|(k, p)| k as f64 * p)
                    .sum(),
            })
            .collect()
    }

    /// Draws one discrete observation.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<u8> {
        match self {
            ObsDistribution::Bernoulli { logits } => logits
                .iter()
                .map(|&l| {
                    let u: f64 = rng.random();
                    u8::from(u < sigmoid64(l as f64))
                })
                .collect(),
            ObsDistribution::Logistic { mean, log_scale } => mean
                .iter()
                .zip(log_scale)
                .map(|(&m, &s)| {
                    let u: f64 = rng.random_range(f64::EPSILON..1.0);
                    let y = m as f64 + (s as f64).exp() * (u / (1.0 - u)).ln();
                    (y * 255.0).round().clamp(0.0, 255.0) as u8
                })
                .collect(),
        }
    }
}

/// `log N(z; 0, I)` in nats.
pub fn log_prior(z: &Tensor) -> f64 {
    z.data()
        .iter()
        .map(|&v| -0.5 * (v as f64) * (v as f64) - HALF_LN_2PI)
        .sum()
}

/// `log q(z)` under a diagonal Gaussian posterior, in nats.
pub fn log_q(post: &GaussianPosterior, z: &Tensor) -> Result<f64> {
    if z.len() != post.dim() {
        return Err(Error::shape(
            "log_q",
            format!("z {:?} for {} latents", z.shape(), post.dim()),
        ));
    }
    Ok(z.data()
        .iter()
        .zip(post.mean.data().iter().zip(post.log_std.data()))
        .map(|(&z, (&m, &s))| {
            let t = (z as f64 - m as f64) * (-(s as f64)).exp();
            -0.5 * t * t - s as f64 - HALF_LN_2PI
        })
        .sum())
}

pub(crate) fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
