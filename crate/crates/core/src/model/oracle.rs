//! Brute-force quadrature over the latent space for tiny models.

use super::{GaussianPosterior, ObsModel, VaeModel, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_LATENT: usize = 2;
const MAX_DATA_DIM: usize = 8;
const GRID_HALF_WIDTH: f64 = 8.0;

/// Quadrature results for one datum.
#[derive(Debug, Clone)]
pub struct MarginalOracle {
    /// `log p(x)` in nats.
    pub log_px: f64,
    /// Grid points, row-major `cells × latent`.
    pub points: Vec<f64>,
    /// `log p(x, z)` at each grid point.
    pub log_joint: Vec<f64>,
    /// Normalised posterior mass of each cell.
    pub posterior: Vec<f64>,
    /// Volume of one grid cell.
    pub cell_volume: f64,
    pub latent: usize,
}

impl MarginalOracle {
    pub fn cells(&self) -> usize {
        self.log_joint.len()
    }

    /// `KL(q ‖ p(z|x))` evaluated on the fixed z-grid. Only accurate when `q`
    /// is wide compared with the grid spacing.
    pub fn kl_from(&self, post: &GaussianPosterior) -> f64 {
        let l = self.latent;
        let mut kl = 0.0;
        for c in 0..self.cells() {
            let z = &self.points[c * l..(c + 1) * l];
            let lq = log_q64(post, z);
            let q = lq.exp() * self.cell_volume;
            if q > 0.0 {
                kl += q * (lq - (self.log_joint[c] - self.log_px));
            }
        }
        kl
    }

    /// Posterior mean and standard deviation per latent dimension.
    pub fn posterior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.latent;
        let mut mean = vec![0.0; l];
        let mut second = vec![0.0; l];
        for c in 0..self.cells() {
            for j in 0..l {
                let z = self.points[c * l + j];
                mean[j] += self.posterior[c] * z;
                second[j] += self.posterior[c] * z * z;
            }
        }
        let std = mean
            .iter()
            .zip(&second)
            .map(|(m, s)| (s - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }
}

fn log_q64(post: &GaussianPosterior, z: &[f64]) -> f64 {
    z.iter()
        .zip(post.mean.data().iter().zip(post.log_std.data()))
        .map(|(&z, (&m, &s))| {
            let t = (z - m as f64) * (-(s as f64)).exp();
            -0.5 * t * t - s as f64 - HALF_LN_2PI
        })
        .sum()
}

fn check_tiny(model: &VaeModel) -> Result<()> {
    let a = model.arch;
    if a.latent > MAX_LATENT || a.data_dim > MAX_DATA_DIM || a.obs != ObsModel::Bernoulli {
        return Err(Error::config(format!(
            "brute-force marginal needs latent <= {MAX_LATENT}, data_dim <= {MAX_DATA_DIM}, bernoulli; got {}/{}/{}",
            a.latent,
            a.data_dim,
            a.obs.name()
        )));
    }
    Ok(())
}

/// Midpoint-rule grid of `points_per_dim` cells per axis on `[−8, 8]^L`.
pub fn brute_marginal(model: &VaeModel, x: &[u8], points_per_dim: usize) -> Result<MarginalOracle> {
    check_tiny(model)?;
    model.check_x(x)?;
    if x.len() != model.data_dim() {
        return Err(Error::shape("brute_marginal", "expects a single datum"));
    }
    let l = model.latent_dim();
    let h = 2.0 * GRID_HALF_WIDTH / points_per_dim as f64;
    let cells = points_per_dim.pow(l as u32);
    let mut points = Vec::with_capacity(cells * l);
    for c in 0..cells {
        let mut rest = c;
        for _ in 0..l {
            points.push(-GRID_HALF_WIDTH + (rest % points_per_dim) as f64 * h + 0.5 * h);
            rest /= points_per_dim;
        }
    }

    let mut log_joint = Vec::with_capacity(cells);
    const CHUNK: usize = 4096;
    for start in (0..cells).step_by(CHUNK) {
        let end = (start + CHUNK).min(cells);
        let z = Tensor::matrix(
            end - start,
            l,
            points[start * l..end * l]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        )?;
        for (k, dist) in model.decode_batch(&z)?.iter().enumerate() {
            let zc = &points[(start + k) * l..(start + k + 1) * l];
            let lp: f64 = zc.iter().map(|v| -0.5 * v * v - HALF_LN_2PI).sum();
            log_joint.push(dist.log_prob(x)? + lp);
        }
    }

    let max = log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_joint.iter().map(|v| (v - max).exp()).sum();
    let cell_volume = h.powi(l as i32);
    let log_px = max + total.ln() + cell_volume.ln();
    let posterior = log_joint.iter().map(|v| (v - max).exp() / total).collect();
    Ok(MarginalOracle {
        log_px,
        points,
        log_joint,
        posterior,
        cell_volume,
        latent: l,
    })
}

/// Exact expected ELBO `E_q[log p(x,z) − log q(z|x)]` by quadrature in the
/// posterior's own standardized coordinates (independent of the z-grid).
pub fn expected_elbo(
    model: &VaeModel,
    x: &[u8],
    post: &GaussianPosterior,
    points_per_dim: usize,
) -> Result<f64> {
    check_tiny(model)?;
    let l = model.latent_dim();
    const T_MAX: f64 = 9.0;
    let h = 2.0 * T_MAX / points_per_dim as f64;
    let cells = points_per_dim.pow(l as u32);
    let (mean, std): (Vec<f64>, Vec<f64>) = post
        .mean
        .data()
        .iter()
        .zip(post.log_std.data())
        .map(|(&m, &s)| (m as f64, (s as f64).exp()))
        .unzip();

    let mut z = Vec::with_capacity(cells * l);
    let mut weight = Vec::with_capacity(cells);
    for c in 0..cells {
        let mut rest = c;
        let mut w = 1.0;
        for j in 0..l {
            let t = -T_MAX + (rest % points_per_dim) as f64 * h + 0.5 * h;
            rest /= points_per_dim;
            w *= (-0.5 * t * t - HALF_LN_2PI).exp() * h;
            z.push(mean[j] + std[j] * t);
        }
        weight.push(w);
    }
    let norm: f64 = weight.iter().sum();
    let zt = Tensor::matrix(cells, l, z.iter().map(|&v| v as f32).collect())?;
    let dists = model.decode_batch(&zt)?;
    let mut expected_log_px = 0.0;
    for (dist, w) in dists.iter().zip(&weight) {
        expected_log_px += w / norm * dist.log_prob(x)?;
    }
    // KL(q ‖ N(0, I)) in closed form.
    let kl_prior: f64 = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0) - s.ln())
        .sum();
    Ok(expected_log_px - kl_prior)
}
