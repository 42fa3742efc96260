use rand::Rng;
use rand_distr::StandardNormal;

use super::VaeModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where model samples take their latent from.
#[derive(Debug, Clone, Copy)]
pub enum LatentSource<'a> {
    /// `z ~ N(0, I)`.
    Prior,
    /// `x ~ dataset`, then `z ~ q(z|x)`: a draw from the aggregate posterior.
    AggregatePosterior(&'a Dataset),
}

/// One discrete sample `x' ~ p(x|z)` with `z` from `source`.
pub fn sample_model(
    model: &VaeModel,
    rng: &mut impl Rng,
    source: LatentSource<'_>,
) -> Result<Vec<u8>> {
    sample_batch(model, 1, source, rng)
}

/// `n` samples laid out row-major (`n × data_dim`). Draws nothing from `rng`
/// when `n == 0`.
pub fn sample_batch(
    model: &VaeModel,
    n: usize,
    source: LatentSource<'_>,
    rng: &mut impl Rng,
) -> Result<Vec<u8>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let l = model.latent_dim();
    let z = match source {
        LatentSource::Prior => Tensor::from_fn(&[n, l], |_| rng.sample::<f32, _>(StandardNormal)),
        LatentSource::AggregatePosterior(data) => {
            if data.is_empty() {
                return Err(Error::config(
                    "aggregate-posterior sampling needs a non-empty dataset",
                ));
            }
            if data.dim() != model.data_dim() {
                return Err(Error::shape(
                    "sample_model",
                    format!(
                        "dataset dim {} for model dim {}",
                        data.dim(),
                        model.data_dim()
                    ),
                ));
            }
            let mut xs = Vec::with_capacity(n * data.dim());
            for _ in 0..n {
                xs.extend_from_slice(data.item(rng.random_range(0..data.len())));
            }
            let posts = model.encode_batch(&xs)?;
            let mut z = Vec::with_capacity(n * l);
            for post in &posts {
                for (m, s) in post.mean.data().iter().zip(post.log_std.data()) {
                    let e: f32 = rng.sample(StandardNormal);
                    z.push(m + s.exp() * e);
                }
            }
            Tensor::matrix(n, l, z)?
        }
    };
    let dists = model.decode_batch(&z)?;
    let mut out = Vec::with_capacity(n * model.data_dim());
    for dist in &dists {
        out.extend(dist.sample(rng));
    }
    Ok(out)
}
