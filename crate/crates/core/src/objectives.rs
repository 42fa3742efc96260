//! Joint VAE training, the encoder objectives, optimal inference on a fixed
//! dataset and the amortized-inference gap.
//!
//! Every encoder objective maximizes a single-sample ELBO (or, for sleep,
//! `log q(z|x)`) with the decoder frozen. They differ in where the encoder's
//! inputs come from:
//!
//! * wake: training data;
//! * reverse sleep: fresh model samples `x' ~ p(x)`;
//! * half asleep: a batch of `B − round(αB)` data rows followed by
//!   `round(αB)` model samples;
//! * sleep: joint draws `(z, x)` from the model, scored by `log q(z|x)`;
//! * denoising: data with Gaussian noise on the encoder input, mixed with the
//!   clean ELBO.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{bpd, sample_batch, LatentSource, Trainable, VaeModel, HALF_LN_2PI};
use crate::tensor::Tensor;

pub use crate::bits_back::OptimalInferenceConfig;

/// Latent source for model samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleSource {
    #[default]
    Prior,
    /// `z ~ q(z|x)` with `x` drawn from the training data.
    AggregatePosterior,
}

impl SampleSource {
    pub fn name(self) -> &'static str {
        match self {
            SampleSource::Prior => "prior",
            SampleSource::AggregatePosterior => "aggregate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(SampleSource::Prior),
            "aggregate" | "aggregate-posterior" => Ok(SampleSource::AggregatePosterior),
            other => Err(Error::config(format!("unknown latent source '{other}'"))),
        }
    }
}

/// Share of model samples in each half-asleep batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConfig {
    pub alpha: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl MixtureConfig {
    /// Model samples in a batch of `batch_size`.
    pub fn model_samples(&self, batch_size: usize) -> usize {
        (self.alpha * batch_size as f64).round() as usize
    }
}

/// Noise level on the encoder input and weight of the noisy ELBO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoisingConfig {
    pub sigma: f32,
    pub alpha_mix: f32,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            alpha_mix: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Wake,
    ReverseSleep,
    HalfAsleep(MixtureConfig),
    Sleep,
    Denoising(DenoisingConfig),
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::HalfAsleep(m) if !(0.0..=1.0).contains(&m.alpha) => {
                Err(Error::config(format!("alpha {} outside [0, 1]", m.alpha)))
            }
            Objective::Denoising(d) if !(d.sigma.is_finite() && d.sigma >= 0.0) => Err(
                Error::config(format!("sigma {} must be finite and >= 0", d.sigma)),
            ),
            Objective::Denoising(d) if !(0.0..=1.0).contains(&d.alpha_mix) => Err(Error::config(
                format!("denoising weight {} outside [0, 1]", d.alpha_mix),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Wake => "wake",
            Objective::ReverseSleep => "reverse-sleep",
            Objective::HalfAsleep(_) => "half-asleep",
            Objective::Sleep => "sleep",
            Objective::Denoising(_) => "denoising",
        }
    }

    /// Objective from its command-line name plus optional `alpha`/`sigma`.
    pub fn parse(name: &str, alpha: Option<f64>, sigma: Option<f32>) -> Result<Self> {
        let objective = match name.replace('_', "-").as_str() {
            "wake" => Objective::Wake,
            "reverse-sleep" => Objective::ReverseSleep,
            "sleep" => Objective::Sleep,
            "half-asleep" => Objective::HalfAsleep(MixtureConfig {
                alpha: alpha.unwrap_or(MixtureConfig::default().alpha),
            }),
            "denoising" => Objective::Denoising(DenoisingConfig {
                sigma: sigma.unwrap_or(DenoisingConfig::default().sigma),
                alpha_mix: alpha.map_or(DenoisingConfig::default().alpha_mix, |a| a as f32),
            }),
            other => return Err(Error::config(format!("unknown objective '{other}'"))),
        };
        objective.validate()?;
        Ok(objective)
    }

    /// Real data rows consumed per batch.
    pub fn data_rows(&self, batch_size: usize) -> usize {
        match self {
            Objective::Wake | Objective::Denoising(_) => batch_size,
            Objective::HalfAsleep(m) => batch_size - m.model_samples(batch_size),
            Objective::ReverseSleep | Objective::Sleep => 0,
        }
    }
}

/// Settings shared by every encoder-training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderTrainConfig {
    pub objective: Objective,
    pub source: SampleSource,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
}

impl EncoderTrainConfig {
    pub fn new(objective: Objective, epochs: usize, lr: f32) -> Self {
        Self {
            objective,
            source: SampleSource::Prior,
            batch_size: 100,
            lr,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        validate_common(self.batch_size, self.lr)
    }
}

fn validate_common(batch_size: usize, lr: f32) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::config(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// Joint encoder/decoder training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Evaluate both splits every this many epochs (and after the last).
    /// Zero evaluates only after the last epoch.
    pub eval_every: usize,
    /// Seed of the evaluation noise, fixed across evaluations.
    pub eval_seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            lr: 3e-4,
            eval_every: 0,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One BPD measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub epoch: usize,
    pub split: Split,
    pub bpd: f64,
}

fn standard_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.sample(StandardNormal))
}

fn mean_rows(tape: &mut Tape, rows: Var) -> Var {
    let n = tape.value(rows).len();
    let total = tape.sum(rows);
    tape.scale(total, 1.0 / n as f32)
}

fn latent_source(source: SampleSource, pool: Option<&Dataset>) -> Result<LatentSource<'_>> {
    match source {
        SampleSource::Prior => Ok(LatentSource::Prior),
        SampleSource::AggregatePosterior => pool
            .map(LatentSource::AggregatePosterior)
            .ok_or_else(|| Error::config("aggregate-posterior sampling needs training data")),
    }
}

/// Recorded loss of one encoder batch.
struct EncoderBatch {
    tape: Tape,
    loss: Var,
    /// One handle list per encoder replica on the tape.
    handles: Vec<Vec<Var>>,
}

fn encoder_batch(
    model: &VaeModel,
    objective: &Objective,
    source: SampleSource,
    data_rows: &[u8],
    batch_size: usize,
    pool: Option<&Dataset>,
    rng: &mut impl Rng,
) -> Result<EncoderBatch> {
    let l = model.latent_dim();
    let d = model.data_dim();
    let mut tape = Tape::new();

    match objective {
        Objective::Wake | Objective::ReverseSleep | Objective::HalfAsleep(_) => {
            let samples = batch_size - objective.data_rows(batch_size);
            let mut rows = data_rows.to_vec();
            rows.extend(sample_batch(
                model,
                samples,
                latent_source(source, pool)?,
                rng,
            )?);
            let noise = standard_noise(rows.len() / d, l, rng);
            let g = model.elbo_graph(
                &mut tape,
                model.network_input(&rows)?,
                &rows,
                &noise,
                Trainable::Encoder,
            )?;
            let mean = mean_rows(&mut tape, g.rows);
            let loss = tape.scale(mean, -1.0);
            let handles = g.encoder;
            Ok(EncoderBatch {
                tape,
                loss,
                handles: vec![handles],
            })
        }
        Objective::Sleep => {
            // −log q(z|x) on joint draws z ~ p(z), x ~ p(x|z).
            let z = standard_noise(batch_size, l, rng);
            let mut xs = Vec::with_capacity(batch_size * d);
            for dist in model.decode_batch(&z)? {
                xs.extend(dist.sample(rng));
            }
            let input = tape.constant(model.network_input(&xs)?);
            let (mean, log_std, handles) = model.encoder_graph(&mut tape, input, true)?;
            let zc = tape.constant(z);
            let diff = tape.sub(zc, mean)?;
            let neg = tape.scale(log_std, -1.0);
            let inv_std = tape.exp(neg);
            let t = tape.mul(diff, inv_std)?;
            let t2 = tape.mul(t, t)?;
            let quad = tape.row_sum(t2);
            let quad = tape.scale(quad, 0.5);
            let ls = tape.row_sum(log_std);
            let nlq = tape.add(quad, ls)?;
            let nlq = tape.add_scalar(nlq, (l as f64 * HALF_LN_2PI) as f32);
            let loss = mean_rows(&mut tape, nlq);
            Ok(EncoderBatch {
                tape,
                loss,
                handles: vec![handles],
            })
        }
        Objective::Denoising(cfg) => {
            let n = data_rows.len() / d;
            let clean = model.network_input(data_rows)?;
            let eps = standard_noise(n, d, rng);
            let noisy: Vec<f32> = clean
                .data()
                .iter()
                .zip(eps.data())
                .map(|(x, e)| x + cfg.sigma * e)
                .collect();
            let noisy = Tensor::matrix(n, d, noisy)?;
            let noise_a = standard_noise(n, l, rng);
            let noise_b = standard_noise(n, l, rng);
            let ga = model.elbo_graph(&mut tape, noisy, data_rows, &noise_a, Trainable::Encoder)?;
            let gb = model.elbo_graph(&mut tape, clean, data_rows, &noise_b, Trainable::Encoder)?;
            let ma = mean_rows(&mut tape, ga.rows);
            let mb = mean_rows(&mut tape, gb.rows);
            let wa = tape.scale(ma, -cfg.alpha_mix);
            let wb = tape.scale(mb, cfg.alpha_mix - 1.0);
            let loss = tape.add(wa, wb)?;
            Ok(EncoderBatch {
                tape,
                loss,
                handles: vec![ga.encoder, gb.encoder],
            })
        }
    }
}

/// Loss and encoder gradients (in `model.encoder.params()` order) of one
/// batch. `data_rows` must hold `objective.data_rows(batch_size)` rows.
pub fn encoder_loss_and_grads(
    model: &VaeModel,
    objective: &Objective,
    source: SampleSource,
    data_rows: &[u8],
    batch_size: usize,
    pool: Option<&Dataset>,
    rng: &mut impl Rng,
) -> Result<(f32, Vec<Tensor>)> {
    objective.validate()?;
    let want = objective.data_rows(batch_size) * model.data_dim();
    if data_rows.len() != want {
        return Err(Error::shape(
            "encoder_batch",
            format!("{} data values, objective needs {want}", data_rows.len()),
        ));
    }
    let EncoderBatch {
        mut tape,
        loss,
        handles,
    } = encoder_batch(model, objective, source, data_rows, batch_size, pool, rng)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", objective.name())));
    }
    let mut grads = tape.backward(loss)?;
    let mut total: Vec<Tensor> = handles[0]
        .iter()
        .map(|&h| grads.take(h).expect("encoder gradient"))
        .collect();
    for replica in &handles[1..] {
        for (acc, &h) in total.iter_mut().zip(replica) {
            acc.add_assign(grads.get(h).expect("encoder gradient"));
        }
    }
    Ok((value, total))
}

/// Cycles through shuffled data indices, reshuffling on every wrap.
struct RowCursor {
    order: Vec<usize>,
    next: usize,
}

impl RowCursor {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn take(&mut self, data: &Dataset, rows: usize, rng: &mut impl Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(rows * data.dim());
        for _ in 0..rows {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.extend_from_slice(data.item(self.order[self.next]));
            self.next += 1;
        }
        out
    }
}

fn check_data(model: &VaeModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if data.dim() != model.data_dim() || data.domain() != model.arch.domain() {
        return Err(Error::shape(
            "training data",
            format!(
                "{}-dim {} data for a {}-dim {} model",
                data.dim(),
                data.domain().name(),
                model.data_dim(),
                model.arch.obs.name()
            ),
        ));
    }
    Ok(())
}

/// Trains the encoder only. An epoch is `ceil(N / B)` batches, whatever the
/// objective. `on_epoch` sees the 1-based epoch, the model and the epoch's
/// mean loss. Returns the per-epoch mean losses.
pub fn train_encoder(
    model: &mut VaeModel,
    data: &Dataset,
    cfg: &EncoderTrainConfig,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(usize, &VaeModel, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_data(model, data)?;
    let b = cfg.batch_size;
    let steps = data.len().div_ceil(b);
    let rows = cfg.objective.data_rows(b);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.encoder.params());
    let mut cursor = RowCursor::new(data.len());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let batch = cursor.take(data, rows, rng);
            let (loss, grads) = encoder_loss_and_grads(
                model,
                &cfg.objective,
                cfg.source,
                &batch,
                b,
                Some(data),
                rng,
            )
            .map_err(|e| with_context(e, epoch, step))?;
            let grads: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut model.encoder.params_mut(), &grads)
                .map_err(|e| with_context(e, epoch, step))?;
            total += loss as f64;
        }
        let mean = total / steps as f64;
        losses.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(losses)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => {
            Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})"))
        }
        other => other,
    }
}

/// Maximizes the mean single-sample ELBO over encoder and decoder. Both
/// splits are evaluated at the configured cadence; `on_eval` receives the
/// model after each evaluation.
pub fn train_vae_joint(
    model: &mut VaeModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &JointConfig,
    rng: &mut impl Rng,
    mut on_eval: impl FnMut(usize, &VaeModel, &[TracePoint]) -> Result<()>,
) -> Result<Vec<TracePoint>> {
    validate_common(cfg.batch_size, cfg.lr)?;
    check_data(model, train)?;
    if let Some(t) = test {
        check_data(model, t)?;
    }
    let b = cfg.batch_size;
    let l = model.latent_dim();
    let steps = train.len().div_ceil(b);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for (step, chunk) in order.chunks(b).enumerate() {
            let batch = train.select(chunk);
            let noise = standard_noise(chunk.len(), l, rng);
            let mut tape = Tape::new();
            let g = model.elbo_graph(
                &mut tape,
                model.network_input(batch.as_flat())?,
                batch.as_flat(),
                &noise,
                Trainable::Both,
            )?;
            let mean = mean_rows(&mut tape, g.rows);
            let loss = tape.scale(mean, -1.0);
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!(
                    "joint loss (epoch {epoch}, batch {step})"
                )));
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<&Tensor> = g
                .encoder
                .iter()
                .chain(&g.decoder)
                .map(|&h| grads.get(h).expect("parameter gradient"))
                .collect();
            let mut params: Vec<_> = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            adam.step(&mut params, &grads)
                .map_err(|e| with_context(e, epoch, step))?;
        }
        debug_assert_eq!(steps, order.chunks(b).len());
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if due {
            let mut points = vec![TracePoint {
                epoch,
                split: Split::Train,
                bpd: evaluate_bpd(model, train, cfg.eval_seed)?,
            }];
            if let Some(t) = test {
                points.push(TracePoint {
                    epoch,
                    split: Split::Test,
                    bpd: evaluate_bpd(model, t, cfg.eval_seed)?,
                });
            }
            on_eval(epoch, model, &points)?;
            trace.extend(points);
        }
    }
    Ok(trace)
}

const EVAL_CHUNK: usize = 500;

/// Per-datum single-sample negative ELBO in nats, noise from `rng`.
fn neg_elbo_pass(model: &VaeModel, data: &Dataset, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let l = model.latent_dim();
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let rows = data.select(chunk);
        let noise = standard_noise(chunk.len(), l, rng);
        out.extend(
            model
                .elbo_batch(rows.as_flat(), &noise)?
                .iter()
                .map(|&e| -(e as f64)),
        );
    }
    Ok(out)
}

/// Mean single-sample negative ELBO of `data` in bits per dimension, with
/// noise drawn from `seed`.
pub fn evaluate_bpd(model: &VaeModel, data: &Dataset, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = neg_elbo_pass(model, data, &mut rng)?;
    Ok(bpd(
        values.iter().sum::<f64>() / values.len() as f64,
        model.data_dim(),
    ))
}

/// Fits the encoder to `eval_set` by wake training with the decoder frozen.
pub fn optimal_inference_dataset(
    model: &mut VaeModel,
    eval_set: &Dataset,
    epochs: usize,
    lr: f32,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let cfg = EncoderTrainConfig::new(Objective::Wake, epochs, lr);
    train_encoder(model, eval_set, &cfg, rng, |_, _, _| Ok(()))
}

/// Amortized versus optimized negative ELBO per datum.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Mean negative ELBO (nats) over the noise draws.
    pub amortized: Vec<f64>,
    pub optimized: Vec<f64>,
    /// `amortized − optimized`.
    pub gap: Vec<f64>,
    /// Standard error of each gap entry.
    pub gap_se: Vec<f64>,
    pub amortized_bpd: f64,
    pub optimized_bpd: f64,
    pub gap_bpd: f64,
}

/// Both models are evaluated with the same noise draws, so identical models
/// give a gap of exactly zero.
pub fn measure_gap(
    amortized: &VaeModel,
    optimized: &VaeModel,
    eval_set: &Dataset,
    n_noise: usize,
    seed: u64,
) -> Result<GapReport> {
    if amortized.arch != optimized.arch
        || amortized.decoder_checksum() != optimized.decoder_checksum()
    {
        return Err(Error::config("gap models do not share decoder weights"));
    }
    if n_noise == 0 || eval_set.is_empty() {
        return Err(Error::config(
            "gap needs at least one datum and one noise draw",
        ));
    }
    let n = eval_set.len();
    let (mut sum_a, mut sum_o) = (vec![0.0; n], vec![0.0; n]);
    let (mut sum_d, mut sum_d2) = (vec![0.0; n], vec![0.0; n]);
    for draw in 0..n_noise {
        let s = seed.wrapping_add(draw as u64);
        let a = neg_elbo_pass(amortized, eval_set, &mut ChaCha8Rng::seed_from_u64(s))?;
        let o = neg_elbo_pass(optimized, eval_set, &mut ChaCha8Rng::seed_from_u64(s))?;
        for i in 0..n {
            let d = a[i] - o[i];
            sum_a[i] += a[i];
            sum_o[i] += o[i];
            sum_d[i] += d;
            sum_d2[i] += d * d;
        }
    }
    let k = n_noise as f64;
    let amortized_v: Vec<f64> = sum_a.iter().map(|v| v / k).collect();
    let optimized_v: Vec<f64> = sum_o.iter().map(|v| v / k).collect();
    let gap: Vec<f64> = sum_d.iter().map(|v| v / k).collect();
    let gap_se = sum_d
        .iter()
        .zip(&sum_d2)
        .map(|(s, s2)| {
            if n_noise < 2 {
                return 0.0;
            }
            let mean = s / k;
            let var = ((s2 - k * mean * mean) / (k - 1.0)).max(0.0);
            (var / k).sqrt()
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let dim = amortized.data_dim();
    Ok(GapReport {
        amortized_bpd: bpd(mean(&amortized_v), dim),
        optimized_bpd: bpd(mean(&optimized_v), dim),
        gap_bpd: bpd(mean(&gap), dim),
        amortized: amortized_v,
        optimized: optimized_v,
        gap,
        gap_se,
    })
}

/// Settings of the consistency experiment on data drawn from a pretrained
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub objectives: Vec<Objective>,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_test: 1_000,
            objectives: vec![Objective::Wake, Objective::Sleep, Objective::ReverseSleep],
            epochs: 100,
            lr: 1e-3,
            batch_size: 100,
            seeds: vec![0, 1, 2],
            data_seed: 0,
        }
    }
}

/// Test BPD after every epoch for one objective and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTrace {
    pub objective: Objective,
    pub seed: u64,
    pub test_bpd: Vec<f64>,
}

/// Trains a fresh encoder per objective and seed against the pretrained
/// decoder, on synthetic data sampled from that same model.
pub fn consistency_experiment(
    pretrained: &VaeModel,
    cfg: &ConsistencyConfig,
) -> Result<Vec<ConsistencyTrace>> {
    let (train, test) =
        crate::data::synth_from_model(pretrained, cfg.n_train, cfg.n_test, cfg.data_seed)?;
    consistency_on(pretrained, &train, &test, cfg)
}

/// As [`consistency_experiment`] with the synthetic splits supplied.
pub fn consistency_on(
    pretrained: &VaeModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &ConsistencyConfig,
) -> Result<Vec<ConsistencyTrace>> {
    let mut out = Vec::new();
    for objective in &cfg.objectives {
        for &seed in &cfg.seeds {
            let mut model = pretrained.clone();
            model.reinit_encoder(seed);
            let train_cfg = EncoderTrainConfig {
                objective: *objective,
                source: SampleSource::Prior,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                epochs: cfg.epochs,
            };
            let mut test_bpd = Vec::with_capacity(cfg.epochs);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            train_encoder(&mut model, train, &train_cfg, &mut rng, |_, m, _| {
                test_bpd.push(evaluate_bpd(m, test, cfg.data_seed)?);
                Ok(())
            })?;
            out.push(ConsistencyTrace {
                objective: *objective,
                seed,
                test_bpd,
            });
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation per epoch across the traces of one
/// objective.
pub fn summarize_traces(traces: &[ConsistencyTrace], objective: &str) -> Vec<(f64, f64)> {
    let runs: Vec<&ConsistencyTrace> = traces
        .iter()
        .filter(|t| t.objective.name() == objective)
        .collect();
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    (0..first.test_bpd.len())
        .map(|e| {
            let vals: Vec<f64> = runs.iter().map(|r| r.test_bpd[e]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests;
