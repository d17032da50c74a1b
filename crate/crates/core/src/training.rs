//! Utterance-level permutation invariant training of the mask estimator.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::model::checkpoint::Checkpoint;
use crate::model::{MaskSet, ModelConfig, ModelParams, Real, NUM_SOURCES};
use crate::signal::{stft, MultichannelWaveform, Spectrogram, StftConfig};

/// Index of the array channel that carries the training targets.
pub const REFERENCE_CHANNEL: usize = 0;

/// Mixture plus the four reference signals at the reference channel, in the
/// order speaker 0, speaker 1, stationary noise, transient noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub mixture: MultichannelWaveform,
    pub references: [Vec<f64>; NUM_SOURCES],
    pub active_speakers: usize,
}

/// Source of training examples addressable by index.
pub trait Dataset {
    fn len(&self) -> usize;
    fn example(&self, index: usize) -> Result<TrainingExample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for Vec<TrainingExample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn example(&self, index: usize) -> Result<TrainingExample> {
        self.get(index).cloned().ok_or_else(|| Error::Invalid(format!("example {index} out of range")))
    }
}

/// One model input with its magnitude targets, all indexed `(bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub mixture: Spectrogram,
    /// `|Y|` at the reference channel.
    pub mixture_ref_mag: Vec<f64>,
    pub references: [Vec<f64>; NUM_SOURCES],
    pub active_speakers: usize,
}

impl TrainingSample {
    pub fn new(
        mixture: Spectrogram,
        mixture_ref_mag: Vec<f64>,
        references: [Vec<f64>; NUM_SOURCES],
        active_speakers: usize,
    ) -> Result<Self> {
        let n = mixture.num_bins() * mixture.num_frames();
        if mixture_ref_mag.len() != n || references.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("reference magnitudes must match the mixture (bin, frame) shape".into()));
        }
        if !(1..=2).contains(&active_speakers) {
            return Err(Error::Invalid(format!("{active_speakers} active speakers; expected 1 or 2")));
        }
        Ok(Self { mixture, mixture_ref_mag, references, active_speakers })
    }

    /// Crops `[start, start + len)` samples of the example, keeps `channels`
    /// of the mixture and transforms everything with `cfg`. The crop is scaled
    /// to unit RMS at the reference channel so every sample weighs the same in
    /// the loss.
    pub fn from_example(
        ex: &TrainingExample,
        channels: &[usize],
        start: usize,
        len: usize,
        cfg: &StftConfig,
    ) -> Result<Self> {
        let total = ex.mixture.len();
        if start + len > total {
            return Err(Error::Invalid(format!("crop {start}+{len} exceeds {total} samples")));
        }
        let rate = ex.mixture.sample_rate();
        let reference = &ex.mixture.channel(REFERENCE_CHANNEL)[start..start + len];
        let rms = (reference.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
        let gain = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        let crop = |x: &[f64]| x[start..start + len].iter().map(|v| v * gain).collect::<Vec<f64>>();
        let mix = MultichannelWaveform::new(channels.iter().map(|&m| crop(ex.mixture.channel(m))).collect(), rate)?;
        let ref_wave = MultichannelWaveform::mono(crop(ex.mixture.channel(REFERENCE_CHANNEL)), rate)?;
        let refs = MultichannelWaveform::new(ex.references.iter().map(|r| crop(r)).collect(), rate)?;
        let mixture = stft(&mix, cfg)?;
        let mixture_ref_mag = stft(&ref_wave, cfg)?.magnitude(0);
        let ref_spec = stft(&refs, cfg)?;
        let references = std::array::from_fn(|s| ref_spec.magnitude(s));
        Self::new(mixture, mixture_ref_mag, references, ex.active_speakers)
    }
}

/// Loss value and the speaker assignment attaining it: reference `s` is
/// matched with mask `perm[s]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpitLoss {
    pub loss: f64,
    pub perm: [usize; 2],
}

pub const SPEAKER_PERMS: [[usize; 2]; 2] = [[0, 1], [1, 0]];

fn mse(mask: &[f64], mag: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = mask.iter().zip(mag).zip(target).map(|((m, y), s)| (m * y - s) * (m * y - s)).sum();
    sum / mask.len() as f64
}

/// Loss of one fixed speaker assignment.
pub fn permutation_loss(masks: &MaskSet, mixture_ref_mag: &[f64], refs: &[Vec<f64>; NUM_SOURCES], perm: [usize; 2]) -> f64 {
    let speech = mse(masks.source(perm[0]), mixture_ref_mag, &refs[0]) + mse(masks.source(perm[1]), mixture_ref_mag, &refs[1]);
    let noise = mse(masks.source(2), mixture_ref_mag, &refs[2]) + mse(masks.source(3), mixture_ref_mag, &refs[3]);
    speech + noise
}

/// Magnitude-domain masked-approximation loss minimized over both speaker
/// assignments. Exact ties keep the identity assignment.
pub fn upit_loss(masks: &MaskSet, mixture_ref_mag: &[f64], refs: &[Vec<f64>; NUM_SOURCES]) -> Result<UpitLoss> {
    let n = masks.num_bins() * masks.num_frames();
    if mixture_ref_mag.len() != n || refs.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("masks, mixture and references must share the (bin, frame) shape".into()));
    }
    let identity = permutation_loss(masks, mixture_ref_mag, refs, SPEAKER_PERMS[0]);
    let swapped = permutation_loss(masks, mixture_ref_mag, refs, SPEAKER_PERMS[1]);
    Ok(if swapped < identity {
        UpitLoss { loss: swapped, perm: SPEAKER_PERMS[1] }
    } else {
        UpitLoss { loss: identity, perm: SPEAKER_PERMS[0] }
    })
}

/// `d loss / d M[s, f, t]` for a fixed assignment, scaled by `weight`.
pub fn upit_mask_gradient(
    masks: &MaskSet,
    mixture_ref_mag: &[f64],
    refs: &[Vec<f64>; NUM_SOURCES],
    perm: [usize; 2],
    weight: f64,
) -> Vec<f64> {
    let n = mixture_ref_mag.len();
    let mut grad = vec![0.0; NUM_SOURCES * n];
    let scale = 2.0 * weight / n as f64;
    let pairs = [(perm[0], 0), (perm[1], 1), (2, 2), (3, 3)];
    for (mask_idx, ref_idx) in pairs {
        let g = &mut grad[mask_idx * n..(mask_idx + 1) * n];
        for (i, gv) in g.iter_mut().enumerate() {
            let y = mixture_ref_mag[i];
            *gv = scale * (masks.source(mask_idx)[i] * y - refs[ref_idx][i]) * y;
        }
    }
    grad
}

/// Mean batch loss and its gradient with respect to every parameter.
pub fn batch_gradient<T: Real>(params: &ModelParams<T>, batch: &[TrainingSample]) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut grads = vec![T::zero(); params.num_parameters()];
    let mut total = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for sample in batch {
        let feats = extract_features(&sample.mixture);
        let (masks, cache) = params.forward_cached(&feats)?;
        let loss = upit_loss(&masks, &sample.mixture_ref_mag, &sample.references)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", loss.loss)));
        }
        total += loss.loss * weight;
        let dmask = upit_mask_gradient(&masks, &sample.mixture_ref_mag, &sample.references, loss.perm, weight);
        params.backward(&cache, &dmask, &mut grads);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok((total, grads))
}

/// Mean uPIT loss of a batch without gradients.
pub fn batch_loss<T: Real>(params: &ModelParams<T>, batch: &[TrainingSample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let masks = params.forward(&extract_features(&sample.mixture))?;
        total += upit_loss(&masks, &sample.mixture_ref_mag, &sample.references)?.loss;
    }
    Ok(total / batch.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 1000, clip_norm: 5.0 }
    }
}

impl AdamConfig {
    /// Learning rate used for the update that brings the step count to `step + 1`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam moments mirroring the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(num_parameters: usize) -> Self {
        Self { m: vec![T::zero(); num_parameters], v: vec![T::zero(); num_parameters], step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Clipped Adam update from a precomputed gradient.
pub fn apply_gradient<T: Real>(params: &mut ModelParams<T>, grads: &[T], opt: &mut OptimizerState<T>, cfg: &AdamConfig) -> (f64, f64) {
    let grad_norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    let clip = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
    let lr = cfg.learning_rate(opt.step);
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].f64() * clip;
        let m = cfg.beta1 * opt.m[i].f64() + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * opt.v[i].f64() + (1.0 - cfg.beta2) * g * g;
        opt.m[i] = T::of(m);
        opt.v[i] = T::of(v);
        if lr != 0.0 {
            *p = T::of(p.f64() - lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps));
        }
    }
    (lr, grad_norm)
}

/// One optimizer step on the mean loss of `batch`.
pub fn grad_step<T: Real>(
    params: &mut ModelParams<T>,
    batch: &[TrainingSample],
    opt: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    let (loss, grads) = batch_gradient(params, batch)?;
    let (lr, grad_norm) = apply_gradient(params, &grads, opt, cfg);
    Ok(StepReport { loss, lr, grad_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub stft: StftConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    /// Frames per training crop.
    pub crop_frames: usize,
    pub min_channels: usize,
    pub max_channels: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            stft: StftConfig::desk(),
            adam: AdamConfig::default(),
            epochs: 1,
            max_steps: 0,
            batch_size: 4,
            crop_frames: 200,
            min_channels: 3,
            max_channels: 7,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stft.validate()?;
        if self.model.bins != self.stft.num_bins() {
            return Err(Error::Config(format!(
                "model expects {} bins but the STFT yields {}",
                self.model.bins,
                self.stft.num_bins()
            )));
        }
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("batch size and crop length must be positive".into()));
        }
        if self.min_channels == 0 || self.min_channels > self.max_channels {
            return Err(Error::Config(format!("bad channel range {}..={}", self.min_channels, self.max_channels)));
        }
        Ok(())
    }

    /// Samples per crop; covers exactly `crop_frames` frames.
    pub fn crop_samples(&self) -> usize {
        (self.crop_frames - 1) * self.stft.hop_length + self.stft.frame_length
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        let steps = (self.epochs * dataset_len).div_ceil(self.batch_size) as u64;
        if self.max_steps > 0 {
            steps.min(self.max_steps)
        } else {
            steps
        }
    }
}

/// What goes into the mini-batch of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub step: u64,
    /// Requested channel count; samples with fewer microphones use all of theirs.
    pub channels: usize,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub index: usize,
    /// Seeds the channel subset and crop position of this item.
    pub seed: u64,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Epoch order: a seeded shuffle of `0..len`.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut step_rng(seed, epoch.wrapping_mul(2) + 1));
    order
}

/// Batch composition as a pure function of `(seed, step)`, which makes
/// resumed runs identical to uninterrupted ones.
pub fn batch_plan(cfg: &TrainConfig, seed: u64, step: u64, dataset_len: usize) -> BatchPlan {
    let mut rng = step_rng(seed, step.wrapping_mul(2));
    let channels = rng.random_range(cfg.min_channels..=cfg.max_channels);
    let first = step as usize * cfg.batch_size;
    let mut order_cache: Option<(usize, Vec<usize>)> = None;
    let items = (first..first + cfg.batch_size)
        .map(|pos| {
            let epoch = pos / dataset_len;
            if order_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                order_cache = Some((epoch, epoch_order(seed, epoch as u64, dataset_len)));
            }
            let index = order_cache.as_ref().map(|(_, o)| o[pos % dataset_len]).unwrap_or(0);
            BatchItem { index, seed: rng.random() }
        })
        .collect();
    BatchPlan { step, channels, items }
}

/// Reference channel plus a random subset of the others, `count` in total.
pub fn choose_channels(available: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let count = count.clamp(1, available);
    let mut others: Vec<usize> = (0..available).filter(|&m| m != REFERENCE_CHANNEL).collect();
    others.shuffle(rng);
    let mut chosen = vec![REFERENCE_CHANNEL];
    chosen.extend_from_slice(&others[..count - 1]);
    chosen.sort_unstable();
    chosen
}

pub fn materialize_batch(plan: &BatchPlan, dataset: &dyn Dataset, cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let crop = cfg.crop_samples();
    plan.items
        .iter()
        .map(|item| {
            let ex = dataset.example(item.index)?;
            let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
            let channels = choose_channels(ex.mixture.num_channels(), plan.channels, &mut rng);
            let len = ex.mixture.len();
            let (start, take) = if len > crop { (rng.random_range(0..=len - crop), crop) } else { (0, len) };
            TrainingSample::from_example(&ex, &channels, start, take, &cfg.stft)
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub channels: usize,
    pub grad_norm: f64,
}

impl std::fmt::Display for LogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} loss={:.6e} lr={:.3e} m={} grad_norm={:.4e}",
            self.step, self.loss, self.lr, self.channels, self.grad_norm
        )
    }
}

/// Parameters and optimizer state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub opt: OptimizerState<T>,
}

pub const ADAM_M_ARRAY: &str = "adam_m";
pub const ADAM_V_ARRAY: &str = "adam_v";

impl<T: Real> TrainState<T> {
    pub fn init(model: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(model, seed)?;
        let opt = OptimizerState::new(params.num_parameters());
        Ok(Self { params, opt })
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.params);
        ckpt.step = self.opt.step;
        ckpt.arrays.push((ADAM_M_ARRAY.into(), self.opt.m.iter().map(|v| v.f64()).collect()));
        ckpt.arrays.push((ADAM_V_ARRAY.into(), self.opt.v.iter().map(|v| v.f64()).collect()));
        ckpt.meta = meta;
        ckpt
    }

    /// Restores parameters and, when present, optimizer moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params: ModelParams<T> = ckpt.params()?;
        let n = params.num_parameters();
        let mut opt = OptimizerState::new(n);
        opt.step = ckpt.step;
        for (name, dst) in [(ADAM_M_ARRAY, &mut opt.m), (ADAM_V_ARRAY, &mut opt.v)] {
            if let Some(values) = ckpt.array(name) {
                if values.len() != n {
                    return Err(Error::Format(format!("{name} has {} values, expected {n}", values.len())));
                }
                *dst = values.iter().map(|&v| T::of(v)).collect();
            }
        }
        Ok(Self { params, opt })
    }
}

/// Where and how often a run persists itself.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Extra provenance stored in every checkpoint.
    pub meta: serde_json::Value,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.log";

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Runs optimizer steps from `state.opt.step` up to the configured total.
pub fn train_from<T: Real>(
    dataset: &dyn Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut state: TrainState<T>,
    output: &TrainOutput,
) -> Result<(TrainState<T>, Vec<LogEntry>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if *state.params.config() != cfg.model {
        return Err(Error::Config("initial parameters do not match the configured model".into()));
    }
    let total = cfg.total_steps(dataset.len());
    let log_path = output.dir.as_ref().map(|d| d.join(TRAIN_LOG));
    let mut log = Vec::new();
    if let Some(path) = &log_path {
        if state.opt.step == 0 {
            let header = format!("# seed={seed} config={}", serde_json::to_string(cfg)?);
            append_log(path, &header)?;
        }
    }
    while state.opt.step < total {
        let plan = batch_plan(cfg, seed, state.opt.step, dataset.len());
        let batch = materialize_batch(&plan, dataset, cfg)?;
        let report = grad_step(&mut state.params, &batch, &mut state.opt, &cfg.adam)?;
        let entry = LogEntry {
            step: state.opt.step,
            loss: report.loss,
            lr: report.lr,
            channels: plan.channels,
            grad_norm: report.grad_norm,
        };
        log.push(entry);
        if let Some(path) = &log_path {
            if cfg.log_every > 0 && (state.opt.step % cfg.log_every == 0 || state.opt.step == total) {
                append_log(path, &entry.to_string())?;
            }
        }
        if let Some(dir) = &output.dir {
            if cfg.checkpoint_every > 0 && state.opt.step % cfg.checkpoint_every == 0 {
                state.to_checkpoint(output.meta.clone()).save(&dir.join(format!("step{:06}.ckpt", state.opt.step)))?;
            }
        }
    }
    if let Some(dir) = &output.dir {
        state.to_checkpoint(output.meta.clone()).save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((state, log))
}

/// Fresh training run from a seeded initialization.
pub fn train<T: Real>(dataset: &dyn Dataset, cfg: &TrainConfig, seed: u64, output: &TrainOutput) -> Result<(ModelParams<T>, Vec<LogEntry>)> {
    cfg.validate()?;
    let state = TrainState::init(cfg.model, seed)?;
    let (state, log) = train_from(dataset, cfg, seed, state, output)?;
    Ok((state.params, log))
}
