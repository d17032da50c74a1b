//! Multichannel mask estimator for arrays of any size and layout.
//!
//! Each channel's feature stream is projected to the model width and run
//! through three conformer blocks whose parameters are shared across channels,
//! with a TAC layer after the first and second block. The streams are then
//! averaged into one, which passes two more conformer blocks and a sigmoid
//! mask head producing masks for two speakers, stationary noise and transient
//! noise.

pub mod checkpoint;
pub mod layers;
pub mod real;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use layers::{ConformerBlock, ConformerBlockCache, Init, Layout, Linear, TacCache, TacLayer};
pub use real::{flop_count, reset_flop_count, Mat, Real};

/// Speaker 0, speaker 1, stationary noise, transient noise.
pub const NUM_SOURCES: usize = 4;
pub const PRE_MERGE_BLOCKS: usize = 3;
pub const POST_MERGE_BLOCKS: usize = 2;
const FF_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frequency bins per frame (`fft_size / 2 + 1`).
    pub bins: usize,
    /// Model width.
    pub dim: usize,
    pub heads: usize,
    /// Depthwise convolution kernel width (odd).
    pub kernel: usize,
    /// Conformer layers per block.
    pub layers: usize,
}

impl ModelConfig {
    /// Small preset for CPU-scale experiments.
    pub fn desk() -> Self {
        Self { bins: 129, dim: 32, heads: 4, kernel: 33, layers: 2 }
    }

    /// Five layers per block, four heads, width 64, kernel 33.
    pub fn full() -> Self {
        Self { bins: 257, dim: 64, heads: 4, kernel: 33, layers: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config(format!("model width {} must be even", self.dim)));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel width {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (f, d, w, l) = (self.bins, self.dim, self.kernel, self.layers);
        let layer_norm = 2 * d;
        let feed_forward = layer_norm + (d * FF_EXPANSION * d + FF_EXPANSION * d) + (FF_EXPANSION * d * d + d);
        let attention = layer_norm + (3 * d * d + 3 * d) + (d * d + d);
        let conv = layer_norm + (2 * d * d + 2 * d) + (w * d + d) + layer_norm + (d * d + d);
        let layer = 2 * feed_forward + attention + conv + layer_norm;
        let blocks = (PRE_MERGE_BLOCKS + POST_MERGE_BLOCKS) * l * layer;
        let tac = (PRE_MERGE_BLOCKS - 1) * 2 * (d / 2) * d;
        let input = 2 * f * d + d;
        let head = d * NUM_SOURCES * f + NUM_SOURCES * f;
        input + blocks + tac + head
    }
}

/// Masks `M[s, f, t]`, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    data: Vec<f64>,
    bins: usize,
    frames: usize,
}

impl MaskSet {
    pub fn new(data: Vec<f64>, bins: usize, frames: usize) -> Result<Self> {
        if data.len() != NUM_SOURCES * bins * frames {
            return Err(Error::Shape(format!(
                "mask buffer of length {} does not match {NUM_SOURCES}x{bins}x{frames}",
                data.len()
            )));
        }
        Ok(Self { data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), bins, frames })
    }

    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self { data: vec![0.0; NUM_SOURCES * bins * frames], bins, frames }
    }

    pub fn num_sources(&self) -> usize {
        NUM_SOURCES
    }
    pub fn num_bins(&self) -> usize {
        self.bins
    }
    pub fn num_frames(&self) -> usize {
        self.frames
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, s: usize, f: usize, t: usize) -> f64 {
        self.data[(s * self.bins + f) * self.frames + t]
    }

    #[inline]
    pub fn set(&mut self, s: usize, f: usize, t: usize, v: f64) {
        self.data[(s * self.bins + f) * self.frames + t] = v.clamp(0.0, 1.0);
    }

    /// `(bin, frame)` block of one source.
    pub fn source(&self, s: usize) -> &[f64] {
        let n = self.bins * self.frames;
        &self.data[s * n..(s + 1) * n]
    }

    /// Swaps the two speaker masks.
    pub fn swap_speakers(&mut self) {
        let n = self.bins * self.frames;
        let (first, rest) = self.data.split_at_mut(n);
        first.swap_with_slice(&mut rest[..n]);
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Invalid(format!("frame range {start}..{end} out of 0..{}", self.frames)));
        }
        let mut data = Vec::with_capacity(NUM_SOURCES * self.bins * (end - start));
        for s in 0..NUM_SOURCES {
            for f in 0..self.bins {
                let base = (s * self.bins + f) * self.frames;
                data.extend_from_slice(&self.data[base + start..base + end]);
            }
        }
        Ok(Self { data, bins: self.bins, frames: end - start })
    }
}

/// Layer offsets into the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    layout: Layout,
    input: Linear,
    pre: Vec<ConformerBlock>,
    tac: Vec<TacLayer>,
    post: Vec<ConformerBlock>,
    head: Linear,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig { bins, dim, heads, kernel, layers } = config;
        let mut layout = Layout::default();
        let input = Linear::new(&mut layout, "input", 2 * bins, dim, true);
        let mut pre = Vec::new();
        let mut tac = Vec::new();
        for b in 0..PRE_MERGE_BLOCKS {
            pre.push(ConformerBlock::new(&mut layout, &format!("block{}", b + 1), dim, heads, kernel, layers));
            if b + 1 < PRE_MERGE_BLOCKS {
                tac.push(TacLayer::new(&mut layout, &format!("tac{}", b + 1), dim));
            }
        }
        let post = (0..POST_MERGE_BLOCKS)
            .map(|b| {
                ConformerBlock::new(&mut layout, &format!("block{}", PRE_MERGE_BLOCKS + b + 1), dim, heads, kernel, layers)
            })
            .collect();
        let head = Linear::new(&mut layout, "mask_head", dim, NUM_SOURCES * bins, true);
        Ok(Self { config, layout, input, pre, tac, post, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// Floating-point operations of one forward pass, split at the merge point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopStats {
    pub pre_merge: u64,
    pub post_merge: u64,
}

/// Activations retained for the backward pass.
pub struct ForwardCache<T> {
    channels: usize,
    frames: usize,
    inputs: Vec<Mat<T>>,
    pre: Vec<Vec<ConformerBlockCache<T>>>,
    tac: Vec<TacCache<T>>,
    post: Vec<ConformerBlockCache<T>>,
    head_in: Mat<T>,
    masks: Mat<T>,
}

/// Sinusoidal position code added after the input projection.
fn positional_encoding<T: Real>(frames: usize, dim: usize) -> Mat<T> {
    let mut pe = Mat::zeros(frames, dim);
    for t in 0..frames {
        let row = pe.row_mut(t);
        for i in 0..dim / 2 {
            let rate = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            row[2 * i] = T::of((t as f64 * rate).sin());
            row[2 * i + 1] = T::of((t as f64 * rate).cos());
        }
    }
    pe
}

/// Learnable weights of the mask estimator in precision `T`.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    network: Network,
    seed: u64,
    values: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases zero,
    /// norm gains one. Values are drawn in f64, so every precision gets the
    /// same parameters up to rounding.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(network.layout.len);
        for seg in &network.layout.segments {
            match seg.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    values.extend((0..seg.len).map(|_| T::of(rng.random_range(-bound..bound))));
                }
                Init::Ones => values.extend(std::iter::repeat_n(T::one(), seg.len)),
                Init::Zeros => values.extend(std::iter::repeat_n(T::zero(), seg.len)),
            }
        }
        Ok(Self { network, seed, values })
    }

    pub fn from_values(config: ModelConfig, seed: u64, values: Vec<T>) -> Result<Self> {
        let network = Network::new(config)?;
        if values.len() != network.layout.len {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, model needs {}",
                values.len(),
                network.layout.len
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { network, seed, values })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }
    pub fn network(&self) -> &Network {
        &self.network
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn num_parameters(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            network: self.network.clone(),
            seed: self.seed,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn check_features(&self, feats: &FeatureSequence) -> Result<()> {
        if feats.num_bins() != self.network.config.bins {
            return Err(Error::Shape(format!(
                "features have {} bins, model expects {}",
                feats.num_bins(),
                self.network.config.bins
            )));
        }
        if feats.num_channels() == 0 || feats.num_frames() == 0 {
            return Err(Error::Shape("features need at least one channel and one frame".into()));
        }
        Ok(())
    }

    /// Mask estimation for one window.
    pub fn forward(&self, feats: &FeatureSequence) -> Result<MaskSet> {
        Ok(self.run(feats, false)?.0)
    }

    pub fn forward_with_stats(&self, feats: &FeatureSequence) -> Result<(MaskSet, FlopStats)> {
        let (masks, _, stats) = self.run(feats, false)?;
        Ok((masks, stats))
    }

    pub fn forward_cached(&self, feats: &FeatureSequence) -> Result<(MaskSet, ForwardCache<T>)> {
        let (masks, cache, _) = self.run(feats, true)?;
        Ok((masks, cache.expect("cache requested")))
    }

    fn run(&self, feats: &FeatureSequence, keep: bool) -> Result<(MaskSet, Option<ForwardCache<T>>, FlopStats)> {
        self.check_features(feats)?;
        let net = &self.network;
        let p = &self.values[..];
        let (channels, frames, bins, dim) = (feats.num_channels(), feats.num_frames(), feats.num_bins(), net.config.dim);
        let pe = positional_encoding::<T>(frames, dim);

        let start = flop_count();
        let inputs: Vec<Mat<T>> = (0..channels)
            .map(|m| Mat::from_vec(frames, 2 * bins, feats.channel(m).iter().map(|&v| T::of(v)).collect()))
            .collect();
        let mut streams: Vec<Mat<T>> = inputs
            .iter()
            .map(|x| {
                let mut h = net.input.forward(p, x);
                h.add_assign(&pe);
                h
            })
            .collect();
        let mut pre_caches = Vec::with_capacity(PRE_MERGE_BLOCKS);
        let mut tac_caches = Vec::with_capacity(PRE_MERGE_BLOCKS - 1);
        for (b, block) in net.pre.iter().enumerate() {
            let mut caches = Vec::with_capacity(channels);
            for s in streams.iter_mut() {
                let (y, c) = block.forward(p, s);
                *s = y;
                if keep {
                    caches.push(c);
                }
            }
            pre_caches.push(caches);
            if let Some(tac) = net.tac.get(b) {
                let (out, c) = tac.forward(p, &streams);
                streams = out;
                if keep {
                    tac_caches.push(c);
                }
            }
        }
        let split = flop_count();

        let mut merged = Mat::zeros(frames, dim);
        for s in &streams {
            merged.add_assign(s);
        }
        let merged = merged.scaled(T::of(1.0 / channels as f64));
        let mut h = merged;
        let mut post_caches = Vec::with_capacity(POST_MERGE_BLOCKS);
        for block in &net.post {
            let (y, c) = block.forward(p, &h);
            h = y;
            if keep {
                post_caches.push(c);
            }
        }
        let logits = net.head.forward(p, &h);
        let masks = Mat::from_vec(logits.rows, logits.cols, logits.data.iter().map(|&v| real::sigmoid(v)).collect());
        let stats = FlopStats { pre_merge: split - start, post_merge: flop_count() - split };

        let mut data = vec![0.0; NUM_SOURCES * bins * frames];
        for t in 0..frames {
            for (j, &v) in masks.row(t).iter().enumerate() {
                data[j * frames + t] = v.f64();
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask estimator output".into()));
        }
        let mask_set = MaskSet::new(data, bins, frames)?;
        let cache = keep.then(|| ForwardCache {
            channels,
            frames,
            inputs,
            pre: pre_caches,
            tac: tac_caches,
            post: post_caches,
            head_in: h,
            masks,
        });
        Ok((mask_set, cache, stats))
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d M[s, f, t]`.
    pub fn backward(&self, cache: &ForwardCache<T>, dmask: &[f64], grads: &mut [T]) {
        let net = &self.network;
        let p = &self.values[..];
        let (frames, channels) = (cache.frames, cache.channels);
        let width = NUM_SOURCES * net.config.bins;
        assert_eq!(dmask.len(), width * frames, "mask gradient size");
        assert_eq!(grads.len(), p.len(), "gradient buffer size");

        let mut dlogits = Mat::zeros(frames, width);
        for t in 0..frames {
            let mrow = cache.masks.row(t);
            let drow = dlogits.row_mut(t);
            for j in 0..width {
                let m = mrow[j];
                drow[j] = T::of(dmask[j * frames + t]) * m * (T::one() - m);
            }
        }
        let mut dh = net.head.backward(p, &cache.head_in, &dlogits, grads);
        for (block, c) in net.post.iter().zip(&cache.post).rev() {
            dh = block.backward(p, c, &dh, grads);
        }
        let dstream = dh.scaled(T::of(1.0 / channels as f64));
        let mut dstreams = vec![dstream; channels];
        for b in (0..PRE_MERGE_BLOCKS).rev() {
            if let Some(tac) = net.tac.get(b) {
                dstreams = tac.backward(p, &cache.tac[b], &dstreams, grads);
            }
            for (ds, c) in dstreams.iter_mut().zip(&cache.pre[b]) {
                *ds = net.pre[b].backward(p, c, ds, grads);
            }
        }
        for (x, ds) in cache.inputs.iter().zip(&dstreams) {
            net.input.grad_params(x, ds, grads);
        }
    }
}
