//! Continuous separation over sliding windows, output stitching and
//! separation metrics.

use std::fmt;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamform::{apply_beamformer, gain_adjust, masked_reference, mvdr_weights, sparsify_masks, spatial_covariances, NoiseRule};
use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::model::{MaskSet, ModelParams, Real, NUM_SOURCES};
use crate::signal::{istft, stft, MultichannelWaveform, Spectrogram, StftConfig};

/// Number of separated output streams.
pub const NUM_OUTPUTS: usize = 2;
pub const SI_SNR_EPS: f64 = 1e-8;

/// Masks applied to the reference channel to get the gain-adjustment target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainReference {
    /// The sparsified masks that also drive the covariance estimates.
    #[default]
    Sparse,
    /// The estimator's masks before sparsification.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CssConfig {
    pub window_s: f64,
    pub shift_s: f64,
    pub stft: StftConfig,
    pub ref_channel: usize,
    pub gain_reference: GainReference,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self { window_s: 1.6, shift_s: 0.4, stft: StftConfig::desk(), ref_channel: 0, gain_reference: GainReference::Sparse }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if !(self.shift_s > 0.0) || !(self.shift_s < self.window_s) {
            return Err(Error::Config(format!("window shift {} must be in (0, {})", self.shift_s, self.window_s)));
        }
        Ok(())
    }

    /// `(window, stride)` in frames at `sample_rate`.
    pub fn frames(&self, sample_rate: u32) -> (usize, usize) {
        let per_frame = self.stft.hop_length as f64 / sample_rate as f64;
        let window = (self.window_s / per_frame).round().max(1.0) as usize;
        let stride = (self.shift_s / per_frame).round().clamp(1.0, window as f64) as usize;
        (window, stride)
    }
}

/// Window frame ranges at `stride`, the last one clipped to `total`.
pub fn window_slices(total: usize, window: usize, stride: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(total);
        out.push(start..end);
        if end >= total {
            return out;
        }
        start += stride;
    }
}

/// Mean over both outputs of the magnitude MSE between `prev[k]` and `cur[perm[k]]`.
pub fn alignment_cost(prev: &[Vec<f64>; NUM_OUTPUTS], cur: &[Vec<f64>; NUM_OUTPUTS], perm: [usize; 2]) -> f64 {
    (0..NUM_OUTPUTS)
        .map(|k| {
            let (a, b) = (&prev[k], &cur[perm[k]]);
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
        })
        .sum()
}

/// Output order of the current window that best continues the previous one,
/// judged on overlap-frame magnitudes. Ties keep the identity.
pub fn align_permutation(prev: &[Vec<f64>; NUM_OUTPUTS], cur: &[Vec<f64>; NUM_OUTPUTS]) -> [usize; 2] {
    if alignment_cost(prev, cur, [1, 0]) < alignment_cost(prev, cur, [0, 1]) {
        [1, 0]
    } else {
        [0, 1]
    }
}

/// Produces the masks of one window. `frames` locates the window in the
/// full recording.
pub trait MaskEstimator {
    fn estimate(&self, window: &Spectrogram, frames: Range<usize>) -> Result<MaskSet>;
}

impl<T: Real> MaskEstimator for ModelParams<T> {
    fn estimate(&self, window: &Spectrogram, _frames: Range<usize>) -> Result<MaskSet> {
        self.forward(&extract_features(window))
    }
}

/// Ratio masks `|S_s| / sum_j |S_j|` from known component spectrograms at the
/// reference channel. Frames where every component is zero get zero masks.
#[derive(Debug, Clone)]
pub struct OracleMasks {
    /// Per-source magnitudes indexed `(bin, frame)`.
    pub magnitudes: Vec<Vec<f64>>,
    pub bins: usize,
    pub frames: usize,
    /// Start frames of windows whose speaker masks are handed out swapped.
    pub swapped_windows: Vec<usize>,
}

impl OracleMasks {
    pub fn from_references(references: &[Vec<f64>; NUM_SOURCES], sample_rate: u32, cfg: &StftConfig) -> Result<Self> {
        let wave = MultichannelWaveform::new(references.to_vec(), sample_rate)?;
        let spec = stft(&wave, cfg)?;
        Ok(Self {
            magnitudes: (0..NUM_SOURCES).map(|s| spec.magnitude(s)).collect(),
            bins: spec.num_bins(),
            frames: spec.num_frames(),
            swapped_windows: Vec::new(),
        })
    }
}

impl MaskEstimator for OracleMasks {
    fn estimate(&self, window: &Spectrogram, frames: Range<usize>) -> Result<MaskSet> {
        if window.num_bins() != self.bins || frames.end > self.frames || frames.len() != window.num_frames() {
            return Err(Error::Shape("oracle masks do not cover the requested window".into()));
        }
        let n = frames.len();
        let mut masks = MaskSet::zeros(self.bins, n);
        for f in 0..self.bins {
            for (i, t) in frames.clone().enumerate() {
                let idx = f * self.frames + t;
                let total: f64 = self.magnitudes.iter().map(|m| m[idx]).sum();
                if total > 0.0 {
                    for s in 0..NUM_SOURCES {
                        masks.set(s, f, i, self.magnitudes[s][idx] / total);
                    }
                }
            }
        }
        if self.swapped_windows.contains(&frames.start) {
            masks.swap_speakers();
        }
        Ok(masks)
    }
}

/// Two beamformed, gain-adjusted speaker spectrograms for one window, plus
/// the number of bins whose beamformer fell back to pass-through.
/// Covariances always use the sparsified masks.
pub fn separate_window(
    window: &Spectrogram,
    masks: &MaskSet,
    ref_channel: usize,
    gain_reference: GainReference,
) -> Result<([Spectrogram; NUM_OUTPUTS], [usize; NUM_OUTPUTS])> {
    let sparse = sparsify_masks(masks);
    let covs = spatial_covariances(window, &sparse)?;
    let gain_masks = match gain_reference {
        GainReference::Sparse => &sparse,
        GainReference::Soft => masks,
    };
    let mut outs = Vec::with_capacity(NUM_OUTPUTS);
    let mut fallbacks = [0; NUM_OUTPUTS];
    for k in 0..NUM_OUTPUTS {
        let w = mvdr_weights(&covs, k, &NoiseRule::Complement, ref_channel)?;
        fallbacks[k] = w.num_fallbacks();
        let y = apply_beamformer(&w, window)?;
        outs.push(gain_adjust(&y, &masked_reference(window, gain_masks, k, ref_channel))?);
    }
    let [a, b]: [Spectrogram; NUM_OUTPUTS] = outs.try_into().expect("two outputs");
    Ok(([a, b], fallbacks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub frames: Range<usize>,
    /// Output `k` of the stitched stream came from local output `perm[k]`.
    pub perm: [usize; 2],
    pub fallback_bins: [usize; NUM_OUTPUTS],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProcessingReport {
    pub windows: Vec<WindowReport>,
}

impl ProcessingReport {
    pub fn total_fallbacks(&self) -> usize {
        self.windows.iter().map(|w| w.fallback_bins.iter().sum::<usize>()).sum()
    }
}

impl fmt::Display for ProcessingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "window\tstart_frame\tend_frame\tperm\tfallback_bins_0\tfallback_bins_1")?;
        for (i, w) in self.windows.iter().enumerate() {
            writeln!(
                f,
                "{i}\t{}\t{}\t{}{}\t{}\t{}",
                w.frames.start, w.frames.end, w.perm[0], w.perm[1], w.fallback_bins[0], w.fallback_bins[1]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub outputs: [Vec<f64>; NUM_OUTPUTS],
    pub sample_rate: u32,
    pub report: ProcessingReport,
}

/// Sliding-window separation of a whole recording into two streams of the
/// input length.
pub fn separate_continuous(wave: &MultichannelWaveform, estimator: &dyn MaskEstimator, cfg: &CssConfig) -> Result<Separation> {
    cfg.validate()?;
    if cfg.ref_channel >= wave.num_channels() {
        return Err(Error::Invalid(format!("reference channel {} out of range", cfg.ref_channel)));
    }
    let spec = stft(wave, &cfg.stft)?;
    let (bins, total) = (spec.num_bins(), spec.num_frames());
    let (window, stride) = cfg.frames(wave.sample_rate());
    let mut assembled: [Vec<Complex64>; NUM_OUTPUTS] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); bins * total]);
    let mut report = ProcessingReport::default();
    // Previous window's outputs, already in global order, and its frame range.
    let mut previous: Option<([Spectrogram; NUM_OUTPUTS], Range<usize>)> = None;

    for range in window_slices(total, window, stride) {
        let seg = spec.slice_frames(range.start, range.end)?;
        let masks = estimator.estimate(&seg, range.clone())?;
        if masks.num_bins() != bins || masks.num_frames() != range.len() {
            return Err(Error::Shape("estimated masks do not match the window".into()));
        }
        let (local, fallback_bins) = separate_window(&seg, &masks, cfg.ref_channel, cfg.gain_reference)?;
        let overlap = previous.as_ref().map(|(_, r)| range.start..r.end.min(range.end)).filter(|o| !o.is_empty());
        let perm = match (&previous, &overlap) {
            (Some((prev, prev_range)), Some(o)) => {
                let mags = |s: &Spectrogram, offset: usize| overlap_magnitudes(s, o.start - offset..o.end - offset);
                let p = [mags(&prev[0], prev_range.start), mags(&prev[1], prev_range.start)];
                let c = [mags(&local[0], range.start), mags(&local[1], range.start)];
                align_permutation(&p, &c)
            }
            _ => [0, 1],
        };
        let [l0, l1] = local;
        let ordered = if perm == [0, 1] { [l0, l1] } else { [l1, l0] };
        let overlap_end = overlap.as_ref().map(|o| o.end).unwrap_or(range.start);
        let fade_len = overlap_end - range.start;
        for k in 0..NUM_OUTPUTS {
            for f in 0..bins {
                let cur = ordered[k].bin(0, f);
                let out = &mut assembled[k][f * total..(f + 1) * total];
                for (i, t) in range.clone().enumerate() {
                    if t < overlap_end {
                        // Linear cross-fade; the two weights sum to one.
                        let lambda = (i + 1) as f64 / (fade_len + 1) as f64;
                        out[t] = out[t] * (1.0 - lambda) + cur[i] * lambda;
                    } else {
                        out[t] = cur[i];
                    }
                }
            }
        }
        report.windows.push(WindowReport { frames: range.clone(), perm, fallback_bins });
        previous = Some((ordered, range));
    }

    let mut outputs = Vec::with_capacity(NUM_OUTPUTS);
    for data in assembled {
        let s = Spectrogram::from_data(data, 1, total, cfg.stft, wave.sample_rate(), wave.len())?;
        outputs.push(istft(&s, &cfg.stft)?.into_channels().swap_remove(0));
    }
    let [a, b]: [Vec<f64>; NUM_OUTPUTS] = outputs.try_into().expect("two outputs");
    Ok(Separation { outputs: [a, b], sample_rate: wave.sample_rate(), report })
}

fn overlap_magnitudes(s: &Spectrogram, frames: Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.num_bins() * frames.len());
    for f in 0..s.num_bins() {
        out.extend(s.bin(0, f)[frames.clone()].iter().map(|c| c.norm()));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR of `est` against `reference`, in dB. An all-zero
/// estimate scores `10 log10(SI_SNR_EPS)` rather than minus infinity.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", est.len(), reference.len())));
    }
    let energy = dot(reference, reference);
    if energy == 0.0 {
        return Err(Error::Invalid("reference signal is all zero".into()));
    }
    let alpha = dot(est, reference) / energy;
    let target_energy = alpha * alpha * energy;
    let residual: f64 = est.iter().zip(reference).map(|(e, r)| (e - alpha * r) * (e - alpha * r)).sum();
    Ok(10.0 * (target_energy / (residual + SI_SNR_EPS) + SI_SNR_EPS).log10())
}

/// Best mean SI-SNR over both output assignments; output `perm[k]` is
/// compared with reference `k`. Ties keep the identity.
pub fn best_perm_si_snr(ests: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<(f64, [usize; 2])> {
    let score = |p: [usize; 2]| -> Result<f64> { Ok((si_snr(ests[p[0]], refs[0])? + si_snr(ests[p[1]], refs[1])?) / 2.0) };
    let identity = score([0, 1])?;
    let swapped = score([1, 0])?;
    Ok(if swapped > identity { (swapped, [1, 0]) } else { (identity, [0, 1]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_window_in_frames() {
        let cfg = CssConfig { stft: StftConfig::default(), ..CssConfig::default() };
        assert_eq!(cfg.frames(16000), (100, 25));
        assert_eq!(CssConfig::default().frames(16000), (200, 50));
    }

    #[test]
    fn slice_enumeration() {
        let w = window_slices(100, 40, 10);
        assert_eq!(w.len(), 7);
        assert_eq!(w.iter().map(|r| r.start).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40, 50, 60]);
        assert_eq!(w.last().unwrap().end, 100);
        assert_eq!(window_slices(30, 40, 10), vec![0..30]);
        assert_eq!(window_slices(105, 40, 10).last().unwrap(), &(70..105));
    }

    #[test]
    fn invalid_config() {
        assert!(CssConfig { shift_s: 2.0, ..CssConfig::default() }.validate().is_err());
        assert!(CssConfig { shift_s: 0.0, ..CssConfig::default() }.validate().is_err());
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let prev = [a.clone(), b.clone()];
        assert_eq!(align_permutation(&prev, &prev), [0, 1]);
        assert_eq!(align_permutation(&prev, &[b, a]), [1, 0]);
        let same = [vec![1.0; 4], vec![1.0; 4]];
        assert_eq!(align_permutation(&same, &same), [0, 1]);
    }

    #[test]
    fn si_snr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy: Vec<f64> = r.iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let doubled: Vec<f64> = noisy.iter().map(|v| 2.0 * v).collect();
        assert!((si_snr(&noisy, &r).unwrap() - si_snr(&doubled, &r).unwrap()).abs() < 1e-6);
        // Orthogonal unit-norm pair.
        let e = [1.0, 0.0];
        let o = [0.0, 1.0];
        assert!(si_snr(&o, &e).unwrap() < -40.0);
        // Noise orthogonal to the reference with a tenth of its norm.
        let x = [1.0, 0.0, 0.0];
        let y = [1.0, 0.1, 0.0];
        assert!((si_snr(&y, &x).unwrap() - 20.0).abs() < 1e-5);
        assert!(si_snr(&x, &[0.0; 3]).is_err());
        assert!(si_snr(&x, &[0.0; 2]).is_err());
    }

    #[test]
    fn best_perm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (v, p) = best_perm_si_snr([&a, &b], [&a, &b]).unwrap();
        assert_eq!(p, [0, 1]);
        assert_eq!(v, (si_snr(&a, &a).unwrap() + si_snr(&b, &b).unwrap()) / 2.0);
        let (v2, p2) = best_perm_si_snr([&b, &a], [&a, &b]).unwrap();
        assert_eq!(p2, [1, 0]);
        assert_eq!(v, v2);
    }

    #[test]
    fn zero_input_gives_zero_outputs() {
        let wave = MultichannelWaveform::zeros(3, 5000, 16000).unwrap();
        let refs: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; 5000]);
        let oracle = OracleMasks::from_references(&refs, 16000, &StftConfig::desk()).unwrap();
        let sep = separate_continuous(&wave, &oracle, &CssConfig::default()).unwrap();
        for out in &sep.outputs {
            assert_eq!(out.len(), 5000);
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_channel_input_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..40000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wave = MultichannelWaveform::mono(x.clone(), 16000).unwrap();
        let zeros = vec![0.0; x.len()];
        let refs = [x, zeros.clone(), zeros.clone(), zeros];
        let oracle = OracleMasks::from_references(&refs, 16000, &StftConfig::desk()).unwrap();
        let sep = separate_continuous(&wave, &oracle, &CssConfig::default()).unwrap();
        assert_eq!(sep.outputs[0].len(), 40000);
        assert!(sep.outputs[1].iter().all(|&v| v == 0.0));
        assert!(sep.report.windows.len() > 1);
    }

    #[test]
    fn gain_reference_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..3).map(|_| (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let spec = stft(&MultichannelWaveform::new(x, 16000).unwrap(), &StftConfig::desk()).unwrap();
        let n = spec.num_bins() * spec.num_frames();
        // Source 1 never wins a bin but keeps a soft mask of 0.3.
        let data: Vec<f64> = [0.9, 0.3, 0.05, 0.05].iter().flat_map(|&v| vec![v; n]).collect();
        let masks = MaskSet::new(data, spec.num_bins(), spec.num_frames()).unwrap();
        let energy = |s: &Spectrogram| s.bin(0, 10).iter().map(|c| c.norm_sqr()).sum::<f64>();
        let (sparse, _) = separate_window(&spec, &masks, 0, GainReference::Sparse).unwrap();
        let (soft, _) = separate_window(&spec, &masks, 0, GainReference::Soft).unwrap();
        assert_eq!(energy(&sparse[1]), 0.0);
        assert!(energy(&soft[1]) > 0.0);
        assert!(energy(&sparse[0]) > 0.0);
    }
}
