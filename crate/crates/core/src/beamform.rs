//! Mask-driven MVDR beamforming and post-filter gain adjustment.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{MaskSet, NUM_SOURCES};
use crate::signal::Spectrogram;

/// Guard for empty mask sums and for level ratios.
pub const BEAM_EPS: f64 = 1e-8;
/// Diagonal loading relative to `trace(noise) / M`.
pub const DIAGONAL_LOADING: f64 = 1e-6;
const TRACE_EPS: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Keeps only the dominant source per time-frequency bin, retaining its value.
/// Ties go to the lowest source index.
pub fn sparsify_masks(masks: &MaskSet) -> MaskSet {
    let (bins, frames) = (masks.num_bins(), masks.num_frames());
    let mut out = MaskSet::zeros(bins, frames);
    for f in 0..bins {
        for t in 0..frames {
            let mut best = 0;
            for s in 1..NUM_SOURCES {
                if masks.get(s, f, t) > masks.get(best, f, t) {
                    best = s;
                }
            }
            out.set(best, f, t, masks.get(best, f, t));
        }
    }
    out
}

/// `Phi_s(f)` for every source, each `M x M` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSet {
    data: Vec<Complex64>,
    sources: usize,
    bins: usize,
    channels: usize,
}

impl CovarianceSet {
    pub fn num_sources(&self) -> usize {
        self.sources
    }
    pub fn num_bins(&self) -> usize {
        self.bins
    }
    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn matrix(&self, s: usize, f: usize) -> &[Complex64] {
        let n = self.channels * self.channels;
        let start = (s * self.bins + f) * n;
        &self.data[start..start + n]
    }

    /// Sum of the covariances of `sources` at bin `f`.
    pub fn sum(&self, sources: &[usize], f: usize) -> Vec<Complex64> {
        let mut acc = vec![ZERO; self.channels * self.channels];
        for &s in sources {
            for (a, b) in acc.iter_mut().zip(self.matrix(s, f)) {
                *a += b;
            }
        }
        acc
    }
}

pub fn spatial_covariances(spec: &Spectrogram, masks: &MaskSet) -> Result<CovarianceSet> {
    let (m_count, bins, frames) = (spec.num_channels(), spec.num_bins(), spec.num_frames());
    if masks.num_bins() != bins || masks.num_frames() != frames {
        return Err(Error::Shape(format!(
            "masks {}x{} do not match spectrogram {bins}x{frames}",
            masks.num_bins(),
            masks.num_frames()
        )));
    }
    let n = m_count * m_count;
    let mut data = vec![ZERO; NUM_SOURCES * bins * n];
    let mut x = vec![ZERO; m_count];
    for f in 0..bins {
        for t in 0..frames {
            for (m, v) in x.iter_mut().enumerate() {
                *v = spec.get(m, f, t);
            }
            for s in 0..NUM_SOURCES {
                let w = masks.get(s, f, t);
                if w == 0.0 {
                    continue;
                }
                let phi = &mut data[(s * bins + f) * n..(s * bins + f + 1) * n];
                for i in 0..m_count {
                    let xi = x[i] * w;
                    for j in 0..m_count {
                        phi[i * m_count + j] += xi * x[j].conj();
                    }
                }
            }
        }
        for s in 0..NUM_SOURCES {
            let total: f64 = (0..frames).map(|t| masks.get(s, f, t)).sum();
            let inv = 1.0 / total.max(BEAM_EPS);
            for v in &mut data[(s * bins + f) * n..(s * bins + f + 1) * n] {
                *v *= inv;
            }
        }
    }
    Ok(CovarianceSet { data, sources: NUM_SOURCES, bins, channels: m_count })
}

/// Which sources make up the interference for a target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum NoiseRule {
    /// Every source except the target.
    #[default]
    Complement,
    Sources(Vec<usize>),
}

impl NoiseRule {
    pub fn sources(&self, target: usize) -> Vec<usize> {
        match self {
            NoiseRule::Complement => (0..NUM_SOURCES).filter(|&s| s != target).collect(),
            NoiseRule::Sources(v) => v.clone(),
        }
    }
}

/// Per-bin filters `w(f)`; `fallback[f]` marks bins that fell back to
/// passing the reference channel through.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    data: Vec<Complex64>,
    bins: usize,
    channels: usize,
    pub fallback: Vec<bool>,
}

impl BeamformerWeights {
    pub fn new(data: Vec<Complex64>, bins: usize, channels: usize) -> Result<Self> {
        if data.len() != bins * channels {
            return Err(Error::Shape(format!("weights of length {} do not match {bins}x{channels}", data.len())));
        }
        Ok(Self { data, bins, channels, fallback: vec![false; bins] })
    }

    /// Selects channel `k` at every bin.
    pub fn unit(k: usize, bins: usize, channels: usize) -> Self {
        let mut data = vec![ZERO; bins * channels];
        for f in 0..bins {
            data[f * channels + k] = Complex64::new(1.0, 0.0);
        }
        Self { data, bins, channels, fallback: vec![false; bins] }
    }

    pub fn num_bins(&self) -> usize {
        self.bins
    }
    pub fn num_channels(&self) -> usize {
        self.channels
    }
    pub fn bin(&self, f: usize) -> &[Complex64] {
        &self.data[f * self.channels..(f + 1) * self.channels]
    }
    pub fn num_fallbacks(&self) -> usize {
        self.fallback.iter().filter(|&&b| b).count()
    }
}

/// Solves `A X = B` for square `A` (`n x n`) and `B` (`n x k`), both row-major,
/// by Gaussian elimination with partial pivoting. `None` if `A` is singular.
pub fn complex_solve(a: &[Complex64], b: &[Complex64], n: usize, k: usize) -> Option<Vec<Complex64>> {
    let mut a = a.to_vec();
    let mut x = b.to_vec();
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].norm().total_cmp(&a[j * n + col].norm()))?;
        if a[pivot * n + col].norm() <= scale * 1e-14 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(pivot * n + c, col * n + c);
            }
            for c in 0..k {
                x.swap(pivot * k + c, col * k + c);
            }
        }
        let inv = 1.0 / a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] * inv;
            if factor == ZERO {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[r * n + c] -= factor * v;
            }
            for c in 0..k {
                let v = x[col * k + c];
                x[r * k + c] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = 1.0 / a[col * n + col];
        for c in 0..k {
            let mut v = x[col * k + c];
            for j in col + 1..n {
                v -= a[col * n + j] * x[j * k + c];
            }
            x[col * k + c] = v * inv;
        }
    }
    Some(x)
}

/// Reference-channel MVDR filter for one bin:
/// `w = (Phi_n^-1 Phi_s / trace(Phi_n^-1 Phi_s)) u_ref`, with `Phi_n` diagonally
/// loaded. `None` when the solve is singular or the trace vanishes.
pub fn mvdr_bin(phi_s: &[Complex64], phi_n: &[Complex64], channels: usize, ref_channel: usize) -> Option<Vec<Complex64>> {
    let m = channels;
    let trace_n: f64 = (0..m).map(|i| phi_n[i * m + i].re).sum();
    let mut loaded = phi_n.to_vec();
    let load = DIAGONAL_LOADING * trace_n / m as f64;
    for i in 0..m {
        loaded[i * m + i] += load;
    }
    let x = complex_solve(&loaded, phi_s, m, m)?;
    let trace: Complex64 = (0..m).map(|i| x[i * m + i]).sum();
    if !(trace.re > TRACE_EPS) || !trace.is_finite() {
        return None;
    }
    let w: Vec<Complex64> = (0..m).map(|i| x[i * m + ref_channel] / trace).collect();
    w.iter().all(|v| v.is_finite()).then_some(w)
}

pub fn mvdr_weights(covs: &CovarianceSet, target: usize, noise: &NoiseRule, ref_channel: usize) -> Result<BeamformerWeights> {
    let m = covs.channels;
    if target >= covs.sources || ref_channel >= m {
        return Err(Error::Invalid(format!("target {target} or reference channel {ref_channel} out of range")));
    }
    let noise_sources = noise.sources(target);
    if noise_sources.iter().any(|&s| s >= covs.sources || s == target) {
        return Err(Error::Invalid(format!("bad noise sources {noise_sources:?} for target {target}")));
    }
    let mut weights = BeamformerWeights::unit(ref_channel, covs.bins, m);
    for f in 0..covs.bins {
        let phi_n = covs.sum(&noise_sources, f);
        match mvdr_bin(covs.matrix(target, f), &phi_n, m, ref_channel) {
            Some(w) => weights.data[f * m..(f + 1) * m].copy_from_slice(&w),
            None => weights.fallback[f] = true,
        }
    }
    Ok(weights)
}

/// `y_ft = w(f)^H x_ft`, as a one-channel spectrogram.
pub fn apply_beamformer(w: &BeamformerWeights, spec: &Spectrogram) -> Result<Spectrogram> {
    let (m_count, bins, frames) = (spec.num_channels(), spec.num_bins(), spec.num_frames());
    if w.channels != m_count || w.bins != bins {
        return Err(Error::Shape(format!(
            "weights {}x{} do not match spectrogram with {m_count} channels and {bins} bins",
            w.channels, w.bins
        )));
    }
    let mut out = Spectrogram::zeros(1, frames, *spec.config(), spec.sample_rate(), spec.signal_len());
    for f in 0..bins {
        let wf = w.bin(f);
        let y = out.bin_mut(0, f);
        for (m, wm) in wf.iter().enumerate() {
            let wc = wm.conj();
            if wc == ZERO {
                continue;
            }
            for (acc, x) in y.iter_mut().zip(spec.bin(m, f)) {
                *acc += wc * x;
            }
        }
    }
    Ok(out)
}

/// `M_s . |X_ref|`, indexed `(bin, frame)`.
pub fn masked_reference(spec: &Spectrogram, masks: &MaskSet, source: usize, ref_channel: usize) -> Vec<f64> {
    spec.magnitude(ref_channel).iter().zip(masks.source(source)).map(|(x, m)| x * m).collect()
}

/// Per-bin gains `min(1, rms(masked_ref) / max(rms(|beamformed|), eps))`.
pub fn gain_factors(beamformed: &Spectrogram, masked_ref: &[f64]) -> Result<Vec<f64>> {
    let (bins, frames) = (beamformed.num_bins(), beamformed.num_frames());
    if beamformed.num_channels() != 1 || masked_ref.len() != bins * frames {
        return Err(Error::Shape("gain adjustment needs a one-channel spectrogram and a matching reference".into()));
    }
    let rms = |it: &mut dyn Iterator<Item = f64>| (it.map(|v| v * v).sum::<f64>() / frames as f64).sqrt();
    Ok((0..bins)
        .map(|f| {
            let target = rms(&mut masked_ref[f * frames..(f + 1) * frames].iter().copied());
            let current = rms(&mut beamformed.bin(0, f).iter().map(|c| c.norm()));
            (target / current.max(BEAM_EPS)).min(1.0)
        })
        .collect())
}

pub fn gain_adjust(beamformed: &Spectrogram, masked_ref: &[f64]) -> Result<Spectrogram> {
    let gains = gain_factors(beamformed, masked_ref)?;
    let mut out = beamformed.clone();
    for (f, g) in gains.into_iter().enumerate() {
        for v in out.bin_mut(0, f) {
            *v *= g;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_spec(channels: usize, frames: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
        let cfg = StftConfig::desk();
        let data = (0..channels * cfg.num_bins() * frames)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Spectrogram::from_data(data, channels, frames, cfg, 16000, frames * cfg.hop_length).unwrap()
    }

    fn random_masks(bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> MaskSet {
        MaskSet::new((0..NUM_SOURCES * bins * frames).map(|_| rng.random()).collect(), bins, frames).unwrap()
    }

    fn one_bin_masks(values: [f64; 4]) -> MaskSet {
        MaskSet::new(values.to_vec(), 1, 1).unwrap()
    }

    #[test]
    fn sparsify_examples() {
        let out = sparsify_masks(&one_bin_masks([0.6, 0.3, 0.05, 0.05]));
        assert_eq!(out.data(), &[0.6, 0.0, 0.0, 0.0]);
        let tie = sparsify_masks(&one_bin_masks([0.4, 0.4, 0.1, 0.1]));
        assert_eq!(tie.data(), &[0.4, 0.0, 0.0, 0.0]);
        let hot = one_bin_masks([0.0, 0.0, 1.0, 0.0]);
        assert_eq!(sparsify_masks(&hot), hot);
    }

    #[test]
    fn covariance_of_single_frame_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = random_spec(3, 1, &mut rng);
        let bins = spec.num_bins();
        let mut data = vec![0.0; NUM_SOURCES * bins];
        data[..bins].iter_mut().for_each(|v| *v = 1.0);
        let covs = spatial_covariances(&spec, &MaskSet::new(data, bins, 1).unwrap()).unwrap();
        for f in 0..bins {
            let phi = covs.matrix(0, f);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((phi[i * 3 + j] - spec.get(i, f, 0) * spec.get(j, f, 0).conj()).norm() < 1e-15);
                }
            }
            assert!(covs.matrix(1, f).iter().all(|v| *v == ZERO));
        }
    }

    #[test]
    fn covariance_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = random_spec(4, 9, &mut rng);
        let masks = random_masks(spec.num_bins(), 9, &mut rng);
        let covs = spatial_covariances(&spec, &masks).unwrap();
        for s in 0..NUM_SOURCES {
            for f in [0, 17, 128] {
                let total: f64 = (0..9).map(|t| masks.get(s, f, t)).sum();
                for i in 0..4 {
                    for j in 0..4 {
                        let mut acc = ZERO;
                        for t in 0..9 {
                            acc += spec.get(i, f, t) * spec.get(j, f, t).conj() * masks.get(s, f, t);
                        }
                        let expect = acc / total;
                        assert!((covs.matrix(s, f)[i * 4 + j] - expect).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_noise_and_unit_target_give_unit_filter() {
        let m = 3;
        let mut phi_s = vec![ZERO; 9];
        phi_s[0] = c(1.0, 0.0);
        let mut phi_n = vec![ZERO; 9];
        for i in 0..m {
            phi_n[i * m + i] = c(1.0, 0.0);
        }
        let w = mvdr_bin(&phi_s, &phi_n, m, 0).unwrap();
        assert!((w[0] - c(1.0, 0.0)).norm() < 1e-12);
        assert!(w[1].norm() < 1e-12 && w[2].norm() < 1e-12);
    }

    #[test]
    fn singular_noise_falls_back_to_pass_through() {
        let m = 2;
        let phi_s = vec![c(1.0, 0.0), ZERO, ZERO, c(1.0, 0.0)];
        let zero = vec![ZERO; 4];
        assert!(mvdr_bin(&phi_s, &zero, m, 0).is_none());
        assert!(mvdr_bin(&zero, &phi_s, m, 0).is_none());
    }

    #[test]
    fn weights_flag_fallback_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = random_spec(2, 6, &mut rng);
        let bins = spec.num_bins();
        let mut data = vec![0.0; NUM_SOURCES * bins * 6];
        data[..bins * 6].iter_mut().for_each(|v| *v = 1.0);
        let masks = MaskSet::new(data, bins, 6).unwrap();
        let covs = spatial_covariances(&spec, &masks).unwrap();
        // No interference statistics at all: every bin falls back.
        let w = mvdr_weights(&covs, 0, &NoiseRule::Complement, 1).unwrap();
        assert_eq!(w.num_fallbacks(), bins);
        assert_eq!(w, {
            let mut u = BeamformerWeights::unit(1, bins, 2);
            u.fallback = vec![true; bins];
            u
        });
        assert!(mvdr_weights(&covs, 0, &NoiseRule::Sources(vec![0]), 0).is_err());
    }

    #[test]
    fn solve_recovers_known_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let a: Vec<Complex64> = (0..n * n).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let x: Vec<Complex64> = (0..n * 2).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let mut b = vec![ZERO; n * 2];
        for i in 0..n {
            for k in 0..2 {
                b[i * 2 + k] = (0..n).map(|j| a[i * n + j] * x[j * 2 + k]).sum();
            }
        }
        let got = complex_solve(&a, &b, n, 2).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).norm() < 1e-10);
        }
    }

    #[test]
    fn apply_unit_weights_selects_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = random_spec(3, 4, &mut rng);
        let y = apply_beamformer(&BeamformerWeights::unit(2, spec.num_bins(), 3), &spec).unwrap();
        assert_eq!(y.data(), spec.select_channels(&[2]).unwrap().data());
    }

    #[test]
    fn apply_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = random_spec(3, 4, &mut rng);
        let bins = spec.num_bins();
        let w = BeamformerWeights::new(
            (0..bins * 3).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
            bins,
            3,
        )
        .unwrap();
        let y = apply_beamformer(&w, &spec).unwrap();
        for f in 0..bins {
            for t in 0..4 {
                let expect: Complex64 = (0..3).map(|m| w.bin(f)[m].conj() * spec.get(m, f, t)).sum();
                assert!((y.get(0, f, t) - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn gain_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_spec(1, 8, &mut rng);
        let mag = y.magnitude(0);
        assert_eq!(gain_adjust(&y, &mag).unwrap(), y);
        let zero = vec![0.0; mag.len()];
        assert!(gain_adjust(&y, &zero).unwrap().data().iter().all(|v| *v == ZERO));
        let half: Vec<f64> = mag.iter().map(|v| v * 0.5).collect();
        for g in gain_factors(&y, &half).unwrap() {
            assert!((g - 0.5).abs() < 1e-12);
        }
        let double: Vec<f64> = mag.iter().map(|v| v * 2.0).collect();
        assert!(gain_factors(&y, &double).unwrap().iter().all(|&g| g == 1.0));
    }
}
