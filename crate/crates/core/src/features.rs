//! Geometry-agnostic per-channel input features.
//!
//! Every channel gets the same magnitude part, the power of the channel-average
//! spectrum, plus its own phase difference with respect to that average. Both
//! parts are normalized over the frames of the analyzed window.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::signal::Spectrogram;

/// Guard for the log compression and for near-zero average spectra.
pub const FEATURE_EPS: f64 = 1e-8;

/// Channel mean of the STFT, indexed `(bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageSpectrum {
    pub data: Vec<Complex64>,
    pub bins: usize,
    pub frames: usize,
}

impl AverageSpectrum {
    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.data[f * self.frames + t]
    }
}

/// Per-channel feature frames. Each frame is `[magnitude (F), ipd (F)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    channels: usize,
    frames: usize,
    bins: usize,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, channels: usize, frames: usize, bins: usize) -> Self {
        assert_eq!(data.len(), channels * frames * 2 * bins, "feature buffer size");
        Self { data, channels, frames, bins }
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }
    pub fn num_frames(&self) -> usize {
        self.frames
    }
    pub fn num_bins(&self) -> usize {
        self.bins
    }
    /// Width of one frame vector, `2F`.
    pub fn dim(&self) -> usize {
        2 * self.bins
    }

    /// `frames x 2F` row-major block of one channel.
    pub fn channel(&self, m: usize) -> &[f64] {
        let n = self.frames * self.dim();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn frame(&self, m: usize, t: usize) -> &[f64] {
        let d = self.dim();
        &self.channel(m)[t * d..(t + 1) * d]
    }

    pub fn magnitude(&self, m: usize, t: usize) -> &[f64] {
        &self.frame(m, t)[..self.bins]
    }

    pub fn ipd(&self, m: usize, t: usize) -> &[f64] {
        &self.frame(m, t)[self.bins..]
    }

    fn frame_mut(&mut self, m: usize, t: usize) -> &mut [f64] {
        let d = self.dim();
        let n = self.frames * d;
        &mut self.data[m * n + t * d..m * n + (t + 1) * d]
    }

    /// Reorders the channel streams.
    pub fn permute_channels(&self, order: &[usize]) -> Self {
        let n = self.frames * self.dim();
        let mut data = Vec::with_capacity(self.data.len());
        for &m in order {
            data.extend_from_slice(&self.data[m * n..(m + 1) * n]);
        }
        Self { data, channels: order.len(), frames: self.frames, bins: self.bins }
    }
}

pub fn average_spectrum(spec: &Spectrogram) -> AverageSpectrum {
    let (m_count, bins, frames) = (spec.num_channels(), spec.num_bins(), spec.num_frames());
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    for m in 0..m_count {
        for f in 0..bins {
            for (acc, x) in data[f * frames..(f + 1) * frames].iter_mut().zip(spec.bin(m, f)) {
                *acc += x;
            }
        }
    }
    let inv = 1.0 / m_count as f64;
    for v in &mut data {
        *v *= inv;
    }
    AverageSpectrum { data, bins, frames }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        PI
    } else {
        y
    }
}

/// Features before window normalization: `|avg|^2` and `angle(X_m / avg)`.
pub fn raw_features(spec: &Spectrogram) -> FeatureSequence {
    let avg = average_spectrum(spec);
    let (m_count, bins, frames) = (spec.num_channels(), spec.num_bins(), spec.num_frames());
    let mut feats = FeatureSequence::new(vec![0.0; m_count * frames * 2 * bins], m_count, frames, bins);
    for m in 0..m_count {
        for f in 0..bins {
            let xs = spec.bin(m, f);
            for t in 0..frames {
                let a = avg.get(f, t);
                let ipd = if a.norm() < FEATURE_EPS { 0.0 } else { (xs[t] * a.conj()).arg() };
                let frame = feats.frame_mut(m, t);
                frame[f] = a.norm_sqr();
                frame[bins + f] = ipd;
            }
        }
    }
    feats
}

/// Window-level normalization.
///
/// Magnitude: `log(x + eps)`, then zero mean and unit variance per bin over
/// frames. IPD: per channel and bin, the circular mean over frames is removed
/// and the result re-wrapped.
pub fn normalize_window(feats: &mut FeatureSequence) {
    let (m_count, frames, bins) = (feats.channels, feats.frames, feats.bins);
    let mut column = vec![0.0; frames];
    for f in 0..bins {
        for (t, c) in column.iter_mut().enumerate() {
            *c = (feats.magnitude(0, t)[f] + FEATURE_EPS).ln();
        }
        let mean = column.iter().sum::<f64>() / frames as f64;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames as f64;
        let inv_std = 1.0 / (var + FEATURE_EPS).sqrt();
        for m in 0..m_count {
            for (t, c) in column.iter().enumerate() {
                feats.frame_mut(m, t)[f] = (c - mean) * inv_std;
            }
        }
    }
    for m in 0..m_count {
        for f in 0..bins {
            let mut phasor = Complex64::new(0.0, 0.0);
            for t in 0..frames {
                phasor += Complex64::from_polar(1.0, feats.ipd(m, t)[f]);
            }
            if phasor.norm() < FEATURE_EPS {
                continue;
            }
            let center = phasor.arg();
            for t in 0..frames {
                let v = &mut feats.frame_mut(m, t)[bins + f];
                *v = wrap_phase(*v - center);
            }
        }
    }
}

pub fn extract_features(spec: &Spectrogram) -> FeatureSequence {
    let mut feats = raw_features(spec);
    normalize_window(&mut feats);
    feats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(channels: usize, frames: usize, seed: u64) -> Spectrogram {
        let cfg = StftConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * cfg.num_bins() * frames)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Spectrogram::from_data(data, channels, frames, cfg, 16000, frames * cfg.hop_length).unwrap()
    }

    fn two_channel_unit_pair() -> Spectrogram {
        let cfg = StftConfig::desk();
        let mut s = Spectrogram::zeros(2, 1, cfg, 16000, 128);
        s.set(0, 3, 0, Complex64::new(1.0, 0.0));
        s.set(1, 3, 0, Complex64::new(0.0, 1.0));
        s
    }

    #[test]
    fn average_of_one_and_i() {
        let avg = average_spectrum(&two_channel_unit_pair());
        assert_eq!(avg.get(3, 0), Complex64::new(0.5, 0.5));
    }

    #[test]
    fn average_of_identical_channels() {
        let one = random_spec(1, 5, 1);
        let three = one.select_channels(&[0, 0, 0]).unwrap();
        let a1 = average_spectrum(&one);
        let a3 = average_spectrum(&three);
        for (x, y) in a1.data.iter().zip(&a3.data) {
            assert!((x - y).norm() < 1e-15);
        }
        assert_eq!(a1.data, one.data().to_vec());
    }

    #[test]
    fn ipd_of_one_and_i() {
        let raw = raw_features(&two_channel_unit_pair());
        assert!((raw.ipd(0, 0)[3] + PI / 4.0).abs() < 1e-15);
        assert!((raw.ipd(1, 0)[3] - PI / 4.0).abs() < 1e-15);
        assert!((raw.magnitude(0, 0)[3] - 0.5).abs() < 1e-15);
        // Zero bins are guarded.
        assert_eq!(raw.ipd(0, 0)[0], 0.0);
    }

    #[test]
    fn single_channel_has_zero_ipd() {
        let feats = extract_features(&random_spec(1, 20, 2));
        for t in 0..20 {
            assert!(feats.ipd(0, t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_channels_have_zero_ipd() {
        let s = random_spec(1, 20, 3).select_channels(&[0, 0, 0, 0]).unwrap();
        let feats = extract_features(&s);
        for m in 0..4 {
            for t in 0..20 {
                assert!(feats.ipd(m, t).iter().all(|v| v.abs() < 1e-12));
                assert_eq!(feats.magnitude(m, t), feats.magnitude(0, t));
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let s = random_spec(4, 30, 4);
        let order = [2, 0, 3, 1];
        let a = extract_features(&s).permute_channels(&order);
        let b = extract_features(&s.select_channels(&order).unwrap());
        for m in 0..4 {
            for t in 0..30 {
                for (x, y) in a.frame(m, t).iter().zip(b.frame(m, t)) {
                    assert!((x - y).abs() < 1e-9, "{x} {y}");
                }
            }
        }
    }

    #[test]
    fn average_phase_is_the_circular_reference() {
        // Equal magnitudes across channels: the phasors of the IPDs sum to a real
        // positive number.
        let mut s = random_spec(3, 10, 5);
        for v in s.data_mut() {
            *v /= v.norm();
        }
        let raw = raw_features(&s);
        for f in 1..s.num_bins() {
            for t in 0..10 {
                let sum: Complex64 = (0..3).map(|m| Complex64::from_polar(1.0, raw.ipd(m, t)[f])).sum();
                if sum.norm() > 1e-6 {
                    assert!(sum.arg().abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn scale_behavior() {
        // Offset keeps |avg|^2 well above the log guard.
        let mut s = random_spec(3, 25, 6);
        for v in s.data_mut() {
            *v += Complex64::new(2.0, 0.0);
        }
        let mut scaled = s.clone();
        scaled.scale(3.0);
        let (ra, rb) = (raw_features(&s), raw_features(&scaled));
        for m in 0..3 {
            for t in 0..25 {
                for (x, y) in ra.ipd(m, t).iter().zip(rb.ipd(m, t)) {
                    assert!((x - y).abs() < 1e-12);
                }
                for (x, y) in ra.magnitude(m, t).iter().zip(rb.magnitude(m, t)) {
                    assert!((9.0 * x - y).abs() < 1e-12 * y.max(1.0));
                }
            }
        }
        let (na, nb) = (extract_features(&s), extract_features(&scaled));
        for t in 0..25 {
            for (x, y) in na.magnitude(0, t).iter().zip(nb.magnitude(0, t)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalized_ipd_stays_wrapped() {
        let feats = extract_features(&random_spec(5, 40, 7));
        for m in 0..5 {
            for t in 0..40 {
                assert!(feats.ipd(m, t).iter().all(|v| v.is_finite() && *v > -PI && *v <= PI));
            }
        }
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(PI), PI);
        assert_eq!(wrap_phase(-PI), PI);
        assert!((wrap_phase(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_phase(0.25)).abs() - 0.25 < 1e-15);
    }
}
