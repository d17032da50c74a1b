use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vararray::beamform::{mvdr_bin, sparsify_masks};
use vararray::features::{extract_features, wrap_phase};
use vararray::model::{MaskSet, ModelConfig, ModelParams, NUM_SOURCES};
use vararray::pipeline::{si_snr, window_slices};
use vararray::signal::{istft, stft, MultichannelWaveform, Spectrogram, StftConfig};
use vararray::simulator::{convolve, image_method_rir, RoomSpec};
use vararray::training::upit_loss;

fn tiny_model() -> ModelConfig {
    ModelConfig { bins: 9, dim: 8, heads: 2, kernel: 3, layers: 1 }
}

fn tiny_stft() -> StftConfig {
    StftConfig { frame_length: 16, hop_length: 8, fft_size: 16, ..StftConfig::desk() }
}

fn random_wave(rng: &mut ChaCha8Rng, channels: usize, len: usize) -> MultichannelWaveform {
    let data = (0..channels).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    MultichannelWaveform::new(data, 16000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn stft_round_trip_restores_signal(seed in any::<u64>(), len in 16usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wave = random_wave(&mut rng, 2, len);
        let cfg = tiny_stft();
        let back = istft(&stft(&wave, &cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(back.len(), len);
        let head = cfg.frame_length - cfg.hop_length;
        for m in 0..2 {
            for (a, b) in wave.channel(m).iter().zip(back.channel(m)).skip(head) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masks_are_invariant_to_channel_order(seed in any::<u64>(), channels in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wave = random_wave(&mut rng, channels, 120);
        let feats = extract_features(&stft(&wave, &tiny_stft()).unwrap());
        let params = ModelParams::<f64>::init(tiny_model(), seed).unwrap();
        let a = params.forward(&feats).unwrap();
        let mut order: Vec<usize> = (0..channels).collect();
        order.rotate_left(1 + seed as usize % (channels - 1));
        let b = params.forward(&feats.permute_channels(&order)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3));
        }
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upit_matches_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bins, frames) = (3, 5);
        let n = bins * frames;
        let masks = MaskSet::new((0..NUM_SOURCES * n).map(|_| rng.random()).collect(), bins, frames).unwrap();
        let mag: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let refs: [Vec<f64>; 4] = std::array::from_fn(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect());
        let mse = |mask: usize, r: &[f64]| -> f64 {
            masks.source(mask).iter().zip(&mag).zip(r).map(|((m, y), s)| (m * y - s).powi(2)).sum::<f64>() / n as f64
        };
        let noise = mse(2, &refs[2]) + mse(3, &refs[3]);
        let identity = mse(0, &refs[0]) + mse(1, &refs[1]) + noise;
        let swapped = mse(1, &refs[0]) + mse(0, &refs[1]) + noise;
        let got = upit_loss(&masks, &mag, &refs).unwrap();
        let (want, perm) = if swapped < identity { (swapped, [1, 0]) } else { (identity, [0, 1]) };
        prop_assert!((got.loss - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(got.perm, perm);
    }

    #[test]
    fn mvdr_passes_rank_one_target_undistorted(seed in any::<u64>(), m in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<Complex64> = (0..m).map(|_| Complex64::from_polar(rng.random_range(0.5..1.5), rng.random_range(-3.0..3.0))).collect();
        let phi_s: Vec<Complex64> = (0..m * m).map(|k| d[k / m] * d[k % m].conj()).collect();
        // Noise covariance B B^H + I.
        let b: Vec<Complex64> = (0..m * m).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let phi_n: Vec<Complex64> = (0..m * m)
            .map(|k| {
                let (i, j) = (k / m, k % m);
                let s: Complex64 = (0..m).map(|l| b[i * m + l] * b[j * m + l].conj()).sum();
                if i == j { s + 1.0 } else { s }
            })
            .collect();
        let reference = seed as usize % m;
        let w = mvdr_bin(&phi_s, &phi_n, m, reference).unwrap();
        let response: Complex64 = w.iter().zip(&d).map(|(wi, di)| wi.conj() * di).sum();
        prop_assert!((response - d[reference]).norm() < 1e-5 * d[reference].norm());
    }

    #[test]
    fn sparsified_masks_keep_one_source(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = MaskSet::new((0..NUM_SOURCES * 12).map(|_| rng.random()).collect(), 3, 4).unwrap();
        let sparse = sparsify_masks(&masks);
        for f in 0..3 {
            for t in 0..4 {
                let kept: Vec<usize> = (0..NUM_SOURCES).filter(|&s| sparse.get(s, f, t) != 0.0).collect();
                prop_assert_eq!(kept.len(), 1);
                let max = (0..NUM_SOURCES).map(|s| masks.get(s, f, t)).fold(0.0, f64::max);
                prop_assert_eq!(sparse.get(kept[0], f, t), max);
            }
        }
    }

    #[test]
    fn windows_cover_every_frame(total in 1usize..2000, window in 1usize..300, stride_frac in 1usize..100) {
        let stride = (window * stride_frac / 100).max(1);
        let slices = window_slices(total, window, stride);
        prop_assert_eq!(slices[0].start, 0);
        prop_assert_eq!(slices.last().unwrap().end, total);
        for pair in slices.windows(2) {
            prop_assert!(pair[1].start <= pair[0].end);
            prop_assert!(pair[1].start > pair[0].start);
        }
    }

    #[test]
    fn si_snr_ignores_gain(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * gain).collect();
        let a = si_snr(&e, &r).unwrap();
        let b = si_snr(&scaled, &r).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn phase_wrap_stays_in_range(x in -1000.0f64..1000.0) {
        let w = wrap_phase(x);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        let turns = (x - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn rir_is_causal_and_convolution_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5).unwrap();
        let src = [rng.random_range(0.5..4.5), rng.random_range(0.5..3.5), 1.5];
        let mic = [2.5, 2.0, 1.2];
        let h = image_method_rir(&room, &src, &mic, 2, 16000).unwrap();
        let direct = ((src[0] - mic[0]).powi(2) + (src[1] - mic[1]).powi(2) + (src[2] - mic[2]).powi(2)).sqrt();
        let delay = direct / room.speed_of_sound * 16000.0;
        // The windowed sinc reaches 40 taps ahead of the direct path.
        let first = h.iter().position(|v| v.abs() > 1e-12).unwrap();
        prop_assert!(first as f64 >= delay.floor() - 41.0);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 2.0 * b).collect();
        let cx = convolve(&x, &h, 300);
        let cy = convolve(&y, &h, 300);
        let cs = convolve(&sum, &h, 300);
        for i in 0..300 {
            prop_assert!((cs[i] - cx[i] - 2.0 * cy[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn spectrogram_shape_follows_config() {
    let cfg = tiny_stft();
    let wave = MultichannelWaveform::zeros(3, 100, 16000).unwrap();
    let spec: Spectrogram = stft(&wave, &cfg).unwrap();
    assert_eq!(spec.num_channels(), 3);
    assert_eq!(spec.num_bins(), cfg.num_bins());
    assert_eq!(spec.num_frames(), cfg.num_frames(100));
}
