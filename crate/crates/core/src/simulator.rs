//! Multichannel mixture simulation: shoebox image-method RIRs, built-in
//! array geometries, synthetic speech-like sources, diffuse and directional
//! noise, and on-disk datasets.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NUM_SOURCES;
use crate::signal::{read_wav, write_wav, MultichannelWaveform, SampleFormat};
use crate::training::{Dataset, TrainingExample, REFERENCE_CHANNEL};

pub type Point = [f64; 3];

/// Taps of the windowed-sinc fractional delay filter.
pub const SINC_TAPS: usize = 81;
const HALF_TAPS: i64 = (SINC_TAPS as i64 - 1) / 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub name: String,
    /// Microphone positions relative to the array center, meters.
    pub positions: Vec<Point>,
}

impl ArrayGeometry {
    pub fn new(name: impl Into<String>, positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("array needs at least one microphone".into()));
        }
        for i in 0..positions.len() {
            for j in 0..i {
                if distance(&positions[i], &positions[j]) < 1e-9 {
                    return Err(Error::Invalid(format!("microphones {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { name: name.into(), positions })
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    /// Largest distance of a microphone from the center.
    pub fn radius(&self) -> f64 {
        self.positions.iter().map(|p| distance(p, &[0.0; 3])).fold(0.0, f64::max)
    }

    pub fn subset(&self, name: &str, indices: &[usize]) -> Result<Self> {
        let positions = indices
            .iter()
            .map(|&i| self.positions.get(i).copied().ok_or_else(|| Error::Invalid(format!("microphone {i} out of range"))))
            .collect::<Result<_>>()?;
        Self::new(name, positions)
    }

    /// Positions rotated by `azimuth` about the vertical axis and moved to `center`.
    pub fn placed(&self, center: Point, azimuth: f64) -> Vec<Point> {
        let (s, c) = azimuth.sin_cos();
        self.positions
            .iter()
            .map(|p| [center[0] + c * p[0] - s * p[1], center[1] + s * p[0] + c * p[1], center[2] + p[2]])
            .collect()
    }
}

fn circle(count: usize, radius: f64) -> Vec<Point> {
    (0..count)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / count as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect()
}

pub const BUILTIN_GEOMETRIES: [&str; 4] = ["ami8", "ami4", "ms7", "ms3"];

/// `ami8`: eight microphones on a 10 cm circle. `ami4`: microphones 1, 3, 5, 7
/// of `ami8` in one-based numbering. `ms7`: six microphones on a 4.25 cm circle
/// followed by one at the center. `ms3`: two adjacent circle microphones of
/// `ms7` and the center one, an equilateral triangle.
pub fn geometry_builtin(name: &str) -> Result<ArrayGeometry> {
    match name {
        "ami8" => ArrayGeometry::new("ami8", circle(8, 0.10)),
        "ami4" => geometry_builtin("ami8")?.subset("ami4", &[0, 2, 4, 6]),
        "ms7" => {
            let mut p = circle(6, 0.0425);
            p.push([0.0; 3]);
            ArrayGeometry::new("ms7", p)
        }
        "ms3" => geometry_builtin("ms7")?.subset("ms3", &[0, 1, 6]),
        other => Err(Error::Invalid(format!("unknown array geometry '{other}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Shoebox extent along x, y, z in meters.
    pub dims: Point,
    /// Energy absorption of every wall, in `[0, 1]`.
    pub absorption: f64,
    pub speed_of_sound: f64,
}

impl RoomSpec {
    pub fn new(dims: Point, absorption: f64) -> Result<Self> {
        let room = Self { dims, absorption, speed_of_sound: 343.0 };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Invalid(format!("room dimensions {:?} must be positive", self.dims)));
        }
        if !(0.0..=1.0).contains(&self.absorption) {
            return Err(Error::Invalid(format!("absorption {} outside [0, 1]", self.absorption)));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::Invalid("speed of sound must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(&x, &d)| x > 0.0 && x < d)
    }

    /// Pressure reflection coefficient of every wall.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption).sqrt()
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Point,
    /// Number of wall reflections.
    pub order: usize,
}

/// Every mirrored source with at most `max_order` reflections.
pub fn image_sources(room: &RoomSpec, src: &Point, max_order: usize) -> Vec<ImageSource> {
    let n = max_order as i64;
    let mut out = Vec::new();
    for nx in -n..=n {
        for ny in -n..=n {
            for nz in -n..=n {
                for q in 0..8u8 {
                    let lattice = [nx, ny, nz];
                    let mut position = [0.0; 3];
                    let mut order = 0;
                    for axis in 0..3 {
                        let qa = ((q >> axis) & 1) as i64;
                        let sign = (1 - 2 * qa) as f64;
                        position[axis] = sign * src[axis] + 2.0 * lattice[axis] as f64 * room.dims[axis];
                        order += ((lattice[axis] - qa).abs() + lattice[axis].abs()) as usize;
                    }
                    if order <= max_order {
                        out.push(ImageSource { position, order });
                    }
                }
            }
        }
    }
    out
}

/// Hann-windowed sinc evaluated at offset `x` from the fractional delay.
fn windowed_sinc(x: f64) -> f64 {
    if x.abs() > HALF_TAPS as f64 + 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * x / (HALF_TAPS as f64 + 1.0)).cos());
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    window * sinc
}

/// Adds an impulse of amplitude `amp` delayed by `delay` samples.
fn add_fractional_impulse(h: &mut [f64], delay: f64, amp: f64) {
    let center = delay.round() as i64;
    for k in center - HALF_TAPS..=center + HALF_TAPS {
        if k >= 0 && (k as usize) < h.len() {
            h[k as usize] += amp * windowed_sinc(k as f64 - delay);
        }
    }
}

/// Room impulse response from `src` to `mic` by the image method.
pub fn image_method_rir(room: &RoomSpec, src: &Point, mic: &Point, max_order: usize, fs: u32) -> Result<Vec<f64>> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::Placement(format!("source {src:?} or microphone {mic:?} outside the room")));
    }
    let images = image_sources(room, src, max_order);
    let r = room.reflection();
    let per_sample = fs as f64 / room.speed_of_sound;
    let audible = |im: &&ImageSource| im.order == 0 || r != 0.0;
    let max_delay = images.iter().filter(audible).map(|im| distance(&im.position, mic)).fold(0.0, f64::max) * per_sample;
    let mut h = vec![0.0; max_delay.ceil() as usize + HALF_TAPS as usize + 1];
    for im in &images {
        let d = distance(&im.position, mic);
        let amp = r.powi(im.order as i32) / (4.0 * PI * d);
        if amp != 0.0 {
            add_fractional_impulse(&mut h, d * per_sample, amp);
        }
    }
    Ok(h)
}

/// Linear convolution truncated to `len` samples.
pub fn convolve(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    convolve_many(x, std::slice::from_ref(&h.to_vec()), len).swap_remove(0)
}

/// Convolves one signal with several filters, each result truncated to `len`.
/// The signal spectrum is shared, and filters are transformed in pairs packed
/// into the real and imaginary parts of one complex sequence.
pub fn convolve_many(x: &[f64], filters: &[Vec<f64>], len: usize) -> Vec<Vec<f64>> {
    let longest = filters.iter().map(|h| h.len()).max().unwrap_or(0);
    if x.is_empty() || longest == 0 {
        return vec![vec![0.0; len]; filters.len()];
    }
    let full = x.len() + longest - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let zero = Complex64::new(0.0, 0.0);
    let mut spectrum = vec![zero; n];
    for (s, &v) in spectrum.iter_mut().zip(x) {
        s.re = v;
    }
    fwd.process(&mut spectrum);
    let scale = 1.0 / n as f64;
    let keep = full.min(len);
    let mut out = Vec::with_capacity(filters.len());
    let mut buf = vec![zero; n];
    for pair in filters.chunks(2) {
        buf.iter_mut().for_each(|b| *b = zero);
        for (b, &v) in buf.iter_mut().zip(&pair[0]) {
            b.re = v;
        }
        if let Some(h) = pair.get(1) {
            for (b, &v) in buf.iter_mut().zip(h) {
                b.im = v;
            }
        }
        fwd.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&spectrum) {
            *b *= s;
        }
        inv.process(&mut buf);
        let mut first: Vec<f64> = buf[..keep].iter().map(|c| c.re * scale).collect();
        first.resize(len, 0.0);
        out.push(first);
        if pair.len() == 2 {
            let mut second: Vec<f64> = buf[..keep].iter().map(|c| c.im * scale).collect();
            second.resize(len, 0.0);
            out.push(second);
        }
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Speech-like test signal: a harmonic complex on a drifting pitch contour,
/// amplitude-modulated at a syllabic rate, with a random vowel-like envelope.
pub fn synthetic_speech(len: usize, fs: u32, rng: &mut impl Rng) -> Vec<f64> {
    let fs_f = fs as f64;
    let f0_base: f64 = rng.random_range(90.0..250.0);
    let drift_rate: f64 = rng.random_range(0.2..1.0);
    let drift_depth: f64 = rng.random_range(0.05..0.2);
    let drift_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let syllable_rate: f64 = rng.random_range(3.0..6.0);
    let formants: Vec<(f64, f64)> =
        vec![(rng.random_range(300.0..900.0), 120.0), (rng.random_range(900.0..2400.0), 200.0), (rng.random_range(2400.0..3500.0), 300.0)];
    let max_harmonic = ((0.45 * fs_f) / f0_base).floor() as usize;
    let harmonics = max_harmonic.clamp(1, 40);
    let gains: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0_base;
            let env: f64 = formants.iter().map(|(c, bw)| (-(f - c).powi(2) / (2.0 * bw * bw)).exp()).sum();
            (0.1 + env) / (k as f64).sqrt()
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    // Syllable envelope with pauses.
    let syllable_len = (fs_f / syllable_rate) as usize;
    let syllables = len / syllable_len.max(1) + 1;
    let levels: Vec<f64> = (0..syllables).map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.4..1.0) }).collect();

    let offsets: Vec<Complex64> = phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs_f;
        let f0 = f0_base * (1.0 + drift_depth * (2.0 * PI * drift_rate * t + drift_phase).sin());
        phase = (phase + 2.0 * PI * f0 / fs_f) % (2.0 * PI);
        let syl = n / syllable_len.max(1);
        let within = (n % syllable_len.max(1)) as f64 / syllable_len.max(1) as f64;
        let am = levels[syl] * (PI * within).sin().powi(2);
        // Harmonic k is Im(z^k e^{i p_k}) with z = e^{i phase}.
        let z = Complex64::from_polar(1.0, phase);
        let mut zk = z;
        let mut v = 0.0;
        for (k, (g, c)) in gains.iter().zip(&offsets).enumerate() {
            if (k + 1) as f64 * f0 >= 0.45 * fs_f {
                break;
            }
            v += g * (zk * c).im;
            zk *= z;
        }
        out.push(am * v);
    }
    let level = rms(&out);
    if level > 0.0 {
        out.iter_mut().for_each(|v| *v /= level);
    }
    out
}

/// Low-passed Gaussian noise with unit RMS.
fn lowpass_noise(len: usize, pole: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut state = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            state = pole * state + (1.0 - pole) * w;
            state
        })
        .collect();
    let level = rms(&out);
    if level > 0.0 {
        out.iter_mut().for_each(|v| *v /= level);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPattern {
    /// One speaker only.
    Single,
    /// The second speaker starts while the first is talking.
    Partial,
    /// One utterance lies entirely within the other.
    Full,
    /// Two speakers taking turns with no overlap.
    Sequential,
}

impl OverlapPattern {
    pub fn speakers(self) -> usize {
        if self == OverlapPattern::Single {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub diffuse: bool,
    pub directional: bool,
    /// Diffuse noise SNR range in dB, relative to the speech at the reference channel.
    pub diffuse_snr_db: [f64; 2],
    pub directional_snr_db: [f64; 2],
    /// Duration range of the directional burst in seconds.
    pub burst_s: [f64; 2],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { diffuse: true, directional: true, diffuse_snr_db: [10.0, 20.0], directional_snr_db: [5.0, 15.0], burst_s: [0.2, 1.0] }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self { diffuse: false, directional: false, ..Self::default() }
    }
}

/// One placed talker: the first `length` samples of dry signal `source`
/// start at `onset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPlacement {
    pub source: usize,
    pub position: Point,
    pub onset: usize,
    pub length: usize,
    pub gain: f64,
}

/// Everything random about a mixture, drawn before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: RoomSpec,
    pub mics: Vec<Point>,
    pub speakers: Vec<SpeakerPlacement>,
    pub len: usize,
    pub fs: u32,
    pub max_order: usize,
    pub diffuse: Option<(f64, u64)>,
    /// `(snr_db, position, onset, length, seed)` of the directional burst.
    pub directional: Option<(f64, Point, usize, usize, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: MultichannelWaveform,
    /// Multichannel images: speaker 0, speaker 1, diffuse noise, directional noise.
    pub components: [MultichannelWaveform; NUM_SOURCES],
    pub active_speakers: usize,
    pub geometry: String,
    pub pattern: OverlapPattern,
    pub seed: u64,
}

impl MixtureSample {
    /// Component signals at the reference channel.
    pub fn references(&self) -> [Vec<f64>; NUM_SOURCES] {
        std::array::from_fn(|s| self.components[s].channel(REFERENCE_CHANNEL).to_vec())
    }

    pub fn to_example(&self) -> TrainingExample {
        TrainingExample { mixture: self.mixture.clone(), references: self.references(), active_speakers: self.active_speakers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub room_min: Point,
    pub room_max: Point,
    pub absorption: [f64; 2],
    pub max_order: usize,
    /// Minimum distance of sources and array from every wall.
    pub wall_margin: f64,
    /// Minimum source-to-array distance.
    pub min_source_distance: f64,
    /// Level difference between the two talkers is drawn from `+-this` dB.
    pub speaker_gain_db: f64,
    pub noise: NoiseConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            duration_s: 4.0,
            room_min: [3.0, 3.0, 2.5],
            room_max: [8.0, 8.0, 3.5],
            absorption: [0.3, 0.8],
            max_order: 3,
            wall_margin: 0.5,
            min_source_distance: 0.5,
            speaker_gain_db: 2.5,
            noise: NoiseConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn random_point(rng: &mut impl Rng, room: &RoomSpec, margin: f64) -> Option<Point> {
    let mut p = [0.0; 3];
    for axis in 0..3 {
        let (lo, hi) = (margin, room.dims[axis] - margin);
        if lo >= hi {
            return None;
        }
        p[axis] = rng.random_range(lo..hi);
    }
    Some(p)
}

/// Talker onsets and active lengths for a pattern within `len` samples.
fn schedule(pattern: OverlapPattern, len: usize, fs: u32, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let s = |sec: f64| (sec * fs as f64) as usize;
    let lenf = len as f64 / fs as f64;
    match pattern {
        OverlapPattern::Single => {
            let dur = rng.random_range(0.6..0.95) * lenf;
            vec![(rng.random_range(0..=len - s(dur)), s(dur))]
        }
        OverlapPattern::Full => {
            let outer = rng.random_range(0.8..0.98) * lenf;
            let inner = rng.random_range(0.4..0.8) * outer;
            let o_start = rng.random_range(0..=len - s(outer));
            let i_start = o_start + rng.random_range(0..=s(outer) - s(inner));
            vec![(o_start, s(outer)), (i_start, s(inner))]
        }
        OverlapPattern::Partial => {
            let a = rng.random_range(0.3..0.5) * lenf;
            let b = rng.random_range(0.3..0.5) * lenf;
            let overlap = rng.random_range(0.2..0.6) * a.min(b);
            let total = a + b - overlap;
            let start = rng.random_range(0.0..(lenf - total).max(0.0) + f64::EPSILON);
            vec![(s(start), s(a)), (s(start + a - overlap), s(b))]
        }
        OverlapPattern::Sequential => {
            let gap = rng.random_range(0.0..0.125) * lenf;
            let a = rng.random_range(0.35..0.5) * (lenf - gap);
            let b = rng.random_range(0.35..0.5) * (lenf - gap);
            let start = rng.random_range(0.0..(lenf - a - b - gap).max(0.0) + f64::EPSILON);
            vec![(s(start), s(a)), (s(start + a + gap), s(b))]
        }
    }
}

/// Draws room, array placement, talker positions and noise settings.
pub fn sample_scene(cfg: &SceneConfig, geometry: &ArrayGeometry, pattern: OverlapPattern, rng: &mut impl Rng) -> Result<Scene> {
    let len = cfg.num_samples();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let dims = std::array::from_fn(|a| rng.random_range(cfg.room_min[a]..=cfg.room_max[a]));
        let room = RoomSpec::new(dims, rng.random_range(cfg.absorption[0]..=cfg.absorption[1]))?;
        let Some(center) = random_point(rng, &room, cfg.wall_margin + geometry.radius()) else {
            continue;
        };
        let mics = geometry.placed(center, rng.random_range(0.0..2.0 * PI));
        let mut positions = Vec::new();
        for _ in 0..pattern.speakers() + 1 {
            for _ in 0..PLACEMENT_ATTEMPTS {
                if let Some(p) = random_point(rng, &room, cfg.wall_margin) {
                    if distance(&p, &center) >= cfg.min_source_distance + geometry.radius() {
                        positions.push(p);
                        break;
                    }
                }
            }
        }
        if positions.len() != pattern.speakers() + 1 {
            continue;
        }
        let sched = schedule(pattern, len, cfg.sample_rate, rng);
        let speakers = sched
            .iter()
            .enumerate()
            .map(|(k, &(onset, length))| SpeakerPlacement {
                source: k,
                position: positions[k],
                onset,
                length,
                gain: if k == 0 { 1.0 } else { 10f64.powf(rng.random_range(-cfg.speaker_gain_db..=cfg.speaker_gain_db) / 20.0) },
            })
            .collect();
        let noise = &cfg.noise;
        let diffuse_snr = rng.random_range(noise.diffuse_snr_db[0]..=noise.diffuse_snr_db[1]);
        let diffuse_seed: u64 = rng.random();
        let dir_snr = rng.random_range(noise.directional_snr_db[0]..=noise.directional_snr_db[1]);
        let burst = ((rng.random_range(noise.burst_s[0]..=noise.burst_s[1]) * cfg.sample_rate as f64) as usize).min(len);
        let burst_onset = rng.random_range(0..=len - burst);
        let burst_seed: u64 = rng.random();
        return Ok(Scene {
            room,
            mics,
            speakers,
            len,
            fs: cfg.sample_rate,
            max_order: cfg.max_order,
            diffuse: noise.diffuse.then_some((diffuse_snr, diffuse_seed)),
            directional: noise.directional.then_some((dir_snr, positions[pattern.speakers()], burst_onset, burst, burst_seed)),
        });
    }
    Err(Error::Placement(format!("no valid placement for {} after {PLACEMENT_ATTEMPTS} attempts", geometry.name)))
}

fn spatialize(scene: &Scene, dry: &[f64], src: &Point) -> Result<Vec<Vec<f64>>> {
    let rirs = scene
        .mics
        .iter()
        .map(|mic| image_method_rir(&scene.room, src, mic, scene.max_order, scene.fs))
        .collect::<Result<Vec<_>>>()?;
    Ok(convolve_many(dry, &rirs, scene.len))
}

/// Renders a scene given the dry talker signals.
pub fn render_scene(scene: &Scene, sources: &[Vec<f64>]) -> Result<[MultichannelWaveform; NUM_SOURCES]> {
    let m = scene.mics.len();
    let zero = || vec![vec![0.0; scene.len]; m];
    let mut speech = [zero(), zero()];
    for (k, sp) in scene.speakers.iter().enumerate() {
        let src = sources.get(sp.source).ok_or_else(|| Error::Invalid(format!("missing dry source {}", sp.source)))?;
        let active = sp.length.min(src.len());
        let mut placed = vec![0.0; scene.len];
        for (i, v) in src[..active].iter().enumerate() {
            if let Some(slot) = placed.get_mut(sp.onset + i) {
                *slot = v * sp.gain;
            }
        }
        speech[k] = spatialize(scene, &placed, &sp.position)?;
    }
    let speech_level: f64 = {
        let r: Vec<f64> = (0..scene.len).map(|n| speech[0][REFERENCE_CHANNEL][n] + speech[1][REFERENCE_CHANNEL][n]).collect();
        rms(&r)
    };
    let mut diffuse = zero();
    if let Some((snr, seed)) = scene.diffuse {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = speech_level * 10f64.powf(-snr / 20.0);
        for ch in diffuse.iter_mut() {
            *ch = lowpass_noise(scene.len, 0.9, &mut rng).into_iter().map(|v| v * target).collect();
        }
    }
    let mut directional = zero();
    if let Some((snr, pos, onset, burst, seed)) = scene.directional {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dry = vec![0.0; scene.len];
        let raw = lowpass_noise(burst, rng.random_range(0.0..0.95), &mut rng);
        for (i, v) in raw.iter().enumerate() {
            // Short fades avoid clicks at the burst edges.
            let fade = ((i.min(burst - 1 - i) as f64) / 160.0).min(1.0);
            dry[onset + i] = v * fade;
        }
        let images = spatialize(scene, &dry, &pos)?;
        let level = rms(&images[REFERENCE_CHANNEL]);
        let gain = if level > 0.0 { speech_level * 10f64.powf(-snr / 20.0) / level } else { 0.0 };
        directional = images.into_iter().map(|c| c.into_iter().map(|v| v * gain).collect()).collect();
    }
    let [s0, s1] = speech;
    Ok([
        MultichannelWaveform::new(s0, scene.fs)?,
        MultichannelWaveform::new(s1, scene.fs)?,
        MultichannelWaveform::new(diffuse, scene.fs)?,
        MultichannelWaveform::new(directional, scene.fs)?,
    ])
}

/// `((s0 + s1) + diffuse) + directional`, sample by sample.
pub fn sum_components(components: &[MultichannelWaveform; NUM_SOURCES]) -> Result<MultichannelWaveform> {
    let m = components[0].num_channels();
    let len = components[0].len();
    let channels = (0..m)
        .map(|ch| (0..len).map(|n| components.iter().fold(0.0, |acc, c| acc + c.channel(ch)[n])).collect())
        .collect();
    MultichannelWaveform::new(channels, components[0].sample_rate())
}

/// Full mixture synthesis from caller-provided dry talkers.
pub fn synthesize_mixture(
    sources: &[Vec<f64>],
    geometry: &ArrayGeometry,
    cfg: &SceneConfig,
    pattern: OverlapPattern,
    seed: u64,
) -> Result<MixtureSample> {
    if sources.len() != pattern.speakers() {
        return Err(Error::Invalid(format!("{:?} needs {} sources, got {}", pattern, pattern.speakers(), sources.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(cfg, geometry, pattern, &mut rng)?;
    let components = render_scene(&scene, sources)?;
    Ok(MixtureSample {
        mixture: sum_components(&components)?,
        components,
        active_speakers: pattern.speakers(),
        geometry: geometry.name.clone(),
        pattern,
        seed,
    })
}

/// Where dry talker signals come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePool {
    /// Built-in harmonic speech-like signals.
    #[default]
    Synthetic,
    /// Mono WAV files at the scene sample rate.
    Files(Vec<PathBuf>),
}

impl SourcePool {
    /// Draws one dry talker of `len` samples with unit RMS.
    pub fn draw(&self, len: usize, fs: u32, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            SourcePool::Synthetic => Ok(synthetic_speech(len, fs, rng)),
            SourcePool::Files(paths) => {
                if paths.is_empty() {
                    return Err(Error::Invalid("source pool is empty".into()));
                }
                let path = &paths[rng.random_range(0..paths.len())];
                let wave = read_wav(path)?;
                if wave.sample_rate() != fs {
                    return Err(Error::Format(format!("{}: sample rate {} != {fs}", path.display(), wave.sample_rate())));
                }
                let x = wave.channel(0);
                let start = if x.len() > len { rng.random_range(0..=x.len() - len) } else { 0 };
                let mut out: Vec<f64> = x[start..(start + len).min(x.len())].to_vec();
                out.resize(len, 0.0);
                let level = rms(&out);
                if level > 0.0 {
                    out.iter_mut().for_each(|v| *v /= level);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_samples: usize,
    /// Geometry names drawn uniformly per sample.
    pub geometries: Vec<String>,
    pub scene: SceneConfig,
    pub sources: SourcePool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            geometries: BUILTIN_GEOMETRIES.iter().map(|s| s.to_string()).collect(),
            scene: SceneConfig::default(),
            sources: SourcePool::Synthetic,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.geometries.is_empty() {
            return Err(Error::Config("at least one geometry is required".into()));
        }
        for g in &self.geometries {
            geometry_builtin(g).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let SourcePool::Files(f) = &self.sources {
            if f.is_empty() {
                return Err(Error::Config("source pool is empty".into()));
            }
        }
        if self.scene.num_samples() == 0 {
            return Err(Error::Config("sample duration must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample seed derived from the root seed and the sample index.
pub fn sample_seed(root: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(index as u64);
    rng.random()
}

/// Even indices hold two talkers, odd indices one.
pub fn speakers_for_index(index: usize) -> usize {
    if index % 2 == 0 {
        2
    } else {
        1
    }
}

/// Sample `index` as a pure function of the configuration and its seed.
pub fn generate_from_seed(cfg: &DatasetConfig, seed: u64, index: usize) -> Result<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = geometry_builtin(&cfg.geometries[rng.random_range(0..cfg.geometries.len())])?;
    let pattern = if speakers_for_index(index) == 1 {
        OverlapPattern::Single
    } else {
        [OverlapPattern::Partial, OverlapPattern::Full, OverlapPattern::Sequential][rng.random_range(0..3)]
    };
    let len = cfg.scene.num_samples();
    let sources = (0..pattern.speakers())
        .map(|_| cfg.sources.draw(len, cfg.scene.sample_rate, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    synthesize_mixture(&sources, &geometry, &cfg.scene, pattern, rng.random())
        .map(|sample| MixtureSample { seed, ..sample })
}

pub fn generate_sample(cfg: &DatasetConfig, root_seed: u64, index: usize) -> Result<MixtureSample> {
    generate_from_seed(cfg, sample_seed(root_seed, index), index)
}

/// Samples simulated on demand; nothing touches the disk.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub config: DatasetConfig,
    pub seed: u64,
}

impl SimulatedDataset {
    pub fn new(config: DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed })
    }

    pub fn sample(&self, index: usize) -> Result<MixtureSample> {
        if index >= self.config.num_samples {
            return Err(Error::Invalid(format!("sample {index} out of range")));
        }
        generate_sample(&self.config, self.seed, index)
    }
}

impl Dataset for SimulatedDataset {
    fn len(&self) -> usize {
        self.config.num_samples
    }
    fn example(&self, index: usize) -> Result<TrainingExample> {
        Ok(self.sample(index)?.to_example())
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub geometry: String,
    pub num_mics: usize,
    pub pattern: OverlapPattern,
    pub active_speakers: usize,
    pub mixture: PathBuf,
    /// Speaker 0, speaker 1, diffuse noise, directional noise at the reference channel.
    pub references: Vec<PathBuf>,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const REFERENCE_NAMES: [&str; NUM_SOURCES] = ["speech0", "speech1", "diffuse", "directional"];

/// Writes the mixture and reference WAVs of one sample under `dir`.
pub fn write_sample(dir: &Path, index: usize, sample: &MixtureSample) -> Result<ManifestRecord> {
    let id = format!("s{index:06}");
    fs::create_dir_all(dir.join(&id))?;
    let mixture = PathBuf::from(&id).join("mixture.wav");
    write_wav(&dir.join(&mixture), &sample.mixture, SampleFormat::Float32)?;
    let mut references = Vec::with_capacity(NUM_SOURCES);
    for (name, r) in REFERENCE_NAMES.iter().zip(sample.references()) {
        let rel = PathBuf::from(&id).join(format!("{name}.wav"));
        write_wav(&dir.join(&rel), &MultichannelWaveform::mono(r, sample.mixture.sample_rate())?, SampleFormat::Float32)?;
        references.push(rel);
    }
    Ok(ManifestRecord {
        id,
        index,
        seed: sample.seed,
        geometry: sample.geometry.clone(),
        num_mics: sample.mixture.num_channels(),
        pattern: sample.pattern,
        active_speakers: sample.active_speakers,
        mixture,
        references,
    })
}

/// Simulates `cfg.num_samples` samples into `dir` and writes the manifest.
pub fn make_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = File::create(dir.join(MANIFEST))?;
    let mut records = Vec::with_capacity(cfg.num_samples);
    for index in 0..cfg.num_samples {
        let record = write_sample(dir, index, &generate_sample(cfg, seed, index)?)?;
        writeln!(manifest, "{}", serde_json::to_string(&record)?)?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Dataset read back from a directory written by [`make_dataset`].
#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DiskDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self { dir: dir.to_path_buf(), records: read_manifest(dir)? })
    }
}

impl Dataset for DiskDataset {
    fn len(&self) -> usize {
        self.records.len()
    }
    fn example(&self, index: usize) -> Result<TrainingExample> {
        let rec = self.records.get(index).ok_or_else(|| Error::Invalid(format!("example {index} out of range")))?;
        let mixture = read_wav(&self.dir.join(&rec.mixture))?;
        if rec.references.len() != NUM_SOURCES {
            return Err(Error::Format(format!("{}: expected {NUM_SOURCES} references", rec.id)));
        }
        let mut refs = Vec::with_capacity(NUM_SOURCES);
        for r in &rec.references {
            let wave = read_wav(&self.dir.join(r))?;
            if wave.len() != mixture.len() {
                return Err(Error::Format(format!("{}: reference length differs from mixture", rec.id)));
            }
            refs.push(wave.into_channels().swap_remove(0));
        }
        let references: [Vec<f64>; NUM_SOURCES] = refs.try_into().map_err(|_| Error::Format("reference count".into()))?;
        Ok(TrainingExample { mixture, references, active_speakers: rec.active_speakers })
    }
}
