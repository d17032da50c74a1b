//! Multichannel waveforms, windowed STFT analysis/synthesis and WAV I/O.
//!
//! Frame `t` covers samples `[t * hop, t * hop + frame_length)`. The signal is
//! zero-padded at the tail so that every sample from `frame_length - hop`
//! onwards is covered by the full set of overlapping frames, which makes the
//! overlap-add reconstruction exact there.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `M` synchronized sample sequences at a common sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWaveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelWaveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Invalid("waveform needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(num_channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; num_channels], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Keeps the listed channels, in the listed order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let ch = self
                .channels
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("channel {i} out of range")))?;
            out.push(ch.clone());
        }
        Self::new(out, self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Square root of the periodic Hann window, used for analysis and synthesis.
    SqrtHann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::SqrtHann => (0..len)
                .map(|n| {
                    let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                    (0.5 * (1.0 - phase.cos())).sqrt()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 32 ms frames with a 16 ms hop at 16 kHz.
    fn default() -> Self {
        Self { frame_length: 512, hop_length: 256, fft_size: 512, window: WindowKind::SqrtHann }
    }
}

impl StftConfig {
    /// 16 ms frames with an 8 ms hop at 16 kHz (129 bins).
    pub fn desk() -> Self {
        Self { frame_length: 256, hop_length: 128, fft_size: 256, window: WindowKind::SqrtHann }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length).max(self.frame_length / self.hop_length)
    }

    /// Checks the structural invariants and returns the overlap-add constant.
    pub fn validate(&self) -> Result<f64> {
        if self.frame_length == 0 || self.hop_length == 0 {
            return Err(Error::Config("frame and hop length must be positive".into()));
        }
        if self.frame_length % self.hop_length != 0 {
            return Err(Error::Config(format!(
                "hop length {} does not divide frame length {}",
                self.hop_length, self.frame_length
            )));
        }
        if self.fft_size < self.frame_length {
            return Err(Error::Config("fft size must be at least the frame length".into()));
        }
        let sum = window_overlap_sum(self);
        let reference = sum[0];
        if reference <= 0.0 || sum.iter().any(|s| (s - reference).abs() > 1e-10) {
            return Err(Error::Config(format!(
                "window does not satisfy constant overlap-add at hop {}",
                self.hop_length
            )));
        }
        Ok(reference)
    }
}

/// Sum of shifted analysis x synthesis window products over one hop period.
pub fn window_overlap_sum(cfg: &StftConfig) -> Vec<f64> {
    let w = cfg.window.coefficients(cfg.frame_length);
    (0..cfg.hop_length)
        .map(|n| {
            (0..cfg.frame_length / cfg.hop_length)
                .map(|k| {
                    let v = w[n + k * cfg.hop_length];
                    v * v
                })
                .sum()
        })
        .collect()
}

/// Complex one-sided STFT, indexed `(channel, bin, frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    channels: usize,
    bins: usize,
    frames: usize,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    pub fn from_data(
        data: Vec<Complex64>,
        channels: usize,
        frames: usize,
        config: StftConfig,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        let bins = config.num_bins();
        if channels == 0 || data.len() != channels * bins * frames {
            return Err(Error::Shape(format!(
                "spectrogram data of length {} does not match {channels}x{bins}x{frames}",
                data.len()
            )));
        }
        Ok(Self { data, channels, bins, frames, config, sample_rate, signal_len })
    }

    pub fn zeros(channels: usize, frames: usize, config: StftConfig, sample_rate: u32, signal_len: usize) -> Self {
        let bins = config.num_bins();
        Self {
            data: vec![Complex64::new(0.0, 0.0); channels * bins * frames],
            channels,
            bins,
            frames,
            config,
            sample_rate,
            signal_len,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }
    pub fn num_bins(&self) -> usize {
        self.bins
    }
    pub fn num_frames(&self) -> usize {
        self.frames
    }
    pub fn config(&self) -> &StftConfig {
        &self.config
    }
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
    /// Length in samples of the analyzed signal.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }
    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, m: usize, f: usize, t: usize) -> usize {
        (m * self.bins + f) * self.frames + t
    }

    #[inline]
    pub fn get(&self, m: usize, f: usize, t: usize) -> Complex64 {
        self.data[self.index(m, f, t)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, f: usize, t: usize, v: Complex64) {
        let i = self.index(m, f, t);
        self.data[i] = v;
    }

    /// Frame sequence of one bin of one channel.
    pub fn bin(&self, m: usize, f: usize) -> &[Complex64] {
        let start = self.index(m, f, 0);
        &self.data[start..start + self.frames]
    }

    pub fn bin_mut(&mut self, m: usize, f: usize) -> &mut [Complex64] {
        let start = self.index(m, f, 0);
        &mut self.data[start..start + self.frames]
    }

    /// Frames `[start, end)` of every channel.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Invalid(format!("frame range {start}..{end} out of 0..{}", self.frames)));
        }
        let n = end - start;
        let mut data = Vec::with_capacity(self.channels * self.bins * n);
        for m in 0..self.channels {
            for f in 0..self.bins {
                data.extend_from_slice(&self.bin(m, f)[start..end]);
            }
        }
        Ok(Self {
            data,
            channels: self.channels,
            bins: self.bins,
            frames: n,
            config: self.config,
            sample_rate: self.sample_rate,
            signal_len: n * self.config.hop_length,
        })
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.bins * self.frames);
        for &m in indices {
            if m >= self.channels {
                return Err(Error::Invalid(format!("channel {m} out of range")));
            }
            let start = self.index(m, 0, 0);
            data.extend_from_slice(&self.data[start..start + self.bins * self.frames]);
        }
        Self::from_data(data, indices.len(), self.frames, self.config, self.sample_rate, self.signal_len)
    }

    /// `|X|` of one channel, indexed `(bin, frame)`.
    pub fn magnitude(&self, m: usize) -> Vec<f64> {
        let start = self.index(m, 0, 0);
        self.data[start..start + self.bins * self.frames].iter().map(|c| c.norm()).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(size: usize) -> FftPair {
    let mut planner = FftPlanner::<f64>::new();
    FftPair { forward: planner.plan_fft_forward(size), inverse: planner.plan_fft_inverse(size) }
}

/// Short-time Fourier transform of every channel.
pub fn stft(wave: &MultichannelWaveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = wave.len();
    if len < cfg.frame_length {
        return Err(Error::TooShort { len, need: cfg.frame_length });
    }
    let window = cfg.window.coefficients(cfg.frame_length);
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let fft = plan(cfg.fft_size).forward;
    let mut spec = Spectrogram::zeros(wave.num_channels(), frames, *cfg, wave.sample_rate(), len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for m in 0..wave.num_channels() {
        let x = wave.channel(m);
        for t in 0..frames {
            let start = t * cfg.hop_length;
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for (n, w) in window.iter().enumerate() {
                if let Some(&s) = x.get(start + n) {
                    buf[n] = Complex64::new(s * w, 0.0);
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (f, &v) in buf.iter().take(bins).enumerate() {
                spec.set(m, f, t, v);
            }
        }
    }
    Ok(spec)
}

/// Inverse STFT by weighted overlap-add; the output has the analyzed length.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<MultichannelWaveform> {
    if spec.config() != cfg {
        return Err(Error::Config("stft configuration does not match the spectrogram".into()));
    }
    let cola = cfg.validate()?;
    let window = cfg.window.coefficients(cfg.frame_length);
    let frames = spec.num_frames();
    let bins = spec.num_bins();
    let n_fft = cfg.fft_size;
    let ifft = plan(n_fft).inverse;
    let padded_len = (frames - 1) * cfg.hop_length + cfg.frame_length;
    let norm = 1.0 / (n_fft as f64 * cola);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut channels = Vec::with_capacity(spec.num_channels());
    for m in 0..spec.num_channels() {
        let mut out = vec![0.0; padded_len.max(spec.signal_len())];
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spec.get(m, f, t);
            }
            // Rebuild the negative-frequency half by conjugate symmetry.
            for f in bins..n_fft {
                buf[f] = buf[n_fft - f].conj();
            }
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * cfg.hop_length;
            for (n, w) in window.iter().enumerate() {
                out[start + n] += buf[n].re * w * norm;
            }
        }
        out.truncate(spec.signal_len());
        channels.push(out);
    }
    MultichannelWaveform::new(channels, spec.sample_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
pub fn read_wav(path: &Path) -> Result<MultichannelWaveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let num_channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / num_channels;
    let mut channels = vec![Vec::with_capacity(frames); num_channels];
    for frame in interleaved.chunks_exact(num_channels) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    MultichannelWaveform::new(channels, spec.sample_rate)
}

pub fn write_wav(path: &Path, wave: &MultichannelWaveform, format: SampleFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for n in 0..wave.len() {
        for ch in wave.channels() {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                SampleFormat::Float32 => writer.write_sample(ch[n] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
