//! Python bindings: simulation, the mask estimator, continuous separation
//! and the evaluation metric.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vararray::features::extract_features;
use vararray::model::checkpoint::Checkpoint;
use vararray::model::{ModelConfig, ModelParams};
use vararray::pipeline::{best_perm_si_snr as best_perm, separate_continuous, si_snr as si_snr_db, CssConfig};
use vararray::signal::{stft, MultichannelWaveform, StftConfig};
use vararray::simulator::{generate_sample, geometry_builtin, DatasetConfig, SimulatedDataset, BUILTIN_GEOMETRIES};
use vararray::training::{train, TrainConfig, TrainOutput};
use vararray::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Wav(_) => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn wave(channels: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<MultichannelWaveform> {
    MultichannelWaveform::new(channels, sample_rate).map_err(to_py)
}

fn preset(name: &str) -> PyResult<(ModelConfig, StftConfig)> {
    match name {
        "desk" => Ok((ModelConfig::desk(), StftConfig::desk())),
        "full" => Ok((ModelConfig::full(), StftConfig::default())),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}, expected \"desk\" or \"full\""))),
    }
}

/// Microphone array layout.
#[pyclass(module = "vararray", frozen)]
struct Geometry {
    #[pyo3(get)]
    name: String,
    #[pyo3(get)]
    positions: Vec<[f64; 3]>,
}

#[pymethods]
impl Geometry {
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let g = geometry_builtin(name).map_err(to_py)?;
        Ok(Self { name: g.name, positions: g.positions })
    }

    #[getter]
    fn num_mics(&self) -> usize {
        self.positions.len()
    }

    fn __repr__(&self) -> String {
        format!("Geometry({:?}, {} mics)", self.name, self.positions.len())
    }
}

/// Mask estimator weights (32-bit).
#[pyclass(module = "vararray")]
struct Model {
    params: ModelParams<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (seed = 0, preset = "desk"))]
    fn new(seed: u64, preset: &str) -> PyResult<Self> {
        let (cfg, _) = self::preset(preset)?;
        Ok(Self { params: ModelParams::init(cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { params: ckpt.params().map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_params(&self.params).save(&path).map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    #[getter]
    fn num_bins(&self) -> usize {
        self.params.config().bins
    }

    /// Masks for a multichannel signal as nested lists `[source][bin][frame]`.
    fn masks(&self, channels: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let spec = self.spectrum(channels, sample_rate)?;
        let masks = self.params.forward(&extract_features(&spec)).map_err(to_py)?;
        let (bins, frames) = (masks.num_bins(), masks.num_frames());
        Ok((0..masks.num_sources())
            .map(|s| (0..bins).map(|f| (0..frames).map(|t| masks.get(s, f, t)).collect()).collect())
            .collect())
    }

    /// Floating-point operations before and after the channel merge.
    fn flops(&self, channels: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<(u64, u64)> {
        let spec = self.spectrum(channels, sample_rate)?;
        let (_, stats) = self.params.forward_with_stats(&extract_features(&spec)).map_err(to_py)?;
        Ok((stats.pre_merge, stats.post_merge))
    }

    fn __repr__(&self) -> String {
        let c = self.params.config();
        format!("Model(bins={}, dim={}, layers={}, parameters={})", c.bins, c.dim, c.layers, self.params.num_parameters())
    }
}

impl Model {
    fn spectrum(&self, channels: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<vararray::signal::Spectrogram> {
        let cfg = if self.params.config().bins == StftConfig::desk().num_bins() { StftConfig::desk() } else { StftConfig::default() };
        stft(&wave(channels, sample_rate)?, &cfg).map_err(to_py)
    }
}

#[pyfunction]
fn builtin_geometries() -> Vec<&'static str> {
    BUILTIN_GEOMETRIES.to_vec()
}

/// Simulated sample `index` of the dataset rooted at `seed`, as a dict.
#[pyfunction]
#[pyo3(signature = (seed, index, duration_s = 4.0, geometries = None))]
fn simulate<'py>(
    py: Python<'py>,
    seed: u64,
    index: usize,
    duration_s: f64,
    geometries: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = DatasetConfig { num_samples: index + 1, ..DatasetConfig::default() };
    cfg.scene.duration_s = duration_s;
    if let Some(g) = geometries {
        cfg.geometries = g;
    }
    cfg.validate().map_err(to_py)?;
    let sample = generate_sample(&cfg, seed, index).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mixture", sample.mixture.channels().to_vec())?;
    d.set_item("references", sample.references().to_vec())?;
    d.set_item("sample_rate", sample.mixture.sample_rate())?;
    d.set_item("active_speakers", sample.active_speakers)?;
    d.set_item("geometry", sample.geometry.clone())?;
    d.set_item("pattern", format!("{:?}", sample.pattern).to_lowercase())?;
    d.set_item("seed", sample.seed)?;
    Ok(d)
}

/// Separates a recording into two streams; returns `(out0, out1, report)`.
#[pyfunction]
#[pyo3(signature = (model, channels, sample_rate, window_s = 1.6, shift_s = 0.4, ref_channel = 0))]
fn separate(
    model: &Model,
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
    window_s: f64,
    shift_s: f64,
    ref_channel: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, String)> {
    let stft_cfg = if model.params.config().bins == StftConfig::desk().num_bins() { StftConfig::desk() } else { StftConfig::default() };
    let cfg = CssConfig { window_s, shift_s, stft: stft_cfg, ref_channel, ..CssConfig::default() };
    let sep = separate_continuous(&wave(channels, sample_rate)?, &model.params, &cfg).map_err(to_py)?;
    let report = sep.report.to_string();
    let [a, b] = sep.outputs;
    Ok((a, b, report))
}

/// Trains a fresh model on simulated data; returns the model and per-step losses.
#[pyfunction]
#[pyo3(signature = (seed, steps, num_samples = 100, batch_size = 4, crop_frames = 200))]
fn train_simulated(seed: u64, steps: u64, num_samples: usize, batch_size: usize, crop_frames: usize) -> PyResult<(Model, Vec<f64>)> {
    let data = SimulatedDataset::new(DatasetConfig { num_samples, ..DatasetConfig::default() }, seed).map_err(to_py)?;
    let cfg = TrainConfig { max_steps: steps, batch_size, crop_frames, ..TrainConfig::default() };
    let (params, log) = train::<f32>(&data, &cfg, seed, &TrainOutput::default()).map_err(to_py)?;
    Ok((Model { params }, log.iter().map(|e| e.loss).collect()))
}

#[pyfunction]
fn si_snr(estimate: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    si_snr_db(&estimate, &reference).map_err(to_py)
}

/// Mean SI-SNR of two estimates under the better of the two pairings.
#[pyfunction]
fn best_perm_si_snr(estimates: (Vec<f64>, Vec<f64>), references: (Vec<f64>, Vec<f64>)) -> PyResult<(f64, [usize; 2])> {
    best_perm([&estimates.0, &estimates.1], [&references.0, &references.1]).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "vararray")]
fn vararray_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Geometry>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(builtin_geometries, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(separate, m)?)?;
    m.add_function(wrap_pyfunction!(train_simulated, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr, m)?)?;
    m.add_function(wrap_pyfunction!(best_perm_si_snr, m)?)?;
    Ok(())
}
