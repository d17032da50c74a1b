//! Command-line front end: `simulate`, `train`, `separate` and `eval`.
//!
//! Each subcommand resolves its configuration as flags over file values over
//! defaults, then writes the resolved TOML next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::pipeline::{best_perm_si_snr, separate_continuous, si_snr, CssConfig, Separation};
use crate::signal::{read_wav, write_wav, MultichannelWaveform, SampleFormat};
use crate::simulator::{make_dataset, DatasetConfig, DiskDataset};
use crate::training::{train_from, TrainConfig, TrainOutput, TrainState, TRAIN_LOG};

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const REPORT_FILE: &str = "report.tsv";
pub const OUTPUT_NAMES: [&str; 2] = ["output0.wav", "output1.wav"];
pub const SPEECH_NAMES: [&str; 2] = ["speech0.wav", "speech1.wav"];
pub const MIXTURE_NAME: &str = "mixture.wav";

#[derive(Debug, Parser)]
#[command(name = "vararray", version, about = "Geometry-agnostic continuous speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a multichannel training or evaluation set.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// Train a mask estimator on a simulated dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Separate a multichannel recording into two output streams.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score separated outputs against references with best-permutation SI-SNR.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateRun {
    pub seed: u64,
    pub dataset: DatasetConfig,
}

impl Default for SimulateRun {
    fn default() -> Self {
        Self { seed: 0, dataset: DatasetConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub seed: u64,
    pub precision: Precision,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparateRun {
    pub css: CssConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub est: PathBuf,
    pub reference: PathBuf,
}

/// Parses a TOML config file, rejecting unknown keys.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_resolved<C: Serialize>(path: &Path, cfg: &C) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn check_seed(seed: u64) -> Result<()> {
    // TOML integers are signed 64-bit.
    if seed > i64::MAX as u64 {
        return Err(Error::Config(format!("seed {seed} exceeds {}", i64::MAX)));
    }
    Ok(())
}

/// Runs one command line and returns the process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out, seed, num_samples } => {
            let mut run: SimulateRun = load_config(config.as_deref())?;
            if let Some(s) = seed {
                run.seed = s;
            }
            if let Some(n) = num_samples {
                run.dataset.num_samples = n;
            }
            simulate(&run, &out)
        }
        Command::Train { config, data, out, resume, seed, max_steps, epochs, precision } => {
            let mut run: TrainRun = load_config(config.as_deref())?;
            if let Some(s) = seed {
                run.seed = s;
            }
            if let Some(n) = max_steps {
                run.train.max_steps = n;
            }
            if let Some(n) = epochs {
                run.train.epochs = n;
            }
            if let Some(p) = precision {
                run.precision = p;
            }
            train(&run, &data, &out, resume.as_deref())
        }
        Command::Separate { model, input, out, config } => {
            let run: SeparateRun = load_config(config.as_deref())?;
            separate(&run, &model, &input, &out).map(|_| ())
        }
        Command::Eval { est, reference, out } => evaluate(&EvalRun { est, reference }, &out).map(|_| ()),
    }
}

pub fn simulate(run: &SimulateRun, out: &Path) -> Result<()> {
    check_seed(run.seed)?;
    run.dataset.validate()?;
    write_resolved(&out.join(RESOLVED_CONFIG), run)?;
    let records = make_dataset(&run.dataset, run.seed, out)?;
    println!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

pub fn train(run: &TrainRun, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    check_seed(run.seed)?;
    run.train.validate()?;
    let dataset = DiskDataset::open(data)?;
    fs::create_dir_all(out)?;
    write_resolved(&out.join(RESOLVED_CONFIG), run)?;
    let meta = serde_json::json!({ "precision": run.precision, "seed": run.seed, "train": run.train });
    let output = TrainOutput { dir: Some(out.to_path_buf()), meta };
    let resumed = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.seed != run.seed {
                return Err(Error::Config(format!("checkpoint seed {} differs from configured seed {}", ckpt.seed, run.seed)));
            }
            Some(ckpt)
        }
        None => {
            // A fresh run owns its log.
            let log = out.join(TRAIN_LOG);
            if log.exists() {
                fs::remove_file(log)?;
            }
            None
        }
    };
    let last = match run.precision {
        Precision::F32 => train_typed::<f32>(run, &dataset, resumed.as_ref(), &output)?,
        Precision::F64 => train_typed::<f64>(run, &dataset, resumed.as_ref(), &output)?,
    };
    println!("trained to step {} (last loss {last:.6e})", run.train.total_steps(crate::training::Dataset::len(&dataset)));
    Ok(())
}

fn train_typed<T: crate::model::Real>(
    run: &TrainRun,
    dataset: &DiskDataset,
    resume: Option<&Checkpoint>,
    output: &TrainOutput,
) -> Result<f64> {
    let state = match resume {
        Some(ckpt) => TrainState::<T>::from_checkpoint(ckpt)?,
        None => TrainState::<T>::init(run.train.model, run.seed)?,
    };
    let (_, log) = train_from(dataset, &run.train, run.seed, state, output)?;
    Ok(log.last().map(|e| e.loss).unwrap_or(f64::NAN))
}

fn checkpoint_precision(ckpt: &Checkpoint) -> Precision {
    ckpt.meta
        .get("precision")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

pub fn separate(run: &SeparateRun, model: &Path, input: &Path, out: &Path) -> Result<Separation> {
    run.css.validate()?;
    let ckpt = Checkpoint::load(model)?;
    let wave = read_wav(input)?;
    let sep = match checkpoint_precision(&ckpt) {
        Precision::F32 => separate_continuous(&wave, &ckpt.params::<f32>()?, &run.css)?,
        Precision::F64 => separate_continuous(&wave, &ckpt.params::<f64>()?, &run.css)?,
    };
    if sep.outputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("separated output".into()));
    }
    fs::create_dir_all(out)?;
    write_resolved(&out.join(RESOLVED_CONFIG), run)?;
    for (name, signal) in OUTPUT_NAMES.iter().zip(&sep.outputs) {
        write_wav(&out.join(name), &MultichannelWaveform::mono(signal.clone(), sep.sample_rate)?, SampleFormat::Float32)?;
    }
    fs::write(out.join(REPORT_FILE), sep.report.to_string())?;
    println!("separated {} windows, {} fallback bins", sep.report.windows.len(), sep.report.total_fallbacks());
    Ok(sep)
}

/// One scored item of an `eval` run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub si_snr_db: f64,
    /// Output index matched to each active reference.
    pub perm: Vec<usize>,
    /// Same score for the unprocessed reference channel, when a mixture is present.
    pub baseline_db: Option<f64>,
}

impl EvalRow {
    pub fn improvement_db(&self) -> Option<f64> {
        self.baseline_db.map(|b| self.si_snr_db - b)
    }
}

fn mono(path: &Path) -> Result<Vec<f64>> {
    Ok(read_wav(path)?.channel(0).to_vec())
}

/// Best-permutation SI-SNR over the references that are not silent.
pub fn score_active(ests: [&[f64]; 2], refs: [&[f64]; 2]) -> Result<(f64, Vec<usize>)> {
    let active: Vec<usize> = (0..2).filter(|&i| refs[i].iter().any(|&v| v != 0.0)).collect();
    match active.as_slice() {
        [_, _] => best_perm_si_snr(ests, refs).map(|(v, p)| (v, p.to_vec())),
        [r] => {
            let a = si_snr(ests[0], refs[*r])?;
            let b = si_snr(ests[1], refs[*r])?;
            Ok(if b > a { (b, vec![1]) } else { (a, vec![0]) })
        }
        _ => Err(Error::Format("both references are silent".into())),
    }
}

fn eval_item(name: String, est: &Path, reference: &Path) -> Result<EvalRow> {
    let ests = [mono(&est.join(OUTPUT_NAMES[0]))?, mono(&est.join(OUTPUT_NAMES[1]))?];
    let refs = [mono(&reference.join(SPEECH_NAMES[0]))?, mono(&reference.join(SPEECH_NAMES[1]))?];
    let (si_snr_db, perm) = score_active([&ests[0], &ests[1]], [&refs[0], &refs[1]])?;
    let mixture = reference.join(MIXTURE_NAME);
    let baseline_db = if mixture.exists() {
        let mix = mono(&mixture)?;
        Some(score_active([&mix, &mix], [&refs[0], &refs[1]])?.0)
    } else {
        None
    };
    Ok(EvalRow { name, si_snr_db, perm, baseline_db })
}

/// Items are either the directories themselves or their matching subdirectories.
fn eval_items(est: &Path, reference: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if est.join(OUTPUT_NAMES[0]).exists() {
        let name = est.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| ".".into());
        return Ok(vec![(name, est.to_path_buf(), reference.to_path_buf())]);
    }
    let mut items = Vec::new();
    for entry in fs::read_dir(est)? {
        let path = entry?.path();
        if path.is_dir() && path.join(OUTPUT_NAMES[0]).exists() {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let r = reference.join(&name);
            if !r.is_dir() {
                return Err(Error::Format(format!("no reference directory for {name}")));
            }
            items.push((name, path, r));
        }
    }
    if items.is_empty() {
        return Err(Error::Format(format!("no separated outputs under {}", est.display())));
    }
    items.sort();
    Ok(items)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "nan".into())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(run: &EvalRun, out: &Path) -> Result<Vec<EvalRow>> {
    let rows = eval_items(&run.est, &run.reference)?
        .into_iter()
        .map(|(name, e, r)| eval_item(name, &e, &r))
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from("file\tsi_snr_db\tperm\tbaseline_db\timprovement_db\n");
    for row in &rows {
        let perm: String = row.perm.iter().map(|p| p.to_string()).collect();
        table.push_str(&format!(
            "{}\t{:.4}\t{perm}\t{}\t{}\n",
            row.name,
            row.si_snr_db,
            fmt_opt(row.baseline_db),
            fmt_opt(row.improvement_db())
        ));
    }
    table.push_str(&format!(
        "mean\t{}\t-\t{}\t{}\n",
        fmt_opt(mean(rows.iter().map(|r| r.si_snr_db))),
        fmt_opt(mean(rows.iter().filter_map(|r| r.baseline_db))),
        fmt_opt(mean(rows.iter().filter_map(|r| r.improvement_db())))
    ));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(out, table)?;
    write_resolved(&out.with_extension("config.toml"), run)?;
    Ok(rows)
}
