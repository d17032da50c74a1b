use std::fs;
use std::path::Path;
use std::process::Command;

use vararray::model::checkpoint::Checkpoint;

fn run(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_vararray")).args(args).output().unwrap();
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SIM_CONFIG: &str = "seed = 11\n[dataset]\nnum_samples = 3\ngeometries = [\"ms3\", \"ami4\"]\n[dataset.scene]\nduration_s = 0.5\nmax_order = 1\n";

const TRAIN_CONFIG: &str = "seed = 4\n[train]\nbatch_size = 2\ncrop_frames = 20\nmax_steps = 4\nepochs = 3\nlog_every = 1\nmin_channels = 2\nmax_channels = 3\n\
[train.model]\nbins = 129\ndim = 8\nheads = 2\nkernel = 5\nlayers = 1\n";

fn simulate(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("sim.toml");
    fs::write(&cfg, SIM_CONFIG).unwrap();
    let data = dir.join("data");
    assert_eq!(run(&["simulate", "--config", p(&cfg), "--out", p(&data)]), 0);
    data
}

#[test]
fn simulate_is_repeatable_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let cfg = dir.path().join("sim.toml");
    let again = dir.path().join("again");
    assert_eq!(run(&["simulate", "--config", p(&cfg), "--out", p(&again)]), 0);
    for rel in ["manifest.jsonl", "config.toml", "s000001/mixture.wav", "s000002/speech0.wav"] {
        assert_eq!(fs::read(data.join(rel)).unwrap(), fs::read(again.join(rel)).unwrap(), "{rel}");
    }
    let resolved = fs::read_to_string(data.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 11"));
    assert!(resolved.contains("absorption"));
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, SIM_CONFIG).unwrap();
    let out = dir.path().join("data");
    assert_eq!(run(&["simulate", "--config", p(&cfg), "--out", p(&out), "--num-samples", "1", "--seed", "3"]), 0);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 3"));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TRAIN_CONFIG).unwrap();
    let full = dir.path().join("full");
    assert_eq!(run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&full)]), 0);
    let half = dir.path().join("half");
    assert_eq!(run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&half), "--max-steps", "2"]), 0);
    let resumed = dir.path().join("resumed");
    let ckpt = half.join("model.ckpt");
    assert_eq!(run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&resumed), "--resume", p(&ckpt)]), 0);
    let a = Checkpoint::load(&full.join("model.ckpt")).unwrap();
    let b = Checkpoint::load(&resumed.join("model.ckpt")).unwrap();
    assert_eq!(a.step, 4);
    assert_eq!(a.arrays, b.arrays);
    assert!(fs::read_to_string(full.join("train.log")).unwrap().starts_with("# seed=4"));
}

#[test]
fn separate_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TRAIN_CONFIG.replace("max_steps = 4", "max_steps = 1")).unwrap();
    let model_dir = dir.path().join("model");
    assert_eq!(run(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&model_dir)]), 0);
    let model = model_dir.join("model.ckpt");
    let mut tables = Vec::new();
    for attempt in 0..2 {
        let est = dir.path().join(format!("est{attempt}"));
        for id in ["s000000", "s000001"] {
            let input = data.join(id).join("mixture.wav");
            assert_eq!(run(&["separate", "--model", p(&model), "--in", p(&input), "--out", p(&est.join(id))]), 0);
            assert!(est.join(id).join("report.tsv").exists());
            assert!(est.join(id).join("config.toml").exists());
        }
        let tsv = dir.path().join(format!("m{attempt}.tsv"));
        assert_eq!(run(&["eval", "--est", p(&est), "--ref", p(&data), "--out", p(&tsv)]), 0);
        tables.push(fs::read_to_string(&tsv).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("file\tsi_snr_db"));
    assert!(lines[3].starts_with("mean\t"));
}

#[test]
fn eval_of_references_against_themselves_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let est = dir.path().join("est");
    let id = "s000000";
    fs::create_dir_all(est.join(id)).unwrap();
    fs::copy(data.join(id).join("speech0.wav"), est.join(id).join("output0.wav")).unwrap();
    fs::copy(data.join(id).join("speech1.wav"), est.join(id).join("output1.wav")).unwrap();
    let tsv = dir.path().join("m.tsv");
    assert_eq!(run(&["eval", "--est", p(&est), "--ref", p(&data), "--out", p(&tsv)]), 0);
    let table = fs::read_to_string(&tsv).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], id);
    assert_eq!(row[2], "01");
    // Only the epsilon in the residual limits the score.
    assert!(row[1].parse::<f64>().unwrap() > 60.0);
    assert!(dir.path().join("m.config.toml").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nnum_sampels = 3\n").unwrap();
    assert_eq!(run(&["simulate", "--config", p(&bad), "--out", p(&dir.path().join("x"))]), 1);
    let missing = dir.path().join("missing.wav");
    let model = dir.path().join("missing.ckpt");
    assert_eq!(run(&["separate", "--model", p(&model), "--in", p(&missing), "--out", p(&dir.path().join("y"))]), 2);
}
