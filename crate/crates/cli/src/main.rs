//! `hoiu`: generate the synthetic benchmark, train, evaluate, run ablations
//! and self-checks.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use hoiu::evaluator::ablation::{
    component_variants, dropout_variants, lambda_variants, run_suite, EvalConfig, DEFAULT_PASSES,
    LAMBDA_GRID,
};
use hoiu::evaluator::plot::{calibration_svg, pr_svg};
use hoiu::evaluator::{infer_all, rows_csv, AblationRow, EvalReport, EvalSet, Selection, DEFAULT_TOP_K};
use hoiu::model::{read_checkpoint, Model, ModelConfig};
use hoiu::scenegen::{read_jsonl, write_jsonl, Benchmark, BenchmarkSpec, DifficultyProfile, SceneRecord};
use hoiu::seeds::{derive, stream};
use hoiu::selfcheck::{run_all, CheckOptions};
use hoiu::trainer::{fit, resume, FitOutput, TrainConfig, TrainError, TrainState};

use manifest::ManifestBuilder;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            TrainError::Io(e) => CliError::Data(e.to_string()),
            TrainError::Checkpoint(e) => CliError::Data(e.to_string()),
            other => CliError::Verification(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "hoiu", version, about = "Uncertainty-aware HOI detection on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test scene files.
    Gen {
        #[arg(long, default_value_t = BenchmarkSpec::default().seed)]
        seed: u64,
        /// Number of training scenes.
        #[arg(long, default_value_t = BenchmarkSpec::default().train)]
        scenes: usize,
        #[arg(long, default_value_t = BenchmarkSpec::default().val)]
        val: usize,
        #[arg(long, default_value_t = BenchmarkSpec::default().test)]
        test: usize,
        /// `default`, `overt-only`, or a JSON file with a difficulty profile.
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file `{ "model": {...}, "train": {...} }`; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`; also seeds parameter initialisation.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/last.ckpt` if present.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Adaptive)]
        mode: Mode,
        /// Fixed threshold; the best of the declared grid when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = DEFAULT_PASSES)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a family of variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, loss-identity, matching and determinism checks.
    Check {
        /// Fewer cases, for smoke testing.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Fixed,
    Adaptive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Components,
    Dropout,
    Lambda,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

fn load_split(dir: &Path, split: &str) -> Result<(u64, Vec<SceneRecord>), CliError> {
    let path = split_path(dir, split);
    if !path.exists() {
        return Err(CliError::Usage(format!("{} not found (run `hoiu gen` first)", path.display())));
    }
    let (header, records) = read_jsonl(&path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok((header.dataset_seed, records))
}

fn load_benchmark(dir: &Path) -> Result<Benchmark, CliError> {
    let path = dir.join("benchmark.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let spec: BenchmarkSpec = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Benchmark {
        train: load_split(dir, "train")?.1,
        val: load_split(dir, "val")?.1,
        test: load_split(dir, "test")?.1,
        spec,
    })
}

fn parse_profile(arg: &str) -> Result<DifficultyProfile, CliError> {
    let profile = match arg {
        "default" => DifficultyProfile::default(),
        "overt-only" => DifficultyProfile::overt_only(),
        path => {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?
        }
    };
    profile.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(profile)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_gen(seed: u64, scenes: usize, val: usize, test: usize, profile: &str, out: &Path) -> Result<(), CliError> {
    let spec = BenchmarkSpec {
        seed,
        train: scenes,
        val,
        test,
        profile: parse_profile(profile)?,
        ..BenchmarkSpec::default()
    };
    if scenes == 0 || val == 0 || test == 0 {
        return Err(CliError::Usage("every split needs at least one scene".into()));
    }
    let bench = Benchmark::generate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("gen");
    m.config(&spec)?;
    m.dataset_seed(seed);
    for (split, records) in SPLITS.iter().zip([&bench.train, &bench.val, &bench.test]) {
        let path = split_path(out, split);
        write_jsonl(&path, seed, &spec.profile, records).map_err(|e| CliError::Data(e.to_string()))?;
        m.record(&path)?;
    }
    m.write(&out.join("benchmark.json"), &json(&spec)?)?;
    m.finish(out)?;
    println!(
        "wrote {} / {} / {} scenes to {}",
        bench.train.len(),
        bench.val.len(),
        bench.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, seed: Option<u64>, resume_run: bool, out: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (dataset_seed, train) = load_split(data, "train")?;
    let (_, val) = load_split(data, "val")?;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("train");
    m.config(&cfg)?;
    m.dataset_seed(dataset_seed);

    let resumed = if resume_run { resume(out)? } else { None };
    let mut state = match resumed {
        Some(s) => {
            println!("resuming at step {}", s.opt.step);
            s
        }
        None => {
            let model = Model::new(cfg.model.clone(), derive(cfg.train.seed, &[stream::INIT]))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            TrainState::new(model)
        }
    };
    let fo = FitOutput { dir: out.to_path_buf() };
    fit(&mut state, &train, &val, &cfg.train, Some(&fo))?;
    for p in [fo.last(), fo.final_checkpoint(), fo.train_csv(), fo.val_csv()] {
        m.record(&p)?;
    }
    m.checkpoint(&fo.final_checkpoint())?;
    m.write(&out.join("config.json"), &json(&cfg)?)?;
    m.finish(out)?;
    if let (Some(a), Some(b)) = (state.log.initial_val(), state.log.final_val()) {
        println!("validation loss {a:.4} -> {b:.4} after {} steps", state.opt.step);
    }
    Ok(())
}

fn write_report(m: &mut ManifestBuilder, out: &Path, report: &EvalReport) -> Result<(), CliError> {
    m.write(&out.join("report.json"), report.to_json().map_err(|e| CliError::Data(e.to_string()))?.as_bytes())?;
    m.write(&out.join("report.csv"), report.to_csv().as_bytes())?;
    m.write(&out.join("calibration.csv"), report.calibration_csv().as_bytes())?;
    m.write(&out.join("pr.svg"), pr_svg(report).as_bytes())?;
    m.write(&out.join("calibration.svg"), calibration_svg(report).as_bytes())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    mode: Mode,
    threshold: Option<f64>,
    top_k: usize,
    passes: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Usage("threshold must lie in [0, 1]".into()));
        }
    }
    if top_k == 0 {
        return Err(CliError::Usage("top-k must be positive".into()));
    }
    let ckpt = read_checkpoint(checkpoint).map_err(|e| CliError::Data(e.to_string()))?;
    let model = Model::from_checkpoint(&ckpt).map_err(|e| CliError::Data(e.to_string()))?;
    let (dataset_seed, test) = load_split(data, "test")?;
    let spec: Option<BenchmarkSpec> = fs::read_to_string(data.join("benchmark.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let rare = spec.map(|s| s.profile.rare_verbs()).unwrap_or_else(|| DifficultyProfile::default().rare_verbs());
    create_dir(out)?;
    let mut m = ManifestBuilder::new("eval");
    m.config(&serde_json::json!({"mode": format!("{mode:?}"), "threshold": threshold, "top_k": top_k, "passes": passes, "seed": seed}))?;
    m.dataset_seed(dataset_seed);
    m.checkpoint(checkpoint)?;

    let preds = infer_all(&model, &test, passes, seed).map_err(|e| CliError::Data(e.to_string()))?;
    let set = EvalSet::new(&preds, &test, rare);
    let report = match (mode, threshold) {
        (Mode::Fixed, Some(t)) => set.evaluate(Selection::Fixed { threshold: t }),
        (Mode::Fixed, None) => set.best_fixed().map(|(_, r)| r),
        (Mode::Adaptive, _) => set.evaluate(Selection::Adaptive { top_k }),
    }
    .map_err(|e| CliError::Data(e.to_string()))?;
    write_report(&mut m, out, &report)?;
    m.finish(out)?;
    println!("{}: mAP {:.4} over {} scenes ({} detections)", report.selection, report.map_full, report.scenes, report.detections);
    Ok(())
}

/// Mean of every metric per label, in first-seen label order.
fn summary_csv(rows: &[AblationRow]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    let mut keys: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
        for (k, v) in &r.metrics {
            if !keys.contains(&k.as_str()) {
                keys.push(k);
            }
            let e = sums.entry(&r.label).or_default().entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    keys.sort_unstable();
    let mut s = String::from("label,runs");
    for k in &keys {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    for l in labels {
        let runs = rows.iter().filter(|r| r.label == l).count();
        s.push_str(&format!("{l},{runs}"));
        for k in &keys {
            let v = sums[l].get(k).map_or(String::new(), |(t, n)| (t / *n as f64).to_string());
            s.push(',');
            s.push_str(&v);
        }
        s.push('\n');
    }
    s
}

fn cmd_ablate(data: &Path, config: Option<&Path>, suite: Suite, seeds: &[u64], out: &Path) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let cfg = load_config(config)?;
    let bench = load_benchmark(data)?;
    let variants = match suite {
        Suite::Components => component_variants(),
        Suite::Dropout => dropout_variants(),
        Suite::Lambda => lambda_variants(&LAMBDA_GRID),
    };
    create_dir(out)?;
    let mut m = ManifestBuilder::new(&format!("ablate {suite:?}").to_lowercase());
    m.config(&cfg)?;
    m.dataset_seed(bench.spec.seed);
    let eval = EvalConfig::default();
    let rows = run_suite(&bench, &cfg.model, &cfg.train, &eval, &variants, seeds, |o| {
        println!(
            "{:<28} seed {:>3}  mAP {:.4}",
            o.variant.label,
            o.seed,
            o.row.metrics.get("map").copied().unwrap_or(f64::NAN)
        );
    })
    .map_err(|e| CliError::Verification(e.to_string()))?;
    m.write(&out.join("rows.csv"), rows_csv(&rows).as_bytes())?;
    m.write(&out.join("rows.json"), &json(&rows)?)?;
    m.write(&out.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    m.finish(out)?;
    Ok(())
}

fn cmd_check(quick: bool) -> Result<(), CliError> {
    let opts = if quick {
        CheckOptions {
            op_seeds: 10,
            model_cases: 10,
            matching_trials: 100,
        }
    } else {
        CheckOptions::default()
    };
    let results = run_all(&opts);
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            seed,
            scenes,
            val,
            test,
            profile,
            out,
        } => cmd_gen(seed, scenes, val, test, &profile, &out),
        Command::Train {
            data,
            config,
            seed,
            resume,
            out,
        } => cmd_train(&data, config.as_deref(), seed, resume, &out),
        Command::Eval {
            data,
            checkpoint,
            mode,
            threshold,
            top_k,
            passes,
            seed,
            out,
        } => cmd_eval(&data, &checkpoint, mode, threshold, top_k, passes, seed, &out),
        Command::Ablate {
            data,
            config,
            suite,
            seeds,
            out,
        } => cmd_ablate(&data, config.as_deref(), suite, &seeds, &out),
        Command::Check { quick } => cmd_check(quick),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
