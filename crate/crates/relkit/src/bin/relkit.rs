//! Command-line front end: generate corpora, train and evaluate the
//! presets, merge run metrics into plot-ready tables, and run the
//! invariant suite. Every verb is deterministic given its seed; re-runs
//! overwrite their artifacts with identical content (wall-clock columns
//! aside).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use relkit::datasets::io::{read_dataset, write_dataset};
use relkit::datasets::physics::{gen_physics_dataset, PhysicsTask, N_BALLS, N_FRAMES};
use relkit::datasets::soc::{gen_soc_dataset, QUESTIONS_PER_SCENE};
use relkit::datasets::{Dataset, Split};
use relkit::error::{Error, Result};
use relkit::trainer::{
    build_baseline_mlp, build_model, evaluate, oracle_report, train, DataSource, EvalReport,
    ModelConfig, Task, TrainOptions, SOC_CATEGORIES,
};
use relkit::{checkpoint, selftest};

#[derive(Parser)]
#[command(
    name = "relkit",
    version,
    about = "Relation-network toolkit: dataset generation, training, evaluation, reporting"
)]
struct Cli {
    /// Flat key=value file supplying defaults for this verb's flags
    /// (explicit flags win).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an image question-answering corpus file.
    GenSoc(GenSocArgs),
    /// Generate a ball-trajectory corpus file for one physics task.
    GenPhysics(GenPhysicsArgs),
    /// Train a preset on a corpus file; writes checkpoint + metrics CSV.
    Train(TrainArgs),
    /// Score a checkpoint (or the stored answers) on a corpus file.
    Eval(EvalArgs),
    /// Merge training runs into a category/model/accuracy table.
    Report(ReportArgs),
    /// Run the invariant suite; one line per check.
    Selftest,
}

#[derive(Args)]
struct GenSocArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Corpus split tag: train or test.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenPhysicsArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Supervision baked into the file: connections or count.
    #[arg(long)]
    task: Option<PhysicsTask>,
    #[arg(long)]
    balls: Option<usize>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name; append -mlp for the parameter-matched baseline.
    #[arg(long)]
    preset: Option<String>,
    /// Training corpus file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out corpus for periodic evaluation; defaults to the
    /// training corpus (with a warning).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory for checkpoint.ckpt and metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the corpus against its own stored answers instead of a
    /// checkpoint.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files from training runs; the file stem names the
    /// model in the output table.
    #[arg(long, num_args = 1.., value_name = "FILE")]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let overlay = Overlay::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSoc(args) => gen_soc(args, &overlay),
        Command::GenPhysics(args) => gen_physics(args, &overlay),
        Command::Train(args) => run_train(args, &overlay),
        Command::Eval(args) => run_eval(args, &overlay),
        Command::Report(args) => run_report(args, &overlay),
        Command::Selftest => run_selftest(),
    }
}

// --------------------------------------------------------------------------
// Config-file overlay

/// Defaults read from `--config`: flat `key=value` lines, `#` comments.
/// Keys must belong to the invoked verb; anything else is rejected
/// before side effects.
struct Overlay {
    map: HashMap<String, String>,
}

impl Overlay {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Config(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Overlay { map })
    }

    fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "config key {key:?} does not apply to this command (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Flag value, else config value, else `None`.
    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key}={raw:?} failed to parse"))
            }),
        }
    }

    fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required flag --{key}")))
    }

    /// Seed resolution order: flag, config, RELKIT_SEED, 0.
    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(seed) = self.get("seed", flag)? {
            return Ok(seed);
        }
        match std::env::var("RELKIT_SEED") {
            Err(_) => Ok(0),
            Ok(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("RELKIT_SEED={raw:?} is not a valid seed"))
            }),
        }
    }
}

// --------------------------------------------------------------------------
// Generation verbs

fn gen_soc(args: GenSocArgs, overlay: &Overlay) -> Result<()> {
    overlay.reject_unknown(&["seed", "count", "split", "out"])?;
    let seed = overlay.seed(args.seed)?;
    let count: usize = overlay.require("count", args.count)?;
    let split = overlay.get("split", args.split)?.unwrap_or(Split::Train);
    let out: PathBuf = overlay.require("out", args.out)?;

    if count == 0 {
        eprintln!("warning: --count 0 writes a valid but empty corpus");
    }
    let ds = Dataset::Soc(gen_soc_dataset(seed, split, count)?);
    write_dataset(&ds, &out)?;
    println!(
        "soc seed={seed} split={} scenes={count} questions={} sha256={}",
        split.name(),
        count * QUESTIONS_PER_SCENE,
        file_hash(&out)?
    );
    Ok(())
}

fn gen_physics(args: GenPhysicsArgs, overlay: &Overlay) -> Result<()> {
    overlay.reject_unknown(&["seed", "count", "task", "balls", "split", "out"])?;
    let seed = overlay.seed(args.seed)?;
    let count: usize = overlay.require("count", args.count)?;
    let task: PhysicsTask = overlay.require("task", args.task)?;
    let balls = overlay.get("balls", args.balls)?.unwrap_or(N_BALLS);
    let split = overlay.get("split", args.split)?.unwrap_or(Split::Train);
    let out: PathBuf = overlay.require("out", args.out)?;

    if !(2..=255).contains(&balls) {
        return Err(Error::Config(format!("--balls {balls} out of range 2..=255")));
    }
    if count == 0 {
        eprintln!("warning: --count 0 writes a valid but empty corpus");
    }
    let ds = Dataset::Physics {
        data: gen_physics_dataset(seed, split, count, balls, N_FRAMES),
        task,
    };
    write_dataset(&ds, &out)?;
    println!(
        "physics seed={seed} split={} task={} balls={balls} frames={N_FRAMES} scenes={count} sha256={}",
        split.name(),
        task.name(),
        file_hash(&out)?
    );
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// --------------------------------------------------------------------------
// Model/corpus pairing

fn source_of(ds: &Dataset) -> DataSource<'_> {
    match ds {
        Dataset::Soc(data) => DataSource::Soc(data),
        Dataset::Physics { data, task } => DataSource::Physics { data, task: *task },
    }
}

fn trainer_task(task: PhysicsTask) -> Task {
    match task {
        PhysicsTask::InferConnections => Task::PhysicsPairs,
        PhysicsTask::CountSystems => Task::PhysicsCount,
    }
}

/// Build the model a preset name describes, specialized to the corpus
/// in hand. `-mlp` suffixes select the parameter-matched baseline.
fn config_for(preset: &str, ds: &Dataset) -> Result<ModelConfig> {
    let (base, mlp) = match preset.strip_suffix("-mlp") {
        Some(base) => (base, true),
        None => (preset, false),
    };
    let config = build_model(base)?;
    let config = match (config.task, ds) {
        (Task::Soc, Dataset::Soc(_)) => config,
        (Task::PhysicsPairs, Dataset::Physics { data, task }) => {
            config.with_physics_task(trainer_task(*task), data.n_balls)?
        }
        (task, _) => {
            return Err(Error::Config(format!(
                "preset {preset:?} expects a {} corpus, which this file is not",
                task.name()
            )))
        }
    };
    if !mlp {
        return Ok(config);
    }
    let n_objects = match ds {
        Dataset::Soc(_) => {
            let cnn = config.cnn.as_ref().expect("image preset has a tower");
            let side = cnn.output_side(config.input_side)?;
            side * side
        }
        Dataset::Physics { data, .. } => data.n_balls,
    };
    build_baseline_mlp(&config, n_objects)
}

// --------------------------------------------------------------------------
// Train

fn run_train(args: TrainArgs, overlay: &Overlay) -> Result<()> {
    overlay.reject_unknown(&[
        "preset", "data", "eval-data", "seed", "workers", "steps", "out",
    ])?;
    let preset: String = overlay.require("preset", args.preset)?;
    let data_path: PathBuf = overlay.require("data", args.data)?;
    let eval_path = overlay.get("eval-data", args.eval_data)?;
    let seed = overlay.seed(args.seed)?;
    let workers = overlay.get("workers", args.workers)?.unwrap_or(1);
    let steps = overlay.get("steps", args.steps)?.unwrap_or(30_000);
    let out: PathBuf = overlay.require("out", args.out)?;

    let ds = read_dataset(&data_path)?;
    let config = config_for(&preset, &ds)?;
    let eval_ds = match &eval_path {
        Some(path) => Some(read_dataset(path)?),
        None => {
            eprintln!("warning: no --eval-data; evaluating on the training corpus");
            None
        }
    };

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let metrics_path = out.join("metrics.csv");
    let options = TrainOptions {
        seed,
        workers,
        max_steps: steps,
        metrics_path: Some(metrics_path.clone()),
        ..TrainOptions::default()
    };

    let data_src = source_of(&ds);
    let eval_src = eval_ds.as_ref().map(source_of);
    let outcome = train::<f64>(
        &config,
        &data_src,
        Some(eval_src.as_ref().unwrap_or(&data_src)),
        &options,
        None,
    )?;

    let ckpt_path = out.join("checkpoint.ckpt");
    checkpoint::save_checkpoint(&ckpt_path, &outcome.params, Some(&outcome.adam))?;

    let final_step = outcome.adam.t;
    let accuracy = outcome
        .final_eval
        .as_ref()
        .map(|r| r.overall())
        .unwrap_or(f64::NAN);
    println!(
        "trained preset={preset} steps={final_step} early_stop={} accuracy={accuracy:.4}",
        outcome.stopped_early
    );
    println!("wrote {} and {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

// --------------------------------------------------------------------------
// Eval

fn run_eval(args: EvalArgs, overlay: &Overlay) -> Result<()> {
    overlay.reject_unknown(&["checkpoint", "data"])?;
    let data_path: PathBuf = overlay.require("data", args.data)?;
    let ds = read_dataset(&data_path)?;
    let src = source_of(&ds);

    let report = if args.oracle {
        oracle_report(&src)?
    } else {
        let ckpt: PathBuf = overlay.require("checkpoint", args.checkpoint)?;
        let (config, params) = load_matching_model(&ckpt, &ds)?;
        evaluate(&config, &params, &src)?
    };
    print!("{}", report_csv(&report));
    Ok(())
}

/// Try every preset compatible with the corpus kind until the
/// checkpoint's names and shapes fit one of them. Width differences
/// between presets make the fit unique.
fn load_matching_model(
    ckpt: &Path,
    ds: &Dataset,
) -> Result<(ModelConfig, relkit::params::ParamSet<f64>)> {
    let bases: &[&str] = match ds {
        Dataset::Soc(_) => &["soc", "soc-small"],
        Dataset::Physics { .. } => &["physics", "physics-small"],
    };
    let mut tried = Vec::new();
    for base in bases {
        for suffix in ["", "-mlp"] {
            let name = format!("{base}{suffix}");
            let config = config_for(&name, ds)?;
            let mut params = config.init_params::<f64>(0)?;
            match checkpoint::load_checkpoint(ckpt, &mut params) {
                Ok(_) => return Ok((config, params)),
                Err(e @ Error::Io { .. }) | Err(e @ Error::Format { .. }) => return Err(e),
                Err(_) => tried.push(name),
            }
        }
    }
    Err(Error::Config(format!(
        "checkpoint {} does not match any preset for this corpus (tried {})",
        ckpt.display(),
        tried.join(", ")
    )))
}

/// Two-line CSV: the task's metric columns, then their values.
fn report_csv(report: &EvalReport) -> String {
    let cols = EvalReport::columns(report.task);
    let vals = report.values();
    let mut out = String::new();
    let _ = writeln!(out, "{}", cols.join(","));
    let row: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(out, "{}", row.join(","));
    out
}

// --------------------------------------------------------------------------
// Report

/// Rollup rows for the category/model/accuracy table, keyed by the
/// metric columns a run's CSV carries.
fn rollups(eval_columns: &[String]) -> Result<Vec<(&'static str, usize)>> {
    let soc: Vec<&str> = std::iter::once("accuracy")
        .chain(SOC_CATEGORIES)
        .collect();
    if eval_columns == soc.as_slice() {
        // Overall, the two branches, and the hardest subtype: the
        // count questions whose answers live in a different range from
        // every binary attribute question.
        return Ok(vec![
            ("overall", 0),
            ("nonrelational", 1),
            ("relational", 2),
            ("rel-count", 8),
        ]);
    }
    if eval_columns == ["accuracy", "pair"] {
        return Ok(vec![("scene", 0), ("pair", 1)]);
    }
    if eval_columns == ["accuracy"] {
        return Ok(vec![("overall", 0)]);
    }
    Err(Error::Config(format!(
        "unrecognized metrics column layout: {eval_columns:?}"
    )))
}

fn run_report(args: ReportArgs, overlay: &Overlay) -> Result<()> {
    overlay.reject_unknown(&["out"])?;
    let out: PathBuf = overlay.require("out", args.out)?;
    if args.metrics.is_empty() {
        return Err(Error::Config("missing required flag --metrics".into()));
    }

    let mut table = String::from("category,model,accuracy\n");
    let mut rows = 0usize;
    let mut shared_layout: Option<Vec<String>> = None;
    for path in &args.metrics {
        let (eval_columns, values) = last_eval_row(path)?;
        match &shared_layout {
            None => shared_layout = Some(eval_columns.clone()),
            Some(seen) if *seen == eval_columns => {}
            Some(seen) => {
                return Err(Error::Config(format!(
                    "metrics files disagree on their column layout ({seen:?} vs {eval_columns:?})"
                )))
            }
        }
        let model = model_label(path);
        for (category, index) in rollups(&eval_columns)? {
            let _ = writeln!(table, "{category},{model},{:.6}", values[index]);
            rows += 1;
        }
    }
    std::fs::write(&out, &table).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!("wrote {} ({rows} rows)", out.display());
    Ok(())
}

/// A run's display name: the file stem, except for the `metrics.csv`
/// the train verb writes, where the run directory is the telling part.
fn model_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    match stem.as_deref() {
        Some("metrics") | None => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string()),
        Some(other) => other.to_string(),
    }
}

/// Parse a training metrics CSV and return (eval column names, values
/// of the last row that carries them).
fn last_eval_row(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        offset: 0,
        what: format!("{}: empty metrics file", path.display()),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 4 || columns[..3] != ["step", "wall_ms", "loss"] {
        return Err(Error::Format {
            offset: 0,
            what: format!("{}: unrecognized metrics header {header:?}", path.display()),
        });
    }
    let eval_columns: Vec<String> = columns[3..].iter().map(|s| s.to_string()).collect();

    let mut last: Option<Vec<f64>> = None;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() || cells[3..].iter().any(|c| c.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            cells[3..].iter().map(|c| c.parse::<f64>()).collect();
        if let Ok(values) = parsed {
            last = Some(values);
        }
    }
    match last {
        Some(values) => Ok((eval_columns, values)),
        None => Err(Error::Config(format!(
            "{}: no evaluation rows to report",
            path.display()
        ))),
    }
}

// --------------------------------------------------------------------------
// Selftest

fn run_selftest() -> Result<()> {
    let mut checks = selftest::run_all()?;
    checks.push(selftest::training_determinism()?);
    let mut failed = false;
    for check in &checks {
        let verdict = if check.passed { "ok  " } else { "FAIL" };
        println!("{verdict} {:<28} {}", check.name, check.detail);
        failed |= !check.passed;
    }
    if failed {
        return Err(Error::Numeric {
            step: 0,
            what: "invariant suite failed".into(),
        });
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
