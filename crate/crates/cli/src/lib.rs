//! Batch commands behind the `megphone` binary: dataset generation,
//! training, evaluation, saliency and similarity reports, ablation sweeps.
//!
//! Every command writes a copy of its effective configuration next to its
//! outputs. Exit codes: 0 success, 1 runtime fault, 2 usage or
//! configuration error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use megphone::config::{DataSource, ExperimentConfig};
use megphone::data::{format_histogram, generate_synthetic, write_dataset, Dataset, Split, SyntheticParams};
use megphone::metrics::write_report;
use megphone::models::{load, save, Model};
use megphone::saliency::{
    class_saliency, hcluster, paired_scores, render_clustermap, row_minmax, similarity_matrix, summarize_similarity,
    write_matrix_csv, write_tree_csv, Axis, Metric, SimilaritySummary,
};
use megphone::training::{evaluate, train, EvalMode};
use megphone::Error;

/// Number of sweep cells trained concurrently.
pub const THREADS_ENV: &str = "MEGPHONE_THREADS";
/// When set to 1, outputs carry no wall-clock fields so reruns are byte-identical.
pub const DETERMINISTIC_ENV: &str = "MEGPHONE_DETERMINISTIC";

pub const CONFIG_COPY: &str = "config.toml";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RUN_INFO: &str = "run_info.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::NumericFault { .. } | Error::Tensor(_)) | CliError::Runtime(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| io_err(p, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunEnv {
    pub threads: usize,
    pub deterministic: bool,
}

impl Default for RunEnv {
    fn default() -> Self {
        Self {
            threads: 1,
            deterministic: false,
        }
    }
}

impl RunEnv {
    pub fn from_env() -> Result<Self> {
        Self::parse(std::env::var(THREADS_ENV).ok().as_deref(), std::env::var(DETERMINISTIC_ENV).ok().as_deref())
    }

    pub fn parse(threads: Option<&str>, deterministic: Option<&str>) -> Result<Self> {
        let threads = match threads {
            None => 1,
            Some(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        };
        let deterministic = match deterministic.map(|v| v.trim().to_ascii_lowercase()).as_deref() {
            None | Some("" | "0" | "false" | "no" | "off") => false,
            Some("1" | "true" | "yes" | "on") => true,
            Some(v) => return Err(CliError::Usage(format!("{DETERMINISTIC_ENV} must be 0 or 1, got '{v}'"))),
        };
        Ok(Self { threads, deterministic })
    }
}

#[derive(Parser, Debug)]
#[command(name = "megphone", version, about = "Phoneme decoding from MEG windows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset in the native format.
    Generate(GenerateArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Layer-by-phoneme saliency maps and clustermap.
    Saliency(SaliencyArgs),
    /// Cross-split saliency similarity on paired splits.
    Similarity(SimilarityArgs),
    /// Expand an ablation matrix into per-cell configs, optionally training each.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    #[value(alias = "val")]
    Validation,
    Test,
    Holdout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
            SplitArg::Holdout => Split::Holdout,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings file; flags take precedence over it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=39))]
    pub classes: Option<u64>,
    #[arg(long = "per-class", value_parser = clap::value_parser!(u64).range(1..))]
    pub per_class: Option<u64>,
    #[arg(long = "eval-per-class", value_parser = clap::value_parser!(u64).range(1..))]
    pub eval_per_class: Option<u64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub channels: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub times: Option<u64>,
    #[arg(long = "session-shift")]
    pub session_shift: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

/// Where evaluation data comes from; defaults to the training config saved
/// next to the checkpoint.
#[derive(Args, Debug, Default, Clone)]
pub struct SourceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Native dataset directory replacing the config's data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score fixed-seed same-class averages of SIZE windows.
    #[arg(long, value_name = "SIZE", num_args = 0..=1, default_missing_value = "100",
          conflicts_with = "ungrouped", value_parser = clap::value_parser!(u64).range(1..))]
    pub grouped: Option<u64>,
    #[arg(long)]
    pub ungrouped: bool,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "max-per-class", conflicts_with = "all_windows")]
    pub max_per_class: Option<usize>,
    /// Average over every window of the split.
    #[arg(long = "all-windows")]
    pub all_windows: bool,
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "split-a", value_enum, default_value = "validation")]
    pub split_a: SplitArg,
    #[arg(long = "split-b", value_enum, default_value = "test")]
    pub split_b: SplitArg,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "max-per-class", conflicts_with = "all_windows")]
    pub max_per_class: Option<usize>,
    #[arg(long = "all-windows")]
    pub all_windows: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Sweep file: an optional `[base]` config table and `[[cell]]` overrides.
    pub file: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train every cell after writing its config.
    #[arg(long)]
    pub run: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let env = RunEnv::from_env()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a, env).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Saliency(a) => cmd_saliency(&a).map(|_| ()),
        Command::Similarity(a) => cmd_similarity(&a).map(|_| ()),
        Command::Sweep(a) => {
            let exe = std::env::current_exe().map_err(|e| CliError::Runtime(format!("locating executable: {e}")))?;
            cmd_sweep(&a, env, &exe).map(|_| ())
        }
    }
}

fn provenance_header(command: &str) -> String {
    format!("# effective configuration of `megphone {command}`\n")
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Dataset> {
    let mut p = match &a.params {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str::<SyntheticParams>(&text)
                .map_err(|e| CliError::Core(Error::Config(format!("{}: {e}", path.display()))))?
        }
        None => SyntheticParams::default(),
    };
    if let Some(v) = a.classes {
        p.n_classes = v as usize;
    }
    if let Some(v) = a.per_class {
        p.n_per_class = v as usize;
    }
    if let Some(v) = a.eval_per_class {
        p.eval_per_class = Some(v as usize);
    }
    if let Some(v) = a.snr {
        p.snr = v;
    }
    if let Some(v) = a.seed {
        p.seed = v;
    }
    if let Some(v) = a.channels {
        p.channels = v as usize;
    }
    if let Some(v) = a.times {
        p.times = v as usize;
    }
    if let Some(v) = a.session_shift {
        p.session_shift = v;
    }
    p.validate()?;
    let ds = generate_synthetic(&p)?;
    write_dataset(&a.out, &ds)?;
    let text = toml::to_string(&p).map_err(|e| CliError::Runtime(format!("serializing parameters: {e}")))?;
    write_text(&a.out.join("generate.toml"), &(provenance_header("generate") + &text))?;

    let mut out = std::io::stdout().lock();
    for s in Split::ALL {
        let _ = writeln!(out, "{s}: {} windows", ds.count(s));
    }
    let _ = writeln!(out, "train class histogram:");
    let _ = write!(out, "{}", format_histogram(&ds.class_histogram(Split::Train), &ds.inventory, 40));
    Ok(ds)
}

#[derive(Debug, Serialize)]
struct RunInfo {
    command: &'static str,
    status: String,
    deterministic: bool,
    best_epoch: Option<usize>,
    best_val_f1: Option<f64>,
    parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_seconds: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_val_f1: f64,
}

pub fn cmd_train(a: &TrainArgs, env: RunEnv) -> Result<TrainSummary> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    if let Some(out) = &a.out {
        cfg.output_dir = absolute(out)?;
    }
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_COPY), &(provenance_header("train") + &cfg.to_toml()?))?;

    let (ds, _) = cfg.load_dataset()?;
    let model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let parameters = model.parameter_count();
    let quiet = a.quiet;
    let result = train(model, &ds, &cfg.train, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train_f1 {:.4}  val_f1 {:.4}{}",
                r.epoch,
                r.train_loss,
                r.train_f1,
                r.val_f1,
                if r.is_best { "  *" } else { "" }
            );
        }
    });
    let (log, best, failure) = match result {
        Ok(o) => {
            save(&o.last, &dir.join(LAST_CHECKPOINT))?;
            (o.log, Some(o.best), None)
        }
        Err(f) => (f.log, f.best, Some(f.error)),
    };
    log.write_csv(create(&dir.join(TRAIN_LOG))?)?;
    if let Some(b) = &best {
        save(b, &dir.join(BEST_CHECKPOINT))?;
    }
    let best_val_f1 = log.best_epoch.map(|e| log.records[e].val_f1);
    let info = RunInfo {
        command: "train",
        status: failure.as_ref().map_or("ok".to_string(), |e| e.to_string()),
        deterministic: env.deterministic,
        best_epoch: log.best_epoch,
        best_val_f1,
        parameters,
        elapsed_seconds: (!env.deterministic).then(|| start.elapsed().as_secs_f64()),
    };
    let text = toml::to_string(&info).map_err(|e| CliError::Runtime(format!("serializing run info: {e}")))?;
    write_text(&dir.join(RUN_INFO), &text)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    if !quiet {
        println!(
            "best epoch {} with validation F1-macro {:.4}; outputs in {}",
            log.best_epoch.unwrap_or(0),
            best_val_f1.unwrap_or(f64::NAN),
            dir.display()
        );
    }
    Ok(TrainSummary {
        output_dir: dir,
        best_epoch: log.best_epoch,
        best_val_f1: best_val_f1.unwrap_or(f64::NAN),
    })
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Experiment config for scoring `model`: data from `--data` or the config,
/// architecture from the checkpoint.
fn resolve_experiment(checkpoint: &Path, model: &Model, source: &SourceArgs) -> Result<ExperimentConfig> {
    let default_path = checkpoint_dir(checkpoint).join(CONFIG_COPY);
    let mut cfg = match (&source.config, &source.data) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, None) => ExperimentConfig::from_file(&default_path)?,
        (None, Some(_)) if default_path.exists() => ExperimentConfig::from_file(&default_path)?,
        (None, Some(_)) => ExperimentConfig::default(),
    };
    if let Some(d) = &source.data {
        cfg.data = DataSource {
            path: Some(absolute(d)?),
            synthetic: None,
        };
    }
    cfg.model = model.spec().clone();
    Ok(cfg)
}

fn load_for(checkpoint: &Path, source: &SourceArgs) -> Result<(Model, ExperimentConfig, Dataset)> {
    let model = load(checkpoint)?;
    let cfg = resolve_experiment(checkpoint, &model, source)?;
    let (ds, _) = cfg.load_dataset()?;
    Ok((model, cfg, ds))
}

fn write_provenance(path: &Path, command_line: &str, cfg: &ExperimentConfig) -> Result<()> {
    let header = format!("# effective configuration of `megphone {command_line}`\n");
    write_text(path, &(header + &cfg.to_toml()?))
}

#[derive(Clone, Debug)]
pub struct EvaluateSummary {
    pub f1_macro: f64,
    pub units: usize,
    pub report_path: PathBuf,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvaluateSummary> {
    let (model, cfg, ds) = load_for(&a.checkpoint, &a.source)?;
    let split = Split::from(a.split);
    let windows = ds.split(split);
    if windows.is_empty() {
        return Err(CliError::Core(Error::Input(format!("the {split} split is empty"))));
    }
    let (mode, tag) = match a.grouped {
        Some(n) if !a.ungrouped => (EvalMode::Grouped(n as usize), format!("grouped{n}")),
        _ => (EvalMode::Ungrouped, "ungrouped".to_string()),
    };
    let eval = evaluate(&model, &windows, mode, cfg.train.eval_batch_size)?;
    let dir = a.out.clone().unwrap_or_else(|| checkpoint_dir(&a.checkpoint));
    create_dir(&dir)?;
    let stem = format!("eval_{split}_{tag}");
    let report_path = dir.join(format!("{stem}.csv"));
    write_report(create(&report_path)?, &eval.report, ds.inventory.symbols())?;
    let grouped_flag = match mode {
        EvalMode::Grouped(n) => format!(" --grouped {n}"),
        EvalMode::Ungrouped => " --ungrouped".into(),
    };
    write_provenance(
        &dir.join(format!("{stem}.config.toml")),
        &format!("evaluate --checkpoint {} --split {split}{grouped_flag}", a.checkpoint.display()),
        &cfg,
    )?;
    println!("f1_macro {split} {tag} {:.6} ({} scored)", eval.f1_macro, eval.truth.len());
    Ok(EvaluateSummary {
        f1_macro: eval.f1_macro,
        units: eval.truth.len(),
        report_path,
    })
}

fn saliency_config(cfg: &mut ExperimentConfig, max_per_class: Option<usize>, all: bool) {
    if all {
        cfg.saliency.max_per_class = None;
    } else if let Some(m) = max_per_class {
        cfg.saliency.max_per_class = Some(m);
    }
}

fn write_csv_file(path: &Path, values: &[f64], rows: &[String], cols: &[String]) -> Result<()> {
    write_matrix_csv(create(path)?, values, rows, cols)?;
    Ok(())
}

pub fn cmd_saliency(a: &SaliencyArgs) -> Result<PathBuf> {
    let (model, mut cfg, ds) = load_for(&a.checkpoint, &a.source)?;
    saliency_config(&mut cfg, a.max_per_class, a.all_windows);
    let split = Split::from(a.split);
    let windows = ds.split(split);
    let s = class_saliency(&model, &windows, ds.inventory.symbols(), &cfg.saliency)?;
    let norm = row_minmax(&s);
    let (l, k) = (norm.n_layers(), norm.n_classes());
    let rows = hcluster(&norm.values, l, k, Axis::Rows);
    let cols = hcluster(&norm.values, l, k, Axis::Columns);

    let dir = a.out.clone().unwrap_or_else(|| checkpoint_dir(&a.checkpoint).join(format!("saliency_{split}")));
    create_dir(&dir)?;
    write_csv_file(&dir.join("saliency_raw.csv"), &s.values, &s.layer_names, &s.phoneme_symbols)?;
    write_csv_file(&dir.join("saliency_normalized.csv"), &norm.values, &norm.layer_names, &norm.phoneme_symbols)?;
    write_tree_csv(create(&dir.join("layer_tree.csv"))?, &rows, &norm.layer_names)?;
    write_tree_csv(create(&dir.join("phoneme_tree.csv"))?, &cols, &norm.phoneme_symbols)?;
    let title = format!("{:?} saliency, {split} split", model.spec().arch);
    write_text(&dir.join("clustermap.svg"), &render_clustermap(&norm, &rows, &cols, &title))?;
    write_provenance(
        &dir.join(CONFIG_COPY),
        &format!("saliency --checkpoint {} --split {split}", a.checkpoint.display()),
        &cfg,
    )?;
    println!("saliency for {l} layers × {k} classes written to {}", dir.display());
    Ok(dir)
}

#[derive(Clone, Debug)]
pub struct SimilarityReport {
    pub pearson: SimilaritySummary,
    pub spearman: SimilaritySummary,
    pub output_dir: PathBuf,
}

pub fn cmd_similarity(a: &SimilarityArgs) -> Result<SimilarityReport> {
    let (model, mut cfg, ds) = load_for(&a.checkpoint, &a.source)?;
    saliency_config(&mut cfg, a.max_per_class, a.all_windows);
    let (sa, sb) = (Split::from(a.split_a), Split::from(a.split_b));
    let paired = paired_scores(&model, &ds.split(sa), &ds.split(sb), &cfg.saliency)?;
    let n_classes = model.spec().n_classes.min(ds.inventory.len());
    let symbols = &ds.inventory.symbols()[..n_classes];

    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| checkpoint_dir(&a.checkpoint).join(format!("similarity_{sa}_{sb}")));
    create_dir(&dir)?;
    let mut summary = String::new();
    let mut results = Vec::new();
    for metric in [Metric::Pearson, Metric::Spearman] {
        let m = similarity_matrix(&paired, metric, symbols);
        let name = match metric {
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        };
        write_csv_file(&dir.join(format!("{name}.csv")), &m.values, &m.layer_names, &m.phoneme_symbols)?;
        let s = summarize_similarity(&m.values);
        summary.push_str(&format!("{name}: {s}\n"));
        results.push(s);
    }
    write_text(&dir.join("summary.txt"), &summary)?;
    write_provenance(
        &dir.join(CONFIG_COPY),
        &format!("similarity --checkpoint {} --split-a {sa} --split-b {sb}", a.checkpoint.display()),
        &cfg,
    )?;
    print!("{summary}");
    Ok(SimilarityReport {
        pearson: results[0],
        spearman: results[1],
        output_dir: dir,
    })
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn valid_cell_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub config_path: PathBuf,
    pub exit_code: Option<i32>,
}

/// Merges each `[[cell]]` table over `[base]` and writes one config per cell
/// directory.
pub fn expand_sweep(file: &Path, out: &Path) -> Result<Vec<SweepCell>> {
    let config_err = |m: String| CliError::Core(Error::Config(format!("{}: {m}", file.display())));
    let text = fs::read_to_string(file).map_err(|e| io_err(file, e))?;
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    let base = match doc.remove("base") {
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(config_err("`base` must be a table".into())),
        None => toml::Table::new(),
    };
    let cells = match doc.remove("cell") {
        Some(toml::Value::Array(a)) if !a.is_empty() => a,
        _ => return Err(config_err("at least one [[cell]] table is required".into())),
    };
    if let Some(k) = doc.keys().next() {
        return Err(config_err(format!("unknown key `{k}`")));
    }
    let sweep_dir = absolute(&checkpoint_dir(file))?;
    let out = absolute(out)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut written = Vec::with_capacity(cells.len());
    for (i, cell) in cells.into_iter().enumerate() {
        let toml::Value::Table(mut over) = cell else {
            return Err(config_err(format!("cell {i} is not a table")));
        };
        let name = match over.remove("name") {
            Some(toml::Value::String(s)) if valid_cell_name(&s) => s,
            _ => return Err(config_err(format!("cell {i} needs a `name` of letters, digits, '-', '_' or '.'"))),
        };
        if !seen.insert(name.clone()) {
            return Err(config_err(format!("duplicate cell name `{name}`")));
        }
        let mut merged = base.clone();
        merge_tables(&mut merged, &over);
        let serialized = toml::to_string(&merged).map_err(|e| config_err(e.to_string()))?;
        let mut cfg = ExperimentConfig::from_toml(&serialized).map_err(|e| config_err(format!("cell `{name}`: {e}")))?;
        if let Some(p) = &cfg.data.path {
            cfg.data.path = Some(sweep_dir.join(p));
        }
        let cell_dir = out.join(&name);
        cfg.output_dir = cell_dir.clone();
        cfg.validate().map_err(|e| config_err(format!("cell `{name}`: {e}")))?;
        create_dir(&cell_dir)?;
        let path = cell_dir.join(CONFIG_COPY);
        write_text(&path, &(format!("# sweep cell `{name}`\n") + &cfg.to_toml()?))?;
        written.push(SweepCell {
            name,
            config_path: path,
            exit_code: None,
        });
    }
    Ok(written)
}

fn write_sweep_index(out: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut text = String::from("cell,config,exit_code\n");
    for c in cells {
        let code = c.exit_code.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{code}\n", c.name, c.config_path.display()));
    }
    write_text(&out.join("cells.csv"), &text)
}

fn spawn_cell(exe: &Path, cell: &SweepCell) -> Result<Child> {
    let dir = checkpoint_dir(&cell.config_path);
    let log = dir.join("train_output.txt");
    let stdout = File::create(&log).map_err(|e| io_err(&log, e))?;
    let stderr = stdout.try_clone().map_err(|e| io_err(&log, e))?;
    Process::new(exe)
        .arg("train")
        .arg(&cell.config_path)
        .stdout(Stdio::from(stdout))
        .stderr(Stdio::from(stderr))
        .spawn()
        .map_err(|e| CliError::Runtime(format!("starting cell `{}`: {e}", cell.name)))
}

/// Expands the sweep and, with `--run`, trains each cell in its own process,
/// at most `env.threads` at a time.
pub fn cmd_sweep(a: &SweepArgs, env: RunEnv, exe: &Path) -> Result<Vec<SweepCell>> {
    let mut cells = expand_sweep(&a.file, &a.out)?;
    write_sweep_index(&a.out, &cells)?;
    if !a.run {
        for c in &cells {
            println!("{}", c.config_path.display());
        }
        return Ok(cells);
    }
    let mut next = 0;
    let mut running: Vec<(usize, Child)> = Vec::new();
    while next < cells.len() || !running.is_empty() {
        while next < cells.len() && running.len() < env.threads {
            running.push((next, spawn_cell(exe, &cells[next])?));
            next += 1;
        }
        let mut i = 0;
        while i < running.len() {
            let status = running[i]
                .1
                .try_wait()
                .map_err(|e| CliError::Runtime(format!("waiting for a sweep cell: {e}")))?;
            match status {
                Some(s) => {
                    let (idx, _) = running.swap_remove(i);
                    cells[idx].exit_code = Some(s.code().unwrap_or(1));
                    println!("cell {}: exit {}", cells[idx].name, cells[idx].exit_code.unwrap_or(1));
                }
                None => i += 1,
            }
        }
        if !running.is_empty() {
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    write_sweep_index(&a.out, &cells)?;
    let failed = cells.iter().filter(|c| c.exit_code != Some(0)).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} sweep cells failed", cells.len())));
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_env_parsing() {
        assert_eq!(RunEnv::parse(None, None).unwrap(), RunEnv::default());
        let e = RunEnv::parse(Some(" 4 "), Some("1")).unwrap();
        assert_eq!((e.threads, e.deterministic), (4, true));
        assert!(!RunEnv::parse(None, Some("off")).unwrap().deterministic);
        for bad in [RunEnv::parse(Some("0"), None), RunEnv::parse(None, Some("maybe"))] {
            assert_eq!(bad.unwrap_err().exit_code(), 2);
        }
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let numeric = CliError::Core(Error::NumericFault { layer: "block1".into() });
        assert_eq!(numeric.exit_code(), 1);
        assert_eq!(CliError::Core(Error::Pairing("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(Error::Config("x".into())).exit_code(), 2);
    }

    #[test]
    fn nested_tables_merge_key_by_key() {
        let mut base: toml::Table = "[train]\nlr = 1.0\n[train.sampling]\nrepeats = 1\nbalance = false\n".parse().unwrap();
        let over: toml::Table = "[train.sampling]\nrepeats = 10\n".parse().unwrap();
        merge_tables(&mut base, &over);
        let want: toml::Table = "[train]\nlr = 1.0\n[train.sampling]\nrepeats = 10\nbalance = false\n".parse().unwrap();
        assert_eq!(base, want);
        assert!(valid_cell_name("cnn_in-r10") && !valid_cell_name("../x") && !valid_cell_name(""));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
