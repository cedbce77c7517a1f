//! Subcommands of the `fedprompt` binary. Every command returns its exit
//! code: 0 on success, 1 on runtime failure, 2 on invalid input or
//! configuration.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fedprompt_core::corpus::{build_vocab, load_jsonl, save_jsonl, synth_corpus, synth_generate, CorpusSpec, DatasetManifest, SynthSpec};
use fedprompt_core::experiment::{prepare, pretrained, run_seed, Precision, Prepared, RunConfig};
use fedprompt_core::federation::Mode;
use fedprompt_core::metrics::{best_accuracy, fill_gain, load_summary, mean_std, relative_performance, save_history, save_summary, RunContext, SummaryRow};
use fedprompt_core::model::{init_params, pretrain_mlm, save_checkpoint, ModelConfig, PretrainConfig};
use fedprompt_core::partitioner::{emit_heatmap, partition, PartitionSpec};
use fedprompt_core::{Error, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn report(result: CliResult<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn runtime<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime(path))?;
    text.push('\n');
    fs::write(path, text).map_err(runtime(path))
}

/// `data.jsonl` -> `data.manifest.json`
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

/// Label names from the command line, or from the manifest next to the
/// dataset.
fn label_names(dataset: &Path, given: &[String]) -> CliResult<Vec<String>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let mpath = manifest_path(dataset);
    let text = fs::read_to_string(&mpath)
        .map_err(|_| CliError::Config(format!("no --labels given and no manifest at {}", mpath.display())))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", mpath.display())))?;
    Ok(m.label_names)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 250)]
    pub examples_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub keywords_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub noise_words: usize,
    /// Give every example a second text field.
    #[arg(long)]
    pub pair_mode: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the unlabeled pretraining corpus with this many sentences.
    #[arg(long)]
    pub corpus_sentences: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub keyword_coverage: f64,
    /// Output JSONL file; a manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> i32 {
    report(synth(args))
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        num_classes: args.num_classes,
        examples_per_class: args.examples_per_class,
        keywords_per_class: args.keywords_per_class,
        noise_word_count: args.noise_words,
        pair_mode: args.pair_mode,
        seed: args.seed,
    };
    let ds = synth_generate(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime(dir))?;
    }
    save_jsonl(&ds, &args.out)?;
    write_json(&manifest_path(&args.out), &ds.manifest())?;
    if let Some(sentences) = args.corpus_sentences {
        let corpus = synth_corpus(&spec, &CorpusSpec { sentences, keyword_coverage: args.keyword_coverage })?;
        let path = args.out.with_extension("corpus.jsonl");
        save_jsonl(&corpus, &path)?;
        write_json(&manifest_path(&path), &corpus.manifest())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated label names; read from the dataset manifest if absent.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub num_clients: usize,
    #[arg(long, default_value_t = 64)]
    pub n_labeled: usize,
    #[arg(long, default_value_t = 100.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 32)]
    pub xi: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub random_xi: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `partition.json` and `heatmap.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_partition(args: &PartitionArgs) -> i32 {
    report(partition_cmd(args))
}

fn partition_cmd(args: &PartitionArgs) -> CliResult<()> {
    if !args.dataset.is_file() {
        return Err(CliError::Config(format!("dataset {} not found", args.dataset.display())));
    }
    let labels = label_names(&args.dataset, &args.labels)?;
    let ds = load_jsonl(&args.dataset, &labels)?;
    let spec = PartitionSpec {
        num_clients: args.num_clients,
        n_labeled: args.n_labeled,
        gamma: args.gamma,
        xi: args.xi,
        alpha: args.alpha,
        random_xi: args.random_xi,
        seed: args.seed,
    };
    let part = partition(&ds, &spec)?;
    fs::create_dir_all(&args.out).map_err(runtime(&args.out))?;
    write_json(&args.out.join("partition.json"), &part)?;
    emit_heatmap(&part.matrix, &args.out.join("heatmap.csv"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Pretrain exactly the model a run of this config starts from.
    #[arg(long, conflicts_with = "dataset")]
    pub config: Option<PathBuf>,
    /// Pretrain on the texts of this JSONL file instead.
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ffn: usize,
    #[arg(long, default_value_t = 32)]
    pub max_seq_len: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_pretrain(args: &PretrainArgs) -> i32 {
    report(pretrain_cmd(args))
}

fn pretrain_cmd(args: &PretrainArgs) -> CliResult<()> {
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime(dir))?;
    }
    if let Some(path) = &args.config {
        let (mut cfg, _) = RunConfig::load(path)?;
        if let Some(steps) = args.steps {
            cfg.pretrain.steps = steps;
        }
        cfg.pretrain.checkpoint = None;
        let prepared = prepare(&cfg)?;
        let params = pretrained::<f32>(&cfg, &prepared, args.seed)?;
        save_checkpoint(&args.out, &params, Some(&prepared.vocab))?;
        return Ok(());
    }
    let dataset = args.dataset.as_ref().expect("clap requires --dataset without --config");
    let labels = label_names(dataset, &args.labels)?;
    let ds = load_jsonl(dataset, &labels)?;
    let vocab = build_vocab(&ds, &[])?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        num_labels: labels.len(),
        d_model: args.d_model,
        num_layers: args.num_layers,
        num_heads: args.num_heads,
        d_ffn: args.d_ffn,
        max_seq_len: args.max_seq_len,
    };
    let mut params = init_params::<f32>(&model, args.seed)?;
    let pre = PretrainConfig {
        steps: args.steps.unwrap_or(PretrainConfig::default().steps),
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
    };
    pretrain_mlm(&mut params, &ds, &vocab, &pre)?;
    save_checkpoint(&args.out, &params, Some(&vocab))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// run and sweep
// ---------------------------------------------------------------------------

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// SHA-256 of the config file as read.
    pub config_digest: String,
    pub seeds: Vec<u64>,
    /// Fully resolved configuration, flags applied.
    pub config: RunConfig,
}

impl RunManifest {
    fn new(config: &RunConfig, config_text: &str) -> Self {
        let digest = Sha256::digest(config_text.as_bytes());
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seeds: config.seeds.clone(),
            config: config.clone(),
        }
    }
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub n_labeled: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Turn pseudo-label augmentation on or off.
    #[arg(long)]
    pub augmentation: Option<bool>,
    /// Also run the all-labels reference for relative performance.
    #[arg(long)]
    pub fullset: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(r) = self.max_rounds {
            cfg.max_rounds = r;
        }
        if let Some(n) = self.n_labeled {
            cfg.partition.n_labeled = n;
        }
        if let Some(g) = self.gamma {
            cfg.partition.gamma = g;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(a) = self.augmentation {
            cfg.augmentation.enabled = a;
        }
        if self.fullset {
            cfg.fullset = true;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `$FEDPROMPT_OUT/<config stem>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

fn output_dir(out: &Option<PathBuf>, config: &Path) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("FEDPROMPT_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(config.file_stem().unwrap_or_default())
    })
}

fn load_config(path: &Path, overrides: &Overrides) -> CliResult<(RunConfig, String)> {
    let (mut cfg, text) = RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => CliError::Config(e.to_string()),
        other => other.into(),
    })?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok((cfg, text))
}

/// Pretrained weights and full-set references, shared by the cells of a
/// sweep.
struct Caches<S: Scalar> {
    pretrained: HashMap<u64, fedprompt_core::model::ModelParams<S>>,
    fullset: HashMap<Mode, Vec<f64>>,
}

impl<S: Scalar> Caches<S> {
    fn new() -> Self {
        Caches { pretrained: HashMap::new(), fullset: HashMap::new() }
    }

    fn initial(&mut self, cfg: &RunConfig, prepared: &Prepared, seed: u64) -> CliResult<fedprompt_core::model::ModelParams<S>> {
        if let Some(p) = self.pretrained.get(&seed) {
            return Ok(p.clone());
        }
        let p = pretrained::<S>(cfg, prepared, seed)?;
        self.pretrained.insert(seed, p.clone());
        Ok(p)
    }
}

fn cell_dir_name(n_labeled: usize, gamma: f64, mode: Mode, augmentation: bool) -> String {
    format!("n{n_labeled}_g{gamma}_{mode}_{}", if augmentation { "aug" } else { "noaug" })
}

/// Runs every seed of `cfg` into `dir` and returns the cell's summary row.
/// The manifest is written last and marks the cell as complete.
fn execute_cell<S: Scalar>(
    cfg: &RunConfig,
    config_text: &str,
    prepared: &Prepared,
    caches: &mut Caches<S>,
    dir: &Path,
) -> CliResult<SummaryRow> {
    fs::create_dir_all(dir).map_err(runtime(dir))?;
    let mut bests = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let init = caches.initial(cfg, prepared, seed)?;
        let ctx = RunContext { seed, n_labeled: cfg.partition.n_labeled, gamma: cfg.partition.gamma };
        let path = dir.join(format!("history_seed{seed}.csv"));
        match run_seed(cfg, prepared, &init, seed, false) {
            Ok(outcome) => {
                save_history(&path, &ctx, &outcome.history)?;
                bests.push(best_accuracy(&outcome.history).unwrap_or(0.0));
            }
            Err(abort) => {
                save_history(&path, &ctx, &abort.history)?;
                let err: CliError = abort.source.into();
                return Err(CliError::Runtime(format!("seed {seed}: {err}")));
            }
        }
    }
    let agg = mean_std(&bests)?;
    let fullset = if cfg.fullset { Some(fullset_mean(cfg, prepared, caches)?) } else { None };
    let row = SummaryRow {
        n_labeled: cfg.partition.n_labeled,
        gamma: cfg.partition.gamma,
        mode: cfg.mode,
        augmentation: cfg.augmentation.enabled,
        mean: agg.mean,
        std: agg.std,
        fullset,
        relative: fullset.and_then(|f| relative_performance(agg.mean, f)),
        gain: None,
        seeds: agg.count,
    };
    save_summary(&dir.join("summary.csv"), std::slice::from_ref(&row))?;
    write_json(&dir.join("manifest.json"), &RunManifest::new(cfg, config_text))?;
    Ok(row)
}

/// Mean best accuracy with every training label revealed; independent of
/// the labeled budget and skew, so cached per mode.
fn fullset_mean<S: Scalar>(cfg: &RunConfig, prepared: &Prepared, caches: &mut Caches<S>) -> CliResult<f64> {
    if let Some(b) = caches.fullset.get(&cfg.mode) {
        return Ok(mean_std(b)?.mean);
    }
    let mut reference = cfg.clone();
    reference.augmentation.enabled = false;
    let mut bests = Vec::new();
    for &seed in &cfg.seeds {
        let init = caches.initial(cfg, prepared, seed)?;
        let outcome = run_seed(&reference, prepared, &init, seed, true).map_err(|a| CliError::from(a.source))?;
        bests.push(best_accuracy(&outcome.history).unwrap_or(0.0));
    }
    let mean = mean_std(&bests)?.mean;
    caches.fullset.insert(cfg.mode, bests);
    Ok(mean)
}

pub fn cmd_run(args: &RunArgs) -> i32 {
    report(run_cmd(args))
}

fn run_cmd(args: &RunArgs) -> CliResult<()> {
    let (cfg, text) = load_config(&args.config, &args.overrides)?;
    let dir = output_dir(&args.out, &args.config);
    let prepared = prepare(&cfg)?;
    match cfg.model.precision {
        Precision::F32 => execute_cell::<f32>(&cfg, &text, &prepared, &mut Caches::new(), &dir)?,
        Precision::F64 => execute_cell::<f64>(&cfg, &text, &prepared, &mut Caches::new(), &dir)?,
    };
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn cmd_sweep(args: &SweepArgs) -> i32 {
    report(sweep_cmd(args))
}

fn sweep_cmd(args: &SweepArgs) -> CliResult<()> {
    let (cfg, text) = load_config(&args.config, &args.overrides)?;
    let dir = output_dir(&args.out, &args.config);
    let prepared = prepare(&cfg)?;
    match cfg.model.precision {
        Precision::F32 => sweep_cells::<f32>(&cfg, &text, &prepared, &dir),
        Precision::F64 => sweep_cells::<f64>(&cfg, &text, &prepared, &dir),
    }
}

fn sweep_cells<S: Scalar>(cfg: &RunConfig, text: &str, prepared: &Prepared, dir: &Path) -> CliResult<()> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let mut caches = Caches::<S>::new();
    let mut rows = Vec::new();
    for &n in &grid.n_labeled {
        for &gamma in &grid.gamma {
            for &aug in &grid.augmentation {
                for &mode in &grid.mode {
                    let mut cell = cfg.clone();
                    cell.partition.n_labeled = n;
                    cell.partition.gamma = gamma;
                    cell.mode = mode;
                    cell.augmentation.enabled = aug;
                    cell.grid = None;
                    cell.validate()?;
                    let cdir = dir.join(cell_dir_name(n, gamma, mode, aug));
                    let done = cdir.join("manifest.json").is_file() && cdir.join("summary.csv").is_file();
                    let row = if done {
                        eprintln!("skipping completed cell {}", cdir.display());
                        load_summary(&cdir.join("summary.csv"))?
                            .into_iter()
                            .next()
                            .ok_or_else(|| CliError::Runtime(format!("{}: empty summary", cdir.display())))?
                    } else {
                        eprintln!("running cell {}", cdir.display());
                        execute_cell(&cell, text, prepared, &mut caches, &cdir)?
                    };
                    rows.push(row);
                }
            }
        }
    }
    fill_gain(&mut rows);
    save_summary(&dir.join("summary.csv"), &rows)?;
    write_json(&dir.join("manifest.json"), &RunManifest::new(cfg, text))
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "fedprompt", version, about = "Federated few-shot prompt learning simulator")]
pub struct Cli {
    /// Worker threads for local training and evaluation.
    #[arg(long, global = true, env = "FEDPROMPT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic keyword-classification dataset.
    Synth(SynthArgs),
    /// Split a dataset over clients and reveal the labeled budget.
    Partition(PartitionArgs),
    /// Pretrain the toy masked language model and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Run one configuration for every seed.
    Run(RunArgs),
    /// Run the grid of a configuration and write a combined summary.
    Sweep(SweepArgs),
}

/// Parses `argv` and dispatches; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
