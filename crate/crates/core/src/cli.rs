//! Experiment configuration and the subcommands behind the `remede` binary.
//!
//! Every command collects its artifacts in memory and writes them at the
//! end, each through a temporary file renamed into place, together with a
//! `run.json` listing the resolved config, the seed and the SHA-256 of every
//! artifact. A failing command leaves no outputs behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{generate_dataset, read_jsonl, to_jsonl_line, DataError, GenConfig, SequenceExample, Task};
use crate::eval::{self, EvalError, TrialReport};
use crate::remede::{CellError, Checkpoint};
use crate::training::{self, SearchConfig, TrainConfig, TrainError};
use crate::treecore::{export_graph, GraphFormat, TreeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub trials: usize,
    /// Upper bound on seeds tried when a trial stalls.
    pub max_trials: usize,
    pub parallel_trials: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Poc1,
            data: GenConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            trials: 5,
            max_trials: 8,
            parallel_trials: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// One seed drives data generation, splitting, initialisation and
    /// shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.search.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.train.validate()?;
        if self.trials == 0 {
            return Err(CliError::Input("trials must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Parser)]
#[command(name = "remede", version, about = "Recurrent memory decision trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a JSONL dataset.
    Generate(Common),
    /// Train one model and write its checkpoint and history.
    Train(DataArgs),
    /// Search the learning rate.
    Search(DataArgs),
    /// Evaluate a checkpoint against both baselines.
    Evaluate(ModelArgs),
    /// Prune a checkpoint on a dataset and export the tree.
    Export(ExportArgs),
    /// Full protocol: generate, search, and run all trials.
    Experiment(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long = "memory-dim")]
    pub memory_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long = "parallel-trials")]
    pub parallel_trials: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSONL dataset; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "dot")]
    pub format: GraphFormat,
}

impl Common {
    /// Config file, then flags on top.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(task) = self.task {
            cfg.task = task;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(depth) = self.depth {
            cfg.train.depth = depth;
        }
        if let Some(n_m) = self.memory_dim {
            cfg.train.n_m = n_m;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
            cfg.max_trials = cfg.max_trials.max(trials);
        }
        if let Some(p) = self.parallel_trials {
            cfg.parallel_trials = p.max(1);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named artifacts of one command, written together by [`Outputs::commit`].
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    /// Writes every artifact plus `run.json` into `dir` and returns the paths.
    pub fn commit(mut self, dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
        let artifacts: Vec<_> = self
            .files
            .iter()
            .map(|(name, bytes)| json!({ "file": name, "sha256": hex::encode(Sha256::digest(bytes)) }))
            .collect();
        let run = json!({
            "command": command,
            "seed": cfg.train.seed,
            "config": cfg,
            "artifacts": artifacts,
        });
        let run = serde_json::to_string_pretty(&run).expect("run record serialises");
        self.add("run.json", run);

        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Output { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let target = dir.join(name);
            let result = tempfile::NamedTempFile::new_in(dir)
                .and_then(|mut tmp| tmp.write_all(bytes).map(|_| tmp))
                .and_then(|tmp| tmp.persist(&target).map_err(|e| e.error));
            if let Err(e) = result {
                for path in &written {
                    let _ = fs::remove_file(path);
                }
                return Err(io(&target)(e));
            }
            written.push(target);
        }
        Ok(written)
    }
}

fn dataset_bytes(data: &[SequenceExample]) -> Vec<u8> {
    let mut out = String::new();
    for seq in data {
        out.push_str(&to_jsonl_line(seq));
        out.push('\n');
    }
    out.into_bytes()
}

fn load_or_generate(args: &DataArgs, cfg: &ExperimentConfig) -> Result<Vec<SequenceExample>, CliError> {
    let data = match &args.dataset {
        Some(path) => read_jsonl(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => generate_dataset(cfg.task, &cfg.data)?,
    };
    if data.is_empty() {
        return Err(CliError::Input("dataset is empty".into()));
    }
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn csv_bytes<F>(write: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), TrainError>,
{
    let mut out = Vec::new();
    write(&mut out)?;
    Ok(out)
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = generate_dataset(cfg.task, &cfg.data)?;
    let mut out = Outputs::default();
    out.add("dataset.jsonl", dataset_bytes(&data));
    out.commit(&cfg.out_dir, "generate", cfg)
}

pub fn cmd_train(cfg: &ExperimentConfig, args: &DataArgs) -> Result<Vec<PathBuf>, CliError> {
    let data = load_or_generate(args, cfg)?;
    let split = training::trial_split(&data, cfg.train.seed)?;
    let cell = training::init_cell(data[0].input_dim(), &split.train, &cfg.train)?;
    let result = training::fit(cell, &split.train, &split.valid, &cfg.train)?;
    let test_accuracy = eval::evaluate_model(&result.cell, &split.test)?;
    let mut out = Outputs::default();
    let ck = Checkpoint::from_cell(&result.cell, cfg.train.seed, Some(data[0].task));
    out.add("checkpoint.json", ck.to_json());
    out.add(
        "history.csv",
        csv_bytes(|w| training::write_history_csv(w, &result.history))?,
    );
    let summary = json!({
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "test_accuracy": test_accuracy,
        "epochs_run": result.epochs_run(),
    });
    out.add("summary.json", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    out.commit(&cfg.out_dir, "train", cfg)
}

pub fn cmd_search(cfg: &ExperimentConfig, args: &DataArgs) -> Result<Vec<PathBuf>, CliError> {
    let data = load_or_generate(args, cfg)?;
    let split = training::trial_split(&data, cfg.train.seed)?;
    let search_cfg = SearchConfig {
        seed: cfg.search.seed,
        parallel: cfg.parallel_trials,
        ..cfg.search.clone()
    };
    let result = training::lr_search(&split.train, &split.valid, &cfg.train, &search_cfg)?;
    let mut best = cfg.clone();
    best.train.learning_rate = result.best_lr;
    let mut out = Outputs::default();
    out.add("search.csv", csv_bytes(|w| training::write_search_csv(w, &result.trials))?);
    out.add("best_config.json", best.to_json());
    out.commit(&cfg.out_dir, "search", cfg)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, args: &ModelArgs) -> Result<Vec<PathBuf>, CliError> {
    let cell = load_checkpoint(&args.checkpoint)?.to_cell()?;
    let data = load_or_generate(&args.data, cfg)?;
    let split = training::trial_split(&data, cfg.train.seed)?;
    let outcome = eval::assess_trial(&cell, &split, cfg.train.seed, 0)?;
    let report = TrialReport::new(data[0].task, cfg.train.learning_rate, vec![outcome]);
    let mut table = format!(
        "{:<8} {:>15}\n{:<8} {:>15}\n{:<8} {:>15}\n{:<8} {:>15}\n",
        "row",
        "accuracy",
        "ReMeDe",
        report.accuracy_cell(),
        "naive",
        report.naive_cell(),
        "random",
        report.random_cell()
    );
    table.push_str(&format!("tree size {}\n", report.trials[0].tree_size));
    let mut csv_out = Vec::new();
    report
        .write_csv(&mut csv_out)
        .map_err(|e| CliError::Train(TrainError::Csv(e)))?;
    let mut out = Outputs::default();
    out.add("report.csv", csv_out);
    out.add("report.txt", table);
    out.commit(&cfg.out_dir, "evaluate", cfg)
}

pub fn cmd_export(cfg: &ExperimentConfig, args: &ExportArgs) -> Result<Vec<PathBuf>, CliError> {
    let cell = load_checkpoint(&args.model.checkpoint)?.to_cell()?;
    let data = load_or_generate(&args.model.data, cfg)?;
    let tree = cell.prune(&data)?;
    let name = match args.format {
        GraphFormat::Dot => "tree.dot",
        GraphFormat::Json => "tree.json",
    };
    let mut out = Outputs::default();
    out.add(name, export_graph(&tree, args.format, &cell.describer()));
    out.commit(&cfg.out_dir, "export", cfg)
}

pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let full = eval::full_report(cfg.task, cfg)?;
    let mut out = Outputs::default();
    out.add(
        "search.csv",
        csv_bytes(|w| training::write_search_csv(w, &full.search.trials))?,
    );
    let mut report_csv = Vec::new();
    full.report
        .write_csv(&mut report_csv)
        .map_err(|e| CliError::Train(TrainError::Csv(e)))?;
    out.add("trials.csv", report_csv);
    let reports = [full.report.clone()];
    out.add(
        "tables.txt",
        format!("{}\n{}", eval::accuracy_table(&reports), eval::size_table(&reports)),
    );
    out.add(
        "report.json",
        serde_json::to_string_pretty(&full).expect("report serialises"),
    );
    out.commit(&cfg.out_dir, "experiment", cfg)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(&c.resolve()?),
        Command::Train(a) => cmd_train(&a.common.resolve()?, a),
        Command::Search(a) => cmd_search(&a.common.resolve()?, a),
        Command::Evaluate(a) => cmd_evaluate(&a.data.common.resolve()?, a),
        Command::Export(a) => cmd_export(&a.model.data.common.resolve()?, a),
        Command::Experiment(c) => cmd_experiment(&c.resolve()?),
    }
}
