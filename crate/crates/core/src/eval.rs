//! Accuracy, the random-guess and per-position majority baselines, and the
//! accuracy / tree-size reports.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cli::ExperimentConfig;
use crate::datagen::{generate_dataset, target_to_class, SequenceExample, Task};
use crate::remede::{CellError, RemedeCell};
use crate::training::{self, SearchConfig, SearchResult, TrainConfig, TrainError, TrialSplit};

pub const N_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {pred} predictions for {target} targets")]
    LengthMismatch { pred: usize, target: usize },
    #[error("ragged sequence lengths: expected {expected}, found {found}")]
    Ragged { expected: usize, found: usize },
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Cell(#[from] CellError),
}

/// Correct and total timestep counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, pred: &[usize], target: &[usize]) -> Result<(), EvalError> {
        if pred.len() != target.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                target: target.len(),
            });
        }
        self.correct += pred.iter().zip(target).filter(|(p, t)| p == t).count();
        self.total += target.len();
        Ok(())
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Fraction of positions where `pred` equals `target`.
pub fn elementwise_accuracy(pred: &[usize], target: &[usize]) -> Result<f64, EvalError> {
    let mut tally = Tally::default();
    tally.add(pred, target)?;
    Ok(tally.accuracy())
}

/// Accuracy of a class drawn uniformly at random for every timestep.
pub fn random_guess_baseline(dataset: &[SequenceExample], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for seq in dataset {
        let pred: Vec<usize> = (0..seq.len()).map(|_| rng.random_range(0..N_CLASSES)).collect();
        tally.add(&pred, &seq.target_classes()).expect("same length");
    }
    tally.accuracy()
}

fn common_length(data: &[SequenceExample]) -> Result<usize, EvalError> {
    let len = data.first().ok_or(EvalError::Empty)?.len();
    match data.iter().find(|s| s.len() != len) {
        Some(s) => Err(EvalError::Ragged {
            expected: len,
            found: s.len(),
        }),
        None => Ok(len),
    }
}

/// Per-position majority class of `train`. Ties prefer target `1`, then
/// `0`, then `-1`.
pub fn majority_classes(train: &[SequenceExample]) -> Result<Vec<usize>, EvalError> {
    let len = common_length(train)?;
    let mut counts = vec![[0usize; N_CLASSES]; len];
    for seq in train {
        for (c, class) in counts.iter_mut().zip(seq.target_classes()) {
            c[class] += 1;
        }
    }
    let preference = [target_to_class(1), target_to_class(0), target_to_class(-1)];
    Ok(counts
        .iter()
        .map(|c| {
            preference
                .iter()
                .copied()
                .fold(preference[0], |best, k| if c[k] > c[best] { k } else { best })
        })
        .collect())
}

/// Accuracy on `test` of always predicting the training majority per position.
pub fn naive_baseline(train: &[SequenceExample], test: &[SequenceExample]) -> Result<f64, EvalError> {
    let majority = majority_classes(train)?;
    let len = common_length(test)?;
    if len != majority.len() {
        return Err(EvalError::Ragged {
            expected: majority.len(),
            found: len,
        });
    }
    let mut tally = Tally::default();
    for seq in test {
        tally.add(&majority, &seq.target_classes())?;
    }
    Ok(tally.accuracy())
}

/// Elementwise accuracy of the hard tree over `test`.
pub fn evaluate_model(cell: &RemedeCell, test: &[SequenceExample]) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tally = Tally::default();
    for seq in test {
        tally.add(&cell.predict(seq)?, &seq.target_classes())?;
    }
    Ok(tally.accuracy())
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"0.930 ± 0.002"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub accuracy: f64,
    pub naive_accuracy: f64,
    pub random_accuracy: f64,
    pub tree_size: usize,
    pub epochs_run: usize,
}

/// Scores a trained cell on its trial's test set and prunes it on the
/// training set.
pub fn assess_trial(
    cell: &RemedeCell,
    split: &TrialSplit,
    seed: u64,
    epochs_run: usize,
) -> Result<TrialOutcome, EvalError> {
    Ok(TrialOutcome {
        seed,
        accuracy: evaluate_model(cell, &split.test)?,
        naive_accuracy: naive_baseline(&split.train, &split.test)?,
        random_accuracy: random_guess_baseline(&split.test, seed),
        tree_size: cell.prune(&split.train)?.size(),
        epochs_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub task: Task,
    pub learning_rate: f64,
    /// Every trial that was run.
    pub trials: Vec<TrialOutcome>,
    /// Indices into `trials` that enter the summary.
    pub selected: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub mean_tree_size: f64,
    pub naive_mean: f64,
    pub random_mean: f64,
    /// How `std` is computed.
    pub std_formula: String,
}

impl TrialReport {
    pub fn new(task: Task, learning_rate: f64, trials: Vec<TrialOutcome>) -> Self {
        let selected = (0..trials.len()).collect();
        Self::with_selection(task, learning_rate, trials, selected)
    }

    pub fn with_selection(task: Task, learning_rate: f64, trials: Vec<TrialOutcome>, selected: Vec<usize>) -> Self {
        let pick = |f: fn(&TrialOutcome) -> f64| selected.iter().map(|&i| f(&trials[i])).collect::<Vec<_>>();
        let (mean, std) = mean_std(&pick(|t| t.accuracy));
        let mean_tree_size = mean_std(&pick(|t| t.tree_size as f64)).0;
        let naive_mean = mean_std(&pick(|t| t.naive_accuracy)).0;
        let random_mean = mean_std(&pick(|t| t.random_accuracy)).0;
        Self {
            task,
            learning_rate,
            trials,
            selected,
            mean,
            std,
            mean_tree_size,
            naive_mean,
            random_mean,
            std_formula: "sample (n - 1)".into(),
        }
    }

    /// Keeps the `k` most accurate trials, earlier trials first on ties.
    pub fn best_of(self, k: usize) -> Self {
        let mut order: Vec<usize> = (0..self.trials.len()).collect();
        order.sort_by(|&a, &b| self.trials[b].accuracy.total_cmp(&self.trials[a].accuracy).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
        Self::with_selection(self.task, self.learning_rate, self.trials, order)
    }

    pub fn accuracy_cell(&self) -> String {
        format_mean_std(self.mean, self.std)
    }

    fn selected_values(&self, f: fn(&TrialOutcome) -> f64) -> Vec<f64> {
        self.selected.iter().map(|&i| f(&self.trials[i])).collect()
    }

    pub fn naive_cell(&self) -> String {
        let (m, s) = mean_std(&self.selected_values(|t| t.naive_accuracy));
        format_mean_std(m, s)
    }

    pub fn random_cell(&self) -> String {
        let (m, s) = mean_std(&self.selected_values(|t| t.random_accuracy));
        format_mean_std(m, s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "task",
            "seed",
            "selected",
            "accuracy",
            "naive_accuracy",
            "random_accuracy",
            "tree_size",
            "epochs_run",
            "learning_rate",
        ])?;
        for (i, t) in self.trials.iter().enumerate() {
            w.write_record([
                self.task.to_string(),
                t.seed.to_string(),
                self.selected.contains(&i).to_string(),
                t.accuracy.to_string(),
                t.naive_accuracy.to_string(),
                t.random_accuracy.to_string(),
                t.tree_size.to_string(),
                t.epochs_run.to_string(),
                self.learning_rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy table: one row per task with model and baseline columns.
pub fn accuracy_table(reports: &[TrialReport]) -> String {
    let mut out = format!("{:<6} {:>15} {:>15} {:>15}\n", "task", "ReMeDe", "naive", "random");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<6} {:>15} {:>15} {:>15}",
            r.task.to_string(),
            r.accuracy_cell(),
            r.naive_cell(),
            r.random_cell()
        );
    }
    out
}

/// Tree-size table: mean pruned node count per task and overall.
pub fn size_table(reports: &[TrialReport]) -> String {
    let mut out = format!("{:<6} {:>10}\n", "task", "tree size");
    for r in reports {
        let _ = writeln!(out, "{:<6} {:>10.1}", r.task.to_string(), r.mean_tree_size);
    }
    if !reports.is_empty() {
        let mean = reports.iter().map(|r| r.mean_tree_size).sum::<f64>() / reports.len() as f64;
        let _ = writeln!(out, "{:<6} {:>10.1}", "mean", mean);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub search: SearchResult,
    pub report: TrialReport,
}

/// Whole protocol for one task: generate, search the learning rate on the
/// first trial's split, then run the trials. If any trial does not beat its
/// naive baseline, extra seeds are run up to `cfg.max_trials` and the best
/// `cfg.trials` are kept.
pub fn full_report(task: Task, cfg: &ExperimentConfig) -> Result<FullReport, TrainError> {
    let data = generate_dataset(task, &cfg.data)?;
    let split = training::trial_split(&data, cfg.train.seed)?;
    let search_cfg = SearchConfig {
        seed: cfg.train.seed,
        parallel: cfg.parallel_trials,
        ..cfg.search.clone()
    };
    let search = training::lr_search(&split.train, &split.valid, &cfg.train, &search_cfg)?;
    let train_cfg = TrainConfig {
        learning_rate: search.best_lr,
        ..cfg.train.clone()
    };
    let mut report = training::run_trials(task, &data, &train_cfg, cfg.trials, cfg.parallel_trials)?;
    let stalled = |r: &TrialReport| r.trials.iter().any(|t| t.accuracy <= t.naive_accuracy);
    if stalled(&report) && cfg.max_trials > cfg.trials {
        let extra_cfg = TrainConfig {
            seed: train_cfg.seed.wrapping_add(cfg.trials as u64),
            ..train_cfg.clone()
        };
        let extra = training::run_trials(task, &data, &extra_cfg, cfg.max_trials - cfg.trials, cfg.parallel_trials)?;
        let mut trials = report.trials;
        trials.extend(extra.trials);
        report = TrialReport::new(task, train_cfg.learning_rate, trials).best_of(cfg.trials);
    }
    Ok(FullReport { search, report })
}
