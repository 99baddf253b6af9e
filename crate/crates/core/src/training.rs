//! Optimisation: Adam, the mini-batch training loop with early stopping, the
//! learning-rate search and the multi-trial protocol.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{split_dataset, DataError, SequenceExample, Task};
use crate::diffcore::{Mode, Tape, Tensor};
use crate::eval::{self, EvalError, TrialOutcome, TrialReport};
use crate::remede::{sequence_loss, CellDims, CellError, RemedeCell};

pub const PARAM_NAMES: [&str; 3] = ["thresholds", "feature_logits", "leaves"];

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

// Independent random streams derived from one seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_SEARCH: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub depth: usize,
    pub n_m: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_accuracy: f64,
    pub seed: u64,
    /// Relaxed sigmoid/softmax instead of straight-through. Test-only.
    pub soft_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            n_m: 5,
            learning_rate: 0.01,
            batch_size: 64,
            max_epochs: 200,
            patience: 50,
            clip_norm: 10.0,
            target_accuracy: 1.0,
            seed: 0,
            soft_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if !(self.clip_norm >= 0.0) {
            return fail("clip_norm must be non-negative");
        }
        Ok(())
    }

    fn mode(&self) -> Mode {
        if self.soft_mode {
            Mode::Soft
        } else {
            Mode::Hard
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh cell for `train`, seeded by `cfg.seed`.
pub fn init_cell(n_x: usize, train: &[SequenceExample], cfg: &TrainConfig) -> Result<RemedeCell, TrainError> {
    let dims = CellDims::new(n_x, cfg.n_m);
    Ok(RemedeCell::init(dims, cfg.depth, train, &mut stream_rng(cfg.seed, STREAM_INIT))?)
}

/// Adam moment estimates for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            second: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[&'static str],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.first.len() || names.len() != params.len() {
        return Err(TrainError::InvalidConfig("parameter and gradient lists differ".into()));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(TrainError::InvalidConfig(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
        }
    }
    Ok(())
}

/// Scales `grads` to global norm `max_norm` if larger. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Mean sequence loss over `batch` and its gradient for every parameter.
pub fn batch_gradients(
    cell: &RemedeCell,
    batch: &[&SequenceExample],
    mode: Mode,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyData("batch"));
    }
    let mut tape = Tape::with_mode(mode);
    let vars = cell.register(&mut tape, false)?;
    let mut losses = Vec::with_capacity(batch.len());
    for seq in batch {
        let out = cell.unroll(&mut tape, &vars, seq)?;
        losses.push(sequence_loss(&mut tape, &out.logits, &seq.target_classes())?);
    }
    let total = tape.add_n(&losses).map_err(CellError::from)?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let mut grads = tape.backward(loss).map_err(CellError::from)?;
    let value = tape.value(loss).item();
    let tree = vars.tree;
    let grads = [tree.thresholds, tree.feature_logits, tree.leaves]
        .into_iter()
        .map(|v| grads.take(v).expect("parameter gradient"))
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub clipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation accuracy.
    pub cell: RemedeCell,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl FitResult {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Mini-batch training with early stopping on validation accuracy.
///
/// Epoch 0 in the history is the untrained cell. The cell of the best epoch
/// (first one on ties) is returned.
pub fn fit(
    mut cell: RemedeCell,
    train: &[SequenceExample],
    valid: &[SequenceExample],
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let mode = cfg.mode();
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut state = {
        let t = &cell.tree;
        OptimizerState::new(&[&t.thresholds, &t.feature_logits, &t.leaves])
    };
    let initial = eval::evaluate_model(&cell, valid)?;
    let mut best = (0, initial, cell.clone());
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_accuracy: initial,
        best_val_accuracy: initial,
        clipped_batches: 0,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        if best.1 >= cfg.target_accuracy || epoch - best.0 > cfg.patience {
            break;
        }
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut clipped = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SequenceExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradients(&cell, &batch, mode)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * batch.len() as f64;
            if clip_global_norm(&mut grads, cfg.clip_norm) > cfg.clip_norm && cfg.clip_norm > 0.0 {
                clipped += 1;
            }
            let t = &mut cell.tree;
            adam_step(
                &mut [&mut t.thresholds, &mut t.feature_logits, &mut t.leaves],
                &grads,
                &PARAM_NAMES,
                &mut state,
                cfg.learning_rate,
            )?;
        }
        let acc = eval::evaluate_model(&cell, valid)?;
        if acc > best.1 {
            best = (epoch, acc, cell.clone());
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy: acc,
            best_val_accuracy: best.1,
            clipped_batches: clipped,
        });
    }
    Ok(FitResult {
        cell: best.2,
        history,
        best_epoch: best.0,
        best_val_accuracy: best.1,
    })
}

pub fn write_history_csv<W: Write>(out: W, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_accuracy", "best_val_accuracy", "clipped_batches"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_accuracy.to_string(),
            r.best_val_accuracy.to_string(),
            r.clipped_batches.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Epoch budget of each shortened fit.
    pub max_epochs: usize,
    pub patience: usize,
    /// Training sequences used per trial; `0` uses all of them.
    pub max_train: usize,
    pub seed: u64,
    pub parallel: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_trials: 60,
            lr_min: 1e-4,
            lr_max: 1e-1,
            max_epochs: 20,
            patience: 20,
            max_train: 4000,
            seed: 0,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub trial: usize,
    pub lr: f64,
    pub val_accuracy: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_lr: f64,
    pub best_val_accuracy: f64,
    pub trials: Vec<SearchTrial>,
}

/// The `n_trials` learning rates, log-uniform in `[lr_min, lr_max]`.
pub fn search_learning_rates(search: &SearchConfig) -> Vec<f64> {
    let mut rng = stream_rng(search.seed, STREAM_SEARCH);
    let (lo, hi) = (search.lr_min.ln(), search.lr_max.ln());
    (0..search.n_trials)
        .map(|_| if lo < hi { rng.random_range(lo..hi).exp() } else { search.lr_min })
        .collect()
}

/// Runs `f` over `items` on a pool of `threads`, keeping input order.
fn parallel_map<T, U, F>(items: Vec<T>, threads: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    if threads <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(_) => items.into_iter().map(f).collect(),
    }
}

/// Seeded random search over the learning rate with shortened fits.
/// Every trial shares the init and shuffle seed, so trials differ only in
/// the rate. Picks the best validation accuracy, ties going to the lower rate.
pub fn lr_search(
    train: &[SequenceExample],
    valid: &[SequenceExample],
    base: &TrainConfig,
    search: &SearchConfig,
) -> Result<SearchResult, TrainError> {
    if search.n_trials == 0 {
        return Err(TrainError::InvalidConfig("n_trials must be at least 1".into()));
    }
    if !(search.lr_min > 0.0 && search.lr_min <= search.lr_max) {
        return Err(TrainError::InvalidConfig("need 0 < lr_min <= lr_max".into()));
    }
    let n_x = train.first().ok_or(TrainError::EmptyData("training"))?.input_dim();
    let subset = if search.max_train == 0 {
        train
    } else {
        &train[..search.max_train.min(train.len())]
    };
    let jobs: Vec<(usize, f64)> = search_learning_rates(search).into_iter().enumerate().collect();
    let results = parallel_map(jobs, search.parallel, |(trial, lr): (usize, f64)| {
        let cfg = TrainConfig {
            learning_rate: lr,
            max_epochs: search.max_epochs,
            patience: search.patience,
            seed: search.seed,
            ..base.clone()
        };
        let cell = init_cell(n_x, subset, &cfg)?;
        // A diverged trial scores zero rather than aborting the search.
        let (val_accuracy, epochs_run) = match fit(cell, subset, valid, &cfg) {
            Ok(r) => (r.best_val_accuracy, r.epochs_run()),
            Err(TrainError::Diverged { .. } | TrainError::NonFiniteGradient(_)) => (0.0, 0),
            Err(e) => return Err(e),
        };
        Ok(SearchTrial {
            trial,
            lr,
            val_accuracy,
            epochs_run,
        })
    });
    let trials = results.into_iter().collect::<Result<Vec<_>, TrainError>>()?;
    let best = trials
        .iter()
        .fold(None::<&SearchTrial>, |best, t| match best {
            Some(b) if b.val_accuracy > t.val_accuracy => Some(b),
            Some(b) if b.val_accuracy == t.val_accuracy && b.lr <= t.lr => Some(b),
            _ => Some(t),
        })
        .expect("at least one trial");
    Ok(SearchResult {
        best_lr: best.lr,
        best_val_accuracy: best.val_accuracy,
        trials,
    })
}

pub fn write_search_csv<W: Write>(out: W, trials: &[SearchTrial]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "lr", "val_accuracy", "epochs_run"])?;
    for t in trials {
        w.write_record([
            t.trial.to_string(),
            t.lr.to_string(),
            t.val_accuracy.to_string(),
            t.epochs_run.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test partition of one trial.
#[derive(Debug, Clone)]
pub struct TrialSplit {
    pub train: Vec<SequenceExample>,
    pub valid: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

/// 80/20 train/test split, then 10% of train held out for validation.
pub fn trial_split(data: &[SequenceExample], seed: u64) -> Result<TrialSplit, TrainError> {
    let split_seed = stream_rng(seed, STREAM_SPLIT).random();
    let (train_all, test) = split_dataset(data, 0.8, split_seed)?;
    let (train, valid) = split_dataset(&train_all, 0.9, split_seed.wrapping_add(1))?;
    Ok(TrialSplit { train, valid, test })
}

/// One full trial: split, init, fit, evaluate, prune.
pub fn run_trial(
    data: &[SequenceExample],
    cfg: &TrainConfig,
) -> Result<(TrialOutcome, FitResult), TrainError> {
    let split = trial_split(data, cfg.seed)?;
    let n_x = split.train.first().ok_or(TrainError::EmptyData("training"))?.input_dim();
    let cell = init_cell(n_x, &split.train, cfg)?;
    let result = fit(cell, &split.train, &split.valid, cfg)?;
    let outcome = eval::assess_trial(&result.cell, &split, cfg.seed, result.epochs_run())?;
    Ok((outcome, result))
}

/// Trials with seeds `base.seed, base.seed + 1, ...` and their report.
pub fn run_trials(
    task: Task,
    data: &[SequenceExample],
    base: &TrainConfig,
    n_trials: usize,
    parallel: usize,
) -> Result<TrialReport, TrainError> {
    let seeds: Vec<u64> = (0..n_trials as u64).map(|i| base.seed.wrapping_add(i)).collect();
    let outcomes = parallel_map(seeds, parallel, |seed| {
        let cfg = TrainConfig { seed, ..base.clone() };
        run_trial(data, &cfg).map(|(o, _)| o)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(TrialReport::new(task, base.learning_rate, outcomes))
}
