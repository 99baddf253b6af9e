//! Synthetic delayed-recall sequence tasks.
//!
//! | task | input | target |
//! |------|-------|--------|
//! | poc1 | `[x0, 0, .., 0, 1]` | `sign(x0)` at the last step |
//! | poc2 | as poc1, trigger on a second channel | as poc1 |
//! | poc3 | trigger after a random delay, fixed length `d_max + 2` | `sign(x0)` at the trigger |
//! | poc4 | as poc3, trigger on a second channel | as poc3 |
//! | poc5 | blocks of `+-1` separated by zero blocks | previous block value on each new block |
//!
//! Zero-valued inputs carry small Gaussian noise.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

/// Value marking the step at which a sign must be reported.
pub const TRIGGER: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unknown task `{0}` (expected poc1..poc5)")]
    UnknownTask(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Poc1,
    Poc2,
    Poc3,
    Poc4,
    Poc5,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Poc1, Task::Poc2, Task::Poc3, Task::Poc4, Task::Poc5];

    pub fn input_dim(self) -> usize {
        match self {
            Task::Poc2 | Task::Poc4 => 2,
            Task::Poc1 | Task::Poc3 | Task::Poc5 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Poc1 => "poc1",
            Task::Poc2 => "poc2",
            Task::Poc3 => "poc3",
            Task::Poc4 => "poc4",
            Task::Poc5 => "poc5",
        }
    }

    /// Sequence length under `cfg`; every task has a fixed length.
    pub fn seq_len(self, cfg: &GenConfig) -> usize {
        match self {
            Task::Poc1 | Task::Poc2 => cfg.d + 2,
            Task::Poc3 | Task::Poc4 => cfg.d_max + 2,
            Task::Poc5 => cfg.n_blocks * cfg.block_len + (cfg.n_blocks - 1) * cfg.d,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poc1" => Ok(Task::Poc1),
            "poc2" => Ok(Task::Poc2),
            "poc3" => Ok(Task::Poc3),
            "poc4" => Ok(Task::Poc4),
            "poc5" => Ok(Task::Poc5),
            other => Err(DataError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Initial values are drawn from `U(-v, v)`.
    pub v: f64,
    /// Fixed delay of poc1/poc2 and zero-block length of poc5.
    pub d: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub n_sequences: usize,
    pub block_len: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            v: 0.5,
            d: 5,
            d_min: 3,
            d_max: 7,
            noise_mean: -0.01,
            noise_std: 0.01,
            n_sequences: 10_000,
            block_len: 1,
            n_blocks: 5,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Same config without noise.
    pub fn noiseless(&self) -> Self {
        Self {
            noise_mean: 0.0,
            noise_std: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if !(self.v > 0.0) || !self.v.is_finite() {
            return fail("v must be positive");
        }
        if self.d_min > self.d_max {
            return fail("d_min must not exceed d_max");
        }
        if self.d_min < 1 {
            return fail("d_min must be at least 1");
        }
        if self.n_sequences == 0 {
            return fail("n_sequences must be positive");
        }
        if self.n_blocks < 2 || self.block_len < 1 {
            return fail("poc5 needs at least two blocks of length >= 1");
        }
        if !(self.noise_std >= 0.0) || !self.noise_mean.is_finite() {
            return fail("noise parameters must be finite with std >= 0");
        }
        Ok(())
    }
}

/// One input sequence with per-step targets in `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub task: Task,
    /// `L x n_x`.
    pub inputs: Tensor,
    pub targets: Vec<i8>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.inputs.row(t)
    }

    pub fn target_classes(&self) -> Vec<usize> {
        self.targets.iter().map(|&t| target_to_class(t)).collect()
    }
}

/// `{-1, 0, 1}` to class index `{0, 1, 2}`.
pub fn target_to_class(target: i8) -> usize {
    (target + 1) as usize
}

pub fn class_to_target(class: usize) -> i8 {
    class as i8 - 1
}

pub fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

fn build(task: Task, rows: Vec<Vec<f64>>, targets: Vec<i8>) -> SequenceExample {
    SequenceExample {
        task,
        inputs: Tensor::matrix(&rows).expect("rectangular rows"),
        targets,
    }
}

fn fixed_delay<R: Rng + ?Sized>(task: Task, cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let x0 = rng.random_range(-cfg.v..cfg.v);
    let len = cfg.d + 2;
    let channels = task.input_dim();
    let mut rows = vec![vec![0.0; channels]; len];
    rows[0][0] = x0;
    rows[len - 1][channels - 1] = TRIGGER;
    let mut targets = vec![0; len];
    targets[len - 1] = sign(x0);
    build(task, rows, targets)
}

fn variable_delay<R: Rng + ?Sized>(task: Task, cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let x0 = rng.random_range(-cfg.v..cfg.v);
    let delay = rng.random_range(cfg.d_min..=cfg.d_max);
    let len = cfg.d_max + 2;
    let channels = task.input_dim();
    let mut rows = vec![vec![0.0; channels]; len];
    rows[0][0] = x0;
    rows[delay + 1][channels - 1] = TRIGGER;
    let mut targets = vec![0; len];
    targets[delay + 1] = sign(x0);
    build(task, rows, targets)
}

/// Noise-free poc1 sequence.
pub fn gen_poc1_clean<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    fixed_delay(Task::Poc1, cfg, rng)
}

pub fn gen_poc2_clean<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    fixed_delay(Task::Poc2, cfg, rng)
}

pub fn gen_poc3_clean<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    variable_delay(Task::Poc3, cfg, rng)
}

pub fn gen_poc4_clean<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    variable_delay(Task::Poc4, cfg, rng)
}

pub fn gen_poc5_clean<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let blocks: Vec<i8> = (0..cfg.n_blocks)
        .map(|_| if rng.random_bool(0.5) { 1 } else { -1 })
        .collect();
    let mut xs = Vec::with_capacity(Task::Poc5.seq_len(cfg));
    let mut ys = Vec::with_capacity(xs.capacity());
    for (j, &b) in blocks.iter().enumerate() {
        if j > 0 {
            xs.extend(std::iter::repeat_n(0.0, cfg.d));
            ys.extend(std::iter::repeat_n(0, cfg.d));
        }
        let previous = if j == 0 { 0 } else { blocks[j - 1] };
        xs.extend(std::iter::repeat_n(b as f64, cfg.block_len));
        ys.extend(std::iter::repeat_n(previous, cfg.block_len));
    }
    build(Task::Poc5, xs.into_iter().map(|x| vec![x]).collect(), ys)
}

pub fn generate_clean<R: Rng + ?Sized>(task: Task, cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    match task {
        Task::Poc1 => gen_poc1_clean(cfg, rng),
        Task::Poc2 => gen_poc2_clean(cfg, rng),
        Task::Poc3 => gen_poc3_clean(cfg, rng),
        Task::Poc4 => gen_poc4_clean(cfg, rng),
        Task::Poc5 => gen_poc5_clean(cfg, rng),
    }
}

/// Adds `N(noise_mean, noise_std)` to every zero-valued input entry.
pub fn add_noise<R: Rng + ?Sized>(mut seq: SequenceExample, cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let normal = Normal::new(cfg.noise_mean, cfg.noise_std).expect("validated noise std");
    for v in seq.inputs.data_mut() {
        if *v == 0.0 {
            *v += normal.sample(rng);
        }
    }
    seq
}

pub fn gen_poc1<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = gen_poc1_clean(cfg, rng);
    add_noise(seq, cfg, rng)
}

pub fn gen_poc2<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = gen_poc2_clean(cfg, rng);
    add_noise(seq, cfg, rng)
}

pub fn gen_poc3<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = gen_poc3_clean(cfg, rng);
    add_noise(seq, cfg, rng)
}

pub fn gen_poc4<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = gen_poc4_clean(cfg, rng);
    add_noise(seq, cfg, rng)
}

pub fn gen_poc5<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = gen_poc5_clean(cfg, rng);
    add_noise(seq, cfg, rng)
}

/// Noisy sequence of any task.
pub fn generate<R: Rng + ?Sized>(task: Task, cfg: &GenConfig, rng: &mut R) -> SequenceExample {
    let seq = generate_clean(task, cfg, rng);
    add_noise(seq, cfg, rng)
}

/// Random stream for sequence `index` of a dataset seeded with `seed`.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `cfg.n_sequences` sequences; sequence `i` depends only on `(cfg, i)`.
pub fn generate_dataset(task: Task, cfg: &GenConfig) -> Result<Vec<SequenceExample>, DataError> {
    cfg.validate()?;
    Ok((0..cfg.n_sequences)
        .map(|i| generate(task, cfg, &mut sequence_rng(cfg.seed, i)))
        .collect())
}

/// Shuffled `(train, test)` split with `round(fraction * n)` training sequences.
pub fn split_dataset(
    data: &[SequenceExample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SequenceExample>, Vec<SequenceExample>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * data.len() as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| data[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: Task,
    inputs: Vec<Vec<f64>>,
    targets: Vec<i8>,
}

pub fn to_jsonl_line(seq: &SequenceExample) -> String {
    let record = Record {
        task: seq.task,
        inputs: seq.inputs.to_rows(),
        targets: seq.targets.clone(),
    };
    serde_json::to_string(&record).expect("record serialises")
}

pub fn from_jsonl_line(line: &str, line_no: usize) -> Result<SequenceExample, DataError> {
    let perr = |message: String| DataError::Parse {
        line: line_no,
        message,
    };
    let record: Record = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
    if record.inputs.len() != record.targets.len() || record.inputs.is_empty() {
        return Err(perr(format!(
            "{} input rows for {} targets",
            record.inputs.len(),
            record.targets.len()
        )));
    }
    if let Some(t) = record.targets.iter().find(|t| !(-1..=1).contains(*t)) {
        return Err(perr(format!("target {t} outside {{-1, 0, 1}}")));
    }
    let inputs = Tensor::matrix(&record.inputs).map_err(|e| perr(e.to_string()))?;
    Ok(SequenceExample {
        task: record.task,
        inputs,
        targets: record.targets,
    })
}

pub fn write_jsonl(path: &Path, data: &[SequenceExample]) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for seq in data {
        writeln!(out, "{}", to_jsonl_line(seq))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset; errors carry the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<SequenceExample>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        data.push(from_jsonl_line(&line, i + 1)?);
    }
    Ok(data)
}
