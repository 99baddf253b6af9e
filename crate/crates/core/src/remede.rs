//! The recurrent memory decision tree cell.
//!
//! At step `t` the tree reads the augmented input `(x_t, m_{t-1})` and selects
//! one leaf `j`. The leaf prescribes the class logits for step `t` and the
//! memory update
//!
//! ```text
//! m_t = m_{t-1} + round(sigmoid(c_j)) * tanh(W_j x_t)
//! ```
//!
//! where the rounded sigmoid is a hard `{0, 1}` gate per memory dimension.
//! Memory starts at zero.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::datagen::{class_to_target, SequenceExample, Task};
use crate::diffcore::{argmax, sigmoid, DiffError, Mode, Tape, Tensor, Var};
use crate::treecore::{
    build_path_tables, forward_dense, prune, route_hard, LeafDescriber, PathTables, PrunedTree,
    RouteCache, TreeError, TreeParams, TreeVars,
};

#[derive(Debug, Error)]
pub enum CellError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub n_x: usize,
    pub n_m: usize,
    pub n_classes: usize,
}

impl CellDims {
    pub fn new(n_x: usize, n_m: usize) -> Self {
        Self {
            n_x,
            n_m,
            n_classes: 3,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_x + self.n_m
    }

    /// Packed leaf row: class logits, gate logits, then `W` row-major.
    pub fn payload_dim(&self) -> usize {
        self.n_classes + self.n_m + self.n_m * self.n_x
    }

    fn gate_offset(&self) -> usize {
        self.n_classes
    }

    fn weight_offset(&self) -> usize {
        self.n_classes + self.n_m
    }
}

/// Unpacked view of one leaf row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafPayload {
    pub class_logits: Vec<f64>,
    pub gate_logits: Vec<f64>,
    /// `n_m x n_x`.
    pub input_weights: Vec<Vec<f64>>,
}

impl LeafPayload {
    pub fn unpack(dims: &CellDims, row: &[f64]) -> Self {
        let w = &row[dims.weight_offset()..];
        Self {
            class_logits: row[..dims.n_classes].to_vec(),
            gate_logits: row[dims.gate_offset()..dims.weight_offset()].to_vec(),
            input_weights: (0..dims.n_m)
                .map(|i| w[i * dims.n_x..(i + 1) * dims.n_x].to_vec())
                .collect(),
        }
    }

    pub fn pack(&self, dims: &CellDims) -> Result<Vec<f64>, CellError> {
        let check = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(CellError::Dimension { what, expected, got })
            }
        };
        check("class logits", dims.n_classes, self.class_logits.len())?;
        check("gate logits", dims.n_m, self.gate_logits.len())?;
        check("weight rows", dims.n_m, self.input_weights.len())?;
        let mut row = Vec::with_capacity(dims.payload_dim());
        row.extend_from_slice(&self.class_logits);
        row.extend_from_slice(&self.gate_logits);
        for w in &self.input_weights {
            check("weight columns", dims.n_x, w.len())?;
            row.extend_from_slice(w);
        }
        Ok(row)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_logits)
    }

    pub fn gate_bits(&self) -> Vec<bool> {
        self.gate_logits.iter().map(|&c| gate_open(c)).collect()
    }
}

/// Memory starts at zero and moves little in the first steps, so memory
/// splits start close to zero where they separate signs.
pub const MEMORY_THRESHOLD_INIT: f64 = 0.03;

/// Hard gate: `round(sigmoid(c)) == 1`.
pub fn gate_open(logit: f64) -> bool {
    sigmoid(logit).round() == 1.0
}

/// Tape handles for one registered cell.
#[derive(Debug, Clone)]
pub struct CellVars {
    pub tree: TreeVars,
    route: Route,
}

#[derive(Debug, Clone)]
enum Route {
    Fused(Rc<RouteCache>),
    Dense(Rc<PathTables>),
}

/// Output of [`RemedeCell::unroll`].
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Class logits per step.
    pub logits: Vec<Var>,
    /// `m_1 .. m_L`.
    pub states: Vec<Var>,
}

/// One step of plain (tape-free) inference.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub leaf: usize,
    pub x_aug: Vec<f64>,
    pub class: usize,
    pub memory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemedeCell {
    pub dims: CellDims,
    pub tree: TreeParams,
}

impl RemedeCell {
    pub fn new(dims: CellDims, tree: TreeParams) -> Result<Self, CellError> {
        if tree.n_features() != dims.n_features() {
            return Err(CellError::Dimension {
                what: "tree features",
                expected: dims.n_features(),
                got: tree.n_features(),
            });
        }
        if tree.payload_dim() != dims.payload_dim() {
            return Err(CellError::Dimension {
                what: "leaf payload",
                expected: dims.payload_dim(),
                got: tree.payload_dim(),
            });
        }
        Ok(Self { dims, tree })
    }

    /// Random initialisation.
    ///
    /// Input thresholds are uniform over each feature's range in `warmup`;
    /// memory thresholds are uniform within `MEMORY_THRESHOLD_INIT` of zero.
    /// Feature logits ~ N(0, 1), class logits ~ N(0, 0.1), gate logits 0
    /// (open), weights ~ N(0, 0.5).
    pub fn init<R: Rng + ?Sized>(
        dims: CellDims,
        depth: usize,
        warmup: &[SequenceExample],
        rng: &mut R,
    ) -> Result<Self, CellError> {
        let mut tree = TreeParams::zeros(depth, dims.n_features(), dims.payload_dim())?;
        let mut ranges = vec![(-MEMORY_THRESHOLD_INIT, MEMORY_THRESHOLD_INIT); dims.n_features()];
        for (f, range) in ranges.iter_mut().enumerate().take(dims.n_x) {
            let values = warmup.iter().flat_map(|s| (0..s.len()).map(move |t| s.step(t)[f]));
            let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo < hi {
                *range = (lo, hi);
            }
        }
        for node in 0..tree.n_internal() {
            for (f, &(lo, hi)) in ranges.iter().enumerate() {
                tree.thresholds.row_mut(node)[f] = rng.random_range(lo..hi);
            }
        }
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        for v in tree.feature_logits.data_mut() {
            *v = unit.sample(rng);
        }
        let class_init = Normal::new(0.0, 0.1).expect("valid normal");
        let weight_init = Normal::new(0.0, 0.5).expect("valid normal");
        for leaf in 0..tree.n_leaves() {
            let row = tree.leaves.row_mut(leaf);
            for v in &mut row[..dims.n_classes] {
                *v = class_init.sample(rng);
            }
            for v in &mut row[dims.gate_offset()..dims.weight_offset()] {
                *v = 0.0;
            }
            for v in &mut row[dims.weight_offset()..] {
                *v = weight_init.sample(rng);
            }
        }
        Self::new(dims, tree)
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn leaf(&self, j: usize) -> LeafPayload {
        LeafPayload::unpack(&self.dims, self.tree.leaf_payload(j))
    }

    /// Records the parameters. Hard tapes use the fused router; soft tapes
    /// (and `force_dense`) use the dense formulation.
    pub fn register(&self, tape: &mut Tape, force_dense: bool) -> Result<CellVars, CellError> {
        let tree = self.tree.register(tape);
        let route = if tape.mode() == Mode::Hard && !force_dense {
            Route::Fused(Rc::new(RouteCache::new(&self.tree)))
        } else {
            Route::Dense(Rc::new(build_path_tables(self.depth())?))
        };
        Ok(CellVars { tree, route })
    }

    /// All parameters as one vector: thresholds, feature logits, leaves.
    pub fn flat_params(&self) -> Tensor {
        let mut data = self.tree.thresholds.data().to_vec();
        data.extend_from_slice(self.tree.feature_logits.data());
        data.extend_from_slice(self.tree.leaves.data());
        Tensor::vector(data)
    }

    /// Registers the cell from a flat parameter variable laid out as in
    /// [`flat_params`](Self::flat_params), using the dense router. Used for
    /// gradient checks over every parameter at once.
    pub fn register_flat(&self, tape: &mut Tape, flat: Var) -> Result<CellVars, CellError> {
        let t = &self.tree;
        let (nt, nl) = (t.thresholds.len(), t.leaves.len());
        let thresholds = tape.slice(flat, 0, nt)?;
        let thresholds = tape.reshape(thresholds, t.thresholds.shape().to_vec())?;
        let logits = tape.slice(flat, nt, nt)?;
        let feature_logits = tape.reshape(logits, t.feature_logits.shape().to_vec())?;
        let leaves = tape.slice(flat, 2 * nt, nl)?;
        let leaves = tape.reshape(leaves, t.leaves.shape().to_vec())?;
        Ok(CellVars {
            tree: TreeVars {
                thresholds,
                feature_logits,
                leaves,
            },
            route: Route::Dense(Rc::new(build_path_tables(self.depth())?)),
        })
    }

    /// One recurrent step; returns `(class logits, m_t)`.
    pub fn step(&self, tape: &mut Tape, vars: &CellVars, x_t: Var, m_prev: Var) -> Result<(Var, Var), CellError> {
        let d = self.dims;
        let (xl, ml) = (tape.value(x_t).len(), tape.value(m_prev).len());
        if xl != d.n_x {
            return Err(CellError::Dimension {
                what: "input",
                expected: d.n_x,
                got: xl,
            });
        }
        if ml != d.n_m {
            return Err(CellError::Dimension {
                what: "memory",
                expected: d.n_m,
                got: ml,
            });
        }
        let x_aug = tape.concat(&[x_t, m_prev])?;
        let payload = match &vars.route {
            Route::Fused(cache) => route_hard(tape, x_aug, &vars.tree, cache)?.0,
            Route::Dense(paths) => forward_dense(tape, x_aug, &vars.tree, paths)?,
        };
        let logits = tape.slice(payload, 0, d.n_classes)?;
        let gate_logits = tape.slice(payload, d.gate_offset(), d.n_m)?;
        let w_flat = tape.slice(payload, d.weight_offset(), d.n_m * d.n_x)?;
        let w = tape.reshape(w_flat, vec![d.n_m, d.n_x])?;
        let gate_prob = tape.sigmoid(gate_logits);
        let gate = tape.round_st(gate_prob);
        let pre = tape.matvec(w, x_t)?;
        let update = tape.tanh_act(pre);
        let delta = tape.mul(gate, update)?;
        let m_next = tape.add(m_prev, delta)?;
        Ok((logits, m_next))
    }

    /// Runs the whole sequence on one tape, starting from zero memory.
    pub fn unroll(&self, tape: &mut Tape, vars: &CellVars, seq: &SequenceExample) -> Result<Unrolled, CellError> {
        if seq.is_empty() {
            return Err(CellError::EmptySequence);
        }
        let mut m = tape.leaf(Tensor::zeros(&[self.dims.n_m]));
        let mut out = Unrolled {
            logits: Vec::with_capacity(seq.len()),
            states: Vec::with_capacity(seq.len()),
        };
        for t in 0..seq.len() {
            let x = tape.leaf(Tensor::vector(seq.step(t).to_vec()));
            let (logits, m_next) = self.step(tape, vars, x, m)?;
            out.logits.push(logits);
            out.states.push(m_next);
            m = m_next;
        }
        Ok(out)
    }

    /// Tape-free inference by tree traversal.
    pub fn trace(&self, seq: &SequenceExample) -> Result<Vec<StepTrace>, CellError> {
        self.trace_with(seq, |x| {
            let j = self.tree.forward_traversal(x);
            (j, self.tree.leaf_payload(j))
        })
    }

    /// Inference with a pruned copy of the tree.
    pub fn trace_pruned(&self, tree: &PrunedTree, seq: &SequenceExample) -> Result<Vec<StepTrace>, CellError> {
        self.trace_with(seq, |x| tree.leaf_for(x))
    }

    fn trace_with<'a, F>(&self, seq: &SequenceExample, mut select: F) -> Result<Vec<StepTrace>, CellError>
    where
        F: FnMut(&[f64]) -> (usize, &'a [f64]),
    {
        let d = self.dims;
        if seq.is_empty() {
            return Err(CellError::EmptySequence);
        }
        if seq.input_dim() != d.n_x {
            return Err(CellError::Dimension {
                what: "input",
                expected: d.n_x,
                got: seq.input_dim(),
            });
        }
        let mut m = vec![0.0; d.n_m];
        let mut out = Vec::with_capacity(seq.len());
        let mut x_aug = vec![0.0; d.n_features()];
        for t in 0..seq.len() {
            let x = seq.step(t);
            x_aug[..d.n_x].copy_from_slice(x);
            x_aug[d.n_x..].copy_from_slice(&m);
            let (leaf, payload) = select(&x_aug);
            let class = argmax(&payload[..d.n_classes]);
            let w = &payload[d.weight_offset()..];
            for i in 0..d.n_m {
                let gate = sigmoid(payload[d.gate_offset() + i]).round();
                let pre: f64 = w[i * d.n_x..(i + 1) * d.n_x].iter().zip(x).map(|(a, b)| a * b).sum();
                m[i] += gate * pre.tanh();
            }
            out.push(StepTrace {
                leaf,
                x_aug: x_aug.clone(),
                class,
                memory: m.clone(),
            });
        }
        Ok(out)
    }

    /// Predicted class index per step.
    pub fn predict(&self, seq: &SequenceExample) -> Result<Vec<usize>, CellError> {
        Ok(self.trace(seq)?.into_iter().map(|s| s.class).collect())
    }

    /// Whether two leaf rows behave identically: same predicted class, same
    /// gate pattern, bit-identical weights on every open gate.
    pub fn leaves_equivalent(&self, a: &[f64], b: &[f64]) -> bool {
        let d = self.dims;
        if argmax(&a[..d.n_classes]) != argmax(&b[..d.n_classes]) {
            return false;
        }
        (0..d.n_m).all(|i| {
            let (ga, gb) = (gate_open(a[d.gate_offset() + i]), gate_open(b[d.gate_offset() + i]));
            if ga != gb {
                return false;
            }
            let span = d.weight_offset() + i * d.n_x..d.weight_offset() + (i + 1) * d.n_x;
            !ga || a[span.clone()]
                .iter()
                .zip(&b[span])
                .all(|(p, q)| p.to_bits() == q.to_bits())
        })
    }

    /// Prunes the tree against every timestep of `dataset`.
    pub fn prune(&self, dataset: &[SequenceExample]) -> Result<PrunedTree, CellError> {
        let mut inputs = Vec::new();
        for seq in dataset {
            inputs.extend(self.trace(seq)?.into_iter().map(|s| s.x_aug));
        }
        let tree = prune(&self.tree, inputs.iter().map(Vec::as_slice), |a, b| {
            self.leaves_equivalent(a, b)
        })?;
        Ok(tree)
    }

    pub fn describer(&self) -> CellDescriber {
        CellDescriber { dims: self.dims }
    }
}

/// Mean over steps of the per-step cross entropy.
pub fn sequence_loss(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var, CellError> {
    if logits.len() != targets.len() {
        return Err(CellError::Dimension {
            what: "targets",
            expected: logits.len(),
            got: targets.len(),
        });
    }
    if logits.is_empty() {
        return Err(CellError::EmptySequence);
    }
    let losses = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| tape.cross_entropy(z, t))
        .collect::<Result<Vec<_>, _>>()?;
    let total = tape.add_n(&losses)?;
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

/// Labels inputs `x_i` and memory `m_i`, and summarises leaves.
#[derive(Debug, Clone, Copy)]
pub struct CellDescriber {
    dims: CellDims,
}

impl LeafDescriber for CellDescriber {
    fn feature_name(&self, feature: usize) -> String {
        if feature < self.dims.n_x {
            format!("x_{feature}")
        } else {
            format!("m_{}", feature - self.dims.n_x)
        }
    }

    fn leaf_label(&self, payload: &[f64]) -> String {
        let leaf = LeafPayload::unpack(&self.dims, payload);
        let gates: String = leaf.gate_bits().iter().map(|&g| if g { '1' } else { '0' }).collect();
        let mut label = format!("y = {}\ngate = {gates}", class_to_target(leaf.predicted_class()));
        for (i, (open, w)) in leaf.gate_bits().iter().zip(&leaf.input_weights).enumerate() {
            if *open {
                let row: Vec<String> = w.iter().map(|v| format!("{v:.2}")).collect();
                label.push_str(&format!("\nW[m_{i}] = [{}]", row.join(", ")));
            }
        }
        label
    }

    fn leaf_summary(&self, payload: &[f64]) -> Value {
        let leaf = LeafPayload::unpack(&self.dims, payload);
        json!({
            "class": class_to_target(leaf.predicted_class()),
            "class_logits": leaf.class_logits,
            "gates": leaf.gate_bits(),
            "gate_logits": leaf.gate_logits,
            "input_weights": leaf.input_weights,
        })
    }
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub depth: usize,
    pub n_x: usize,
    pub n_m: usize,
    pub n_classes: usize,
    pub thresholds: Vec<Vec<f64>>,
    pub feature_logits: Vec<Vec<f64>>,
    pub leaf_payloads: Vec<LeafPayload>,
    pub seed: u64,
    pub task_id: Option<Task>,
}

impl Checkpoint {
    pub fn from_cell(cell: &RemedeCell, seed: u64, task_id: Option<Task>) -> Self {
        Self {
            depth: cell.depth(),
            n_x: cell.dims.n_x,
            n_m: cell.dims.n_m,
            n_classes: cell.dims.n_classes,
            thresholds: cell.tree.thresholds.to_rows(),
            feature_logits: cell.tree.feature_logits.to_rows(),
            leaf_payloads: (0..cell.tree.n_leaves()).map(|j| cell.leaf(j)).collect(),
            seed,
            task_id,
        }
    }

    pub fn to_cell(&self) -> Result<RemedeCell, CellError> {
        let dims = CellDims {
            n_x: self.n_x,
            n_m: self.n_m,
            n_classes: self.n_classes,
        };
        let bad = |e: DiffError| CellError::Checkpoint(e.to_string());
        let thresholds = Tensor::matrix(&self.thresholds).map_err(bad)?;
        let feature_logits = Tensor::matrix(&self.feature_logits).map_err(bad)?;
        let rows = self
            .leaf_payloads
            .iter()
            .map(|l| l.pack(&dims))
            .collect::<Result<Vec<_>, _>>()?;
        let leaves = Tensor::matrix(&rows).map_err(bad)?;
        let tree = TreeParams::from_parts(self.depth, thresholds, feature_logits, leaves)?;
        RemedeCell::new(dims, tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CellError> {
        serde_json::from_str(text).map_err(|e| CellError::Checkpoint(e.to_string()))
    }
}
