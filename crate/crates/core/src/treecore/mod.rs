//! Dense decision-tree representation with straight-through splits.
//!
//! A tree of depth `d` is fully grown: `2^d - 1` internal nodes in
//! breadth-first order (children of `k` are `2k + 1` and `2k + 2`) and `2^d`
//! leaves. Every internal node owns one threshold per feature and one logit
//! per feature. The hardmax of the logits picks the feature a split reads,
//! which keeps every split axis aligned.
//!
//! A split evaluates to 1 ("condition true", route right) when
//! `round(sigmoid(x_f - t_f)) == 1`, i.e. when the input is at or above the
//! threshold.

mod export;
mod prune;
mod route;

pub use export::{export_graph, GraphFormat, LeafDescriber, PlainDescriber};
pub use prune::{prune, PrunedNode, PrunedTree};
pub use route::{route_hard, RouteCache};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{argmax, sigmoid, DiffError, Tape, Tensor, Var};

/// Largest supported depth; the dense form is exponential in depth.
pub const MAX_DEPTH: usize = 12;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree depth {0} outside 1..={MAX_DEPTH}")]
    DepthOutOfRange(usize),
    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("pruning needs at least one input")]
    EmptyPruningSet,
    #[error("unknown graph format `{0}` (expected dot or json)")]
    UnknownFormat(String),
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Hard split rule shared by every evaluation path.
pub fn hard_split(margin: f64) -> bool {
    sigmoid(margin).round() == 1.0
}

/// Root-to-leaf routes of a complete binary tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathTables {
    depth: usize,
    /// `node_index[l][j]`: internal node visited at depth `j` on the way to leaf `l`.
    node_index: Vec<Vec<usize>>,
    /// `direction[l][j]`: 0 for left, 1 for right.
    direction: Vec<Vec<u8>>,
}

impl PathTables {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_index(&self, leaf: usize) -> &[usize] {
        &self.node_index[leaf]
    }

    pub fn direction(&self, leaf: usize) -> &[u8] {
        &self.direction[leaf]
    }

    pub fn n_leaves(&self) -> usize {
        self.node_index.len()
    }
}

/// Leaf `l`'s path bits are the binary expansion of `l`, most significant first.
pub fn build_path_tables(depth: usize) -> Result<PathTables, TreeError> {
    if !(1..=MAX_DEPTH).contains(&depth) {
        return Err(TreeError::DepthOutOfRange(depth));
    }
    let n_leaves = 1usize << depth;
    let mut node_index = Vec::with_capacity(n_leaves);
    let mut direction = Vec::with_capacity(n_leaves);
    for leaf in 0..n_leaves {
        let mut nodes = Vec::with_capacity(depth);
        let mut dirs = Vec::with_capacity(depth);
        let mut k = 0;
        for j in 0..depth {
            let bit = ((leaf >> (depth - 1 - j)) & 1) as u8;
            nodes.push(k);
            dirs.push(bit);
            k = 2 * k + 1 + bit as usize;
        }
        node_index.push(nodes);
        direction.push(dirs);
    }
    Ok(PathTables {
        depth,
        node_index,
        direction,
    })
}

/// Learnable parameters of one dense tree.
///
/// Leaf payloads are opaque rows of `payload_dim` values; their meaning is
/// defined by the model using the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    depth: usize,
    n_features: usize,
    payload_dim: usize,
    /// `(2^d - 1) x n_features`.
    pub thresholds: Tensor,
    /// `(2^d - 1) x n_features`, pre-hardmax.
    pub feature_logits: Tensor,
    /// `2^d x payload_dim`.
    pub leaves: Tensor,
}

impl TreeParams {
    pub fn zeros(depth: usize, n_features: usize, payload_dim: usize) -> Result<Self, TreeError> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(TreeError::DepthOutOfRange(depth));
        }
        let internal = (1usize << depth) - 1;
        Ok(Self {
            depth,
            n_features,
            payload_dim,
            thresholds: Tensor::zeros(&[internal, n_features]),
            feature_logits: Tensor::zeros(&[internal, n_features]),
            leaves: Tensor::zeros(&[internal + 1, payload_dim]),
        })
    }

    pub fn from_parts(
        depth: usize,
        thresholds: Tensor,
        feature_logits: Tensor,
        leaves: Tensor,
    ) -> Result<Self, TreeError> {
        let mut out = Self::zeros(depth, thresholds.cols(), leaves.cols())?;
        let checks = [
            (thresholds.shape(), out.thresholds.shape()),
            (feature_logits.shape(), out.feature_logits.shape()),
            (leaves.shape(), out.leaves.shape()),
        ];
        for (got, want) in checks {
            if got != want {
                return Err(DiffError::ShapeMismatch {
                    op: "tree params",
                    left: got.to_vec(),
                    right: want.to_vec(),
                }
                .into());
            }
        }
        out.thresholds = thresholds;
        out.feature_logits = feature_logits;
        out.leaves = leaves;
        Ok(out)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn payload_dim(&self) -> usize {
        self.payload_dim
    }

    pub fn n_internal(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1 << self.depth
    }

    /// Feature read by `node`: hardmax of its logits.
    pub fn selected_feature(&self, node: usize) -> usize {
        argmax(self.feature_logits.row(node))
    }

    pub fn threshold(&self, node: usize, feature: usize) -> f64 {
        self.thresholds.row(node)[feature]
    }

    /// `x_f - t_f` for the feature selected at `node`.
    pub fn margin(&self, x_aug: &[f64], node: usize) -> f64 {
        let f = self.selected_feature(node);
        x_aug[f] - self.threshold(node, f)
    }

    pub fn leaf_payload(&self, leaf: usize) -> &[f64] {
        self.leaves.row(leaf)
    }

    /// Iterative root-to-leaf walk; returns the leaf index.
    pub fn forward_traversal(&self, x_aug: &[f64]) -> usize {
        self.traverse_from(x_aug, 0)
    }

    /// Leaf reached from internal node `node` following the hard splits.
    pub(crate) fn traverse_from(&self, x_aug: &[f64], mut node: usize) -> usize {
        let internal = self.n_internal();
        while node < internal {
            node = 2 * node + if hard_split(self.margin(x_aug, node)) { 2 } else { 1 };
        }
        node - internal
    }

    /// Internal nodes visited on the way to the leaf.
    pub fn traversal_path(&self, x_aug: &[f64]) -> Vec<usize> {
        let internal = self.n_internal();
        let mut path = Vec::with_capacity(self.depth);
        let mut node = 0;
        while node < internal {
            path.push(node);
            node = 2 * node + if hard_split(self.margin(x_aug, node)) { 2 } else { 1 };
        }
        path
    }

    /// Records the parameters on `tape`.
    pub fn register(&self, tape: &mut Tape) -> TreeVars {
        TreeVars {
            thresholds: tape.leaf(self.thresholds.clone()),
            feature_logits: tape.leaf(self.feature_logits.clone()),
            leaves: tape.leaf(self.leaves.clone()),
        }
    }
}

/// Tape handles of a registered [`TreeParams`].
#[derive(Debug, Clone, Copy)]
pub struct TreeVars {
    pub thresholds: Var,
    pub feature_logits: Var,
    pub leaves: Var,
}

/// `round_st(sigmoid(iota . x - iota . t))` with `iota = hardmax_st(logits[node])`.
pub fn split_eval(tape: &mut Tape, x_aug: Var, node: usize, vars: &TreeVars) -> Result<Var, TreeError> {
    let logits = tape.row(vars.feature_logits, node)?;
    let iota = tape.hardmax_st(logits)?;
    let thresholds = tape.row(vars.thresholds, node)?;
    let picked_x = tape.dot(iota, x_aug)?;
    let picked_t = tape.dot(iota, thresholds)?;
    let z = tape.sub(picked_x, picked_t)?;
    let s = tape.sigmoid(z);
    Ok(tape.round_st(s))
}

/// Product over the path of `s` (right) or `1 - s` (left).
fn indicator_from_splits(
    tape: &mut Tape,
    splits: &[Option<Var>],
    leaf: usize,
    paths: &PathTables,
    one: Var,
) -> Result<Var, TreeError> {
    let mut acc: Option<Var> = None;
    for (&node, &dir) in paths.node_index(leaf).iter().zip(paths.direction(leaf)) {
        let s = splits[node].expect("split evaluated");
        let factor = if dir == 1 { s } else { tape.sub(one, s)? };
        acc = Some(match acc {
            None => factor,
            Some(a) => tape.mul(a, factor)?,
        });
    }
    Ok(acc.expect("depth >= 1"))
}

/// Indicator that `x_aug` reaches `leaf`.
pub fn leaf_indicator(
    tape: &mut Tape,
    x_aug: Var,
    leaf: usize,
    vars: &TreeVars,
    paths: &PathTables,
) -> Result<Var, TreeError> {
    let n_internal = (1usize << paths.depth()) - 1;
    let mut splits = vec![None; n_internal];
    for &node in paths.node_index(leaf) {
        splits[node] = Some(split_eval(tape, x_aug, node, vars)?);
    }
    let one = tape.leaf(Tensor::scalar(1.0));
    indicator_from_splits(tape, &splits, leaf, paths, one)
}

/// All leaf indicators, evaluating each split once.
pub fn leaf_indicators(
    tape: &mut Tape,
    x_aug: Var,
    vars: &TreeVars,
    paths: &PathTables,
) -> Result<Vec<Var>, TreeError> {
    let n_internal = (1usize << paths.depth()) - 1;
    let mut splits = Vec::with_capacity(n_internal);
    for node in 0..n_internal {
        splits.push(Some(split_eval(tape, x_aug, node, vars)?));
    }
    let one = tape.leaf(Tensor::scalar(1.0));
    (0..paths.n_leaves())
        .map(|leaf| indicator_from_splits(tape, &splits, leaf, paths, one))
        .collect()
}

/// `sum_l indicator_l * leaves[l]`, composed from primitive tape operations.
pub fn forward_dense(
    tape: &mut Tape,
    x_aug: Var,
    vars: &TreeVars,
    paths: &PathTables,
) -> Result<Var, TreeError> {
    let indicators = leaf_indicators(tape, x_aug, vars, paths)?;
    let stacked = tape.concat(&indicators)?;
    Ok(tape.vecmat(stacked, vars.leaves)?)
}
