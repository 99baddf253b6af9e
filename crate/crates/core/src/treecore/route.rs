//! Fused hard-mode tree routing.
//!
//! With hard splits every leaf indicator is 0 or 1, so the dense sum
//! `sum_l indicator_l * leaves[l]` has a sparse derivative: only the nodes on
//! the taken path receive split gradients, and the derivative of the output
//! with respect to the split at path node `k` is `leaves[R_k] - leaves[L_k]`,
//! where `R_k`/`L_k` are the leaves reached by forcing node `k` right/left and
//! following the hard splits below it. This op computes exactly the gradient
//! of [`forward_dense`](super::forward_dense) in `O(depth^2)` instead of
//! `O(2^depth)`.

use std::rc::Rc;

use super::{hard_split, TreeError, TreeParams, TreeVars};
use crate::diffcore::{argmax, sigmoid, softmax_slice, softmax_vjp, CustomOp, Mode, Tape, Tensor, Var};

/// Per-node hardmax choice and softmax surrogate, fixed while parameters are.
#[derive(Debug, Clone)]
pub struct RouteCache {
    n_internal: usize,
    features: Vec<usize>,
    probs: Vec<Vec<f64>>,
}

impl RouteCache {
    pub fn new(params: &TreeParams) -> Self {
        let n_internal = params.n_internal();
        let mut features = Vec::with_capacity(n_internal);
        let mut probs = Vec::with_capacity(n_internal);
        for node in 0..n_internal {
            let row = params.feature_logits.row(node);
            features.push(argmax(row));
            probs.push(softmax_slice(row));
        }
        Self {
            n_internal,
            features,
            probs,
        }
    }

    fn margin(&self, x: &[f64], thresholds: &Tensor, node: usize) -> f64 {
        let f = self.features[node];
        x[f] - thresholds.row(node)[f]
    }

    fn descend(&self, x: &[f64], thresholds: &Tensor, mut node: usize) -> usize {
        while node < self.n_internal {
            let right = hard_split(self.margin(x, thresholds, node));
            node = 2 * node + if right { 2 } else { 1 };
        }
        node - self.n_internal
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    node: usize,
    margin: f64,
    right: bool,
    alt_leaf: usize,
}

#[derive(Debug)]
struct RouteOp {
    cache: Rc<RouteCache>,
    steps: Vec<Step>,
    taken: usize,
}

impl CustomOp for RouteOp {
    fn name(&self) -> &'static str {
        "route_hard"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, grads: &mut [&mut Tensor]) {
        let (x, thresholds, leaves) = (inputs[0].data(), inputs[1], inputs[3]);
        let g = grad_out.data();
        for (d, s) in grads[3].row_mut(self.taken).iter_mut().zip(g) {
            *d += s;
        }
        let taken = leaves.row(self.taken);
        let n = x.len();
        let mut g_iota = vec![0.0; n];
        for step in &self.steps {
            let alt = leaves.row(step.alt_leaf);
            let mut g_split = 0.0;
            for p in 0..g.len() {
                let (right, left) = if step.right { (taken[p], alt[p]) } else { (alt[p], taken[p]) };
                g_split += g[p] * (right - left);
            }
            let s = sigmoid(step.margin);
            let g_z = g_split * s * (1.0 - s);
            if g_z == 0.0 {
                continue;
            }
            let f = self.cache.features[step.node];
            grads[0].data_mut()[f] += g_z;
            grads[1].row_mut(step.node)[f] -= g_z;
            let t_row = thresholds.row(step.node);
            for i in 0..n {
                g_iota[i] = g_z * (x[i] - t_row[i]);
            }
            let g_logits = softmax_vjp(&self.cache.probs[step.node], &g_iota);
            for (d, v) in grads[2].row_mut(step.node).iter_mut().zip(&g_logits) {
                *d += v;
            }
        }
    }
}

/// Selected leaf payload of a hard tree, recorded as one fused tape node.
///
/// Only valid on a [`Mode::Hard`] tape; soft trees need
/// [`forward_dense`](super::forward_dense). `cache` must be built from the
/// same parameter values that were registered as `vars`.
pub fn route_hard(
    tape: &mut Tape,
    x_aug: Var,
    vars: &TreeVars,
    cache: &Rc<RouteCache>,
) -> Result<(Var, usize), TreeError> {
    if tape.mode() != Mode::Hard {
        return Err(TreeError::Malformed("route_hard requires a hard-mode tape".into()));
    }
    let x = tape.value(x_aug).data();
    let thresholds = tape.value(vars.thresholds);
    if x.len() != thresholds.cols() {
        return Err(TreeError::FeatureCount {
            expected: thresholds.cols(),
            got: x.len(),
        });
    }
    let mut steps = Vec::new();
    let mut node = 0;
    while node < cache.n_internal {
        let margin = cache.margin(x, thresholds, node);
        let right = hard_split(margin);
        let alt_child = 2 * node + if right { 1 } else { 2 };
        steps.push(Step {
            node,
            margin,
            right,
            alt_leaf: cache.descend(x, thresholds, alt_child),
        });
        node = 2 * node + if right { 2 } else { 1 };
    }
    let taken = node - cache.n_internal;
    let value = Tensor::vector(tape.value(vars.leaves).row(taken).to_vec());
    let op = RouteOp {
        cache: Rc::clone(cache),
        steps,
        taken,
    };
    let out = tape.custom(
        Box::new(op),
        &[x_aug, vars.thresholds, vars.feature_logits, vars.leaves],
        value,
    )?;
    Ok((out, taken))
}
