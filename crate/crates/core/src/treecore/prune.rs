use serde::{Deserialize, Serialize};

use super::{hard_split, TreeError, TreeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrunedNode {
    Split {
        /// Breadth-first index in the dense tree.
        source: usize,
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Leaf index in the dense tree.
        source: usize,
        payload: Vec<f64>,
    },
}

/// A tree with its redundant paths removed. `nodes` is an arena; `root`
/// indexes into it and is stored last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedTree {
    pub n_features: usize,
    pub root: usize,
    pub nodes: Vec<PrunedNode>,
}

impl PrunedTree {
    /// Unpruned copy of `params`.
    pub fn from_params(params: &TreeParams) -> Self {
        let mut nodes = Vec::new();
        let root = copy_subtree(params, 0, &mut nodes);
        Self {
            n_features: params.n_features(),
            root,
            nodes,
        }
    }

    /// Number of nodes, internal and leaf.
    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, PrunedNode::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(tree: &PrunedTree, id: usize) -> usize {
            match &tree.nodes[id] {
                PrunedNode::Leaf { .. } => 0,
                PrunedNode::Split { left, right, .. } => 1 + go(tree, *left).max(go(tree, *right)),
            }
        }
        go(self, self.root)
    }

    /// Arena index of the leaf reached by `x_aug`.
    pub fn route(&self, x_aug: &[f64]) -> usize {
        let mut id = self.root;
        loop {
            match &self.nodes[id] {
                PrunedNode::Leaf { .. } => return id,
                PrunedNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    id = if hard_split(x_aug[*feature] - threshold) { *right } else { *left };
                }
            }
        }
    }

    /// `(dense leaf index, payload)` reached by `x_aug`.
    pub fn leaf_for(&self, x_aug: &[f64]) -> (usize, &[f64]) {
        match &self.nodes[self.route(x_aug)] {
            PrunedNode::Leaf { source, payload } => (*source, payload),
            PrunedNode::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }
}

fn copy_subtree(params: &TreeParams, node: usize, out: &mut Vec<PrunedNode>) -> usize {
    let internal = params.n_internal();
    if node >= internal {
        let leaf = node - internal;
        out.push(PrunedNode::Leaf {
            source: leaf,
            payload: params.leaf_payload(leaf).to_vec(),
        });
        return out.len() - 1;
    }
    let left = copy_subtree(params, 2 * node + 1, out);
    let right = copy_subtree(params, 2 * node + 2, out);
    let feature = params.selected_feature(node);
    out.push(PrunedNode::Split {
        source: node,
        feature,
        threshold: params.threshold(node, feature),
        left,
        right,
    });
    out.len() - 1
}

/// Removes every subtree no input in `inputs` reaches, bypasses splits whose
/// inputs all take the same branch, and merges sibling leaves for which
/// `equivalent` holds.
///
/// Routing of every input in `inputs` is preserved exactly, up to the merge
/// of equivalent leaves.
pub fn prune<'a, I, E>(params: &TreeParams, inputs: I, equivalent: E) -> Result<PrunedTree, TreeError>
where
    I: IntoIterator<Item = &'a [f64]>,
    E: Fn(&[f64], &[f64]) -> bool,
{
    let internal = params.n_internal();
    let mut visited = vec![false; internal + params.n_leaves()];
    let mut any = false;
    for x in inputs {
        if x.len() != params.n_features() {
            return Err(TreeError::FeatureCount {
                expected: params.n_features(),
                got: x.len(),
            });
        }
        any = true;
        let mut node = 0;
        while node < internal {
            visited[node] = true;
            node = 2 * node + if hard_split(params.margin(x, node)) { 2 } else { 1 };
        }
        visited[node] = true;
    }
    if !any {
        return Err(TreeError::EmptyPruningSet);
    }

    let mut nodes = Vec::new();
    let root = build(params, 0, &visited, &equivalent, &mut nodes).expect("root visited");
    Ok(PrunedTree {
        n_features: params.n_features(),
        root,
        nodes,
    })
}

fn build<E>(
    params: &TreeParams,
    node: usize,
    visited: &[bool],
    equivalent: &E,
    out: &mut Vec<PrunedNode>,
) -> Option<usize>
where
    E: Fn(&[f64], &[f64]) -> bool,
{
    if !visited[node] {
        return None;
    }
    let internal = params.n_internal();
    if node >= internal {
        let leaf = node - internal;
        out.push(PrunedNode::Leaf {
            source: leaf,
            payload: params.leaf_payload(leaf).to_vec(),
        });
        return Some(out.len() - 1);
    }
    let left = build(params, 2 * node + 1, visited, equivalent, out);
    let right = build(params, 2 * node + 2, visited, equivalent, out);
    match (left, right) {
        (None, None) => None,
        (Some(only), None) | (None, Some(only)) => Some(only),
        (Some(l), Some(r)) => {
            if let (PrunedNode::Leaf { payload: pl, .. }, PrunedNode::Leaf { payload: pr, .. }) =
                (&out[l], &out[r])
            {
                if equivalent(pl, pr) {
                    // Both leaves were pushed last, right after left.
                    debug_assert_eq!(r, out.len() - 1);
                    out.pop();
                    return Some(l);
                }
            }
            let feature = params.selected_feature(node);
            out.push(PrunedNode::Split {
                source: node,
                feature,
                threshold: params.threshold(node, feature),
                left: l,
                right: r,
            });
            Some(out.len() - 1)
        }
    }
}
