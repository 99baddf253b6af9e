use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::{json, Value};

use super::{PrunedNode, PrunedTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            other => Err(TreeError::UnknownFormat(other.to_string())),
        }
    }
}

/// Names features and summarises leaf payloads for rendering.
pub trait LeafDescriber {
    fn feature_name(&self, feature: usize) -> String;
    /// One-line label, `\n` separated rows allowed.
    fn leaf_label(&self, payload: &[f64]) -> String;
    fn leaf_summary(&self, payload: &[f64]) -> Value;
}

/// Generic labels: `f_i` features, raw payload values.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainDescriber;

impl LeafDescriber for PlainDescriber {
    fn feature_name(&self, feature: usize) -> String {
        format!("f_{feature}")
    }

    fn leaf_label(&self, payload: &[f64]) -> String {
        payload
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn leaf_summary(&self, payload: &[f64]) -> Value {
        json!({ "payload": payload })
    }
}

pub fn export_graph(tree: &PrunedTree, format: GraphFormat, describer: &dyn LeafDescriber) -> String {
    match format {
        GraphFormat::Dot => to_dot(tree, describer),
        GraphFormat::Json => to_json(tree, describer),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn to_dot(tree: &PrunedTree, describer: &dyn LeafDescriber) -> String {
    let mut out = String::from("digraph remede {\n    node [fontname=\"Helvetica\"];\n");
    // Preorder from the root so node ids read top-down.
    let mut stack = vec![tree.root];
    let mut edges = String::new();
    while let Some(id) = stack.pop() {
        match &tree.nodes[id] {
            PrunedNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let name = describer.feature_name(*feature);
                let _ = writeln!(out, "    n{id} [shape=ellipse, label=\"{}\"];", escape(&name));
                let _ = writeln!(edges, "    n{id} -> n{left} [label=\"< {threshold:.4}\"];");
                let _ = writeln!(edges, "    n{id} -> n{right} [label=\">= {threshold:.4}\"];");
                stack.push(*right);
                stack.push(*left);
            }
            PrunedNode::Leaf { source, payload } => {
                let label = format!("leaf {source}\n{}", describer.leaf_label(payload));
                let _ = writeln!(out, "    n{id} [shape=box, label=\"{}\"];", escape(&label));
            }
        }
    }
    out.push_str(&edges);
    out.push_str("}\n");
    out
}

fn to_json(tree: &PrunedTree, describer: &dyn LeafDescriber) -> String {
    let nodes: Vec<Value> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(id, node)| match node {
            PrunedNode::Split {
                source,
                feature,
                threshold,
                left,
                right,
            } => json!({
                "id": id,
                "kind": "split",
                "source": source,
                "feature": feature,
                "feature_name": describer.feature_name(*feature),
                "threshold": threshold,
                "condition_left": format!("{} < {threshold}", describer.feature_name(*feature)),
                "condition_right": format!("{} >= {threshold}", describer.feature_name(*feature)),
                "left": left,
                "right": right,
            }),
            PrunedNode::Leaf { source, payload } => json!({
                "id": id,
                "kind": "leaf",
                "source": source,
                "payload": payload,
                "summary": describer.leaf_summary(payload),
            }),
        })
        .collect();
    let doc = json!({
        "n_features": tree.n_features,
        "size": tree.size(),
        "root": tree.root,
        "nodes": nodes,
    });
    serde_json::to_string_pretty(&doc).expect("json value serialises")
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, TreeError> {
    v.get(key)
        .ok_or_else(|| TreeError::Malformed(format!("missing field `{key}`")))
}

fn as_index(v: &Value, key: &str) -> Result<usize, TreeError> {
    field(v, key)?
        .as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| TreeError::Malformed(format!("`{key}` is not an index")))
}

impl PrunedTree {
    /// Reads the JSON produced by [`export_graph`].
    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| TreeError::Malformed(e.to_string()))?;
        let raw = field(&doc, "nodes")?
            .as_array()
            .ok_or_else(|| TreeError::Malformed("`nodes` is not an array".into()))?;
        let mut nodes = Vec::with_capacity(raw.len());
        for (i, n) in raw.iter().enumerate() {
            if as_index(n, "id")? != i {
                return Err(TreeError::Malformed(format!("node {i} out of order")));
            }
            let kind = field(n, "kind")?.as_str().unwrap_or_default();
            nodes.push(match kind {
                "split" => PrunedNode::Split {
                    source: as_index(n, "source")?,
                    feature: as_index(n, "feature")?,
                    threshold: field(n, "threshold")?
                        .as_f64()
                        .ok_or_else(|| TreeError::Malformed("threshold".into()))?,
                    left: as_index(n, "left")?,
                    right: as_index(n, "right")?,
                },
                "leaf" => PrunedNode::Leaf {
                    source: as_index(n, "source")?,
                    payload: serde_json::from_value(field(n, "payload")?.clone())
                        .map_err(|e| TreeError::Malformed(e.to_string()))?,
                },
                other => return Err(TreeError::Malformed(format!("unknown node kind `{other}`"))),
            });
        }
        let tree = Self {
            n_features: as_index(&doc, "n_features")?,
            root: as_index(&doc, "root")?,
            nodes,
        };
        for node in &tree.nodes {
            if let PrunedNode::Split { left, right, .. } = node {
                if *left >= tree.nodes.len() || *right >= tree.nodes.len() {
                    return Err(TreeError::Malformed("child index out of range".into()));
                }
            }
        }
        if tree.root >= tree.nodes.len() {
            return Err(TreeError::Malformed("root index out of range".into()));
        }
        Ok(tree)
    }
}
