//! Routing diagnostics: per-task entropy, top-1 expert dominance and
//! pairwise gate similarity, extracted from a model in eval mode and
//! emitted as CSV and SVG.

mod report;

pub use report::{emit_report, AnalysisError, ReportFormat};

use std::collections::BTreeMap;

use crate::model::{LayerId, Model, ModelError};
use crate::moe::TaskId;
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Plain-value gate snapshot for one (layer, task).
#[derive(Debug, Clone)]
pub struct GateValues {
    pub dense: Vec<f64>,
    pub selected: Vec<usize>,
    pub sparse: Vec<f64>,
}

/// Dense and sparse gates for every routed layer and task.
#[derive(Debug, Clone, Default)]
pub struct RoutingSnapshot {
    pub gates: BTreeMap<(LayerId, TaskId), GateValues>,
    pub n_experts: usize,
}

impl RoutingSnapshot {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Result<Self, ModelError> {
        let tape = Tape::inference();
        let mut gates = BTreeMap::new();
        for layer in model.routed_layer_ids() {
            for task in TaskId::ALL {
                let gate = model.gate_distribution(&tape, layer, task)?;
                gates.insert(
                    (layer, task),
                    GateValues {
                        dense: gate.dense_probs(),
                        selected: gate.selected.clone(),
                        sparse: gate.sparse_weights(),
                    },
                );
            }
        }
        Ok(RoutingSnapshot {
            gates,
            n_experts: model.config().n_experts,
        })
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut layers: Vec<LayerId> = self.gates.keys().map(|(l, _)| *l).collect();
        layers.dedup();
        layers
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

/// Shannon entropy in nats, with `0 ln 0 := 0`.
fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Per-task routing entropy over dense gates, averaged over routed layers.
pub fn routing_entropy(snapshot: &RoutingSnapshot) -> BTreeMap<TaskId, f64> {
    let layers = snapshot.layers();
    let mut out = BTreeMap::new();
    if layers.is_empty() {
        return out;
    }
    for task in TaskId::ALL {
        let total: f64 = layers
            .iter()
            .map(|l| entropy(&snapshot.gates[&(*l, task)].dense))
            .sum();
        out.insert(task, total / layers.len() as f64);
    }
    out
}

/// Entropy of every (layer, task) dense gate.
pub fn per_layer_entropy(snapshot: &RoutingSnapshot) -> BTreeMap<(LayerId, TaskId), f64> {
    snapshot
        .gates
        .iter()
        .map(|(key, gate)| (*key, entropy(&gate.dense)))
        .collect()
}

/// Argmax expert and its dense probability per (layer, task); ties go to
/// the lowest expert index.
pub fn top1_dominance(snapshot: &RoutingSnapshot) -> BTreeMap<(LayerId, TaskId), (usize, f64)> {
    snapshot
        .gates
        .iter()
        .map(|(key, gate)| {
            let mut best = 0usize;
            for (i, &p) in gate.dense.iter().enumerate() {
                if p > gate.dense[best] {
                    best = i;
                }
            }
            (*key, (best, gate.dense[best]))
        })
        .collect()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// 3x3 symmetric matrix of layer-averaged pairwise dense-gate cosines, in
/// `TaskId::ALL` order. The off-diagonal mean equals the separation loss.
pub fn gate_similarity_matrix(snapshot: &RoutingSnapshot) -> [[f64; 3]; 3] {
    let layers = snapshot.layers();
    let mut m = [[1.0f64; 3]; 3];
    if layers.is_empty() {
        return m;
    }
    for (i, a) in TaskId::ALL.iter().enumerate() {
        for (j, b) in TaskId::ALL.iter().enumerate() {
            let total: f64 = layers
                .iter()
                .map(|l| cosine(&snapshot.gates[&(*l, *a)].dense, &snapshot.gates[&(*l, *b)].dense))
                .sum();
            m[i][j] = total / layers.len() as f64;
        }
    }
    m
}

/// Mean of the six off-diagonal entries (equals the separation loss).
pub fn off_diagonal_mean(matrix: &[[f64; 3]; 3]) -> f64 {
    let mut total = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                total += matrix[i][j];
            }
        }
    }
    total / 6.0
}
