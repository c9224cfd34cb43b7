//! Task-conditioned sparse mixture-of-experts routing.
//!
//! Routing operates at the task level: each task id owns a trainable
//! embedding, and a per-layer two-layer tanh MLP maps that embedding to
//! expert logits. The softmax gate therefore depends only on task identity,
//! never on token content. Top-k selection keeps the largest gate entries
//! (ties toward the lowest expert index), renormalizes the retained mass,
//! and mixes only the selected experts into the residual stream.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{normal_param, zeros_param, FeedForward, LayerNormGain};
use crate::scalar::{to_f64, Scalar};
use crate::tensor::{Mode, Tape, Tensor, TensorError};

/// Denominator guard for gate renormalization.
const RENORM_EPS: f64 = 1e-12;

/// The three text-to-text tasks, with stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    /// Polarity classification.
    Pol = 0,
    /// Implicitness detection.
    Imp = 1,
    /// Appraisal rationale generation.
    Rea = 2,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Pol, TaskId::Imp, TaskId::Rea];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<TaskId> {
        match code {
            0 => Some(TaskId::Pol),
            1 => Some(TaskId::Imp),
            2 => Some(TaskId::Rea),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Pol => "pol",
            TaskId::Imp => "imp",
            TaskId::Rea => "rea",
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("expert index {index} out of range for bank of {bank}")]
    ExpertOutOfRange { index: usize, bank: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One trainable embedding row per task.
pub struct TaskEmbeddingTable<T> {
    pub weight: Tensor<T>,
}

impl<T: Scalar> TaskEmbeddingTable<T> {
    pub fn init(d_task: usize, rng: &mut ChaCha8Rng) -> Self {
        TaskEmbeddingTable {
            weight: normal_param(vec![TaskId::ALL.len(), d_task], crate::nn::INIT_STD, rng),
        }
    }

    pub fn d_task(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn deep_clone(&self) -> Self {
        TaskEmbeddingTable {
            weight: self.weight.deep_clone(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(prefix.to_string(), &self.weight);
    }
}

/// Per-layer gating network: layer norm over the task embedding followed by
/// a two-layer tanh MLP producing one logit per expert.
pub struct RouterParams<T> {
    pub ln: LayerNormGain<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn init(d_task: usize, hidden: usize, n_experts: usize, rng: &mut ChaCha8Rng) -> Self {
        RouterParams {
            ln: LayerNormGain::new(d_task),
            w1: normal_param(vec![d_task, hidden], crate::nn::INIT_STD, rng),
            b1: zeros_param(vec![hidden]),
            w2: normal_param(vec![hidden, n_experts], crate::nn::INIT_STD, rng),
            b2: zeros_param(vec![n_experts]),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn deep_clone(&self) -> Self {
        RouterParams {
            ln: self.ln.deep_clone(),
            w1: self.w1.deep_clone(),
            b1: self.b1.deep_clone(),
            w2: self.w2.deep_clone(),
            b2: self.b2.deep_clone(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln.visit(&format!("{prefix}.ln"), f);
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }
}

/// Dense gate, selected expert indices (strictly increasing) and the
/// renormalized sparse weights aligned with them. The tensors stay on the
/// tape, so gradients flow through retained entries and the renormalization;
/// the discrete selection itself is constant within a step.
pub struct GateDistribution<T> {
    pub dense: Tensor<T>,
    pub selected: Vec<usize>,
    pub sparse: Tensor<T>,
}

impl<T: Scalar> GateDistribution<T> {
    pub fn dense_probs(&self) -> Vec<f64> {
        self.dense.with_data(|d| d.iter().map(|&v| to_f64(v)).collect())
    }

    pub fn sparse_weights(&self) -> Vec<f64> {
        self.sparse.with_data(|d| d.iter().map(|&v| to_f64(v)).collect())
    }

    pub fn n_experts(&self) -> usize {
        self.dense.numel()
    }
}

/// One expert feed-forward network; `calls` counts forward evaluations so
/// compute sparsity is assertable.
pub struct Expert<T> {
    pub ff: FeedForward<T>,
    calls: Cell<u64>,
}

impl<T: Scalar> Expert<T> {
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.calls.set(self.calls.get() + 1);
        self.ff.forward(tape, x)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.get()
    }

    pub fn reset_call_count(&self) {
        self.calls.set(0);
    }
}

/// The expert set replacing one dense feed-forward sublayer.
pub struct ExpertBank<T> {
    pub experts: Vec<Expert<T>>,
}

impl<T: Scalar> ExpertBank<T> {
    /// Fresh random experts (the alternative to clone-with-noise upcycling).
    pub fn fresh(d_model: usize, d_ff: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        ExpertBank {
            experts: (0..n)
                .map(|_| Expert {
                    ff: FeedForward::init(d_model, d_ff, rng),
                    calls: Cell::new(0),
                })
                .collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn deep_clone(&self) -> Self {
        ExpertBank {
            experts: self
                .experts
                .iter()
                .map(|e| Expert {
                    ff: e.ff.deep_clone(),
                    calls: Cell::new(0),
                })
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.ff.visit(&format!("{prefix}.expert{i}"), f);
        }
    }
}

/// Clone-with-noise upcycling: every expert starts from the given dense
/// feed-forward weights plus independent gaussian noise of std `noise_std`.
pub fn init_experts<T: Scalar>(
    dense: &FeedForward<T>,
    n: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> ExpertBank<T> {
    use rand_distr::{Distribution, Normal};
    let experts = (0..n)
        .map(|_| {
            let ff = dense.deep_clone();
            ff.w1.set_requires_grad(true);
            ff.b1.set_requires_grad(true);
            ff.w2.set_requires_grad(true);
            ff.b2.set_requires_grad(true);
            if noise_std > 0.0 {
                let dist = Normal::new(0.0f64, noise_std).expect("valid std");
                for t in [&ff.w1, &ff.b1, &ff.w2, &ff.b2] {
                    t.update_data(|data, _| {
                        for v in data.iter_mut() {
                            *v += crate::scalar::cast::<T>(dist.sample(rng));
                        }
                    });
                }
            }
            Expert {
                ff,
                calls: Cell::new(0),
            }
        })
        .collect();
    ExpertBank { experts }
}

/// Dense gate for a task: `softmax(MLP(LN(tau_t)))`. Depends only on task
/// identity, never on token content.
pub fn route<T: Scalar>(
    tape: &Tape<T>,
    router: &RouterParams<T>,
    table: &TaskEmbeddingTable<T>,
    task: TaskId,
) -> Result<Tensor<T>, TensorError> {
    let tau = tape.gather_rows(&table.weight, &[task.code()])?;
    let normed = router.ln.forward(tape, &tau)?;
    let h = tape.tanh(&tape.add(&tape.matmul(&normed, &router.w1)?, &router.b1)?)?;
    let logits = tape.add(&tape.matmul(&h, &router.w2)?, &router.b2)?;
    let probs = tape.softmax(&logits, 1)?;
    let n = router.n_experts();
    tape.reshape(&probs, vec![n])
}

/// Indices of the k largest entries, ties resolved toward the lowest index,
/// returned in increasing index order.
pub fn topk_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let mut taken = vec![false; values.len()];
    let mut selected = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) => {
                    if *v > values[b] {
                        best = Some(i);
                    }
                }
            }
        }
        let b = best.expect("k <= len");
        taken[b] = true;
        selected.push(b);
    }
    selected.sort_unstable();
    selected
}

/// Keeps the k largest gate entries and renormalizes the retained mass.
/// `k >= n` keeps the dense gate unchanged (no truncation).
pub fn sparsify_topk<T: Scalar>(
    tape: &Tape<T>,
    dense: &Tensor<T>,
    k: usize,
) -> Result<GateDistribution<T>, MoeError> {
    if k == 0 {
        return Err(MoeError::ZeroTopK);
    }
    let n = dense.numel();
    if k >= n {
        return Ok(GateDistribution {
            dense: dense.clone(),
            selected: (0..n).collect(),
            sparse: dense.clone(),
        });
    }
    let selected = dense.with_data(|d| topk_indices(d, k));
    let mut mask_data = vec![T::zero(); n];
    for &i in &selected {
        mask_data[i] = T::one();
    }
    let mask = Tensor::from_vec(mask_data);
    let kept = tape.mul(dense, &mask)?;
    let total = tape.sum_all(&kept)?;
    let inv = tape.recip_eps(&total, RENORM_EPS)?;
    let renormed = tape.mul(&kept, &inv)?;
    let sparse = tape.gather_rows(&renormed, &selected)?;
    Ok(GateDistribution {
        dense: dense.clone(),
        selected,
        sparse,
    })
}

/// Full routed feed-forward sublayer:
/// `h + Drop(sum_j sparse_j * E_j(LN(h)))`, evaluating only selected experts.
#[allow(clippy::too_many_arguments)]
pub fn moe_ffn_forward<T: Scalar>(
    tape: &Tape<T>,
    bank: &ExpertBank<T>,
    gate: &GateDistribution<T>,
    ln: &LayerNormGain<T>,
    h: &Tensor<T>,
    dropout_rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, MoeError> {
    let normed = ln.forward(tape, h)?;
    let mut mixture: Option<Tensor<T>> = None;
    for (slot, &j) in gate.selected.iter().enumerate() {
        let expert = bank
            .experts
            .get(j)
            .ok_or(MoeError::ExpertOutOfRange {
                index: j,
                bank: bank.n_experts(),
            })?;
        let weight = tape.select(&gate.sparse, slot)?;
        let out = expert.forward(tape, &normed)?;
        let term = tape.mul(&out, &weight)?;
        mixture = Some(match mixture {
            None => term,
            Some(m) => tape.add(&m, &term)?,
        });
    }
    let mixture = mixture.ok_or(MoeError::ZeroTopK)?;
    let dropped = tape.dropout(&mixture, dropout_rate, mode, rng)?;
    Ok(tape.add(h, &dropped)?)
}
