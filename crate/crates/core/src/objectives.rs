//! Training objectives: multi-task generation NLL, task-separated routing
//! loss, and their weighted sum.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::data::{TaskExample, PAD_ID};
use crate::model::{LayerId, Model, ModelError};
use crate::moe::TaskId;
use crate::scalar::{cast, Scalar};
use crate::tensor::{Mode, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("missing gate for task {task} at routed layer {layer}")]
    MissingGate { layer: LayerId, task: TaskId },
    #[error("lambda_sep must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Generation loss over a batch, kept in both summed and token-mean form.
/// The summed tensor supports gradient accumulation where the final scale
/// (1 / total tokens across the step) is applied after all microbatches.
pub struct GenerationLoss<T> {
    pub sum: Tensor<T>,
    pub mean: Tensor<T>,
    pub token_count: usize,
    /// Mean NLL per task over the tokens this batch contributed.
    pub per_task: BTreeMap<TaskId, f64>,
}

/// Token-level negative log-likelihood chain for one example.
/// Returns the per-token NLL sum and the number of scored tokens; padding
/// positions are excluded.
pub(crate) fn nll_from_logits<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    target: &[usize],
) -> Result<(Tensor<T>, usize), TensorError> {
    let vocab = logits.shape()[1];
    let probs = tape.softmax(logits, 1)?;
    let mut total: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for (s, &token) in target.iter().enumerate() {
        if token == PAD_ID {
            continue;
        }
        let p = tape.select(&probs, s * vocab + token)?;
        let nll = tape.neg(&tape.log(&p)?)?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(&t, &nll)?,
        });
        count += 1;
    }
    let total = total.unwrap_or_else(|| Tensor::scalar(T::zero()));
    Ok((total, count))
}

/// Mean over all (non-pad) target tokens in the batch of
/// `-log p(y_s | y_<s, prompt, task)`, teacher forced.
pub fn generation_loss<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    batch: &[TaskExample],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationLoss<T>, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut sum: Option<Tensor<T>> = None;
    let mut token_count = 0usize;
    let mut per_task_sum: BTreeMap<TaskId, f64> = BTreeMap::new();
    let mut per_task_count: BTreeMap<TaskId, usize> = BTreeMap::new();
    for example in batch {
        let logits = model.forward_teacher_forced(
            tape,
            &example.prompt_tokens,
            &example.target_tokens,
            example.task,
            mode,
            rng,
        )?;
        let (example_sum, count) = nll_from_logits(tape, &logits, &example.target_tokens)?;
        *per_task_sum.entry(example.task).or_insert(0.0) += example_sum.item_f64();
        *per_task_count.entry(example.task).or_insert(0) += count;
        token_count += count;
        sum = Some(match sum {
            None => example_sum,
            Some(t) => tape.add(&t, &example_sum)?,
        });
    }
    let sum = sum.expect("nonempty batch");
    let mean = tape.scalar_mul(&sum, T::one() / cast::<T>(token_count.max(1) as f64))?;
    let per_task = per_task_sum
        .into_iter()
        .map(|(task, s)| (task, s / per_task_count[&task].max(1) as f64))
        .collect();
    Ok(GenerationLoss {
        sum,
        mean,
        token_count,
        per_task,
    })
}

/// Mean over routed layers of the mean pairwise cosine similarity between
/// the three tasks' dense gates. Cosine symmetry makes the ordered-pair
/// average equal the unordered one, so the three unordered pairs are used.
pub fn separation_loss<T: Scalar>(
    tape: &Tape<T>,
    gates: &BTreeMap<(LayerId, TaskId), Tensor<T>>,
) -> Result<Tensor<T>, ObjectiveError> {
    let layers: BTreeSet<LayerId> = gates.keys().map(|(l, _)| *l).collect();
    if layers.is_empty() {
        return Ok(Tensor::scalar(T::zero()));
    }
    for &layer in &layers {
        for task in TaskId::ALL {
            if !gates.contains_key(&(layer, task)) {
                return Err(ObjectiveError::MissingGate { layer, task });
            }
        }
    }
    const PAIRS: [(TaskId, TaskId); 3] = [
        (TaskId::Pol, TaskId::Imp),
        (TaskId::Pol, TaskId::Rea),
        (TaskId::Imp, TaskId::Rea),
    ];
    let mut total: Option<Tensor<T>> = None;
    for &layer in &layers {
        for (a, b) in PAIRS {
            let cos = tape.cosine_similarity(&gates[&(layer, a)], &gates[&(layer, b)])?;
            total = Some(match total {
                None => cos,
                Some(t) => tape.add(&t, &cos)?,
            });
        }
    }
    let total = total.expect("at least one layer");
    let scale = T::one() / cast::<T>((layers.len() * PAIRS.len()) as f64);
    Ok(tape.scalar_mul(&total, scale)?)
}

/// Scalar losses and their weighted combination; tensors stay on the tape
/// so gradients reach router and task-embedding parameters from both terms.
pub struct LossBreakdown<T> {
    pub loss_gen: Tensor<T>,
    pub loss_sep: Tensor<T>,
    pub loss_total: Tensor<T>,
    pub lambda_sep: f64,
    pub per_task_gen: BTreeMap<TaskId, f64>,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn gen_value(&self) -> f64 {
        self.loss_gen.item_f64()
    }

    pub fn sep_value(&self) -> f64 {
        self.loss_sep.item_f64()
    }

    pub fn total_value(&self) -> f64 {
        self.loss_total.item_f64()
    }
}

/// `loss_total = loss_gen + lambda_sep * loss_sep`. With `lambda_sep == 0`
/// the total is the generation loss tensor itself, bit for bit.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    loss_gen: &Tensor<T>,
    loss_sep: &Tensor<T>,
    lambda_sep: f64,
    per_task_gen: BTreeMap<TaskId, f64>,
) -> Result<LossBreakdown<T>, ObjectiveError> {
    if lambda_sep < 0.0 {
        return Err(ObjectiveError::NegativeLambda(lambda_sep));
    }
    let loss_total = if lambda_sep == 0.0 {
        loss_gen.clone()
    } else {
        let weighted = tape.scalar_mul(loss_sep, cast::<T>(lambda_sep))?;
        tape.add(loss_gen, &weighted)?
    };
    Ok(LossBreakdown {
        loss_gen: loss_gen.clone(),
        loss_sep: loss_sep.clone(),
        loss_total,
        lambda_sep,
        per_task_gen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{corpus_words, build_task_examples, AnnotatedInstance, Polarity, Vocabulary};
    use crate::model::{ModelConfig, Stack};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layer(stack: Stack, block: usize) -> LayerId {
        LayerId { stack, block }
    }

    fn gate_map(
        rows: &[(LayerId, TaskId, Vec<f64>)],
    ) -> BTreeMap<(LayerId, TaskId), Tensor<f64>> {
        rows.iter()
            .map(|(l, t, v)| ((*l, *t), Tensor::from_vec(v.clone())))
            .collect()
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let cfg = ModelConfig::tiny(32);
        let model: Model<f64> = Model::build(&cfg, &mut rng(1)).unwrap();
        // zero output projection -> all-equal logits -> uniform distribution
        for (name, t) in model.named_params() {
            if name == "out_proj" {
                t.copy_from_slice(&vec![0.0; t.numel()]).unwrap();
            }
        }
        let inst = AnnotatedInstance {
            text: "the soup was cold".into(),
            aspect: "soup".into(),
            polarity: Polarity::Negative,
            implicit: true,
            rationale: "they waited too long".into(),
        };
        let vocab = Vocabulary::build(corpus_words(&[inst.clone()]).iter().map(|s| s.as_str()));
        // keep prompts/targets within the tiny 32-token vocab
        assert!(vocab.len() <= 32);
        let (examples, _) = build_task_examples(&inst, 0, &vocab);
        let tape = Tape::new();
        let loss =
            generation_loss(&tape, &model, &examples, Mode::Eval, &mut rng(2)).unwrap();
        let expect = (32f64).ln(); // 3.4657359027997265
        assert!(
            (loss.mean.item() - expect).abs() < 1e-12,
            "{} vs {expect}",
            loss.mean.item()
        );
        assert_eq!(loss.per_task.len(), 3);
        for v in loss.per_task.values() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = ModelConfig::tiny(32);
        let model: Model<f64> = Model::build(&cfg, &mut rng(3)).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            generation_loss(&tape, &model, &[], Mode::Eval, &mut rng(4)),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let tape: Tape<f64> = Tape::new();
        let mut logits = vec![0.0; 4];
        logits[2] = 60.0; // argmax-saturated toward token 2
        let logits = Tensor::new(vec![1, 4], logits).unwrap();
        let (sum, count) = nll_from_logits(&tape, &logits, &[2]).unwrap();
        assert_eq!(count, 1);
        assert!(sum.item() < 1e-9, "{}", sum.item());
    }

    #[test]
    fn hand_set_logits_match_frozen_oracle() {
        let tape: Tape<f64> = Tape::new();
        let logits = Tensor::new(
            vec![2, 4],
            vec![1.0, 0.0, 2.0, 0.5, 0.2, -1.0, 0.0, 3.0],
        )
        .unwrap();
        let (sum, count) = nll_from_logits(&tape, &logits, &[2, 3]).unwrap();
        let mean = sum.item() / count as f64;
        assert!((mean - 0.3336307044769029).abs() < 1e-12, "{mean}");
    }

    #[test]
    fn pad_positions_are_excluded() {
        let tape: Tape<f64> = Tape::new();
        let logits = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let (sum, count) = nll_from_logits(&tape, &logits, &[PAD_ID, 3]).unwrap();
        assert_eq!(count, 1);
        assert!((sum.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_gates_give_unit_separation() {
        let tape: Tape<f64> = Tape::new();
        let g = vec![0.4, 0.3, 0.3];
        let l1 = layer(Stack::Encoder, 2);
        let l2 = layer(Stack::Decoder, 2);
        let gates = gate_map(&[
            (l1, TaskId::Pol, g.clone()),
            (l1, TaskId::Imp, g.clone()),
            (l1, TaskId::Rea, g.clone()),
            (l2, TaskId::Pol, g.clone()),
            (l2, TaskId::Imp, g.clone()),
            (l2, TaskId::Rea, g.clone()),
        ]);
        let loss = separation_loss(&tape, &gates).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_gates_give_zero_separation() {
        let tape: Tape<f64> = Tape::new();
        let l = layer(Stack::Encoder, 1);
        let gates = gate_map(&[
            (l, TaskId::Pol, vec![1.0, 0.0, 0.0]),
            (l, TaskId::Imp, vec![0.0, 1.0, 0.0]),
            (l, TaskId::Rea, vec![0.0, 0.0, 1.0]),
        ]);
        let loss = separation_loss(&tape, &gates).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn hand_built_gates_match_third() {
        let tape: Tape<f64> = Tape::new();
        let l = layer(Stack::Encoder, 1);
        let gates = gate_map(&[
            (l, TaskId::Pol, vec![0.5, 0.5, 0.0]),
            (l, TaskId::Imp, vec![0.5, 0.5, 0.0]),
            (l, TaskId::Rea, vec![0.0, 0.0, 1.0]),
        ]);
        let loss = separation_loss(&tape, &gates).unwrap();
        assert!((loss.item() - 1.0 / 3.0).abs() < 1e-9, "{}", loss.item());
    }

    #[test]
    fn missing_gate_rejected() {
        let tape: Tape<f64> = Tape::new();
        let l = layer(Stack::Encoder, 1);
        let gates = gate_map(&[
            (l, TaskId::Pol, vec![1.0, 0.0]),
            (l, TaskId::Imp, vec![0.0, 1.0]),
        ]);
        assert!(matches!(
            separation_loss(&tape, &gates),
            Err(ObjectiveError::MissingGate {
                task: TaskId::Rea,
                ..
            })
        ));
    }

    #[test]
    fn permutation_equivariance() {
        let tape: Tape<f64> = Tape::new();
        let l = layer(Stack::Decoder, 4);
        let perm = |v: &[f64]| vec![v[2], v[0], v[3], v[1]];
        let pol = vec![0.5, 0.2, 0.2, 0.1];
        let imp = vec![0.1, 0.6, 0.1, 0.2];
        let rea = vec![0.25, 0.25, 0.25, 0.25];
        let base = separation_loss(
            &tape,
            &gate_map(&[
                (l, TaskId::Pol, pol.clone()),
                (l, TaskId::Imp, imp.clone()),
                (l, TaskId::Rea, rea.clone()),
            ]),
        )
        .unwrap();
        let permuted = separation_loss(
            &tape,
            &gate_map(&[
                (l, TaskId::Pol, perm(&pol)),
                (l, TaskId::Imp, perm(&imp)),
                (l, TaskId::Rea, perm(&rea)),
            ]),
        )
        .unwrap();
        assert!((base.item() - permuted.item()).abs() < 1e-12);
    }

    #[test]
    fn rotating_one_gate_away_decreases_loss() {
        let tape: Tape<f64> = Tape::new();
        let l = layer(Stack::Encoder, 2);
        let shared = vec![0.5, 0.3, 0.2];
        let near = vec![0.45, 0.35, 0.2];
        let far = vec![0.05, 0.05, 0.9];
        let with_near = separation_loss(
            &tape,
            &gate_map(&[
                (l, TaskId::Pol, shared.clone()),
                (l, TaskId::Imp, shared.clone()),
                (l, TaskId::Rea, near),
            ]),
        )
        .unwrap();
        let with_far = separation_loss(
            &tape,
            &gate_map(&[
                (l, TaskId::Pol, shared.clone()),
                (l, TaskId::Imp, shared),
                (l, TaskId::Rea, far),
            ]),
        )
        .unwrap();
        assert!(with_far.item() < with_near.item());
    }

    #[test]
    fn total_loss_cases() {
        let tape: Tape<f64> = Tape::new();
        let gen = Tensor::scalar(2.0);
        let sep = Tensor::scalar(0.5);
        let zero = total_loss(&tape, &gen, &sep, 0.0, BTreeMap::new()).unwrap();
        // bit-for-bit the generation loss
        assert_eq!(zero.total_value().to_bits(), zero.gen_value().to_bits());
        let weighted = total_loss(&tape, &gen, &sep, 0.4, BTreeMap::new()).unwrap();
        assert!((weighted.total_value() - 2.2).abs() < 1e-15);
        assert!(matches!(
            total_loss(&tape, &gen, &sep, -0.1, BTreeMap::new()),
            Err(ObjectiveError::NegativeLambda(_))
        ));
    }

    #[test]
    fn total_loss_gradients_reach_both_terms() {
        let tape: Tape<f64> = Tape::new();
        let a = Tensor::param(vec![], vec![1.5]).unwrap();
        let b = Tensor::param(vec![], vec![0.25]).unwrap();
        let gen = tape.mul(&a, &a).unwrap();
        let sep = tape.mul(&b, &b).unwrap();
        let breakdown = total_loss(&tape, &gen, &sep, 0.4, BTreeMap::new()).unwrap();
        tape.backward(&breakdown.loss_total).unwrap();
        assert!((a.grad().unwrap()[0] - 3.0).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.4 * 0.5).abs() < 1e-12);
    }
}
