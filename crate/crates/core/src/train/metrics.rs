//! Evaluation metrics: accuracy, macro-F1 and the implicit-subset accuracy.

use serde::Serialize;

use crate::data::{detokenize, imp_prompt, pol_prompt, tokenize, AnnotatedInstance, Polarity, Vocabulary};
use crate::model::{Model, ModelError};
use crate::moe::TaskId;
use crate::scalar::Scalar;

/// Decode budget for single-word targets (label + EOS with slack).
const LABEL_DECODE_BUDGET: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty instance list")]
    EmptyInstances,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Polarity accuracy over all instances.
    pub all_accuracy: f64,
    /// Unweighted mean of the three per-class F1 scores.
    pub all_macro_f1: f64,
    /// Polarity accuracy restricted to implicit instances; absent when the
    /// evaluation set has no implicit instances.
    pub isa_accuracy: Option<f64>,
    /// Implicitness-detection accuracy.
    pub imp_accuracy: f64,
    /// Per-class F1 in `Polarity::ALL` order (positive, negative, neutral).
    pub per_class_f1: [f64; 3],
    /// Classes whose F1 is undefined (never gold and never predicted);
    /// they contribute 0 to the macro mean.
    pub undefined_f1_classes: Vec<String>,
    /// Decodes that were not one of the three polarity labels (counted as
    /// wrong).
    pub non_label_decodes: usize,
    pub n_instances: usize,
}

/// Metric arithmetic over already-decoded predictions. `pol_preds` entries
/// of `None` are non-label decodes; `imp_preds` of `None` likewise.
pub(crate) fn metrics_from_predictions(
    instances: &[AnnotatedInstance],
    pol_preds: &[Option<Polarity>],
    imp_preds: &[Option<bool>],
) -> EvalReport {
    let n = instances.len();
    let class_index = |p: Polarity| Polarity::ALL.iter().position(|&q| q == p).unwrap();

    let mut correct = 0usize;
    let mut non_label = 0usize;
    let mut confusion = [[0usize; 3]; 3]; // [gold][pred]
    let mut isa_total = 0usize;
    let mut isa_correct = 0usize;
    for (inst, pred) in instances.iter().zip(pol_preds) {
        let gold = class_index(inst.polarity);
        match pred {
            Some(p) => {
                let pi = class_index(*p);
                confusion[gold][pi] += 1;
                if pi == gold {
                    correct += 1;
                }
            }
            None => non_label += 1,
        }
        if inst.implicit {
            isa_total += 1;
            if pred.map(class_index) == Some(gold) {
                isa_correct += 1;
            }
        }
    }

    let mut per_class_f1 = [0.0f64; 3];
    let mut undefined = Vec::new();
    for c in 0..3 {
        let tp = confusion[c][c];
        let gold_count: usize = instances
            .iter()
            .filter(|i| class_index(i.polarity) == c)
            .count();
        let pred_count: usize = (0..3).map(|g| confusion[g][c]).sum();
        if gold_count == 0 && pred_count == 0 {
            undefined.push(Polarity::ALL[c].label().to_string());
            continue;
        }
        let precision = if pred_count > 0 {
            tp as f64 / pred_count as f64
        } else {
            0.0
        };
        let recall = if gold_count > 0 {
            tp as f64 / gold_count as f64
        } else {
            0.0
        };
        per_class_f1[c] = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }

    let imp_correct = instances
        .iter()
        .zip(imp_preds)
        .filter(|(inst, pred)| **pred == Some(inst.implicit))
        .count();

    EvalReport {
        all_accuracy: correct as f64 / n as f64,
        all_macro_f1: per_class_f1.iter().sum::<f64>() / 3.0,
        isa_accuracy: (isa_total > 0).then(|| isa_correct as f64 / isa_total as f64),
        imp_accuracy: imp_correct as f64 / n as f64,
        per_class_f1,
        undefined_f1_classes: undefined,
        non_label_decodes: non_label,
        n_instances: n,
    }
}

/// Greedy-decodes POL and IMP prompts for every instance and scores them.
/// Decodes that do not detokenize to a known label count as wrong.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    instances: &[AnnotatedInstance],
    vocab: &Vocabulary,
) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInstances);
    }
    let mut pol_preds = Vec::with_capacity(instances.len());
    let mut imp_preds = Vec::with_capacity(instances.len());
    for inst in instances {
        let prompt = tokenize(&pol_prompt(inst), vocab);
        let decoded = model.greedy_decode(&prompt, TaskId::Pol, LABEL_DECODE_BUDGET)?;
        pol_preds.push(Polarity::from_label(&detokenize(&decoded, vocab)));

        let prompt = tokenize(&imp_prompt(inst), vocab);
        let decoded = model.greedy_decode(&prompt, TaskId::Imp, LABEL_DECODE_BUDGET)?;
        imp_preds.push(match detokenize(&decoded, vocab).as_str() {
            "implicit" => Some(true),
            "explicit" => Some(false),
            _ => None,
        });
    }
    Ok(metrics_from_predictions(instances, &pol_preds, &imp_preds))
}
