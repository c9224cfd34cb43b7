//! Optimization loop with round-robin task microbatching, gradient
//! accumulation, the once-per-step separation term, evaluation and sweeps.

mod adam;
mod checkpoint;
mod metrics;
mod sweep;

pub use adam::{Adam, AdamParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use metrics::{evaluate, EvalError, EvalReport};
pub use sweep::{sweep, SweepKind, SweepOutcome, SweepRow};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_all_examples, corpus_words, split_train_val, AnnotatedInstance, TaskExample, Vocabulary,
};
use crate::model::{ConfigError, Model, ModelError};
use crate::moe::TaskId;
use crate::objectives::{generation_loss, separation_loss, ObjectiveError};
use crate::scalar::{cast, Scalar};
use crate::tensor::{Mode, Tape, TensorError};

/// Rng stream labels (xor-folded into the seed).
const DROPOUT_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Train only the polarity task (keeps the MoE architecture).
    NoMtl,
    /// Standard dense model; requires an empty routed-layer set.
    NoMoe,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoMtl => "no_mtl",
            Ablation::NoMoe => "no_moe",
        })
    }
}

/// Optimization hyperparameters.
///
/// Desk-scale defaults train from random init, hence the 1e-3 learning rate
/// (fine-tuning a pretrained backbone would use ~3e-5 with batch 4 and 4
/// accumulation steps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub max_steps: usize,
    pub lambda_sep: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps; 0 disables.
    pub eval_every: usize,
    pub checkpoint_path: Option<String>,
    pub ablation: Ablation,
    /// Train through the generation objective alone, never materializing
    /// the separation term in the update.
    pub gen_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            accum_steps: 1,
            max_steps: 2000,
            lambda_sep: 0.4,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
            ablation: Ablation::None,
            gen_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &'static str, message: String| ConfigError { field, message };
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be at least 1".into()));
        }
        if self.accum_steps == 0 {
            return Err(err("accum_steps", "must be at least 1".into()));
        }
        if self.lambda_sep < 0.0 {
            return Err(err(
                "lambda_sep",
                format!("must be non-negative, got {}", self.lambda_sep),
            ));
        }
        if self.lr <= 0.0 {
            return Err(err("lr", format!("must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus produced no training examples")]
    EmptyCorpus,
    #[error("ablation no_moe requires routed_layers to be empty")]
    NoMoeRequiresDenseModel,
    #[error("non-finite loss at step {step}; gate states:\n{gates}")]
    NanLoss { step: u64, gates: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Corpus split plus tokenized per-task training examples.
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train_instances: Vec<AnnotatedInstance>,
    pub val_instances: Vec<AnnotatedInstance>,
    pub train_examples: BTreeMap<TaskId, Vec<TaskExample>>,
    pub dropped_rationales: usize,
}

/// Splits off the validation fraction by seeded shuffle and builds the
/// vocabulary from the training split only.
pub fn prepare_data(instances: &[AnnotatedInstance], seed: u64) -> PreparedData {
    let (train_instances, val_instances) = split_train_val(instances, seed);
    let vocab = Vocabulary::build(corpus_words(&train_instances).iter().map(|s| s.as_str()));
    let (train_examples, dropped_rationales) = build_all_examples(&train_instances, &vocab);
    PreparedData {
        vocab,
        train_instances,
        val_instances,
        train_examples,
        dropped_rationales,
    }
}

/// One metrics-log record, serialized exactly as
/// `{"step", "loss_gen", "loss_sep", "loss_total", "lr", "per_task"}`.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_gen: f64,
    pub loss_sep: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub per_task: BTreeMap<String, f64>,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable metrics")
    }
}

#[derive(Debug)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<(u64, EvalReport)>,
    /// Microbatches consumed per task (audits ablation filtering).
    pub task_microbatches: BTreeMap<TaskId, usize>,
    pub final_rng: ChaCha8Rng,
}

/// Cyclic shuffled sampler over one task's examples.
struct TaskStream<'a> {
    examples: &'a [TaskExample],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> TaskStream<'a> {
    fn new(examples: &'a [TaskExample]) -> Self {
        TaskStream {
            examples,
            order: (0..examples.len()).collect(),
            pos: examples.len(), // force shuffle on first draw
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> &'a TaskExample {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let ex = &self.examples[self.order[self.pos]];
        self.pos += 1;
        ex
    }
}

fn gate_dump<T: Scalar>(model: &Model<T>) -> String {
    let tape = Tape::inference();
    match model.all_dense_gates(&tape) {
        Ok(gates) => gates
            .iter()
            .map(|((layer, task), gate)| {
                let probs: Vec<String> = gate
                    .value()
                    .iter()
                    .map(|v| format!("{:.6}", crate::scalar::to_f64(*v)))
                    .collect();
                format!("  {layer}/{task}: [{}]", probs.join(", "))
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Err(e) => format!("  <gates unavailable: {e}>"),
    }
}

/// Mean pairwise gate cosine of the current model (the quantity the
/// separation loss minimizes), 0 for dense models.
pub fn current_gate_cosine<T: Scalar>(model: &Model<T>) -> Result<f64, TrainError> {
    if model.routed_layer_ids().is_empty() {
        return Ok(0.0);
    }
    let tape = Tape::inference();
    let gates = model.all_dense_gates(&tape)?;
    Ok(separation_loss(&tape, &gates)?.item_f64())
}

/// Trains the model in place.
///
/// Each optimization step accumulates generation-loss gradients over
/// `accum_steps` microbatches drawn round-robin over the active tasks,
/// scales them by 1/(total target tokens in the step), adds the
/// separation-loss gradient once, and applies one Adam update.
pub fn train<T: Scalar>(
    model: &Model<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if cfg.ablation == Ablation::NoMoe && !model.routed_layer_ids().is_empty() {
        return Err(TrainError::NoMoeRequiresDenseModel);
    }
    let active_tasks: Vec<TaskId> = match cfg.ablation {
        Ablation::NoMtl => vec![TaskId::Pol],
        _ => TaskId::ALL
            .into_iter()
            .filter(|t| !data.train_examples[t].is_empty())
            .collect(),
    };
    if active_tasks.is_empty() || active_tasks.iter().any(|t| data.train_examples[t].is_empty()) {
        return Err(TrainError::EmptyCorpus);
    }

    let mut streams: BTreeMap<TaskId, TaskStream> = active_tasks
        .iter()
        .map(|t| (*t, TaskStream::new(&data.train_examples[t])))
        .collect();
    let mut data_rng = crate::nn::derived_rng(cfg.seed, DATA_STREAM);
    let mut dropout_rng = crate::nn::derived_rng(cfg.seed, DROPOUT_STREAM);

    let params = model.named_params();
    let mut optimizer = Adam::new(cfg.adam_params(), &params);
    model.zero_grads();

    let has_routing = !model.routed_layer_ids().is_empty();
    let apply_sep = cfg.lambda_sep > 0.0 && !cfg.gen_only && has_routing;
    let effective_lambda = if cfg.gen_only { 0.0 } else { cfg.lambda_sep };

    let mut log = TrainLog {
        steps: Vec::with_capacity(cfg.max_steps),
        evals: Vec::new(),
        task_microbatches: BTreeMap::new(),
        final_rng: dropout_rng.clone(),
    };
    let mut microbatch_index = 0usize;

    for step in 1..=cfg.max_steps as u64 {
        let mut total_tokens = 0usize;
        let mut nll_sum_value = 0.0f64;
        let mut per_task_nll: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();

        for _ in 0..cfg.accum_steps {
            let task = active_tasks[microbatch_index % active_tasks.len()];
            microbatch_index += 1;
            *log.task_microbatches.entry(task).or_insert(0) += 1;
            let stream = streams.get_mut(&task).expect("active task has a stream");
            let batch: Vec<TaskExample> = (0..cfg.batch_size)
                .map(|_| stream.draw(&mut data_rng).clone())
                .collect();
            let tape = Tape::new();
            let gen = generation_loss(&tape, model, &batch, Mode::Train, &mut dropout_rng)?;
            let batch_sum = gen.sum.item_f64();
            if !batch_sum.is_finite() {
                return Err(TrainError::NanLoss {
                    step,
                    gates: gate_dump(model),
                });
            }
            tape.backward(&gen.sum)?;
            nll_sum_value += batch_sum;
            total_tokens += gen.token_count;
            let entry = per_task_nll.entry(task).or_insert((0.0, 0));
            entry.0 += batch_sum;
            entry.1 += gen.token_count;
        }

        // The step's effective generation loss is the mean over every
        // target token the step saw, applied as a post-hoc gradient scale
        // so accumulation is exactly equivalent to a larger batch.
        let scale = cast::<T>(1.0 / total_tokens.max(1) as f64);
        model.visit_params(&mut |_, t| t.scale_grad(scale));

        let mut sep_value = 0.0f64;
        if has_routing {
            let sep_tape = Tape::new();
            let gates = model.all_dense_gates(&sep_tape)?;
            let sep = separation_loss(&sep_tape, &gates)?;
            sep_value = sep.item_f64();
            if apply_sep {
                let weighted = sep_tape.scalar_mul(&sep, cast::<T>(cfg.lambda_sep))?;
                sep_tape.backward(&weighted)?;
            }
        }

        let loss_gen = nll_sum_value / total_tokens.max(1) as f64;
        let loss_total = loss_gen + effective_lambda * sep_value;
        if !loss_total.is_finite() {
            return Err(TrainError::NanLoss {
                step,
                gates: gate_dump(model),
            });
        }

        optimizer.step(&params);
        model.zero_grads();

        log.steps.push(StepMetrics {
            step,
            loss_gen,
            loss_sep: sep_value,
            loss_total,
            lr: cfg.lr,
            per_task: per_task_nll
                .iter()
                .map(|(task, (sum, count))| (task.name().to_string(), sum / *count.max(&1) as f64))
                .collect(),
        });

        if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 && !data.val_instances.is_empty()
        {
            let report = evaluate(model, &data.val_instances, &data.vocab)?;
            log.evals.push((step, report));
        }
    }
    log.final_rng = dropout_rng;
    Ok(log)
}
