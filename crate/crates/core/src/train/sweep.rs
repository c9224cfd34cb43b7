//! Seeded grid sweeps over the separation weight or the expert count,
//! aggregated across runs as CSV.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedInstance;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::train::{
    current_gate_cosine, evaluate, prepare_data, train, EvalReport, TrainConfig, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Grid over `lambda_sep`.
    Lambda,
    /// Grid over `n_experts` (top-k clamped to the expert count).
    Experts,
}

/// Seed-averaged metrics for one grid point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub grid_value: f64,
    pub seed_count: usize,
    pub all_acc_mean: f64,
    pub all_f1_mean: f64,
    pub isa_acc_mean: Option<f64>,
    pub gate_cosine_mean: f64,
    /// Marks the row with the best mean macro-F1.
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    /// Per (grid index, seed index) raw reports, for callers that need
    /// more than the aggregate.
    pub raw: Vec<Vec<SweepRunResult>>,
}

#[derive(Debug, Clone)]
pub struct SweepRunResult {
    pub seed: u64,
    pub report: EvalReport,
    pub gate_cosine: f64,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "grid_value,seed_count,all_acc_mean,all_f1_mean,isa_acc_mean,gate_cosine_mean,best\n",
        );
        for row in &self.rows {
            let isa = row
                .isa_acc_mean
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:.6},{},{:.6},{:.6},{},{:.6},{}\n",
                row.grid_value,
                row.seed_count,
                row.all_acc_mean,
                row.all_f1_mean,
                isa,
                row.gate_cosine_mean,
                if row.best { "*" } else { "" }
            ));
        }
        out
    }
}

fn apply_grid_value(kind: SweepKind, value: f64, mc: &mut ModelConfig, tc: &mut TrainConfig) {
    match kind {
        SweepKind::Lambda => tc.lambda_sep = value,
        SweepKind::Experts => {
            let n = value.round().max(1.0) as usize;
            mc.n_experts = n;
            mc.top_k = mc.top_k.min(n);
        }
    }
}

/// Trains one model per (grid point, seed) and reports seed means per grid
/// point. The data split is fixed by `base_train.seed` so every run sees
/// the same corpus; per-run seeds vary the init, data order and dropout.
/// Runs execute on a small worker pool with deterministic result order.
pub fn sweep<T: Scalar>(
    kind: SweepKind,
    grid: &[f64],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    corpus: &[AnnotatedInstance],
    seeds: &[u64],
) -> Result<SweepOutcome, TrainError> {
    let data = prepare_data(corpus, base_train.seed);
    if data.val_instances.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }

    struct Job {
        grid_idx: usize,
        value: f64,
        seed: u64,
    }
    let jobs: Vec<Job> = grid
        .iter()
        .enumerate()
        .flat_map(|(grid_idx, &value)| {
            seeds.iter().map(move |&seed| Job {
                grid_idx,
                value,
                seed,
            })
        })
        .collect();

    let run_job = |job: &Job| -> Result<SweepRunResult, TrainError> {
        let mut mc = base_model.clone();
        let mut tc = base_train.clone();
        apply_grid_value(kind, job.value, &mut mc, &mut tc);
        mc.vocab_size = data.vocab.len();
        mc.seed = job.seed;
        tc.seed = job.seed;
        let model: Model<T> = Model::from_config(&mc)?;
        train(&model, &data, &tc)?;
        let report = evaluate(&model, &data.val_instances, &data.vocab)?;
        let gate_cosine = current_gate_cosine(&model)?;
        Ok(SweepRunResult {
            seed: job.seed,
            report,
            gate_cosine,
        })
    };

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SweepRunResult, TrainError>>> =
        (0..jobs.len()).map(|_| None).collect();
    let results = Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let outcome = run_job(&jobs[i]);
                results.lock().expect("worker panicked")[i] = Some(outcome);
            });
        }
    });

    let mut raw: Vec<Vec<SweepRunResult>> = (0..grid.len()).map(|_| Vec::new()).collect();
    for (job, slot) in jobs.iter().zip(slots) {
        raw[job.grid_idx].push(slot.expect("all jobs ran")?);
    }

    let mut rows: Vec<SweepRow> = grid
        .iter()
        .zip(&raw)
        .map(|(&grid_value, runs)| {
            let n = runs.len() as f64;
            let isa: Vec<f64> = runs.iter().filter_map(|r| r.report.isa_accuracy).collect();
            SweepRow {
                grid_value,
                seed_count: runs.len(),
                all_acc_mean: runs.iter().map(|r| r.report.all_accuracy).sum::<f64>() / n,
                all_f1_mean: runs.iter().map(|r| r.report.all_macro_f1).sum::<f64>() / n,
                isa_acc_mean: (!isa.is_empty())
                    .then(|| isa.iter().sum::<f64>() / isa.len() as f64),
                gate_cosine_mean: runs.iter().map(|r| r.gate_cosine).sum::<f64>() / n,
                best: false,
            }
        })
        .collect();
    if let Some(best_idx) = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.all_f1_mean
                .partial_cmp(&b.all_f1_mean)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
    {
        rows[best_idx].best = true;
    }
    Ok(SweepOutcome { kind, rows, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::model::ModelConfig;

    #[test]
    fn single_point_grid_equals_plain_train_eval() {
        let corpus = synth_corpus(40, 3);
        let mut mc = ModelConfig::tiny(0);
        mc.dropout_rate = 0.0;
        let mut tc = TrainConfig::default();
        tc.max_steps = 3;
        tc.seed = 3;

        let outcome =
            sweep::<f64>(SweepKind::Lambda, &[0.4], &mc, &tc, &corpus, &[21]).unwrap();
        assert_eq!(outcome.rows.len(), 1);
        assert!(outcome.rows[0].best);
        assert_eq!(outcome.rows[0].seed_count, 1);

        // Reference run without the sweep harness.
        let data = prepare_data(&corpus, tc.seed);
        let mut mc_ref = mc.clone();
        mc_ref.vocab_size = data.vocab.len();
        mc_ref.seed = 21;
        let mut tc_ref = tc.clone();
        tc_ref.seed = 21;
        tc_ref.lambda_sep = 0.4;
        let model = Model::<f64>::from_config(&mc_ref).unwrap();
        train(&model, &data, &tc_ref).unwrap();
        let report = evaluate(&model, &data.val_instances, &data.vocab).unwrap();
        assert_eq!(outcome.rows[0].all_acc_mean, report.all_accuracy);
        assert_eq!(outcome.rows[0].all_f1_mean, report.all_macro_f1);
    }

    #[test]
    fn experts_grid_produces_one_row_per_value_and_csv() {
        let corpus = synth_corpus(40, 5);
        let mut mc = ModelConfig::tiny(0);
        mc.dropout_rate = 0.0;
        let mut tc = TrainConfig::default();
        tc.max_steps = 2;
        tc.seed = 5;
        let outcome = sweep::<f64>(
            SweepKind::Experts,
            &[2.0, 3.0],
            &mc,
            &tc,
            &corpus,
            &[1, 2],
        )
        .unwrap();
        assert_eq!(outcome.rows.len(), 2);
        assert!(outcome.rows.iter().all(|r| r.seed_count == 2));
        assert_eq!(outcome.rows.iter().filter(|r| r.best).count(), 1);
        let csv = outcome.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "grid_value,seed_count,all_acc_mean,all_f1_mean,isa_acc_mean,gate_cosine_mean,best"
        );
        assert_eq!(csv.lines().count(), 3);
    }
}
