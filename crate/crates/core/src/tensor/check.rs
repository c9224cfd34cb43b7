//! Finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};
use crate::scalar::{cast, to_f64, Scalar};

/// Default central-difference step for 64-bit runs.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_within_tol(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .params
            .iter()
            .map(|p| {
                format!(
                    "{} entries={} max_rel_err={:.3e}{}",
                    p.name,
                    p.checked_entries,
                    p.max_rel_err,
                    if p.flagged { " FLAGGED" } else { "" }
                )
            })
            .collect();
        lines.push(format!("overall max_rel_err={:.3e}", self.max_rel_err()));
        lines.join("\n")
    }
}

/// rel err = |a - n| / max(|a|, |n|, 1e-8)
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()).max(1e-8))
}

/// Compares analytic gradients with central finite differences.
///
/// `loss_fn` must rebuild the same scalar loss from current parameter values
/// every time it is called (pure given any fixed internal rng seed). Frozen
/// parameters (`requires_grad == false`) are skipped. When
/// `max_entries_per_param` is set, entries are probed on an even stride
/// instead of exhaustively.
pub fn check_gradients<T: Scalar>(
    params: &[(String, Tensor<T>)],
    loss_fn: &mut dyn FnMut(&Tape<T>) -> Result<Tensor<T>, TensorError>,
    eps: f64,
    tol: f64,
    max_entries_per_param: Option<usize>,
) -> Result<GradCheckReport, TensorError> {
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    tape.backward(&loss)?;

    let eval = |f: &mut dyn FnMut(&Tape<T>) -> Result<Tensor<T>, TensorError>| -> Result<f64, TensorError> {
        let t = Tape::inference();
        Ok(f(&t)?.item_f64())
    };

    let mut report = Vec::new();
    for (name, p) in params {
        if !p.requires_grad() {
            continue;
        }
        let analytic = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        let n = p.numel();
        let indices: Vec<usize> = match max_entries_per_param {
            Some(m) if m < n => {
                let stride = (n + m - 1) / m;
                (0..n).step_by(stride.max(1)).collect()
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked_entries: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            flagged: false,
        };
        for &i in &indices {
            let original = p.with_data(|d| d[i]);
            let step = cast::<T>(eps);
            let set = |v: T| {
                p.update_data(|data, _| data[i] = v);
            };
            set(original + step);
            let f_plus = eval(loss_fn)?;
            set(original - step);
            let f_minus = eval(loss_fn)?;
            set(original);
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = to_f64(analytic[i]);
            let e = rel_err(a, numeric);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        check.flagged = check.max_rel_err > tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_fd_exact() {
        let w = Tensor::param(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let report = check_gradients(
            &[("w".to_string(), w.clone())],
            &mut |tape| tape.sum_all(&tape.mul(&w, &x)?),
            DEFAULT_FD_EPS,
            1e-9,
            None,
        )
        .unwrap();
        assert!(report.all_within_tol(), "{}", report.summary());
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn frozen_params_excluded() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let frozen = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let report = check_gradients(
            &[
                ("w".to_string(), w.clone()),
                ("frozen".to_string(), frozen.clone()),
            ],
            &mut |tape| tape.sum_all(&tape.mul(&w, &frozen)?),
            DEFAULT_FD_EPS,
            1e-6,
            None,
        )
        .unwrap();
        assert_eq!(report.params.len(), 1);
        assert_eq!(report.params[0].name, "w");
    }

    #[test]
    fn nonlinear_chain_within_tolerance() {
        let w = Tensor::param(vec![4], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let report = check_gradients(
            &[("w".to_string(), w.clone())],
            &mut |tape| {
                let t = tape.tanh(&w)?;
                let s = tape.softmax(&t, 0)?;
                let l = tape.log(&s)?;
                tape.mean_all(&l)
            },
            DEFAULT_FD_EPS,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.all_within_tol(), "{}", report.summary());
    }

    #[test]
    fn subsampled_entries_respect_cap() {
        let w = Tensor::param(vec![100], vec![0.01; 100]).unwrap();
        let report = check_gradients(
            &[("w".to_string(), w.clone())],
            &mut |tape| tape.sum_all(&tape.mul(&w, &w)?),
            DEFAULT_FD_EPS,
            1e-6,
            Some(10),
        )
        .unwrap();
        assert!(report.params[0].checked_entries <= 10);
        assert!(report.all_within_tol());
    }
}
