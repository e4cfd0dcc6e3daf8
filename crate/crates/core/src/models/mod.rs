//! Weighted Cox and logistic regression with per-record influence functions.

pub mod cox;
pub mod logistic;
pub mod variance;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_abs, spd_inverse};

pub use variance::{sandwich_variance, VarianceEstimate};

pub const MAX_ITERATIONS: usize = 50;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no events in the data")]
    NoEvents,
    #[error("outcome takes a single value")]
    SingleClass,
    #[error("separation detected after {iterations} iterations: information for coefficient {coefficient} collapsed (coefficients {coefficients:?})")]
    Separation { iterations: usize, coefficient: usize, coefficients: Vec<f64> },
    #[error("no convergence after {iterations} iterations (max |score| {gradient:.3e}, coefficients {coefficients:?})")]
    NotConverged { iterations: usize, gradient: f64, coefficients: Vec<f64> },
    #[error("information matrix is singular")]
    Singular,
    #[error("invalid model input: {0}")]
    Invalid(String),
    #[error("coefficient index {index} out of range for {len} coefficients")]
    IndexOutOfRange { index: usize, len: usize },
}

impl ModelError {
    /// Last coefficients reached, when the failure carries them.
    pub fn last_coefficients(&self) -> Option<&[f64]> {
        match self {
            ModelError::Separation { coefficients, .. } | ModelError::NotConverged { coefficients, .. } => {
                Some(coefficients)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    /// Robust variance `Σ_i H_i H_iᵀ`; replace with a design-based estimate
    /// from [`sandwich_variance`] when the sample is stratified.
    pub variance: DMatrix<f64>,
    /// Inverse weighted information.
    pub naive_variance: DMatrix<f64>,
    /// `n × p`; row `i` is `w_i I⁻¹ U_i`.
    pub influence: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn se(&self, j: usize) -> f64 {
        self.variance[(j, j)].sqrt()
    }

    /// Influence with the weight divided out, `I⁻¹ U_i`.
    pub fn unit_influence(&self, j: usize) -> Result<Vec<f64>, ModelError> {
        let h = influence_for_target(self, j)?;
        Ok(h.iter().zip(&self.weights).map(|(h, w)| h / w).collect())
    }
}

/// Column `j` of the influence matrix.
pub fn influence_for_target(fit: &FitResult, j: usize) -> Result<Vec<f64>, ModelError> {
    let p = fit.coefficients.len();
    if j >= p {
        return Err(ModelError::IndexOutOfRange { index: j, len: p });
    }
    Ok(fit.influence.column(j).iter().copied().collect())
}

/// Hazard or odds ratio for a `delta`-unit change in a covariate.
pub fn ratio_per(beta: f64, delta: f64) -> f64 {
    (beta * delta).exp()
}

/// Log-likelihood, score and information at one parameter value.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
}

pub(crate) struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub eval: Evaluation,
    pub iterations: usize,
}

/// Newton–Raphson with step halving from `β = 0`.
///
/// The score tolerance is [`GRADIENT_TOLERANCE`] scaled by the mean weight, so
/// that multiplying every weight by a constant does not change the stopping
/// point.
pub(crate) fn newton(
    p: usize,
    weights: &[f64],
    eval: impl Fn(&DVector<f64>) -> Evaluation,
) -> Result<NewtonOutcome, ModelError> {
    let total_weight: f64 = weights.iter().sum();
    let tol = GRADIENT_TOLERANCE * (total_weight / weights.len() as f64);
    let mut beta = DVector::zeros(p);
    let mut cur = eval(&beta);
    let info0: Vec<f64> = (0..p).map(|j| cur.information[(j, j)]).collect();
    for iteration in 0..=MAX_ITERATIONS {
        let g = max_abs(&cur.score);
        if g <= tol {
            // One extra full step costs little and lands near machine precision.
            if let Some(step) = cur.information.clone().cholesky().map(|c| c.solve(&cur.score)) {
                let cand = &beta + step;
                let next = eval(&cand);
                if next.log_likelihood.is_finite() && max_abs(&next.score) < g {
                    return Ok(NewtonOutcome { beta: cand, eval: next, iterations: iteration + 1 });
                }
            }
            return Ok(NewtonOutcome { beta, eval: cur, iterations: iteration });
        }
        if iteration == MAX_ITERATIONS {
            break;
        }
        let Some(chol) = cur.information.clone().cholesky() else {
            return Err(separation_or_singular(&beta, &cur, &info0, iteration));
        };
        let step = chol.solve(&cur.score);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let next = eval(&cand);
            let slack = 1e-12 * (1.0 + cur.log_likelihood.abs());
            if next.log_likelihood.is_finite() && next.log_likelihood >= cur.log_likelihood - slack {
                accepted = Some((cand, next));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, e)) => {
                beta = b;
                cur = e;
            }
            None => {
                // No representable improvement left: accept if the score is at
                // the rounding floor of the accumulated sums.
                if g <= 1e-10 * total_weight.max(1.0) {
                    return Ok(NewtonOutcome { beta, eval: cur, iterations: iteration + 1 });
                }
                return Err(ModelError::NotConverged {
                    iterations: iteration + 1,
                    gradient: g,
                    coefficients: beta.iter().copied().collect(),
                });
            }
        }
        if let Some(j) = collapsed(&cur, &info0) {
            return Err(ModelError::Separation {
                iterations: iteration + 1,
                coefficient: j,
                coefficients: beta.iter().copied().collect(),
            });
        }
    }
    let g = max_abs(&cur.score);
    if let Some(j) = collapsed(&cur, &info0) {
        return Err(ModelError::Separation {
            iterations: MAX_ITERATIONS,
            coefficient: j,
            coefficients: beta.iter().copied().collect(),
        });
    }
    Err(ModelError::NotConverged { iterations: MAX_ITERATIONS, gradient: g, coefficients: beta.iter().copied().collect() })
}

fn collapsed(e: &Evaluation, info0: &[f64]) -> Option<usize> {
    (0..info0.len()).find(|&j| info0[j] > 0.0 && e.information[(j, j)] / info0[j] < 1e-6)
}

fn separation_or_singular(beta: &DVector<f64>, e: &Evaluation, info0: &[f64], iterations: usize) -> ModelError {
    match collapsed(e, info0) {
        Some(j) => ModelError::Separation { iterations, coefficient: j, coefficients: beta.iter().copied().collect() },
        None => ModelError::Singular,
    }
}

pub(crate) fn check_inputs(x: &DMatrix<f64>, w: &[f64], n: usize) -> Result<(), ModelError> {
    if x.nrows() != n || w.len() != n {
        return Err(ModelError::Invalid(format!(
            "{} outcome rows, {} covariate rows, {} weights",
            n,
            x.nrows(),
            w.len()
        )));
    }
    if n == 0 || x.ncols() == 0 {
        return Err(ModelError::Invalid("empty design".into()));
    }
    if let Some(i) = w.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(ModelError::Invalid(format!("weight {} at row {i} is not positive", w[i])));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Invalid("non-finite covariate".into()));
    }
    Ok(())
}

/// Builds the result from the converged point and per-record score
/// residuals `U_i` (`n × p`).
pub(crate) fn assemble(
    out: NewtonOutcome,
    residuals: DMatrix<f64>,
    w: &[f64],
) -> Result<FitResult, ModelError> {
    let inv = spd_inverse(&out.eval.information).ok_or(ModelError::Singular)?;
    let mut influence = residuals * &inv;
    for (i, &wi) in w.iter().enumerate() {
        influence.row_mut(i).scale_mut(wi);
    }
    let variance = crate::linalg::symmetrize(&(influence.transpose() * &influence));
    Ok(FitResult {
        coefficients: out.beta,
        variance,
        naive_variance: inv,
        influence,
        weights: w.to_vec(),
        log_likelihood: out.eval.log_likelihood,
        converged: true,
        iterations: out.iterations,
    })
}

/// Analysis data for either model, so callers can subset or duplicate rows
/// without caring which model they hold.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelData {
    Cox { time: Vec<f64>, event: Vec<bool>, x: DMatrix<f64> },
    Logistic { y: Vec<bool>, x: DMatrix<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cox,
    Logistic,
}

impl ModelData {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelData::Cox { .. } => ModelKind::Cox,
            ModelData::Logistic { .. } => ModelKind::Logistic,
        }
    }

    pub fn len(&self) -> usize {
        self.x().nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> &DMatrix<f64> {
        match self {
            ModelData::Cox { x, .. } | ModelData::Logistic { x, .. } => x,
        }
    }

    /// Rows in the given order; indices may repeat.
    pub fn rows(&self, idx: &[usize]) -> ModelData {
        let x = self.x().select_rows(idx);
        match self {
            ModelData::Cox { time, event, .. } => ModelData::Cox {
                time: idx.iter().map(|&i| time[i]).collect(),
                event: idx.iter().map(|&i| event[i]).collect(),
                x,
            },
            ModelData::Logistic { y, .. } => ModelData::Logistic { y: idx.iter().map(|&i| y[i]).collect(), x },
        }
    }

    pub fn fit(&self, w: &[f64]) -> Result<FitResult, ModelError> {
        match self {
            ModelData::Cox { time, event, x } => cox::fit_cox(time, event, x, w),
            ModelData::Logistic { y, x } => logistic::fit_logistic(y, x, w),
        }
    }

    pub fn fit_unweighted(&self) -> Result<FitResult, ModelError> {
        self.fit(&vec![1.0; self.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reporting_transforms() {
        assert_eq!(format!("{:.2}", ratio_per(0.87, 0.25)), "1.24");
        assert_eq!(format!("{:.2}", ratio_per(1.06, 0.25)), "1.30");
        assert_eq!(format!("{:.2}", ratio_per(-0.54, 0.25)), "0.87");
    }

    #[test]
    fn target_index_checked() {
        let y = vec![true, false, true, false, false];
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.1, 1.0, 0.5, 1.0, 0.9, 1.0, 0.2, 1.0, 0.4]);
        let fit = logistic::fit_logistic(&y, &x, &[1.0; 5]).unwrap();
        assert!(matches!(influence_for_target(&fit, 2), Err(ModelError::IndexOutOfRange { index: 2, len: 2 })));
    }
}
