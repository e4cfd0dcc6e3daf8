//! Weighted logistic regression. The caller supplies any intercept column.

use nalgebra::{DMatrix, DVector};

use super::{assemble, check_inputs, newton, Evaluation, FitResult, ModelError};

fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn evaluate(y: &[bool], x: &DMatrix<f64>, w: &[f64], beta: &DVector<f64>) -> Evaluation {
    let p = x.ncols();
    let eta = x * beta;
    let mut ll = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for i in 0..y.len() {
        let e = eta[i];
        let yi = if y[i] { 1.0 } else { 0.0 };
        ll += w[i] * (yi * e - log1p_exp(e));
        let mu = sigmoid(e);
        let r = w[i] * (yi - mu);
        let v = w[i] * mu * (1.0 - mu);
        let xi = x.row(i);
        for a in 0..p {
            score[a] += r * xi[a];
            let va = v * xi[a];
            for b in a..p {
                info[(a, b)] += va * xi[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    Evaluation { log_likelihood: ll, score, information: info }
}

/// Per-record score contributions `(y_i − p_i) x_i`.
pub fn score_residuals(y: &[bool], x: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let eta = x * beta;
    let mut u = x.clone();
    for i in 0..y.len() {
        let r = if y[i] { 1.0 } else { 0.0 } - sigmoid(eta[i]);
        u.row_mut(i).scale_mut(r);
    }
    u
}

pub fn fit_logistic(y: &[bool], x: &DMatrix<f64>, w: &[f64]) -> Result<FitResult, ModelError> {
    check_inputs(x, w, y.len())?;
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(ModelError::SingleClass);
    }
    let out = newton(x.ncols(), w, |b| evaluate(y, x, w, b))?;
    let residuals = score_residuals(y, x, &out.beta);
    assemble(out, residuals, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_is_logit_of_weighted_prevalence() {
        let y = [true, false, false, true, false];
        let w = [2.0, 1.0, 1.0, 0.5, 3.0];
        let x = DMatrix::from_element(5, 1, 1.0);
        let fit = fit_logistic(&y, &x, &w).unwrap();
        let p: f64 = 2.5 / 7.5;
        assert!((fit.coefficients[0] - (p / (1.0 - p)).ln()).abs() < 1e-10);
    }

    #[test]
    fn perfect_separation_is_reported() {
        let y = [false, false, false, true, true, true];
        let x = DMatrix::from_row_slice(6, 2, &[1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let err = fit_logistic(&y, &x, &[1.0; 6]).unwrap_err();
        assert!(matches!(err, ModelError::Separation { .. } | ModelError::NotConverged { .. }), "{err:?}");
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(fit_logistic(&[true; 3], &x, &[1.0; 3]), Err(ModelError::SingleClass)));
    }

    #[test]
    fn stable_at_extreme_predictors() {
        assert!((log1p_exp(800.0) - 800.0).abs() < 1e-12);
        assert!(log1p_exp(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
