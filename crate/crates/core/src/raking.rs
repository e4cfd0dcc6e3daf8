//! IPW and generalized raking with the exponential (entropy) distance.
//!
//! Calibrated weights are `d_i g_i` with `g_i = exp(a_iᵀλ)`, where `λ`
//! minimizes the convex dual `Σ d_i exp(a_iᵀλ) − λᵀT`. Its gradient is the
//! calibration residual, so a converged Newton run meets the constraints.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_abs, weighted_least_squares};
use crate::models::{sandwich_variance, FitResult, ModelData, ModelError};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RakingError {
    #[error("calibration infeasible after {iterations} iterations (relative residual {residual:.3e}); the totals may lie outside what the sample can reach, try fewer auxiliary variables")]
    Infeasible { iterations: usize, residual: f64 },
    #[error("invalid calibration input: {0}")]
    Invalid(String),
    #[error("auxiliary regression for the variance is singular")]
    Singular,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub g: Vec<f64>,
    /// Multipliers for the retained columns, in `kept_columns` order.
    pub lambda: Vec<f64>,
    pub kept_columns: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    /// Max over constraints of `|Σ d g a − T| / (Σ d |a| + |T|)`.
    pub constraint_residual: f64,
    pub iterations: usize,
    /// `Σ d (g log g − g + 1)`.
    pub primal: f64,
    /// `Σ d (1 − g) + λᵀT`.
    pub dual: f64,
}

impl CalibrationResult {
    pub fn weights(&self, d: &[f64]) -> Vec<f64> {
        d.iter().zip(&self.g).map(|(d, g)| d * g).collect()
    }

    pub fn duality_gap(&self) -> f64 {
        (self.primal - self.dual).abs() / self.primal.abs().max(1.0)
    }
}

/// Columns of `a` that are not (numerically) in the weighted span of the
/// earlier ones.
fn independent_columns(a: &DMatrix<f64>, d: &[f64]) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    let dot = |u: &DVector<f64>, v: &DVector<f64>| u.iter().zip(v.iter()).zip(d).map(|((x, y), w)| w * x * y).sum::<f64>();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let norm0 = dot(&col, &col).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut r = col.clone();
        for b in &basis {
            let c = dot(&r, b);
            r -= b * c;
        }
        let norm = dot(&r, &r).sqrt();
        if norm > 1e-9 * norm0 {
            basis.push(r / norm);
            kept.push(j);
        }
    }
    kept
}

/// Calibrates design weights `d` of the sampled rows so that
/// `Σ d_i g_i a_i = totals`.
pub fn calibrate_weights(d: &[f64], aux: &DMatrix<f64>, totals: &DVector<f64>) -> Result<CalibrationResult, RakingError> {
    let (n, q) = aux.shape();
    if d.len() != n || totals.len() != q {
        return Err(RakingError::Invalid(format!("{} weights, {}×{} aux, {} totals", d.len(), n, q, totals.len())));
    }
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(RakingError::Invalid("design weights must be positive".into()));
    }
    if aux.iter().chain(totals.iter()).any(|v| !v.is_finite()) {
        return Err(RakingError::Invalid("non-finite auxiliary value".into()));
    }
    let kept = independent_columns(aux, d);
    let dropped: Vec<usize> = (0..q).filter(|j| !kept.contains(j)).collect();
    if !dropped.is_empty() {
        warn!("dropping collinear auxiliary columns {dropped:?}");
    }
    let a = aux.select_columns(&kept);
    let t = DVector::from_iterator(kept.len(), kept.iter().map(|&j| totals[j]));
    let k = kept.len();
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let s: f64 = (0..n).map(|i| d[i] * a[(i, j)].abs()).sum::<f64>() + t[j].abs();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();

    let eval = |lambda: &DVector<f64>| {
        let eta = &a * lambda;
        let g: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let mut f = -lambda.dot(&t);
        let mut grad = -t.clone();
        for i in 0..n {
            let dg = d[i] * g[i];
            f += dg;
            for j in 0..k {
                grad[j] += dg * a[(i, j)];
            }
        }
        (f, grad, g)
    };
    let rel = |grad: &DVector<f64>| (0..k).map(|j| grad[j].abs() / scale[j]).fold(0.0, f64::max);

    let mut lambda = DVector::zeros(k);
    let (mut f, mut grad, mut g) = eval(&lambda);
    let mut iterations = 0;
    while rel(&grad) > 1e-15 && iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let dg = d[i] * g[i];
            let ai = a.row(i);
            for x in 0..k {
                for y in x..k {
                    hess[(x, y)] += dg * ai[x] * ai[y];
                }
            }
        }
        for x in 0..k {
            for y in 0..x {
                hess[(x, y)] = hess[(y, x)];
            }
        }
        let before = rel(&grad);
        let Some(chol) = hess.cholesky() else { break };
        let step = -chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut s = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &lambda + &step * s;
            let (fc, gc, gg) = eval(&cand);
            let sufficient = fc <= f + 1e-4 * s * slope;
            // Near the optimum the objective stops resolving; a full step
            // that shrinks the residual without raising it is still progress.
            let resolved = s == 1.0 && fc <= f + 1e-12 * f.abs().max(1.0) && rel(&gc) < rel(&grad);
            if fc.is_finite() && (sufficient || resolved) {
                lambda = cand;
                f = fc;
                grad = gc;
                g = gg;
                moved = true;
                break;
            }
            s *= 0.5;
        }
        if !moved || (rel(&grad) < TOLERANCE && rel(&grad) > 0.5 * before) {
            break;
        }
    }
    let residual = rel(&grad);
    if !(residual < TOLERANCE) || g.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(RakingError::Infeasible { iterations, residual });
    }
    let primal: f64 = d.iter().zip(&g).map(|(d, g)| d * (g * g.ln() - g + 1.0)).sum();
    let dual: f64 = d.iter().zip(&g).map(|(d, g)| d * (1.0 - g)).sum::<f64>() + lambda.dot(&t);
    Ok(CalibrationResult {
        g,
        lambda: lambda.iter().copied().collect(),
        kept_columns: kept,
        dropped_columns: dropped,
        constraint_residual: residual,
        iterations,
        primal,
        dual,
    })
}

/// Calibration with design weights `1/π` against population totals of `aux`.
/// `pi` lists the sampled records' probabilities in row order.
pub fn calibrate(pi: &[f64], aux: &DMatrix<f64>, sampled: &[bool]) -> Result<CalibrationResult, RakingError> {
    if sampled.len() != aux.nrows() {
        return Err(RakingError::Invalid("sampled flags and aux rows differ".into()));
    }
    let rows: Vec<usize> = (0..sampled.len()).filter(|&i| sampled[i]).collect();
    if rows.len() != pi.len() {
        return Err(RakingError::Invalid(format!("{} probabilities for {} sampled rows", pi.len(), rows.len())));
    }
    check_probabilities(pi)?;
    let d: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    let totals = column_totals(aux);
    calibrate_weights(&d, &aux.select_rows(&rows), &totals)
}

pub fn column_totals(aux: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(aux.ncols(), aux.column_iter().map(|c| c.sum()))
}

pub fn check_probabilities(pi: &[f64]) -> Result<(), RakingError> {
    match pi.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
        Some(i) => Err(RakingError::Invalid(format!("sampling probability {} at position {i} is outside (0, 1]", pi[i]))),
        None => Ok(()),
    }
}

/// Sampling-design description of the analysis rows.
#[derive(Debug, Clone, Copy)]
pub struct Design<'a> {
    pub strata: &'a [String],
    /// Rows sharing a label form one sampling unit.
    pub clusters: Option<&'a [String]>,
    /// Sampling fraction per stratum label, for a finite-population correction.
    pub fpc: Option<&'a BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub fit: FitResult,
    /// Design-based variance.
    pub variance: DMatrix<f64>,
    pub pooled_fallback: bool,
    pub calibration: Option<CalibrationResult>,
}

impl Estimate {
    pub fn coefficient(&self, j: usize) -> f64 {
        self.fit.coefficients[j]
    }

    pub fn se(&self, j: usize) -> f64 {
        self.variance[(j, j)].sqrt()
    }
}

fn design_variance(h: &DMatrix<f64>, design: Design<'_>) -> (DMatrix<f64>, bool) {
    let v = sandwich_variance::<String, String>(h, design.strata, design.clusters, design.fpc);
    (v.matrix, v.pooled_fallback)
}

/// Weighted fit with arbitrary design weights (1/π for a single frame,
/// combined weights for several).
pub fn weighted_fit(data: &ModelData, weights: &[f64], design: Design<'_>) -> Result<Estimate, RakingError> {
    if design.strata.len() != data.len() {
        return Err(RakingError::Invalid("one stratum label per analysis row required".into()));
    }
    let fit = data.fit(weights)?;
    let (variance, pooled_fallback) = design_variance(&fit.influence, design);
    Ok(Estimate { fit, variance, pooled_fallback, calibration: None })
}

/// Inverse-probability-weighted fit on the sampled rows.
pub fn ipw_fit(data: &ModelData, pi: &[f64], design: Design<'_>) -> Result<Estimate, RakingError> {
    check_probabilities(pi)?;
    let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    weighted_fit(data, &w, design)
}

/// Raked fit: design weights `d` calibrated on `aux_sampled` to `totals`,
/// then a weighted fit. The variance uses residuals of the unit influence
/// regressed on the auxiliaries.
pub fn raking_fit(
    data: &ModelData,
    d: &[f64],
    aux_sampled: &DMatrix<f64>,
    totals: &DVector<f64>,
    design: Design<'_>,
) -> Result<Estimate, RakingError> {
    if design.strata.len() != data.len() || aux_sampled.nrows() != data.len() {
        return Err(RakingError::Invalid("analysis rows, aux rows and strata must align".into()));
    }
    let cal = calibrate_weights(d, aux_sampled, totals)?;
    let w = cal.weights(d);
    let fit = data.fit(&w)?;
    let a = aux_sampled.select_columns(&cal.kept_columns);
    let mut unit = fit.influence.clone();
    for (i, wi) in w.iter().enumerate() {
        unit.row_mut(i).scale_mut(1.0 / wi);
    }
    let gamma = weighted_least_squares(&a, &unit, &w).ok_or(RakingError::Singular)?;
    let mut resid = unit - &a * gamma;
    for (i, wi) in w.iter().enumerate() {
        resid.row_mut(i).scale_mut(*wi);
    }
    let (variance, pooled_fallback) = design_variance(&resid, design);
    Ok(Estimate { fit, variance, pooled_fallback, calibration: Some(cal) })
}

/// Relative max-norm of `Σ w a − T`, for checking any weight vector.
pub fn calibration_residual(w: &[f64], aux: &DMatrix<f64>, totals: &DVector<f64>) -> f64 {
    let mut r = -totals.clone();
    let mut scale = totals.abs();
    for i in 0..aux.nrows() {
        for j in 0..aux.ncols() {
            r[j] += w[i] * aux[(i, j)];
            scale[j] += (w[i] * aux[(i, j)]).abs();
        }
    }
    max_abs(&r.component_div(&scale.map(|s| if s > 0.0 { s } else { 1.0 })))
}
