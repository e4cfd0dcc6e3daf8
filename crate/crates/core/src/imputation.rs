//! Parametric multiple imputation of validated variables and the averaged
//! influence auxiliary.
//!
//! Every target is imputed from a regression fitted on the validated rows,
//! conditional on phase-1 columns and earlier targets. Each replicate draws
//! the regression parameters from their approximate posterior before drawing
//! values, so between-replicate spread reflects estimation uncertainty.

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{psd_sqrt, spd_inverse};
use crate::models::logistic::{fit_logistic, sigmoid};
use crate::models::ModelError;
use crate::rng;

#[derive(Debug, Error)]
pub enum ImputationError {
    #[error("{got} validated records available, at least {needed} required")]
    TooFewValidated { got: usize, needed: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` has {got} rows, expected {expected}")]
    Length { column: String, got: usize, expected: usize },
    #[error("target `{target}`: {source}")]
    Model {
        target: String,
        #[source]
        source: ModelError,
    },
    #[error("target `{0}`: design matrix is singular")]
    Singular(String),
    #[error("{failed} of {total} imputation replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("invalid imputation setup: {0}")]
    Invalid(String),
}

/// Maps a record index and an input value to a derived value.
pub type DeriveFn = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum TargetKind {
    Linear,
    Logistic,
    /// Computed from another (earlier) column, e.g. exposure from gestation.
    Derived { input: String, f: DeriveFn },
}

impl std::fmt::Debug for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetKind::Linear => f.write_str("Linear"),
            TargetKind::Logistic => f.write_str("Logistic"),
            TargetKind::Derived { input, .. } => write!(f, "Derived({input})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub name: String,
    pub kind: TargetKind,
    /// Predictor columns; an intercept is always added.
    pub predictors: Vec<String>,
    /// Rows where the target is defined (e.g. asthma only in its frame);
    /// elsewhere it is imputed as 0 and excluded from the fit.
    pub mask: Option<Vec<bool>>,
}

impl TargetSpec {
    pub fn new(name: impl Into<String>, kind: TargetKind, predictors: &[&str]) -> Self {
        TargetSpec { name: name.into(), kind, predictors: predictors.iter().map(|s| s.to_string()).collect(), mask: None }
    }
}

/// Named numeric columns over the whole phase-1 population. Target columns
/// hold the validated values on validated rows; other entries are ignored.
#[derive(Debug, Clone, Default)]
pub struct ImputationFrame {
    pub n: usize,
    pub columns: HashMap<String, Vec<f64>>,
    pub validated: Vec<bool>,
}

impl ImputationFrame {
    pub fn new(validated: Vec<bool>) -> Self {
        ImputationFrame { n: validated.len(), columns: HashMap::new(), validated }
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<(), ImputationError> {
        let name = name.into();
        if values.len() != self.n {
            return Err(ImputationError::Length { column: name, got: values.len(), expected: self.n });
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64], ImputationError> {
        self.columns.get(name).map(Vec::as_slice).ok_or_else(|| ImputationError::UnknownColumn(name.to_string()))
    }
}

#[derive(Debug, Clone)]
enum Law {
    Linear { beta: DVector<f64>, xtx_inv_sqrt: DMatrix<f64>, rss: f64, df: f64 },
    Logistic { beta: DVector<f64>, cov_sqrt: DMatrix<f64> },
    /// Separated logistic fit: last-iterate coefficients, no parameter draw.
    LogisticFixed { beta: DVector<f64> },
    Constant(f64),
    Derived { input: String, f: Derive },
}

#[derive(Clone)]
struct Derive(DeriveFn);

impl std::fmt::Debug for Derive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("<fn>")
    }
}

#[derive(Debug, Clone)]
pub struct SubModel {
    pub name: String,
    predictors: Vec<String>,
    mask: Option<Vec<bool>>,
    law: Law,
    pub flags: Vec<String>,
}

impl SubModel {
    /// Point estimates of the regression coefficients (intercept first).
    pub fn coefficients(&self) -> Option<&DVector<f64>> {
        match &self.law {
            Law::Linear { beta, .. } | Law::Logistic { beta, .. } | Law::LogisticFixed { beta } => Some(beta),
            _ => None,
        }
    }

    /// Residual SD of a linear sub-model.
    pub fn residual_scale(&self) -> Option<f64> {
        match &self.law {
            Law::Linear { rss, df, .. } => Some((rss / df).sqrt()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImputationModel {
    pub submodels: Vec<SubModel>,
}

fn design(frame_cols: &[&[f64]], rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), frame_cols.len() + 1, |r, c| if c == 0 { 1.0 } else { frame_cols[c - 1][rows[r]] })
}

/// Fits one sub-model per target, in order, on the validated rows.
pub fn fit_imputation(
    frame: &ImputationFrame,
    specs: &[TargetSpec],
    min_validated: usize,
) -> Result<ImputationModel, ImputationError> {
    let all_rows: Vec<usize> = (0..frame.n).filter(|&i| frame.validated[i]).collect();
    if all_rows.len() < min_validated {
        return Err(ImputationError::TooFewValidated { got: all_rows.len(), needed: min_validated });
    }
    let mut defined: Vec<String> = Vec::new();
    let mut submodels = Vec::new();
    for spec in specs {
        for p in &spec.predictors {
            if !frame.columns.contains_key(p) {
                return Err(ImputationError::UnknownColumn(p.clone()));
            }
            if specs.iter().any(|s| &s.name == p) && !defined.contains(p) {
                return Err(ImputationError::Invalid(format!("`{}` uses `{p}` before it is imputed", spec.name)));
            }
        }
        let rows: Vec<usize> =
            all_rows.iter().copied().filter(|&i| spec.mask.as_ref().is_none_or(|m| m[i])).collect();
        let mut flags = Vec::new();
        let mut predictors = spec.predictors.clone();
        let law = match &spec.kind {
            TargetKind::Derived { input, f } => {
                if !defined.contains(input) && !frame.columns.contains_key(input) {
                    return Err(ImputationError::UnknownColumn(input.clone()));
                }
                Law::Derived { input: input.clone(), f: Derive(f.clone()) }
            }
            kind => {
                let y_all = frame.column(&spec.name)?;
                let y: Vec<f64> = rows.iter().map(|&i| y_all[i]).collect();
                if y.is_empty() {
                    return Err(ImputationError::TooFewValidated { got: 0, needed: 1 });
                }
                let first = y[0];
                if y.iter().all(|&v| v == first) {
                    warn!("target `{}` is constant among validated rows; imputing {first}", spec.name);
                    flags.push("constant".to_string());
                    Law::Constant(first)
                } else {
                    let cols: Vec<&[f64]> = spec.predictors.iter().map(|p| frame.column(p)).collect::<Result<_, _>>()?;
                    let mut x = design(&cols, &rows);
                    let kept = independent_columns(&x);
                    if kept.len() < x.ncols() {
                        for c in (1..x.ncols()).filter(|c| !kept.contains(c)) {
                            warn!("target `{}`: predictor `{}` is aliased and dropped", spec.name, spec.predictors[c - 1]);
                            flags.push(format!("aliased:{}", spec.predictors[c - 1]));
                        }
                        predictors = kept.iter().filter(|&&c| c > 0).map(|&c| spec.predictors[c - 1].clone()).collect();
                        x = x.select_columns(&kept);
                    }
                    match kind {
                        TargetKind::Linear => fit_linear(&spec.name, &x, &y)?,
                        _ => {
                            let yb: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
                            let (ya, xa, wa) = augment(&yb, &x);
                            match fit_logistic(&ya, &xa, &wa) {
                                Ok(fit) => Law::Logistic { beta: fit.coefficients, cov_sqrt: psd_sqrt(&fit.naive_variance) },
                                Err(e) => match e.last_coefficients() {
                                    Some(c) => {
                                        warn!("target `{}`: {e}; using last iterate without parameter draws", spec.name);
                                        flags.push("separation".to_string());
                                        Law::LogisticFixed { beta: DVector::from_column_slice(c) }
                                    }
                                    None => return Err(ImputationError::Model { target: spec.name.clone(), source: e }),
                                },
                            }
                        }
                    }
                }
            }
        };
        defined.push(spec.name.clone());
        submodels.push(SubModel { name: spec.name.clone(), predictors, mask: spec.mask.clone(), law, flags });
    }
    Ok(ImputationModel { submodels })
}

/// Adds `4p` low-weight pseudo-records (each predictor at its mean ± one SD,
/// the others at their means, once with each outcome) so that the logistic
/// fit stays finite under perfect prediction. Total added weight is `p + 1`.
fn augment(y: &[bool], x: &DMatrix<f64>) -> (Vec<bool>, DMatrix<f64>, Vec<f64>) {
    let (n, q) = x.shape();
    let p = q - 1;
    if p == 0 {
        return (y.to_vec(), x.clone(), vec![1.0; n]);
    }
    let means: Vec<f64> = (0..q).map(|c| x.column(c).mean()).collect();
    let sds: Vec<f64> = (0..q).map(|c| x.column(c).variance().sqrt()).collect();
    let extra = 4 * p;
    let mut xa = x.clone().resize_vertically(n + extra, 0.0);
    let mut ya = y.to_vec();
    let mut wa = vec![1.0; n];
    let w = (p + 1) as f64 / extra as f64;
    let mut r = n;
    for j in 1..q {
        for sign in [-1.0, 1.0] {
            for outcome in [false, true] {
                for c in 0..q {
                    xa[(r, c)] = means[c];
                }
                xa[(r, j)] += sign * sds[j];
                ya.push(outcome);
                wa.push(w);
                r += 1;
            }
        }
    }
    (ya, xa, wa)
}

/// Columns kept by a greedy left-to-right rank scan; later columns that lie in
/// the span of earlier ones are dropped.
fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c).into_owned();
        let scale = col.norm();
        let mut v = col;
        for b in &basis {
            let d = b.dot(&v);
            v -= b * d;
        }
        // A second pass keeps the projection accurate for nearly dependent columns.
        for b in &basis {
            let d = b.dot(&v);
            v -= b * d;
        }
        let r = v.norm();
        if scale > 0.0 && r > 1e-9 * scale {
            basis.push(v / r);
            kept.push(c);
        }
    }
    kept
}

fn fit_linear(name: &str, x: &DMatrix<f64>, y: &[f64]) -> Result<Law, ImputationError> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(ImputationError::TooFewValidated { got: n, needed: p + 1 });
    }
    let xtx = x.transpose() * x;
    let inv = spd_inverse(&xtx).ok_or_else(|| ImputationError::Singular(name.to_string()))?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * (x.transpose() * &yv);
    let resid = yv - x * &beta;
    let rss = resid.norm_squared();
    Ok(Law::Linear { beta, xtx_inv_sqrt: psd_sqrt(&inv), rss, df: (n - p) as f64 })
}

fn normal_vector(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One completed dataset: every target column filled for all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Completed {
    pub columns: HashMap<String, Vec<f64>>,
}

impl Completed {
    pub fn column(&self, name: &str) -> &[f64] {
        &self.columns[name]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidatedRows {
    /// Validated rows are imputed like all others.
    #[default]
    Reimpute,
    /// Validated rows keep their observed values.
    PassThrough,
}

/// Replicate `m`; depends only on `(seed, m)`.
pub fn impute_one(frame: &ImputationFrame, model: &ImputationModel, seed: u64, m: u64, rows: ValidatedRows) -> Completed {
    let mut rng = rng::stream(seed, &[m]);
    let mut imputed: HashMap<String, Vec<f64>> = HashMap::new();
    for sub in &model.submodels {
        let col = |name: &str, imputed: &HashMap<String, Vec<f64>>| -> Vec<f64> {
            imputed.get(name).cloned().unwrap_or_else(|| frame.columns[name].clone())
        };
        let preds: Vec<Vec<f64>> = sub.predictors.iter().map(|p| col(p, &imputed)).collect();
        let lin = |beta: &DVector<f64>, i: usize| beta[0] + preds.iter().enumerate().map(|(c, v)| beta[c + 1] * v[i]).sum::<f64>();
        let mut out = vec![0.0; frame.n];
        match &sub.law {
            Law::Constant(c) => out.iter_mut().for_each(|v| *v = *c),
            Law::Linear { beta, xtx_inv_sqrt, rss, df } => {
                let chi: f64 = ChiSquared::new(*df).expect("positive df").sample(&mut rng);
                let sigma = (rss / chi).sqrt();
                let b = beta + xtx_inv_sqrt * normal_vector(&mut rng, beta.len()) * sigma;
                for (i, v) in out.iter_mut().enumerate() {
                    *v = lin(&b, i) + sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Law::Logistic { beta, cov_sqrt } => {
                let b = beta + cov_sqrt * normal_vector(&mut rng, beta.len());
                for (i, v) in out.iter_mut().enumerate() {
                    *v = bernoulli(&mut rng, sigmoid(lin(&b, i)));
                }
            }
            Law::LogisticFixed { beta } => {
                for (i, v) in out.iter_mut().enumerate() {
                    *v = bernoulli(&mut rng, sigmoid(lin(beta, i)));
                }
            }
            Law::Derived { input, f } => {
                let src = col(input, &imputed);
                for (i, v) in out.iter_mut().enumerate() {
                    *v = (f.0)(i, src[i]);
                }
            }
        }
        if let Some(mask) = &sub.mask {
            for (i, v) in out.iter_mut().enumerate() {
                if !mask[i] {
                    *v = 0.0;
                }
            }
        }
        if rows == ValidatedRows::PassThrough && !matches!(sub.law, Law::Derived { .. }) {
            if let Some(obs) = frame.columns.get(&sub.name) {
                for i in 0..frame.n {
                    if frame.validated[i] && sub.mask.as_ref().is_none_or(|m| m[i]) {
                        out[i] = obs[i];
                    }
                }
            }
        }
        imputed.insert(sub.name.clone(), out);
    }
    Completed { columns: imputed }
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if Bernoulli::new(p).expect("clamped probability").sample(rng) {
        1.0
    } else {
        0.0
    }
}

pub fn impute(frame: &ImputationFrame, model: &ImputationModel, m: usize, seed: u64, rows: ValidatedRows) -> Vec<Completed> {
    (0..m as u64).into_par_iter().map(|r| impute_one(frame, model, seed, r, rows)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiInfluence {
    pub h: Vec<f64>,
    pub used: usize,
    pub failed: Vec<usize>,
}

/// Averages the analysis influence over `m` completed datasets.
///
/// `analysis` fits the analysis model on one completed dataset and returns the
/// target influence for all rows. Failed replicates are dropped; half or more
/// failing is an error.
pub fn mi_influence<F>(
    frame: &ImputationFrame,
    model: &ImputationModel,
    m: usize,
    seed: u64,
    rows: ValidatedRows,
    analysis: F,
) -> Result<MiInfluence, ImputationError>
where
    F: Fn(&Completed) -> Result<Vec<f64>, ModelError> + Sync,
{
    if m < 2 {
        return Err(ImputationError::Invalid(format!("need at least 2 imputations, got {m}")));
    }
    let results: Vec<Result<Vec<f64>, ModelError>> =
        (0..m as u64).into_par_iter().map(|r| analysis(&impute_one(frame, model, seed, r, rows))).collect();
    let mut sum = vec![0.0; frame.n];
    let mut used = 0;
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(h) if h.len() == frame.n => {
                for (s, v) in sum.iter_mut().zip(&h) {
                    *s += v;
                }
                used += 1;
            }
            Ok(h) => {
                return Err(ImputationError::Invalid(format!("analysis returned {} values for {} rows", h.len(), frame.n)))
            }
            Err(e) => {
                warn!("imputation replicate {r} dropped: {e}");
                failed.push(r);
            }
        }
    }
    if 2 * failed.len() >= m {
        return Err(ImputationError::TooManyFailures { failed: failed.len(), total: m });
    }
    let h = sum.into_iter().map(|s| s / used as f64).collect();
    Ok(MiInfluence { h, used, failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn frame(n: usize, seed: u64) -> ImputationFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let validated: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let mut f = ImputationFrame::new(validated);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let x: Vec<f64> = xs.iter().map(|v| 1.0 + 0.5 * v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let d: Vec<f64> = xs.iter().map(|v| if rng.random::<f64>() < sigmoid(-1.0 + v) { 1.0 } else { 0.0 }).collect();
        f.insert("x_star", xs).unwrap();
        f.insert("x", x).unwrap();
        f.insert("d", d).unwrap();
        f
    }

    fn specs() -> Vec<TargetSpec> {
        vec![
            TargetSpec::new("x", TargetKind::Linear, &["x_star"]),
            TargetSpec::new("d", TargetKind::Logistic, &["x_star", "x"]),
        ]
    }

    #[test]
    fn perfect_prediction_stays_finite() {
        let n = 200;
        let mut f = ImputationFrame::new(vec![true; n]);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        f.insert("d", xs.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect()).unwrap();
        f.insert("x_star", xs).unwrap();
        let m = fit_imputation(&f, &[TargetSpec::new("d", TargetKind::Logistic, &["x_star"])], 10).unwrap();
        let beta = m.submodels[0].coefficients().unwrap();
        assert!(beta.iter().all(|b| b.is_finite() && b.abs() < 1e3), "{beta}");
        assert!(beta[1] > 10.0);
        assert!(m.submodels[0].flags.is_empty());
    }

    #[test]
    fn aliased_predictor_dropped() {
        let mut f = frame(300, 4);
        let copy = f.column("x_star").unwrap().iter().map(|v| 2.0 * v - 1.0).collect();
        f.insert("x_copy", copy).unwrap();
        let m = fit_imputation(&f, &[TargetSpec::new("x", TargetKind::Linear, &["x_star", "x_copy"])], 10).unwrap();
        assert_eq!(m.submodels[0].predictors, vec!["x_star".to_string()]);
        assert_eq!(m.submodels[0].flags, vec!["aliased:x_copy".to_string()]);
        let c = impute_one(&f, &m, 1, 0, ValidatedRows::Reimpute);
        assert!(c.column("x").iter().all(|v| v.is_finite()));
    }

    #[test]
    fn replicates_depend_only_on_seed_and_index() {
        let f = frame(300, 1);
        let model = fit_imputation(&f, &specs(), 30).unwrap();
        let a = impute(&f, &model, 2, 17, ValidatedRows::Reimpute);
        let b = impute(&f, &model, 2, 17, ValidatedRows::Reimpute);
        assert_eq!(a, b);
        assert_eq!(impute_one(&f, &model, 17, 1, ValidatedRows::Reimpute), a[1]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn exact_surrogate_is_reproduced() {
        let mut f = frame(200, 2);
        let xs = f.column("x_star").unwrap().to_vec();
        f.insert("x", xs.clone()).unwrap();
        let model = fit_imputation(&f, &specs()[..1], 30).unwrap();
        let c = impute_one(&f, &model, 5, 0, ValidatedRows::Reimpute);
        for (a, b) in c.column("x").iter().zip(&xs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_binary_target_imputes_constant() {
        let mut f = frame(120, 3);
        f.insert("d", vec![0.0; 120]).unwrap();
        let model = fit_imputation(&f, &specs(), 30).unwrap();
        assert_eq!(model.submodels[1].flags, vec!["constant".to_string()]);
        let c = impute_one(&f, &model, 5, 0, ValidatedRows::Reimpute);
        assert!(c.column("d").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_through_keeps_validated_values() {
        let f = frame(150, 4);
        let model = fit_imputation(&f, &specs(), 30).unwrap();
        let c = impute_one(&f, &model, 5, 0, ValidatedRows::PassThrough);
        let obs = f.column("x").unwrap();
        for i in (0..150).filter(|i| i % 3 == 0) {
            assert_eq!(c.column("x")[i], obs[i]);
        }
    }

    #[test]
    fn derived_targets_follow_their_input() {
        let f = frame(90, 5);
        let mut s = specs();
        s.push(TargetSpec::new("twice", TargetKind::Derived { input: "x".into(), f: Arc::new(|_, v| 2.0 * v) }, &[]));
        let model = fit_imputation(&f, &s, 30).unwrap();
        let c = impute_one(&f, &model, 9, 3, ValidatedRows::Reimpute);
        for (t, x) in c.column("twice").iter().zip(c.column("x")) {
            assert_eq!(*t, 2.0 * x);
        }
    }

    #[test]
    fn too_few_validated() {
        let f = frame(30, 6);
        assert!(matches!(fit_imputation(&f, &specs(), 30), Err(ImputationError::TooFewValidated { .. })));
    }

    #[test]
    fn averaging_is_a_plain_mean_and_failures_are_dropped() {
        let f = frame(90, 7);
        let model = fit_imputation(&f, &specs(), 30).unwrap();
        let per: Vec<Vec<f64>> = (0..6).map(|r| impute_one(&f, &model, 11, r, ValidatedRows::Reimpute).column("x").to_vec()).collect();
        let res = mi_influence(&f, &model, 6, 11, ValidatedRows::Reimpute, |c| Ok(c.column("x").to_vec())).unwrap();
        for i in 0..90 {
            let batch = per.iter().map(|v| v[i]).sum::<f64>() / 6.0;
            assert!((res.h[i] - batch).abs() < 1e-12);
        }
        let res = mi_influence(&f, &model, 6, 11, ValidatedRows::Reimpute, |c| {
            if c.column("d")[0] > 0.5 { Err(ModelError::Singular) } else { Ok(vec![0.0; 90]) }
        });
        match res {
            Ok(r) => assert!(2 * r.failed.len() < 6),
            Err(e) => assert!(matches!(e, ImputationError::TooManyFailures { .. })),
        }
    }
}
