//! Sparse functional PCA by conditional expectation.
//!
//! The mean and covariance are estimated by binned local-linear smoothing of
//! pooled observations and raw cross-products, the covariance surface is
//! eigendecomposed under trapezoid quadrature, and subject scores are best
//! linear predictors given the subject's own sparse, noisy observations.

pub mod pace;
pub mod smooth;

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use smooth::{cross_validate, local_linear_1d, local_linear_2d, Bins1, Bins2, Grid, BANDWIDTH_FRACTIONS};

pub use pace::{flag_outliers, pace_scores, reconstruct, weight_change, Scores};

/// Pregnancy-anchored domain: a year before conception to day 272.
pub const DOMAIN: (f64, f64) = (-365.0, 272.0);
pub const DEFAULT_GRID: usize = 101;
pub const DEFAULT_FVE: f64 = 0.999;
/// Gestation assumed when the true length is unknown.
pub const ASSUMED_GESTATION: f64 = 273.0;

#[derive(Debug, Error)]
pub enum FpcaError {
    #[error("no series supplied")]
    Empty,
    #[error("at least {needed} subjects are required, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("series {subject}: {reason}")]
    InvalidSeries { subject: String, reason: String },
    #[error("covariance estimate is ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("t = {t} lies outside the domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },
    #[error("gestation length {g} days is outside the supported range [14, 273]")]
    GestationRange { g: f64 },
    #[error("series {subject} has no observations inside the domain")]
    NoObservations { subject: String },
    #[error("smoothing failed: {0}")]
    Smoothing(String),
}

/// One subject's weight measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSeries {
    pub subject: String,
    /// Days relative to (assumed) conception.
    pub times: Vec<f64>,
    /// Weight in kg.
    pub values: Vec<f64>,
}

impl LongitudinalSeries {
    pub fn new(subject: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self, FpcaError> {
        let s = LongitudinalSeries { subject: subject.into(), times, values };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), FpcaError> {
        let bad = |reason: &str| Err(FpcaError::InvalidSeries { subject: self.subject.clone(), reason: reason.into() });
        if self.times.is_empty() {
            return bad("no observations");
        }
        if self.times.len() != self.values.len() {
            return bad("times and values differ in length");
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("times must be finite and strictly increasing");
        }
        if self.values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("values must be finite and positive");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Observations inside `[lo, hi]`.
    pub fn within(&self, lo: f64, hi: f64) -> LongitudinalSeries {
        let (times, values) =
            self.times.iter().zip(&self.values).filter(|(t, _)| **t >= lo && **t <= hi).map(|(t, v)| (*t, *v)).unzip();
        LongitudinalSeries { subject: self.subject.clone(), times, values }
    }

    /// Times shifted by `delta` days.
    pub fn shifted(&self, delta: f64) -> LongitudinalSeries {
        LongitudinalSeries {
            subject: self.subject.clone(),
            times: self.times.iter().map(|t| t + delta).collect(),
            values: self.values.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// `K` functions, each sampled on `grid`.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub noise_var: f64,
    /// Cumulative fraction of variance explained by the first `k + 1`
    /// positive eigenvalues, over all of them.
    pub fve: Vec<f64>,
    pub bandwidth_mean: f64,
    pub bandwidth_cov: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub const FLAG_ZERO_VARIATION: &str = "zero_variation";

impl EigenSystem {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn grid_spec(&self) -> Grid {
        Grid { lo: self.grid[0], hi: *self.grid.last().expect("non-empty grid"), size: self.grid.len() }
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        smooth::interpolate(&self.grid_spec(), &self.mean, t)
    }

    pub fn phi_at(&self, k: usize, t: f64) -> f64 {
        smooth::interpolate(&self.grid_spec(), &self.eigenfunctions[k], t)
    }

    /// Quadrature Gram matrix of the eigenfunctions.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = self.grid_spec().trapezoid();
        let k = self.k();
        DMatrix::from_fn(k, k, |a, b| {
            (0..w.len()).map(|g| w[g] * self.eigenfunctions[a][g] * self.eigenfunctions[b][g]).sum()
        })
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// Mean gain between two days, `μ̂(b) − μ̂(a)`.
    pub fn mean_change(&self, a: f64, b: f64) -> f64 {
        self.mean_at(b) - self.mean_at(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaOptions {
    pub grid_size: usize,
    /// Fixed bandwidths in days; cross-validated when absent.
    pub bandwidth_mean: Option<f64>,
    pub bandwidth_cov: Option<f64>,
    pub fve_threshold: f64,
    pub max_components: Option<usize>,
    /// Subjects used for covariance cross-validation; a deterministic subset
    /// keeps bandwidth selection cheap on large inputs.
    pub cv_subjects: usize,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        FpcaOptions {
            grid_size: DEFAULT_GRID,
            bandwidth_mean: None,
            bandwidth_cov: None,
            fve_threshold: DEFAULT_FVE,
            max_components: None,
            cv_subjects: 2000,
        }
    }
}

const FOLDS: usize = 5;

fn choose_bandwidth<B: Clone>(
    range: f64,
    tiny: bool,
    total: &B,
    folds: &[B],
    minus: impl Fn(&B, &B) -> B,
    fit: impl Fn(&B, f64) -> Option<Vec<f64>>,
    sse: impl Fn(&B, &[f64]) -> f64,
) -> f64 {
    if tiny {
        return range / 10.0;
    }
    let candidates: Vec<f64> = BANDWIDTH_FRACTIONS.iter().map(|f| f * range).collect();
    cross_validate(&candidates, total, folds, minus, fit, sse).unwrap_or(range / 10.0)
}

/// Estimates the mean, covariance eigensystem and noise variance.
pub fn fit_eigensystem(series: &[LongitudinalSeries], opts: &FpcaOptions) -> Result<EigenSystem, FpcaError> {
    if series.is_empty() {
        return Err(FpcaError::Empty);
    }
    if series.len() < 2 {
        return Err(FpcaError::TooFewSubjects { needed: 2, got: series.len() });
    }
    if opts.grid_size < 3 {
        return Err(FpcaError::Smoothing("grid needs at least 3 points".into()));
    }
    for s in series {
        s.check()?;
    }
    let grid = Grid { lo: DOMAIN.0, hi: DOMAIN.1, size: opts.grid_size };
    let range = grid.hi - grid.lo;
    let g = grid.size;
    let inside: Vec<LongitudinalSeries> =
        series.iter().map(|s| s.within(grid.lo, grid.hi)).filter(|s| !s.is_empty()).collect();
    if inside.len() < 2 {
        return Err(FpcaError::TooFewSubjects { needed: 2, got: inside.len() });
    }
    let n_obs: usize = inside.iter().map(|s| s.len()).sum();
    let tiny = inside.len() < 2 * FOLDS || n_obs < 50;

    // Mean.
    let mut mean_folds = vec![Bins1::new(g); FOLDS];
    for (i, s) in inside.iter().enumerate() {
        for (t, v) in s.times.iter().zip(&s.values) {
            mean_folds[i % FOLDS].add(&grid, *t, *v);
        }
    }
    let mean_total = sum_bins1(&mean_folds, g);
    let h_mean = opts.bandwidth_mean.unwrap_or_else(|| {
        choose_bandwidth(range, tiny, &mean_total, &mean_folds, Bins1::minus, |b, h| local_linear_1d(&grid, b, h), Bins1::sse)
    });
    let mean = local_linear_1d(&grid, &mean_total, h_mean)
        .ok_or_else(|| FpcaError::Smoothing("mean smoother found no data".into()))?;

    // Raw covariances: off-diagonal pairs on the surface, squares on the diagonal.
    let cv_every = (inside.len() / opts.cv_subjects.max(1)).max(1);
    let mut cov_folds = vec![Bins2::new(g); FOLDS];
    let mut cov_total = Bins2::new(g);
    let mut diag = Bins1::new(g);
    for (i, s) in inside.iter().enumerate() {
        let resid: Vec<f64> =
            s.times.iter().zip(&s.values).map(|(t, v)| v - smooth::interpolate(&grid, &mean, *t)).collect();
        let in_cv = i % cv_every == 0;
        for a in 0..s.len() {
            diag.add(&grid, s.times[a], resid[a] * resid[a]);
            for b in 0..s.len() {
                if a == b {
                    continue;
                }
                let y = resid[a] * resid[b];
                cov_total.add(&grid, s.times[a], s.times[b], y);
                if in_cv {
                    cov_folds[(i / cv_every) % FOLDS].add(&grid, s.times[a], s.times[b], y);
                }
            }
        }
    }
    if cov_total.c.iter().all(|&c| c <= 0.0) {
        return Err(FpcaError::IllConditioned("no subject has two observations".into()));
    }
    let h_cov = opts.bandwidth_cov.unwrap_or_else(|| {
        let cv_total = sum_bins2(&cov_folds, g);
        choose_bandwidth(range, tiny, &cv_total, &cov_folds, Bins2::minus, |b, h| local_linear_2d(&grid, b, h), Bins2::sse)
    });
    debug!("fpca bandwidths: mean {h_mean:.1}, covariance {h_cov:.1}");
    let surface = local_linear_2d(&grid, &cov_total, h_cov)
        .ok_or_else(|| FpcaError::Smoothing("covariance smoother found no data".into()))?;
    let variance = local_linear_1d(&grid, &diag, h_cov)
        .ok_or_else(|| FpcaError::Smoothing("variance smoother found no data".into()))?;

    // Noise variance from the diagonal gap over the middle half of the domain.
    let (q1, q3) = (g / 4, 3 * g / 4);
    let gap: f64 = (q1..=q3).map(|k| variance[k] - surface[k * g + k]).sum::<f64>() / (q3 - q1 + 1) as f64;
    let noise_var = gap.max(0.0);

    // Eigendecomposition of D^{1/2} C D^{1/2}.
    let w = grid.trapezoid();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let m = DMatrix::from_fn(g, g, |a, b| 0.5 * (surface[a * g + b] + surface[b * g + a]) * sw[a] * sw[b]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let positive: Vec<usize> = order.iter().copied().filter(|&k| eig.eigenvalues[k] > 0.0).collect();
    let total: f64 = positive.iter().map(|&k| eig.eigenvalues[k]).sum();

    let scale: f64 = mean.iter().zip(&w).map(|(m, w)| w * m * m).sum::<f64>().max(1.0);
    let mut flags = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut eigenfunctions = Vec::new();
    let mut fve = Vec::new();
    if positive.is_empty() || total <= 1e-12 * scale {
        warn!("covariance surface has no variation");
        flags.push(FLAG_ZERO_VARIATION.to_string());
    } else {
        let mut acc = 0.0;
        for &k in &positive {
            acc += eig.eigenvalues[k];
            fve.push(acc / total);
        }
        let mut kk = fve.iter().position(|&f| f >= opts.fve_threshold).map_or(positive.len(), |p| p + 1);
        if let Some(cap) = opts.max_components {
            kk = kk.min(cap);
        }
        for &k in positive.iter().take(kk) {
            let lambda = eig.eigenvalues[k];
            if !(lambda > 1e-12 * total) {
                return Err(FpcaError::IllConditioned(format!("eigenvalue {lambda:.3e} among the leading {kk}")));
            }
            let mut phi: Vec<f64> = (0..g).map(|a| eig.eigenvectors[(a, k)] / sw[a]).collect();
            let integral: f64 = phi.iter().zip(&w).map(|(p, w)| p * w).sum();
            if integral < 0.0 {
                phi.iter_mut().for_each(|p| *p = -*p);
            }
            eigenvalues.push(lambda);
            eigenfunctions.push(phi);
        }
    }
    Ok(EigenSystem {
        grid: grid.points(),
        mean,
        eigenvalues,
        eigenfunctions,
        noise_var,
        fve,
        bandwidth_mean: h_mean,
        bandwidth_cov: h_cov,
        flags,
    })
}

fn sum_bins1(folds: &[Bins1], g: usize) -> Bins1 {
    let mut t = Bins1::new(g);
    for f in folds {
        for k in 0..g {
            t.c[k] += f.c[k];
            t.s[k] += f.s[k];
            t.q[k] += f.q[k];
        }
    }
    t
}

fn sum_bins2(folds: &[Bins2], g: usize) -> Bins2 {
    let mut t = Bins2::new(g);
    for f in folds {
        for k in 0..g * g {
            t.c[k] += f.c[k];
            t.s[k] += f.s[k];
            t.q[k] += f.q[k];
        }
    }
    t
}

/// Scores every series in parallel; output order follows the input.
pub fn score_all(series: &[LongitudinalSeries], eig: &EigenSystem) -> Vec<Result<Scores, FpcaError>> {
    series.par_iter().map(|s| pace_scores(s, eig)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_trajectories_have_no_variation() {
        let series: Vec<LongitudinalSeries> = (0..30)
            .map(|i| {
                let times: Vec<f64> = (0..8).map(|j| -360.0 + 80.0 * j as f64 + i as f64).collect();
                LongitudinalSeries::new(format!("s{i}"), times, vec![64.0; 8]).unwrap()
            })
            .collect();
        let eig = fit_eigensystem(&series, &FpcaOptions::default()).unwrap();
        assert!(eig.has_flag(FLAG_ZERO_VARIATION));
        assert_eq!(eig.k(), 0);
        assert!(eig.mean.iter().all(|m| (m - 64.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(fit_eigensystem(&[], &FpcaOptions::default()), Err(FpcaError::Empty)));
        assert!(LongitudinalSeries::new("a", vec![2.0, 1.0], vec![60.0, 61.0]).is_err());
        assert!(LongitudinalSeries::new("a", vec![1.0], vec![-1.0]).is_err());
    }
}
