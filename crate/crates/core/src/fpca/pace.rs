//! Conditional-expectation scores, reconstruction, exposure and outlier bands.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{EigenSystem, FpcaError, LongitudinalSeries, ASSUMED_GESTATION};

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub subject: String,
    pub xi: Vec<f64>,
    /// Conditional covariance of the scores given the observations.
    pub omega: DMatrix<f64>,
    /// A ridge replaced a zero noise variance on a rank-deficient subject.
    pub regularized: bool,
    pub observations: usize,
}

fn check_domain(eig: &EigenSystem, t: f64) -> Result<(), FpcaError> {
    let grid = eig.grid_spec();
    if grid.contains(t) {
        Ok(())
    } else {
        Err(FpcaError::Domain { t, lo: grid.lo, hi: grid.hi })
    }
}

/// Scores from observations `(t, w)`, all inside the domain.
fn scores_from(subject: &str, times: &[f64], values: &[f64], eig: &EigenSystem) -> Result<Scores, FpcaError> {
    let k = eig.k();
    let m = times.len();
    if m == 0 {
        return Err(FpcaError::NoObservations { subject: subject.to_string() });
    }
    if k == 0 {
        return Ok(Scores {
            subject: subject.to_string(),
            xi: Vec::new(),
            omega: DMatrix::zeros(0, 0),
            regularized: false,
            observations: m,
        });
    }
    let phi = DMatrix::from_fn(m, k, |j, c| eig.phi_at(c, times[j]));
    let resid = DVector::from_iterator(m, times.iter().zip(values).map(|(t, v)| v - eig.mean_at(*t)));
    let ptp = phi.transpose() * &phi;
    let ptr = phi.transpose() * resid;

    // Λ Φᵀ (ΦΛΦᵀ + σ²I)⁻¹ = (ΦᵀΦ + σ²Λ⁻¹)⁻¹ Φᵀ, and
    // Λ − ΛΦᵀ(ΦΛΦᵀ + σ²I)⁻¹ΦΛ = σ² (ΦᵀΦ + σ²Λ⁻¹)⁻¹.
    let lambda_max = eig.eigenvalues[0];
    let solve = |s2: f64| {
        let a = &ptp + DMatrix::from_diagonal(&DVector::from_iterator(k, eig.eigenvalues.iter().map(|l| s2 / l)));
        a.cholesky().map(|c| (c.solve(&ptr), c.inverse() * s2))
    };
    let mut regularized = false;
    let (xi, omega) = match solve(eig.noise_var) {
        Some(r) if eig.noise_var > 0.0 || m >= k => r,
        _ => {
            regularized = true;
            let ridge = 1e-10 * lambda_max.max(1.0);
            solve(eig.noise_var.max(ridge))
                .ok_or_else(|| FpcaError::IllConditioned(format!("scores for subject {subject}")))?
        }
    };
    let omega = crate::linalg::symmetrize(&omega);
    Ok(Scores { subject: subject.to_string(), xi: xi.iter().copied().collect(), omega, regularized, observations: m })
}

/// Best linear predictor of the scores from the observations inside the domain.
pub fn pace_scores(series: &LongitudinalSeries, eig: &EigenSystem) -> Result<Scores, FpcaError> {
    let g = eig.grid_spec();
    let s = series.within(g.lo, g.hi);
    scores_from(&series.subject, &s.times, &s.values, eig)
}

/// `μ̂(t) + Σ_k ξ_k φ̂_k(t)`.
pub fn reconstruct(xi: &[f64], eig: &EigenSystem, t: f64) -> Result<f64, FpcaError> {
    check_domain(eig, t)?;
    if xi.len() != eig.k() {
        return Err(FpcaError::IllConditioned(format!("{} scores for {} components", xi.len(), eig.k())));
    }
    Ok(eig.mean_at(t) + xi.iter().enumerate().map(|(k, x)| x * eig.phi_at(k, t)).sum::<f64>())
}

/// Weekly gain `[Ŵ(g − 1) − Ŵ(0)] / (g / 7)` after moving conception so the
/// pregnancy lasts `g` days. Series times are on the assumed-gestation scale.
pub fn weight_change(series: &LongitudinalSeries, eig: &EigenSystem, g: f64) -> Result<f64, FpcaError> {
    if !(14.0..=ASSUMED_GESTATION).contains(&g) {
        return Err(FpcaError::GestationRange { g });
    }
    let moved = series.shifted(g - ASSUMED_GESTATION);
    let scores = pace_scores(&moved, eig)?;
    let end = reconstruct(&scores.xi, eig, g - 1.0)?;
    let start = reconstruct(&scores.xi, eig, 0.0)?;
    Ok((end - start) / (g / 7.0))
}

/// Indices of observations outside the pointwise prediction band
/// `Ŵ(t) ± z √(φ(t)ᵀ Ω φ(t) + σ²)`.
///
/// The trajectory is refit without the most extreme point while that point
/// lies outside its band, so a single gross error cannot drag the fitted
/// curve away from the remaining observations. Flags are then taken against
/// the final fit.
pub fn flag_outliers(series: &LongitudinalSeries, eig: &EigenSystem, level: f64) -> Result<Vec<usize>, FpcaError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FpcaError::IllConditioned(format!("band level {level} must lie in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let g = eig.grid_spec();
    let idx: Vec<usize> = (0..series.len()).filter(|&j| g.contains(series.times[j])).collect();
    if idx.is_empty() {
        return Err(FpcaError::NoObservations { subject: series.subject.clone() });
    }
    let standardized = |kept: &[usize]| -> Result<Vec<(usize, f64)>, FpcaError> {
        let t: Vec<f64> = kept.iter().map(|&j| series.times[j]).collect();
        let v: Vec<f64> = kept.iter().map(|&j| series.values[j]).collect();
        let sc = scores_from(&series.subject, &t, &v, eig)?;
        idx.iter()
            .map(|&j| {
                let tj = series.times[j];
                let fitted = reconstruct(&sc.xi, eig, tj)?;
                let phi = DVector::from_iterator(eig.k(), (0..eig.k()).map(|k| eig.phi_at(k, tj)));
                let var = (phi.transpose() * &sc.omega * &phi)[(0, 0)].max(0.0) + eig.noise_var;
                let dev = (series.values[j] - fitted).abs();
                let r = if var > 0.0 { dev / var.sqrt() } else if dev > 1e-9 { f64::INFINITY } else { 0.0 };
                Ok((j, r))
            })
            .collect()
    };
    let mut kept = idx.clone();
    loop {
        let r = standardized(&kept)?;
        let worst = r
            .iter()
            .filter(|(j, _)| kept.contains(j))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .copied();
        match worst {
            Some((j, rj)) if rj > z && kept.len() > 1 => kept.retain(|&x| x != j),
            _ => return Ok(r.into_iter().filter(|(_, rj)| *rj > z).map(|(j, _)| j).collect()),
        }
    }
}
