//! Weighted Cox partial likelihood, Breslow ties.

use nalgebra::{DMatrix, DVector};

use super::{assemble, check_inputs, newton, Evaluation, FitResult, ModelError};

/// Precomputed ordering of a Cox dataset.
pub struct CoxProblem<'a> {
    time: &'a [f64],
    event: &'a [bool],
    x: &'a DMatrix<f64>,
    w: &'a [f64],
    /// Row indices grouped by distinct time, latest time first.
    groups: Vec<Vec<usize>>,
}

impl<'a> CoxProblem<'a> {
    pub fn new(time: &'a [f64], event: &'a [bool], x: &'a DMatrix<f64>, w: &'a [f64]) -> Result<Self, ModelError> {
        if time.len() != event.len() {
            return Err(ModelError::Invalid("time and event lengths differ".into()));
        }
        check_inputs(x, w, time.len())?;
        if time.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Invalid("non-finite time".into()));
        }
        if !event.iter().any(|&d| d) {
            return Err(ModelError::NoEvents);
        }
        let mut order: Vec<usize> = (0..time.len()).collect();
        order.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some(g) if time[g[0]] == time[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        Ok(CoxProblem { time, event, x, w, groups })
    }

    fn linear_predictor(&self, beta: &DVector<f64>) -> (Vec<f64>, f64) {
        let eta: Vec<f64> = (self.x * beta).iter().copied().collect();
        let c = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        (eta, c)
    }

    /// Weighted log partial likelihood with score and information.
    pub fn evaluate(&self, beta: &DVector<f64>) -> Evaluation {
        let p = self.x.ncols();
        let (eta, c) = self.linear_predictor(beta);
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        let mut ll = 0.0;
        let mut score = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        for g in &self.groups {
            for &i in g {
                let r = self.w[i] * (eta[i] - c).exp();
                let xi = self.x.row(i);
                s0 += r;
                for a in 0..p {
                    let ra = r * xi[a];
                    s1[a] += ra;
                    for b in a..p {
                        s2[(a, b)] += ra * xi[b];
                    }
                }
            }
            let mut d = 0.0;
            for &i in g {
                if self.event[i] {
                    let wi = self.w[i];
                    d += wi;
                    ll += wi * eta[i];
                    for a in 0..p {
                        score[a] += wi * self.x[(i, a)];
                    }
                }
            }
            if d == 0.0 {
                continue;
            }
            ll -= d * (s0.ln() + c);
            for a in 0..p {
                let ma = s1[a] / s0;
                score[a] -= d * ma;
                for b in a..p {
                    info[(a, b)] += d * (s2[(a, b)] / s0 - ma * s1[b] / s0);
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

    /// Per-record score residuals `U_i` (`n × p`); `Σ_i w_i U_i` is the score.
    pub fn score_residuals(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.time.len();
        let p = self.x.ncols();
        let (eta, c) = self.linear_predictor(beta);

        // Risk-set means at each distinct time, descending pass.
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut at_group: Vec<(f64, f64, DVector<f64>)> = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            for &i in g {
                let r = self.w[i] * (eta[i] - c).exp();
                s0 += r;
                for a in 0..p {
                    s1[a] += r * self.x[(i, a)];
                }
            }
            let d: f64 = g.iter().filter(|&&i| self.event[i]).map(|&i| self.w[i]).sum();
            at_group.push((d, s0, &s1 / s0));
        }

        // Ascending pass: cumulative hazard increments A(t) and B(t).
        let mut u = DMatrix::<f64>::zeros(n, p);
        let mut a_cum = 0.0;
        let mut b_cum = DVector::<f64>::zeros(p);
        for (g, (d, s0, xbar)) in self.groups.iter().zip(&at_group).rev() {
            if *d > 0.0 {
                a_cum += d / s0;
                b_cum += xbar * (d / s0);
            }
            for &i in g {
                let e = (eta[i] - c).exp();
                for k in 0..p {
                    let xik = self.x[(i, k)];
                    let mut v = -e * (xik * a_cum - b_cum[k]);
                    if self.event[i] {
                        v += xik - xbar[k];
                    }
                    u[(i, k)] = v;
                }
            }
        }
        u
    }
}

/// Weighted Cox fit by Newton's method.
pub fn fit_cox(time: &[f64], event: &[bool], x: &DMatrix<f64>, w: &[f64]) -> Result<FitResult, ModelError> {
    let problem = CoxProblem::new(time, event, x, w)?;
    let out = newton(x.ncols(), w, |b| problem.evaluate(b))?;
    let residuals = problem.score_residuals(&out.beta);
    assemble(out, residuals, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64, beta: f64) -> (Vec<f64>, Vec<bool>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut time = Vec::new();
        let mut event = Vec::new();
        let mut x = DMatrix::zeros(n, 1);
        for i in 0..n {
            let xi: f64 = rng.random_range(-1.0..1.0);
            x[(i, 0)] = xi;
            let t = -rng.random::<f64>().ln() / (beta * xi).exp();
            let cens = rng.random_range(0.0..2.0);
            // Round to create ties.
            time.push((t.min(cens) * 20.0).ceil() / 20.0);
            event.push(t <= cens);
        }
        (time, event, x)
    }

    #[test]
    fn score_residuals_sum_to_score() {
        let (t, d, x) = toy(60, 3, 0.8);
        let w: Vec<f64> = (0..60).map(|i| 1.0 + (i % 3) as f64).collect();
        let prob = CoxProblem::new(&t, &d, &x, &w).unwrap();
        let beta = DVector::from_vec(vec![0.4]);
        let e = prob.evaluate(&beta);
        let u = prob.score_residuals(&beta);
        let s: f64 = (0..60).map(|i| w[i] * u[(i, 0)]).sum();
        assert!((s - e.score[0]).abs() < 1e-10);
    }

    #[test]
    fn influence_sums_to_zero_unweighted() {
        let (t, d, x) = toy(200, 5, 0.5);
        let fit = fit_cox(&t, &d, &x, &vec![1.0; 200]).unwrap();
        let h = fit.influence.column(0);
        let total: f64 = h.iter().sum();
        let abs: f64 = h.iter().map(|v| v.abs()).sum();
        assert!(total.abs() < 1e-8 * abs);
    }

    #[test]
    fn no_events_is_an_error() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(fit_cox(&[1.0, 2.0, 3.0], &[false; 3], &x, &[1.0; 3]), Err(ModelError::NoEvents)));
    }

    #[test]
    fn monotone_likelihood_is_reported() {
        // Every event has the largest covariate in its risk set.
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let d = [true, true, true, false, false, false];
        let x = DMatrix::from_column_slice(6, 1, &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let err = fit_cox(&t, &d, &x, &[1.0; 6]).unwrap_err();
        assert!(err.last_coefficients().is_some(), "{err:?}");
    }

    #[test]
    fn integer_weights_equal_replication() {
        let (t, d, x) = toy(40, 11, 0.7);
        let w: Vec<f64> = (0..40).map(|i| (1 + i % 3) as f64).collect();
        let fit_w = fit_cox(&t, &d, &x, &w).unwrap();
        let mut idx = Vec::new();
        for (i, &wi) in w.iter().enumerate() {
            for _ in 0..wi as usize {
                idx.push(i);
            }
        }
        let tr: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        let dr: Vec<bool> = idx.iter().map(|&i| d[i]).collect();
        let xr = x.select_rows(&idx);
        let fit_r = fit_cox(&tr, &dr, &xr, &vec![1.0; idx.len()]).unwrap();
        assert!((fit_w.coefficients[0] - fit_r.coefficients[0]).abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn doubling_weights_leaves_fit_unchanged(seed in 0u64..1000) {
            let (t, d, x) = toy(50, seed, 0.6);
            prop_assume!(d.iter().filter(|&&e| e).count() >= 3);
            let a = fit_cox(&t, &d, &x, &vec![1.0; 50]);
            let b = fit_cox(&t, &d, &x, &vec![2.0; 50]);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.coefficients[0] - b.coefficients[0]).abs() < 1e-8);
                prop_assert!((a.se(0) - b.se(0)).abs() < 1e-8 * a.se(0).max(1.0));
            }
        }
    }
}
