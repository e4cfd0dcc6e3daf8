//! Exhaustive search over integer allocations.

use crate::allocation::{AllocationError, StratumStats};

pub const MAX_STRATA: usize = 5;
pub const MAX_TOTAL: usize = 30;

/// Allocations within this relative distance of the optimum count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// Every allocation attaining the optimum, in lexicographic order.
    pub minimizers: Vec<Vec<usize>>,
}

impl OracleResult {
    pub fn contains(&self, alloc: &[usize]) -> bool {
        self.minimizers.iter().any(|m| m == alloc)
    }
}

fn objective(stats: &[StratumStats], alloc: &[usize]) -> f64 {
    stats
        .iter()
        .zip(alloc)
        .map(|(s, &n)| {
            let w = s.population as f64 * s.sigma;
            if w == 0.0 {
                0.0
            } else if n == 0 {
                f64::INFINITY
            } else {
                w * w / n as f64
            }
        })
        .sum()
}

/// Enumerates every allocation with `min(min_per_stratum, N_s) ≤ n_s ≤ N_s`
/// and `Σ n_s = n`, and returns the minimizers of `Σ N_s²σ_s²/n_s`.
pub fn oracle_allocation(stats: &[StratumStats], n: usize, min_per_stratum: usize) -> Result<OracleResult, AllocationError> {
    if stats.is_empty() || stats.len() > MAX_STRATA || n > MAX_TOTAL {
        return Err(AllocationError::Invalid(format!(
            "oracle handles 1..={MAX_STRATA} strata and n <= {MAX_TOTAL}, got {} strata and n = {n}",
            stats.len()
        )));
    }
    let lo: Vec<usize> = stats.iter().map(|s| min_per_stratum.min(s.population)).collect();
    let hi: Vec<usize> = stats.iter().map(|s| s.population).collect();
    let mut all: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut cur = vec![0; stats.len()];
    fn walk(k: usize, left: usize, lo: &[usize], hi: &[usize], cur: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
        if k == cur.len() {
            if left == 0 {
                out(cur);
            }
            return;
        }
        let rest_lo: usize = lo[k + 1..].iter().sum();
        for v in lo[k]..=hi[k].min(left) {
            if left - v < rest_lo {
                break;
            }
            cur[k] = v;
            walk(k + 1, left - v, lo, hi, cur, out);
        }
    }
    walk(0, n, &lo, &hi, &mut cur, &mut |a| all.push((objective(stats, a), a.to_vec())));
    let best = all.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
    if all.is_empty() || !best.is_finite() {
        return Err(AllocationError::Infeasible(format!("no allocation of {n} with the given bounds")));
    }
    let minimizers =
        all.into_iter().filter(|(v, _)| *v <= best + TIE_TOLERANCE * best.abs()).map(|(_, a)| a).collect();
    Ok(OracleResult { value: best, minimizers })
}
