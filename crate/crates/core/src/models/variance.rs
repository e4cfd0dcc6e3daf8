//! Stratified with-replacement linearization variance.

use std::collections::BTreeMap;
use std::hash::Hash;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub matrix: DMatrix<f64>,
    /// Set when a singleton stratum forced the unstratified formula.
    pub pooled_fallback: bool,
}

/// Design-based variance from weighted influence rows `h_i` (`n × p`).
///
/// With `clusters`, rows sharing a cluster label are summed first and the
/// cluster takes the stratum of its first row. Each stratum contributes
/// `n_s/(n_s−1) Σ (h − h̄_s)(h − h̄_s)ᵀ`. `fpc`, when given, holds a sampling
/// fraction per stratum label and multiplies that stratum's term by
/// `1 − f_s`.
pub fn sandwich_variance<S, C>(
    influence: &DMatrix<f64>,
    strata: &[S],
    clusters: Option<&[C]>,
    fpc: Option<&BTreeMap<S, f64>>,
) -> VarianceEstimate
where
    S: Ord + Clone + Hash,
    C: Ord + Clone,
{
    let (n, p) = influence.shape();
    assert_eq!(strata.len(), n, "one stratum label per row");

    // Aggregate to sampling units, keeping first-seen order.
    let mut units: Vec<(S, DVector<f64>)> = Vec::new();
    match clusters {
        Some(c) => {
            assert_eq!(c.len(), n, "one cluster label per row");
            let mut index: BTreeMap<C, usize> = BTreeMap::new();
            for i in 0..n {
                let row = influence.row(i).transpose();
                match index.get(&c[i]) {
                    Some(&u) => units[u].1 += row,
                    None => {
                        index.insert(c[i].clone(), units.len());
                        units.push((strata[i].clone(), row));
                    }
                }
            }
        }
        None => {
            for i in 0..n {
                units.push((strata[i].clone(), influence.row(i).transpose()));
            }
        }
    }

    let mut groups: BTreeMap<S, Vec<usize>> = BTreeMap::new();
    for (u, (s, _)) in units.iter().enumerate() {
        groups.entry(s.clone()).or_default().push(u);
    }
    let singleton = groups.values().any(|g| g.len() < 2);
    let mut v = DMatrix::zeros(p, p);
    if singleton {
        warn!("stratum with a single sampling unit; using the unstratified variance");
        let all: Vec<usize> = (0..units.len()).collect();
        accumulate(&mut v, &units, &all, 1.0);
    } else {
        for (s, g) in &groups {
            let f = fpc.and_then(|m| m.get(s)).copied().unwrap_or(0.0);
            accumulate(&mut v, &units, g, 1.0 - f);
        }
    }
    VarianceEstimate { matrix: symmetrize(&v), pooled_fallback: singleton }
}

fn accumulate<S>(v: &mut DMatrix<f64>, units: &[(S, DVector<f64>)], members: &[usize], factor: f64) {
    let m = members.len();
    if m < 2 {
        return;
    }
    let p = v.nrows();
    let mut mean = DVector::zeros(p);
    for &u in members {
        mean += &units[u].1;
    }
    mean /= m as f64;
    let scale = factor * m as f64 / (m as f64 - 1.0);
    for &u in members {
        let d = &units[u].1 - &mean;
        v.ger(scale, &d, &d, 1.0);
    }
}
