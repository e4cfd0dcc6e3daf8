//! Neyman, multi-wave and exact integer allocation, and the per-wave draw.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Assignment, DesignLedger, DyadRecord, LedgerError};
use crate::rng;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("degenerate design: every stratum has zero standard deviation")]
    Degenerate,
    #[error("infeasible allocation: {0}")]
    Infeasible(String),
    #[error("invalid allocation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl AllocationError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, AllocationError::Degenerate | AllocationError::Infeasible(_))
    }
}

/// How a stratum's SD was obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "from", rename_all = "snake_case")]
pub enum SdSource {
    Own,
    Borrowed(String),
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub id: String,
    pub population: usize,
    pub sigma: f64,
    pub already_sampled: usize,
    pub closed: bool,
    pub source: SdSource,
}

impl StratumStats {
    pub fn new(id: impl Into<String>, population: usize, sigma: f64, already_sampled: usize) -> Self {
        StratumStats { id: id.into(), population, sigma, already_sampled, closed: false, source: SdSource::Own }
    }

    fn weight(&self) -> f64 {
        self.population as f64 * self.sigma
    }

    fn remaining(&self) -> usize {
        self.population - self.already_sampled
    }
}

fn validate(stats: &[StratumStats]) -> Result<(), AllocationError> {
    if stats.is_empty() {
        return Err(AllocationError::Invalid("no strata".into()));
    }
    for s in stats {
        if !(s.sigma >= 0.0) || !s.sigma.is_finite() {
            return Err(AllocationError::Invalid(format!("stratum {} has sigma {}", s.id, s.sigma)));
        }
        if s.already_sampled > s.population {
            return Err(AllocationError::Invalid(format!(
                "stratum {} has {} sampled of {}",
                s.id, s.already_sampled, s.population
            )));
        }
    }
    Ok(())
}

/// Fractional Neyman allocation of `n` units: `n N_s σ_s / Σ N σ`.
pub fn neyman(stats: &[StratumStats], n: f64) -> Result<Vec<f64>, AllocationError> {
    validate(stats)?;
    let total: f64 = stats.iter().map(StratumStats::weight).sum();
    if total <= 0.0 {
        return Err(AllocationError::Degenerate);
    }
    Ok(stats.iter().map(|s| n * s.weight() / total).collect())
}

/// Fractional allocation proportional to `N_s`; the fallback when no SD
/// information exists.
pub fn proportional(stats: &[StratumStats], n: f64) -> Result<Vec<f64>, AllocationError> {
    validate(stats)?;
    let total: f64 = stats.iter().map(|s| s.population as f64).sum();
    if total <= 0.0 {
        return Err(AllocationError::Invalid("empty population".into()));
    }
    Ok(stats.iter().map(|s| n * s.population as f64 / total).collect())
}

/// Greedy priority `N σ / sqrt(m (m + 1))`; an empty stratum with `N σ > 0`
/// always goes first.
fn priority(weight: f64, m: usize) -> f64 {
    if weight == 0.0 {
        0.0
    } else if m == 0 {
        f64::INFINITY
    } else {
        let m = m as f64;
        weight / (m * (m + 1.0)).sqrt()
    }
}

/// Hands out `units` one at a time on top of `start`, never exceeding `cap`.
/// Only strata with `eligible[s]` take part.
fn greedy(weights: &[f64], start: &[usize], cap: &[usize], eligible: &[bool], units: usize) -> Option<Vec<usize>> {
    let mut m = start.to_vec();
    for _ in 0..units {
        let mut best: Option<usize> = None;
        for s in 0..weights.len() {
            if !eligible[s] || m[s] >= cap[s] {
                continue;
            }
            best = match best {
                None => Some(s),
                Some(b) => {
                    let (ps, pb) = (priority(weights[s], m[s]), priority(weights[b], m[b]));
                    if ps > pb || (ps == pb && weights[s] > weights[b]) {
                        Some(s)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        m[best?] += 1;
    }
    Some(m)
}

/// Integer allocation summing exactly to `n` that minimizes
/// `Σ N_s² σ_s² / n_s` subject to `min_per_stratum ≤ n_s ≤ N_s`.
pub fn exact_allocation(stats: &[StratumStats], n: usize, min_per_stratum: usize) -> Result<Vec<usize>, AllocationError> {
    validate(stats)?;
    let floor: Vec<usize> = stats.iter().map(|s| min_per_stratum.min(s.population)).collect();
    let base: usize = floor.iter().sum();
    let capacity: usize = stats.iter().map(|s| s.population).sum();
    if n < base || n > capacity {
        return Err(AllocationError::Infeasible(format!(
            "n={n} outside [{base}, {capacity}] for {} strata with minimum {min_per_stratum}",
            stats.len()
        )));
    }
    let weights: Vec<f64> = stats.iter().map(StratumStats::weight).collect();
    let cap: Vec<usize> = stats.iter().map(|s| s.population).collect();
    let eligible = vec![true; stats.len()];
    greedy(&weights, &floor, &cap, &eligible, n - base)
        .ok_or_else(|| AllocationError::Infeasible(format!("cannot place {n} units")))
}

/// `Σ N_s² σ_s² / n_s`, the variance objective the allocations minimize.
pub fn neyman_objective(stats: &[StratumStats], alloc: &[usize]) -> f64 {
    stats
        .iter()
        .zip(alloc)
        .map(|(s, &n)| {
            let w = s.weight();
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveAllocation {
    pub ids: Vec<String>,
    /// Integer draws for this wave.
    pub draws: Vec<usize>,
    /// Final fractional wave targets over the open strata (0 when closed).
    pub targets: Vec<f64>,
    pub closed: Vec<bool>,
    /// Strata closed by this call.
    pub newly_closed: Vec<String>,
    pub rounds: usize,
}

impl WaveAllocation {
    pub fn total(&self) -> usize {
        self.draws.iter().sum()
    }

    pub fn as_map(&self) -> BTreeMap<String, usize> {
        self.ids.iter().cloned().zip(self.draws.iter().copied()).collect()
    }
}

/// Multi-wave allocation for a cumulative target `Σ_{j≤k} n_(j)`.
///
/// Strata whose fractional wave target is not positive are closed and the
/// Neyman split is recomputed over the rest until every open stratum has a
/// positive target. The integer draws are then placed greedily on top of the
/// counts already sampled, which yields the integer cumulative allocation
/// closest to optimal given what has been drawn.
pub fn multiwave(stats: &[StratumStats], cumulative: usize) -> Result<WaveAllocation, AllocationError> {
    validate(stats)?;
    let already: usize = stats.iter().map(|s| s.already_sampled).sum();
    if cumulative < already {
        return Err(AllocationError::Invalid(format!(
            "cumulative target {cumulative} is below the {already} already sampled"
        )));
    }
    let budget = cumulative - already;
    let k = stats.len();
    let mut closed: Vec<bool> = stats.iter().map(|s| s.closed).collect();
    let mut targets = vec![0.0; k];
    let mut rounds = 0;
    loop {
        rounds += 1;
        let open_weight: f64 = (0..k).filter(|&s| !closed[s]).map(|s| stats[s].weight()).sum();
        let closed_taken: usize = (0..k).filter(|&s| closed[s]).map(|s| stats[s].already_sampled).sum();
        if (0..k).all(|s| closed[s]) {
            if budget == 0 {
                break;
            }
            return Err(AllocationError::Infeasible(format!("all strata closed with {budget} units left")));
        }
        if open_weight <= 0.0 {
            return Err(AllocationError::Degenerate);
        }
        let pool = cumulative as f64 - closed_taken as f64;
        let mut changed = false;
        for s in 0..k {
            if closed[s] {
                targets[s] = 0.0;
                continue;
            }
            targets[s] = pool * stats[s].weight() / open_weight - stats[s].already_sampled as f64;
            if targets[s] <= 0.0 {
                closed[s] = true;
                targets[s] = 0.0;
                changed = true;
            }
        }
        if !changed || rounds > k {
            break;
        }
    }

    let capacity: usize = (0..k).filter(|&s| !closed[s]).map(|s| stats[s].remaining()).sum();
    if capacity < budget {
        return Err(AllocationError::Infeasible(format!(
            "open strata hold {capacity} unsampled records but the wave needs {budget}"
        )));
    }
    let weights: Vec<f64> = stats.iter().map(StratumStats::weight).collect();
    let start: Vec<usize> = stats.iter().map(|s| s.already_sampled).collect();
    let cap: Vec<usize> = stats.iter().map(|s| s.population).collect();
    let eligible: Vec<bool> = closed.iter().map(|c| !c).collect();
    let cum = greedy(&weights, &start, &cap, &eligible, budget)
        .ok_or_else(|| AllocationError::Infeasible("greedy placement ran out of room".into()))?;
    let draws: Vec<usize> = cum.iter().zip(&start).map(|(c, a)| c - a).collect();
    let newly_closed = (0..k).filter(|&s| closed[s] && !stats[s].closed).map(|s| stats[s].id.clone()).collect();
    Ok(WaveAllocation { ids: stats.iter().map(|s| s.id.clone()).collect(), draws, targets, closed, newly_closed, rounds })
}

/// Naive per-stratum rounding of the Neyman targets, as done before exact
/// integerization was adopted. Kept for comparison.
pub fn rounded_neyman(stats: &[StratumStats], n: usize) -> Result<Vec<usize>, AllocationError> {
    Ok(neyman(stats, n as f64)?.into_iter().map(|v| v.round().max(1.0) as usize).collect())
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Per-leaf SDs of influence values for allocation.
///
/// `values` holds whatever records currently have an influence value (all of
/// phase 1 for the first wave, the validated set afterwards). A leaf with
/// fewer than two values borrows the SD of its nearest ancestor that has two;
/// if even the root has fewer, every leaf gets SD 1, i.e. proportional
/// allocation.
pub fn stratum_sd(
    ledger: &DesignLedger,
    assignment: &Assignment,
    values: &BTreeMap<String, f64>,
) -> Result<Vec<StratumStats>, AllocationError> {
    let mut by_stratum: HashMap<String, Vec<f64>> = HashMap::new();
    let mut chains: HashMap<String, Vec<String>> = HashMap::new();
    for leaf in ledger.leaf_ids() {
        let mut chain = vec![leaf.clone()];
        chain.extend(ledger.ancestors(&leaf)?);
        chains.insert(leaf, chain);
    }
    for (id, &h) in values {
        if !h.is_finite() {
            return Err(AllocationError::Invalid(format!("influence for {id} is not finite")));
        }
        let Some(leaf) = assignment.get(id) else { continue };
        let chain = chains
            .get(leaf)
            .ok_or_else(|| AllocationError::Invalid(format!("record {id} assigned to non-leaf {leaf}")))?;
        for s in chain {
            by_stratum.entry(s.clone()).or_default().push(h);
        }
    }
    let sd_of = |s: &str| by_stratum.get(s).filter(|v| v.len() >= 2).map(|v| sample_sd(v));

    let mut out = Vec::new();
    let mut any_proportional = false;
    for leaf in ledger.leaves() {
        let chain = &chains[&leaf.id];
        let found = chain.iter().find_map(|s| sd_of(s).map(|sd| (s.clone(), sd)));
        let (sigma, source) = match found {
            Some((s, sd)) if s == leaf.id => (sd, SdSource::Own),
            Some((s, sd)) => (sd, SdSource::Borrowed(s)),
            None => {
                any_proportional = true;
                (1.0, SdSource::Proportional)
            }
        };
        out.push(StratumStats {
            id: leaf.id.clone(),
            population: leaf.population,
            sigma,
            already_sampled: leaf.total_sampled(),
            closed: leaf.closed,
            source,
        });
    }
    if any_proportional {
        for s in &mut out {
            s.sigma = 1.0;
            s.source = SdSource::Proportional;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Draw {
    pub wave: u32,
    pub by_stratum: BTreeMap<String, Vec<String>>,
    /// Drawn records that were already validated through another frame.
    pub overlap: Vec<String>,
}

impl Draw {
    pub fn total(&self) -> usize {
        self.by_stratum.values().map(Vec::len).sum()
    }
}

/// Simple random sampling without replacement inside each leaf.
///
/// Candidates are the leaf's frame members not yet drawn in this frame, in id
/// order; the stream for a leaf depends only on `(seed, wave, leaf id)`.
pub fn draw_sample(
    ledger: &DesignLedger,
    records: &[DyadRecord],
    allocation: &BTreeMap<String, usize>,
    wave: u32,
    seed: u64,
) -> Result<Draw, AllocationError> {
    let assignment = ledger.assign_strata(records)?;
    let mut candidates: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, leaf) in &assignment {
        if !ledger.is_sampled(id) {
            candidates.entry(leaf.as_str()).or_default().push(id.as_str());
        }
    }
    let validated: HashMap<&str, bool> = records.iter().map(|r| (r.id.as_str(), r.validated)).collect();
    let mut draw = Draw { wave, ..Default::default() };
    for (leaf, &n) in allocation {
        let stratum = ledger.stratum(leaf)?;
        if !stratum.is_leaf() {
            return Err(LedgerError::NotALeaf(leaf.clone()).into());
        }
        if n == 0 {
            continue;
        }
        if stratum.closed {
            return Err(AllocationError::Infeasible(format!("stratum {leaf} is closed but allocated {n}")));
        }
        let pool = candidates.get(leaf.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if n > pool.len() {
            return Err(AllocationError::Infeasible(format!(
                "stratum {leaf} allocated {n} but only {} undrawn records remain",
                pool.len()
            )));
        }
        let mut rng = rng::stream(seed, &[wave as u64, rng::label(leaf)]);
        let mut picked: Vec<String> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i].to_string()).collect();
        picked.sort();
        for id in &picked {
            if validated.get(id.as_str()).copied().unwrap_or(false) {
                draw.overlap.push(id.clone());
            }
        }
        draw.by_stratum.insert(leaf.clone(), picked);
    }
    draw.overlap.sort();
    Ok(draw)
}

/// Draws a wave and records it in the ledger.
pub fn draw_wave(
    ledger: &mut DesignLedger,
    records: &[DyadRecord],
    allocation: &BTreeMap<String, usize>,
    wave: u32,
    seed: u64,
) -> Result<Draw, AllocationError> {
    let draw = draw_sample(ledger, records, allocation, wave, seed)?;
    let mut full: BTreeMap<String, Vec<String>> = ledger.leaf_ids().into_iter().map(|l| (l, Vec::new())).collect();
    full.extend(draw.by_stratum.clone());
    ledger.record_wave(wave, &full)?;
    Ok(draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Axis, Frame};
    use proptest::prelude::*;

    fn st(id: &str, n: usize, sigma: f64, already: usize) -> StratumStats {
        StratumStats::new(id, n, sigma, already)
    }

    #[test]
    fn neyman_symmetric_and_formula() {
        let a = neyman(&[st("a", 100, 1.0, 0), st("b", 100, 1.0, 0)], 50.0).unwrap();
        assert_eq!(a, vec![25.0, 25.0]);
        let s = [st("1", 190, 2.0, 0), st("2", 1904, 0.5, 0), st("3", 177, 1.5, 0)];
        let a = neyman(&s, 100.0).unwrap();
        let w = [380.0, 952.0, 265.5];
        let tot: f64 = w.iter().sum();
        for (x, wi) in a.iter().zip(w) {
            assert!((x - 100.0 * wi / tot).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_sigma_is_degenerate() {
        let s = [st("a", 10, 0.0, 0), st("b", 10, 0.0, 0)];
        assert!(matches!(neyman(&s, 5.0), Err(AllocationError::Degenerate)));
        assert_eq!(proportional(&s, 5.0).unwrap(), vec![2.5, 2.5]);
    }

    #[test]
    fn exact_small_cases() {
        let s = [st("a", 10, 1.0, 0), st("b", 10, 1.0, 0), st("c", 1, 1.0, 0)];
        assert_eq!(exact_allocation(&s, 5, 1).unwrap(), vec![2, 2, 1]);
        assert_eq!(exact_allocation(&[st("only", 40, 3.0, 0)], 17, 1).unwrap(), vec![17]);
        assert!(exact_allocation(&s, 2, 1).is_err());
    }

    #[test]
    fn multiwave_closes_oversampled() {
        // Optimum for the second stratum is 6 but 7 are already in.
        let s = [st("a", 1000, 1.0, 10), st("b", 60, 1.0, 7), st("c", 1000, 1.0, 10)];
        let w = multiwave(&s, 100).unwrap();
        assert!(w.closed[1]);
        assert_eq!(w.draws[1], 0);
        assert_eq!(w.total(), 100 - 27);
        assert_eq!(w.newly_closed, vec!["b".to_string()]);
    }

    #[test]
    fn multiwave_single_open_takes_all_capped() {
        let s = [st("a", 50, 1.0, 40), st("b", 30, 1.0, 5), st("c", 50, 1.0, 40)];
        let w = multiwave(&s, 100).unwrap();
        assert_eq!(w.draws, vec![0, 15, 0]);
        let full = [st("a", 10, 1.0, 9), st("b", 10, 1.0, 9)];
        assert!(multiwave(&full, 21).unwrap_err().is_infeasible());
    }

    fn toy_population() -> Vec<DyadRecord> {
        (0..60).map(|i| DyadRecord::phase1(format!("r{i:02}"), 1.0 + i as f64 / 10.0, i % 4 == 0, 0.3, vec![])).collect()
    }

    #[test]
    fn draw_is_deterministic_and_without_replacement() {
        let recs = toy_population();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 9);
        ledger.split_stratum(&recs, "O", Axis::Event, &[0.5]).unwrap();
        let alloc: BTreeMap<String, usize> = [("O.1".to_string(), 5), ("O.2".to_string(), 3)].into();
        let a = draw_sample(&ledger, &recs, &alloc, 1, 42).unwrap();
        let b = draw_sample(&ledger, &recs, &alloc, 1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total(), 8);
        draw_wave(&mut ledger, &recs, &alloc, 1, 42).unwrap();
        let c = draw_wave(&mut ledger, &recs, &alloc, 2, 42).unwrap();
        for ids in c.by_stratum.values() {
            for id in ids {
                assert!(!a.by_stratum.values().any(|v| v.contains(id)));
            }
        }
        let zero: BTreeMap<String, usize> = [("O.1".to_string(), 0)].into();
        assert_eq!(draw_sample(&ledger, &recs, &zero, 3, 1).unwrap().total(), 0);
        let too_many: BTreeMap<String, usize> = [("O.2".to_string(), 40)].into();
        assert!(draw_sample(&ledger, &recs, &too_many, 3, 1).unwrap_err().is_infeasible());
    }

    #[test]
    fn sd_two_point_constant_and_borrowing() {
        let recs = toy_population();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 9);
        ledger.split_stratum(&recs, "O", Axis::Event, &[0.5]).unwrap();
        let assign = ledger.assign_strata(&recs).unwrap();
        let mut values = BTreeMap::new();
        values.insert("r01".to_string(), 1.0);
        values.insert("r02".to_string(), 3.0);
        values.insert("r00".to_string(), 5.0);
        let stats = stratum_sd(&ledger, &assign, &values).unwrap();
        let o1 = stats.iter().find(|s| s.id == "O.1").unwrap();
        assert!((o1.sigma - 2f64.sqrt()).abs() < 1e-15);
        let o2 = stats.iter().find(|s| s.id == "O.2").unwrap();
        assert_eq!(o2.source, SdSource::Borrowed("O".into()));
        assert!((o2.sigma - 2.0).abs() < 1e-15);

        let constant: BTreeMap<String, f64> = [("r01".to_string(), 4.0), ("r02".to_string(), 4.0)].into();
        let stats = stratum_sd(&ledger, &assign, &constant).unwrap();
        assert_eq!(stats.iter().find(|s| s.id == "O.1").unwrap().sigma, 0.0);

        let stats = stratum_sd(&ledger, &assign, &BTreeMap::new()).unwrap();
        assert!(stats.iter().all(|s| s.source == SdSource::Proportional && s.sigma == 1.0));
    }

    fn stats_strategy() -> impl Strategy<Value = Vec<StratumStats>> {
        prop::collection::vec((20usize..2000, 0.01f64..10.0, 0usize..20), 1..7).prop_map(|v| {
            v.into_iter().enumerate().map(|(i, (n, s, a))| st(&format!("s{i}"), n, s, a)).collect()
        })
    }

    proptest! {
        #[test]
        fn neyman_scale_invariant(stats in stats_strategy(), c in 0.001f64..1000.0, n in 1.0f64..500.0) {
            let scaled: Vec<_> = stats.iter().cloned().map(|mut s| { s.sigma *= c; s }).collect();
            let a = neyman(&stats, n).unwrap();
            let b = neyman(&scaled, n).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * n);
            }
        }

        #[test]
        fn multiwave_budget_identity(stats in stats_strategy(), extra in 0usize..150) {
            let already: usize = stats.iter().map(|s| s.already_sampled).sum();
            let capacity: usize = stats.iter().map(|s| s.population - s.already_sampled).sum();
            let extra = extra.min(capacity);
            let w = match multiwave(&stats, already + extra) {
                Ok(w) => w,
                Err(e) => { prop_assert!(e.is_infeasible()); return Ok(()); }
            };
            prop_assert_eq!(w.total(), extra);
            prop_assert!(w.rounds <= stats.len() + 1);
            for (i, s) in stats.iter().enumerate() {
                prop_assert!(s.already_sampled + w.draws[i] <= s.population);
                if w.closed[i] { prop_assert_eq!(w.draws[i], 0); }
            }
        }

        #[test]
        fn multiwave_exact_scale_invariance(stats in stats_strategy(), extra in 1usize..100) {
            let already: usize = stats.iter().map(|s| s.already_sampled).sum();
            let capacity: usize = stats.iter().map(|s| s.population - s.already_sampled).sum();
            let extra = extra.min(capacity);
            let scaled: Vec<_> = stats.iter().cloned().map(|mut s| { s.sigma *= 4.0; s }).collect();
            match (multiwave(&stats, already + extra), multiwave(&scaled, already + extra)) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.draws, b.draws);
                    prop_assert_eq!(a.closed, b.closed);
                }
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "scaling changed feasibility: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
    }
}
