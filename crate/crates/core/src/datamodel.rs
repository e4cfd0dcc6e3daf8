//! Records, strata and the per-frame design ledger.
//!
//! A [`DesignLedger`] owns a tree of strata for one sampling frame. Strata are
//! only ever split, never merged, so the leaves always partition the frame and
//! every draw can be attributed to exactly one final stratum. The ledger also
//! keeps the list of records drawn in the frame (with the wave they were drawn
//! in); per-stratum wave counts are derived from that list by rescanning, which
//! is how draws made before a split are attributed to the split's children.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Phase-1 exposure is gain over an assumed 273-day pregnancy, so total gain in
/// kg is `x_star * 273 / 7`.
pub const ASSUMED_GESTATION_WEEKS: f64 = 273.0 / 7.0;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("record {record} matches {} leaf strata ({strata:?}); leaves must partition the frame", strata.len())]
    PartitionViolation { record: String, strata: Vec<String> },
    #[error("ledger inconsistency: {0}")]
    Inconsistent(String),
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
    #[error("stratum `{0}` is not a leaf")]
    NotALeaf(String),
    #[error("invalid split of `{stratum}`: {reason}")]
    InvalidSplit { stratum: String, reason: String },
    #[error("invalid record {record}: {reason}")]
    InvalidRecord { record: String, reason: String },
}

/// One mother–child unit: error-prone phase-1 fields plus, once validated, the
/// chart-reviewed phase-2 counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadRecord {
    pub id: String,
    /// Censored failure time (years of age).
    pub y_star: f64,
    pub delta_star: bool,
    /// Weekly weight gain (kg/week) from the phase-1 trajectory fit.
    pub x_star: f64,
    pub z_star: Vec<f64>,
    pub aux: Vec<f64>,
    pub in_asthma_frame: bool,
    /// Phase-1 asthma indicator; only defined inside the asthma frame.
    pub asthma_star: Option<bool>,
    pub validated: bool,
    pub wave_sampled: Option<u32>,
    pub y: Option<f64>,
    pub delta: Option<bool>,
    pub x: Option<f64>,
    pub z: Option<Vec<f64>>,
    pub asthma: Option<bool>,
    pub gestation_days: Option<f64>,
}

/// Chart-reviewed values written into a record when it is validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase2Values {
    pub y: f64,
    pub delta: bool,
    pub x: f64,
    pub z: Vec<f64>,
    pub asthma: Option<bool>,
    pub gestation_days: f64,
}

impl DyadRecord {
    /// A phase-1-only record.
    pub fn phase1(id: impl Into<String>, y_star: f64, delta_star: bool, x_star: f64, z_star: Vec<f64>) -> Self {
        DyadRecord {
            id: id.into(),
            y_star,
            delta_star,
            x_star,
            z_star,
            aux: Vec::new(),
            in_asthma_frame: false,
            asthma_star: None,
            validated: false,
            wave_sampled: None,
            y: None,
            delta: None,
            x: None,
            z: None,
            asthma: None,
            gestation_days: None,
        }
    }

    /// Records the validated values. A record validated once keeps its first
    /// wave; re-validation is a no-op.
    pub fn mark_validated(&mut self, wave: u32, values: &Phase2Values) {
        if self.validated {
            return;
        }
        self.validated = true;
        self.wave_sampled = Some(wave);
        self.y = Some(values.y);
        self.delta = Some(values.delta);
        self.x = Some(values.x);
        self.z = Some(values.z.clone());
        self.asthma = if self.in_asthma_frame { values.asthma } else { None };
        self.gestation_days = Some(values.gestation_days);
    }

    pub fn check(&self) -> Result<(), LedgerError> {
        let bad = |reason: &str| {
            Err(LedgerError::InvalidRecord { record: self.id.clone(), reason: reason.to_string() })
        };
        if !(self.y_star > 0.0) || !self.y_star.is_finite() {
            return bad("y_star must be positive");
        }
        if !self.x_star.is_finite() || self.z_star.iter().any(|v| !v.is_finite()) {
            return bad("phase-1 values must be finite");
        }
        let phase2 = [self.y.is_some(), self.delta.is_some(), self.x.is_some(), self.z.is_some()];
        let all = phase2.iter().all(|&p| p);
        let none = phase2.iter().all(|&p| !p);
        if self.validated {
            if !all || self.wave_sampled.is_none() {
                return bad("validated record must carry all phase-2 fields and a wave");
            }
            if let Some(y) = self.y {
                if !(y > 0.0) {
                    return bad("y must be positive");
                }
            }
            if self.z.as_ref().map(|z| z.len()) != Some(self.z_star.len()) {
                return bad("z and z_star differ in length");
            }
        } else if !none || self.wave_sampled.is_some() {
            return bad("unvalidated record carries phase-2 fields");
        }
        if !self.in_asthma_frame && (self.asthma_star.is_some() || self.asthma.is_some()) {
            return bad("asthma fields outside the asthma frame");
        }
        Ok(())
    }

    /// Phase-1 value of a stratification axis.
    pub fn axis_value(&self, axis: Axis) -> Option<f64> {
        match axis {
            Axis::Event => Some(if self.delta_star { 1.0 } else { 0.0 }),
            Axis::FollowUp => Some(self.y_star),
            Axis::Exposure => Some(self.x_star),
            Axis::TotalGain => Some(self.x_star * ASSUMED_GESTATION_WEEKS),
            Axis::Asthma => self.asthma_star.map(|a| if a { 1.0 } else { 0.0 }),
        }
    }
}

/// Sampling frames. Every record belongs to the obesity frame; the asthma
/// frame is the subset flagged `in_asthma_frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Obesity,
    Asthma,
}

impl Frame {
    pub fn contains(self, record: &DyadRecord) -> bool {
        match self {
            Frame::Obesity => true,
            Frame::Asthma => record.in_asthma_frame,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Frame::Obesity => "O",
            Frame::Asthma => "A",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frame::Obesity => "obesity",
            Frame::Asthma => "asthma",
        })
    }
}

impl std::str::FromStr for Frame {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "obesity" | "O" => Ok(Frame::Obesity),
            "asthma" | "A" => Ok(Frame::Asthma),
            other => Err(format!("unknown frame `{other}`")),
        }
    }
}

/// Phase-1 variables strata may be cut on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// `delta_star` as 0/1.
    Event,
    /// `y_star` in years.
    FollowUp,
    /// `x_star` in kg/week.
    Exposure,
    /// `x_star` rescaled to kg over the assumed 39-week pregnancy.
    TotalGain,
    /// `asthma_star` as 0/1.
    Asthma,
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "event" => Ok(Axis::Event),
            "follow_up" | "followup" => Ok(Axis::FollowUp),
            "exposure" => Ok(Axis::Exposure),
            "total_gain" | "gain" => Ok(Axis::TotalGain),
            "asthma" => Ok(Axis::Asthma),
            other => Err(format!("unknown axis `{other}`")),
        }
    }
}

/// Half-open interval `(lo, hi]`; a missing end is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Interval {
    pub fn new(lo: Option<f64>, hi: Option<f64>) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v > lo) && self.hi.is_none_or(|hi| v <= hi)
    }

    fn strictly_inside(&self, v: f64) -> bool {
        v.is_finite() && self.lo.is_none_or(|lo| v > lo) && self.hi.is_none_or(|hi| v < hi)
    }
}

/// Conjunction of per-axis intervals. Axes not listed are unbounded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Bounds(pub BTreeMap<Axis, Interval>);

impl Bounds {
    pub fn contains(&self, record: &DyadRecord) -> bool {
        self.0.iter().all(|(&axis, iv)| record.axis_value(axis).is_some_and(|v| iv.contains(v)))
    }

    pub fn interval(&self, axis: Axis) -> Interval {
        self.0.get(&axis).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub frame: Frame,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub bounds: Bounds,
    /// `N_s`: frame members inside the bounds.
    pub population: usize,
    /// `n_(k),s`, aligned with [`DesignLedger::waves`]. Frozen on a stratum
    /// once it is split.
    pub sampled_per_wave: Vec<usize>,
    pub closed: bool,
    /// Free-form markers such as allocation fallbacks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl Stratum {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn total_sampled(&self) -> usize {
        self.sampled_per_wave.iter().sum()
    }
}

/// Strata tree, wave history and draw list for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLedger {
    pub frame: Frame,
    pub rng_seed: u64,
    pub wave_count: u32,
    /// Global wave labels in draw order (e.g. `[5, 6]` for the asthma frame).
    pub waves: Vec<u32>,
    /// Strata in tree (depth-first) order; the root comes first.
    pub strata: Vec<Stratum>,
    /// Record id → global wave in which it was drawn in this frame.
    pub samples: BTreeMap<String, u32>,
}

/// Where a record falls in a ledger.
pub type Assignment = BTreeMap<String, String>;

impl DesignLedger {
    /// A ledger with a single root stratum covering the whole frame.
    pub fn new(frame: Frame, records: &[DyadRecord], rng_seed: u64) -> Self {
        let population = records.iter().filter(|r| frame.contains(r)).count();
        let root = Stratum {
            id: frame.tag().to_string(),
            frame,
            parent: None,
            children: Vec::new(),
            bounds: Bounds::default(),
            population,
            sampled_per_wave: Vec::new(),
            closed: false,
            flags: Vec::new(),
        };
        DesignLedger { frame, rng_seed, wave_count: 0, waves: Vec::new(), strata: vec![root], samples: BTreeMap::new() }
    }

    pub fn root_id(&self) -> &str {
        &self.strata[0].id
    }

    pub fn frame_size(&self) -> usize {
        self.strata[0].population
    }

    pub fn stratum(&self, id: &str) -> Result<&Stratum, LedgerError> {
        self.strata.iter().find(|s| s.id == id).ok_or_else(|| LedgerError::UnknownStratum(id.to_string()))
    }

    fn stratum_index(&self, id: &str) -> Result<usize, LedgerError> {
        self.strata.iter().position(|s| s.id == id).ok_or_else(|| LedgerError::UnknownStratum(id.to_string()))
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Stratum> {
        self.strata.iter().filter(|s| s.is_leaf())
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.leaves().map(|s| s.id.clone()).collect()
    }

    /// Ancestors of a stratum, nearest first.
    pub fn ancestors(&self, id: &str) -> Result<Vec<String>, LedgerError> {
        let mut out = Vec::new();
        let mut cur = self.stratum(id)?.parent.clone();
        while let Some(p) = cur {
            cur = self.stratum(&p)?.parent.clone();
            out.push(p);
        }
        Ok(out)
    }

    pub fn is_sampled(&self, record_id: &str) -> bool {
        self.samples.contains_key(record_id)
    }

    /// The unique leaf containing `record`.
    pub fn leaf_of(&self, record: &DyadRecord) -> Result<&Stratum, LedgerError> {
        let mut hits = self.leaves().filter(|s| s.bounds.contains(record));
        match (hits.next(), hits.next()) {
            (Some(s), None) => Ok(s),
            (first, second) => {
                let mut strata: Vec<String> = first.into_iter().chain(second).map(|s| s.id.clone()).collect();
                strata.extend(self.leaves().filter(|s| s.bounds.contains(record)).skip(2).map(|s| s.id.clone()));
                Err(LedgerError::PartitionViolation { record: record.id.clone(), strata })
            }
        }
    }

    /// Maps every frame member to its leaf and checks the leaf counts
    /// against the stored `N_s`.
    pub fn assign_strata(&self, records: &[DyadRecord]) -> Result<Assignment, LedgerError> {
        let mut out = BTreeMap::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records.iter().filter(|r| self.frame.contains(r)) {
            let leaf = self.leaf_of(r)?;
            *counts.entry(leaf.id.as_str()).or_default() += 1;
            out.insert(r.id.clone(), leaf.id.clone());
        }
        for leaf in self.leaves() {
            let seen = counts.get(leaf.id.as_str()).copied().unwrap_or(0);
            if seen != leaf.population {
                return Err(LedgerError::Inconsistent(format!(
                    "stratum {} stores N_s={} but {} frame members fall inside it",
                    leaf.id, leaf.population, seen
                )));
            }
        }
        Ok(out)
    }

    /// `n_s / N_s` of the final leaf holding `record`.
    pub fn sampling_probability(&self, record: &DyadRecord) -> Result<f64, LedgerError> {
        if !self.frame.contains(record) {
            return Err(LedgerError::Inconsistent(format!("record {} is not in the {} frame", record.id, self.frame)));
        }
        let leaf = self.leaf_of(record)?;
        probability_of(leaf)
    }

    /// `n_s / N_s` for every frame member, in one pass.
    pub fn probabilities(&self, records: &[DyadRecord]) -> Result<BTreeMap<String, f64>, LedgerError> {
        let leaf_pi: HashMap<&str, Result<f64, String>> = self
            .leaves()
            .map(|s| (s.id.as_str(), probability_of(s).map_err(|e| e.to_string())))
            .collect();
        let mut out = BTreeMap::new();
        for r in records.iter().filter(|r| self.frame.contains(r)) {
            let leaf = self.leaf_of(r)?;
            let pi = leaf_pi[leaf.id.as_str()].clone().map_err(LedgerError::Inconsistent)?;
            out.insert(r.id.clone(), pi);
        }
        Ok(out)
    }

    /// Splits leaf `stratum_id` along `axis` at the given interior cut points.
    pub fn split_stratum(
        &mut self,
        records: &[DyadRecord],
        stratum_id: &str,
        axis: Axis,
        cuts: &[f64],
    ) -> Result<Vec<String>, LedgerError> {
        let idx = self.stratum_index(stratum_id)?;
        let parent = &self.strata[idx];
        let invalid = |reason: String| LedgerError::InvalidSplit { stratum: stratum_id.to_string(), reason };
        if !parent.is_leaf() {
            return Err(LedgerError::NotALeaf(stratum_id.to_string()));
        }
        if cuts.is_empty() {
            return Err(invalid("at least one cut point is required".into()));
        }
        let iv = parent.bounds.interval(axis);
        for w in cuts.windows(2) {
            if !(w[0] < w[1]) {
                return Err(invalid(format!("cut points must be strictly increasing, got {cuts:?}")));
            }
        }
        if let Some(c) = cuts.iter().find(|&&c| !iv.strictly_inside(c)) {
            return Err(invalid(format!("cut point {c} is not inside {iv:?} on {axis:?}")));
        }

        let mut edges = Vec::with_capacity(cuts.len() + 2);
        edges.push(iv.lo);
        edges.extend(cuts.iter().map(|&c| Some(c)));
        edges.push(iv.hi);

        let members: Vec<&DyadRecord> =
            records.iter().filter(|r| self.frame.contains(r) && parent.bounds.contains(r)).collect();
        let mut children = Vec::with_capacity(edges.len() - 1);
        for (k, e) in edges.windows(2).enumerate() {
            let mut bounds = parent.bounds.clone();
            bounds.0.insert(axis, Interval::new(e[0], e[1]));
            let inside: Vec<&&DyadRecord> = members.iter().filter(|r| bounds.contains(r)).collect();
            let mut history = vec![0usize; self.waves.len()];
            for r in &inside {
                if let Some(w) = self.samples.get(&r.id) {
                    let pos = self.waves.iter().position(|x| x == w).expect("sample wave is registered");
                    history[pos] += 1;
                }
            }
            children.push(Stratum {
                id: format!("{}.{}", parent.id, k + 1),
                frame: self.frame,
                parent: Some(parent.id.clone()),
                children: Vec::new(),
                bounds,
                population: inside.len(),
                sampled_per_wave: history,
                closed: false,
                flags: Vec::new(),
            });
        }
        let total: usize = children.iter().map(|c| c.population).sum();
        if total != parent.population {
            return Err(LedgerError::Inconsistent(format!(
                "children of {} hold {} records but the parent holds {}",
                parent.id, total, parent.population
            )));
        }
        let ids: Vec<String> = children.iter().map(|c| c.id.clone()).collect();
        self.strata[idx].children = ids.clone();
        // Depth-first order: children follow the parent's subtree position.
        let insert_at = idx + 1;
        for (k, child) in children.into_iter().enumerate() {
            self.strata.insert(insert_at + k, child);
        }
        Ok(ids)
    }

    pub fn close(&mut self, stratum_id: &str) -> Result<(), LedgerError> {
        let idx = self.stratum_index(stratum_id)?;
        if !self.strata[idx].is_leaf() {
            return Err(LedgerError::NotALeaf(stratum_id.to_string()));
        }
        self.strata[idx].closed = true;
        Ok(())
    }

    pub fn flag(&mut self, stratum_id: &str, flag: impl Into<String>) -> Result<(), LedgerError> {
        let idx = self.stratum_index(stratum_id)?;
        let flag = flag.into();
        if !self.strata[idx].flags.contains(&flag) {
            self.strata[idx].flags.push(flag);
        }
        Ok(())
    }

    /// Registers a completed wave: `draws` maps leaf id to the drawn record ids.
    pub fn record_wave(&mut self, wave: u32, draws: &BTreeMap<String, Vec<String>>) -> Result<(), LedgerError> {
        if self.waves.contains(&wave) {
            return Err(LedgerError::Inconsistent(format!("wave {wave} already recorded")));
        }
        for (leaf, ids) in draws {
            let s = self.stratum(leaf)?;
            if !s.is_leaf() {
                return Err(LedgerError::NotALeaf(leaf.clone()));
            }
            if s.closed && !ids.is_empty() {
                return Err(LedgerError::Inconsistent(format!("stratum {leaf} is closed")));
            }
            if let Some(dup) = ids.iter().find(|id| self.samples.contains_key(*id)) {
                return Err(LedgerError::Inconsistent(format!("record {dup} already drawn in this frame")));
            }
        }
        self.waves.push(wave);
        self.wave_count += 1;
        let n_waves = self.waves.len();
        for s in self.strata.iter_mut().filter(|s| s.is_leaf()) {
            s.sampled_per_wave.resize(n_waves - 1, 0);
            s.sampled_per_wave.push(draws.get(&s.id).map_or(0, |v| v.len()));
        }
        for ids in draws.values() {
            for id in ids {
                self.samples.insert(id.clone(), wave);
            }
        }
        Ok(())
    }

    /// Checks the structural invariants against a record set.
    pub fn check(&self, records: &[DyadRecord]) -> Result<(), LedgerError> {
        let frame_size = records.iter().filter(|r| self.frame.contains(r)).count();
        let leaf_total: usize = self.leaves().map(|s| s.population).sum();
        if leaf_total != frame_size || self.frame_size() != frame_size {
            return Err(LedgerError::Inconsistent(format!(
                "leaf populations sum to {leaf_total}, frame has {frame_size}"
            )));
        }
        for s in &self.strata {
            if s.total_sampled() > s.population {
                return Err(LedgerError::Inconsistent(format!("stratum {} sampled beyond N_s", s.id)));
            }
        }
        self.assign_strata(records)?;
        Ok(())
    }
}

fn probability_of(leaf: &Stratum) -> Result<f64, LedgerError> {
    let n = leaf.total_sampled();
    if n == 0 || leaf.population == 0 {
        return Err(LedgerError::Inconsistent(format!(
            "stratum {} has n_s={} of N_s={}; sampling probability undefined",
            leaf.id, n, leaf.population
        )));
    }
    Ok(n as f64 / leaf.population as f64)
}

/// One step of a strata specification (`design init` input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInstruction {
    pub stratum: String,
    pub axis: Axis,
    pub cuts: Vec<f64>,
}

impl DesignLedger {
    pub fn apply_splits(&mut self, records: &[DyadRecord], splits: &[SplitInstruction]) -> Result<(), LedgerError> {
        for s in splits {
            self.split_stratum(records, &s.stratum, s.axis, &s.cuts)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, delta: bool, y: f64, x: f64) -> DyadRecord {
        DyadRecord::phase1(id, y, delta, x, vec![0.0])
    }

    fn small() -> Vec<DyadRecord> {
        (0..40)
            .map(|i| rec(&format!("r{i}"), i % 3 == 0, 2.0 + (i as f64) / 10.0, 0.1 + (i as f64) / 100.0))
            .collect()
    }

    #[test]
    fn single_stratum_covers_everything() {
        let recs = small();
        let ledger = DesignLedger::new(Frame::Obesity, &recs, 1);
        let a = ledger.assign_strata(&recs).unwrap();
        assert_eq!(a.len(), 40);
        assert!(a.values().all(|s| s == "O"));
    }

    #[test]
    fn split_partitions_and_rejects_bad_cuts() {
        let recs = small();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 1);
        let kids = ledger.split_stratum(&recs, "O", Axis::Event, &[0.5]).unwrap();
        assert_eq!(kids, vec!["O.1", "O.2"]);
        let pops: usize = ledger.leaves().map(|s| s.population).sum();
        assert_eq!(pops, 40);
        assert!(matches!(ledger.split_stratum(&recs, "O", Axis::FollowUp, &[3.0]), Err(LedgerError::NotALeaf(_))));
        assert!(matches!(
            ledger.split_stratum(&recs, "O.1", Axis::FollowUp, &[]),
            Err(LedgerError::InvalidSplit { .. })
        ));
        assert!(matches!(
            ledger.split_stratum(&recs, "O.1", Axis::Event, &[2.0]),
            Err(LedgerError::InvalidSplit { .. })
        ));
        ledger.check(&recs).unwrap();
    }

    #[test]
    fn half_open_bounds() {
        let iv = Interval::new(Some(2.0), Some(5.0));
        assert!(!iv.contains(2.0));
        assert!(iv.contains(5.0));
        assert!(iv.contains(2.0000001));
    }

    #[test]
    fn overlapping_leaves_are_reported() {
        let recs = small();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 1);
        ledger.split_stratum(&recs, "O", Axis::Event, &[0.5]).unwrap();
        // Corrupt the tree: widen the second child to overlap the first.
        ledger.strata[2].bounds = Bounds::default();
        let err = ledger.assign_strata(&recs).unwrap_err();
        match err {
            LedgerError::PartitionViolation { strata, .. } => assert_eq!(strata.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probability_requires_draws() {
        let recs = small();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 1);
        assert!(ledger.sampling_probability(&recs[0]).is_err());
        let mut draws = BTreeMap::new();
        draws.insert("O".to_string(), vec!["r1".to_string(), "r2".to_string()]);
        ledger.record_wave(1, &draws).unwrap();
        assert_eq!(ledger.sampling_probability(&recs[0]).unwrap(), 2.0 / 40.0);
    }

    #[test]
    fn census_probability_is_one() {
        let recs = small();
        let mut ledger = DesignLedger::new(Frame::Obesity, &recs, 1);
        let mut draws = BTreeMap::new();
        draws.insert("O".to_string(), recs.iter().map(|r| r.id.clone()).collect());
        ledger.record_wave(1, &draws).unwrap();
        assert_eq!(ledger.sampling_probability(&recs[7]).unwrap(), 1.0);
    }

    #[test]
    fn record_invariants() {
        let mut r = rec("a", false, 3.0, 0.3);
        r.check().unwrap();
        r.x = Some(0.2);
        assert!(r.check().is_err());
        let mut r = rec("b", false, 3.0, 0.3);
        r.mark_validated(
            2,
            &Phase2Values { y: 3.1, delta: true, x: 0.25, z: vec![1.0], asthma: None, gestation_days: 270.0 },
        );
        r.check().unwrap();
        assert_eq!(r.wave_sampled, Some(2));
        let mut bad = rec("c", false, 0.0, 0.3);
        bad.y_star = 0.0;
        assert!(bad.check().is_err());
    }
}
