//! Wave planning and the five estimators, shared by the simulator and the
//! command-line tool.
//!
//! The obesity analysis is a Cox model for `(y, delta)` on `(x, z)`; the
//! asthma analysis is a logistic model for `asthma` on `(1, x, z)` within the
//! asthma frame. In both the target coefficient is the one for `x`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::allocation::{exact_allocation, multiwave, neyman, proportional, stratum_sd, SdSource, WaveAllocation};
use crate::datamodel::{Axis, DesignLedger, DyadRecord, Frame};
use crate::fpca::ASSUMED_GESTATION;
use crate::imputation::{fit_imputation, mi_influence, DeriveFn, ImputationFrame, TargetKind, TargetSpec, ValidatedRows};
use crate::models::{FitResult, ModelData, ModelError};
use crate::multiframe::{combine_frames, members_from_ledgers, multiframe_variance_groups};
use crate::raking::{ipw_fit, raking_fit, weighted_fit, Design, Estimate};
use crate::{Error, Result};

/// Imputed gestation lengths are clamped to this range before the exposure
/// is recomputed.
pub const IMPUTED_GESTATION: (f64, f64) = (168.0, ASSUMED_GESTATION);

/// Index of the exposure coefficient in the analysis model of `frame`.
pub fn target_index(frame: Frame) -> usize {
    match frame {
        Frame::Obesity => 0,
        Frame::Asthma => 1,
    }
}

pub fn coefficient_names(frame: Frame, z_dim: usize) -> Vec<String> {
    let mut out = Vec::new();
    if frame == Frame::Asthma {
        out.push("intercept".to_string());
    }
    out.push("x".to_string());
    out.extend((0..z_dim).map(|j| format!("z{j}")));
    out
}

/// One level of an initial stratification, applied to every current leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrataLevel {
    Cuts { axis: Axis, cuts: Vec<f64> },
    /// Cut points at within-leaf quantiles (type 7) of the axis.
    Quantiles { axis: Axis, probs: Vec<f64> },
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Splits every leaf level by level. Cut points that would leave a child
/// empty are skipped.
pub fn stratify(ledger: &mut DesignLedger, records: &[DyadRecord], levels: &[StrataLevel]) -> Result<()> {
    for level in levels {
        let axis = match level {
            StrataLevel::Cuts { axis, .. } | StrataLevel::Quantiles { axis, .. } => *axis,
        };
        for leaf in ledger.leaf_ids() {
            let stratum = ledger.stratum(&leaf)?;
            let mut values: Vec<f64> = records
                .iter()
                .filter(|r| ledger.frame.contains(r) && stratum.bounds.contains(r))
                .filter_map(|r| r.axis_value(axis))
                .collect();
            values.sort_by(f64::total_cmp);
            if values.is_empty() {
                continue;
            }
            let raw: Vec<f64> = match level {
                StrataLevel::Cuts { cuts, .. } => cuts.clone(),
                StrataLevel::Quantiles { probs, .. } => probs.iter().map(|&p| quantile(&values, p)).collect(),
            };
            let iv = stratum.bounds.interval(axis);
            let mut cuts: Vec<f64> = Vec::new();
            let mut prev = iv.lo;
            for c in raw {
                let inside = iv.lo.is_none_or(|lo| c > lo) && iv.hi.is_none_or(|hi| c < hi);
                let after = prev.is_none_or(|p| c > p);
                let below = values.iter().filter(|&&v| prev.is_none_or(|p| v > p) && v <= c).count();
                if inside && after && below > 0 && values.iter().any(|&v| v > c) {
                    cuts.push(c);
                    prev = Some(c);
                }
            }
            if !cuts.is_empty() {
                ledger.split_stratum(records, &leaf, axis, &cuts)?;
            }
        }
    }
    Ok(())
}

fn z_dim(records: &[DyadRecord]) -> usize {
    records.first().map_or(0, |r| r.z_star.len())
}

/// Rows of the analysis population of `frame`.
pub fn population_rows(records: &[DyadRecord], frame: Frame) -> Vec<usize> {
    (0..records.len()).filter(|&i| frame.contains(&records[i])).collect()
}

fn design_matrix(frame: Frame, rows: usize, q: usize, get: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let offset = target_index(frame);
    DMatrix::from_fn(rows, q + offset, |r, c| if c < offset { 1.0 } else { get(r, c - offset) })
}

/// Analysis data from the phase-1 fields.
pub fn phase1_data(records: &[DyadRecord], rows: &[usize], frame: Frame) -> Result<ModelData> {
    let q = 1 + z_dim(records);
    let x = design_matrix(frame, rows.len(), q, |r, c| {
        let rec = &records[rows[r]];
        if c == 0 { rec.x_star } else { rec.z_star[c - 1] }
    });
    Ok(match frame {
        Frame::Obesity => ModelData::Cox {
            time: rows.iter().map(|&i| records[i].y_star).collect(),
            event: rows.iter().map(|&i| records[i].delta_star).collect(),
            x,
        },
        Frame::Asthma => ModelData::Logistic {
            y: rows
                .iter()
                .map(|&i| {
                    records[i].asthma_star.ok_or_else(|| missing(&records[i], "asthma_star"))
                })
                .collect::<Result<_>>()?,
            x,
        },
    })
}

fn missing(r: &DyadRecord, field: &str) -> Error {
    Error::Config(format!("record {} has no {field}", r.id))
}

/// Analysis data from the validated fields; rows may repeat.
pub fn phase2_data(records: &[DyadRecord], rows: &[usize], frame: Frame) -> Result<ModelData> {
    for &i in rows {
        let r = &records[i];
        if !r.validated {
            return Err(missing(r, "validated values"));
        }
        if frame == Frame::Asthma && r.asthma.is_none() {
            return Err(missing(r, "validated asthma"));
        }
    }
    let q = 1 + z_dim(records);
    let x = design_matrix(frame, rows.len(), q, |r, c| {
        let rec = &records[rows[r]];
        if c == 0 { rec.x.expect("checked") } else { rec.z.as_ref().expect("checked")[c - 1] }
    });
    Ok(match frame {
        Frame::Obesity => ModelData::Cox {
            time: rows.iter().map(|&i| records[i].y.expect("checked")).collect(),
            event: rows.iter().map(|&i| records[i].delta.expect("checked")).collect(),
            x,
        },
        Frame::Asthma => {
            ModelData::Logistic { y: rows.iter().map(|&i| records[i].asthma.expect("checked")).collect(), x }
        }
    })
}

/// Phase-1 fit of the analysis model and its target influence per record.
#[derive(Debug, Clone)]
pub struct Phase1Fit {
    pub frame: Frame,
    pub fit: FitResult,
    pub rows: Vec<usize>,
    pub influence: BTreeMap<String, f64>,
}

pub fn phase1_fit(records: &[DyadRecord], frame: Frame) -> Result<Phase1Fit> {
    let rows = population_rows(records, frame);
    let data = phase1_data(records, &rows, frame)?;
    let fit = data.fit_unweighted()?;
    let h = fit.unit_influence(target_index(frame))?;
    let influence = rows.iter().zip(h).map(|(&i, v)| (records[i].id.clone(), v)).collect();
    Ok(Phase1Fit { frame, fit, rows, influence })
}

fn index_of(records: &[DyadRecord]) -> HashMap<&str, usize> {
    records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
}

/// Sampled rows of a ledger with their leaf, sampling probability and the
/// leaf sampling fractions.
struct SampleView {
    rows: Vec<usize>,
    pi: Vec<f64>,
    strata: Vec<String>,
}

fn sample_view(records: &[DyadRecord], ledger: &DesignLedger) -> Result<SampleView> {
    let index = index_of(records);
    let mut rows = Vec::new();
    let mut pi = Vec::new();
    let mut strata = Vec::new();
    for id in ledger.samples.keys() {
        let &i = index.get(id.as_str()).ok_or_else(|| Error::Config(format!("sampled record {id} is not in the data")))?;
        let leaf = ledger.leaf_of(&records[i])?;
        rows.push(i);
        pi.push(ledger.sampling_probability(&records[i])?);
        strata.push(leaf.id.clone());
    }
    Ok(SampleView { rows, pi, strata })
}

fn leaf_fractions(ledgers: &[&DesignLedger]) -> BTreeMap<String, f64> {
    ledgers
        .iter()
        .flat_map(|l| l.leaves())
        .filter(|s| s.population > 0)
        .map(|s| (s.id.clone(), s.total_sampled() as f64 / s.population as f64))
        .collect()
}

/// Target influence of an IPW fit on the records sampled so far in a frame.
pub fn sample_influence(records: &[DyadRecord], ledger: &DesignLedger) -> Result<BTreeMap<String, f64>> {
    let view = sample_view(records, ledger)?;
    let data = phase2_data(records, &view.rows, ledger.frame)?;
    let w: Vec<f64> = view.pi.iter().map(|p| 1.0 / p).collect();
    let fit = data.fit(&w)?;
    let h = fit.unit_influence(target_index(ledger.frame))?;
    Ok(view.rows.iter().zip(h).map(|(&i, v)| (records[i].id.clone(), v)).collect())
}

/// Allocation of the next wave of `size` draws. The first wave of a frame
/// uses the exact integer allocation with `first_wave_min` per stratum; later
/// waves use the multi-wave rule with stratum closing. Leaves whose SD was
/// borrowed from an ancestor, or replaced by proportional allocation, are
/// flagged on the ledger.
pub fn plan_wave(
    ledger: &mut DesignLedger,
    records: &[DyadRecord],
    influence: &BTreeMap<String, f64>,
    size: usize,
    first_wave_min: usize,
) -> Result<WaveAllocation> {
    let assignment = ledger.assign_strata(records)?;
    let stats = stratum_sd(ledger, &assignment, influence)?;
    for s in &stats {
        match &s.source {
            SdSource::Own => {}
            SdSource::Borrowed(from) => ledger.flag(&s.id, format!("sd_borrowed:{from}"))?,
            SdSource::Proportional => ledger.flag(&s.id, "proportional_fallback")?,
        }
    }
    let already: usize = stats.iter().map(|s| s.already_sampled).sum();
    if already > 0 {
        return Ok(multiwave(&stats, already + size)?);
    }
    let draws = exact_allocation(&stats, size, first_wave_min)?;
    let targets = neyman(&stats, size as f64).or_else(|_| proportional(&stats, size as f64))?;
    Ok(WaveAllocation {
        ids: stats.iter().map(|s| s.id.clone()).collect(),
        draws,
        targets,
        closed: vec![false; stats.len()],
        newly_closed: Vec::new(),
        rounds: 0,
    })
}

/// Closes the strata the allocation closed.
pub fn apply_closures(ledger: &mut DesignLedger, allocation: &WaveAllocation) -> Result<()> {
    for id in &allocation.newly_closed {
        info!("closing stratum {id}");
        ledger.close(id)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    Phase1,
    IpwSingle,
    IpwMulti,
    RakingNaive,
    RakingMi,
}

impl Estimator {
    pub const ALL: [Estimator; 5] =
        [Estimator::Phase1, Estimator::IpwSingle, Estimator::IpwMulti, Estimator::RakingNaive, Estimator::RakingMi];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Phase1 => "Phase1",
            Estimator::IpwSingle => "IPW_SF",
            Estimator::IpwMulti => "IPW_MF",
            Estimator::RakingNaive => "Raking_Nv",
            Estimator::RakingMi => "Raking_MI",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    pub estimator: Estimator,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    /// Analysis rows (dual-frame records drawn twice count twice).
    pub rows: usize,
    pub pooled_fallback: bool,
}

impl EstimatorOutput {
    fn from_estimate(estimator: Estimator, e: &Estimate) -> Self {
        let p = e.fit.coefficients.len();
        EstimatorOutput {
            estimator,
            coefficients: e.fit.coefficients.iter().copied().collect(),
            se: (0..p).map(|j| e.se(j)).collect(),
            rows: e.fit.weights.len(),
            pooled_fallback: e.pooled_fallback,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub imputations: usize,
    pub seed: u64,
    /// Finite-population correction in the design variance.
    pub fpc: bool,
    pub min_validated: usize,
    pub validated_rows: ValidatedRows,
    /// Multiply-imputed influence per record, when already computed.
    pub mi_influence: Option<Vec<f64>>,
    /// Rake the naive estimator on the phase-1 influence of every
    /// coefficient instead of the target coefficient alone.
    pub full_influence: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            imputations: 100,
            seed: 0,
            fpc: true,
            min_validated: 30,
            validated_rows: ValidatedRows::Reimpute,
            mi_influence: None,
            full_influence: false,
        }
    }
}

/// Imputation frame and target sequence for `frame`'s analysis. `exposure`
/// recomputes the exposure of record `i` for gestation `g`; without it the
/// exposure is imputed by regression.
pub fn imputation_setup(
    records: &[DyadRecord],
    frame: Frame,
    exposure: Option<DeriveFn>,
) -> Result<(ImputationFrame, Vec<TargetSpec>)> {
    let n = records.len();
    let zd = z_dim(records);
    let mut f = ImputationFrame::new(records.iter().map(|r| r.validated).collect());
    let col = |g: &dyn Fn(&DyadRecord) -> f64| records.iter().map(g).collect::<Vec<f64>>();
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    f.insert("x_star", col(&|r| r.x_star))?;
    f.insert("delta_star", col(&|r| b(r.delta_star)))?;
    f.insert("log_y_star", col(&|r| r.y_star.ln()))?;
    f.insert("asthma_star", col(&|r| b(r.asthma_star.unwrap_or(false))))?;
    f.insert("gestation", col(&|r| r.gestation_days.unwrap_or(ASSUMED_GESTATION)))?;
    f.insert("x", col(&|r| r.x.unwrap_or(0.0)))?;
    f.insert("delta", col(&|r| b(r.delta.unwrap_or(false))))?;
    f.insert("log_y", col(&|r| r.y.map_or(0.0, f64::ln)))?;
    f.insert("asthma", col(&|r| b(r.asthma.unwrap_or(false))))?;
    for j in 0..zd {
        f.insert(format!("z{j}_star"), col(&|r| r.z_star[j]))?;
        f.insert(format!("z{j}"), col(&|r| r.z.as_ref().map_or(0.0, |z| z[j])))?;
    }
    let z_star: Vec<String> = (0..zd).map(|j| format!("z{j}_star")).collect();
    let z: Vec<String> = (0..zd).map(|j| format!("z{j}")).collect();
    let with = |base: &[&str], extra: &[String]| -> Vec<String> {
        base.iter().map(|s| s.to_string()).chain(extra.iter().cloned()).collect()
    };
    let spec = |name: &str, kind: TargetKind, predictors: Vec<String>| TargetSpec {
        name: name.to_string(),
        kind,
        predictors,
        mask: None,
    };
    let phase1 = with(&["x_star", "delta_star", "log_y_star"], &z_star);
    let mut specs = Vec::new();
    match exposure {
        Some(fx) => {
            specs.push(spec("gestation", TargetKind::Linear, phase1.clone()));
            let (lo, hi) = IMPUTED_GESTATION;
            let f: DeriveFn = Arc::new(move |i, g| fx(i, g.clamp(lo, hi)));
            specs.push(spec("x", TargetKind::Derived { input: "gestation".into(), f }, Vec::new()));
        }
        None => specs.push(spec("x", TargetKind::Linear, phase1.clone())),
    }
    for j in 0..zd {
        specs.push(spec(&format!("z{j}"), TargetKind::Linear, vec![format!("z{j}_star"), "x".into()]));
    }
    specs.push(spec("delta", TargetKind::Logistic, with(&["delta_star", "log_y_star", "x"], &z)));
    specs.push(spec("log_y", TargetKind::Linear, vec!["log_y_star".into(), "delta_star".into(), "delta".into(), "x".into()]));
    if frame == Frame::Asthma {
        let mut s = spec("asthma", TargetKind::Logistic, with(&["asthma_star", "x"], &z));
        s.mask = Some(records.iter().map(|r| r.in_asthma_frame).collect());
        specs.push(s);
    }
    debug_assert_eq!(f.n, n);
    Ok((f, specs))
}

/// Multiply-imputed target influence for every record of the analysis
/// population (zero elsewhere).
pub fn mi_target_influence(
    records: &[DyadRecord],
    frame: Frame,
    exposure: Option<DeriveFn>,
    opts: &EstimateOptions,
) -> Result<Vec<f64>> {
    let (f, specs) = imputation_setup(records, frame, exposure)?;
    let model = fit_imputation(&f, &specs, opts.min_validated)?;
    let rows = population_rows(records, frame);
    let zd = z_dim(records);
    let n = records.len();
    let target = target_index(frame);
    let analysis = |c: &crate::imputation::Completed| -> std::result::Result<Vec<f64>, ModelError> {
        let q = 1 + zd;
        let x = design_matrix(frame, rows.len(), q, |r, j| {
            if j == 0 { c.column("x")[rows[r]] } else { c.column(&format!("z{}", j - 1))[rows[r]] }
        });
        let data = match frame {
            Frame::Obesity => ModelData::Cox {
                time: rows.iter().map(|&i| c.column("log_y")[i].exp()).collect(),
                event: rows.iter().map(|&i| c.column("delta")[i] > 0.5).collect(),
                x,
            },
            Frame::Asthma => ModelData::Logistic { y: rows.iter().map(|&i| c.column("asthma")[i] > 0.5).collect(), x },
        };
        let h = data.fit_unweighted()?.unit_influence(target)?;
        let mut out = vec![0.0; n];
        for (&i, v) in rows.iter().zip(h) {
            out[i] = v;
        }
        Ok(out)
    };
    Ok(mi_influence(&f, &model, opts.imputations, opts.seed, opts.validated_rows, analysis)?.h)
}

/// Combined (Hansen-Hurwitz) analysis rows over both frames.
struct Combined {
    rows: Vec<usize>,
    weights: Vec<f64>,
    strata: Vec<String>,
    clusters: Vec<String>,
}

fn combined_rows(records: &[DyadRecord], obesity: &DesignLedger, asthma: &DesignLedger, frame: Frame) -> Result<Combined> {
    let index = index_of(records);
    let members: Vec<_> = members_from_ledgers(records, obesity, asthma)?
        .into_iter()
        .filter(|m| frame.contains(&records[index[m.id.as_str()]]))
        .collect();
    let w = combine_frames(&members)?;
    let (strata, clusters) = multiframe_variance_groups(&w);
    Ok(Combined {
        rows: w.rows.iter().map(|r| index[r.record.as_str()]).collect(),
        weights: w.weights(),
        strata,
        clusters,
    })
}

/// Raking on a constant plus one column per auxiliary vector (each indexed
/// by record).
fn raked(
    records: &[DyadRecord],
    c: &Combined,
    aux_values: &[Vec<f64>],
    population: &[usize],
    frame: Frame,
    design: Design<'_>,
) -> Result<Estimate> {
    let data = phase2_data(records, &c.rows, frame)?;
    let k = 1 + aux_values.len();
    let aux = DMatrix::from_fn(c.rows.len(), k, |r, j| if j == 0 { 1.0 } else { aux_values[j - 1][c.rows[r]] });
    let totals = DVector::from_fn(k, |j, _| {
        if j == 0 { population.len() as f64 } else { population.iter().map(|&i| aux_values[j - 1][i]).sum() }
    });
    Ok(raking_fit(&data, &c.weights, &aux, &totals, design)?)
}

/// Unit phase-1 influence of every coefficient, indexed by record.
fn full_phase1_influence(records: &[DyadRecord], phase1: &Phase1Fit) -> Result<Vec<Vec<f64>>> {
    (0..phase1.fit.coefficients.len())
        .map(|j| {
            let mut h = vec![0.0; records.len()];
            for (&i, v) in phase1.rows.iter().zip(phase1.fit.unit_influence(j)?) {
                h[i] = v;
            }
            Ok(h)
        })
        .collect()
}

/// Runs the requested estimators on the current state of both ledgers.
pub fn estimate(
    records: &[DyadRecord],
    obesity: &DesignLedger,
    asthma: &DesignLedger,
    frame: Frame,
    phase1: &Phase1Fit,
    exposure: Option<DeriveFn>,
    which: &[Estimator],
    opts: &EstimateOptions,
) -> Vec<(Estimator, Result<EstimatorOutput>)> {
    let fractions = leaf_fractions(&[obesity, asthma]);
    let fpc = opts.fpc.then_some(&fractions);
    let population = population_rows(records, frame);
    let combined = std::cell::OnceCell::new();
    let get_combined = || combined.get_or_init(|| combined_rows(records, obesity, asthma, frame)).as_ref().map_err(clone_err);
    which
        .iter()
        .map(|&e| {
            let out = (|| -> Result<EstimatorOutput> {
                match e {
                    Estimator::Phase1 => {
                        let p = phase1.fit.coefficients.len();
                        Ok(EstimatorOutput {
                            estimator: e,
                            coefficients: phase1.fit.coefficients.iter().copied().collect(),
                            se: (0..p).map(|j| phase1.fit.se(j)).collect(),
                            rows: phase1.rows.len(),
                            pooled_fallback: false,
                        })
                    }
                    Estimator::IpwSingle => {
                        let ledger = if frame == Frame::Obesity { obesity } else { asthma };
                        let view = sample_view(records, ledger)?;
                        let data = phase2_data(records, &view.rows, frame)?;
                        let design = Design { strata: &view.strata, clusters: None, fpc };
                        Ok(EstimatorOutput::from_estimate(e, &ipw_fit(&data, &view.pi, design)?))
                    }
                    Estimator::IpwMulti => {
                        let c = get_combined()?;
                        let data = phase2_data(records, &c.rows, frame)?;
                        let design = Design { strata: &c.strata, clusters: Some(&c.clusters), fpc };
                        Ok(EstimatorOutput::from_estimate(e, &weighted_fit(&data, &c.weights, design)?))
                    }
                    Estimator::RakingNaive => {
                        let c = get_combined()?;
                        let aux = if opts.full_influence {
                            full_phase1_influence(records, phase1)?
                        } else {
                            let mut h = vec![0.0; records.len()];
                            for &i in &population {
                                h[i] = *phase1.influence.get(&records[i].id).ok_or_else(|| missing(&records[i], "phase-1 influence"))?;
                            }
                            vec![h]
                        };
                        let design = Design { strata: &c.strata, clusters: Some(&c.clusters), fpc };
                        Ok(EstimatorOutput::from_estimate(e, &raked(records, c, &aux, &population, frame, design)?))
                    }
                    Estimator::RakingMi => {
                        let c = get_combined()?;
                        let h = match &opts.mi_influence {
                            Some(h) if h.len() == records.len() => h.clone(),
                            Some(h) => {
                                return Err(Error::Config(format!("{} imputed influence values for {} records", h.len(), records.len())))
                            }
                            None => mi_target_influence(records, frame, exposure.clone(), opts)?,
                        };
                        let design = Design { strata: &c.strata, clusters: Some(&c.clusters), fpc };
                        Ok(EstimatorOutput::from_estimate(e, &raked(records, c, &[h], &population, frame, design)?))
                    }
                }
            })();
            (e, out)
        })
        .collect()
}

fn clone_err(e: &Error) -> Error {
    Error::Config(e.to_string())
}

/// Truth for a simulated population: the unweighted fit on validated values
/// of every member of the analysis population.
pub fn census_fit(records: &[DyadRecord], frame: Frame) -> Result<FitResult> {
    let rows = population_rows(records, frame);
    Ok(phase2_data(records, &rows, frame)?.fit_unweighted()?)
}
