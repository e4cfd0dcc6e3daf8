//! Repeated multi-wave designs on one finite population.

use std::fmt::Write as _;
use std::sync::Arc;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, Population, SimConfig};
use crate::allocation::{draw_wave, WaveAllocation};
use crate::datamodel::{Axis, DesignLedger, DyadRecord, Frame};
use crate::fpca::weight_change;
use crate::imputation::{DeriveFn, ValidatedRows};
use crate::rng;
use crate::workflow::{
    apply_closures, census_fit, phase1_fit, plan_wave, sample_influence, stratify, target_index, EstimateOptions,
    Estimator, EstimatorOutput, Phase1Fit, StrataLevel, IMPUTED_GESTATION,
};
use crate::{Error, Result};

const EXPERIMENT: u64 = 10;
const EXPOSURE_STEP: f64 = 3.0;
/// Normal quantile for 95% intervals.
const Z95: f64 = 1.959_963_984_540_054;

pub fn default_obesity_strata() -> Vec<StrataLevel> {
    vec![
        StrataLevel::Cuts { axis: Axis::Event, cuts: vec![0.5] },
        StrataLevel::Cuts { axis: Axis::FollowUp, cuts: vec![5.0] },
        StrataLevel::Quantiles { axis: Axis::TotalGain, probs: vec![1.0 / 3.0, 2.0 / 3.0] },
    ]
}

pub fn default_asthma_strata() -> Vec<StrataLevel> {
    vec![
        StrataLevel::Cuts { axis: Axis::Asthma, cuts: vec![0.5] },
        StrataLevel::Quantiles { axis: Axis::TotalGain, probs: vec![1.0 / 3.0, 2.0 / 3.0] },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub obesity_waves: Vec<usize>,
    pub asthma_waves: Vec<usize>,
    pub obesity_strata: Vec<StrataLevel>,
    pub asthma_strata: Vec<StrataLevel>,
    pub first_wave_min: usize,
    pub imputations: usize,
    pub fpc: bool,
    pub analysis: Frame,
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec {
            obesity_waves: vec![250, 250, 125, 125],
            asthma_waves: vec![125, 159],
            obesity_strata: default_obesity_strata(),
            asthma_strata: default_asthma_strata(),
            first_wave_min: 2,
            imputations: 10,
            fpc: true,
            analysis: Frame::Obesity,
        }
    }
}

/// Exposure of each record recomputed on a gestation grid and interpolated
/// linearly.
pub fn exposure_table(population: &Population) -> Result<DeriveFn> {
    let (lo, hi) = IMPUTED_GESTATION;
    let steps = ((hi - lo) / EXPOSURE_STEP).round() as usize;
    let eig = &population.eigensystem;
    let table: Vec<Vec<f64>> = population
        .trajectories
        .par_iter()
        .map(|t| {
            (0..=steps)
                .map(|k| weight_change(&t.observed, eig, (lo + k as f64 * EXPOSURE_STEP).min(hi)))
                .collect::<std::result::Result<Vec<f64>, _>>()
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(Arc::new(move |i: usize, g: f64| {
        let row = &table[i];
        let h = ((g.clamp(lo, hi) - lo) / EXPOSURE_STEP).min(steps as f64);
        let k = (h.floor() as usize).min(steps.saturating_sub(1));
        let f = h - k as f64;
        if steps == 0 {
            row[0]
        } else {
            row[k] + f * (row[k + 1] - row[k])
        }
    }))
}

/// Everything that does not change between replicates.
pub struct Prepared {
    pub population: Population,
    pub design: DesignSpec,
    /// Stratified ledgers with no samples yet.
    pub obesity: DesignLedger,
    pub asthma: DesignLedger,
    pub phase1_obesity: Phase1Fit,
    pub phase1_asthma: Phase1Fit,
    pub exposure: DeriveFn,
    /// Census coefficients of the analysis model on the validated values.
    pub truth: Vec<f64>,
}

impl Prepared {
    pub fn new(population: Population, design: DesignSpec) -> Result<Self> {
        let records = &population.records;
        let seed = population.config.seed;
        let mut obesity = DesignLedger::new(Frame::Obesity, records, seed);
        stratify(&mut obesity, records, &design.obesity_strata)?;
        let mut asthma = DesignLedger::new(Frame::Asthma, records, seed);
        stratify(&mut asthma, records, &design.asthma_strata)?;
        let phase1_obesity = phase1_fit(records, Frame::Obesity)?;
        let phase1_asthma = phase1_fit(records, Frame::Asthma)?;
        let mut all = records.clone();
        let ids: Vec<String> = all.iter().map(|r| r.id.clone()).collect();
        population.reveal(&mut all, &ids, 0);
        let truth = census_fit(&all, design.analysis)?.coefficients.iter().copied().collect();
        let exposure = exposure_table(&population)?;
        Ok(Prepared { population, design, obesity, asthma, phase1_obesity, phase1_asthma, exposure, truth })
    }

    pub fn phase1(&self, frame: Frame) -> &Phase1Fit {
        match frame {
            Frame::Obesity => &self.phase1_obesity,
            Frame::Asthma => &self.phase1_asthma,
        }
    }
}

/// State after all waves of one replicate.
#[derive(Debug)]
pub struct DesignRun {
    pub records: Vec<DyadRecord>,
    pub obesity: DesignLedger,
    pub asthma: DesignLedger,
    pub allocations: Vec<(Frame, u32, WaveAllocation)>,
    /// Asthma-frame draws that had already been validated.
    pub overlap: usize,
    pub estimates: Vec<(Estimator, Result<EstimatorOutput>)>,
}

/// Runs every wave of the design and then all estimators.
pub fn run_design(prep: &Prepared, seed: u64) -> Result<DesignRun> {
    let design = &prep.design;
    let mut records = prep.population.records.clone();
    let mut obesity = prep.obesity.clone();
    let mut asthma = prep.asthma.clone();
    let mut allocations = Vec::new();
    let mut overlap = 0;
    let plan: Vec<(Frame, usize)> = design
        .obesity_waves
        .iter()
        .map(|&n| (Frame::Obesity, n))
        .chain(design.asthma_waves.iter().map(|&n| (Frame::Asthma, n)))
        .collect();
    for (k, &(frame, size)) in plan.iter().enumerate() {
        let wave = k as u32 + 1;
        let ledger = match frame {
            Frame::Obesity => &mut obesity,
            Frame::Asthma => &mut asthma,
        };
        let influence = if ledger.samples.is_empty() {
            prep.phase1(frame).influence.clone()
        } else {
            sample_influence(&records, ledger)?
        };
        let alloc = plan_wave(ledger, &records, &influence, size, design.first_wave_min)?;
        apply_closures(ledger, &alloc)?;
        let draw = draw_wave(ledger, &records, &alloc.as_map(), wave, rng::derive_seed(seed, &[wave as u64]))?;
        debug!("wave {wave} ({}): {} draws, {} overlap", frame.tag(), draw.total(), draw.overlap.len());
        if frame == Frame::Asthma {
            overlap += draw.overlap.len();
        }
        let ids: Vec<String> = draw.by_stratum.values().flatten().cloned().collect();
        prep.population.reveal(&mut records, &ids, wave);
        allocations.push((frame, wave, alloc));
    }
    let opts = EstimateOptions {
        imputations: design.imputations,
        seed: rng::derive_seed(seed, &[rng::label("imputation")]),
        fpc: design.fpc,
        min_validated: 30,
        validated_rows: ValidatedRows::Reimpute,
        mi_influence: None,
        full_influence: false,
    };
    let estimates = crate::workflow::estimate(
        &records,
        &obesity,
        &asthma,
        design.analysis,
        prep.phase1(design.analysis),
        Some(prep.exposure.clone()),
        &Estimator::ALL,
        &opts,
    );
    Ok(DesignRun { records, obesity, asthma, allocations, overlap, estimates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub replicates: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub population: usize,
    pub replicates: usize,
    pub truth: f64,
    pub mean_overlap: f64,
    pub summaries: Vec<EstimatorSummary>,
    /// Up to ten distinct failure messages.
    pub failure_messages: Vec<String>,
}

impl ExperimentReport {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == e.name())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,replicates,failures,truth,mean,bias,sd,mean_se,coverage,bias_mc_se\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.estimator, s.replicates, s.failures, self.truth, s.mean, s.bias, s.sd, s.mean_se, s.coverage, s.bias_mc_se
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "N = {}, replicates = {}, true coefficient = {:.4}, mean overlap = {:.1}\n",
            self.population, self.replicates, self.truth, self.mean_overlap
        );
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>5} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "estimator", "ok", "fail", "mean", "bias", "sd", "mean_se", "cover", "mc_se"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>5} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>8.3} {:>8.4}",
                s.estimator, s.replicates, s.failures, s.mean, s.bias, s.sd, s.mean_se, s.coverage, s.bias_mc_se
            );
        }
        for m in &self.failure_messages {
            let _ = writeln!(out, "failure: {m}");
        }
        out
    }
}

fn summarize(e: Estimator, truth: f64, values: &[(f64, f64)], failures: usize) -> EstimatorSummary {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / nf;
    let sd = if n > 1 { (values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() } else { 0.0 };
    let mean_se = values.iter().map(|v| v.1).sum::<f64>() / nf;
    let coverage = values.iter().filter(|v| (v.0 - truth).abs() <= Z95 * v.1).count() as f64 / nf;
    EstimatorSummary {
        estimator: e.name().to_string(),
        replicates: n,
        failures,
        mean,
        bias: mean - truth,
        sd,
        mean_se,
        coverage,
        bias_mc_se: sd / nf.sqrt(),
    }
}

/// Monte Carlo over `replicates` independent designs on the population of
/// `config`. Replicate `r` depends only on `(config.seed, r)`.
pub fn run_experiment(config: &SimConfig, design: &DesignSpec, replicates: usize) -> Result<ExperimentReport> {
    if replicates == 0 {
        return Err(Error::Config("at least one replicate required".into()));
    }
    let population = generate(config)?;
    info!("population generated ({} records)", population.records.len());
    let prep = Prepared::new(population, design.clone())?;
    run_prepared(&prep, replicates)
}

pub fn run_prepared(prep: &Prepared, replicates: usize) -> Result<ExperimentReport> {
    let seed = prep.population.config.seed;
    let j = target_index(prep.design.analysis);
    let truth = prep.truth[j];
    type Outcome = std::result::Result<(usize, Vec<std::result::Result<(f64, f64), String>>), String>;
    let outcomes: Vec<Outcome> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let run = run_design(prep, rng::derive_seed(seed, &[EXPERIMENT, r as u64])).map_err(|e| e.to_string())?;
            let est = run
                .estimates
                .into_iter()
                .map(|(_, o)| match o {
                    Ok(o) if o.se[j].is_finite() => Ok((o.coefficients[j], o.se[j])),
                    Ok(_) => Err("non-finite standard error".to_string()),
                    Err(e) => Err(e.to_string()),
                })
                .collect();
            Ok((run.overlap, est))
        })
        .collect();
    let mut messages: Vec<String> = Vec::new();
    let mut note = |m: &str| {
        if messages.len() < 10 && !messages.iter().any(|x| x == m) {
            messages.push(m.to_string());
        }
    };
    let mut overlap = Vec::new();
    let mut per: Vec<Vec<(f64, f64)>> = vec![Vec::new(); Estimator::ALL.len()];
    let mut failures = vec![0; Estimator::ALL.len()];
    for o in &outcomes {
        match o {
            Ok((ov, est)) => {
                overlap.push(*ov as f64);
                for (k, e) in est.iter().enumerate() {
                    match e {
                        Ok(v) => per[k].push(*v),
                        Err(m) => {
                            failures[k] += 1;
                            note(m);
                        }
                    }
                }
            }
            Err(m) => {
                failures.iter_mut().for_each(|f| *f += 1);
                note(m);
            }
        }
    }
    let summaries = Estimator::ALL
        .iter()
        .enumerate()
        .map(|(k, &e)| summarize(e, truth, &per[k], failures[k]))
        .collect();
    Ok(ExperimentReport {
        population: prep.population.records.len(),
        replicates,
        truth,
        mean_overlap: if overlap.is_empty() { f64::NAN } else { overlap.iter().sum::<f64>() / overlap.len() as f64 },
        summaries,
        failure_messages: messages,
    })
}
