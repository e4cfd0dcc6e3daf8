//! Synthetic populations with known truth, brute-force oracles and the
//! Monte Carlo comparison of estimators.
//!
//! A population is generated in four steps: latent weight trajectories from a
//! three-term Karhunen-Loève model, an eigensystem fitted to the noisy sparse
//! measurements, exposures from that eigensystem (validated: clean series and
//! true gestation; phase 1: raw series and the assumed 273 days), and finally
//! Cox event times and the error model that produces the phase-1 fields.

pub mod experiment;
pub mod oracle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DyadRecord, Phase2Values};
use crate::fpca::pace::weight_change;
use crate::fpca::smooth::Grid;
use crate::fpca::{fit_eigensystem, EigenSystem, FpcaOptions, LongitudinalSeries, ASSUMED_GESTATION, DOMAIN};
use crate::rng;
use crate::{Error, Result};

pub use experiment::{run_experiment, DesignSpec, EstimatorSummary, ExperimentReport};
pub use oracle::{oracle_allocation, OracleResult};

// Stream coordinates.
const TRAJECTORY: u64 = 1;
const OUTCOME: u64 = 2;
const ERRORS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Mean weight before conception (kg).
    pub baseline_weight: f64,
    /// Mean gain from conception to day 272 (kg).
    pub mean_gain: f64,
    /// The mean gain follows `(s/272)^gain_shape`.
    pub gain_shape: f64,
    /// Variances of the normalized Legendre components of degree 0, 1, 2, ...
    pub eigenvalues: Vec<f64>,
    pub noise_sd: f64,
    /// Observations per subject are `1 + Poisson(mean_extra_observations)`.
    pub mean_extra_observations: f64,
    /// Share of observations taken during the pregnancy.
    pub pregnancy_share: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            baseline_weight: 70.0,
            mean_gain: 12.8,
            gain_shape: 1.3,
            eigenvalues: vec![91_728.0, 3_981.0, 1_433.0],
            noise_sd: 1.0,
            mean_extra_observations: 8.0,
            pregnancy_share: 0.7,
        }
    }
}

/// Gestation `max(min_days, 273 − Exp(mean_shortfall))`, rounded to days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GestationConfig {
    pub mean_shortfall: f64,
    pub min_days: f64,
}

impl Default for GestationConfig {
    fn default() -> Self {
        GestationConfig { mean_shortfall: 7.0, min_days: 196.0 }
    }
}

/// Cox model with a Weibull baseline for the time to childhood obesity, and a
/// logistic model for asthma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeConfig {
    /// Log hazard ratio per kg/week of gain.
    pub beta_x: f64,
    /// Log hazard ratios for `z = (BMI/5, binary covariate)`.
    pub beta_z: Vec<f64>,
    pub weibull_shape: f64,
    /// Baseline scale in years at the population-average linear predictor.
    pub weibull_scale: f64,
    pub follow_up_max: f64,
    /// Probability of follow-up to `follow_up_max`; the rest are censored
    /// uniformly on `[follow_up_min, follow_up_max]`.
    pub full_follow_up: f64,
    pub follow_up_min: f64,
    pub binary_rate: f64,
    pub asthma_intercept: f64,
    pub asthma_beta_x: f64,
    pub asthma_beta_z: Vec<f64>,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        OutcomeConfig {
            beta_x: 0.87,
            beta_z: vec![0.3, 0.25],
            weibull_shape: 1.5,
            weibull_scale: 14.5,
            follow_up_max: 6.0,
            full_follow_up: 0.45,
            follow_up_min: 2.0,
            binary_rate: 0.5,
            asthma_intercept: -1.9,
            asthma_beta_x: -0.54,
            asthma_beta_z: vec![0.15, 0.2],
        }
    }
}

/// How phase-1 values deviate from the validated ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorConfig {
    pub event_sensitivity: f64,
    pub event_specificity: f64,
    /// Probability that the recorded time is off, and the SD of the error
    /// (years).
    pub time_error_rate: f64,
    pub time_error_sd: f64,
    /// Added to the phase-1 exposure of children with a true event
    /// (differential error, kg/week).
    pub exposure_event_shift: f64,
    pub exposure_noise_sd: f64,
    /// Probability that a weight measurement is a gross error.
    pub outlier_rate: f64,
    pub outlier_shift: (f64, f64),
    /// Additive error on the BMI/5 covariate.
    pub bmi_error_sd: f64,
    pub asthma_sensitivity: f64,
    pub asthma_specificity: f64,
    /// Phase-1 exposure assumes a 273-day pregnancy instead of the true length.
    pub assumed_gestation: bool,
}

impl Default for ErrorConfig {
    fn default() -> Self {
        ErrorConfig {
            event_sensitivity: 0.973,
            event_specificity: 0.9986,
            time_error_rate: 0.047,
            time_error_sd: 0.75,
            exposure_event_shift: 0.02,
            exposure_noise_sd: 0.03,
            outlier_rate: 0.01,
            outlier_shift: (25.0, 40.0),
            bmi_error_sd: 0.1,
            asthma_sensitivity: 0.832,
            asthma_specificity: 0.906,
            assumed_gestation: true,
        }
    }
}

impl ErrorConfig {
    /// Phase 1 equals the truth.
    pub fn none() -> Self {
        ErrorConfig {
            event_sensitivity: 1.0,
            event_specificity: 1.0,
            time_error_rate: 0.0,
            time_error_sd: 0.0,
            exposure_event_shift: 0.0,
            exposure_noise_sd: 0.0,
            outlier_rate: 0.0,
            outlier_shift: (0.0, 0.0),
            bmi_error_sd: 0.0,
            asthma_sensitivity: 1.0,
            asthma_specificity: 1.0,
            assumed_gestation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub population: usize,
    pub seed: u64,
    /// Probability of membership in the asthma frame.
    pub asthma_frame_fraction: f64,
    pub trajectory: TrajectoryConfig,
    pub gestation: GestationConfig,
    pub outcome: OutcomeConfig,
    pub errors: ErrorConfig,
    pub fpca: FpcaOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            population: 10_335,
            seed: 2024,
            asthma_frame_fraction: 0.68,
            trajectory: TrajectoryConfig::default(),
            gestation: GestationConfig::default(),
            outcome: OutcomeConfig::default(),
            errors: ErrorConfig::default(),
            fpca: FpcaOptions::default(),
        }
    }
}

impl SimConfig {
    /// No measurement error and full-term pregnancies.
    pub fn error_free(population: usize, seed: u64) -> Self {
        SimConfig {
            population,
            seed,
            gestation: GestationConfig { mean_shortfall: 0.0, ..GestationConfig::default() },
            errors: ErrorConfig::none(),
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.population < 10 {
            return bad(format!("population {} is too small", self.population));
        }
        let e = &self.errors;
        for (name, p) in [
            ("event_sensitivity", e.event_sensitivity),
            ("event_specificity", e.event_specificity),
            ("time_error_rate", e.time_error_rate),
            ("outlier_rate", e.outlier_rate),
            ("asthma_sensitivity", e.asthma_sensitivity),
            ("asthma_specificity", e.asthma_specificity),
            ("asthma_frame_fraction", self.asthma_frame_fraction),
            ("full_follow_up", self.outcome.full_follow_up),
            ("binary_rate", self.outcome.binary_rate),
            ("pregnancy_share", self.trajectory.pregnancy_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let ev = &self.trajectory.eigenvalues;
        if ev.is_empty() || ev.iter().any(|&l| !(l > 0.0)) || ev.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!("eigenvalues {ev:?} must be positive and non-increasing"));
        }
        if self.outcome.beta_z.len() != 2 || self.outcome.asthma_beta_z.len() != 2 {
            return bad("beta_z and asthma_beta_z need two entries (BMI/5, binary)".into());
        }
        if !(self.outcome.weibull_shape > 0.0 && self.outcome.weibull_scale > 0.0) {
            return bad("Weibull shape and scale must be positive".into());
        }
        if !(self.outcome.follow_up_min > 0.0 && self.outcome.follow_up_min <= self.outcome.follow_up_max) {
            return bad("need 0 < follow_up_min <= follow_up_max".into());
        }
        if !(self.gestation.mean_shortfall >= 0.0 && (14.0..=ASSUMED_GESTATION).contains(&self.gestation.min_days)) {
            return bad("gestation settings out of range".into());
        }
        if e.outlier_shift.0 > e.outlier_shift.1 {
            return bad("outlier_shift must be an increasing pair".into());
        }
        Ok(())
    }
}

/// Normalized Legendre function of degree `k` on the domain.
pub fn legendre(k: usize, s: f64) -> f64 {
    let (lo, hi) = DOMAIN;
    let l = hi - lo;
    let u = 2.0 * (s - lo) / l - 1.0;
    let (mut p0, mut p1) = (1.0, u);
    let p = match k {
        0 => 1.0,
        1 => u,
        _ => {
            for n in 1..k {
                let n = n as f64;
                let p2 = ((2.0 * n + 1.0) * u * p1 - n * p0) / (n + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    p * ((2 * k + 1) as f64 / l).sqrt()
}

impl TrajectoryConfig {
    /// Mean weight at true gestational day `s`.
    pub fn mean(&self, s: f64) -> f64 {
        self.baseline_weight + self.mean_gain * (s.max(0.0) / (ASSUMED_GESTATION - 1.0)).powf(self.gain_shape)
    }

    pub fn curve(&self, scores: &[f64], s: f64) -> f64 {
        self.mean(s) + scores.iter().enumerate().map(|(k, x)| x * legendre(k, s)).sum::<f64>()
    }

    /// The generating eigensystem on a grid (full-term time scale).
    pub fn true_eigensystem(&self, grid_size: usize) -> EigenSystem {
        let grid = Grid { lo: DOMAIN.0, hi: DOMAIN.1, size: grid_size };
        let pts = grid.points();
        let total: f64 = self.eigenvalues.iter().sum();
        let mut acc = 0.0;
        EigenSystem {
            grid: pts.clone(),
            mean: pts.iter().map(|&t| self.mean(t)).collect(),
            eigenvalues: self.eigenvalues.clone(),
            eigenfunctions: (0..self.eigenvalues.len()).map(|k| pts.iter().map(|&t| legendre(k, t)).collect()).collect(),
            noise_var: self.noise_sd * self.noise_sd,
            fve: self
                .eigenvalues
                .iter()
                .map(|l| {
                    acc += l;
                    acc / total
                })
                .collect(),
            bandwidth_mean: 0.0,
            bandwidth_cov: 0.0,
            flags: Vec::new(),
        }
    }
}

/// Latent and observed weight history of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scores: Vec<f64>,
    pub gestation: f64,
    /// Measurements on the assumed-gestation time scale, gross errors included.
    pub observed: LongitudinalSeries,
    /// The same measurements without gross errors.
    pub clean: LongitudinalSeries,
    pub outliers: Vec<usize>,
}

fn draw_gestation(cfg: &GestationConfig, rng: &mut ChaCha8Rng) -> f64 {
    if cfg.mean_shortfall <= 0.0 {
        return ASSUMED_GESTATION;
    }
    let short: f64 = Exp::new(1.0 / cfg.mean_shortfall).expect("positive rate").sample(rng);
    (ASSUMED_GESTATION - short).round().max(cfg.min_days)
}

/// One subject's trajectory; depends only on `(seed, index)`.
pub fn trajectory(cfg: &TrajectoryConfig, gestation: &GestationConfig, errors: &ErrorConfig, seed: u64, index: usize) -> Trajectory {
    let mut rng = rng::stream(seed, &[TRAJECTORY, index as u64]);
    let scores: Vec<f64> = cfg.eigenvalues.iter().map(|l| l.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let g = draw_gestation(gestation, &mut rng);
    let offset = ASSUMED_GESTATION - g;
    let m = 1 + Poisson::new(cfg.mean_extra_observations.max(1e-9)).expect("positive mean").sample(&mut rng) as usize;
    let (lo, hi) = DOMAIN;
    let mut times: Vec<f64> = (0..m)
        .map(|_| {
            if rng.random::<f64>() < cfg.pregnancy_share {
                rng.random_range(offset..=hi)
            } else {
                rng.random_range(lo..offset.max(lo + 1.0))
            }
        })
        .map(|t: f64| (t * 1e3).round() / 1e3)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let noise = Normal::new(0.0, cfg.noise_sd).expect("finite sd");
    let clean_values: Vec<f64> =
        times.iter().map(|&t| (cfg.curve(&scores, t - offset) + noise.sample(&mut rng)).max(1.0)).collect();
    let mut values = clean_values.clone();
    let mut outliers = Vec::new();
    for (j, v) in values.iter_mut().enumerate() {
        if errors.outlier_rate > 0.0 && rng.random::<f64>() < errors.outlier_rate {
            *v += rng.random_range(errors.outlier_shift.0..=errors.outlier_shift.1);
            outliers.push(j);
        }
    }
    let id = format!("d{index:05}");
    Trajectory {
        scores,
        gestation: g,
        observed: LongitudinalSeries { subject: id.clone(), times: times.clone(), values },
        clean: LongitudinalSeries { subject: id, times, values: clean_values },
        outliers,
    }
}

/// A generated population: phase-1 records, the hidden validated values and
/// the measurement histories.
#[derive(Debug, Clone)]
pub struct Population {
    pub config: SimConfig,
    pub records: Vec<DyadRecord>,
    /// Validated values, aligned with `records`.
    pub truth: Vec<Phase2Values>,
    pub trajectories: Vec<Trajectory>,
    pub eigensystem: EigenSystem,
}

impl Population {
    pub fn series(&self) -> Vec<LongitudinalSeries> {
        self.trajectories.iter().map(|t| t.observed.clone()).collect()
    }

    /// Writes the validated values into the listed records.
    pub fn reveal(&self, records: &mut [DyadRecord], ids: &[String], wave: u32) {
        let index: std::collections::HashMap<&str, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let pos: std::collections::HashMap<String, usize> =
            records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        for id in ids {
            if let (Some(&t), Some(&r)) = (index.get(id.as_str()), pos.get(id)) {
                records[r].mark_validated(wave, &self.truth[t]);
            }
        }
    }
}

fn logit_inv(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn misclassify(truth: bool, sensitivity: f64, specificity: f64, rng: &mut ChaCha8Rng) -> bool {
    let u: f64 = rng.random();
    if truth {
        u < sensitivity
    } else {
        u >= specificity
    }
}

/// Generates a population. Deterministic in the configuration, including the
/// seed; parallel work is merged in index order.
pub fn generate(config: &SimConfig) -> Result<Population> {
    config.validate()?;
    let n = config.population;
    let seed = config.seed;
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| trajectory(&config.trajectory, &config.gestation, &config.errors, seed, i))
        .collect();
    let observed: Vec<LongitudinalSeries> = trajectories.iter().map(|t| t.observed.clone()).collect();
    let eig = fit_eigensystem(&observed, &config.fpca)?;

    let e = &config.errors;
    let exposures: Vec<(f64, f64)> = trajectories
        .par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let x = weight_change(&t.clean, &eig, t.gestation)?;
            let g1 = if e.assumed_gestation { ASSUMED_GESTATION } else { t.gestation };
            let x1 = weight_change(&t.observed, &eig, g1)?;
            Ok((x, x1))
        })
        .collect::<Result<_>>()?;

    let o = &config.outcome;
    let mut rng = rng::stream(seed, &[OUTCOME]);
    let mut z = Vec::with_capacity(n);
    for t in &trajectories {
        let height: f64 = 1.64 + 0.07 * rng.sample::<f64, _>(StandardNormal);
        let bmi = config.trajectory.curve(&t.scores, -1.0) / (height * height);
        let binary = if rng.random::<f64>() < o.binary_rate { 1.0 } else { 0.0 };
        z.push([bmi / 5.0, binary]);
    }
    let mean_x = exposures.iter().map(|e| e.0).sum::<f64>() / n as f64;
    let mean_z0 = z.iter().map(|z| z[0]).sum::<f64>() / n as f64;
    let mean_z1 = z.iter().map(|z| z[1]).sum::<f64>() / n as f64;
    let eta = |x: f64, z: &[f64; 2]| o.beta_x * (x - mean_x) + o.beta_z[0] * (z[0] - mean_z0) + o.beta_z[1] * (z[1] - mean_z1);

    let mut truth = Vec::with_capacity(n);
    let mut asthma_truth = Vec::with_capacity(n);
    let mut frame = Vec::with_capacity(n);
    for i in 0..n {
        let x = exposures[i].0;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let event_time = o.weibull_scale * (-u.ln() / eta(x, &z[i]).exp()).powf(1.0 / o.weibull_shape);
        let censor =
            if rng.random::<f64>() < o.full_follow_up { o.follow_up_max } else { rng.random_range(o.follow_up_min..=o.follow_up_max) };
        let (y, delta) = if event_time <= censor { (event_time, true) } else { (censor, false) };
        let lin = o.asthma_intercept
            + o.asthma_beta_x * (x - mean_x)
            + o.asthma_beta_z[0] * (z[i][0] - mean_z0)
            + o.asthma_beta_z[1] * (z[i][1] - mean_z1);
        asthma_truth.push(rng.random::<f64>() < logit_inv(lin));
        frame.push(rng.random::<f64>() < config.asthma_frame_fraction);
        truth.push(Phase2Values {
            y,
            delta,
            x,
            z: z[i].to_vec(),
            asthma: None,
            gestation_days: trajectories[i].gestation,
        });
    }

    let mut rng = rng::stream(seed, &[ERRORS]);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let t = &mut truth[i];
        let delta_star = misclassify(t.delta, e.event_sensitivity, e.event_specificity, &mut rng);
        let mut y_star = t.y;
        if e.time_error_rate > 0.0 && rng.random::<f64>() < e.time_error_rate {
            y_star = (y_star + e.time_error_sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.05, o.follow_up_max);
        }
        let mut x_star = exposures[i].1;
        if t.delta {
            x_star += e.exposure_event_shift;
        }
        if e.exposure_noise_sd > 0.0 {
            x_star += e.exposure_noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let mut z_star = t.z.clone();
        if e.bmi_error_sd > 0.0 {
            z_star[0] += e.bmi_error_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let mut r = DyadRecord::phase1(trajectories[i].observed.subject.clone(), y_star, delta_star, x_star, z_star);
        if frame[i] {
            r.in_asthma_frame = true;
            r.asthma_star = Some(misclassify(asthma_truth[i], e.asthma_sensitivity, e.asthma_specificity, &mut rng));
            t.asthma = Some(asthma_truth[i]);
        }
        records.push(r);
    }
    Ok(Population { config: config.clone(), records, truth, trajectories, eigensystem: eig })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_functions_are_orthonormal() {
        let grid = Grid { lo: DOMAIN.0, hi: DOMAIN.1, size: 2001 };
        let w = grid.trapezoid();
        let pts = grid.points();
        for a in 0..4 {
            for b in 0..4 {
                let ip: f64 = pts.iter().zip(&w).map(|(t, w)| w * legendre(a, *t) * legendre(b, *t)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-5, "{a} {b} {ip}");
            }
        }
    }

    #[test]
    fn trajectories_are_reproducible_and_valid() {
        let c = SimConfig::default();
        let a = trajectory(&c.trajectory, &c.gestation, &c.errors, 5, 17);
        let b = trajectory(&c.trajectory, &c.gestation, &c.errors, 5, 17);
        assert_eq!(a, b);
        a.observed.check().unwrap();
        assert!((c.gestation.min_days..=ASSUMED_GESTATION).contains(&a.gestation));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = SimConfig::default();
        c.errors.event_sensitivity = 1.2;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.trajectory.eigenvalues = vec![1.0, 2.0];
        assert!(c.validate().is_err());
    }
}
