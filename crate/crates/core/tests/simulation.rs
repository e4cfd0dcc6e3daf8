//! Generator calibration and end-to-end behaviour of the estimators on
//! synthetic populations with known truth.

use std::collections::HashMap;

use wavecal::datamodel::Frame;
use wavecal::simulator::experiment::{run_design, run_prepared, Prepared};
use wavecal::simulator::{generate, run_experiment, DesignSpec, SimConfig};
use wavecal::workflow::{census_fit, estimate, mi_target_influence, target_index, EstimateOptions, Estimator};

fn within(value: f64, expected: f64, se: f64, k: f64) -> bool {
    (value - expected).abs() <= k * se
}

#[test]
fn error_free_phase1_equals_truth() {
    let pop = generate(&SimConfig::error_free(1500, 3)).unwrap();
    for (r, t) in pop.records.iter().zip(&pop.truth) {
        assert_eq!(r.y_star, t.y);
        assert_eq!(r.delta_star, t.delta);
        assert_eq!(r.x_star, t.x);
        assert_eq!(r.z_star, t.z);
        assert_eq!(r.asthma_star, t.asthma);
    }
}

#[test]
fn default_error_rates_and_frame_share() {
    let pop = generate(&SimConfig { population: 10_335, seed: 1, ..SimConfig::default() }).unwrap();
    let n = pop.records.len() as f64;
    let binom = |p: f64, n: f64| (p * (1.0 - p) / n).sqrt();

    let event = pop.records.iter().zip(&pop.truth).filter(|(r, t)| r.delta_star != t.delta).count() as f64 / n;
    assert!(within(event, 0.006, binom(0.006, n), 3.0), "event misclassification {event}");

    let frame: Vec<_> = pop.records.iter().zip(&pop.truth).filter(|(r, _)| r.in_asthma_frame).collect();
    let m = frame.len() as f64;
    let asthma = frame.iter().filter(|(r, t)| r.asthma_star != t.asthma).count() as f64 / m;
    assert!(within(asthma, 0.104, binom(0.104, m), 3.0), "asthma misclassification {asthma}");
    assert!(within(m / n, 0.68, binom(0.68, n), 3.0), "frame share {}", m / n);
}

#[test]
fn phase1_scale_mean_gain_is_about_twelve_kg() {
    let pop = generate(&SimConfig { population: 10_335, seed: 2, ..SimConfig::default() }).unwrap();
    let gain = pop.eigensystem.mean_change(0.0, 272.0);
    assert!((gain - 12.0).abs() < 1.0, "mean gain {gain}");
}

fn quick_design() -> DesignSpec {
    DesignSpec { imputations: 3, ..DesignSpec::default() }
}

#[test]
fn report_is_reproducible() {
    let config = SimConfig { population: 1500, seed: 8, ..SimConfig::default() };
    let a = run_experiment(&config, &quick_design(), 3).unwrap();
    let b = run_experiment(&config, &quick_design(), 3).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_table(), b.to_table());
}

#[test]
fn error_free_estimators_agree_with_census() {
    let pop = generate(&SimConfig::error_free(3000, 12)).unwrap();
    let prep = Prepared::new(pop, quick_design()).unwrap();
    let j = target_index(Frame::Obesity);
    assert!((prep.phase1_obesity.fit.coefficients[j] - prep.truth[j]).abs() < 1e-10);
    let report = run_prepared(&prep, 30).unwrap();
    for s in &report.summaries {
        assert_eq!(s.failures, 0, "{}", s.estimator);
        assert!(s.bias.abs() <= 3.0 * s.bias_mc_se + 1e-8, "{}: bias {} mc se {}", s.estimator, s.bias, s.bias_mc_se);
    }
}

#[test]
fn sandwich_se_tracks_monte_carlo_sd() {
    let config = SimConfig { population: 3000, seed: 21, ..SimConfig::default() };
    let report = run_experiment(&config, &DesignSpec { imputations: 2, ..DesignSpec::default() }, 500).unwrap();
    for e in [Estimator::IpwSingle, Estimator::IpwMulti, Estimator::RakingNaive] {
        let s = report.summary(e).unwrap();
        let ratio = s.sd / s.mean_se;
        assert!((ratio - 1.0).abs() < 0.15, "{}: sd {} vs mean se {}", e.name(), s.sd, s.mean_se);
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn imputed_influence_tracks_truth_better_than_phase1() {
    let mut config = SimConfig { population: 3000, seed: 5, ..SimConfig::default() };
    config.errors.exposure_noise_sd = 0.06;
    config.errors.event_sensitivity = 0.9;
    let pop = generate(&config).unwrap();
    let prep = Prepared::new(pop, quick_design()).unwrap();
    let run = run_design(&prep, 77).unwrap();

    let opts = EstimateOptions { imputations: 20, seed: 4, ..EstimateOptions::default() };
    let h_mi = mi_target_influence(&run.records, Frame::Obesity, Some(prep.exposure.clone()), &opts).unwrap();

    let mut revealed = prep.population.records.clone();
    let ids: Vec<String> = revealed.iter().map(|r| r.id.clone()).collect();
    prep.population.reveal(&mut revealed, &ids, 0);
    let census = census_fit(&revealed, Frame::Obesity).unwrap();
    let j = target_index(Frame::Obesity);
    let truth: Vec<f64> = census.influence.column(j).iter().copied().collect();

    let naive: HashMap<&str, f64> = prep.phase1_obesity.influence.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let h_star: Vec<f64> = run.records.iter().map(|r| naive[r.id.as_str()]).collect();
    let (c_mi, c_star) = (correlation(&h_mi, &truth), correlation(&h_star, &truth));
    assert!(c_mi > c_star, "corr imputed {c_mi} vs phase 1 {c_star}");
}

#[test]
fn full_influence_raking_stays_close_to_scalar() {
    let pop = generate(&SimConfig { population: 2500, seed: 13, ..SimConfig::default() }).unwrap();
    let prep = Prepared::new(pop, quick_design()).unwrap();
    let run = run_design(&prep, 3).unwrap();
    let fit = |full: bool| {
        let opts = EstimateOptions { full_influence: full, ..EstimateOptions::default() };
        let mut out = estimate(&run.records, &run.obesity, &run.asthma, Frame::Obesity, &prep.phase1_obesity, None, &[Estimator::RakingNaive], &opts);
        out.remove(0).1.unwrap()
    };
    let (scalar, full) = (fit(false), fit(true));
    assert!(full.se.iter().all(|s| s.is_finite() && *s > 0.0));
    assert!((full.coefficients[0] - scalar.coefficients[0]).abs() < scalar.se[0], "{:?} vs {:?}", full.coefficients, scalar.coefficients);
    assert_ne!(full.coefficients, scalar.coefficients);
}
