use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use wavecal::allocation::{draw_wave, WaveAllocation};
use wavecal::datamodel::{DesignLedger, DyadRecord, Frame, Phase2Values, SplitInstruction};
use wavecal::fpca::{fit_eigensystem, flag_outliers, pace_scores, weight_change, EigenSystem, FpcaOptions};
use wavecal::imputation::{DeriveFn, ValidatedRows};
use wavecal::io;
use wavecal::multiframe::{combine_frames, members_from_ledgers};
use wavecal::simulator::experiment::{default_asthma_strata, default_obesity_strata};
use wavecal::simulator::{generate, run_experiment, DesignSpec, SimConfig};
use wavecal::workflow::{
    apply_closures, coefficient_names, estimate, mi_target_influence, phase1_fit, plan_wave, sample_influence,
    stratify, EstimateOptions, Estimator, EstimatorOutput, StrataLevel,
};
use wavecal::{rng, Error, Result};

use crate::{AuxArg, Cli, Command, DesignCommand, EstimateArgs, FpcaCommand, FramesArg, Method, ReportArgs, SimulateArgs};

const DEFAULT_SEED: u64 = 1;

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => simulate(a, seed),
        Command::Fpca(c) => fpca(c),
        Command::Design(c) => design(c, seed.unwrap_or(DEFAULT_SEED)),
        Command::Estimate(a) => estimate_cmd(a, seed.unwrap_or(DEFAULT_SEED)),
        Command::Report(a) => report(a, seed),
    }
}

fn load_config(path: &Option<PathBuf>, population: Option<usize>, seed: Option<u64>) -> Result<SimConfig> {
    let mut c: SimConfig = match path {
        Some(p) => io::read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(n) = population {
        c.population = n;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn simulate(a: SimulateArgs, seed: Option<u64>) -> Result<()> {
    let config = load_config(&a.config, a.population, seed)?;
    info!("resolved simulation config: {}", serde_json::to_string(&config).unwrap_or_default());
    let pop = generate(&config)?;
    let mut truth = pop.records.clone();
    let ids: Vec<String> = truth.iter().map(|r| r.id.clone()).collect();
    pop.reveal(&mut truth, &ids, 0);
    io::write_dyads(&a.out.join("dyads.csv"), &pop.records)?;
    io::write_dyads(&a.out.join("truth.csv"), &truth)?;
    io::write_measurements(&a.out.join("measurements.csv"), &pop.series())?;
    io::write_json(&a.out.join("eigensystem.json"), &pop.eigensystem)?;
    io::write_json(&a.out.join("config.json"), &config)?;
    let events = pop.truth.iter().filter(|t| t.delta).count();
    println!(
        "simulated {} records ({} in the asthma frame, {} events) into {}",
        pop.records.len(),
        pop.records.iter().filter(|r| r.in_asthma_frame).count(),
        events,
        a.out.display()
    );
    Ok(())
}

fn fpca(c: FpcaCommand) -> Result<()> {
    match c {
        FpcaCommand::Fit { measurements, out, grid_size, fve } => {
            let series = io::read_measurements(&measurements)?;
            let mut opts = FpcaOptions::default();
            if let Some(g) = grid_size {
                opts.grid_size = g;
            }
            if let Some(f) = fve {
                opts.fve_threshold = f;
            }
            let eig = fit_eigensystem(&series, &opts)?;
            io::write_json(&out, &eig)?;
            println!(
                "{} components, eigenvalues {:?}, noise variance {:.4}",
                eig.k(),
                eig.eigenvalues,
                eig.noise_var
            );
        }
        FpcaCommand::Score { measurements, eigensystem, gestation, out } => {
            let series = io::read_measurements(&measurements)?;
            let eig: EigenSystem = io::read_json(&eigensystem)?;
            let mut text = String::from("subject_id");
            for k in 0..eig.k() {
                let _ = write!(text, ",xi{k}");
            }
            text.push_str(",observations,weekly_gain\n");
            for s in &series {
                let sc = pace_scores(s, &eig)?;
                let gain = weight_change(s, &eig, gestation)?;
                text.push_str(&s.subject);
                for v in &sc.xi {
                    let _ = write!(text, ",{v}");
                }
                let _ = writeln!(text, ",{},{gain}", sc.observations);
            }
            io::write_text(&out, &text)?;
        }
        FpcaCommand::Flag { measurements, eigensystem, level, out } => {
            let series = io::read_measurements(&measurements)?;
            let eig: EigenSystem = io::read_json(&eigensystem)?;
            let mut text = String::from("subject_id,t_days,weight_kg\n");
            let mut count = 0;
            for s in &series {
                for i in flag_outliers(s, &eig, level)? {
                    let _ = writeln!(text, "{},{},{}", s.subject, s.times[i], s.values[i]);
                    count += 1;
                }
            }
            io::write_text(&out, &text)?;
            println!("{count} measurements flagged");
        }
    }
    Ok(())
}

/// Contents of `allocation.json`.
#[derive(Debug, Serialize, Deserialize)]
struct AllocationFile {
    frame: Frame,
    wave: u32,
    target: usize,
    influence: String,
    allocation: WaveAllocation,
}

fn read_ledger(path: &Path) -> Result<DesignLedger> {
    io::read_json(path)
}

fn design(c: DesignCommand, seed: u64) -> Result<()> {
    match c {
        DesignCommand::Init { dyads, frame, strata, unstratified, out } => {
            let records = io::read_dyads(&dyads)?;
            let frame: Frame = frame.into();
            let levels: Vec<StrataLevel> = match (&strata, unstratified) {
                (Some(p), _) => io::read_json(p)?,
                (None, true) => Vec::new(),
                (None, false) => match frame {
                    Frame::Obesity => default_obesity_strata(),
                    Frame::Asthma => default_asthma_strata(),
                },
            };
            let mut ledger = DesignLedger::new(frame, &records, seed);
            stratify(&mut ledger, &records, &levels)?;
            ledger.check(&records)?;
            io::write_json(&out, &ledger)?;
            println!("{} frame: {} records in {} strata", frame.tag(), ledger.frame_size(), ledger.leaves().count());
        }
        DesignCommand::Allocate { dyads, ledger: lpath, frame, target, wave, influence, min_per_stratum, out } => {
            let records = io::read_dyads(&dyads)?;
            let mut ledger = read_ledger(&lpath)?;
            if let Some(f) = frame {
                let f: Frame = f.into();
                if f != ledger.frame {
                    return Err(Error::Config(format!("ledger is for the {} frame, not {}", ledger.frame.tag(), f.tag())));
                }
            }
            if ledger.waves.contains(&wave) {
                return Err(Error::Config(format!("wave {wave} is already recorded in {}", lpath.display())));
            }
            let (h, source) = match influence {
                Some(p) => (io::read_values(&p, "h")?, format!("file:{}", p.display())),
                None if ledger.samples.is_empty() => (phase1_fit(&records, ledger.frame)?.influence, "phase1".to_string()),
                None => (sample_influence(&records, &ledger)?, "ipw".to_string()),
            };
            let alloc = plan_wave(&mut ledger, &records, &h, target, min_per_stratum)?;
            apply_closures(&mut ledger, &alloc)?;
            io::write_json(
                &out,
                &AllocationFile { frame: ledger.frame, wave, target, influence: source, allocation: alloc.clone() },
            )?;
            io::write_json(&lpath, &ledger)?;
            println!("wave {wave}: {} draws over {} strata", alloc.total(), alloc.ids.len());
            for ((id, n), closed) in alloc.ids.iter().zip(&alloc.draws).zip(&alloc.closed) {
                println!("  {id:<12} {n:>5}{}", if *closed { "  closed" } else { "" });
            }
        }
        DesignCommand::Split { dyads, ledger: lpath, stratum, axis, cuts } => {
            let records = io::read_dyads(&dyads)?;
            let mut ledger = read_ledger(&lpath)?;
            ledger.apply_splits(&records, &[SplitInstruction { stratum, axis: axis.into(), cuts }])?;
            io::write_json(&lpath, &ledger)?;
            println!("{} leaves", ledger.leaves().count());
        }
        DesignCommand::Close { ledger: lpath, stratum } => {
            let mut ledger = read_ledger(&lpath)?;
            ledger.close(&stratum)?;
            io::write_json(&lpath, &ledger)?;
        }
        DesignCommand::Draw { dyads, ledger: lpath, allocation, reveal, out } => {
            let mut records = io::read_dyads(&dyads)?;
            let mut ledger = read_ledger(&lpath)?;
            let plan: AllocationFile = io::read_json(&allocation)?;
            if plan.frame != ledger.frame {
                return Err(Error::Config("allocation and ledger are for different frames".into()));
            }
            let stream = rng::derive_seed(seed, &[rng::label(plan.frame.tag()), plan.wave as u64]);
            let draw = draw_wave(&mut ledger, &records, &plan.allocation.as_map(), plan.wave, stream)?;
            let mut text = String::from("wave,stratum,id,already_validated\n");
            for (leaf, ids) in &draw.by_stratum {
                for id in ids {
                    let _ = writeln!(text, "{},{leaf},{id},{}", plan.wave, u8::from(draw.overlap.contains(id)));
                }
            }
            io::write_text(&out, &text)?;
            if let Some(p) = reveal {
                let truth = io::read_dyads(&p)?;
                let ids: Vec<String> = draw.by_stratum.values().flatten().cloned().collect();
                reveal_from(&mut records, &truth, &ids, plan.wave)?;
                io::write_dyads(&dyads, &records)?;
            }
            io::write_json(&lpath, &ledger)?;
            println!("wave {}: drew {} records, {} already validated", plan.wave, draw.total(), draw.overlap.len());
        }
    }
    Ok(())
}

/// Copies validated values for `ids` from a fully validated table.
fn reveal_from(records: &mut [DyadRecord], truth: &[DyadRecord], ids: &[String], wave: u32) -> Result<()> {
    let index: HashMap<&str, &DyadRecord> = truth.iter().map(|r| (r.id.as_str(), r)).collect();
    let pos: HashMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
    for id in ids {
        let t = index.get(id.as_str()).ok_or_else(|| Error::Config(format!("record {id} missing from reveal table")))?;
        let (Some(y), Some(delta), Some(x), Some(z)) = (t.y, t.delta, t.x, t.z.clone()) else {
            return Err(Error::Config(format!("record {id} has no validated values in the reveal table")));
        };
        let values = Phase2Values {
            y,
            delta,
            x,
            z,
            asthma: t.asthma,
            gestation_days: t.gestation_days.unwrap_or(wavecal::fpca::ASSUMED_GESTATION),
        };
        records[pos[id]].mark_validated(wave, &values);
    }
    Ok(())
}

/// Exposure as a function of gestation, recomputed from each record's
/// weight history; records without a history keep their phase-1 value.
fn exposure_function(records: &[DyadRecord], measurements: &Path, eigensystem: &Path) -> Result<DeriveFn> {
    let series = io::read_measurements(measurements)?;
    let eig: EigenSystem = io::read_json(eigensystem)?;
    let by_id: HashMap<String, usize> = series.iter().enumerate().map(|(i, s)| (s.subject.clone(), i)).collect();
    let lookup: Vec<(Option<usize>, f64)> = records.iter().map(|r| (by_id.get(&r.id).copied(), r.x_star)).collect();
    let missing = lookup.iter().filter(|l| l.0.is_none()).count();
    if missing > 0 {
        warn!("{missing} records have no weight history; their exposure is not updated");
    }
    Ok(Arc::new(move |i: usize, g: f64| match lookup[i] {
        (Some(k), fallback) => weight_change(&series[k], &eig, g).unwrap_or(fallback),
        (None, fallback) => fallback,
    }))
}

fn selected(a: &EstimateArgs) -> Vec<Estimator> {
    match a.method {
        Method::All => Estimator::ALL.to_vec(),
        Method::Ipw => vec![
            Estimator::Phase1,
            if a.frame == FramesArg::Single { Estimator::IpwSingle } else { Estimator::IpwMulti },
        ],
        Method::Raking => {
            vec![Estimator::Phase1, if a.aux == AuxArg::Mi { Estimator::RakingMi } else { Estimator::RakingNaive }]
        }
    }
}

fn estimate_cmd(a: EstimateArgs, seed: u64) -> Result<()> {
    let records = io::read_dyads(&a.dyads)?;
    let obesity = read_ledger(&a.obesity_ledger)?;
    let asthma = match &a.asthma_ledger {
        Some(p) => read_ledger(p)?,
        None => DesignLedger::new(Frame::Asthma, &records, seed),
    };
    if obesity.frame != Frame::Obesity || asthma.frame != Frame::Asthma {
        return Err(Error::Config("ledger frames do not match --obesity-ledger / --asthma-ledger".into()));
    }
    let frame: Frame = a.analysis.into();
    let phase1 = phase1_fit(&records, frame)?;
    let exposure = match (&a.measurements, &a.eigensystem) {
        (Some(m), Some(e)) => Some(exposure_function(&records, m, e)?),
        _ => None,
    };
    let which = selected(&a);
    let mut opts = EstimateOptions {
        imputations: a.imputations,
        seed: rng::derive_seed(seed, &[rng::label("imputation")]),
        fpc: !a.no_fpc,
        min_validated: 30,
        validated_rows: if a.pass_through { ValidatedRows::PassThrough } else { ValidatedRows::Reimpute },
        mi_influence: None,
        full_influence: a.full_influence,
    };
    if let Some(p) = &a.mi_out {
        let h = mi_target_influence(&records, frame, exposure.clone(), &opts)?;
        let values: BTreeMap<String, f64> = records.iter().zip(&h).map(|(r, v)| (r.id.clone(), *v)).collect();
        io::write_values(p, "h", &values)?;
        opts.mi_influence = Some(h);
    }
    if let Some(p) = &a.weights_out {
        let members: Vec<_> = members_from_ledgers(&records, &obesity, &asthma)?
            .into_iter()
            .zip(&records)
            .filter(|(_, r)| frame.contains(r))
            .map(|(m, _)| m)
            .collect();
        io::write_weights(p, &combine_frames(&members)?)?;
    }
    let results = estimate(&records, &obesity, &asthma, frame, &phase1, exposure, &which, &opts);
    let names = coefficient_names(frame, records.first().map_or(0, |r| r.z_star.len()));
    let mut ok: Vec<EstimatorOutput> = Vec::new();
    let mut first_err = None;
    for (e, r) in results {
        match r {
            Ok(o) => ok.push(o),
            Err(err) => {
                warn!("{} failed: {err}", e.name());
                first_err.get_or_insert(err);
            }
        }
    }
    io::write_estimates(&a.out, &names, &ok)?;
    print!("{}", table(frame, &names, &ok));
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn table(frame: Frame, names: &[String], rows: &[EstimatorOutput]) -> String {
    let mut out = format!("{} analysis\n{:<10}", frame.tag(), "estimator");
    for n in names {
        let _ = write!(out, " {:>10} {:>8}", format!("beta_{n}"), "se");
    }
    out.push('\n');
    for o in rows {
        let _ = write!(out, "{:<10}", o.estimator.name());
        for j in 0..names.len() {
            let _ = write!(out, " {:>10.4} {:>8.4}", o.coefficients[j], o.se[j]);
        }
        out.push('\n');
    }
    out
}

fn report(a: ReportArgs, seed: Option<u64>) -> Result<()> {
    let config = load_config(&a.config, a.population, seed)?;
    let design: DesignSpec = match &a.design {
        Some(p) => io::read_json(p)?,
        None => DesignSpec::default(),
    };
    info!("resolved design: {}", serde_json::to_string(&design).unwrap_or_default());
    let r = run_experiment(&config, &design, a.replicates)?;
    io::write_text(&a.out.join("report.csv"), &r.to_csv())?;
    let text = r.to_table();
    io::write_text(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
