//! Hansen-Hurwitz combination of the obesity frame and the asthma sub-frame.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DesignLedger, DyadRecord, Frame, LedgerError};

#[derive(Debug, Error)]
pub enum MultiframeError {
    #[error("record {record}: sampling probability missing for the {frame} frame")]
    MissingProbability { record: String, frame: Frame },
    #[error("record {record}: sampling probability {value} in the {frame} frame is outside its allowed range")]
    InvalidProbability { record: String, frame: Frame, value: f64 },
    #[error("record {record} was drawn in the asthma frame but is not a member of it")]
    NotInFrame { record: String },
    #[error("record {record}: expected weight {value} differs from 1")]
    IdentityViolation { record: String, value: f64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// One record's position in both frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMember {
    pub id: String,
    pub pi_obesity: f64,
    /// Present exactly for asthma-frame members. May be 0 when the record's
    /// asthma stratum received no draws.
    pub pi_asthma: Option<f64>,
    pub sampled_obesity: bool,
    pub sampled_asthma: bool,
    pub stratum_obesity: String,
    pub stratum_asthma: Option<String>,
}

impl FrameMember {
    /// `φ = π_O / (π_O + π_A)`; 1 for single-frame members.
    pub fn phi(&self) -> f64 {
        match self.pi_asthma {
            Some(pa) => self.pi_obesity / (self.pi_obesity + pa),
            None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub record: String,
    pub frame: Frame,
    pub weight: f64,
    pub stratum: String,
    pub cluster: String,
    /// The record also contributes a row from the other frame.
    pub duplicated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameWeights {
    pub rows: Vec<WeightRow>,
}

impl FrameWeights {
    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.weight).collect()
    }

    pub fn duplicated_records(&self) -> usize {
        self.rows.iter().filter(|r| r.duplicated && r.frame == Frame::Obesity).count()
    }
}

fn check_pi(m: &FrameMember, frame: Frame, value: f64, drawn: bool) -> Result<(), MultiframeError> {
    let ok = if drawn { value > 0.0 && value <= 1.0 } else { (0.0..=1.0).contains(&value) };
    if ok {
        Ok(())
    } else {
        Err(MultiframeError::InvalidProbability { record: m.id.clone(), frame, value })
    }
}

/// Builds analysis rows for every record drawn in either frame.
///
/// Single-frame records get `1/π_O`. A dual-frame record drawn in the obesity
/// frame gets a row weighted `φ/π_O`; drawn in the asthma frame, a row
/// weighted `(1 − φ)/π_A`; drawn in both, both rows.
pub fn combine_frames(members: &[FrameMember]) -> Result<FrameWeights, MultiframeError> {
    let mut rows = Vec::new();
    for m in members {
        check_pi(m, Frame::Obesity, m.pi_obesity, m.sampled_obesity)?;
        let pa = match (m.pi_asthma, m.sampled_asthma) {
            (None, true) => return Err(MultiframeError::NotInFrame { record: m.id.clone() }),
            (None, false) => None,
            (Some(pa), drawn) => {
                check_pi(m, Frame::Asthma, pa, drawn)?;
                if m.pi_obesity + pa <= 0.0 {
                    return Err(MultiframeError::InvalidProbability { record: m.id.clone(), frame: Frame::Asthma, value: pa });
                }
                Some(pa)
            }
        };
        let phi = m.phi();
        if let Some(pa) = pa {
            // π_O·(φ/π_O) + π_A·((1−φ)/π_A), skipping frames with π = 0.
            let mut e = 0.0;
            if m.pi_obesity > 0.0 {
                e += m.pi_obesity * (phi / m.pi_obesity);
            }
            if pa > 0.0 {
                e += pa * ((1.0 - phi) / pa);
            }
            if (e - 1.0).abs() > 4.0 * f64::EPSILON {
                return Err(MultiframeError::IdentityViolation { record: m.id.clone(), value: e });
            }
        }
        let both = m.sampled_obesity && m.sampled_asthma;
        if m.sampled_obesity {
            rows.push(WeightRow {
                record: m.id.clone(),
                frame: Frame::Obesity,
                weight: phi / m.pi_obesity,
                stratum: m.stratum_obesity.clone(),
                cluster: m.id.clone(),
                duplicated: both,
            });
        }
        if m.sampled_asthma {
            let pa = pa.expect("checked above");
            rows.push(WeightRow {
                record: m.id.clone(),
                frame: Frame::Asthma,
                weight: (1.0 - phi) / pa,
                stratum: m.stratum_asthma.clone().ok_or(MultiframeError::MissingProbability {
                    record: m.id.clone(),
                    frame: Frame::Asthma,
                })?,
                cluster: m.id.clone(),
                duplicated: both,
            });
        }
    }
    Ok(FrameWeights { rows })
}

/// Stratum and cluster label per row; rows of the same record share a cluster.
pub fn multiframe_variance_groups(w: &FrameWeights) -> (Vec<String>, Vec<String>) {
    (w.rows.iter().map(|r| r.stratum.clone()).collect(), w.rows.iter().map(|r| r.cluster.clone()).collect())
}

/// `n_s / N_s` for every leaf, zero for leaves without draws.
fn leaf_fractions(ledger: &DesignLedger) -> BTreeMap<String, f64> {
    ledger
        .leaves()
        .map(|s| {
            let f = if s.population == 0 { 0.0 } else { s.total_sampled() as f64 / s.population as f64 };
            (s.id.clone(), f)
        })
        .collect()
}

/// Frame positions of every record from the two ledgers.
pub fn members_from_ledgers(
    records: &[DyadRecord],
    obesity: &DesignLedger,
    asthma: &DesignLedger,
) -> Result<Vec<FrameMember>, MultiframeError> {
    let fo = leaf_fractions(obesity);
    let fa = leaf_fractions(asthma);
    let ao = obesity.assign_strata(records)?;
    let aa = asthma.assign_strata(records)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let so = ao[&r.id].clone();
        let sa = aa.get(&r.id).cloned();
        out.push(FrameMember {
            id: r.id.clone(),
            pi_obesity: fo[&so],
            pi_asthma: sa.as_ref().map(|s| fa[s]),
            sampled_obesity: obesity.is_sampled(&r.id),
            sampled_asthma: asthma.is_sampled(&r.id),
            stratum_obesity: so,
            stratum_asthma: sa,
        });
    }
    Ok(out)
}
