//! Agreement between surrogate-generated KPIs and reference samples taken
//! from the detailed simulator or from an external packet log.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellsim::{run_cell, CellConditions};
use crate::distfit::{sample_kpi, Family, Kpi};
use crate::error::{Error, Result};
use crate::orchestrator::{log_samples, PacketLogRecord};
use crate::seed::Seed;
use crate::stats;
use crate::surrogate::SurrogateSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub ks: f64,
    pub mean: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { ks: 0.05, mean: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationCase {
    pub name: String,
    pub conditions: CellConditions,
    /// Measured packets replacing the simulator run, in packet-log form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<Vec<PacketLogRecord>>,
}

/// How reference samples are produced when a case has no external log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRun {
    pub duration_s: f64,
    #[serde(default = "one")]
    pub replications: u32,
    pub seed: u64,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub case: String,
    pub kpi: Kpi,
    pub ks_distance: Option<f64>,
    /// Relative error of the mean; absolute for drop probability.
    pub mean_error: Option<f64>,
    pub reference_samples: usize,
    pub surrogate_samples: usize,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub metric: String,
    pub tolerances: Tolerances,
    pub global_pass: bool,
    pub entries: Vec<ValidationEntry>,
}

pub const VALIDATION_METRIC: &str = "two-sample KS distance and error of the mean";

pub const VALIDATION_CSV_HEADER: &str =
    "case,kpi,ks_distance,mean_error,reference_samples,surrogate_samples,pass,error";

impl ValidationReport {
    pub fn new(entries: Vec<ValidationEntry>, tolerances: Tolerances) -> Self {
        ValidationReport {
            metric: VALIDATION_METRIC.to_string(),
            tolerances,
            global_pass: entries.iter().all(|e| e.pass),
            entries,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Structure(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("line {}", e.line()), e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(VALIDATION_CSV_HEADER);
        s.push('\n');
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            let err = e.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.case,
                e.kpi,
                o(e.ks_distance),
                o(e.mean_error),
                e.reference_samples,
                e.surrogate_samples,
                e.pass,
                err
            );
        }
        s
    }
}

/// Compares two KPI samples under the given tolerances.
pub fn compare_samples(
    case: &str,
    kpi: Kpi,
    family: Family,
    reference: &[f64],
    surrogate: &[f64],
    tol: Tolerances,
) -> ValidationEntry {
    let mut entry = ValidationEntry {
        case: case.to_string(),
        kpi,
        ks_distance: None,
        mean_error: None,
        reference_samples: reference.len(),
        surrogate_samples: surrogate.len(),
        pass: false,
        error: None,
    };
    if reference.is_empty() || surrogate.is_empty() {
        entry.error = Some("no samples to compare".into());
        return entry;
    }
    let ks = stats::ks_two_sample(reference, surrogate);
    let (mr, ms) = (stats::mean(reference), stats::mean(surrogate));
    let err = if family == Family::Bernoulli {
        (ms - mr).abs()
    } else if mr == ms {
        0.0
    } else {
        (ms - mr).abs() / mr.abs()
    };
    entry.ks_distance = Some(ks);
    entry.mean_error = Some(err);
    entry.pass = ks < tol.ks && err < tol.mean;
    entry
}

fn failed(case: &str, kpi: Kpi, e: &Error) -> ValidationEntry {
    ValidationEntry {
        case: case.to_string(),
        kpi,
        ks_distance: None,
        mean_error: None,
        reference_samples: 0,
        surrogate_samples: 0,
        pass: false,
        error: Some(e.to_string()),
    }
}

fn validate_case(
    index: usize,
    case: &ValidationCase,
    models: &SurrogateSet,
    reference: &ReferenceRun,
    n_samples: usize,
    tol: Tolerances,
) -> Vec<ValidationEntry> {
    let log: Result<Vec<PacketLogRecord>> = match &case.external {
        Some(log) => Ok(log.clone()),
        None => (0..reference.replications)
            .map(|rep| {
                let seed = Seed::new(reference.seed).child_label("reference").child(index as u64).child(u64::from(rep));
                run_cell(&case.conditions, reference.duration_s, seed.value())
            })
            .collect::<Result<Vec<_>>>()
            .map(|runs| {
                runs.into_iter()
                    .flatten()
                    .map(|r| PacketLogRecord {
                        cell_id: 0,
                        entity_id: r.device_id.to_string(),
                        profile: r.profile,
                        timestamp_s: r.created_at_s,
                        delay_ms: r.delay_ms,
                        dropped: r.dropped,
                        throughput_bps: r.throughput_bps,
                    })
                    .collect()
            }),
    };
    let log = match log {
        Ok(l) => l,
        Err(e) => return Kpi::ALL.iter().map(|&k| failed(&case.name, k, &e)).collect(),
    };
    let mut out = Vec::new();
    for (ki, kpi) in Kpi::ALL.into_iter().enumerate() {
        let model = match models.get(kpi) {
            Some(m) => m,
            None => {
                out.push(failed(&case.name, kpi, &Error::Config(format!("no surrogate for {kpi}"))));
                continue;
            }
        };
        let pred = match model.predict(&case.conditions) {
            Ok(p) => p,
            Err(e) => {
                out.push(failed(&case.name, kpi, &e));
                continue;
            }
        };
        let mut rng = Seed::new(reference.seed).child_label("surrogate").child(index as u64).child(ki as u64).rng();
        let sur: Vec<f64> = (0..n_samples).map(|_| sample_kpi(&pred.dist, &mut rng)).collect();
        out.push(compare_samples(&case.name, kpi, model.family, &log_samples(kpi, &log), &sur, tol));
    }
    out
}

/// Validates the surrogate set against reference samples for every case.
/// A case that fails to simulate or predict yields failing entries carrying
/// the error; the rest of the batch still runs.
pub fn cross_validate(
    cases: &[ValidationCase],
    models: &SurrogateSet,
    reference: &ReferenceRun,
    n_samples: usize,
    tol: Tolerances,
) -> ValidationReport {
    let entries: Vec<ValidationEntry> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| validate_case(i, c, models, reference, n_samples, tol))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    ValidationReport::new(entries, tol)
}
