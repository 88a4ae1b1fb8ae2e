//! Per-TTI violation accounting and reports.
//!
//! A UE violates its throughput target in a TTI when it is served strictly
//! less than `B · min(queue before service, mean high-action capacity at the
//! current CQI)`, and violates its regularity target when TSLS after the step
//! is strictly greater than `L`. Fractions are per-TTI indicators averaged
//! over the horizon.
//!
//! CSV export columns, in order:
//!
//! ```text
//! ue_id,class,samples,mean_tpt_mbps,tpt_violation_frac,tsls_violation_frac,max_tsls,tpt_violations,tsls_violations
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ServiceClass, StepOutcome, BYTES_PER_TTI_PER_MBPS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("cannot merge reports: {0}")]
    Mismatch(String),
    #[error("UE {ue} is not registered")]
    UnknownUe { ue: usize },
}

/// Throughput-target test for one TTI.
pub fn tpt_violated(served_bytes: u64, target_bytes: f64) -> bool {
    (served_bytes as f64) < target_bytes
}

/// `B · min(queue before service, high-action mean capacity)`.
pub fn tpt_target(outcome: &StepOutcome, b: f64, high_mean_bytes: f64) -> f64 {
    b * (outcome.buffer_before as f64).min(high_mean_bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeReport {
    pub ue_id: usize,
    pub class: ServiceClass,
    pub samples: u64,
    pub served_bytes: u64,
    pub tpt_violations: u64,
    pub tsls_violations: u64,
    pub max_tsls: u32,
    pub mean_tpt_mbps: f64,
    pub tpt_violation_frac: f64,
    pub tsls_violation_frac: f64,
}

impl UeReport {
    fn empty(ue_id: usize, class: ServiceClass) -> Self {
        Self {
            ue_id,
            class,
            samples: 0,
            served_bytes: 0,
            tpt_violations: 0,
            tsls_violations: 0,
            max_tsls: 0,
            mean_tpt_mbps: 0.0,
            tpt_violation_frac: 0.0,
            tsls_violation_frac: 0.0,
        }
    }

    /// Recomputes the derived means from the integer counters.
    fn refresh(&mut self) {
        if self.samples == 0 {
            self.mean_tpt_mbps = 0.0;
            self.tpt_violation_frac = 0.0;
            self.tsls_violation_frac = 0.0;
            return;
        }
        let n = self.samples as f64;
        self.mean_tpt_mbps = self.served_bytes as f64 / n / BYTES_PER_TTI_PER_MBPS;
        self.tpt_violation_frac = self.tpt_violations as f64 / n;
        self.tsls_violation_frac = self.tsls_violations as f64 / n;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ServiceClass,
    pub ues: usize,
    pub mean_tpt_mbps: f64,
    pub tpt_violation_frac: f64,
    pub tsls_violation_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub policy: String,
    pub seeds: Vec<u64>,
    pub horizon: u64,
    pub ues: Vec<UeReport>,
    pub classes: Vec<ClassReport>,
}

impl MetricsReport {
    /// Sum over UEs of throughput and TSLS violation fractions.
    pub fn summed_violation_frac(&self) -> f64 {
        self.ues
            .iter()
            .map(|u| u.tpt_violation_frac + u.tsls_violation_frac)
            .sum()
    }

    pub fn total_samples(&self) -> u64 {
        self.ues.iter().map(|u| u.samples).sum()
    }

    fn refresh(&mut self) {
        self.ues.iter_mut().for_each(UeReport::refresh);
        let mut classes: Vec<ServiceClass> = self.ues.iter().map(|u| u.class).collect();
        classes.sort();
        classes.dedup();
        self.classes = classes
            .into_iter()
            .map(|class| {
                let members: Vec<&UeReport> = self.ues.iter().filter(|u| u.class == class).collect();
                let n = members.len() as f64;
                let mean = |f: fn(&UeReport) -> f64| members.iter().map(|u| f(u)).sum::<f64>() / n;
                ClassReport {
                    class,
                    ues: members.len(),
                    mean_tpt_mbps: mean(|u| u.mean_tpt_mbps),
                    tpt_violation_frac: mean(|u| u.tpt_violation_frac),
                    tsls_violation_frac: mean(|u| u.tsls_violation_frac),
                }
            })
            .collect();
    }

    /// Combines reports of the same UE set over disjoint runs.
    pub fn merge(&self, other: &MetricsReport) -> Result<MetricsReport, MetricsError> {
        if self.policy != other.policy {
            return Err(MetricsError::Mismatch(format!(
                "policy `{}` vs `{}`",
                self.policy, other.policy
            )));
        }
        let same_ues = self.ues.len() == other.ues.len()
            && self
                .ues
                .iter()
                .zip(&other.ues)
                .all(|(a, b)| a.ue_id == b.ue_id && a.class == b.class);
        if !same_ues {
            return Err(MetricsError::Mismatch("different UE sets".into()));
        }
        let mut out = self.clone();
        out.seeds.extend_from_slice(&other.seeds);
        out.horizon += other.horizon;
        for (a, b) in out.ues.iter_mut().zip(&other.ues) {
            a.samples += b.samples;
            a.served_bytes += b.served_bytes;
            a.tpt_violations += b.tpt_violations;
            a.tsls_violations += b.tsls_violations;
            a.max_tsls = a.max_tsls.max(b.max_tsls);
        }
        out.refresh();
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "ue_id",
            "class",
            "samples",
            "mean_tpt_mbps",
            "tpt_violation_frac",
            "tsls_violation_frac",
            "max_tsls",
            "tpt_violations",
            "tsls_violations",
        ])?;
        for u in &self.ues {
            w.write_record([
                u.ue_id.to_string(),
                u.class.to_string(),
                u.samples.to_string(),
                u.mean_tpt_mbps.to_string(),
                u.tpt_violation_frac.to_string(),
                u.tsls_violation_frac.to_string(),
                u.max_tsls.to_string(),
                u.tpt_violations.to_string(),
                u.tsls_violations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn export(&self, path: &Path, format: ExportFormat) -> Result<(), MetricsError> {
        let p = path.display().to_string();
        let io = |source| MetricsError::Io {
            path: p.clone(),
            source,
        };
        match format {
            ExportFormat::Json => std::fs::write(path, self.to_json() + "\n").map_err(io),
            ExportFormat::Csv => {
                let file = std::fs::File::create(path).map_err(io)?;
                self.write_csv(file).map_err(|e| MetricsError::Format {
                    path: p.clone(),
                    message: e.to_string(),
                })
            }
        }
    }

    pub fn import(path: &Path) -> Result<Self, MetricsError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: p.clone(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| MetricsError::Format {
            path: p,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Csv,
}

impl ExportFormat {
    /// `.csv` selects CSV, anything else the structured JSON report.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Json,
        }
    }
}

/// Accumulates per-UE counters for one scenario run.
#[derive(Debug, Clone)]
pub struct Recorder {
    policy: String,
    seed: u64,
    horizon: u64,
    ues: Vec<UeReport>,
}

impl Recorder {
    pub fn new(policy: impl Into<String>, seed: u64, horizon: u64, classes: &[ServiceClass]) -> Self {
        Self {
            policy: policy.into(),
            seed,
            horizon,
            ues: classes
                .iter()
                .enumerate()
                .map(|(i, &c)| UeReport::empty(i, c))
                .collect(),
        }
    }

    /// Counts one (UE, TTI) sample.
    pub fn record(
        &mut self,
        tti: u64,
        ue_id: usize,
        served_bytes: u64,
        tpt_target_bytes: f64,
        tsls: u32,
        tsls_bound: u32,
    ) -> Result<(), MetricsError> {
        debug_assert!(tti < self.horizon, "tti {tti} outside horizon {}", self.horizon);
        let u = self
            .ues
            .get_mut(ue_id)
            .ok_or(MetricsError::UnknownUe { ue: ue_id })?;
        u.samples += 1;
        u.served_bytes += served_bytes;
        u.tpt_violations += u64::from(tpt_violated(served_bytes, tpt_target_bytes));
        u.tsls_violations += u64::from(tsls > tsls_bound);
        u.max_tsls = u.max_tsls.max(tsls);
        Ok(())
    }

    pub fn finalize(self) -> MetricsReport {
        let mut report = MetricsReport {
            schema_version: SCHEMA_VERSION,
            policy: self.policy,
            seeds: vec![self.seed],
            horizon: self.horizon,
            ues: self.ues,
            classes: Vec::new(),
        };
        report.refresh();
        report
    }
}
