//! Experiment orchestration: configs, the round loop, theory checks,
//! aggregation and output files.

mod config;
mod invariants;
mod report;
mod trial;

use std::path::Path;

use rayon::prelude::*;

pub use config::{Algo, EnvSpec, ExperimentConfig, ScheduleKind, ScheduleSpec, TransportKind};
pub use invariants::{CheckStats, InvariantReport, ORACLE_RTOL, PSD_TOL};
pub use report::{
    aggregate_curves, aggregate_trials, group_by_trial, read_rounds_csv, write_csv, write_json,
    AggregateReport, CurvePoint, RunSummary, Stat,
};
pub use trial::{communication_bound, resolve_config, run_trial, RoundRecord, TrialOutput, TrialSummary};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialOutput>,
    pub aggregate: AggregateReport,
    /// Merged over trials, theory mode only.
    pub invariants: Option<InvariantReport>,
}

impl ExperimentOutput {
    pub fn records(&self) -> impl Iterator<Item = &RoundRecord> {
        self.trials.iter().flat_map(|t| t.records.iter())
    }

    pub fn curves(&self) -> Result<Vec<CurvePoint>> {
        let runs: Vec<Vec<RoundRecord>> = self.trials.iter().map(|t| t.records.clone()).collect();
        aggregate_curves(&runs)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            config: self.config.clone(),
            aggregate: self.aggregate.clone(),
            trials: self.trials.iter().map(|t| t.summary.clone()).collect(),
            invariants: self.invariants.clone(),
            notes: conventions(&self.config),
        }
    }

    /// Writes `rounds.csv`, `curves.csv` and `summary.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_csv(dir.join("rounds.csv"), self.records())?;
        write_csv(dir.join("curves.csv"), self.curves()?.iter())?;
        write_json(dir.join("summary.json"), &self.summary())
    }
}

fn conventions(config: &ExperimentConfig) -> Vec<String> {
    let mut notes = vec![
        "total_scalars counts both directions: FSCLB 2ld+2d+l+3 per communication, FedLinUCB 2d^2+d+1".into(),
        "compact_scalars counts FedLinUCB at d^2+d per communication".into(),
    ];
    if config.algo == Algo::Fedlinucb {
        notes.push("FedLinUCB uses the FSCLB confidence radius with zero truncation mass".into());
    }
    if matches!(config.env, EnvSpec::Dataset { .. }) {
        notes.push("dataset bandit: one-vs-rest on the most frequent class, reward 1 for a target-class row".into());
    }
    notes
}

/// Runs every trial (in parallel) and aggregates them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (resolved, _) = resolve_config(config)?;
    let trials: Vec<TrialOutput> = (0..config.trials)
        .into_par_iter()
        .map(|i| run_trial(config, i))
        .collect::<Result<_>>()?;
    let summaries: Vec<TrialSummary> = trials.iter().map(|t| t.summary.clone()).collect();
    let aggregate = aggregate_trials(&summaries)?;
    let invariants = trials
        .iter()
        .filter_map(|t| t.invariants.as_ref())
        .fold(None, |acc: Option<InvariantReport>, r| {
            let mut acc = acc.unwrap_or_default();
            acc.merge(r);
            Some(acc)
        });
    Ok(ExperimentOutput {
        config: resolved,
        trials,
        aggregate,
        invariants,
    })
}

pub const SUITE_MAX_D: usize = 32;
pub const SUITE_MAX_T: u64 = 5000;

/// Runs FSCLB with every theory check enabled and returns the merged report.
pub fn invariant_suite(config: &ExperimentConfig) -> Result<InvariantReport> {
    let config = ExperimentConfig {
        algo: Algo::Fsclb,
        theory: true,
        ..config.clone()
    };
    let (resolved, _) = resolve_config(&config)?;
    if resolved.d > SUITE_MAX_D || resolved.horizon > SUITE_MAX_T {
        return Err(Error::Config(format!(
            "invariant suite runs at desk scale (d <= {SUITE_MAX_D}, T <= {SUITE_MAX_T})"
        )));
    }
    Ok(run_experiment(&config)?.invariants.unwrap_or_default())
}
