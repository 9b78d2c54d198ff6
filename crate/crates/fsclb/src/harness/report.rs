//! Multi-trial aggregation and the CSV/JSON writers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::invariants::InvariantReport;
use super::trial::{RoundRecord, TrialSummary};
use crate::error::{Error, Result};
use crate::protocol::CommLedger;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub trials: usize,
    pub metrics: BTreeMap<String, Stat>,
    /// Ledger summed over trials.
    pub ledger: CommLedger,
}

impl AggregateReport {
    pub fn mean(&self, metric: &str) -> f64 {
        self.metrics.get(metric).map_or(f64::NAN, |s| s.mean)
    }
}

/// Metric name and how to read it off a trial summary.
type Column = (&'static str, fn(&TrialSummary) -> f64);

fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    // transport and timing flags do not change the experiment
    let strip = |c: &ExperimentConfig| ExperimentConfig {
        transport: Default::default(),
        tcp_addr: None,
        record_timing: true,
        ..c.clone()
    };
    strip(a) == strip(b)
}

pub fn aggregate_trials(summaries: &[TrialSummary]) -> Result<AggregateReport> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if let Some(bad) = summaries.iter().find(|s| !same_experiment(&s.config, &first.config)) {
        return Err(Error::Config(format!(
            "trial {} was run with a different configuration",
            bad.trial
        )));
    }
    let columns: [Column; 10] = [
        ("cum_regret", |s| s.cum_regret),
        ("cum_reward", |s| s.cum_reward),
        ("switching_count", |s| s.ledger.switching_count as f64),
        ("total_scalars", |s| s.ledger.total_scalars() as f64),
        ("uploaded_scalars", |s| s.ledger.uploaded_scalars as f64),
        ("total_bytes", |s| s.ledger.total_bytes() as f64),
        ("compact_scalars", |s| s.ledger.compact_scalars as f64),
        ("median_trigger_eval_ns", |s| s.median_trigger_eval_ns),
        ("total_ns", |s| s.total_ns as f64),
        ("final_delta", |s| s.final_delta),
    ];
    let metrics = columns
        .iter()
        .map(|(name, f)| {
            let values: Vec<f64> = summaries.iter().map(f).collect();
            (name.to_string(), Stat::of(&values))
        })
        .collect();
    let mut ledger = CommLedger::default();
    for s in summaries {
        let l = &s.ledger;
        ledger.switching_count += l.switching_count;
        ledger.uploaded_scalars += l.uploaded_scalars;
        ledger.downloaded_scalars += l.downloaded_scalars;
        ledger.uploaded_bytes += l.uploaded_bytes;
        ledger.downloaded_bytes += l.downloaded_bytes;
        ledger.compact_scalars += l.compact_scalars;
    }
    Ok(AggregateReport {
        trials: summaries.len(),
        metrics,
        ledger,
    })
}

/// Pointwise mean over trials, one row per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: u64,
    pub cum_regret_mean: f64,
    pub cum_regret_std: f64,
    pub cum_reward_mean: f64,
    pub communications_mean: f64,
    pub scalars_mean: f64,
    pub elapsed_ns_mean: f64,
}

/// `trials[i]` holds trial `i`'s records in round order.
pub fn aggregate_curves(trials: &[Vec<RoundRecord>]) -> Result<Vec<CurvePoint>> {
    let horizon = trials.first().map_or(0, Vec::len);
    if trials.iter().any(|r| r.len() != horizon) {
        return Err(Error::Config("trials have different horizons".into()));
    }
    let n = trials.len();
    let mut running = vec![(0.0, 0.0, 0.0, 0.0); n];
    let mut out = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let mut regrets = Vec::with_capacity(n);
        for (acc, records) in running.iter_mut().zip(trials) {
            let r = &records[i];
            acc.0 += r.reward;
            acc.1 += f64::from(u8::from(r.comm_fired));
            acc.2 += (r.upload_scalars + r.download_scalars) as f64;
            acc.3 += r.round_ns as f64;
            regrets.push(r.cum_regret);
        }
        let stat = Stat::of(&regrets);
        let mean = |k: fn(&(f64, f64, f64, f64)) -> f64| running.iter().map(k).sum::<f64>() / n as f64;
        out.push(CurvePoint {
            t: trials[0][i].t,
            cum_regret_mean: stat.mean,
            cum_regret_std: stat.std,
            cum_reward_mean: mean(|a| a.0),
            communications_mean: mean(|a| a.1),
            scalars_mean: mean(|a| a.2),
            elapsed_ns_mean: mean(|a| a.3),
        });
    }
    Ok(out)
}

/// Splits a flat record list into per-trial runs, in trial order.
pub fn group_by_trial(records: Vec<RoundRecord>) -> Vec<Vec<RoundRecord>> {
    let mut by_trial: BTreeMap<usize, Vec<RoundRecord>> = BTreeMap::new();
    for r in records {
        by_trial.entry(r.trial).or_default().push(r);
    }
    by_trial.into_values().collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_csv<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rounds_csv(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub aggregate: AggregateReport,
    pub trials: Vec<TrialSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariants: Option<InvariantReport>,
    /// Conventions a reader needs to interpret the numbers.
    pub notes: Vec<String>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
