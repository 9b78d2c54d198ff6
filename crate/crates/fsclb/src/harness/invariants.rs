//! Theory-mode checks run at every communication, collected into a report
//! with the worst residual per inequality.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::spectral::{psd_margin, DenseMatrix};

/// Tolerance on PSD margins, relative to `1 + ‖A‖₂`.
pub const PSD_TOL: f64 = 1e-7;
/// Relative tolerance on the dense-vs-structured oracles.
pub const ORACLE_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckStats {
    pub evaluations: u64,
    pub violations: u64,
    /// Largest normalized residual seen; positive means the inequality failed
    /// by that much, values ≤ 0 are slack.
    pub worst_residual: f64,
    /// Round of the worst residual.
    pub worst_round: u64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: BTreeMap<String, CheckStats>,
}

impl InvariantReport {
    /// Records one evaluation of `name`. `residual` is normalized so that the
    /// inequality holds iff `residual <= tolerance`.
    pub fn record(&mut self, name: &str, round: u64, residual: f64, tolerance: f64) {
        let entry = self.checks.entry(name.to_string()).or_insert(CheckStats {
            worst_residual: f64::NEG_INFINITY,
            tolerance,
            ..Default::default()
        });
        entry.evaluations += 1;
        // NaN counts as a violation
        if !(residual <= tolerance) {
            entry.violations += 1;
        }
        if !(residual <= entry.worst_residual) {
            entry.worst_residual = residual;
            entry.worst_round = round;
        }
    }

    /// `A ⪰ B` with residual `−λ_min(A − B) / (1 + ‖A‖₂)`.
    pub fn record_psd(&mut self, name: &str, round: u64, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
        let (min_eig, norm_a) = psd_margin(a, b)?;
        self.record(name, round, -min_eig / (1.0 + norm_a), PSD_TOL);
        Ok(())
    }

    /// `‖got − want‖ / max(‖want‖, 1)` against [`ORACLE_RTOL`].
    pub fn record_close(&mut self, name: &str, round: u64, got: &[f64], want: &[f64]) {
        let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt().max(1.0);
        self.record(name, round, diff / scale, ORACLE_RTOL);
    }

    pub fn merge(&mut self, other: &InvariantReport) {
        for (name, s) in &other.checks {
            let entry = self.checks.entry(name.clone()).or_insert(CheckStats {
                worst_residual: f64::NEG_INFINITY,
                tolerance: s.tolerance,
                ..Default::default()
            });
            entry.evaluations += s.evaluations;
            entry.violations += s.violations;
            if !(s.worst_residual <= entry.worst_residual) {
                entry.worst_residual = s.worst_residual;
                entry.worst_round = s.worst_round;
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.values().all(|c| c.violations == 0)
    }

    pub fn get(&self, name: &str) -> Option<&CheckStats> {
        self.checks.get(name)
    }

    pub fn failures(&self) -> Vec<(&str, &CheckStats)> {
        self.checks
            .iter()
            .filter(|(_, c)| c.violations > 0)
            .map(|(n, c)| (n.as_str(), c))
            .collect()
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in &self.checks {
            writeln!(
                f,
                "{} {name}: {} evaluations, {} violations, worst residual {:.3e} (round {}, tol {:.0e})",
                if c.violations == 0 { "PASS" } else { "FAIL" },
                c.evaluations,
                c.violations,
                c.worst_residual,
                c.worst_round,
                c.tolerance
            )?;
        }
        Ok(())
    }
}
