use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::BanditParams;
use crate::env::ScheduleMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Fsclb,
    #[serde(alias = "fedlin")]
    Fedlinucb,
    Random,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fsclb" => Ok(Algo::Fsclb),
            "fedlinucb" | "fedlin" => Ok(Algo::Fedlinucb),
            "random" => Ok(Algo::Random),
            other => Err(Error::Config(format!("unknown algo {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::Config(format!("unknown transport {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Synthetic {
        /// Dimension of the arm subspace; defaults to `d`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arm_rank: Option<usize>,
    },
    Dataset {
        path: PathBuf,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Synthetic { arm_rank: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Uniform,
    RoundRobin,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleKind,
    /// Block length for `mode = "block"`.
    pub block: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            mode: ScheduleKind::Uniform,
            block: 1,
        }
    }
}

impl ScheduleSpec {
    pub fn mode(&self) -> ScheduleMode {
        match self.mode {
            ScheduleKind::Uniform => ScheduleMode::Uniform,
            ScheduleKind::RoundRobin => ScheduleMode::RoundRobin,
            ScheduleKind::Block => ScheduleMode::Block(self.block),
        }
    }
}

/// One experiment. Every field has a default matching the synthetic setup
/// (d = 50, l = 20, M = 10, K = 10, α = 1, T = 20 000, 20 trials).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algo: Algo,
    /// Feature dimension. For dataset environments 0 means "take it from the file".
    pub d: usize,
    pub l: usize,
    #[serde(alias = "M")]
    pub m: usize,
    #[serde(alias = "K")]
    pub k: usize,
    #[serde(alias = "T")]
    pub horizon: u64,
    pub trials: usize,
    pub alpha: f64,
    pub lambda: f64,
    #[serde(alias = "R")]
    pub noise_r: f64,
    #[serde(alias = "S")]
    pub s_norm: f64,
    #[serde(alias = "L")]
    pub arm_bound: f64,
    pub delta_conf: f64,
    pub env: EnvSpec,
    pub schedule: ScheduleSpec,
    pub transport: TransportKind,
    /// Server address for `transport = "tcp"`; a loopback server is spawned
    /// per trial when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tcp_addr: Option<String>,
    pub theory: bool,
    pub seed: u64,
    /// When false, the timing columns are written as 0 so runs compare byte
    /// for byte.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Fsclb,
            d: 50,
            l: 20,
            m: 10,
            k: 10,
            horizon: 20_000,
            trials: 20,
            alpha: 1.0,
            lambda: 1.0,
            noise_r: 0.1,
            s_norm: 1.0,
            arm_bound: 1.0,
            delta_conf: 0.01,
            env: EnvSpec::default(),
            schedule: ScheduleSpec::default(),
            transport: TransportKind::Inproc,
            tcp_addr: None,
            theory: false,
            seed: 0,
            record_timing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arm_rank(&self) -> Option<usize> {
        match self.env {
            EnvSpec::Synthetic { arm_rank } => Some(arm_rank.unwrap_or(self.d)),
            EnvSpec::Dataset { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.m == 0 || self.k == 0 {
            return Err(Error::Config("M and K must be >= 1".into()));
        }
        if self.schedule.mode == ScheduleKind::Block && self.schedule.block == 0 {
            return Err(Error::Config("block length must be >= 1".into()));
        }
        if let EnvSpec::Synthetic { arm_rank } = self.env {
            if self.d == 0 {
                return Err(Error::Config("d must be >= 1".into()));
            }
            if let Some(r) = arm_rank {
                if r == 0 || r > self.d {
                    return Err(Error::Config(format!("arm_rank must be in 1..={}", self.d)));
                }
            }
        }
        if !(self.noise_r >= 0.0) || !(self.s_norm >= 0.0) || !(self.arm_bound > 0.0) {
            return Err(Error::Config("R, S must be >= 0 and L > 0".into()));
        }
        if self.d != 0 {
            self.validate_params()?;
        }
        Ok(())
    }

    /// The sketch size only constrains FSCLB.
    fn validate_params(&self) -> Result<()> {
        let params = self.params();
        match self.algo {
            Algo::Fsclb => params.validate(),
            Algo::Fedlinucb | Algo::Random => BanditParams {
                l: 1,
                d: params.d.max(2),
                ..params
            }
            .validate(),
        }
    }

    pub fn params(&self) -> BanditParams {
        BanditParams {
            d: self.d,
            l: self.l,
            m: self.m,
            lambda: self.lambda,
            alpha: self.alpha,
            delta_conf: self.delta_conf,
            noise_r: self.noise_r,
            s_norm: self.s_norm,
            arm_bound: self.arm_bound,
            horizon: self.horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_toml_with_sections() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            algo = "fedlinucb"
            d = 10
            l = 4
            M = 3
            T = 200
            alpha = 0.5
            [env]
            kind = "synthetic"
            arm_rank = 3
            [schedule]
            mode = "block"
            block = 5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.algo, Algo::Fedlinucb);
        assert_eq!((cfg.d, cfg.l, cfg.m, cfg.horizon), (10, 4, 3, 200));
        assert_eq!(cfg.arm_rank(), Some(3));
        assert_eq!(cfg.schedule.mode(), ScheduleMode::Block(5));
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let bad = ExperimentConfig {
            l: 50,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let fine_for_baseline = ExperimentConfig {
            algo: Algo::Fedlinucb,
            l: 50,
            ..Default::default()
        };
        fine_for_baseline.validate().unwrap();
        let no_trials = ExperimentConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(no_trials.validate().is_err());
    }
}
