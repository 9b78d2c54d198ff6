//! Bandit environments and agent-activation schedules.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{DenseMatrix, DenseVector};

/// One round's decision set with its expected rewards.
#[derive(Debug, Clone)]
pub struct RoundDraw {
    pub arms: Vec<DenseVector>,
    pub means: Vec<f64>,
    /// Noise shared by whichever arm is pulled this round.
    pub noise: f64,
    pub best_value: f64,
}

impl RoundDraw {
    pub fn reward(&self, arm: usize) -> f64 {
        self.means[arm] + self.noise
    }

    pub fn regret(&self, arm: usize) -> f64 {
        self.best_value - self.means[arm]
    }
}

fn unit_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DenseVector {
    loop {
        let v = DenseVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Linear rewards `⟨x, θ*⟩ + N(0, R²)` with arms on the unit sphere of an
/// `arm_rank`-dimensional subspace, scaled to `arm_bound`.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    pub theta_star: DenseVector,
    /// `d × r` orthonormal basis of the arm subspace.
    basis: DenseMatrix,
    pub k: usize,
    pub noise_r: f64,
    pub arm_bound: f64,
}

impl SyntheticEnv {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        arm_rank: usize,
        k: usize,
        noise_r: f64,
        s_norm: f64,
        arm_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if arm_rank == 0 || arm_rank > d {
            return Err(Error::Config(format!("arm_rank must be in 1..={d}, got {arm_rank}")));
        }
        if k == 0 {
            return Err(Error::Config("need at least one arm per round".into()));
        }
        let theta_star = unit_gaussian(d, rng) * s_norm;
        let basis = if arm_rank == d {
            DenseMatrix::identity(d, d)
        } else {
            let g = DenseMatrix::from_fn(d, arm_rank, |_, _| rng.sample::<f64, _>(StandardNormal));
            g.qr().q()
        };
        Ok(Self {
            theta_star,
            basis,
            k,
            noise_r,
            arm_bound,
        })
    }

    pub fn with_theta(theta_star: DenseVector, k: usize, noise_r: f64) -> Self {
        let d = theta_star.len();
        Self {
            theta_star,
            basis: DenseMatrix::identity(d, d),
            k,
            noise_r,
            arm_bound: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn arm_rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Draws `k` arms, plus the shared noise sample.
    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R) -> RoundDraw {
        let r = self.basis.ncols();
        let arms: Vec<DenseVector> = (0..self.k)
            .map(|_| &self.basis * unit_gaussian(r, rng) * self.arm_bound)
            .collect();
        let noise = self.noise_r * rng.sample::<f64, _>(StandardNormal);
        self.score(arms, noise)
    }

    /// Expected rewards for a caller-provided decision set.
    pub fn score(&self, arms: Vec<DenseVector>, noise: f64) -> RoundDraw {
        let means: Vec<f64> = arms.iter().map(|x| x.dot(&self.theta_star)).collect();
        let best_value = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        RoundDraw {
            arms,
            means,
            noise,
            best_value,
        }
    }
}

/// Classification data turned into a bandit: each round offers `k` sampled
/// instances and pays 1 for an instance of the target class.
#[derive(Debug, Clone)]
pub struct DatasetEnv {
    pub features: Vec<DenseVector>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub target_label: usize,
    pub k: usize,
}

const MAX_RESAMPLES: usize = 1000;

impl DatasetEnv {
    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RoundDraw> {
        let n = self.features.len();
        if n == 0 || self.k == 0 {
            return Err(Error::Data("dataset environment has no rows or no arms".into()));
        }
        for _ in 0..MAX_RESAMPLES {
            let idx: Vec<usize> = if n >= self.k {
                sample(rng, n, self.k).into_vec()
            } else {
                (0..self.k).map(|_| rng.random_range(0..n)).collect()
            };
            if idx.iter().any(|&i| self.labels[i] == self.target_label) {
                return Ok(self.draw(&idx));
            }
        }
        Err(Error::Data(format!(
            "no instance of the target class after {MAX_RESAMPLES} resamples"
        )))
    }

    pub fn draw(&self, idx: &[usize]) -> RoundDraw {
        let arms = idx.iter().map(|&i| self.features[i].clone()).collect();
        let means = idx
            .iter()
            .map(|&i| f64::from(u8::from(self.labels[i] == self.target_label)))
            .collect();
        RoundDraw {
            arms,
            means,
            noise: 0.0,
            best_value: 1.0,
        }
    }
}

/// Loads a CSV whose last column is the label. A header row is detected when
/// any feature cell of the first row fails to parse as a number. Rows are
/// L2-normalized and the most frequent class becomes the target.
pub fn load_dataset_csv(path: impl AsRef<Path>, k: usize) -> Result<DatasetEnv> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {i}: {e}")))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let width = rows[0].len();
    if width < 2 {
        return Err(Error::Data("need at least one feature column and a label column".into()));
    }
    let first_is_header = rows[0]
        .iter()
        .take(width - 1)
        .any(|c| c.parse::<f64>().is_err());
    let start = usize::from(first_is_header);
    if rows.len() <= start {
        return Err(Error::Data(format!("{}: header but no data rows", path.display())));
    }

    let d = width - 1;
    let mut features = Vec::with_capacity(rows.len() - start);
    let mut labels = Vec::with_capacity(rows.len() - start);
    let mut label_names: Vec<String> = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rows.iter().enumerate().skip(start) {
        if rec.len() != width {
            return Err(Error::Data(format!(
                "row {i} has {} columns, expected {width}",
                rec.len()
            )));
        }
        let mut x = DenseVector::zeros(d);
        for (j, cell) in rec.iter().take(d).enumerate() {
            x[j] = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {i}, column {j}: non-numeric cell {cell:?}")))?;
        }
        let norm = x.norm();
        if norm > 0.0 {
            x /= norm;
        }
        let label = rec.get(d).unwrap().to_string();
        let next = codes.len();
        let code = *codes.entry(label.clone()).or_insert_with(|| {
            label_names.push(label);
            next
        });
        features.push(x);
        labels.push(code);
    }

    let mut counts = vec![0usize; label_names.len()];
    for &c in &labels {
        counts[c] += 1;
    }
    // most frequent; ties go to the label seen first
    let target_label = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
        .0;
    Ok(DatasetEnv {
        features,
        labels,
        label_names,
        target_label,
        k,
    })
}

#[derive(Debug, Clone)]
pub enum Environment {
    Synthetic(SyntheticEnv),
    Dataset(DatasetEnv),
}

impl Environment {
    pub fn dim(&self) -> usize {
        match self {
            Environment::Synthetic(e) => e.dim(),
            Environment::Dataset(e) => e.dim(),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RoundDraw> {
        match self {
            Environment::Synthetic(e) => Ok(e.step(rng)),
            Environment::Dataset(e) => e.step(rng),
        }
    }

    pub fn theta_star(&self) -> Option<&DenseVector> {
        match self {
            Environment::Synthetic(e) => Some(&e.theta_star),
            Environment::Dataset(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Uniform,
    RoundRobin,
    /// Each agent stays active for `P` consecutive rounds.
    Block(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub m: usize,
}

impl Schedule {
    pub fn new(mode: ScheduleMode, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("schedule needs at least one agent".into()));
        }
        if mode == ScheduleMode::Block(0) {
            return Err(Error::Config("block length must be >= 1".into()));
        }
        Ok(Self { mode, m })
    }

    /// Active agent for round `t` (1-based).
    pub fn next<R: Rng + ?Sized>(&self, t: u64, rng: &mut R) -> usize {
        let m = self.m as u64;
        match self.mode {
            ScheduleMode::Uniform => rng.random_range(0..self.m),
            ScheduleMode::RoundRobin => ((t - 1) % m) as usize,
            ScheduleMode::Block(p) => (((t - 1) / p) % m) as usize,
        }
    }
}
