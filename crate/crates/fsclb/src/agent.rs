//! Agent side of the federated sketched bandit: optimistic arm selection,
//! local SCFD accumulation, the determinant trigger and download handling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{DownloadMsg, UploadMsg};
use crate::sketch::{log_det_from_singvals, quadratic_form_unchecked, ShrinkRule, SketchMode, SketchState};
use crate::spectral::{singular_values, spd_log_det, vstack, DenseMatrix, DenseVector};

/// Problem constants shared by every agent and the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditParams {
    pub d: usize,
    pub l: usize,
    /// Number of agents.
    pub m: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub delta_conf: f64,
    /// Sub-Gaussian noise scale.
    pub noise_r: f64,
    /// Bound on `‖θ*‖₂`.
    pub s_norm: f64,
    /// Bound on arm norms.
    pub arm_bound: f64,
    pub horizon: u64,
}

impl BanditParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l == 0 || self.l >= self.d {
            return Err(Error::Config(format!(
                "need 1 <= l < d, got l = {}, d = {}",
                self.l, self.d
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidRegularizer(self.lambda));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(Error::InvalidConfidence(self.delta_conf));
        }
        Ok(())
    }

    /// Whether the trigger uses the stacked-sketch SVD instead of a dense
    /// determinant.
    pub fn uses_svd_determinant(&self) -> bool {
        (self.l as f64) < 0.4 * self.d as f64
    }
}

/// Confidence radius with the federation factor
/// `M̃ = sqrt(1 + Mα) + M sqrt(2α)` and the truncation mass `Δ`.
pub fn compute_beta(params: &BanditParams, delta: f64) -> Result<f64> {
    if !(params.delta_conf > 0.0 && params.delta_conf < 1.0) {
        return Err(Error::InvalidConfidence(params.delta_conf));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidState(format!("Δ must be >= 0, got {delta}")));
    }
    let m = params.m as f64;
    let alpha = params.alpha;
    let lambda = params.lambda;
    let alpha_min = alpha.min(1.0);
    let fed = (1.0 + m * alpha).sqrt() + m * (2.0 * alpha).sqrt();
    let horizon_term = 1.0
        + params.horizon as f64 * params.arm_bound * params.arm_bound / (alpha_min * lambda);
    let log_term = (horizon_term / params.delta_conf).ln();
    let noise = params.noise_r * (params.d as f64 * log_term).sqrt();
    Ok(fed * (noise + lambda.sqrt() * params.s_norm)
        + (lambda.sqrt() + (delta / lambda).sqrt()) * params.s_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetBranch {
    Svd,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerEval {
    /// `log det(Ṽ_m + S_locᵀS_loc + ρ_loc I)`.
    pub log_det: f64,
    /// `log(1 + α) + log det(Ṽ_m)`.
    pub threshold: f64,
    pub fire: bool,
    pub branch: DetBranch,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: usize,
    /// Sketch of the last downloaded global matrix.
    pub policy_sketch: DenseMatrix,
    pub hdiag: Vec<f64>,
    pub delta: f64,
    pub theta_hat: DenseVector,
    pub beta: f64,
    /// Cached `log det(Ṽ_m)`, supplied by the server.
    pub log_det_v: f64,
    pub local: SketchState,
    pub b_loc: DenseVector,
    /// Exact local gram since the last sync, kept only in theory mode.
    pub theory_gram: Option<DenseMatrix>,
}

impl AgentState {
    pub fn new(id: usize, params: &BanditParams, theory: bool) -> Result<Self> {
        Self::with_rule(id, params, theory, ShrinkRule::default())
    }

    pub fn with_rule(
        id: usize,
        params: &BanditParams,
        theory: bool,
        rule: ShrinkRule,
    ) -> Result<Self> {
        params.validate()?;
        let (l, d) = (params.l, params.d);
        Ok(Self {
            id,
            policy_sketch: DenseMatrix::zeros(l, d),
            hdiag: vec![1.0 / params.lambda; l],
            delta: 0.0,
            theta_hat: DenseVector::zeros(d),
            beta: compute_beta(params, 0.0)?,
            log_det_v: d as f64 * params.lambda.ln(),
            local: SketchState::with_rule(l, d, SketchMode::Scfd, rule),
            b_loc: DenseVector::zeros(d),
            theory_gram: theory.then(|| DenseMatrix::zeros(d, d)),
        })
    }

    /// `xᵀ Ṽ_m⁻¹ x` through the diagonal Woodbury form.
    pub fn exploration_form(&self, params: &BanditParams, x: &DenseVector) -> f64 {
        quadratic_form_unchecked(
            &self.policy_sketch,
            &self.hdiag,
            params.lambda + self.delta,
            x.as_slice(),
        )
    }

    /// Index maximizing `⟨θ̂, x⟩ + β ‖x‖_{Ṽ⁻¹}`; ties go to the lowest index.
    pub fn select_arm(&self, params: &BanditParams, arms: &[DenseVector]) -> Result<usize> {
        if arms.is_empty() {
            return Err(Error::NoArms);
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, x) in arms.iter().enumerate() {
            if x.len() != params.d {
                return Err(Error::InvalidVector(format!(
                    "arm {i} has dimension {}, expected {}",
                    x.len(),
                    params.d
                )));
            }
            let score = self.theta_hat.dot(x) + self.beta * self.exploration_form(params, x).sqrt();
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        Ok(best)
    }

    pub fn local_update(&mut self, x: &DenseVector, reward: f64) -> Result<()> {
        self.local.append(x.as_slice())?;
        self.b_loc.axpy(reward, x, 1.0);
        if let Some(g) = self.theory_gram.as_mut() {
            g.ger(1.0, x, x, 1.0);
        }
        Ok(())
    }

    pub fn evaluate_trigger(&self, params: &BanditParams) -> Result<TriggerEval> {
        let rho_loc = self.local.rho();
        let c = params.lambda + self.delta + rho_loc;
        let (log_det, branch) = if params.uses_svd_determinant() {
            let stacked = vstack(&self.policy_sketch, self.local.matrix());
            let sv = singular_values(&stacked)?;
            (log_det_from_singvals(&sv, c, params.d)?, DetBranch::Svd)
        } else {
            let mut v = self.policy_sketch.tr_mul(&self.policy_sketch);
            v += self.local.matrix().tr_mul(self.local.matrix());
            for i in 0..params.d {
                v[(i, i)] += c;
            }
            (spd_log_det(&v)?, DetBranch::Dense)
        };
        let threshold = params.alpha.ln_1p() + self.log_det_v;
        Ok(TriggerEval {
            log_det,
            threshold,
            fire: log_det > threshold,
            branch,
        })
    }

    pub fn make_upload(&self, round: u64) -> UploadMsg {
        UploadMsg {
            agent_id: self.id as u32,
            round,
            s_loc: self.local.matrix().clone(),
            rho_loc: self.local.rho(),
            b_loc: self.b_loc.clone(),
        }
    }

    pub fn apply_download(&mut self, msg: &DownloadMsg, params: &BanditParams) -> Result<()> {
        if msg.s.shape() != (params.l, params.d)
            || msg.theta_hat.len() != params.d
            || msg.hdiag.len() != params.l
        {
            return Err(Error::Protocol(format!(
                "download shape mismatch: sketch {:?}, θ̂ {}, H {} for l = {}, d = {}",
                msg.s.shape(),
                msg.theta_hat.len(),
                msg.hdiag.len(),
                params.l,
                params.d
            )));
        }
        self.policy_sketch.copy_from(&msg.s);
        self.hdiag.clone_from(&msg.hdiag);
        self.delta = msg.delta;
        self.theta_hat.copy_from(&msg.theta_hat);
        self.log_det_v = msg.log_det;
        self.beta = compute_beta(params, msg.delta)?;
        self.local.reset();
        self.b_loc.fill(0.0);
        if let Some(g) = self.theory_gram.as_mut() {
            g.fill(0.0);
        }
        Ok(())
    }

    /// Dense `Ṽ_m = (λ + Δ)I + S_mᵀS_m`, for checks only.
    pub fn dense_policy_matrix(&self, params: &BanditParams) -> DenseMatrix {
        let mut v = self.policy_sketch.tr_mul(&self.policy_sketch);
        for i in 0..params.d {
            v[(i, i)] += params.lambda + self.delta;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn params(d: usize, l: usize) -> BanditParams {
        BanditParams {
            d,
            l,
            m: 1,
            lambda: 1.0,
            alpha: 1.0,
            delta_conf: 0.01,
            noise_r: 0.0,
            s_norm: 1.0,
            arm_bound: 2.0,
            horizon: 100,
        }
    }

    fn v(data: &[f64]) -> DenseVector {
        DenseVector::from_column_slice(data)
    }

    #[test]
    fn beta_examples() {
        let p = params(2, 1);
        let beta = compute_beta(&p, 0.0).unwrap();
        assert!((beta - (2.0 * 2f64.sqrt() + 1.0)).abs() < 1e-12);
        let gap = compute_beta(&p, p.lambda).unwrap() - beta;
        assert!((gap - p.s_norm).abs() < 1e-12);

        let defaults = BanditParams {
            d: 50,
            l: 20,
            m: 10,
            lambda: 1.0,
            alpha: 1.0,
            delta_conf: 0.01,
            noise_r: 1.0,
            s_norm: 1.0,
            arm_bound: 1.0,
            horizon: 20_000,
        };
        // M̃ (R sqrt(d ln((1 + T)/δ)) + 1) + 1 evaluated by hand
        let fed = 11f64.sqrt() + 10.0 * 2f64.sqrt();
        let expected = fed * ((50.0 * (20_001.0f64 / 0.01).ln()).sqrt() + 1.0) + 1.0;
        let got = compute_beta(&defaults, 0.0).unwrap();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 488.7).abs() < 0.05);

        let bad = BanditParams { delta_conf: 1.0, ..p };
        assert!(matches!(compute_beta(&bad, 0.0), Err(Error::InvalidConfidence(_))));
    }

    #[test]
    fn selection_examples() {
        let p = params(2, 1);
        let a = AgentState::new(0, &p, false).unwrap();
        let agent = AgentState { beta: 1.0, ..a.clone() };
        assert_eq!(agent.select_arm(&p, &[v(&[1.0, 0.0]), v(&[2.0, 0.0])]).unwrap(), 1);

        let greedy = AgentState {
            beta: 0.0,
            theta_hat: v(&[1.0, 0.0]),
            ..a.clone()
        };
        assert_eq!(greedy.select_arm(&p, &[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap(), 0);
        assert_eq!(a.select_arm(&p, &[v(&[0.3, 0.4]), v(&[0.3, 0.4])]).unwrap(), 0);
        assert!(matches!(a.select_arm(&p, &[]), Err(Error::NoArms)));
    }

    #[test]
    fn local_update_examples() {
        let p = params(3, 2);
        let mut a = AgentState::new(0, &p, true).unwrap();
        a.local_update(&v(&[1.0, 0.0, 0.0]), 1.0).unwrap();
        assert_eq!(a.b_loc, v(&[1.0, 0.0, 0.0]));
        assert_eq!(a.local.rho(), 0.0);
        a.local_update(&v(&[0.0, 1.0, 0.0]), 0.0).unwrap();
        assert_eq!(a.b_loc, v(&[1.0, 0.0, 0.0]));
        assert_eq!(a.theory_gram.as_ref().unwrap()[(1, 1)], 1.0);
        assert!(matches!(
            a.local_update(&v(&[1.0]), 1.0),
            Err(Error::InvalidVector(_))
        ));

        // l = 1: every append shifts the whole new mass into ρ
        let p = params(2, 1);
        let mut a = AgentState::new(0, &p, false).unwrap();
        a.local_update(&v(&[1.0, 0.0]), 1.0).unwrap();
        assert!((a.local.rho() - 1.0).abs() < 1e-14);
        a.local_update(&v(&[1.0, 0.0]), 1.0).unwrap();
        assert!((a.local.rho() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn trigger_dense_branch_fires_on_rho() {
        let p = params(2, 1);
        let mut a = AgentState::new(0, &p, false).unwrap();
        let idle = a.evaluate_trigger(&p).unwrap();
        assert!(!idle.fire);
        assert!((idle.log_det - a.log_det_v).abs() < 1e-12);
        a.local_update(&v(&[1.0, 0.0]), 1.0).unwrap();
        let t = a.evaluate_trigger(&p).unwrap();
        assert_eq!(t.branch, DetBranch::Dense);
        assert!((t.log_det - 4f64.ln()).abs() < 1e-12);
        assert!(t.fire);
    }

    #[test]
    fn trigger_svd_branch_equality_does_not_fire() {
        let p = params(6, 2);
        let mut a = AgentState::new(0, &p, false).unwrap();
        a.local_update(&v(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        let t = a.evaluate_trigger(&p).unwrap();
        assert_eq!(t.branch, DetBranch::Svd);
        assert!((t.log_det - 2f64.ln()).abs() < 1e-12);
        assert!(!t.fire);
    }

    fn download(l: usize, d: usize) -> DownloadMsg {
        DownloadMsg {
            agent_id: 0,
            round: 1,
            s: DenseMatrix::zeros(l, d),
            theta_hat: DenseVector::from_element(d, 0.5),
            log_det: 4f64.ln(),
            hdiag: vec![0.5; l],
            delta: 1.0,
        }
    }

    #[test]
    fn apply_download_resets_local_state() {
        let p = params(2, 1);
        let mut a = AgentState::new(0, &p, true).unwrap();
        a.local_update(&v(&[1.0, 0.0]), 1.0).unwrap();
        let msg = download(1, 2);
        a.apply_download(&msg, &p).unwrap();
        assert!(a.local.is_zero());
        assert_eq!(a.b_loc, DenseVector::zeros(2));
        assert_eq!(a.delta, 1.0);
        assert_eq!(a.hdiag, vec![0.5]);
        assert_eq!(a.beta, compute_beta(&p, 1.0).unwrap());
        let snapshot = (a.theta_hat.clone(), a.beta, a.log_det_v, a.policy_sketch.clone());
        a.apply_download(&msg, &p).unwrap();
        assert_eq!(snapshot, (a.theta_hat.clone(), a.beta, a.log_det_v, a.policy_sketch.clone()));

        assert!(matches!(
            a.apply_download(&download(2, 2), &p),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn initial_download_restores_prior() {
        let p = params(3, 1);
        let fresh = AgentState::new(0, &p, false).unwrap();
        let mut a = fresh.clone();
        a.local_update(&v(&[0.0, 1.0, 0.0]), 2.0).unwrap();
        let msg = DownloadMsg {
            agent_id: 0,
            round: 0,
            s: DenseMatrix::zeros(1, 3),
            theta_hat: DenseVector::zeros(3),
            log_det: 0.0,
            hdiag: vec![1.0],
            delta: 0.0,
        };
        a.apply_download(&msg, &p).unwrap();
        let x = v(&[0.6, 0.0, 0.8]);
        assert!((a.exploration_form(&p, &x) - fresh.exploration_form(&p, &x)).abs() < 1e-15);
        assert_eq!(a.beta, fresh.beta);
    }

    fn orthogonal_sketch(l: usize, d: usize, c: f64, rng: &mut ChaCha8Rng) -> (DenseMatrix, Vec<f64>) {
        let raw = DenseMatrix::from_fn(l, d, |_, _| rng.random_range(-1.5..1.5));
        let svd = crate::spectral::thin_svd(&raw).unwrap();
        let mut s = svd.vt.clone();
        for (i, sv) in svd.singular_values.iter().enumerate() {
            s.row_mut(i).scale_mut(*sv);
        }
        let h: Vec<f64> = svd.singular_values.iter().map(|sv| 1.0 / (sv * sv + c)).collect();
        (s, h)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn exploration_form_matches_dense_inverse(seed: u64, delta in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = params(9, 3);
            let mut a = AgentState::new(0, &p, false).unwrap();
            let (s, h) = orthogonal_sketch(3, 9, p.lambda + delta, &mut rng);
            a.policy_sketch = s;
            a.hdiag = h;
            a.delta = delta;
            let x = DenseVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let dense = a.dense_policy_matrix(&p).lu().solve(&x).unwrap();
            let oracle = x.dot(&dense);
            prop_assert!((a.exploration_form(&p, &x) - oracle).abs() <= 1e-8 * oracle);
        }

        #[test]
        fn joint_scaling_keeps_choice(seed: u64, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = params(6, 2);
            let mut a = AgentState::new(0, &p, false).unwrap();
            let (s, h) = orthogonal_sketch(2, 6, p.lambda, &mut rng);
            a.policy_sketch = s;
            a.hdiag = h;
            let arms: Vec<DenseVector> = (0..8)
                .map(|_| DenseVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let base = a.select_arm(&p, &arms).unwrap();
            a.beta *= scale;
            prop_assert_eq!(base, a.select_arm(&p, &arms).unwrap());
        }

        #[test]
        fn trigger_stays_fired(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (d, l) in [(10, 3), (6, 4)] {
                let p = BanditParams { alpha: 0.5, ..params(d, l) };
                let mut a = AgentState::new(0, &p, false).unwrap();
                let mut fired = false;
                for _ in 0..40 {
                    let x = DenseVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                    a.local_update(&x.normalize(), 1.0).unwrap();
                    let t = a.evaluate_trigger(&p).unwrap();
                    prop_assert!(!fired || t.fire);
                    fired |= t.fire;
                }
            }
        }

        #[test]
        fn determinant_paths_agree(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = params(12, 3);
            prop_assert!(p.uses_svd_determinant());
            let mut a = AgentState::new(0, &p, false).unwrap();
            for _ in 0..7 {
                let x = DenseVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
                a.local_update(&x, 0.0).unwrap();
            }
            let fast = a.evaluate_trigger(&p).unwrap().log_det;
            let dense = a.dense_policy_matrix(&p) + a.local.approx_gram();
            let oracle = dense.lu().determinant().ln();
            prop_assert!((fast - oracle).abs() < 1e-9 * (1.0 + oracle.abs()));
        }
    }
}
