//! Server side: absorbs uploads with a double-sketch merge and hands back the
//! synchronized policy.

use crate::error::{Error, Result};
use crate::protocol::{DownloadMsg, UploadMsg};
use crate::sketch::{log_det_from_singvals, woodbury_inverse_apply, ShrinkRule, SketchMode, SketchState};
use crate::spectral::{DenseMatrix, DenseVector};

#[derive(Debug, Clone)]
pub struct ServerState {
    l: usize,
    d: usize,
    lambda: f64,
    /// Global sketch; its `rho` is the merge truncation mass `ρ̃`.
    pub sketch: SketchState,
    /// Sum of the local truncation masses uploaded so far.
    pub rho_ser: f64,
    pub b_ser: DenseVector,
    pub delta_ser: f64,
    pub hdiag: Vec<f64>,
    pub theta_hat: DenseVector,
    pub log_det_v: f64,
    pub uploads: u64,
    /// Exact gram of everything uploaded, fed by the theory side-channel.
    pub theory_gram: Option<DenseMatrix>,
}

impl ServerState {
    pub fn new(l: usize, d: usize, lambda: f64, theory: bool) -> Result<Self> {
        Self::with_rule(l, d, lambda, theory, ShrinkRule::default())
    }

    pub fn with_rule(l: usize, d: usize, lambda: f64, theory: bool, rule: ShrinkRule) -> Result<Self> {
        if l == 0 || l >= d {
            return Err(Error::Config(format!("need 1 <= l < d, got l = {l}, d = {d}")));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidRegularizer(lambda));
        }
        Ok(Self {
            l,
            d,
            lambda,
            sketch: SketchState::with_rule(l, d, SketchMode::Scfd, rule),
            rho_ser: 0.0,
            b_ser: DenseVector::zeros(d),
            delta_ser: 0.0,
            hdiag: vec![1.0 / lambda; l],
            theta_hat: DenseVector::zeros(d),
            log_det_v: d as f64 * lambda.ln(),
            uploads: 0,
            theory_gram: theory.then(|| DenseMatrix::zeros(d, d)),
        })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Merge truncation mass `ρ̃`.
    pub fn rho_tilde(&self) -> f64 {
        self.sketch.rho()
    }

    pub fn handle_upload(
        &mut self,
        msg: &UploadMsg,
        exact_gram: Option<&DenseMatrix>,
    ) -> Result<DownloadMsg> {
        if msg.s_loc.shape() != (self.l, self.d) || msg.b_loc.len() != self.d {
            return Err(Error::Protocol(format!(
                "upload shape mismatch: sketch {:?}, b {} for l = {}, d = {}",
                msg.s_loc.shape(),
                msg.b_loc.len(),
                self.l,
                self.d
            )));
        }
        if !(msg.rho_loc >= 0.0) {
            return Err(Error::Protocol(format!("negative ρ_loc {}", msg.rho_loc)));
        }
        let expected = self.rho_ser + self.rho_tilde();
        if self.delta_ser != expected {
            return Err(Error::InvalidState(format!(
                "Δ_ser = {} but ρ_ser + ρ̃ = {expected}",
                self.delta_ser
            )));
        }

        self.rho_ser += msg.rho_loc;
        if let (Some(g), Some(exact)) = (self.theory_gram.as_mut(), exact_gram) {
            *g += exact;
        }
        self.sketch.merge(&msg.s_loc)?;
        self.delta_ser = self.rho_tilde() + self.rho_ser;
        self.b_ser += &msg.b_loc;

        let c = self.lambda + self.delta_ser;
        for (h, s) in self.hdiag.iter_mut().zip(self.sketch.singular_values()) {
            *h = 1.0 / (s * s + c);
        }
        self.theta_hat =
            woodbury_inverse_apply(self.sketch.matrix(), &self.hdiag, c, self.b_ser.as_slice())?;
        self.log_det_v = log_det_from_singvals(self.sketch.singular_values(), c, self.d)?;
        self.uploads += 1;
        Ok(self.download_for(msg.agent_id, msg.round))
    }

    /// Current globals addressed to `agent_id`.
    pub fn download_for(&self, agent_id: u32, round: u64) -> DownloadMsg {
        DownloadMsg {
            agent_id,
            round,
            s: self.sketch.matrix().clone(),
            theta_hat: self.theta_hat.clone(),
            log_det: self.log_det_v,
            hdiag: self.hdiag.clone(),
            delta: self.delta_ser,
        }
    }

    /// Dense `Ṽ_ser = (λ + Δ)I + S̃ᵀS̃`, for checks only.
    pub fn dense_matrix(&self) -> DenseMatrix {
        let mut v = self.sketch.matrix().tr_mul(self.sketch.matrix());
        for i in 0..self.d {
            v[(i, i)] += self.lambda + self.delta_ser;
        }
        v
    }
}
