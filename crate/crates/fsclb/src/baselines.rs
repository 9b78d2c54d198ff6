//! Reference policies: asynchronous FedLinUCB with dense matrices, and
//! uniform random selection.

use rand::Rng;

use crate::agent::{compute_beta, BanditParams, DetBranch, TriggerEval};
use crate::error::{Error, Result};
use crate::protocol::{FedLinDownload, FedLinUpload};
use crate::spectral::{DenseMatrix, DenseVector};

#[derive(Debug, Clone)]
pub struct FedLinAgent {
    pub id: usize,
    pub v_global_inv: DenseMatrix,
    pub theta_hat: DenseVector,
    pub beta: f64,
    pub dv_loc: DenseMatrix,
    pub db_loc: DenseVector,
    pub log_det_v: f64,
}

impl FedLinAgent {
    pub fn new(id: usize, params: &BanditParams) -> Result<Self> {
        let d = params.d;
        if !(params.lambda > 0.0) {
            return Err(Error::InvalidRegularizer(params.lambda));
        }
        Ok(Self {
            id,
            v_global_inv: DenseMatrix::identity(d, d) / params.lambda,
            theta_hat: DenseVector::zeros(d),
            beta: compute_beta(params, 0.0)?,
            dv_loc: DenseMatrix::zeros(d, d),
            db_loc: DenseVector::zeros(d),
            log_det_v: d as f64 * params.lambda.ln(),
        })
    }

    pub fn select_arm(&self, arms: &[DenseVector]) -> Result<usize> {
        if arms.is_empty() {
            return Err(Error::NoArms);
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, x) in arms.iter().enumerate() {
            let q = x.dot(&(&self.v_global_inv * x)).max(0.0);
            let score = self.theta_hat.dot(x) + self.beta * q.sqrt();
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        Ok(best)
    }

    pub fn local_update(&mut self, x: &DenseVector, reward: f64) {
        self.dv_loc.ger(1.0, x, x, 1.0);
        self.db_loc.axpy(reward, x, 1.0);
    }

    /// `det(V + ΔV) > (1 + α) det(V)`, evaluated as
    /// `log det(I + V⁻¹ΔV) > log(1 + α)` with a dense LU.
    pub fn evaluate_trigger(&self, params: &BanditParams) -> Result<TriggerEval> {
        let mut m = &self.v_global_inv * &self.dv_loc;
        for i in 0..params.d {
            m[(i, i)] += 1.0;
        }
        let det = m.lu().determinant();
        if !(det > 0.0) {
            return Err(Error::InvalidState(format!("det(I + V⁻¹ΔV) = {det}")));
        }
        let growth = det.ln();
        let threshold = params.alpha.ln_1p();
        Ok(TriggerEval {
            log_det: self.log_det_v + growth,
            threshold: self.log_det_v + threshold,
            fire: growth > threshold,
            branch: DetBranch::Dense,
        })
    }

    pub fn make_upload(&self, round: u64) -> FedLinUpload {
        FedLinUpload {
            agent_id: self.id as u32,
            round,
            dv: self.dv_loc.clone(),
            db: self.db_loc.clone(),
        }
    }

    pub fn apply_download(&mut self, msg: &FedLinDownload, params: &BanditParams) -> Result<()> {
        if msg.v_inv.shape() != (params.d, params.d) || msg.theta_hat.len() != params.d {
            return Err(Error::Protocol(format!(
                "download shape mismatch: V⁻¹ {:?}, θ̂ {} for d = {}",
                msg.v_inv.shape(),
                msg.theta_hat.len(),
                params.d
            )));
        }
        self.v_global_inv.copy_from(&msg.v_inv);
        self.theta_hat.copy_from(&msg.theta_hat);
        self.log_det_v = msg.log_det;
        self.dv_loc.fill(0.0);
        self.db_loc.fill(0.0);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FedLinServer {
    d: usize,
    pub v: DenseMatrix,
    pub b: DenseVector,
    pub v_inv: DenseMatrix,
    pub theta_hat: DenseVector,
    pub log_det: f64,
}

impl FedLinServer {
    pub fn new(d: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidRegularizer(lambda));
        }
        Ok(Self {
            d,
            v: DenseMatrix::identity(d, d) * lambda,
            b: DenseVector::zeros(d),
            v_inv: DenseMatrix::identity(d, d) / lambda,
            theta_hat: DenseVector::zeros(d),
            log_det: d as f64 * lambda.ln(),
        })
    }

    pub fn handle_upload(&mut self, msg: &FedLinUpload) -> Result<FedLinDownload> {
        if msg.dv.shape() != (self.d, self.d) || msg.db.len() != self.d {
            return Err(Error::Protocol(format!(
                "upload shape mismatch: ΔV {:?}, Δb {} for d = {}",
                msg.dv.shape(),
                msg.db.len(),
                self.d
            )));
        }
        self.v += &msg.dv;
        self.b += &msg.db;
        let chol = nalgebra::Cholesky::new(self.v.clone())
            .ok_or_else(|| Error::InvalidState("global V lost positive definiteness".into()))?;
        self.v_inv = chol.inverse();
        self.theta_hat = chol.solve(&self.b);
        self.log_det = chol.ln_determinant();
        Ok(FedLinDownload {
            agent_id: msg.agent_id,
            round: msg.round,
            v_inv: self.v_inv.clone(),
            theta_hat: self.theta_hat.clone(),
            log_det: self.log_det,
        })
    }
}

pub fn random_select<R: Rng + ?Sized>(n_arms: usize, rng: &mut R) -> Result<usize> {
    if n_arms == 0 {
        return Err(Error::NoArms);
    }
    Ok(rng.random_range(0..n_arms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize) -> BanditParams {
        BanditParams {
            d,
            l: 1,
            m: 1,
            lambda: 1.0,
            alpha: 1.0,
            delta_conf: 0.01,
            noise_r: 0.0,
            s_norm: 1.0,
            arm_bound: 1.0,
            horizon: 100,
        }
    }

    #[test]
    fn exact_doubling_does_not_fire() {
        let p = params(2);
        let mut a = FedLinAgent::new(0, &p).unwrap();
        assert!(!a.evaluate_trigger(&p).unwrap().fire);
        a.local_update(&DenseVector::from_vec(vec![1.0, 0.0]), 1.0);
        let t = a.evaluate_trigger(&p).unwrap();
        assert!((t.log_det - 2f64.ln()).abs() < 1e-15);
        assert!(!t.fire);
        a.local_update(&DenseVector::from_vec(vec![0.0, 0.5]), 1.0);
        assert!(a.evaluate_trigger(&p).unwrap().fire);
    }

    #[test]
    fn upload_download_round_trip() {
        let p = params(3);
        let mut a = FedLinAgent::new(0, &p).unwrap();
        let mut server = FedLinServer::new(3, 1.0).unwrap();
        let x = DenseVector::from_vec(vec![1.0, 0.0, 0.0]);
        a.local_update(&x, 2.0);
        let up = a.make_upload(4);
        assert_eq!(up.scalar_count(), 9);
        let down = server.handle_upload(&up).unwrap();
        assert_eq!(down.scalar_count(), 13);
        a.apply_download(&down, &p).unwrap();
        assert!((a.theta_hat[0] - 1.0).abs() < 1e-15);
        assert!((a.v_global_inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((a.log_det_v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(a.dv_loc, DenseMatrix::zeros(3, 3));
        assert_eq!(FedLinUpload { dv: DenseMatrix::zeros(100, 100), db: DenseVector::zeros(100), ..up }.scalar_count() + 100, 10_100);
    }

    #[test]
    fn random_select_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_select(1, &mut rng).unwrap(), 0);
        assert!(matches!(random_select(0, &mut rng), Err(Error::NoArms)));

        let a: Vec<usize> = (0..20).map(|_| random_select(7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));

        let n = 10_000;
        let mut counts = [0u32; 10];
        for _ in 0..n {
            counts[random_select(10, &mut rng).unwrap()] += 1;
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 5.0 * sigma, "{counts:?}");
        }
    }
}
