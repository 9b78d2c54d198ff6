use crate::spectral::{DenseMatrix, DenseVector};

/// Local increment shipped when an agent's trigger fires.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadMsg {
    pub agent_id: u32,
    pub round: u64,
    /// `l × d` local sketch.
    pub s_loc: DenseMatrix,
    pub rho_loc: f64,
    pub b_loc: DenseVector,
}

impl UploadMsg {
    pub fn l(&self) -> usize {
        self.s_loc.nrows()
    }

    pub fn d(&self) -> usize {
        self.s_loc.ncols()
    }

    /// `l·d + d + 1`.
    pub fn scalar_count(&self) -> u64 {
        (self.l() * self.d() + self.d() + 1) as u64
    }
}

/// Synchronized policy returned to the uploading agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadMsg {
    pub agent_id: u32,
    pub round: u64,
    /// `l × d` global sketch with orthogonal rows.
    pub s: DenseMatrix,
    pub theta_hat: DenseVector,
    /// `log det((λ + Δ)I + SᵀS)`.
    pub log_det: f64,
    pub hdiag: Vec<f64>,
    pub delta: f64,
}

impl DownloadMsg {
    pub fn l(&self) -> usize {
        self.s.nrows()
    }

    pub fn d(&self) -> usize {
        self.s.ncols()
    }

    /// `l·d + d + l + 2`.
    pub fn scalar_count(&self) -> u64 {
        (self.l() * self.d() + self.d() + self.l() + 2) as u64
    }
}

/// FedLinUCB upload: dense gram and reward-vector increments.
#[derive(Debug, Clone, PartialEq)]
pub struct FedLinUpload {
    pub agent_id: u32,
    pub round: u64,
    pub dv: DenseMatrix,
    pub db: DenseVector,
}

impl FedLinUpload {
    pub fn d(&self) -> usize {
        self.db.len()
    }

    /// Counted as the `d × d` correlation matrix only.
    pub fn scalar_count(&self) -> u64 {
        (self.d() * self.d()) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedLinDownload {
    pub agent_id: u32,
    pub round: u64,
    pub v_inv: DenseMatrix,
    pub theta_hat: DenseVector,
    pub log_det: f64,
}

impl FedLinDownload {
    pub fn d(&self) -> usize {
        self.theta_hat.len()
    }

    /// `d² + d + 1`.
    pub fn scalar_count(&self) -> u64 {
        (self.d() * self.d() + self.d() + 1) as u64
    }
}

/// Which server a session talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionAlgo {
    Fsclb,
    FedLin,
}

/// Resets the remote server to a fresh state for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInit {
    pub algo: SessionAlgo,
    pub l: usize,
    pub d: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Upload(UploadMsg),
    Download(DownloadMsg),
    FedLinUpload(FedLinUpload),
    FedLinDownload(FedLinDownload),
    Init(SessionInit),
    Ack,
    Error(String),
}
