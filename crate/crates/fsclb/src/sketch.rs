//! Frequent-directions sketches with spectral compensation (SCFD).
//!
//! A [`SketchState`] keeps `l` rows approximating a stream of `d`-dimensional
//! rows. Every update stacks the new data under the sketch, takes a thin SVD,
//! subtracts the shrink value `δ` from the squared spectrum and keeps the
//! first `l` rows of `sqrt(max(σ² − δ, 0)) Vᵀ`. In SCFD mode the removed mass
//! is accumulated into `rho`, so that `SᵀS + ρI` over-approximates the exact
//! gram while `SᵀS` under-approximates it.
//!
//! The rows of a sketch produced this way are mutually orthogonal with norms
//! equal to the retained singular values, which is what makes the diagonal
//! Woodbury form in [`woodbury_inverse_apply`] exact.

use crate::error::{Error, Result};
use crate::spectral::{thin_svd, vstack, DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SketchMode {
    /// Truncated mass is added back as `ρI`.
    #[default]
    Scfd,
    /// Classical frequent directions; `ρ` is left untouched.
    Fd,
}

/// Which singular value sets the shrink amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShrinkRule {
    /// `δ = σ_l²` of the stacked matrix.
    #[default]
    SigmaL,
    /// `δ = σ_{l+1}²`, the variant that keeps all `l` rows alive.
    SigmaLPlusOne,
}

/// Singular values at or below this fraction of the largest are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SketchState {
    l: usize,
    d: usize,
    s: DenseMatrix,
    /// Norms of the rows of `s` (its singular values), length `l`.
    sigma: Vec<f64>,
    rho: f64,
    /// Sum of every shrink value applied so far, regardless of mode.
    shrunk: f64,
    mode: SketchMode,
    rule: ShrinkRule,
}

impl SketchState {
    pub fn new(l: usize, d: usize, mode: SketchMode) -> Self {
        Self::with_rule(l, d, mode, ShrinkRule::default())
    }

    pub fn with_rule(l: usize, d: usize, mode: SketchMode, rule: ShrinkRule) -> Self {
        assert!(l >= 1 && d >= 1, "sketch needs l >= 1 and d >= 1");
        Self {
            l,
            d,
            s: DenseMatrix::zeros(l, d),
            sigma: vec![0.0; l],
            rho: 0.0,
            shrunk: 0.0,
            mode,
            rule,
        }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.s
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Total shrinkage applied, also tracked in FD mode.
    pub fn shrunk_mass(&self) -> f64 {
        self.shrunk
    }

    pub fn mode(&self) -> SketchMode {
        self.mode
    }

    pub fn reset(&mut self) {
        self.s.fill(0.0);
        self.sigma.iter_mut().for_each(|v| *v = 0.0);
        self.rho = 0.0;
        self.shrunk = 0.0;
    }

    pub fn is_zero(&self) -> bool {
        self.rho == 0.0 && self.s.iter().all(|v| *v == 0.0)
    }

    /// Appends one row. Returns the shrink value `δ` applied.
    pub fn append(&mut self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(Error::InvalidVector(format!(
                "expected dimension {}, got {}",
                self.d,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVector("non-finite entry".into()));
        }
        let row = DenseMatrix::from_row_slice(1, self.d, x);
        self.absorb(&vstack(&self.s, &row))
    }

    /// Double-sketch merge: stacks `incoming` (an `l × d` sketch) under this
    /// one and shrinks back to `l` rows. Returns `δ`; in SCFD mode it is
    /// already folded into [`rho`](Self::rho).
    pub fn merge(&mut self, incoming: &DenseMatrix) -> Result<f64> {
        if incoming.shape() != (self.l, self.d) {
            return Err(Error::InvalidMatrix(format!(
                "incoming sketch is {}x{}, expected {}x{}",
                incoming.nrows(),
                incoming.ncols(),
                self.l,
                self.d
            )));
        }
        self.absorb(&vstack(&self.s, incoming))
    }

    fn absorb(&mut self, stacked: &DenseMatrix) -> Result<f64> {
        let mut svd = thin_svd(stacked)?;
        // Roundoff directions of a rank-deficient stack are exact zeros.
        let cutoff = svd.singular_values.first().map_or(0.0, |s| s * RANK_RTOL);
        for s in svd.singular_values.iter_mut() {
            if *s <= cutoff {
                *s = 0.0;
            }
        }
        let sv = &svd.singular_values;
        let delta = match self.rule {
            ShrinkRule::SigmaL => sv.get(self.l - 1),
            ShrinkRule::SigmaLPlusOne => sv.get(self.l),
        }
        .map_or(0.0, |s| s * s);

        self.s.fill(0.0);
        for i in 0..self.l {
            let shrunk = sv.get(i).map_or(0.0, |s| (s * s - delta).max(0.0).sqrt());
            self.sigma[i] = shrunk;
            if shrunk > 0.0 {
                let mut row = self.s.row_mut(i);
                row.copy_from(&svd.vt.row(i));
                row.scale_mut(shrunk);
            }
        }
        self.shrunk += delta;
        if self.mode == SketchMode::Scfd {
            self.rho += delta;
        }
        Ok(delta)
    }

    /// `SᵀS + ρI`.
    pub fn approx_gram(&self) -> DenseMatrix {
        let mut g = self.s.transpose() * &self.s;
        for i in 0..self.d {
            g[(i, i)] += self.rho;
        }
        g
    }
}

/// `log det(cI_d + BᵀB)` given the singular values of `B`.
pub fn log_det_from_singvals(sv: &[f64], c: f64, d: usize) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidRegularizer(c));
    }
    if sv.len() > d {
        return Err(Error::InvalidSpectrum(format!(
            "{} singular values for dimension {d}",
            sv.len()
        )));
    }
    if sv.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpectrum("singular values must be finite and >= 0".into()));
    }
    let base = d as f64 * c.ln();
    Ok(base + sv.iter().map(|s| (s * s / c).ln_1p()).sum::<f64>())
}

/// `det(cI_d + BᵀB)`; overflows for large `d`, prefer the log form.
pub fn det_from_singvals(sv: &[f64], c: f64, d: usize) -> Result<f64> {
    log_det_from_singvals(sv, c, d).map(f64::exp)
}

fn check_woodbury(s: &DenseMatrix, hdiag: &[f64], c: f64, v: &[f64]) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::InvalidRegularizer(c));
    }
    if hdiag.len() != s.nrows() {
        return Err(Error::InvalidState(format!(
            "H has {} entries for a sketch with {} rows",
            hdiag.len(),
            s.nrows()
        )));
    }
    if v.len() != s.ncols() {
        return Err(Error::InvalidVector(format!(
            "expected dimension {}, got {}",
            s.ncols(),
            v.len()
        )));
    }
    Ok(())
}

/// `(cI + SᵀS)⁻¹ v` as `(v − Sᵀ diag(H) S v) / c`, never forming a `d × d`
/// matrix. `hdiag[i]` must be `1 / (σᵢ² + c)` for the orthogonal rows of `S`.
pub fn woodbury_inverse_apply(
    s: &DenseMatrix,
    hdiag: &[f64],
    c: f64,
    v: &[f64],
) -> Result<DenseVector> {
    check_woodbury(s, hdiag, c, v)?;
    let v = DenseVector::from_column_slice(v);
    let mut sv = s * &v;
    for (x, h) in sv.iter_mut().zip(hdiag) {
        *x *= h;
    }
    Ok((v - s.tr_mul(&sv)) / c)
}

/// `vᵀ(cI + SᵀS)⁻¹v`, clamped at zero against roundoff.
pub fn woodbury_quadratic_form(s: &DenseMatrix, hdiag: &[f64], c: f64, v: &[f64]) -> Result<f64> {
    check_woodbury(s, hdiag, c, v)?;
    Ok(quadratic_form_unchecked(s, hdiag, c, v))
}

pub(crate) fn quadratic_form_unchecked(s: &DenseMatrix, hdiag: &[f64], c: f64, v: &[f64]) -> f64 {
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    let mut correction = 0.0;
    for (i, h) in hdiag.iter().enumerate() {
        let proj: f64 = s.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        correction += h * proj * proj;
    }
    ((norm_sq - correction) / c).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{gram, psd_dominates, spectral_error, symmetric_eigenvalues};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn from_rows(l: usize, d: usize, data: &[f64]) -> SketchState {
        let mut st = SketchState::new(l, d, SketchMode::Scfd);
        st.s = DenseMatrix::from_row_slice(l, d, data);
        for i in 0..l {
            st.sigma[i] = st.s.row(i).norm();
        }
        st
    }

    #[test]
    fn append_into_empty_sketch() {
        let mut st = SketchState::new(2, 3, SketchMode::Scfd);
        let delta = st.append(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(delta, 0.0);
        assert_eq!(st.rho(), 0.0);
        let expected = DenseMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((st.matrix().abs() - expected).norm() < 1e-12);
    }

    #[test]
    fn append_with_truncation_matches_hand_svd() {
        let mut st = from_rows(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let delta = st.append(&[0.0, 1.0]).unwrap();
        assert!(close(delta, 2.0, 1e-12));
        assert!(close(st.rho(), 2.0, 1e-12));
        assert!(close(st.singular_values()[0], 2f64.sqrt(), 1e-12));
        assert!(st.singular_values()[1].abs() < 1e-12);
        let diag = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![4.0, 2.0]));
        assert!((st.approx_gram() - diag).norm() < 1e-12);
    }

    #[test]
    fn append_with_l1_moves_everything_into_rho() {
        let mut st = SketchState::new(1, 2, SketchMode::Scfd);
        let delta = st.append(&[1.0, 0.0]).unwrap();
        assert!(close(delta, 1.0, 1e-14));
        assert!(st.matrix().norm() < 1e-12);
        assert!(close(st.rho(), 1.0, 1e-14));
        let exact = gram(&DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert!(psd_dominates(&st.approx_gram(), &exact, 1e-12).unwrap());
    }

    #[test]
    fn fd_mode_leaves_rho() {
        let mut st = SketchState::new(1, 2, SketchMode::Fd);
        st.append(&[1.0, 0.0]).unwrap();
        assert_eq!(st.rho(), 0.0);
        assert!(close(st.shrunk_mass(), 1.0, 1e-14));
    }

    #[test]
    fn append_rejects_bad_input() {
        let mut st = SketchState::new(1, 2, SketchMode::Scfd);
        assert!(matches!(st.append(&[1.0]), Err(Error::InvalidVector(_))));
        assert!(matches!(st.append(&[1.0, f64::INFINITY]), Err(Error::InvalidVector(_))));
    }

    #[test]
    fn merge_examples() {
        let mut st = SketchState::new(2, 3, SketchMode::Scfd);
        assert_eq!(st.merge(&DenseMatrix::zeros(2, 3)).unwrap(), 0.0);
        assert!(st.is_zero());

        let mut st = SketchState::new(1, 2, SketchMode::Scfd);
        let delta = st.merge(&DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert!(close(delta, 1.0, 1e-14));
        assert!(st.matrix().norm() < 1e-12);

        let mut st = from_rows(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let incoming = DenseMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let delta = st.merge(&incoming).unwrap();
        assert!(close(delta, 1.0, 1e-12));
        assert!(st.matrix().norm() < 1e-12);
        assert!(close(st.rho(), 1.0, 1e-12));

        assert!(matches!(
            st.merge(&DenseMatrix::zeros(3, 3)),
            Err(Error::InvalidMatrix(_))
        ));
    }

    #[test]
    fn approx_gram_examples() {
        let st = SketchState::new(2, 3, SketchMode::Scfd);
        assert_eq!(st.approx_gram(), DenseMatrix::zeros(3, 3));
        let mut st = SketchState::new(1, 2, SketchMode::Scfd);
        st.rho = 1.0;
        assert_eq!(st.approx_gram(), DenseMatrix::identity(2, 2));
    }

    #[test]
    fn det_examples() {
        let lambda: f64 = 1.7;
        assert!(close(det_from_singvals(&[], lambda, 3).unwrap(), lambda.powi(3), 1e-14));
        assert!(close(det_from_singvals(&[2.0, 1.0], 1.0, 3).unwrap(), 10.0, 1e-14));
        assert!(matches!(
            log_det_from_singvals(&[1.0], 0.0, 2),
            Err(Error::InvalidRegularizer(_))
        ));
        assert!(matches!(
            log_det_from_singvals(&[1.0, 1.0, 1.0], 1.0, 2),
            Err(Error::InvalidSpectrum(_))
        ));
        // d = 400 with c = 20 overflows the raw determinant but not the log
        let ld = log_det_from_singvals(&[3.0; 8], 20.0, 400).unwrap();
        assert!(ld.is_finite() && det_from_singvals(&[3.0; 8], 20.0, 400).unwrap().is_infinite());
    }

    #[test]
    fn woodbury_examples() {
        let z = DenseMatrix::zeros(1, 2);
        let out = woodbury_inverse_apply(&z, &[0.5], 2.0, &[1.0, 0.0]).unwrap();
        assert!((out - DenseVector::from_vec(vec![0.5, 0.0])).norm() < 1e-15);

        let s = DenseMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = woodbury_inverse_apply(&s, &[0.5], 1.0, &[1.0, 1.0]).unwrap();
        assert!((out - DenseVector::from_vec(vec![0.5, 1.0])).norm() < 1e-15);
        let q = woodbury_quadratic_form(&s, &[0.5], 1.0, &[1.0, 1.0]).unwrap();
        assert!(close(q, 1.5, 1e-15));

        assert!(matches!(
            woodbury_inverse_apply(&s, &[0.5, 0.1], 1.0, &[1.0, 1.0]),
            Err(Error::InvalidState(_))
        ));
    }

    fn random_stream(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn low_rank_stream_never_truncates() {
        // rows drawn from a 3-dimensional subspace of R^12, l = 8
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = DenseMatrix::from_fn(12, 3, |_, _| rng.random_range(-0.5..0.5)).qr().q();
        let mut local = SketchState::new(8, 12, SketchMode::Scfd);
        let mut global = SketchState::new(8, 12, SketchMode::Scfd);
        for step in 0..3000 {
            let c = DenseVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            local.append((&basis * c).as_slice()).unwrap();
            if step % 7 == 6 {
                global.merge(local.matrix()).unwrap();
                local.reset();
            }
        }
        assert_eq!(global.rho(), 0.0);
        let s = global.matrix();
        let outside = (s - s * &basis * basis.transpose()).norm();
        assert!(outside <= 1e-12 * s.norm(), "{outside}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scfd_sandwich_and_monotone(d in 2usize..16, l_frac in 0.0f64..1.0, n in 1usize..120, seed: u64) {
            let l = 1 + ((d - 1) as f64 * l_frac) as usize;
            let mut st = SketchState::new(l, d, SketchMode::Scfd);
            let mut exact = DenseMatrix::zeros(d, d);
            let mut prev = st.approx_gram();
            let mut prev_rho = 0.0;
            for x in random_stream(n, d, seed) {
                st.append(&x).unwrap();
                let xv = DenseVector::from_vec(x);
                exact += &xv * xv.transpose();
                let approx = st.approx_gram();
                prop_assert!(psd_dominates(&approx, &exact, 1e-7).unwrap());
                prop_assert!(psd_dominates(&exact, &gram(st.matrix()), 1e-7).unwrap());
                prop_assert!(psd_dominates(&approx, &prev, 1e-7).unwrap());
                prop_assert!(st.rho() >= prev_rho);
                prev_rho = st.rho();
                prev = approx;
            }
        }

        #[test]
        fn merge_is_monotone(d in 2usize..12, l_frac in 0.0f64..1.0, seed: u64) {
            let l = 1 + ((d - 1) as f64 * l_frac) as usize;
            let mut server = SketchState::new(l, d, SketchMode::Scfd);
            for (i, chunk) in random_stream(30, d, seed).chunks(6).enumerate() {
                let mut local = SketchState::new(l, d, SketchMode::Scfd);
                for x in chunk {
                    local.append(x).unwrap();
                }
                let before = server.approx_gram();
                server.merge(local.matrix()).unwrap();
                // local rho travels separately, so compare against sketched grams
                let after = server.approx_gram();
                prop_assert!(psd_dominates(&after, &(before + gram(local.matrix())), 1e-7).unwrap(), "step {}", i);
            }
        }

        #[test]
        fn fd_error_within_spectral_bound(d in 2usize..16, l_frac in 0.0f64..1.0, n in 1usize..150, seed: u64) {
            let l = 1 + ((d - 1) as f64 * l_frac) as usize;
            let lambda = 0.7;
            let mut st = SketchState::new(l, d, SketchMode::Fd);
            let mut exact = DenseMatrix::zeros(d, d);
            for x in random_stream(n, d, seed) {
                st.append(&x).unwrap();
                let xv = DenseVector::from_vec(x);
                exact += &xv * xv.transpose();
            }
            let err = symmetric_eigenvalues(&(&exact - gram(st.matrix()))).unwrap()[0];
            let eps = spectral_error(&symmetric_eigenvalues(&exact).unwrap(), lambda, l).unwrap();
            prop_assert!(err <= lambda * eps + 1e-8 * (1.0 + exact.norm()));
        }
    }

    #[test]
    fn det_matches_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.random_range(1..=12);
            let n = rng.random_range(1..=d.min(4));
            let c = rng.random_range(0.1..3.0);
            let b = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
            let sv = crate::spectral::singular_values(&b).unwrap();
            let mut dense = gram(&b);
            for i in 0..d {
                dense[(i, i)] += c;
            }
            let oracle = dense.lu().determinant();
            let got = det_from_singvals(&sv, c, d).unwrap();
            assert!((got - oracle).abs() <= 1e-8 * oracle.abs(), "{got} vs {oracle}");
        }
    }

    #[test]
    fn woodbury_matches_lu_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let d = rng.random_range(2..=10);
            let l = rng.random_range(1..d);
            let c = rng.random_range(0.2..3.0);
            let raw = DenseMatrix::from_fn(l, d, |_, _| rng.random_range(-2.0..2.0));
            let svd = crate::spectral::thin_svd(&raw).unwrap();
            let mut s = svd.vt.clone();
            for (i, sv) in svd.singular_values.iter().enumerate() {
                s.row_mut(i).scale_mut(*sv);
            }
            let h: Vec<f64> = svd.singular_values.iter().map(|sv| 1.0 / (sv * sv + c)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dense = gram(&s);
            for i in 0..d {
                dense[(i, i)] += c;
            }
            let oracle = dense.lu().solve(&DenseVector::from_column_slice(&v)).unwrap();
            let got = woodbury_inverse_apply(&s, &h, c, &v).unwrap();
            assert!((&got - &oracle).norm() <= 1e-8 * oracle.norm());
            let q = woodbury_quadratic_form(&s, &h, c, &v).unwrap();
            let q_oracle = DenseVector::from_column_slice(&v).dot(&oracle);
            assert!((q - q_oracle).abs() <= 1e-8 * q_oracle.abs());
        }
    }
}
