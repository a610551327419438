//! Dense linear-algebra helpers shared by the kernel, GP and suggestion code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal on the first failed factorization.
pub const JITTER_BASE: f64 = 1e-10;
/// Multiplicative step between successive jitter levels.
pub const JITTER_STEP: f64 = 100.0;
/// Number of escalations after the first jitter attempt.
pub const JITTER_ESCALATIONS: usize = 3;

/// Cholesky factorization, retrying with a growing diagonal jitter
/// proportional to the mean diagonal when the plain factorization fails.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let n = m.nrows().max(1);
    let mean_diag = (m.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_BASE * mean_diag;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(chol);
        }
        jitter *= JITTER_STEP;
    }
    Err(Error::NotPositiveDefinite {
        retries: JITTER_ESCALATIONS,
    })
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let inv = cholesky_jittered(m)?.inverse();
    Ok(symmetrize(&inv))
}

/// log det of a symmetric positive definite matrix via its Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = cholesky_jittered(m)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Strict variant of [`log_det_spd`]: no jitter, fails on a singular matrix.
pub fn log_det_spd_strict(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let chol = Cholesky::new(m.clone())?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Checks that `m` is square, symmetric within `1e-12` (relative to its
/// largest entry) and has no eigenvalue below `-eig_tol`.
pub fn validate_covariance(m: &DMatrix<f64>, eig_tol: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Validation(format!(
            "covariance must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariance has non-finite entries".into()));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::Validation(format!(
            "covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min < -eig_tol {
        return Err(Error::Validation(format!(
            "covariance is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Replaces every eigenvalue below `floor` by `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose()))
}

/// Eigen-decomposition of a small symmetric matrix, eigenvalues ascending.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Inverse of a growing symmetric positive definite matrix, extended one
/// diagonal block at a time through the Schur complement of the new block.
#[derive(Debug, Clone)]
pub struct BlockInverse {
    inv: DMatrix<f64>,
}

impl Default for BlockInverse {
    fn default() -> Self {
        Self::empty()
    }
}

impl BlockInverse {
    pub fn empty() -> Self {
        Self {
            inv: DMatrix::zeros(0, 0),
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        Ok(Self { inv: spd_inverse(m)? })
    }

    pub fn dim(&self) -> usize {
        self.inv.nrows()
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    /// Extends the represented matrix `A` to `[[A, B], [Bᵀ, C]]`.
    ///
    /// `cross` is `B` (n×m) and `diag` is `C` (m×m).
    pub fn append(&mut self, cross: &DMatrix<f64>, diag: &DMatrix<f64>) -> Result<()> {
        let n = self.dim();
        let m = diag.nrows();
        if cross.nrows() != n || cross.ncols() != m || diag.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: cross.nrows(),
            });
        }
        if n == 0 {
            self.inv = spd_inverse(diag)?;
            return Ok(());
        }
        // P·B, reused in every block of the update.
        let pb = &self.inv * cross;
        let schur = symmetrize(&(diag - cross.transpose() * &pb));
        let schur_inv = spd_inverse(&schur)?;
        let pb_s = &pb * &schur_inv;

        let mut out = DMatrix::zeros(n + m, n + m);
        let top_left = &self.inv + &pb_s * pb.transpose();
        out.view_mut((0, 0), (n, n)).copy_from(&top_left);
        out.view_mut((0, n), (n, m)).copy_from(&(-&pb_s));
        out.view_mut((n, 0), (m, n)).copy_from(&(-pb_s.transpose()));
        out.view_mut((n, n), (m, m)).copy_from(&schur_inv);
        self.inv = symmetrize(&out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed;
        let a = DMatrix::from_fn(n, n, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn block_append_matches_dense_inverse() {
        let full = spd(9, 3);
        let mut blk = BlockInverse::from_matrix(&full.view((0, 0), (3, 3)).into_owned()).unwrap();
        for start in [3, 6] {
            let cross = full.view((0, start), (start, 3)).into_owned();
            let diag = full.view((start, start), (3, 3)).into_owned();
            blk.append(&cross, &diag).unwrap();
        }
        let dense = full.clone().try_inverse().unwrap();
        let rel = (blk.inverse() - &dense).norm() / dense.norm();
        assert!(rel < 1e-12, "rel = {rel}");
    }

    #[test]
    fn jitter_rescues_rank_deficient_matrix() {
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let m = &v * v.transpose();
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky_jittered(&m).is_ok());
    }

    #[test]
    fn negative_definite_fails_after_escalations() {
        let m = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(matches!(
            cholesky_jittered(&m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn clip_psd_removes_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let c = clip_psd(&m);
        assert!(sorted_eigen(&c).0[0] >= 0.0);
    }

    #[test]
    fn covariance_validation() {
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(validate_covariance(&ok, 0.0).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.4, 1.0]);
        assert!(validate_covariance(&asym, 0.0).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(validate_covariance(&indef, 0.0).is_err());
    }
}
