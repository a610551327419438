//! Matrix-valued covariance functions for deformation fields.
//!
//! A kernel is a weighted bundle of isotropic radial basis functions taken at
//! a ladder of length scales, multiplied by the `d × d` identity. The three
//! basis functions are rescaled so that they integrate to the same value on
//! `[0, ∞)`, which makes a given scale comparable across kinds.

mod gpp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::validate_covariance;

pub use gpp::{
    estimate_hyperparameters, fit_hyperparameters, gpp_loss, gpp_loss_and_gradient,
    loo_negative_log_likelihood, GppFit, GppOptions,
};

/// Support radius of the Wendland function.
pub const R_WENDLAND: f64 = 1.0;

/// `r_G = 2 r_W / (3 √π)`.
pub const R_GAUSSIAN: f64 = 2.0 * R_WENDLAND / (3.0 * 1.772_453_850_905_516);

/// `r_IQ = 2 r_W / (3 π)`.
pub const R_INVERSE_QUADRATIC: f64 = 2.0 * R_WENDLAND / (3.0 * std::f64::consts::PI);

/// Radial basis function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Gaussian,
    InverseQuadratic,
    Wendland1,
}

/// Rescaling constants `(r_G, r_IQ)` for the Gaussian and inverse quadratic
/// functions, relative to a Wendland support radius of 1.
pub fn rescale_constants() -> (f64, f64) {
    (R_GAUSSIAN, R_INVERSE_QUADRATIC)
}

/// Evaluates the rescaled basis function at radius `r ≥ 0`.
pub fn eval_basis(kind: BasisKind, r: f64) -> Result<f64> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::Domain(format!("basis radius must be nonnegative, got {r}")));
    }
    Ok(basis_value(kind, r))
}

#[inline]
pub(crate) fn basis_value(kind: BasisKind, r: f64) -> f64 {
    match kind {
        BasisKind::Gaussian => {
            let t = r / R_GAUSSIAN;
            (-t * t).exp()
        }
        BasisKind::InverseQuadratic => {
            let t = r / R_INVERSE_QUADRATIC;
            1.0 / (1.0 + t * t)
        }
        BasisKind::Wendland1 => {
            let t = r / R_WENDLAND;
            if t >= 1.0 {
                0.0
            } else {
                let u = 1.0 - t;
                (4.0 * t + 1.0) * u * u * u * u
            }
        }
    }
}

/// Kernel bundle `k(x, x') = [Σ_s θ_s K(‖x − x'‖ / ρ_s)] · I_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec", into = "RawKernelSpec")]
pub struct KernelSpec {
    basis: BasisKind,
    scales: Vec<f64>,
    weights: Vec<f64>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct RawKernelSpec {
    basis: BasisKind,
    scales: Vec<f64>,
    weights: Vec<f64>,
    dimension: usize,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(raw.basis, raw.scales, raw.weights, raw.dimension)
    }
}

impl From<KernelSpec> for RawKernelSpec {
    fn from(spec: KernelSpec) -> Self {
        RawKernelSpec {
            basis: spec.basis,
            scales: spec.scales,
            weights: spec.weights,
            dimension: spec.dimension,
        }
    }
}

impl KernelSpec {
    pub fn new(
        basis: BasisKind,
        scales: Vec<f64>,
        weights: Vec<f64>,
        dimension: usize,
    ) -> Result<Self> {
        if !(dimension == 2 || dimension == 3) {
            return Err(Error::Validation(format!(
                "kernel dimension must be 2 or 3, got {dimension}"
            )));
        }
        if scales.is_empty() {
            return Err(Error::Validation("kernel needs at least one scale".into()));
        }
        if scales.len() != weights.len() {
            return Err(Error::Validation(format!(
                "{} scales but {} weights",
                scales.len(),
                weights.len()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation("scales must be finite and positive".into()));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("scales must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Validation("at least one weight must be positive".into()));
        }
        Ok(Self {
            basis,
            scales,
            weights,
            dimension,
        })
    }

    /// Pyramidal ladder `ρ_s = 2^{s-1} ρ_1`, `s = 1..=count`.
    pub fn ladder(
        basis: BasisKind,
        rho1: f64,
        count: usize,
        weights: Vec<f64>,
        dimension: usize,
    ) -> Result<Self> {
        let scales = (0..count).map(|s| rho1 * 2f64.powi(s as i32)).collect();
        Self::new(basis, scales, weights, dimension)
    }

    /// Number of ladder steps so that the coarsest scale is closest (in
    /// log terms) to `extent`.
    pub fn scale_count_for_extent(rho1: f64, extent: f64) -> usize {
        if extent <= rho1 {
            return 1;
        }
        ((extent / rho1).log2().round() as usize) + 1
    }

    pub fn basis(&self) -> BasisKind {
        self.basis
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.basis, self.scales.clone(), weights, self.dimension)
    }

    /// Scalar factor of the kernel at distance `r`.
    #[inline]
    pub fn scalar(&self, r: f64) -> f64 {
        self.scales
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(rho, w)| w * basis_value(self.basis, r / rho))
            .sum()
    }

    /// Prior variance per component, `Σ_s θ_s`.
    pub fn variance(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Distance beyond which the kernel vanishes identically, if any.
    pub fn support_radius(&self) -> Option<f64> {
        match self.basis {
            BasisKind::Wendland1 => self.scales.last().map(|rho| rho * R_WENDLAND),
            _ => None,
        }
    }

    /// Scalar factor between two points (no dimension check).
    #[inline]
    pub(crate) fn scalar_between(&self, x: &[f64], y: &[f64]) -> f64 {
        self.scalar(distance(x, y))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dimension, x.len())
    }
}

#[inline]
pub(crate) fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// `d × d` covariance block between `x` and `x'`.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x_prime: &[f64]) -> Result<DMatrix<f64>> {
    spec.check_point(x)?;
    spec.check_point(x_prime)?;
    let d = spec.dimension();
    Ok(DMatrix::identity(d, d) * spec.scalar_between(x, x_prime))
}

/// Blockwise `Nd × Nd` Gram matrix of `points`, optionally with a noise
/// covariance added to each diagonal block.
pub fn gram_matrix(
    spec: &KernelSpec,
    points: &[Vec<f64>],
    noise: Option<&[DMatrix<f64>]>,
) -> Result<DMatrix<f64>> {
    for p in points {
        spec.check_point(p)?;
    }
    let d = spec.dimension();
    if let Some(noise) = noise {
        if noise.len() != points.len() {
            return Err(Error::Validation(format!(
                "{} noise blocks for {} points",
                noise.len(),
                points.len()
            )));
        }
        for block in noise {
            if block.nrows() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: block.nrows(),
                });
            }
            validate_covariance(block, 1e-12)?;
        }
    }
    let mut gram = cross_gram(spec, points, points);
    if let Some(noise) = noise {
        for (i, block) in noise.iter().enumerate() {
            let mut view = gram.view_mut((i * d, i * d), (d, d));
            view += block;
        }
    }
    Ok(gram)
}

/// Blockwise `Nd × Md` cross-covariance between two point lists.
pub(crate) fn cross_gram(spec: &KernelSpec, rows: &[Vec<f64>], cols: &[Vec<f64>]) -> DMatrix<f64> {
    let d = spec.dimension();
    let mut out = DMatrix::zeros(rows.len() * d, cols.len() * d);
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            let v = spec.scalar_between(a, b);
            if v != 0.0 {
                for c in 0..d {
                    out[(i * d + c, j * d + c)] = v;
                }
            }
        }
    }
    out
}

/// `Ld × d` column of covariances between `points` and a single `x`.
pub(crate) fn cross_column(spec: &KernelSpec, points: &[Vec<f64>], x: &[f64]) -> DMatrix<f64> {
    let d = spec.dimension();
    let mut out = DMatrix::zeros(points.len() * d, d);
    for (i, p) in points.iter().enumerate() {
        let v = spec.scalar_between(p, x);
        if v != 0.0 {
            for c in 0..d {
                out[(i * d + c, c)] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn wendland_values() {
        assert_eq!(eval_basis(BasisKind::Wendland1, 0.0).unwrap(), 1.0);
        assert_eq!(eval_basis(BasisKind::Wendland1, 1.5).unwrap(), 0.0);
        assert_eq!(eval_basis(BasisKind::Wendland1, 1.0).unwrap(), 0.0);
        assert_relative_eq!(eval_basis(BasisKind::Wendland1, 0.5).unwrap(), 0.1875);
    }

    #[test]
    fn gaussian_closed_form() {
        let r_g = 2.0 / (3.0 * std::f64::consts::PI.sqrt());
        let expected = (-0.25 / (r_g * r_g)).exp();
        assert_relative_eq!(
            eval_basis(BasisKind::Gaussian, 0.5).unwrap(),
            expected,
            max_relative = 1e-14
        );
    }

    #[test]
    fn rescale_constant_values() {
        let (r_g, r_iq) = rescale_constants();
        assert!((r_g - 0.376_126).abs() < 1e-6);
        assert!((r_iq - 0.212_207).abs() < 1e-6);
    }

    #[test]
    fn negative_radius_is_rejected() {
        assert!(matches!(
            eval_basis(BasisKind::Gaussian, -1e-3),
            Err(Error::Domain(_))
        ));
        assert!(eval_basis(BasisKind::Gaussian, f64::NAN).is_err());
    }

    #[test]
    fn kernel_eval_examples() {
        let spec = KernelSpec::new(BasisKind::Wendland1, vec![10.0, 20.0], vec![1.0, 2.0], 2).unwrap();
        let k0 = kernel_eval(&spec, &[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!(k0, DMatrix::identity(2, 2) * 3.0);
        let k = kernel_eval(&spec, &[0.0, 0.0], &[6.0, 8.0]).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.375, epsilon = 1e-15);
        assert_eq!(k[(0, 1)], 0.0);

        let single = KernelSpec::new(BasisKind::Wendland1, vec![10.0], vec![1.0], 2).unwrap();
        let far = kernel_eval(&single, &[0.0, 0.0], &[12.0, 0.0]).unwrap();
        assert_eq!(far, DMatrix::zeros(2, 2));
    }

    #[test]
    fn kernel_eval_dimension_mismatch() {
        let spec = KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![1.0], 2).unwrap();
        assert!(matches!(
            kernel_eval(&spec, &[0.0, 0.0, 0.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(BasisKind::Gaussian, vec![10.0, 5.0], vec![1.0, 1.0], 2).is_err());
        assert!(KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![0.0], 2).is_err());
        assert!(KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![-1.0], 2).is_err());
        assert!(KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![1.0], 4).is_err());
        let ladder = KernelSpec::ladder(BasisKind::Wendland1, 10.0, 4, vec![1.0; 4], 3).unwrap();
        assert_eq!(ladder.scales(), &[10.0, 20.0, 40.0, 80.0]);
        assert_eq!(KernelSpec::scale_count_for_extent(10.0, 128.0), 5);
        assert_eq!(KernelSpec::scale_count_for_extent(10.0, 80.0), 4);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = KernelSpec::ladder(BasisKind::Wendland1, 10.0, 3, vec![0.5, 1.0, 2.0], 2).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"basis\":\"wendland1\""));
        let back: KernelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"basis":"gaussian","scales":[2,1],"weights":[1,1],"dimension":2}"#;
        assert!(serde_json::from_str::<KernelSpec>(bad).is_err());
    }

    #[test]
    fn gram_single_point_and_duplicates() {
        let spec = KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![2.0], 2).unwrap();
        let g = gram_matrix(&spec, &[vec![1.0, 1.0]], None).unwrap();
        assert_eq!(g, kernel_eval(&spec, &[1.0, 1.0], &[1.0, 1.0]).unwrap());

        let g2 = gram_matrix(&spec, &[vec![1.0, 1.0], vec![1.0, 1.0]], None).unwrap();
        assert_eq!(g2.view((0, 0), (2, 2)), g2.view((0, 2), (2, 2)));
        assert_eq!(g2.view((0, 0), (2, 2)), g2.view((2, 2), (2, 2)));
        let min_eig = g2.symmetric_eigenvalues().min();
        assert!(min_eig.abs() < 1e-12);
    }

    #[test]
    fn gram_matches_naive_assembly() {
        let spec = KernelSpec::ladder(BasisKind::InverseQuadratic, 5.0, 3, vec![1.0, 0.5, 0.25], 2).unwrap();
        let pts = vec![vec![0.0, 1.0], vec![4.0, -2.0], vec![7.5, 3.0], vec![-3.0, 9.0]];
        let noise: Vec<_> = (0..4)
            .map(|i| DMatrix::from_row_slice(2, 2, &[1.0 + i as f64, 0.2, 0.2, 0.5]))
            .collect();
        let g = gram_matrix(&spec, &pts, Some(&noise)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut block = kernel_eval(&spec, &pts[i], &pts[j]).unwrap();
                if i == j {
                    block += &noise[i];
                }
                assert_eq!(g.view((2 * i, 2 * j), (2, 2)).into_owned(), block);
            }
        }
    }

    #[test]
    fn gram_rejects_non_psd_noise() {
        let spec = KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![1.0], 2).unwrap();
        let bad = vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])];
        assert!(matches!(
            gram_matrix(&spec, &[vec![0.0, 0.0]], Some(&bad)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn wendland_gram_is_block_sparse() {
        let spec = KernelSpec::ladder(BasisKind::Wendland1, 4.0, 2, vec![1.0, 1.0], 2).unwrap();
        let pts = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![8.0, 0.0], vec![20.0, 0.0]];
        let g = gram_matrix(&spec, &pts, None).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if distance(&pts[i], &pts[j]) >= 8.0 {
                    assert_eq!(g.view((2 * i, 2 * j), (2, 2)).amax(), 0.0);
                }
            }
        }
    }

    fn kind_strategy() -> impl Strategy<Value = BasisKind> {
        prop_oneof![
            Just(BasisKind::Gaussian),
            Just(BasisKind::InverseQuadratic),
            Just(BasisKind::Wendland1)
        ]
    }

    proptest! {
        #[test]
        fn basis_bounded_and_nonincreasing(kind in kind_strategy(), r in 0.0f64..5.0, dr in 0.0f64..1.0) {
            let a = eval_basis(kind, r).unwrap();
            let b = eval_basis(kind, r + dr).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a);
        }

        #[test]
        fn kernel_is_symmetric(
            kind in kind_strategy(),
            x in prop::collection::vec(-50.0f64..50.0, 3),
            y in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let spec = KernelSpec::ladder(kind, 10.0, 3, vec![1.0, 0.3, 2.0], 3).unwrap();
            let kxy = kernel_eval(&spec, &x, &y).unwrap();
            let kyx = kernel_eval(&spec, &y, &x).unwrap();
            prop_assert_eq!(kxy, kyx.transpose());
        }

        #[test]
        fn noisy_gram_is_positive_definite(
            kind in kind_strategy(),
            coords in prop::collection::vec(0.0f64..60.0, 12),
            noise in 0.01f64..2.0,
        ) {
            let pts: Vec<Vec<f64>> = coords.chunks(2).map(|c| c.to_vec()).collect();
            let spec = KernelSpec::ladder(kind, 10.0, 3, vec![1.0, 1.0, 1.0], 2).unwrap();
            let blocks = vec![DMatrix::identity(2, 2) * noise; pts.len()];
            let g = gram_matrix(&spec, &pts, Some(&blocks)).unwrap();
            prop_assert!(nalgebra::Cholesky::new(g).is_some());
        }
    }
}
