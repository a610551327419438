//! Annotation triplets `(x, y, Σ)` and the two ways of obtaining `Σ`: a
//! user-drawn confidence ellipse, or the Gaussian fit of several raters'
//! pointwise clicks.

mod io;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{floor_eigenvalues, sorted_eigen, symmetrize, validate_covariance};
use crate::stats::chi2_quantile;

pub use io::{read_annotations_csv, read_annotations_json, write_annotations_csv, write_annotations_json};

/// Significance level used when an ellipse does not specify one.
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Smallest annotation standard deviation admitted into the GP, in pixels.
pub const MIN_STD: f64 = 0.25;

/// `MIN_STD²`, the eigenvalue floor applied to annotation covariances.
pub const MIN_VARIANCE: f64 = MIN_STD * MIN_STD;

const GAMMA_TOL: f64 = 1e-10;
const ORTHONORMAL_TOL: f64 = 1e-9;

/// A queried location `x`, its annotated correspondence `y` and the
/// covariance `sigma` of the annotation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotation", into = "RawAnnotation")]
pub struct Annotation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    x: Vec<f64>,
    y: Vec<f64>,
    sigma: Vec<Vec<f64>>,
}

impl TryFrom<RawAnnotation> for Annotation {
    type Error = Error;

    fn try_from(raw: RawAnnotation) -> Result<Self> {
        let d = raw.sigma.len();
        if raw.sigma.iter().any(|row| row.len() != d) {
            return Err(Error::Validation("sigma must be a square array".into()));
        }
        let sigma = DMatrix::from_fn(d, d, |i, j| raw.sigma[i][j]);
        Annotation::new(raw.x, raw.y, sigma)
    }
}

impl From<Annotation> for RawAnnotation {
    fn from(a: Annotation) -> Self {
        let d = a.sigma.nrows();
        RawAnnotation {
            sigma: (0..d).map(|i| (0..d).map(|j| a.sigma[(i, j)]).collect()).collect(),
            x: a.x,
            y: a.y,
        }
    }
}

impl Annotation {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = x.len();
        if !(d == 2 || d == 3) {
            return Err(Error::Validation(format!("annotation dimension must be 2 or 3, got {d}")));
        }
        check_dim(d, y.len())?;
        check_dim(d, sigma.nrows())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Validation("annotation coordinates must be finite".into()));
        }
        validate_covariance(&sigma, 0.0)?;
        Ok(Self { x, y, sigma })
    }

    /// Annotation with covariance `std² · I`.
    pub fn isotropic(x: Vec<f64>, y: Vec<f64>, std: f64) -> Result<Self> {
        let d = x.len();
        Self::new(x, y, DMatrix::identity(d, d) * (std * std))
    }

    pub fn dimension(&self) -> usize {
        self.x.len()
    }
}

/// A confidence region drawn around an annotated point: the true location
/// lies inside it with probability `1 − alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Vec<f64>,
    /// Orthonormal axis directions, one per dimension.
    pub axes: Vec<Vec<f64>>,
    /// Semi-axis lengths, matching `axes`.
    pub radii: Vec<f64>,
    pub alpha: f64,
}

impl Ellipse {
    /// Axis-aligned 2-D ellipse rotated by `angle` radians.
    pub fn rotated_2d(center: [f64; 2], radii: [f64; 2], angle: f64, alpha: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            center: center.to_vec(),
            axes: vec![vec![c, s], vec![-s, c]],
            radii: radii.to_vec(),
            alpha,
        }
    }

    pub fn circle(center: Vec<f64>, radius: f64, alpha: f64) -> Self {
        let d = center.len();
        let axes = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            center,
            axes,
            radii: vec![radius; d],
            alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.center.len();
        if self.axes.len() != d || self.radii.len() != d {
            return Err(Error::Validation(format!(
                "ellipse in dimension {d} needs {d} axes and radii"
            )));
        }
        for (i, a) in self.axes.iter().enumerate() {
            check_dim(d, a.len())?;
            for (j, b) in self.axes.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Validation("ellipse axes must be orthonormal".into()));
                }
            }
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Validation("ellipse radii must be positive".into()));
        }
        Ok(())
    }
}

/// `γ` such that `F(γ², d) = 1 − α` for the χ²(d) CDF `F`.
pub fn gamma_from_alpha(alpha: f64, d: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if d == 0 {
        return Err(Error::Domain("dimension must be positive".into()));
    }
    Ok(chi2_quantile(1.0 - alpha, d, GAMMA_TOL)?.sqrt())
}

/// `Σ = V · diag((r_i / γ)²) · Vᵀ`.
pub fn covariance_from_ellipse(e: &Ellipse) -> Result<DMatrix<f64>> {
    e.validate()?;
    let d = e.center.len();
    let gamma = gamma_from_alpha(e.alpha, d)?;
    let v = DMatrix::from_fn(d, d, |i, j| e.axes[j][i]);
    let diag = DVector::from_iterator(d, e.radii.iter().map(|r| (r / gamma).powi(2)));
    Ok(symmetrize(&(&v * DMatrix::from_diagonal(&diag) * v.transpose())))
}

/// Inverse of [`covariance_from_ellipse`]: axes are the eigenvectors of
/// `sigma`, largest first, and radii are `γ · √λ_i`.
pub fn ellipse_from_covariance(sigma: &DMatrix<f64>, center: &[f64], alpha: f64) -> Result<Ellipse> {
    let d = center.len();
    check_dim(d, sigma.nrows())?;
    validate_covariance(sigma, 0.0)?;
    let gamma = gamma_from_alpha(alpha, d)?;
    let (values, vectors) = sorted_eigen(sigma);
    if values[0] <= 0.0 {
        return Err(Error::Degenerate(
            "covariance has a zero eigenvalue; the ellipse would be flat".into(),
        ));
    }
    let mut axes = Vec::with_capacity(d);
    let mut radii = Vec::with_capacity(d);
    for k in (0..d).rev() {
        axes.push(vectors.column(k).iter().copied().collect());
        radii.push(gamma * values[k].sqrt());
    }
    Ok(Ellipse {
        center: center.to_vec(),
        axes,
        radii,
        alpha,
    })
}

/// Gaussian fit of several raters' clicks at the same queried location,
/// with the covariance floored at [`MIN_VARIANCE`].
pub fn fuse_pointwise(points: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    fuse_pointwise_with_floor(points, MIN_VARIANCE)
}

/// [`fuse_pointwise`] with an explicit eigenvalue floor.
pub fn fuse_pointwise_with_floor(points: &[Vec<f64>], floor: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let first = points
        .first()
        .ok_or_else(|| Error::InsufficientData("fusion needs at least one point".into()))?;
    let d = first.len();
    for p in points {
        check_dim(d, p.len())?;
    }
    let m = points.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|c| points.iter().map(|p| p[c]).sum::<f64>() / m)
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    if points.len() >= 2 {
        for p in points {
            let dev = DVector::from_iterator(d, p.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &dev * dev.transpose();
        }
        cov /= m - 1.0;
    }
    Ok((mean, floor_eigenvalues(&cov, floor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const GAMMA2_2D: f64 = 9.210_340_371_976_184; // -2 ln(0.01)

    #[test]
    fn gamma_two_dimensional() {
        let g = gamma_from_alpha(0.01, 2).unwrap();
        assert!((g * g - 9.21).abs() < 5e-3);
        assert!((g * g - GAMMA2_2D).abs() < 1e-9);
    }

    #[test]
    fn gamma_cdf_inversion_identity() {
        let alpha = 1.0 - crate::stats::chi2_cdf(1.0, 3);
        assert!((gamma_from_alpha(alpha, 3).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gamma_rejects_bad_alpha() {
        assert!(gamma_from_alpha(0.0, 2).is_err());
        assert!(gamma_from_alpha(1.0, 2).is_err());
        assert!(gamma_from_alpha(-0.5, 2).is_err());
    }

    #[test]
    fn circle_covariance() {
        let r = 3.0;
        let cov = covariance_from_ellipse(&Ellipse::circle(vec![0.0, 0.0], r, 0.01)).unwrap();
        let expected = DMatrix::identity(2, 2) * (r * r / GAMMA2_2D);
        assert_relative_eq!(cov, expected, max_relative = 1e-9);
    }

    #[test]
    fn axis_aligned_covariance() {
        let e = Ellipse::rotated_2d([0.0, 0.0], [3.0, 1.0], 0.0, 0.01);
        let cov = covariance_from_ellipse(&e).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[9.0, 0.0, 0.0, 1.0]) / GAMMA2_2D;
        assert_relative_eq!(cov, expected, max_relative = 1e-9);
    }

    #[test]
    fn non_orthonormal_axes_rejected() {
        let e = Ellipse {
            center: vec![0.0, 0.0],
            axes: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            radii: vec![1.0, 1.0],
            alpha: 0.01,
        };
        assert!(matches!(covariance_from_ellipse(&e), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_covariance_gives_circle() {
        let e = ellipse_from_covariance(&DMatrix::identity(2, 2), &[1.0, 2.0], 0.01).unwrap();
        for r in &e.radii {
            assert_relative_eq!(*r, GAMMA2_2D.sqrt(), max_relative = 1e-9);
        }
    }

    #[test]
    fn diagonal_covariance_ratio() {
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let e = ellipse_from_covariance(&sigma, &[0.0, 0.0], 0.01).unwrap();
        assert_relative_eq!(e.radii[0] / e.radii[1], 2.0, max_relative = 1e-12);
        assert_relative_eq!(e.axes[0][0].abs(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ellipse_from_non_symmetric_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 0.0, 1.0]);
        assert!(ellipse_from_covariance(&sigma, &[0.0, 0.0], 0.01).is_err());
    }

    #[test]
    fn fusion_examples() {
        let (mean, cov) = fuse_pointwise(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        assert_relative_eq!(mean[0], 1.0);
        assert_relative_eq!(mean[1], 1.0);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert_relative_eq!(cov, expected, epsilon = 1e-12);

        let (_, single) = fuse_pointwise(&[vec![5.0, 5.0, 5.0]]).unwrap();
        assert_relative_eq!(single, DMatrix::identity(3, 3) * MIN_VARIANCE, epsilon = 1e-15);
        let (_, same) = fuse_pointwise(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_relative_eq!(same, DMatrix::identity(2, 2) * MIN_VARIANCE, epsilon = 1e-15);

        let (mid, pair) = fuse_pointwise(&[vec![0.0, 0.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!(mid, vec![2.0, 2.0]);
        let (values, vectors) = sorted_eigen(&pair);
        assert_relative_eq!(values[0], MIN_VARIANCE, epsilon = 1e-12);
        let major = vectors.column(1);
        assert_relative_eq!(major[0].abs(), major[1].abs(), epsilon = 1e-12);

        assert!(fuse_pointwise(&[]).is_err());
    }

    fn rotation_2d(angle: f64) -> DMatrix<f64> {
        let (s, c) = angle.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    proptest! {
        #[test]
        fn ellipse_eigenvalues_match_radii(r1 in 0.1f64..20.0, r2 in 0.1f64..20.0, angle in 0.0f64..6.3, alpha in 0.001f64..0.5) {
            let e = Ellipse::rotated_2d([0.0, 0.0], [r1, r2], angle, alpha);
            let cov = covariance_from_ellipse(&e).unwrap();
            let g = gamma_from_alpha(alpha, 2).unwrap();
            let (values, _) = sorted_eigen(&cov);
            let mut expected = [(r1 / g).powi(2), (r2 / g).powi(2)];
            expected.sort_by(f64::total_cmp);
            prop_assert!((values[0] - expected[0]).abs() < 1e-9 * expected[1].max(1.0));
            prop_assert!((values[1] - expected[1]).abs() < 1e-9 * expected[1].max(1.0));
            prop_assert!(validate_covariance(&cov, 0.0).is_ok());
        }

        #[test]
        fn rotating_axes_conjugates_covariance(r1 in 0.1f64..20.0, r2 in 0.1f64..20.0, a in 0.0f64..6.3, b in 0.0f64..6.3) {
            let base = covariance_from_ellipse(&Ellipse::rotated_2d([0.0, 0.0], [r1, r2], a, 0.01)).unwrap();
            let turned = covariance_from_ellipse(&Ellipse::rotated_2d([0.0, 0.0], [r1, r2], a + b, 0.01)).unwrap();
            let rot = rotation_2d(b);
            let expected = &rot * base * rot.transpose();
            prop_assert!((turned - expected).amax() < 1e-9 * r1.max(r2).powi(2));
        }

        #[test]
        fn larger_alpha_inflates_every_eigenvalue(r1 in 0.1f64..20.0, r2 in 0.1f64..20.0, a1 in 0.001f64..0.4, da in 0.01f64..0.5) {
            let tight = covariance_from_ellipse(&Ellipse::rotated_2d([0.0, 0.0], [r1, r2], 0.3, a1)).unwrap();
            let loose = covariance_from_ellipse(&Ellipse::rotated_2d([0.0, 0.0], [r1, r2], 0.3, a1 + da)).unwrap();
            let (vt, _) = sorted_eigen(&tight);
            let (vl, _) = sorted_eigen(&loose);
            prop_assert!(vl[0] > vt[0] && vl[1] > vt[1]);
        }

        #[test]
        fn covariance_round_trip(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, alpha in 0.001f64..0.5) {
            let m = DMatrix::from_row_slice(2, 2, &[a, b, c, a - c]);
            let sigma = &m * m.transpose() + DMatrix::identity(2, 2) * 0.05;
            let e = ellipse_from_covariance(&sigma, &[3.0, 4.0], alpha).unwrap();
            let back = covariance_from_ellipse(&e).unwrap();
            prop_assert!((back - &sigma).amax() < 1e-9 * sigma.amax().max(1.0));
        }

        #[test]
        fn fusion_is_order_invariant(coords in prop::collection::vec(-20.0f64..20.0, 6..18)) {
            let pts: Vec<Vec<f64>> = coords.chunks_exact(3).map(|c| c.to_vec()).collect();
            let mut reversed = pts.clone();
            reversed.reverse();
            let (m1, c1) = fuse_pointwise(&pts).unwrap();
            let (m2, c2) = fuse_pointwise(&reversed).unwrap();
            for (a, b) in m1.iter().zip(&m2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((c1.clone() - c2).amax() < 1e-10);
            prop_assert!(validate_covariance(&c1, 0.0).is_ok());
        }
    }
}
