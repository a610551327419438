//! Gaussian-process posterior over the unknown deformation.
//!
//! A [`GpSession`] holds the annotations collected so far together with the
//! inverse of the noisy Gram matrix `K_AA`, which is extended block by block
//! as annotations arrive. Optionally it also maintains the inverse of the
//! joint matrix over a target set `T` and the annotations, which is needed
//! to score candidates that lie outside `T`.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::annotation::{Annotation, MIN_VARIANCE};
use crate::error::{check_dim, Error, Result};
use crate::kernels::{cross_column, cross_gram, KernelSpec};
use crate::linalg::{
    clip_psd, floor_eigenvalues, log_det_spd, log_det_spd_strict, sorted_eigen, symmetrize,
    validate_covariance, BlockInverse,
};

/// `½ ln(2πe)`, the per-component constant of a Gaussian entropy.
pub const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

type MeanFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Prior mean transformation `μ : Ω → R^d`.
#[derive(Clone, Default)]
pub enum MeanFunction {
    /// `μ(x) = x`.
    #[default]
    Identity,
    /// `μ(x) = A x + b`.
    Affine { linear: DMatrix<f64>, offset: Vec<f64> },
    /// Arbitrary user mean. Not serializable.
    Custom(Arc<MeanFn>),
}

impl fmt::Debug for MeanFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "Identity"),
            Self::Affine { linear, offset } => f
                .debug_struct("Affine")
                .field("linear", linear)
                .field("offset", offset)
                .finish(),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl MeanFunction {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity => x.to_vec(),
            Self::Affine { linear, offset } => {
                let v = linear * DVector::from_row_slice(x);
                v.iter().zip(offset).map(|(a, b)| a + b).collect()
            }
            Self::Custom(f) => f(x),
        }
    }
}

/// Serialized tag of a [`MeanFunction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanTag {
    Identity,
    Affine { linear: Vec<Vec<f64>>, offset: Vec<f64> },
}

impl TryFrom<&MeanFunction> for MeanTag {
    type Error = Error;

    fn try_from(mean: &MeanFunction) -> Result<Self> {
        match mean {
            MeanFunction::Identity => Ok(MeanTag::Identity),
            MeanFunction::Affine { linear, offset } => Ok(MeanTag::Affine {
                linear: (0..linear.nrows())
                    .map(|i| linear.row(i).iter().copied().collect())
                    .collect(),
                offset: offset.clone(),
            }),
            MeanFunction::Custom(_) => Err(Error::Validation(
                "custom mean functions cannot be serialized".into(),
            )),
        }
    }
}

impl From<MeanTag> for MeanFunction {
    fn from(tag: MeanTag) -> Self {
        match tag {
            MeanTag::Identity => MeanFunction::Identity,
            MeanTag::Affine { linear, offset } => {
                let rows = linear.len();
                let cols = linear.first().map_or(0, Vec::len);
                MeanFunction::Affine {
                    linear: DMatrix::from_fn(rows, cols, |i, j| linear[i][j]),
                    offset,
                }
            }
        }
    }
}

/// Marginal posterior of `φ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct TargetCache {
    points: Vec<Vec<f64>>,
    inverse: BlockInverse,
}

/// Posterior state given an ordered list of annotations.
#[derive(Debug, Clone)]
pub struct GpSession {
    spec: KernelSpec,
    mean: MeanFunction,
    noise_floor: f64,
    annotations: Vec<Annotation>,
    points: Vec<Vec<f64>>,
    residual: DVector<f64>,
    inv_kaa: BlockInverse,
    weights: DVector<f64>,
    targets: Option<TargetCache>,
}

/// JSON form of a session. Cached inverses are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub kernel: KernelSpec,
    pub mean: MeanTag,
    pub noise_floor: f64,
    pub annotations: Vec<Annotation>,
}

impl GpSession {
    pub fn new(spec: KernelSpec) -> Self {
        Self {
            spec,
            mean: MeanFunction::Identity,
            noise_floor: MIN_VARIANCE,
            annotations: Vec::new(),
            points: Vec::new(),
            residual: DVector::zeros(0),
            inv_kaa: BlockInverse::empty(),
            weights: DVector::zeros(0),
            targets: None,
        }
    }

    /// Replaces the prior mean. Only valid before any annotation is added.
    pub fn with_mean(mut self, mean: MeanFunction) -> Self {
        assert!(self.annotations.is_empty(), "mean must be set on an empty session");
        self.mean = mean;
        self
    }

    /// Sets the eigenvalue floor applied to incoming annotation covariances.
    pub fn with_noise_floor(mut self, floor: f64) -> Self {
        assert!(self.annotations.is_empty(), "noise floor must be set on an empty session");
        self.noise_floor = floor;
        self
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn mean_function(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn noise_floor(&self) -> f64 {
        self.noise_floor
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn annotated_points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Cached `K_AA⁻¹`.
    pub fn inverse_gram(&self) -> &DMatrix<f64> {
        self.inv_kaa.inverse()
    }

    /// Dense `K_AA = K_XX + diag(Σ_1, …, Σ_L)` assembled from scratch.
    pub fn noisy_gram(&self) -> DMatrix<f64> {
        let d = self.dimension();
        let mut k = cross_gram(&self.spec, &self.points, &self.points);
        for (l, a) in self.annotations.iter().enumerate() {
            let mut block = k.view_mut((l * d, l * d), (d, d));
            block += &a.sigma;
        }
        k
    }

    /// Prior covariance block `k(x, x')`.
    pub fn prior_cov(&self, x: &[f64], x_prime: &[f64]) -> DMatrix<f64> {
        let d = self.dimension();
        DMatrix::identity(d, d) * self.spec.scalar_between(x, x_prime)
    }

    /// Appends an annotation and extends the cached inverses by one block.
    ///
    /// The covariance is floored at the session's noise floor first.
    pub fn add_annotation(&mut self, annotation: Annotation) -> Result<()> {
        let d = self.dimension();
        check_dim(d, annotation.dimension())?;
        validate_covariance(&annotation.sigma, 1e-12)?;
        let sigma = floor_eigenvalues(&annotation.sigma, self.noise_floor);
        let annotation = Annotation {
            sigma,
            ..annotation
        };

        let x = &annotation.x;
        let cross = cross_column(&self.spec, &self.points, x);
        let diag = self.prior_cov(x, x) + &annotation.sigma;
        self.inv_kaa.append(&cross, &diag)?;

        if let Some(cache) = self.targets.as_mut() {
            let mut joint_rows = cache.points.clone();
            joint_rows.extend(self.points.iter().cloned());
            let cross = cross_column(&self.spec, &joint_rows, x);
            cache.inverse.append(&cross, &diag)?;
        }

        let prior = self.mean.eval(x);
        let mut residual = self.residual.clone().resize_vertically(self.residual.len() + d, 0.0);
        for c in 0..d {
            residual[self.residual.len() + c] = annotation.y[c] - prior[c];
        }
        self.residual = residual;
        self.points.push(annotation.x.clone());
        self.annotations.push(annotation);
        self.weights = self.inv_kaa.inverse() * &self.residual;
        Ok(())
    }

    /// Returns a new session with `annotation` appended; `self` is untouched.
    pub fn with_annotation(&self, annotation: Annotation) -> Result<Self> {
        let mut next = self.clone();
        next.add_annotation(annotation)?;
        Ok(next)
    }

    /// Starts maintaining the inverse of the joint matrix over `targets`
    /// (observed exactly) and the current annotations.
    pub fn attach_targets(&mut self, targets: &[Vec<f64>]) -> Result<()> {
        let d = self.dimension();
        for t in targets {
            check_dim(d, t.len())?;
        }
        let mut joint = targets.to_vec();
        joint.extend(self.points.iter().cloned());
        let mut m = cross_gram(&self.spec, &joint, &joint);
        let offset = targets.len() * d;
        for (l, a) in self.annotations.iter().enumerate() {
            let mut block = m.view_mut((offset + l * d, offset + l * d), (d, d));
            block += &a.sigma;
        }
        self.targets = Some(TargetCache {
            points: targets.to_vec(),
            inverse: BlockInverse::from_matrix(&m)?,
        });
        Ok(())
    }

    pub fn detach_targets(&mut self) {
        self.targets = None;
    }

    pub fn attached_targets(&self) -> Option<&[Vec<f64>]> {
        self.targets.as_ref().map(|c| c.points.as_slice())
    }

    /// Cached inverse of the joint target-and-annotation matrix, if attached.
    pub fn target_joint_inverse(&self) -> Option<&DMatrix<f64>> {
        self.targets.as_ref().map(|c| c.inverse.inverse())
    }

    /// `K_X(x)`, the `Ld × d` covariance between annotated points and `x`.
    fn k_x(&self, x: &[f64]) -> DMatrix<f64> {
        cross_column(&self.spec, &self.points, x)
    }

    /// Posterior mean `μ_{|A}(x)`.
    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dimension(), x.len())?;
        let mut m = self.mean.eval(x);
        if !self.points.is_empty() {
            let shift = self.k_x(x).transpose() * &self.weights;
            for (mi, s) in m.iter_mut().zip(shift.iter()) {
                *mi += s;
            }
        }
        Ok(m)
    }

    /// Raw `k(x, x') − K_X(x)ᵀ K_AA⁻¹ K_X(x')`, without symmetrization.
    fn conditioned_block(&self, x: &[f64], x_prime: &[f64]) -> DMatrix<f64> {
        let prior = self.prior_cov(x, x_prime);
        if self.points.is_empty() {
            return prior;
        }
        let kx = self.k_x(x);
        let kxp = if x == x_prime { kx.clone() } else { self.k_x(x_prime) };
        prior - kx.transpose() * self.inv_kaa.inverse() * kxp
    }

    /// Posterior covariance `k_{|A}(x, x')`.
    pub fn posterior_cross_cov(&self, x: &[f64], x_prime: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dimension(), x.len())?;
        check_dim(self.dimension(), x_prime.len())?;
        if x == x_prime {
            return Ok(clip_psd(&self.conditioned_block(x, x)));
        }
        Ok(self.conditioned_block(x, x_prime))
    }

    /// Mean and (symmetrized, eigenvalue-clipped) covariance of `φ(x) | A`.
    pub fn posterior_at(&self, x: &[f64]) -> Result<PosteriorGaussian> {
        Ok(PosteriorGaussian {
            mean: self.posterior_mean(x)?,
            cov: self.posterior_cross_cov(x, x)?,
        })
    }

    /// `½ ln det k_{|A}(x, x)`.
    pub fn log_det_conditional(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dimension(), x.len())?;
        Ok(half_log_det_small(&symmetrize(&self.conditioned_block(x, x))))
    }

    /// `½ ln det` of the covariance of `φ(x)` given the annotations and exact
    /// observations of the attached targets.
    pub fn log_det_conditional_on_targets(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dimension(), x.len())?;
        let cache = self
            .targets
            .as_ref()
            .ok_or_else(|| Error::Validation("no target set attached to the session".into()))?;
        let mut joint = cache.points.clone();
        joint.extend(self.points.iter().cloned());
        let c = cross_column(&self.spec, &joint, x);
        let cov = self.prior_cov(x, x) - c.transpose() * cache.inverse.inverse() * &c;
        Ok(half_log_det_small(&symmetrize(&cov)))
    }

    /// `K_{TT|A} = K_TT − K_XTᵀ K_AA⁻¹ K_XT`.
    pub fn conditional_covariance(&self, targets: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.dimension();
        for t in targets {
            check_dim(d, t.len())?;
        }
        let ktt = cross_gram(&self.spec, targets, targets);
        if self.points.is_empty() {
            return Ok(ktt);
        }
        let kxt = cross_gram(&self.spec, &self.points, targets);
        Ok(symmetrize(&(ktt - kxt.transpose() * self.inv_kaa.inverse() * &kxt)))
    }

    /// Joint differential entropy `H(Φ_T | A)` in nats.
    pub fn joint_entropy(&self, targets: &[Vec<f64>]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::InsufficientData("joint entropy needs at least one target".into()));
        }
        for (i, a) in targets.iter().enumerate() {
            if targets[..i].iter().any(|b| b == a) {
                return Err(Error::Degenerate(format!(
                    "duplicate target point {a:?}: the joint covariance is singular"
                )));
            }
        }
        let cov = self.conditional_covariance(targets)?;
        let log_det = log_det_spd(&cov).map_err(|_| {
            Error::Degenerate("conditioned target covariance is numerically singular".into())
        })?;
        Ok(targets.len() as f64 * self.dimension() as f64 * HALF_LN_2PI_E + 0.5 * log_det)
    }

    /// Entropy of a single point, `d/2 ln(2πe) + ½ ln det k_{|A}(x, x)`.
    pub fn point_entropy(&self, x: &[f64]) -> Result<f64> {
        Ok(self.dimension() as f64 * HALF_LN_2PI_E + self.log_det_conditional(x)?)
    }

    pub fn to_document(&self) -> Result<SessionDocument> {
        Ok(SessionDocument {
            kernel: self.spec.clone(),
            mean: MeanTag::try_from(&self.mean)?,
            noise_floor: self.noise_floor,
            annotations: self.annotations.clone(),
        })
    }

    /// Rebuilds a session by replaying the stored annotations in order.
    pub fn from_document(doc: SessionDocument) -> Result<Self> {
        let mut session = GpSession::new(doc.kernel)
            .with_mean(doc.mean.into())
            .with_noise_floor(doc.noise_floor);
        for a in doc.annotations {
            session.add_annotation(a)?;
        }
        Ok(session)
    }

    pub fn save_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.to_document()?)?;
        Ok(())
    }

    pub fn load_json<R: Read>(reader: R) -> Result<Self> {
        Self::from_document(serde_json::from_reader(reader)?)
    }
}

/// `½ ln det` of a small symmetric PSD matrix; `-∞` when singular.
fn half_log_det_small(m: &DMatrix<f64>) -> f64 {
    if let Some(ld) = log_det_spd_strict(m) {
        return 0.5 * ld;
    }
    let (values, _) = sorted_eigen(m);
    0.5 * values.iter().map(|v| v.max(0.0).ln()).sum::<f64>()
}
