//! Simulated annotators answering queries against a known ground truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use regmark_core::annotation::{
    covariance_from_ellipse, fuse_pointwise, Ellipse, DEFAULT_ALPHA, MIN_VARIANCE,
};
use regmark_core::linalg::cholesky_jittered;
use regmark_core::{Annotation, Error, Result, TransformField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatorProfile {
    /// `y = φ(x) + N(0, σ²I)` reported with `Σ = σ²I`.
    FixedIsotropic { sigma: f64 },
    /// Confidence ellipses with lognormal semi-axes and random orientation;
    /// `y` is drawn from the ellipse's Gaussian.
    EllipseLognormal {
        #[serde(default = "default_median")]
        median: f64,
        #[serde(default = "default_log_sigma")]
        log_sigma: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// `experts` isotropic raters fused into a sample mean and covariance.
    MultiExpert { experts: usize, sigma: f64 },
}

fn default_median() -> f64 {
    2.0
}

fn default_log_sigma() -> f64 {
    0.6
}

fn unit() -> f64 {
    1.0
}

impl AnnotatorProfile {
    pub fn ellipse_default() -> Self {
        AnnotatorProfile::EllipseLognormal {
            median: default_median(),
            log_sigma: default_log_sigma(),
            scale: 1.0,
        }
    }

    /// The default ellipse annotator with every semi-axis multiplied by five.
    pub fn ellipse_fivefold() -> Self {
        AnnotatorProfile::EllipseLognormal {
            median: default_median(),
            log_sigma: default_log_sigma(),
            scale: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            AnnotatorProfile::FixedIsotropic { sigma } => sigma.is_finite() && *sigma >= 0.0,
            AnnotatorProfile::EllipseLognormal { median, log_sigma, scale } => {
                *median > 0.0 && *log_sigma >= 0.0 && *scale > 0.0 && log_sigma.is_finite()
            }
            AnnotatorProfile::MultiExpert { experts, sigma } => *experts >= 1 && sigma.is_finite() && *sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid annotator profile {self:?}")))
        }
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Uniformly random rotation via QR of a Gaussian matrix with sign fix.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// One simulated answer `(y, Σ)` at `x`.
pub fn simulate_annotator(
    profile: &AnnotatorProfile,
    x: &[f64],
    phi: &TransformField,
    rng: &mut ChaCha8Rng,
) -> Result<Annotation> {
    let truth = phi.eval(x)?;
    let d = truth.len();
    match profile {
        AnnotatorProfile::FixedIsotropic { sigma } => {
            let z = gaussian_vector(rng, d);
            let y = truth.iter().zip(z.iter()).map(|(t, e)| t + sigma * e).collect();
            let var = (sigma * sigma).max(MIN_VARIANCE);
            Annotation::new(x.to_vec(), y, DMatrix::identity(d, d) * var)
        }
        AnnotatorProfile::EllipseLognormal { median, log_sigma, scale } => {
            let radii: Vec<f64> = (0..d)
                .map(|_| median * scale * (log_sigma * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let q = random_orthonormal(rng, d);
            let ellipse = Ellipse {
                center: truth.clone(),
                axes: (0..d).map(|j| q.column(j).iter().copied().collect()).collect(),
                radii,
                alpha: DEFAULT_ALPHA,
            };
            let sigma = covariance_from_ellipse(&ellipse)?;
            let l = cholesky_jittered(&sigma)?.l();
            let noise = l * gaussian_vector(rng, d);
            let y = truth.iter().zip(noise.iter()).map(|(t, e)| t + e).collect();
            Annotation::new(x.to_vec(), y, sigma)
        }
        AnnotatorProfile::MultiExpert { experts, sigma } => {
            let draws: Vec<Vec<f64>> = (0..*experts)
                .map(|_| {
                    let z = gaussian_vector(rng, d);
                    truth.iter().zip(z.iter()).map(|(t, e)| t + sigma * e).collect()
                })
                .collect();
            let (mean, cov) = fuse_pointwise(&draws)?;
            Annotation::new(x.to_vec(), mean, cov)
        }
    }
}

pub fn simulate_annotator_seeded(
    profile: &AnnotatorProfile,
    x: &[f64],
    phi: &TransformField,
    seed: u64,
) -> Result<Annotation> {
    simulate_annotator(profile, x, phi, &mut ChaCha8Rng::seed_from_u64(seed))
}
