//! Gaussian-process gold standards for deformable image registration.
//!
//! Landmark annotations with anisotropic uncertainty condition a GP prior
//! over the unknown transformation. The posterior drives the choice of the
//! next location to annotate and scores candidate registrations.

pub mod annotation;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod stats;
pub mod suggestion;

pub use annotation::{Annotation, Ellipse};
pub use error::{Error, Result};
pub use field::{GridGeometry, ScalarField, TransformField};
pub use gp::{GpSession, MeanFunction, PosteriorGaussian};
pub use kernels::{BasisKind, KernelSpec};
pub use suggestion::{CandidateSet, Strategy, Suggestion, TargetSet};
