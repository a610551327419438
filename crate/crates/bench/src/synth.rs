//! Random diffeomorphic ground truths.
//!
//! A coarse control grid of Gaussian vectors is interpolated multilinearly
//! into a stationary velocity field `v`, which is integrated by scaling and
//! squaring: `exp(v) = (id + v/2ⁿ)^(2ⁿ)`. The self-compositions run on a
//! supersampled grid padded by `max‖v‖`, with `v` extended by border
//! replication, so trajectories never leave the sampled region.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use regmark_core::{Error, GridGeometry, Result, TransformField};

/// Largest velocity magnitude, in pixels, allowed in the first-order step.
pub const MAX_INITIAL_STEP: f64 = 1.0 / 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationParams {
    /// Control spacing is the smallest image extent divided by this.
    pub control_divisions: usize,
    /// Standard deviation of each control-vector component in pixels.
    /// Defaults to `amplitude_factor × spacing` when absent.
    pub amplitude: Option<f64>,
    pub amplitude_factor: f64,
    /// Integration grid refinement per axis. Defaults to 4 in 2-D and 1 in 3-D.
    pub supersample: Option<usize>,
}

impl Default for DeformationParams {
    fn default() -> Self {
        Self {
            control_divisions: 8,
            amplitude: None,
            amplitude_factor: 0.3,
            supersample: None,
        }
    }
}

impl DeformationParams {
    pub fn with_amplitude(amplitude: f64) -> Self {
        Self {
            amplitude: Some(amplitude),
            ..Self::default()
        }
    }

    pub fn control_spacing(&self, geometry: &GridGeometry) -> f64 {
        let extent = geometry.extent().into_iter().fold(f64::INFINITY, f64::min);
        extent / self.control_divisions.max(1) as f64
    }

    pub fn resolved_amplitude(&self, geometry: &GridGeometry) -> f64 {
        self.amplitude
            .unwrap_or_else(|| self.amplitude_factor * self.control_spacing(geometry))
    }

    pub fn resolved_supersample(&self, geometry: &GridGeometry) -> usize {
        self.supersample
            .unwrap_or(if geometry.dimension() == 2 { 4 } else { 1 })
    }

    fn validate(&self) -> Result<()> {
        if self.supersample == Some(0) {
            return Err(Error::Validation("supersample must be at least 1".into()));
        }
        if self.control_divisions == 0 {
            return Err(Error::Validation("control_divisions must be at least 1".into()));
        }
        let a = self.amplitude.unwrap_or(self.amplitude_factor);
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::Validation("deformation amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Coarse control vectors covering `geometry`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub control: TransformField,
    pub amplitude: f64,
}

impl VelocityGrid {
    pub fn sample(geometry: &GridGeometry, spacing: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = geometry.dimension();
        let shape: Vec<usize> = geometry
            .extent()
            .iter()
            .map(|e| (e / spacing).ceil() as usize + 1)
            .collect();
        let control_geometry = GridGeometry::new(geometry.origin.clone(), vec![spacing; d], shape)?;
        let n = control_geometry.node_count() * d;
        let values = if amplitude > 0.0 {
            let normal = Normal::new(0.0, amplitude).map_err(|e| Error::Validation(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        Ok(Self {
            control: TransformField::new(control_geometry, values)?,
            amplitude,
        })
    }

    /// Dense stationary velocity on `geometry`.
    pub fn dense(&self, geometry: &GridGeometry) -> TransformField {
        TransformField::from_displacement_fn(geometry.clone(), |x| self.control.displacement_clamped(x))
    }
}

/// Number of halvings `n` with `max‖v‖ / 2ⁿ < MAX_INITIAL_STEP`.
pub fn halvings_for(max_norm: f64) -> usize {
    let mut n = 0;
    while max_norm / 2f64.powi(n as i32) >= MAX_INITIAL_STEP {
        n += 1;
    }
    n
}

/// `exp(v)` by scaling and squaring on `v`'s own grid, returning the
/// halving count too.
pub fn scaling_and_squaring(velocity: &TransformField) -> (TransformField, usize) {
    let n = halvings_for(velocity.max_norm());
    let mut phi = velocity.scaled(0.5f64.powi(n as i32));
    for _ in 0..n {
        phi = TransformField::compose(&phi, &phi);
    }
    (phi, n)
}

/// `exp(v)` sampled on `v`'s grid, integrated on a grid refined `supersample`
/// times per axis and padded by `⌈max‖v‖⌉ + 1` on every side.
pub fn exp_velocity(velocity: &TransformField, supersample: usize) -> (TransformField, usize) {
    let g = &velocity.geometry;
    let pad = velocity.max_norm().ceil() + 1.0;
    let f = supersample.max(1);
    let d = g.dimension();
    let mut origin = Vec::with_capacity(d);
    let mut spacing = Vec::with_capacity(d);
    let mut shape = Vec::with_capacity(d);
    for a in 0..d {
        let cells = (pad / g.spacing[a]).ceil() as usize;
        origin.push(g.origin[a] - cells as f64 * g.spacing[a]);
        spacing.push(g.spacing[a] / f as f64);
        shape.push(((g.shape[a] - 1) + 2 * cells) * f + 1);
    }
    let fine = GridGeometry::new(origin, spacing, shape).expect("refined grid of a valid grid");
    let v = TransformField::from_displacement_fn(fine, |x| velocity.displacement_clamped(x));
    let (phi, n) = scaling_and_squaring(&v);
    (
        TransformField::from_displacement_fn(g.clone(), |x| phi.displacement_clamped(x)),
        n,
    )
}

/// Dense stationary velocity drawn from `params` with a fixed seed.
pub fn sample_velocity(geometry: &GridGeometry, params: &DeformationParams, seed: u64) -> Result<TransformField> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = VelocityGrid::sample(
        geometry,
        params.control_spacing(geometry),
        params.resolved_amplitude(geometry),
        &mut rng,
    )?;
    Ok(grid.dense(geometry))
}

/// Ground-truth transformation `φ = exp(v)` for a random velocity `v`.
pub fn sample_deformation(geometry: &GridGeometry, params: &DeformationParams, seed: u64) -> Result<TransformField> {
    let v = sample_velocity(geometry, params, seed)?;
    Ok(exp_velocity(&v, params.resolved_supersample(geometry)).0)
}
