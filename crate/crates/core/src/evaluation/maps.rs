//! Dense error and entropy maps over a grid.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::field::{GridGeometry, ScalarField, TransformField};
use crate::gp::GpSession;
use crate::linalg::sorted_eigen;
use crate::stats::chi2_cdf;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const ZERO_EIGEN_REL: f64 = 1e-12;

/// `F_{χ²(d)}` of the squared Mahalanobis distance of `deviation` under `cov`.
///
/// A direction with zero variance scores 1 as soon as the deviation has a
/// component along it and contributes nothing otherwise.
pub fn mahalanobis_score(deviation: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = deviation.len();
    let (values, vectors) = sorted_eigen(cov);
    let scale = values.iter().copied().fold(0.0, f64::max);
    let dev_norm = deviation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut m = 0.0;
    for i in 0..d {
        let proj: f64 = (0..d).map(|k| vectors[(k, i)] * deviation[k]).sum();
        let lambda = values[i];
        if lambda <= ZERO_EIGEN_REL * scale || lambda <= 0.0 {
            if proj.abs() > 1e-12 * dev_norm.max(1.0) {
                return 1.0;
            }
            continue;
        }
        m += proj * proj / lambda;
    }
    chi2_cdf(m, d)
}

/// Per-node χ² score of `φ̂` against the posterior, in `[0, 1]`.
pub fn error_heat_map(phi_hat: &TransformField, session: &GpSession, geometry: &GridGeometry) -> Result<ScalarField> {
    check_dim(session.dimension(), geometry.dimension())?;
    let values = (0..geometry.node_count())
        .into_par_iter()
        .map(|i| {
            let x = geometry.node_point(i);
            let post = session.posterior_at(&x)?;
            let est = phi_hat.eval(&x)?;
            let dev: Vec<f64> = est.iter().zip(&post.mean).map(|(a, b)| a - b).collect();
            Ok(mahalanobis_score(&dev, &post.cov))
        })
        .collect::<Result<Vec<f64>>>()?;
    ScalarField::new(geometry.clone(), values)
}

/// Per-node differential entropy `d/2 ln(2πe) + ½ ln det k_{|A}(x, x)` in nats.
pub fn entropy_map(session: &GpSession, geometry: &GridGeometry) -> Result<ScalarField> {
    check_dim(session.dimension(), geometry.dimension())?;
    let values = (0..geometry.node_count())
        .into_par_iter()
        .map(|i| session.point_entropy(&geometry.node_point(i)))
        .collect::<Result<Vec<f64>>>()?;
    ScalarField::new(geometry.clone(), values)
}

/// Opacity `1 − (H − min H)/(max H − min H)`; a flat map is fully opaque.
pub fn blend_alpha(entropy: &ScalarField) -> Vec<f64> {
    let (lo, hi) = entropy.range();
    let span = hi - lo;
    entropy
        .values
        .iter()
        .map(|&h| match h {
            f64::NEG_INFINITY => 1.0,
            h if !h.is_finite() => 0.0,
            _ if span > 0.0 => 1.0 - ((h - lo) / span).clamp(0.0, 1.0),
            _ => 1.0,
        })
        .collect()
}

/// Maps `t ∈ [0, 1]` to RGB along a dark-blue → green → yellow ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8;
    }
    out
}

/// Row-major 8-bit RGBA raster.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedImage {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

/// Error colormap composited over an optional grayscale background, with
/// per-pixel opacity from [`blend_alpha`]. 2-D only.
pub fn blended_map(
    error: &ScalarField,
    entropy: &ScalarField,
    background: Option<&ScalarField>,
) -> Result<BlendedImage> {
    if error.geometry != entropy.geometry {
        return Err(Error::Validation("error and entropy maps are on different grids".into()));
    }
    if error.dimension() != 2 {
        return Err(Error::Validation("blended maps are rendered for 2-D grids only".into()));
    }
    let bg = match background {
        Some(b) if b.geometry.shape != error.geometry.shape => {
            return Err(Error::Validation("background image does not match the map grid".into()))
        }
        Some(b) => {
            let (lo, hi) = b.range();
            let span = if hi > lo { hi - lo } else { 1.0 };
            Some(b.values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0) * 255.0).collect::<Vec<f64>>())
        }
        None => None,
    };
    let alpha = blend_alpha(entropy);
    let mut rgba = Vec::with_capacity(error.values.len() * 4);
    for (i, &e) in error.values.iter().enumerate() {
        let color = colormap(e);
        let a = alpha[i];
        match &bg {
            Some(bgv) => {
                for c in color {
                    rgba.push((a * c as f64 + (1.0 - a) * bgv[i]).round() as u8);
                }
                rgba.push(255);
            }
            None => {
                rgba.extend_from_slice(&color);
                rgba.push((a * 255.0).round() as u8);
            }
        }
    }
    Ok(BlendedImage {
        width: error.geometry.shape[0],
        height: error.geometry.shape[1],
        rgba,
    })
}
