//! Error, entropy and blended maps rendered as PNG.

use std::fmt;
use std::str::FromStr;

use anyhow::bail;

use regmark_core::evaluation::{blended_map, colormap, entropy_map, error_heat_map};
use regmark_core::{GpSession, GridGeometry, ScalarField, TransformField};

use crate::images::rgba_png;

/// Longest side of a map grid when no stride is requested.
pub const DEFAULT_MAP_SIDE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Error,
    Entropy,
    Blended,
}

impl FromStr for MapKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "error" => Ok(MapKind::Error),
            "entropy" => Ok(MapKind::Entropy),
            "blended" => Ok(MapKind::Blended),
            other => bail!("unknown map kind {other:?} (expected error, entropy or blended)"),
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapKind::Error => "error",
            MapKind::Entropy => "entropy",
            MapKind::Blended => "blended",
        })
    }
}

/// Stride keeping the longest side of `geometry` at or below `max_side` nodes.
pub fn auto_stride(geometry: &GridGeometry, max_side: usize) -> usize {
    let longest = geometry.shape.iter().copied().max().unwrap_or(1);
    longest.div_ceil(max_side.max(1)).max(1)
}

#[derive(Debug, Clone)]
pub struct RenderedMap {
    pub kind: MapKind,
    pub png: Vec<u8>,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    /// Value range shown by the color ramp.
    pub min: f64,
    pub max: f64,
}

fn finite_range(field: &ScalarField) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in field.values.iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// Color-ramped PNG of `field` over `[lo, hi]`.
pub fn ramp_png(field: &ScalarField, lo: f64, hi: f64) -> anyhow::Result<Vec<u8>> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgba = Vec::with_capacity(field.values.len() * 4);
    for &v in &field.values {
        let t = if v == f64::NEG_INFINITY { 0.0 } else { (v - lo) / span };
        rgba.extend_from_slice(&colormap(t));
        rgba.push(255);
    }
    rgba_png(field.geometry.shape[0], field.geometry.shape[1], rgba)
}

/// Computes the requested map on `geometry` strided by `stride`.
///
/// `phi_hat` is required for the error and blended maps; `background`
/// (a fixed image on `geometry`) is only used by the blended map.
pub fn render(
    kind: MapKind,
    session: &GpSession,
    geometry: &GridGeometry,
    stride: usize,
    phi_hat: Option<&TransformField>,
    background: Option<&ScalarField>,
) -> anyhow::Result<RenderedMap> {
    if geometry.dimension() != 2 {
        bail!("PNG maps are rendered for 2-D sessions only");
    }
    let grid = geometry.strided(stride);
    let transform = || match phi_hat {
        Some(t) => Ok(t),
        None => Err(anyhow::anyhow!("the {kind} map needs a transform")),
    };
    let (png, min, max) = match kind {
        MapKind::Entropy => {
            let h = entropy_map(session, &grid)?;
            let (lo, hi) = finite_range(&h);
            (ramp_png(&h, lo, hi)?, lo, hi)
        }
        MapKind::Error => {
            let e = error_heat_map(transform()?, session, &grid)?;
            (ramp_png(&e, 0.0, 1.0)?, 0.0, 1.0)
        }
        MapKind::Blended => {
            let e = error_heat_map(transform()?, session, &grid)?;
            let h = entropy_map(session, &grid)?;
            let bg = background.map(|b| b.resample(&grid));
            let img = blended_map(&e, &h, bg.as_ref())?;
            (rgba_png(img.width, img.height, img.rgba)?, 0.0, 1.0)
        }
    };
    Ok(RenderedMap {
        kind,
        png,
        stride,
        width: grid.shape[0],
        height: grid.shape[1],
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use regmark_core::{Annotation, BasisKind, KernelSpec};

    fn session() -> GpSession {
        let spec = KernelSpec::ladder(BasisKind::Wendland1, 10.0, 2, vec![2.0, 1.0], 2).unwrap();
        let mut s = GpSession::new(spec);
        s.add_annotation(Annotation::isotropic(vec![10.0, 10.0], vec![11.0, 9.0], 1.0).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn stride_caps_the_longest_side() {
        let g = GridGeometry::pixels(vec![512, 300]).unwrap();
        assert_eq!(auto_stride(&g, 128), 4);
        assert_eq!(g.strided(4).shape, vec![128, 75]);
        assert_eq!(auto_stride(&GridGeometry::pixels(vec![40, 40]).unwrap(), 128), 1);
    }

    #[test]
    fn maps_decode_at_the_strided_size() {
        let g = GridGeometry::pixels(vec![41, 21]).unwrap();
        let phi = TransformField::identity(g.clone());
        for kind in [MapKind::Entropy, MapKind::Error, MapKind::Blended] {
            let m = render(kind, &session(), &g, 2, Some(&phi), None).unwrap();
            let img = image::load_from_memory(&m.png).unwrap();
            assert_eq!((img.width(), img.height()), (21, 11), "{kind}");
        }
        assert!(render(MapKind::Error, &session(), &g, 1, None, None).is_err());
    }

    #[test]
    fn prior_only_entropy_map_is_constant() {
        let spec = KernelSpec::ladder(BasisKind::Gaussian, 10.0, 2, vec![2.0, 1.0], 2).unwrap();
        let g = GridGeometry::pixels(vec![16, 16]).unwrap();
        let m = render(MapKind::Entropy, &GpSession::new(spec), &g, 1, None, None).unwrap();
        assert_eq!(m.min, m.max);
    }
}
