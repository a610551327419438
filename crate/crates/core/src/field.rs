//! Regular grids, scalar images and dense transformations sampled on them.
//!
//! Nodes are stored with the first axis varying fastest. A node's physical
//! position is `origin + index * spacing`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const HULL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub shape: Vec<usize>,
}

impl GridGeometry {
    pub fn new(origin: Vec<f64>, spacing: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let d = shape.len();
        if !(2..=3).contains(&d) {
            return Err(Error::Validation(format!("grid dimension must be 2 or 3, got {d}")));
        }
        check_dim(d, origin.len())?;
        check_dim(d, spacing.len())?;
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation("grid spacing must be positive".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Validation("grid shape must be nonzero along every axis".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Validation("grid origin must be finite".into()));
        }
        Ok(Self { origin, spacing, shape })
    }

    /// Unit-spaced grid anchored at the origin, as used for pixel images.
    pub fn pixels(shape: Vec<usize>) -> Result<Self> {
        let d = shape.len();
        Self::new(vec![0.0; d], vec![1.0; d], shape)
    }

    pub fn dimension(&self) -> usize {
        self.shape.len()
    }

    pub fn node_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Physical size of the hull along each axis.
    pub fn extent(&self) -> Vec<f64> {
        self.shape
            .iter()
            .zip(&self.spacing)
            .map(|(&n, s)| (n - 1) as f64 * s)
            .collect()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.dimension());
        for &n in &self.shape {
            idx.push(flat % n);
            flat /= n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        for a in (0..self.dimension()).rev() {
            flat = flat * self.shape[a] + idx[a];
        }
        flat
    }

    pub fn node_point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a])
            .collect()
    }

    pub fn node_points(&self) -> Vec<Vec<f64>> {
        (0..self.node_count()).map(|i| self.node_point(i)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dimension()
            && x.iter().enumerate().all(|(a, &v)| {
                let u = (v - self.origin[a]) / self.spacing[a];
                u >= -HULL_TOLERANCE && u <= (self.shape[a] - 1) as f64 + HULL_TOLERANCE
            })
    }

    /// Same hull sampled every `stride` nodes along each axis.
    pub fn strided(&self, stride: usize) -> GridGeometry {
        let stride = stride.max(1);
        GridGeometry {
            origin: self.origin.clone(),
            spacing: self.spacing.iter().map(|s| s * stride as f64).collect(),
            shape: self.shape.iter().map(|&n| (n - 1) / stride + 1).collect(),
        }
    }

    /// Multilinear interpolation stencil: node indices with weights.
    ///
    /// Coordinates are clamped into the hull first when `clamp` is set,
    /// otherwise points outside yield `None`.
    pub fn stencil(&self, x: &[f64], clamp: bool) -> Option<Vec<(usize, f64)>> {
        let d = self.dimension();
        if x.len() != d || x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if !clamp && !self.contains(x) {
            return None;
        }
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let max = (self.shape[a] - 1) as f64;
            let u = ((x[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, max);
            if self.shape[a] == 1 {
                continue;
            }
            let i = (u.floor() as usize).min(self.shape[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut out = Vec::with_capacity(1 << d);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for a in 0..d {
                let upper = corner >> a & 1 == 1;
                if upper {
                    if self.shape[a] == 1 {
                        w = 0.0;
                        break;
                    }
                    idx[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                out.push((self.flat_index(&idx), w));
            }
        }
        Some(out)
    }
}

/// Header written next to a raw little-endian float32 volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub dtype: String,
    #[serde(default = "one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

fn raw_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("raw"))
}

/// Writes `values` as float32 plus a JSON header at `<base>.json` / `<base>.raw`.
pub fn write_raw_f32(base: &Path, geometry: &GridGeometry, components: usize, values: &[f64]) -> Result<()> {
    let header = RawHeader {
        shape: geometry.shape.clone(),
        spacing: geometry.spacing.clone(),
        origin: geometry.origin.clone(),
        dtype: "float32".into(),
        components,
    };
    let (hp, dp) = raw_paths(base);
    fs::write(hp, serde_json::to_vec_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dp, bytes)?;
    Ok(())
}

/// Reads a raw volume written by [`write_raw_f32`] (or a `uint8` one).
pub fn read_raw(base: &Path) -> Result<(GridGeometry, usize, Vec<f64>)> {
    let (hp, dp) = raw_paths(base);
    let header: RawHeader = serde_json::from_slice(&fs::read(hp)?)?;
    let geometry = GridGeometry::new(header.origin, header.spacing, header.shape)?;
    let bytes = fs::read(dp)?;
    let expected = geometry.node_count() * header.components;
    let values: Vec<f64> = match header.dtype.as_str() {
        "float32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        "uint8" => bytes.iter().map(|&b| b as f64).collect(),
        other => return Err(Error::Validation(format!("unsupported raw dtype {other:?}"))),
    };
    if values.len() != expected {
        return Err(Error::Validation(format!(
            "raw volume holds {} values, header implies {expected}",
            values.len()
        )));
    }
    Ok((geometry, header.components, values))
}

/// Scalar values on a grid: images, error maps and entropy maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        check_dim(geometry.node_count(), values.len())?;
        Ok(Self { geometry, values })
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..geometry.node_count()).map(|i| f(&geometry.node_point(i))).collect();
        Self { geometry, values }
    }

    pub fn dimension(&self) -> usize {
        self.geometry.dimension()
    }

    pub fn sample(&self, x: &[f64]) -> Option<f64> {
        let st = self.geometry.stencil(x, false)?;
        Some(st.iter().map(|&(i, w)| w * self.values[i]).sum())
    }

    pub fn sample_clamped(&self, x: &[f64]) -> f64 {
        self.geometry
            .stencil(x, true)
            .map_or(0.0, |st| st.iter().map(|&(i, w)| w * self.values[i]).sum())
    }

    /// `(min, max)` of the finite values.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Resamples onto another geometry by multilinear interpolation.
    pub fn resample(&self, target: &GridGeometry) -> ScalarField {
        ScalarField::from_fn(target.clone(), |x| self.sample_clamped(x))
    }

    pub fn write_raw(&self, base: &Path) -> Result<()> {
        write_raw_f32(base, &self.geometry, 1, &self.values)
    }

    pub fn read_raw(base: &Path) -> Result<Self> {
        let (geometry, components, values) = read_raw(base)?;
        check_dim(1, components)?;
        Self::new(geometry, values)
    }
}

/// Dense transformation `φ̂(x) = x + u(x)` with `u` sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformField {
    pub geometry: GridGeometry,
    /// `d` components per node, interleaved.
    pub displacement: Vec<f64>,
}

impl TransformField {
    pub fn new(geometry: GridGeometry, displacement: Vec<f64>) -> Result<Self> {
        check_dim(geometry.node_count() * geometry.dimension(), displacement.len())?;
        if displacement.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("displacements must be finite".into()));
        }
        Ok(Self { geometry, displacement })
    }

    pub fn identity(geometry: GridGeometry) -> Self {
        let n = geometry.node_count() * geometry.dimension();
        Self {
            geometry,
            displacement: vec![0.0; n],
        }
    }

    /// Samples the displacement `u(x)` returned by `f` at every node.
    pub fn from_displacement_fn(geometry: GridGeometry, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let d = geometry.dimension();
        let mut displacement = Vec::with_capacity(geometry.node_count() * d);
        for i in 0..geometry.node_count() {
            let u = f(&geometry.node_point(i));
            displacement.extend_from_slice(&u[..d]);
        }
        Self { geometry, displacement }
    }

    pub fn dimension(&self) -> usize {
        self.geometry.dimension()
    }

    pub fn node_displacement(&self, flat: usize) -> &[f64] {
        let d = self.dimension();
        &self.displacement[flat * d..(flat + 1) * d]
    }

    fn interpolate(&self, stencil: &[(usize, f64)]) -> Vec<f64> {
        let d = self.dimension();
        let mut u = vec![0.0; d];
        for &(i, w) in stencil {
            for (c, uc) in u.iter_mut().enumerate() {
                *uc += w * self.displacement[i * d + c];
            }
        }
        u
    }

    /// `u(x)`; errors outside the grid hull.
    pub fn displacement_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dimension(), x.len())?;
        let st = self
            .geometry
            .stencil(x, false)
            .ok_or_else(|| Error::OutsideDomain(x.to_vec()))?;
        Ok(self.interpolate(&st))
    }

    /// `u(x)` with `x` clamped into the hull (border replication).
    pub fn displacement_clamped(&self, x: &[f64]) -> Vec<f64> {
        match self.geometry.stencil(x, true) {
            Some(st) => self.interpolate(&st),
            None => vec![0.0; self.dimension()],
        }
    }

    /// `φ̂(x)`; errors outside the grid hull.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.displacement_at(x)?;
        Ok(x.iter().zip(u).map(|(a, b)| a + b).collect())
    }

    pub fn eval_clamped(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.displacement_clamped(x)).map(|(a, b)| a + b).collect()
    }

    /// Adds the clamped multilinear sample of `u` at `x` to `out` without
    /// allocating. `x` and `out` have length `d ≤ 3`.
    fn add_clamped_sample(&self, x: &[f64], out: &mut [f64]) {
        let g = &self.geometry;
        let d = x.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut stride = [0usize; 3];
        let mut s = 1;
        for a in 0..d {
            stride[a] = s;
            s *= g.shape[a];
            if g.shape[a] == 1 {
                continue;
            }
            let u = ((x[a] - g.origin[a]) / g.spacing[a]).clamp(0.0, (g.shape[a] - 1) as f64);
            let i = (u as usize).min(g.shape[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    if g.shape[a] == 1 {
                        w = 0.0;
                        break;
                    }
                    w *= frac[a];
                    flat += (base[a] + 1) * stride[a];
                } else {
                    w *= 1.0 - frac[a];
                    flat += base[a] * stride[a];
                }
            }
            if w != 0.0 {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.displacement[flat * d + c];
                }
            }
        }
    }

    /// `outer ∘ inner` on `inner`'s grid, sampling `outer` with border clamping.
    pub fn compose(outer: &TransformField, inner: &TransformField) -> TransformField {
        let d = inner.dimension();
        let g = &inner.geometry;
        if d > 3 || outer.dimension() != d {
            let mut displacement = Vec::with_capacity(inner.displacement.len());
            for i in 0..g.node_count() {
                let x = g.node_point(i);
                let ui = inner.node_displacement(i);
                let moved: Vec<f64> = x.iter().zip(ui).map(|(a, b)| a + b).collect();
                let uo = outer.displacement_clamped(&moved);
                for c in 0..d {
                    displacement.push(ui[c] + uo[c]);
                }
            }
            return TransformField {
                geometry: g.clone(),
                displacement,
            };
        }
        let mut displacement = inner.displacement.clone();
        let mut idx = [0usize; 3];
        let mut moved = [0.0f64; 3];
        for i in 0..g.node_count() {
            for (a, m) in moved[..d].iter_mut().enumerate() {
                *m = g.origin[a] + idx[a] as f64 * g.spacing[a] + inner.displacement[i * d + a];
            }
            outer.add_clamped_sample(&moved[..d], &mut displacement[i * d..(i + 1) * d]);
            for (ix, &n) in idx[..d].iter_mut().zip(&g.shape) {
                *ix += 1;
                if *ix < n {
                    break;
                }
                *ix = 0;
            }
        }
        TransformField {
            geometry: g.clone(),
            displacement,
        }
    }

    pub fn scaled(&self, factor: f64) -> TransformField {
        TransformField {
            geometry: self.geometry.clone(),
            displacement: self.displacement.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest displacement norm over the nodes.
    pub fn max_norm(&self) -> f64 {
        self.displacement
            .chunks(self.dimension())
            .map(|u| u.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Jacobian determinants of `φ̂` at interior nodes by central differences.
    pub fn interior_jacobian_determinants(&self) -> Vec<f64> {
        let d = self.dimension();
        let g = &self.geometry;
        let mut out = Vec::new();
        for i in 0..g.node_count() {
            let idx = g.multi_index(i);
            if (0..d).any(|a| idx[a] == 0 || idx[a] + 1 >= g.shape[a]) {
                continue;
            }
            let mut j = nalgebra::DMatrix::<f64>::identity(d, d);
            for a in 0..d {
                let mut lo = idx.clone();
                let mut hi = idx.clone();
                lo[a] -= 1;
                hi[a] += 1;
                let ul = self.node_displacement(g.flat_index(&lo));
                let uh = self.node_displacement(g.flat_index(&hi));
                for c in 0..d {
                    j[(c, a)] += (uh[c] - ul[c]) / (2.0 * g.spacing[a]);
                }
            }
            out.push(j.determinant());
        }
        out
    }

    pub fn write_raw(&self, base: &Path) -> Result<()> {
        write_raw_f32(base, &self.geometry, self.dimension(), &self.displacement)
    }

    pub fn read_raw(base: &Path) -> Result<Self> {
        let (geometry, components, values) = read_raw(base)?;
        check_dim(geometry.dimension(), components)?;
        Self::new(geometry, values)
    }
}
