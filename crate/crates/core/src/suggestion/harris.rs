//! Harris corner detection on 2-D images and 3-D volumes.

use crate::error::{Error, Result};
use crate::field::{GridGeometry, ScalarField};
use crate::kernels::distance;

use super::CandidateSet;

#[derive(Debug, Clone, PartialEq)]
pub struct HarrisOptions {
    /// Gaussian window in pixels over which gradient products are averaged.
    pub sigma: f64,
    pub kappa: f64,
    pub min_spacing: f64,
    pub max_count: usize,
    /// Responses below this fraction of the strongest one are ignored.
    pub relative_threshold: f64,
}

impl Default for HarrisOptions {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            kappa: 0.05,
            min_spacing: 10.0,
            max_count: 500,
            relative_threshold: 0.01,
        }
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable convolution along `axis` with border replication.
fn convolve_axis(g: &GridGeometry, values: &[f64], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let n = g.shape[axis] as isize;
    let stride: usize = g.shape[..axis].iter().product();
    let mut out = vec![0.0; values.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let i = ((flat / stride) % g.shape[axis]) as isize;
        let base = flat - i as usize * stride;
        let mut acc = 0.0;
        for (k, t) in taps.iter().enumerate() {
            let j = (i + k as isize - radius).clamp(0, n - 1) as usize;
            acc += t * values[base + j * stride];
        }
        *o = acc;
    }
    out
}

fn smooth(g: &GridGeometry, values: &[f64], sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    (0..g.dimension()).fold(values.to_vec(), |v, a| convolve_axis(g, &v, a, &taps))
}

fn central_difference(g: &GridGeometry, values: &[f64], axis: usize) -> Vec<f64> {
    let stride: usize = g.shape[..axis].iter().product();
    let n = g.shape[axis];
    (0..values.len())
        .map(|flat| {
            let i = (flat / stride) % n;
            if n == 1 {
                return 0.0;
            }
            let lo = if i == 0 { flat } else { flat - stride };
            let hi = if i + 1 == n { flat } else { flat + stride };
            let span = if i == 0 || i + 1 == n { 1.0 } else { 2.0 };
            (values[hi] - values[lo]) / (span * g.spacing[axis])
        })
        .collect()
}

/// Harris response `det M − 4κ·(tr M / d)^d` at every node.
///
/// In 2-D this is the usual `det M − κ·(tr M)²`. The `d`-th power keeps the
/// response homogeneous in 3-D, and the `4/d^d` factor gives `κ` the same
/// meaning relative to an isotropic corner in both dimensions.
pub fn harris_response(image: &ScalarField, sigma: f64, kappa: f64) -> Vec<f64> {
    let g = &image.geometry;
    let d = g.dimension();
    let grads: Vec<Vec<f64>> = (0..d).map(|a| central_difference(g, &image.values, a)).collect();
    let mut tensor = vec![vec![Vec::new(); d]; d];
    for a in 0..d {
        for b in a..d {
            let prod: Vec<f64> = grads[a].iter().zip(&grads[b]).map(|(x, y)| x * y).collect();
            tensor[a][b] = smooth(g, &prod, sigma);
        }
    }
    (0..image.values.len())
        .map(|i| {
            let m = nalgebra::DMatrix::from_fn(d, d, |a, b| {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                tensor[lo][hi][i]
            });
            m.determinant() - 4.0 * kappa * (m.trace() / d as f64).powi(d as i32)
        })
        .collect()
}

fn is_local_max(g: &GridGeometry, response: &[f64], flat: usize) -> bool {
    let d = g.dimension();
    let idx = g.multi_index(flat);
    let v = response[flat];
    let neighbours = 3usize.pow(d as u32);
    for code in 0..neighbours {
        let mut c = code;
        let mut nb = idx.clone();
        let mut centre = true;
        let mut inside = true;
        for a in 0..d {
            let off = (c % 3) as isize - 1;
            c /= 3;
            if off != 0 {
                centre = false;
            }
            let j = idx[a] as isize + off;
            if j < 0 || j >= g.shape[a] as isize {
                inside = false;
                break;
            }
            nb[a] = j as usize;
        }
        if centre || !inside {
            continue;
        }
        if response[g.flat_index(&nb)] > v {
            return false;
        }
    }
    true
}

/// Salient candidate locations by Harris response with greedy spacing
/// suppression, strongest first.
pub fn detect_candidates(image: &ScalarField, options: &HarrisOptions) -> Result<CandidateSet> {
    let g = &image.geometry;
    if !(2..=3).contains(&g.dimension()) {
        return Err(Error::Validation("images must be 2-D or 3-D".into()));
    }
    let response = harris_response(image, options.sigma, options.kappa);
    let peak = response.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return CandidateSet::new(Vec::new());
    }
    // keep away from the border by the smoothing radius
    let margin = (3.0 * options.sigma).ceil() as usize;
    let floor = options.relative_threshold * peak;
    let mut maxima: Vec<usize> = (0..response.len())
        .filter(|&i| {
            let idx = g.multi_index(i);
            response[i] > floor
                && idx
                    .iter()
                    .zip(&g.shape)
                    .all(|(&k, &n)| k >= margin && k + margin < n)
                && is_local_max(g, &response, i)
        })
        .collect();
    maxima.sort_by(|&a, &b| response[b].total_cmp(&response[a]).then(a.cmp(&b)));

    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for i in maxima {
        if accepted.len() >= options.max_count {
            break;
        }
        let p = g.node_point(i);
        if accepted.iter().all(|q| distance(q, &p) >= options.min_spacing) {
            accepted.push(p);
        }
    }
    CandidateSet::new(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> ScalarField {
        let g = GridGeometry::pixels(vec![64, 64]).unwrap();
        ScalarField::from_fn(g, |x| {
            if (20.0..44.0).contains(&x[0]) && (20.0..44.0).contains(&x[1]) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn constant_image_has_no_candidates() {
        let g = GridGeometry::pixels(vec![32, 32]).unwrap();
        let img = ScalarField::from_fn(g, |_| 5.0);
        assert!(detect_candidates(&img, &HarrisOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn square_yields_its_four_corners() {
        let c = detect_candidates(&square_image(), &HarrisOptions::default()).unwrap();
        assert_eq!(c.len(), 4, "{:?}", c.points);
        // the intensity step sits between pixels 19|20 and 43|44
        let corners = [[19.5, 19.5], [43.5, 19.5], [19.5, 43.5], [43.5, 43.5]];
        for corner in corners {
            let nearest = c
                .points
                .iter()
                .map(|p| distance(p, &corner))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 2.0, "corner {corner:?}: nearest {nearest}");
        }
    }

    #[test]
    fn min_spacing_is_respected() {
        let g = GridGeometry::pixels(vec![80, 80]).unwrap();
        // checkerboard of 8 px cells has many corners closer than 12 px
        let img = ScalarField::from_fn(g, |x| (((x[0] / 8.0).floor() + (x[1] / 8.0).floor()) as i64 % 2) as f64);
        let opts = HarrisOptions {
            min_spacing: 12.0,
            ..Default::default()
        };
        let c = detect_candidates(&img, &opts).unwrap();
        assert!(c.len() > 4);
        for (i, p) in c.points.iter().enumerate() {
            for q in &c.points[i + 1..] {
                assert!(distance(p, q) >= 12.0);
            }
        }
    }

    #[test]
    fn cube_corners_in_3d() {
        let g = GridGeometry::pixels(vec![32, 32, 32]).unwrap();
        let img = ScalarField::from_fn(g, |x| {
            if x.iter().all(|v| (6.0..26.0).contains(v)) {
                1.0
            } else {
                0.0
            }
        });
        let c = detect_candidates(&img, &HarrisOptions::default()).unwrap();
        assert_eq!(c.len(), 8, "{:?}", c.points);
    }
}
