//! Kernel weight estimation by leave-one-out predictive log-loss.
//!
//! With `K = K_AA(θ)`, `q = K⁻¹ (Y − μ(X))` and `D_l` the `l`-th diagonal
//! `d × d` block of `K⁻¹`, the leave-one-out negative log-likelihood is
//!
//! `½ [L d ln 2π + Σ_l (q_lᵀ D_l⁻¹ q_l − ln det D_l)]`,
//!
//! so only the bracketed sum needs to be minimized. Weights are optimized as
//! `ln θ` with BFGS and an Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};

use super::{cross_gram, KernelSpec};
use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::gp::MeanFunction;
use crate::linalg::{log_det_spd, spd_inverse};

#[derive(Debug, Clone)]
pub struct GppOptions {
    pub max_iterations: usize,
    /// Stop once the relative loss decrease of an accepted step drops below this.
    pub rel_tolerance: f64,
    pub mean: MeanFunction,
}

impl Default for GppOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tolerance: 1e-7,
            mean: MeanFunction::Identity,
        }
    }
}

/// Result of a weight fit, including the loss at every accepted iterate.
#[derive(Debug, Clone)]
pub struct GppFit {
    pub spec: KernelSpec,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct GppProblem {
    d: usize,
    count: usize,
    per_scale: Vec<DMatrix<f64>>,
    noise: DMatrix<f64>,
    residual: DVector<f64>,
}

impl GppProblem {
    fn new(spec: &KernelSpec, annotations: &[Annotation], mean: &MeanFunction) -> Result<Self> {
        if annotations.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "weight estimation needs at least 2 annotations, got {}",
                annotations.len()
            )));
        }
        let d = spec.dimension();
        for a in annotations {
            crate::error::check_dim(d, a.dimension())?;
        }
        let points: Vec<Vec<f64>> = annotations.iter().map(|a| a.x.clone()).collect();
        let per_scale = spec
            .scales()
            .iter()
            .map(|&rho| {
                let single = KernelSpec::new(spec.basis(), vec![rho], vec![1.0], d)?;
                Ok(cross_gram(&single, &points, &points))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = annotations.len() * d;
        let mut noise = DMatrix::zeros(n, n);
        let mut residual = DVector::zeros(n);
        for (l, a) in annotations.iter().enumerate() {
            noise.view_mut((l * d, l * d), (d, d)).copy_from(&a.sigma);
            let prior = mean.eval(&a.x);
            for c in 0..d {
                residual[l * d + c] = a.y[c] - prior[c];
            }
        }
        Ok(Self {
            d,
            count: annotations.len(),
            per_scale,
            noise,
            residual,
        })
    }

    fn assemble(&self, weights: &[f64]) -> DMatrix<f64> {
        let mut k = self.noise.clone();
        for (w, g) in weights.iter().zip(&self.per_scale) {
            k += g * *w;
        }
        k
    }

    /// Loss and, if requested, its gradient with respect to the weights.
    fn evaluate(&self, weights: &[f64], with_gradient: bool) -> Result<(f64, Vec<f64>)> {
        let d = self.d;
        let kinv = spd_inverse(&self.assemble(weights))?;
        let q = &kinv * &self.residual;
        let mut loss = 0.0;
        let mut d_inv = Vec::with_capacity(self.count);
        let mut dq = Vec::with_capacity(self.count);
        for l in 0..self.count {
            let block = kinv.view((l * d, l * d), (d, d)).into_owned();
            let block_inv = spd_inverse(&block)?;
            let ql = q.rows(l * d, d).into_owned();
            let v = &block_inv * &ql;
            loss += ql.dot(&v) - log_det_spd(&block)?;
            d_inv.push(block_inv);
            dq.push(v);
        }
        if !with_gradient {
            return Ok((loss, Vec::new()));
        }
        let mut grad = Vec::with_capacity(self.per_scale.len());
        for g in &self.per_scale {
            // dK⁻¹/dθ_s = −K⁻¹ G_s K⁻¹
            let kg = &kinv * g;
            let w = &kg * &kinv;
            let dq_all = -(&kg * &q);
            let mut acc = 0.0;
            for l in 0..self.count {
                let d_block = -w.view((l * d, l * d), (d, d)).into_owned();
                let dql = dq_all.rows(l * d, d);
                let v = &dq[l];
                acc += 2.0 * dql.dot(v) - v.dot(&(&d_block * v)) - (&d_inv[l] * &d_block).trace();
            }
            grad.push(acc);
        }
        Ok((loss, grad))
    }
}

/// Bracketed leave-one-out loss `Σ_l (q_lᵀ D_l⁻¹ q_l − ln det D_l)`.
pub fn gpp_loss(spec: &KernelSpec, annotations: &[Annotation], mean: &MeanFunction) -> Result<f64> {
    GppProblem::new(spec, annotations, mean)?
        .evaluate(spec.weights(), false)
        .map(|(l, _)| l)
}

/// [`gpp_loss`] and its gradient with respect to the kernel weights.
pub fn gpp_loss_and_gradient(
    spec: &KernelSpec,
    annotations: &[Annotation],
    mean: &MeanFunction,
) -> Result<(f64, Vec<f64>)> {
    GppProblem::new(spec, annotations, mean)?.evaluate(spec.weights(), true)
}

/// Leave-one-out negative log-likelihood `−Σ_l ln N(y_l; μ_{|A⁽ˡ⁾}(x_l), k_{|A⁽ˡ⁾}(x_l, x_l) + Σ_l)`.
pub fn loo_negative_log_likelihood(
    spec: &KernelSpec,
    annotations: &[Annotation],
    mean: &MeanFunction,
) -> Result<f64> {
    let loss = gpp_loss(spec, annotations, mean)?;
    let ld = (annotations.len() * spec.dimension()) as f64;
    Ok(0.5 * (ld * (2.0 * std::f64::consts::PI).ln() + loss))
}

/// Fits the kernel weights, keeping the basis and the scale ladder of `spec0`.
pub fn estimate_hyperparameters(
    annotations: &[Annotation],
    spec0: &KernelSpec,
    opts: &GppOptions,
) -> Result<KernelSpec> {
    fit_hyperparameters(annotations, spec0, opts).map(|fit| fit.spec)
}

const MAX_LOG_STEP: f64 = 3.0;
const LOG_WEIGHT_BOUND: f64 = 60.0;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// [`estimate_hyperparameters`] with the full optimization trace.
pub fn fit_hyperparameters(
    annotations: &[Annotation],
    spec0: &KernelSpec,
    opts: &GppOptions,
) -> Result<GppFit> {
    let problem = GppProblem::new(spec0, annotations, &opts.mean)?;
    let n = spec0.weights().len();
    let max_w = spec0.weights().iter().cloned().fold(0.0, f64::max);
    let floor = 1e-6 * max_w;

    let to_weights = |u: &DVector<f64>| -> Vec<f64> { u.iter().map(|v| v.exp()).collect() };
    let eval = |u: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let w = to_weights(u);
        let (f, g) = problem.evaluate(&w, true)?;
        if !f.is_finite() {
            return Err(Error::Degenerate("non-finite loss".into()));
        }
        // chain rule for θ = exp(u)
        Ok((f, DVector::from_iterator(n, g.iter().zip(&w).map(|(gi, wi)| gi * wi))))
    };

    let mut u = DVector::from_iterator(n, spec0.weights().iter().map(|w| w.max(floor).ln()));
    let (mut f, mut g) = eval(&u)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        let mut p = -(&h * &g);
        if g.dot(&p) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -g.clone();
        }
        let longest = p.amax();
        if longest > MAX_LOG_STEP {
            p *= MAX_LOG_STEP / longest;
        }
        let slope = g.dot(&p);
        if slope.abs() < 1e-300 {
            converged = true;
            break;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = (&u + &p * step).map(|v| v.clamp(-LOG_WEIGHT_BOUND, LOG_WEIGHT_BOUND));
            if let Ok((fc, gc)) = eval(&candidate) {
                if fc <= f + ARMIJO_C1 * step * slope {
                    accepted = Some((candidate, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((u_new, f_new, g_new)) = accepted else {
            // no descent along the search direction: stationary to working precision
            converged = true;
            break;
        };

        let s = &u_new - &u;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }

        let rel = (f - f_new).abs() / f.abs().max(1.0);
        u = u_new;
        f = f_new;
        g = g_new;
        trace.push(f);
        if rel < opts.rel_tolerance {
            converged = true;
            break;
        }
    }

    Ok(GppFit {
        spec: spec0.with_weights(to_weights(&u))?,
        loss_trace: trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram_matrix, kernel_eval, BasisKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_annotations(count: usize, seed: u64) -> Vec<Annotation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = vec![rng.random_range(0.0..60.0), rng.random_range(0.0..60.0)];
                let y = vec![x[0] + rng.random_range(-3.0..3.0), x[1] + rng.random_range(-3.0..3.0)];
                let a = rng.random_range(0.2..1.5);
                let b = rng.random_range(-0.3..0.3);
                let c = rng.random_range(0.2..1.5);
                let sigma = DMatrix::from_row_slice(2, 2, &[a * a + b * b, b * c, b * c, c * c]);
                Annotation::new(x, y, sigma).unwrap()
            })
            .collect()
    }

    /// −Σ_l ln N(y_l; μ, V) with μ and V from refitting on all but annotation l.
    fn explicit_loo(spec: &KernelSpec, anns: &[Annotation]) -> f64 {
        let d = 2;
        let mut total = 0.0;
        for l in 0..anns.len() {
            let rest: Vec<&Annotation> = anns.iter().enumerate().filter(|(i, _)| *i != l).map(|(_, a)| a).collect();
            let pts: Vec<Vec<f64>> = rest.iter().map(|a| a.x.clone()).collect();
            let noise: Vec<DMatrix<f64>> = rest.iter().map(|a| a.sigma.clone()).collect();
            let kaa = gram_matrix(spec, &pts, Some(&noise)).unwrap();
            let kinv = kaa.try_inverse().unwrap();
            let mut kx = DMatrix::zeros(pts.len() * d, d);
            for (i, p) in pts.iter().enumerate() {
                kx.view_mut((i * d, 0), (d, d)).copy_from(&kernel_eval(spec, p, &anns[l].x).unwrap());
            }
            let r = DVector::from_iterator(pts.len() * d, rest.iter().flat_map(|a| vec![a.y[0] - a.x[0], a.y[1] - a.x[1]]));
            let mean = DVector::from_row_slice(&anns[l].x) + kx.transpose() * &kinv * r;
            let cov = kernel_eval(spec, &anns[l].x, &anns[l].x).unwrap() - kx.transpose() * &kinv * &kx + &anns[l].sigma;
            let dev = DVector::from_row_slice(&anns[l].y) - mean;
            let quad = dev.dot(&(cov.clone().try_inverse().unwrap() * &dev));
            total += 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + quad);
        }
        total
    }

    #[test]
    fn simplified_loss_equals_explicit_refits() {
        for seed in 0..5 {
            let anns = random_annotations(5, seed);
            let spec = KernelSpec::ladder(BasisKind::Wendland1, 15.0, 3, vec![2.0, 1.0, 0.5], 2).unwrap();
            let direct = explicit_loo(&spec, &anns);
            let fast = loo_negative_log_likelihood(&spec, &anns, &MeanFunction::Identity).unwrap();
            assert!(((direct - fast) / direct).abs() < 1e-8, "{direct} vs {fast}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let anns = random_annotations(8, 11);
        let spec = KernelSpec::ladder(BasisKind::Gaussian, 10.0, 3, vec![1.5, 0.7, 2.0], 2).unwrap();
        let (_, grad) = gpp_loss_and_gradient(&spec, &anns, &MeanFunction::Identity).unwrap();
        for s in 0..3 {
            let h = 1e-6 * spec.weights()[s];
            let mut up = spec.weights().to_vec();
            let mut down = spec.weights().to_vec();
            up[s] += h;
            down[s] -= h;
            let fu = gpp_loss(&spec.with_weights(up).unwrap(), &anns, &MeanFunction::Identity).unwrap();
            let fd = gpp_loss(&spec.with_weights(down).unwrap(), &anns, &MeanFunction::Identity).unwrap();
            let fd_grad = (fu - fd) / (2.0 * h);
            assert!((fd_grad - grad[s]).abs() < 1e-5 * grad[s].abs().max(1.0), "scale {s}: {fd_grad} vs {}", grad[s]);
        }
    }

    #[test]
    fn too_few_annotations() {
        let anns = random_annotations(1, 0);
        let spec = KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![1.0], 2).unwrap();
        assert!(matches!(
            estimate_hyperparameters(&anns, &spec, &GppOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn fit_never_increases_loss() {
        let anns = random_annotations(12, 5);
        let spec0 = KernelSpec::ladder(BasisKind::Wendland1, 10.0, 4, vec![50.0, 0.01, 3.0, 1.0], 2).unwrap();
        let fit = fit_hyperparameters(&anns, &spec0, &GppOptions::default()).unwrap();
        assert!(fit.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        let start = gpp_loss(&spec0, &anns, &MeanFunction::Identity).unwrap();
        let end = gpp_loss(&fit.spec, &anns, &MeanFunction::Identity).unwrap();
        assert!(end <= start + 1e-9);
        assert_eq!(fit.spec.scales(), spec0.scales());
    }
}
