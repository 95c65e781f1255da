//! Gaussian-process regression with an ARD squared-exponential kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First jitter tried when the plain Cholesky factorization fails.
pub const BASE_JITTER: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdKernel {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
}

impl ArdKernel {
    pub fn isotropic(dim: usize, lengthscale: f64, signal_var: f64) -> Self {
        Self { lengthscales: vec![lengthscale; dim], signal_var }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_var * (-0.5 * r2).exp()
    }
}

/// Box constraints for hyperparameter fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub lengthscale: (f64, f64),
    pub signal_var: (f64, f64),
    pub noise_var: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self { lengthscale: (0.05, 10.0), signal_var: (1e-3, 10.0), noise_var: (1e-8, 0.1) }
    }
}

/// Fitted GP surrogate: observations, hyperparameters and the Cholesky factor
/// of `K + (noise_var + jitter) I`.
#[derive(Debug, Clone)]
pub struct GpState {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    kernel: ArdKernel,
    noise_var: f64,
    prior_mean: f64,
    jitter: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn gram(x: &[Vec<f64>], kernel: &ArdKernel) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kernel.signal_var;
        for j in 0..i {
            let v = kernel.eval(&x[i], &x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky with escalating diagonal jitter. Returns the factor and the jitter used.
fn factor(mut k: DMatrix<f64>, noise_var: f64, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    let mut jitter = 0.0;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.unpack(), jitter));
        }
        jitter = if jitter == 0.0 { BASE_JITTER * scale } else { jitter * 10.0 };
        if jitter > MAX_JITTER * scale {
            return Err(Error::IllConditioned { jitter });
        }
    }
}

impl GpState {
    /// Conditions the GP on `(x, y)`. Jitter is added only when the factorization
    /// of `K + noise_var I` fails, starting at [`BASE_JITTER`]·σ_f².
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, kernel: ArdKernel, noise_var: f64, prior_mean: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
        }
        if let Some(bad) = x.iter().find(|p| p.len() != kernel.dim()) {
            return Err(Error::LengthMismatch { left: bad.len(), right: kernel.dim() });
        }
        let k = gram(&x, &kernel);
        let (chol, jitter) = factor(k, noise_var, kernel.signal_var)?;
        let resid = DVector::from_iterator(y.len(), y.iter().map(|v| v - prior_mean));
        let tmp = chol.solve_lower_triangular(&resid).expect("non-singular factor");
        let alpha = chol.tr_solve_lower_triangular(&tmp).expect("non-singular factor");
        Ok(Self { x, y, kernel, noise_var, prior_mean, jitter, chol, alpha })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn kernel(&self) -> &ArdKernel {
        &self.kernel
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn observations(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.x, &self.y)
    }

    /// Posterior mean and (noise-free) variance at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.len();
        let mut v = DVector::from_iterator(n, self.x.iter().map(|xi| self.kernel.eval(xi, x)));
        let mean = self.prior_mean + v.dot(&self.alpha);
        self.chol.solve_lower_triangular_unchecked_mut(&mut v);
        let var = (self.kernel.signal_var - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Batched [`posterior`](Self::posterior).
    pub fn posterior_many(&self, xs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        const CHUNK: usize = 256;
        let n = self.len();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let mut ks = DMatrix::from_fn(n, chunk.len(), |i, j| self.kernel.eval(&self.x[i], &chunk[j]));
            let means: Vec<f64> = (0..chunk.len()).map(|j| self.prior_mean + ks.column(j).dot(&self.alpha)).collect();
            self.chol.solve_lower_triangular_unchecked_mut(&mut ks);
            for (j, mean) in means.into_iter().enumerate() {
                let var = (self.kernel.signal_var - ks.column(j).norm_squared()).max(0.0);
                out.push((mean, var));
            }
        }
        out
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        let resid = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - self.prior_mean));
        let log_det: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * resid.dot(&self.alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln ℓ_1..ln ℓ_D, ln σ_f², ln σ_n²)`.
pub fn lml_with_gradient(x: &[Vec<f64>], y: &[f64], kernel: &ArdKernel, noise_var: f64) -> Result<(f64, Vec<f64>)> {
    let gp = GpState::fit(x.to_vec(), y.to_vec(), kernel.clone(), noise_var, 0.0)?;
    let lml = gp.log_marginal_likelihood();
    let n = x.len();
    let dim = kernel.dim();
    // W = αα^T − K^{-1}
    let mut kinv = DMatrix::identity(n, n);
    gp.chol.solve_lower_triangular_unchecked_mut(&mut kinv);
    gp.chol.tr_solve_lower_triangular_unchecked_mut(&mut kinv);
    let alpha = &gp.alpha;
    let mut grad = vec![0.0; dim + 2];
    let mut trace_noise = 0.0;
    for i in 0..n {
        trace_noise += alpha[i] * alpha[i] - kinv[(i, i)];
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let kf = kernel.eval(&x[i], &x[j]);
            let wk = w * kf;
            grad[dim] += wk;
            if j < i {
                for d in 0..dim {
                    let delta = (x[i][d] - x[j][d]) / kernel.lengthscales[d];
                    // symmetric pair counted once, doubled
                    grad[d] += 2.0 * wk * delta * delta;
                }
            }
        }
    }
    for g in grad.iter_mut().take(dim + 1) {
        *g *= 0.5;
    }
    grad[dim + 1] = 0.5 * trace_noise * noise_var;
    Ok((lml, grad))
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperFit {
    pub bounds: HyperBounds,
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for HyperFit {
    fn default() -> Self {
        Self { bounds: HyperBounds::default(), restarts: 2, steps: 40, learning_rate: 0.1 }
    }
}

/// Seeded multi-start projected Adam ascent on the log marginal likelihood in
/// log-parameter space. Start 0 is `init`; the rest are log-uniform draws
/// inside the bounds. Returns the best `(kernel, noise_var)` found.
pub fn fit_hyperparameters(
    x: &[Vec<f64>],
    y: &[f64],
    init: (&ArdKernel, f64),
    cfg: &HyperFit,
    seed: u64,
) -> (ArdKernel, f64) {
    let dim = init.0.dim();
    let b = cfg.bounds;
    let lo: Vec<f64> = std::iter::repeat_n(b.lengthscale.0.ln(), dim)
        .chain([b.signal_var.0.ln(), b.noise_var.0.ln()])
        .collect();
    let hi: Vec<f64> = std::iter::repeat_n(b.lengthscale.1.ln(), dim)
        .chain([b.signal_var.1.ln(), b.noise_var.1.ln()])
        .collect();
    let unpack = |theta: &[f64]| {
        let kernel = ArdKernel {
            lengthscales: theta[..dim].iter().map(|t| t.exp().clamp(b.lengthscale.0, b.lengthscale.1)).collect(),
            signal_var: theta[dim].exp().clamp(b.signal_var.0, b.signal_var.1),
        };
        (kernel, theta[dim + 1].exp().clamp(b.noise_var.0, b.noise_var.1))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![init
        .0
        .lengthscales
        .iter()
        .map(|l| l.ln())
        .chain([init.0.signal_var.ln(), init.1.ln()])
        .zip(lo.iter().zip(&hi))
        .map(|(t, (l, h))| t.clamp(*l, *h))
        .collect::<Vec<f64>>()];
    for _ in 1..cfg.restarts.max(1) {
        starts.push(lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..=*h)).collect());
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let mut theta = start;
        let (mut m, mut v) = (vec![0.0; dim + 2], vec![0.0; dim + 2]);
        let (beta1, beta2) = (0.9, 0.999);
        let mut local_best: Option<(f64, Vec<f64>)> = None;
        for step in 1..=cfg.steps.max(1) {
            let (kernel, noise) = unpack(&theta);
            let Ok((lml, grad)) = lml_with_gradient(x, y, &kernel, noise) else {
                break;
            };
            if lml.is_finite() && local_best.as_ref().is_none_or(|(b, _)| lml > *b) {
                local_best = Some((lml, theta.clone()));
            }
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - beta1.powi(step as i32));
                let vh = v[i] / (1.0 - beta2.powi(step as i32));
                theta[i] = (theta[i] + cfg.learning_rate * mh / (vh.sqrt() + 1e-8)).clamp(lo[i], hi[i]);
            }
        }
        if let Some((lml, t)) = local_best {
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((lml, t));
            }
        }
    }
    match best {
        Some((_, theta)) => unpack(&theta),
        None => (init.0.clone(), init.1),
    }
}
