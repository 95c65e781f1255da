//! Gaussian-process Bayesian optimization over the unit actuator cube.
//!
//! [`optimize`] evaluates `init` scrambled Sobol points, then spends the rest
//! of the budget on expected-improvement proposals from an ARD
//! squared-exponential GP. Observations are standardized before fitting and
//! the kernel hyperparameters are re-fitted every `refit_every` iterations on
//! the most recent `fit_window` observations.

mod acquisition;
pub mod gp;
mod hapi;
pub mod sobol;

use serde::{Deserialize, Serialize};

pub use acquisition::{expected_improvement, normal_cdf, normal_pdf, propose, ProposeConfig};
pub use gp::{ArdKernel, GpState, HyperBounds, HyperFit};
pub use hapi::{hapi_objective, hapi_value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub budget: usize,
    pub init: usize,
    pub seed: u64,
    pub refit_every: usize,
    /// Hyperparameters are fitted on at most this many of the latest observations.
    pub fit_window: usize,
    pub hyper: HyperFit,
    pub propose: ProposeConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 300,
            init: 20,
            seed: 0,
            refit_every: 10,
            fit_window: 100,
            hyper: HyperFit::default(),
            propose: ProposeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoIteration {
    pub index: usize,
    pub actuators: Vec<f64>,
    pub objective: f64,
    pub incumbent: f64,
}

/// Every evaluation of a run, in order, with the running best.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub iterations: Vec<BoIteration>,
}

impl BoTrace {
    fn push(&mut self, actuators: Vec<f64>, objective: f64) {
        let incumbent = self.best_value().map_or(objective, |b| b.max(objective));
        let index = self.iterations.len();
        self.iterations.push(BoIteration { index, actuators, objective, incumbent });
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn best_value(&self) -> Option<f64> {
        self.iterations.last().map(|it| it.incumbent)
    }

    /// First evaluation attaining the incumbent value.
    pub fn best(&self) -> Option<&BoIteration> {
        let target = self.best_value()?;
        self.iterations.iter().find(|it| it.objective == target)
    }

    pub fn is_monotone(&self) -> bool {
        self.iterations.windows(2).all(|w| w[1].incumbent >= w[0].incumbent)
    }

    /// `iter,objective,incumbent,a0,a1,...` with a header row.
    pub fn to_csv(&self) -> String {
        let dim = self.iterations.first().map_or(0, |it| it.actuators.len());
        let mut out = String::from("iter,objective,incumbent");
        for d in 0..dim {
            out.push_str(&format!(",a{d}"));
        }
        out.push('\n');
        for it in &self.iterations {
            out.push_str(&format!("{},{},{}", it.index, it.objective, it.incumbent));
            for a in &it.actuators {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("trace csv", "empty"))?;
        if !header.starts_with("iter,objective,incumbent") {
            return Err(Error::format("trace csv", "bad header"));
        }
        let mut trace = BoTrace::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(Error::format("trace csv", line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format("trace csv", e));
            trace.iterations.push(BoIteration {
                index: fields[0].parse().map_err(|e| Error::format("trace csv", e))?,
                objective: num(fields[1])?,
                incumbent: num(fields[2])?,
                actuators: fields[3..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(trace)
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn evaluate<F: FnMut(&[f64]) -> f64>(objective: &mut F, x: Vec<f64>, trace: &mut BoTrace) -> Result<()> {
    let value = objective(&x);
    if !value.is_finite() {
        return Err(Error::AbortedRun { iteration: trace.len(), trace: Box::new(trace.clone()) });
    }
    trace.push(x, value);
    Ok(())
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
    (y.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

/// Maximizes `objective` over `[0, 1]^dim`. Returns the incumbent and the
/// full trace; a non-finite objective value aborts with the partial trace.
pub fn optimize<F>(mut objective: F, dim: usize, cfg: &BoConfig) -> Result<(Vec<f64>, BoTrace)>
where
    F: FnMut(&[f64]) -> f64,
{
    if dim == 0 || cfg.budget == 0 {
        return Err(Error::InvalidInput("optimization needs dim > 0 and budget > 0".into()));
    }
    let mut trace = BoTrace::default();
    let init = cfg.init.clamp(1, cfg.budget);
    for x in sobol::points(init, dim, derive_seed(cfg.seed, 0)) {
        evaluate(&mut objective, x, &mut trace)?;
    }

    let mut kernel = ArdKernel::isotropic(dim, (dim as f64).sqrt() * 0.5, 1.0);
    let mut noise = 1e-4;
    for step in 0..cfg.budget - init {
        let xs: Vec<Vec<f64>> = trace.iterations.iter().map(|it| it.actuators.clone()).collect();
        let ys: Vec<f64> = trace.iterations.iter().map(|it| it.objective).collect();
        let (ys, _, _) = standardize(&ys);
        if step % cfg.refit_every.max(1) == 0 {
            let from = xs.len().saturating_sub(cfg.fit_window.max(2));
            (kernel, noise) = gp::fit_hyperparameters(
                &xs[from..],
                &ys[from..],
                (&kernel, noise),
                &cfg.hyper,
                derive_seed(cfg.seed, 1_000_000 + step as u64),
            );
        }
        let best = ys.iter().cloned().fold(f64::MIN, f64::max);
        let gp = GpState::fit(xs, ys, kernel.clone(), noise, 0.0)?;
        let x = propose(&gp, best, derive_seed(cfg.seed, 1 + step as u64), &cfg.propose);
        evaluate(&mut objective, x, &mut trace)?;
    }
    let best = trace.best().expect("budget > 0").actuators.clone();
    Ok((best, trace))
}

/// Baseline: evaluate the first `budget` scrambled Sobol points.
pub fn random_search<F>(mut objective: F, dim: usize, budget: usize, seed: u64) -> Result<(Vec<f64>, BoTrace)>
where
    F: FnMut(&[f64]) -> f64,
{
    if dim == 0 || budget == 0 {
        return Err(Error::InvalidInput("random search needs dim > 0 and budget > 0".into()));
    }
    let mut trace = BoTrace::default();
    for x in sobol::points(budget, dim, derive_seed(seed, 0x5eed)) {
        evaluate(&mut objective, x, &mut trace)?;
    }
    let best = trace.best().expect("budget > 0").actuators.clone();
    Ok((best, trace))
}
