//! Browser bindings: render a face from actuator values, read its hidden
//! expression intensities, and watch a 1-D Bayesian optimization run.

use prefrank_core::bayesopt::gp::fit_hyperparameters;
use prefrank_core::bayesopt::{expected_improvement, ArdKernel, GpState, HyperFit};
use prefrank_core::emotion::Emotion;
use prefrank_core::face::{ActuatorVector, FaceSim, IMAGE_SIZE};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn emotion(name: &str) -> Result<Emotion, JsError> {
    name.parse().map_err(|e: prefrank_core::error::Error| JsError::new(&e.to_string()))
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Faces {
    sim: FaceSim,
}

#[wasm_bindgen]
impl Faces {
    #[wasm_bindgen(constructor)]
    pub fn new(dof: usize, seed: u64) -> Faces {
        Faces { sim: FaceSim::new(dof, seed) }
    }

    pub fn dof(&self) -> usize {
        self.sim.dof()
    }

    pub fn side(&self) -> usize {
        IMAGE_SIZE
    }

    /// RGBA bytes of the rendered face, row-major.
    pub fn render_rgba(&self, actuators: &[f64]) -> Result<Vec<u8>, JsError> {
        let img = self.sim.render(&ActuatorVector::new(actuators.to_vec()).map_err(js)?).map_err(js)?;
        Ok(img.to_u8().iter().flat_map(|&g| [g, g, g, 255]).collect())
    }

    /// Hidden intensity of each target emotion, in the order of [`emotions`].
    pub fn intensities(&self, actuators: &[f64]) -> Result<Vec<f64>, JsError> {
        let v = ActuatorVector::new(actuators.to_vec()).map_err(js)?;
        Emotion::TARGETS.iter().map(|&e| self.sim.latent_intensity(&v, e).map_err(js)).collect()
    }

    pub fn optimum(&self, emotion_name: &str) -> Result<Vec<f64>, JsError> {
        Ok(self.sim.optimum(emotion(emotion_name)?).into_inner())
    }
}

#[wasm_bindgen]
pub fn emotions() -> Vec<String> {
    Emotion::TARGETS.iter().map(|e| e.to_string()).collect()
}

const GRID: usize = 201;

/// Bayesian optimization over `t ∈ [0, 1]`, where `t` walks from the face
/// farthest from `target` through its optimum (at `t = 0.6`) to the optimum
/// of `other`. The objective is the hidden intensity of `target`.
#[wasm_bindgen]
pub struct LineSearch {
    sim: FaceSim,
    target: Emotion,
    path: [Vec<f64>; 3],
    xs: Vec<f64>,
    ys: Vec<f64>,
    kernel: ArdKernel,
    noise: f64,
}

#[derive(Serialize)]
struct Snapshot {
    grid: Vec<f64>,
    truth: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    ei: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    best_t: Option<f64>,
    lengthscale: f64,
}

impl LineSearch {
    fn point(&self, t: f64) -> Vec<f64> {
        let (a, b, w) = if t <= 0.6 { (&self.path[0], &self.path[1], t / 0.6) } else { (&self.path[1], &self.path[2], (t - 0.6) / 0.4) };
        a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
    }

    fn objective(&self, t: f64) -> f64 {
        let v = ActuatorVector::new(self.point(t)).expect("path stays in the unit cube");
        self.sim.latent_intensity(&v, self.target).expect("dimension matches")
    }

    /// GP on standardized observations; `None` before the first evaluation.
    fn gp(&self) -> Option<(GpState, f64, f64)> {
        if self.xs.is_empty() {
            return None;
        }
        let n = self.ys.len() as f64;
        let mean = self.ys.iter().sum::<f64>() / n;
        let std = (self.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        let std = if std > 0.0 { std } else { 1.0 };
        let z: Vec<f64> = self.ys.iter().map(|y| (y - mean) / std).collect();
        let x: Vec<Vec<f64>> = self.xs.iter().map(|&t| vec![t]).collect();
        GpState::fit(x, z, self.kernel.clone(), self.noise, 0.0).ok().map(|g| (g, mean, std))
    }

    fn grid() -> impl Iterator<Item = f64> {
        (0..GRID).map(|i| i as f64 / (GRID - 1) as f64)
    }
}

#[wasm_bindgen]
impl LineSearch {
    #[wasm_bindgen(constructor)]
    pub fn new(dof: usize, seed: u64, target: &str, other: &str) -> Result<LineSearch, JsError> {
        let sim = FaceSim::new(dof, seed);
        let (target, other) = (emotion(target)?, emotion(other)?);
        let path = [sim.antipode(target).into_inner(), sim.optimum(target).into_inner(), sim.optimum(other).into_inner()];
        Ok(LineSearch { sim, target, path, xs: Vec::new(), ys: Vec::new(), kernel: ArdKernel::isotropic(1, 0.2, 1.0), noise: 1e-6 })
    }

    /// Evaluates the objective at `t` and records it.
    pub fn evaluate(&mut self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let y = self.objective(t);
        self.xs.push(t);
        self.ys.push(y);
        if self.xs.len() >= 3 {
            let x: Vec<Vec<f64>> = self.xs.iter().map(|&t| vec![t]).collect();
            let n = self.ys.len() as f64;
            let m = self.ys.iter().sum::<f64>() / n;
            let s = (self.ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
            let z: Vec<f64> = self.ys.iter().map(|y| (y - m) / s).collect();
            (self.kernel, self.noise) = fit_hyperparameters(&x, &z, (&self.kernel, self.noise), &HyperFit::default(), self.xs.len() as u64);
        }
        y
    }

    /// Evaluates the grid point with the largest expected improvement and
    /// returns it; the first call evaluates the midpoint.
    pub fn step(&mut self) -> f64 {
        let t = match self.gp() {
            None => 0.5,
            Some((gp, mean, std)) => {
                let best = (self.ys.iter().cloned().fold(f64::MIN, f64::max) - mean) / std;
                Self::grid()
                    .map(|t| {
                        let (m, v) = gp.posterior(&[t]);
                        (t, expected_improvement(m, v, best))
                    })
                    .fold((0.5, f64::MIN), |acc, c| if c.1 > acc.1 { c } else { acc })
                    .0
            }
        };
        self.evaluate(t);
        t
    }

    pub fn reset(&mut self) {
        self.xs.clear();
        self.ys.clear();
        self.kernel = ArdKernel::isotropic(1, 0.2, 1.0);
        self.noise = 1e-6;
    }

    /// Actuator vector at `t`, for rendering.
    pub fn actuators_at(&self, t: f64) -> Vec<f64> {
        self.point(t.clamp(0.0, 1.0))
    }

    /// JSON with the true curve, the posterior band, EI and the observations.
    pub fn snapshot(&self) -> String {
        let grid: Vec<f64> = Self::grid().collect();
        let truth = grid.iter().map(|&t| self.objective(t)).collect();
        let (mut mean, mut std, mut ei) = (Vec::new(), Vec::new(), Vec::new());
        if let Some((gp, m0, s0)) = self.gp() {
            let best = (self.ys.iter().cloned().fold(f64::MIN, f64::max) - m0) / s0;
            for &t in &grid {
                let (m, v) = gp.posterior(&[t]);
                mean.push(m0 + s0 * m);
                std.push(s0 * v.sqrt());
                ei.push(s0 * expected_improvement(m, v, best));
            }
        }
        let best_t = self.xs.iter().zip(&self.ys).max_by(|a, b| a.1.total_cmp(b.1)).map(|(&t, _)| t);
        serde_json::to_string(&Snapshot {
            grid,
            truth,
            mean,
            std,
            ei,
            xs: self.xs.clone(),
            ys: self.ys.clone(),
            best_t,
            lengthscale: self.kernel.lengthscales[0],
        })
        .expect("plain numbers serialize")
    }
}
