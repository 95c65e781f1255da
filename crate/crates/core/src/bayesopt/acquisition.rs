use serde::{Deserialize, Serialize};

use super::gp::GpState;
use super::sobol;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `z Φ(z) + φ(z)`. `erfc` keeps relative accuracy in the lower tail, so the
/// cancellation costs only about `log10(z²)` digits.
fn ei_unit(z: f64) -> f64 {
    z * normal_cdf(z) + normal_pdf(z)
}

/// Expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (mean - best).max(0.0);
    }
    (sigma * ei_unit((mean - best) / sigma)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposeConfig {
    pub candidates: usize,
    pub refine_top: usize,
    /// Coordinate-ascent step sizes, one sweep each.
    pub steps: [f64; 2],
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self { candidates: 2048, refine_top: 8, steps: [0.1, 0.025] }
    }
}

/// Argmax of EI over the unit cube: score `candidates` scrambled Sobol points,
/// then polish the best `refine_top` by coordinate ascent. Ties keep the
/// lower candidate index.
pub fn propose(gp: &GpState, best: f64, seed: u64, cfg: &ProposeConfig) -> Vec<f64> {
    let dim = gp.kernel().dim();
    let cands = sobol::points(cfg.candidates.max(1), dim, seed);
    let scores: Vec<f64> = gp
        .posterior_many(&cands)
        .into_iter()
        .map(|(m, v)| expected_improvement(m, v, best))
        .collect();
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let ei_at = |x: &[f64]| {
        let (m, v) = gp.posterior(x);
        expected_improvement(m, v, best)
    };
    let mut winner = (scores[order[0]], cands[order[0]].clone());
    for &start in order.iter().take(cfg.refine_top) {
        let mut x = cands[start].clone();
        let mut fx = scores[start];
        for &step in &cfg.steps {
            for d in 0..dim {
                for dir in [1.0, -1.0] {
                    let old = x[d];
                    let moved = (old + dir * step).clamp(0.0, 1.0);
                    if moved == old {
                        continue;
                    }
                    x[d] = moved;
                    let f = ei_at(&x);
                    if f > fx {
                        fx = f;
                        break;
                    }
                    x[d] = old;
                }
            }
        }
        if fx > winner.0 {
            winner = (fx, x);
        }
    }
    winner.1
}
