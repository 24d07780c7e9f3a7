use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Perturbation set and step schedule of an iterative attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub bounds: (f32, f32),
    /// Uniform random start inside the ball (off by default).
    #[serde(default)]
    pub random_start: bool,
}

impl ThreatModel {
    /// Step size defaults to `2.5 * epsilon / steps`.
    pub fn new(norm: Norm, epsilon: f32, steps: usize) -> Self {
        let alpha = if epsilon > 0.0 && steps > 0 { 2.5 * epsilon / steps as f32 } else { 1.0 / 255.0 };
        ThreatModel { norm, epsilon, alpha, steps, bounds: (0.0, 1.0), random_start: false }
    }

    pub fn linf(epsilon: f32, steps: usize) -> Self {
        Self::new(Norm::Linf, epsilon, steps)
    }

    pub fn l2(epsilon: f32, steps: usize) -> Self {
        Self::new(Norm::L2, epsilon, steps)
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(contract(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(contract(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(contract("steps must be >= 1"));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(contract("input bounds are empty"));
        }
        Ok(())
    }

    /// Projects `candidate` onto the ball around `center` intersected with
    /// the input box, in place. Both are single items.
    pub fn project(&self, candidate: &mut [f32], center: &[f32]) {
        let (lo, hi) = self.bounds;
        match self.norm {
            Norm::Linf => {
                let e = self.epsilon;
                for (c, &x) in candidate.iter_mut().zip(center) {
                    *c = (*c).clamp(x - e, x + e).clamp(lo, hi);
                    // Rounding in x +/- e can leave the ball by an ulp.
                    while (*c - x).abs() > e {
                        *c = if *c > x { c.next_down() } else { c.next_up() };
                    }
                }
            }
            Norm::L2 => {
                let n = candidate.iter().zip(center).map(|(c, x)| ((c - x) as f64).powi(2)).sum::<f64>().sqrt();
                if n > self.epsilon as f64 {
                    let s = (self.epsilon as f64 / n) as f32 * (1.0 - 1e-6);
                    for (c, &x) in candidate.iter_mut().zip(center) {
                        *c = x + (*c - x) * s;
                    }
                }
                for c in candidate.iter_mut() {
                    *c = c.clamp(lo, hi);
                }
            }
        }
    }

    /// One ascent step along `grad` (sign for l-inf, normalised for l2),
    /// followed by projection.
    pub fn ascend(&self, current: &mut [f32], grad: &[f32], center: &[f32]) {
        match self.norm {
            Norm::Linf => {
                for (c, g) in current.iter_mut().zip(grad) {
                    *c += self.alpha * sign(*g);
                }
            }
            Norm::L2 => {
                let n = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (c, g) in current.iter_mut().zip(grad) {
                        *c += self.alpha * (*g as f64 / n) as f32;
                    }
                }
            }
        }
        self.project(current, center);
    }

    /// Distance of `a` from `b` in this threat model's norm.
    pub fn distance(&self, a: &[f32], b: &[f32]) -> f32 {
        match self.norm {
            Norm::Linf => linf_dist(a, b),
            Norm::L2 => l2_dist(a, b),
        }
    }

    /// Whether `adv` satisfies the ball and range constraints around `x`
    /// (with 1e-6 slack on the radius).
    pub fn admits(&self, adv: &Tensor, x: &Tensor) -> bool {
        let (lo, hi) = self.bounds;
        (0..x.batch()).all(|i| {
            let (a, c) = (adv.item_slice(i), x.item_slice(i));
            self.distance(a, c) <= self.epsilon + 1e-6 && a.iter().all(|v| *v >= lo && *v <= hi)
        })
    }
}

pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn linf_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

pub fn l2_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt() as f32
}
