//! Entropic optimal transport between 1-D weighted point clouds, solved in
//! the log domain with epsilon-scaling.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic blur; the regulariser is `blur^2` against the cost
    /// `|x - y|^2 / 2`.
    pub blur: f64,
    /// Ratio between successive blur levels of the annealing schedule.
    pub scaling: f64,
    pub max_iters: usize,
    /// Stop when no dual potential moves by more than this in one sweep.
    pub tol: f64,
    /// Soft-bin image intensities into this many levels before solving
    /// (`None` keeps one point per pixel).
    pub bins: Option<usize>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { blur: 0.05, scaling: 0.5, max_iters: 5000, tol: 1e-12, bins: Some(32) }
    }
}

impl SinkhornConfig {
    pub fn epsilon(&self) -> f64 {
        self.blur * self.blur
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return Err(contract(format!("sinkhorn blur must be > 0, got {}", self.blur)));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(contract("sinkhorn scaling must lie in (0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(contract("sinkhorn max_iters must be >= 1"));
        }
        if matches!(self.bins, Some(b) if b < 2) {
            return Err(contract("need at least two intensity bins"));
        }
        Ok(())
    }
}

/// Weighted 1-D point cloud (pixel intensities).
#[derive(Clone, Debug, PartialEq)]
pub struct PixelCloud {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PixelCloud {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(contract("point cloud needs matching, nonempty points and weights"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(contract("point cloud weights must be positive"));
        }
        let s: f64 = weights.iter().sum();
        Ok(PixelCloud { points, weights: weights.iter().map(|w| w / s).collect() })
    }

    /// One point per pixel, uniform weights.
    pub fn uniform(values: &[f32]) -> Result<Self> {
        let n = values.len();
        Self::new(values.iter().map(|&v| v as f64).collect(), vec![1.0 / n as f64; n])
    }

    /// Linear soft-binning onto `bins` evenly spaced levels in `[0, 1]`;
    /// empty levels are dropped. Returns the cloud and, per kept point, its
    /// level index.
    pub fn binned(values: &[f32], bins: usize) -> Result<(Self, Vec<usize>)> {
        let mut mass = vec![0.0f64; bins];
        for &v in values {
            let (k, fr) = bin_of(v, bins);
            mass[k] += 1.0 - fr;
            if fr > 0.0 {
                mass[k + 1] += fr;
            }
        }
        let kept: Vec<usize> = (0..bins).filter(|&k| mass[k] > 0.0).collect();
        let pts = kept.iter().map(|&k| k as f64 / (bins - 1) as f64).collect();
        let w = kept.iter().map(|&k| mass[k]).collect();
        Ok((Self::new(pts, w)?, kept))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.points.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.points.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Lower level and fractional position of `v` on a grid of `bins` levels.
pub(crate) fn bin_of(v: f32, bins: usize) -> (usize, f64) {
    let pos = (v.clamp(0.0, 1.0) as f64) * (bins - 1) as f64;
    let k = (pos.floor() as usize).min(bins - 2);
    (k, pos - k as f64)
}

/// Converged dual potentials of `OT_eps(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OtSolution {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    /// `<a, f> + <b, g>`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn cost(x: f64, y: f64) -> f64 {
    0.5 * (x - y) * (x - y)
}

/// `-eps * log sum_j exp(log w_j + (h_j - C(x, y_j)) / eps)`.
fn soft_min(x: f64, ys: &[f64], logw: &[f64], h: &[f64], eps: f64, buf: &mut [f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for j in 0..ys.len() {
        buf[j] = logw[j] + (h[j] - cost(x, ys[j])) / eps;
        m = m.max(buf[j]);
    }
    let s: f64 = buf[..ys.len()].iter().map(|v| (v - m).exp()).sum();
    -eps * (m + s.ln())
}

/// Blur levels of the annealing schedule, as regularisers, ending at
/// `cfg.epsilon()`.
fn eps_schedule(diam: f64, cfg: &SinkhornConfig) -> Vec<f64> {
    let mut schedule = Vec::new();
    let mut blur = diam.max(cfg.blur);
    while blur > cfg.blur {
        schedule.push(blur * blur);
        blur *= cfg.scaling;
    }
    schedule.push(cfg.epsilon());
    schedule
}

/// Runs `sweep` once per annealing level and then to convergence at the
/// final one. `sweep` returns the largest potential change.
fn anneal(schedule: &[f64], cfg: &SinkhornConfig, mut sweep: impl FnMut(f64) -> f64) -> (usize, bool) {
    let mut iterations = 0;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        loop {
            let delta = sweep(eps);
            iterations += 1;
            if !last {
                break;
            }
            if delta <= cfg.tol {
                return (iterations, true);
            }
            if iterations >= cfg.max_iters {
                return (iterations, false);
            }
        }
    }
    (iterations, false)
}

fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Entropic OT `min_pi <C, pi> + eps KL(pi | a x b)` via alternating
/// log-domain updates, annealing the blur from the cloud diameter down to
/// `cfg.blur`. Identical clouds go to [`self_ot`], since alternating
/// updates stall on them when the points are far apart relative to the
/// blur.
pub fn entropic_ot(a: &PixelCloud, b: &PixelCloud, cfg: &SinkhornConfig) -> Result<OtSolution> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(contract("sinkhorn on an empty cloud"));
    }
    if a == b {
        return self_ot(a, cfg);
    }
    let (la, lb): (Vec<f64>, Vec<f64>) =
        (a.weights.iter().map(|w| w.ln()).collect(), b.weights.iter().map(|w| w.ln()).collect());
    let schedule = eps_schedule(a.max().max(b.max()) - a.min().min(b.min()), cfg);
    let mut f = vec![0.0; a.len()];
    let mut g = vec![0.0; b.len()];
    let mut buf = vec![0.0; a.len().max(b.len())];
    let (iterations, converged) = anneal(&schedule, cfg, |eps| {
        let mut delta = 0.0f64;
        for i in 0..a.len() {
            let v = soft_min(a.points[i], &b.points, &lb, &g, eps, &mut buf);
            delta = delta.max((v - f[i]).abs());
            f[i] = v;
        }
        for j in 0..b.len() {
            let v = soft_min(b.points[j], &a.points, &la, &f, eps, &mut buf);
            delta = delta.max((v - g[j]).abs());
            g[j] = v;
        }
        delta
    });
    let value = dot(&a.weights, &f) + dot(&b.weights, &g);
    Ok(OtSolution { f, g, epsilon: cfg.epsilon(), value, iterations, converged })
}

/// `OT_eps(a, a)` with the symmetric averaged update
/// `f <- (f + softmin(f)) / 2`; `f` and `g` coincide.
pub fn self_ot(a: &PixelCloud, cfg: &SinkhornConfig) -> Result<OtSolution> {
    cfg.validate()?;
    if a.is_empty() {
        return Err(contract("sinkhorn on an empty cloud"));
    }
    let la: Vec<f64> = a.weights.iter().map(|w| w.ln()).collect();
    let schedule = eps_schedule(a.max() - a.min(), cfg);
    let mut f = vec![0.0; a.len()];
    let mut next = vec![0.0; a.len()];
    let mut buf = vec![0.0; a.len()];
    let (iterations, converged) = anneal(&schedule, cfg, |eps| {
        for i in 0..a.len() {
            next[i] = 0.5 * (f[i] + soft_min(a.points[i], &a.points, &la, &f, eps, &mut buf));
        }
        let delta = f.iter().zip(&next).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        f.copy_from_slice(&next);
        delta
    });
    let value = 2.0 * dot(&a.weights, &f);
    Ok(OtSolution { g: f.clone(), f, epsilon: cfg.epsilon(), value, iterations, converged })
}

/// Debiased divergence with its convergence flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub converged: bool,
}

/// `S(a, b) = OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2`, floored at zero.
pub fn sinkhorn_divergence(a: &PixelCloud, b: &PixelCloud, cfg: &SinkhornConfig) -> Result<Divergence> {
    let ab = entropic_ot(a, b, cfg)?;
    let aa = self_ot(a, cfg)?;
    let bb = self_ot(b, cfg)?;
    Ok(Divergence {
        value: debias(ab.value, aa.value, bb.value),
        converged: ab.converged && aa.converged && bb.converged,
    })
}

pub(crate) fn debias(ab: f64, aa: f64, bb: f64) -> f64 {
    (ab - 0.5 * aa - 0.5 * bb).max(0.0)
}

/// Entropic plan `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`, row-major.
pub fn transport_plan(a: &PixelCloud, b: &PixelCloud, sol: &OtSolution) -> Vec<f64> {
    let mut plan = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            let e = (sol.f[i] + sol.g[j] - cost(a.points[i], b.points[j])) / sol.epsilon;
            plan.push(a.weights[i] * b.weights[j] * e.exp());
        }
    }
    plan
}

/// Barycentric projection of every point of `a` onto `b` under the plan:
/// `sum_j pi_ij y_j / sum_j pi_ij`.
pub fn barycentric_map(a: &PixelCloud, b: &PixelCloud, sol: &OtSolution) -> Vec<f64> {
    let plan = transport_plan(a, b, sol);
    (0..a.len())
        .map(|i| {
            let row = &plan[i * b.len()..(i + 1) * b.len()];
            let mass: f64 = row.iter().sum();
            row.iter().zip(&b.points).map(|(p, y)| p * y).sum::<f64>() / mass
        })
        .collect()
}
