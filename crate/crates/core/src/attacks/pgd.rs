use rand::Rng;

use super::pipeline::Pipeline;
use super::threat::{Norm, ThreatModel};
use super::{is_non_finite, run_per_image, AttackResult, ImageOutcome};
use crate::error::{contract, Result};
use crate::numcore::Tensor;
use crate::rng::{self, derive_named, derive_seed};

/// Mean of `n_eot` loss gradients, sample `j` seeded with
/// `derive_seed(seed, j)`. Deterministic pipelines are queried once.
pub fn eot_gradient(p: &dyn Pipeline, x: &Tensor, y: &[usize], n_eot: usize, seed: u64) -> Result<Tensor> {
    if n_eot == 0 {
        return Err(contract("n_eot must be >= 1"));
    }
    if !p.stochastic() || n_eot == 1 {
        return Ok(p.loss_grad(x, y, derive_seed(seed, 0))?.1);
    }
    let mut acc = Tensor::zeros(x.shape());
    for j in 0..n_eot {
        let (_, g) = p.loss_grad(x, y, derive_seed(seed, j as u64))?;
        acc.add_assign_scaled(&g, 1.0)?;
    }
    Ok(acc.scale(1.0 / n_eot as f32))
}

fn random_start(tm: &ThreatModel, x: &Tensor, seed: u64) -> Tensor {
    let mut r = rng::stream(derive_named(seed, "start"));
    let mut adv = x.clone();
    match tm.norm {
        Norm::Linf => {
            for v in adv.data_mut() {
                *v += r.random_range(-tm.epsilon..=tm.epsilon);
            }
        }
        Norm::L2 => {
            let d = rng::normals(&mut r, x.numel());
            let n = d.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let rad = tm.epsilon * r.random::<f32>();
            for (v, dv) in adv.data_mut().iter_mut().zip(d) {
                *v += rad * dv / n;
            }
        }
    }
    tm.project(adv.data_mut(), x.data());
    adv
}

/// Iterative projected ascent on one image.
pub(crate) fn iterate(attacked: &dyn Pipeline, x: &Tensor, y: usize, tm: &ThreatModel, n_eot: usize, seed: u64) -> Result<ImageOutcome> {
    if tm.epsilon == 0.0 {
        return Ok(ImageOutcome { adv: x.clone(), queries: 0, aborted: false });
    }
    let mut adv = if tm.random_start { random_start(tm, x, seed) } else { x.clone() };
    for k in 0..tm.steps {
        let g = match eot_gradient(attacked, &adv, &[y], n_eot, derive_seed(seed, 1000 + k as u64)) {
            Ok(g) if g.is_finite() => g,
            Ok(_) => return Ok(ImageOutcome { adv, queries: 0, aborted: true }),
            Err(e) if is_non_finite(&e) => return Ok(ImageOutcome { adv, queries: 0, aborted: true }),
            Err(e) => return Err(e),
        };
        tm.ascend(adv.data_mut(), g.data(), x.data());
    }
    Ok(ImageOutcome { adv, queries: 0, aborted: false })
}

/// PGD with gradients from `attacked`, success judged by `judge`.
pub fn pgd_with(
    attacked: &dyn Pipeline,
    judge: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    tm: &ThreatModel,
    n_eot: usize,
    seed: u64,
) -> Result<AttackResult> {
    if n_eot == 0 {
        return Err(contract("n_eot must be >= 1"));
    }
    run_per_image(judge, x, y, tm, seed, |xi, yi, si| iterate(attacked, xi, yi, tm, n_eot, si))
}

/// Projected gradient ascent on the cross-entropy of `p`.
pub fn pgd_attack(p: &dyn Pipeline, x: &Tensor, y: &[usize], tm: &ThreatModel, seed: u64) -> Result<AttackResult> {
    pgd_with(p, p, x, y, tm, 1, seed)
}

/// PGD with EOT-averaged gradients through a pipeline whose backward rule
/// is the surrogate of choice (identity by convention).
pub fn bpda_eot_attack(p: &dyn Pipeline, x: &Tensor, y: &[usize], tm: &ThreatModel, n_eot: usize, seed: u64) -> Result<AttackResult> {
    pgd_with(p, p, x, y, tm, n_eot, seed)
}

/// PGD with EOT-averaged gradients taken exactly through the pipeline.
pub fn pgd_eot_attack(p: &dyn Pipeline, x: &Tensor, y: &[usize], tm: &ThreatModel, n_eot: usize, seed: u64) -> Result<AttackResult> {
    pgd_with(p, p, x, y, tm, n_eot, seed)
}
