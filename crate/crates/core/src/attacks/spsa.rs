use super::pipeline::Pipeline;
use super::threat::ThreatModel;
use super::{run_per_image, AttackResult, ImageOutcome};
use crate::error::{contract, Result};
use crate::numcore::Tensor;
use crate::rng::{self, derive_named, derive_seed, Stream};

/// Cross-entropy of each row of `logits` against its label.
pub fn per_item_cross_entropy(logits: &Tensor, y: &[usize]) -> Result<Vec<f32>> {
    let c = logits.item_len();
    if logits.batch() != y.len() {
        return Err(contract("per-item cross entropy: label count mismatch"));
    }
    Ok((0..y.len())
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            lse - row[y[i]]
        })
        .collect())
}

/// Simultaneous-perturbation gradient estimate of `loss` at the single item
/// `x`: `n_samples / 2` Rademacher directions `d`, each queried at
/// `x + c d` and `x - c d` in one batched call to `loss`.
pub fn spsa_gradient(
    loss: impl Fn(&Tensor) -> Result<Vec<f32>>,
    x: &Tensor,
    n_samples: usize,
    c: f32,
    r: &mut Stream,
) -> Result<Tensor> {
    if n_samples < 2 || n_samples % 2 != 0 {
        return Err(contract(format!("n_samples must be even and >= 2, got {n_samples}")));
    }
    if !(c > 0.0) {
        return Err(contract("perturbation scale must be positive"));
    }
    let pairs = n_samples / 2;
    let n = x.numel();
    let dirs: Vec<Vec<f32>> = (0..pairs).map(|_| rng::signs(r, n)).collect();
    let mut queries = Vec::with_capacity(n_samples);
    for d in &dirs {
        for s in [1.0f32, -1.0] {
            let q: Vec<f32> = x.data().iter().zip(d).map(|(v, dv)| v + s * c * dv).collect();
            queries.push(Tensor::new(x.shape().to_vec(), q)?);
        }
    }
    let batch = Tensor::stack(&queries)?;
    let shape: Vec<usize> = std::iter::once(n_samples).chain(x.shape()[1..].iter().copied()).collect();
    let losses = loss(&batch.reshape(&shape)?)?;
    let mut g = vec![0.0f32; n];
    for (k, d) in dirs.iter().enumerate() {
        let w = (losses[2 * k] - losses[2 * k + 1]) / (2.0 * c * pairs as f32);
        g.iter_mut().zip(d).for_each(|(gi, dv)| *gi += w * dv);
    }
    Tensor::new(x.shape().to_vec(), g)
}

/// Gradient-free PGD: the ascent direction comes from [`spsa_gradient`]
/// on the pipeline's logits. Spends `n_samples` queries per step.
pub fn spsa_attack(
    p: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    tm: &ThreatModel,
    n_samples: usize,
    perturb_scale: f32,
    seed: u64,
) -> Result<AttackResult> {
    if n_samples < 2 || n_samples % 2 != 0 {
        return Err(contract(format!("n_samples must be even and >= 2, got {n_samples}")));
    }
    run_per_image(p, x, y, tm, seed, |xi, yi, si| {
        if tm.epsilon == 0.0 {
            return Ok(ImageOutcome { adv: xi.clone(), queries: 0, aborted: false });
        }
        let mut r = rng::stream(derive_named(si, "spsa"));
        let mut adv = xi.clone();
        let mut queries = 0;
        for k in 0..tm.steps {
            let qs = derive_seed(si, 1000 + k as u64);
            let labels = vec![yi; n_samples];
            let g = spsa_gradient(|b| per_item_cross_entropy(&p.logits(b, qs)?, &labels), &adv, n_samples, perturb_scale, &mut r)?;
            queries += n_samples as u64;
            if !g.is_finite() {
                return Ok(ImageOutcome { adv, queries, aborted: true });
            }
            tm.ascend(adv.data_mut(), g.data(), xi.data());
        }
        Ok(ImageOutcome { adv, queries, aborted: false })
    })
}
