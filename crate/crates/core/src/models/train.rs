use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, ClassifierArch};
use super::params::ParamSet;
use super::score::ScoreModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{contract, Error, Result};
use crate::harness::data::Dataset;
use crate::numcore::{Adam, Tape, Tensor, Var};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Std of Gaussian noise added to classifier inputs during training.
    #[serde(default)]
    pub noise_augment: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 32, lr: 2e-3, seed: 0, noise_augment: 0.0 }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainCurve {
    pub losses: Vec<f32>,
}

impl TrainCurve {
    /// Mean loss over the first / last `k` steps.
    pub fn head_mean(&self, k: usize) -> f32 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[..k].iter().sum::<f32>() / k as f32
    }

    pub fn tail_mean(&self, k: usize) -> f32 {
        let k = k.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - k..].iter().sum::<f32>() / k as f32
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
        Ok(())
    }
}

/// Minibatch Adam loop shared by every trainer. `loss_fn` builds the loss for
/// a batch of item indices on the given tape using the bound parameters.
pub fn fit(
    params: &mut ParamSet,
    n_items: usize,
    cfg: &TrainConfig,
    mut loss_fn: impl FnMut(&mut Tape, &[Var], &[usize], &mut Stream) -> Result<Var>,
) -> Result<TrainCurve> {
    if n_items == 0 {
        return Err(contract("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(contract("batch_size must be positive"));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut order_rng = rng::stream(rng::derive_named(cfg.seed, "order"));
    let mut noise_rng = rng::stream(rng::derive_named(cfg.seed, "noise"));
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut curve = TrainCurve::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let loss = loss_fn(&mut tape, &p, batch, &mut noise_rng)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step: curve.losses.len(), loss: lv });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = p
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            opt.step(params.tensors_mut(), &grads)?;
            curve.losses.push(lv);
        }
    }
    Ok(curve)
}

/// Trains a fresh classifier of `arch` with cross-entropy.
pub fn train_classifier(data: &Dataset, arch: ClassifierArch, cfg: &TrainConfig) -> Result<(Classifier, TrainCurve)> {
    if data.is_empty() {
        return Err(contract("training set is empty"));
    }
    let init = rng::derive_named(cfg.seed, "init");
    let mut model = match arch {
        ClassifierArch::Mlp2d => Classifier::mlp_2d(data.classes, init),
        ClassifierArch::CnnTiny => {
            let s = data.item_shape();
            if s.len() != 3 {
                return Err(contract(format!("cnn-tiny needs image data, got item shape {s:?}")));
            }
            Classifier::cnn_tiny([s[0], s[1], s[2]], data.classes, init)
        }
    };
    let mut params = std::mem::take(&mut model.params);
    let curve = {
        let m = &model;
        fit(&mut params, data.len(), cfg, |tape, p, batch, r| {
            let mut x = data.inputs.gather(batch);
            if cfg.noise_augment > 0.0 {
                let n = rng::normals(r, x.numel());
                for (v, e) in x.data_mut().iter_mut().zip(n) {
                    *v = (*v + cfg.noise_augment * e).clamp(0.0, 1.0);
                }
            }
            let x = tape.constant(x);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let logits = m.forward_with(tape, p, x)?;
            tape.softmax_cross_entropy(logits, &y)
        })?
    };
    model.params = params;
    Ok((model, curve))
}

/// Denoising score matching: minimise `|eps - eps_model(x_t, t)|^2` with
/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` and `t` uniform on
/// `1..=t_max`.
pub fn train_score_model(
    data: &Tensor,
    sched: &DiffusionSchedule,
    width: usize,
    t_max: usize,
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainCurve)> {
    let s = data.shape();
    if s.len() != 4 {
        return Err(contract(format!("score model needs NCHW data, got {s:?}")));
    }
    if t_max == 0 || t_max > sched.horizon {
        return Err(contract(format!("t_max = {t_max} outside 1..={}", sched.horizon)));
    }
    let mut model = ScoreModel::new([s[1], s[2], s[3]], width, sched.horizon, rng::derive_named(cfg.seed, "init"));
    let mut params = std::mem::take(&mut model.params);
    let per = data.item_len();
    let curve = {
        let m = &model;
        fit(&mut params, data.batch(), cfg, |tape, p, batch, r| {
            use rand::Rng;
            let x0 = data.gather(batch);
            let ts: Vec<usize> = batch.iter().map(|_| r.random_range(1..=t_max)).collect();
            let eps = Tensor::randn(x0.shape(), r);
            let mut xt = x0.clone();
            for (i, &t) in ts.iter().enumerate() {
                let (a, b) = (sched.alpha_bar[t].sqrt() as f32, sched.noise_std(t) as f32);
                let xs = &mut xt.data_mut()[i * per..(i + 1) * per];
                let es = &eps.data()[i * per..(i + 1) * per];
                xs.iter_mut().zip(es).for_each(|(x, e)| *x = a * *x + b * e);
            }
            let xv = tape.constant(xt);
            let pred = m.forward_with(tape, p, xv, &ts)?;
            tape.sq_l2_loss(pred, &eps)
        })?
    };
    model.params = params;
    Ok((model, curve))
}
