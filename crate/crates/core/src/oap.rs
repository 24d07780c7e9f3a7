//! Reference points along the opposite adversarial path and the purifiers
//! trained to reach them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{identity_surrogate, pgd_attack, Defense, Surrogate, ThreatModel};
use crate::diffusion::DiffusionSchedule;
use crate::error::{contract, Error, Result};
use crate::harness::data::Dataset;
use crate::models::{fit, Classifier, Purifier, TrainConfig, TrainCurve};
use crate::numcore::{Tape, Tensor, TensorFile, Var};
use crate::rng::{self, derive_named, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OapConfig {
    /// Number of opposite steps.
    pub k: usize,
    pub alpha: f32,
    /// Projection set applied around the previous point after every step.
    pub threat: ThreatModel,
    /// PGD iterations used to form the adversarial half of each pair.
    pub inner_attack_steps: usize,
}

impl OapConfig {
    /// K = 1, step and projection radius `epsilon`, 7-step PGD pairs.
    pub fn new(epsilon: f32) -> Self {
        OapConfig { k: 1, alpha: epsilon, threat: ThreatModel::linf(epsilon, 7), inner_attack_steps: 7 }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(contract(format!("OAP alpha must be > 0, got {}", self.alpha)));
        }
        if self.inner_attack_steps == 0 {
            return Err(contract("inner_attack_steps must be >= 1"));
        }
        self.threat.validate()
    }
}

/// Walks `k` steps down the classifier's loss for the ground-truth labels:
/// `x^k = clip(Proj_{x^{k-1} + S}(x^{k-1} - alpha sign(grad L(x^{k-1}, y))))`.
pub fn gen_reference_point(f: &Classifier, x: &Tensor, y: &[usize], cfg: &OapConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = x.clone();
    let per = x.item_len();
    for step in 0..cfg.k {
        let (_, g) = f.loss_grad(&cur, y)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("classifier gradient at OAP step {step}")));
        }
        let prev = cur.clone();
        for (c, gv) in cur.data_mut().iter_mut().zip(g.data()) {
            *c -= cfg.alpha * crate::attacks::sign(*gv);
        }
        for i in 0..x.batch() {
            cfg.threat.project(&mut cur.data_mut()[i * per..(i + 1) * per], &prev.data()[i * per..(i + 1) * per]);
        }
    }
    Ok(cur)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OapMeta {
    /// SHA-256 of the classifier checkpoint bytes.
    pub classifier_id: String,
    pub seed: u64,
    pub k: usize,
    pub alpha: f32,
    pub attack_epsilon: f32,
    pub attack_steps: usize,
    pub labels: Vec<usize>,
}

/// Training pairs `(x_adv, x^K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OapDataset {
    pub x_adv: Tensor,
    pub targets: Tensor,
    pub meta: OapMeta,
}

impl OapDataset {
    pub fn len(&self) -> usize {
        self.x_adv.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        Ok(TensorFile::new(serde_json::to_value(&self.meta)?)
            .with("x_adv", self.x_adv.clone())
            .with("target", self.targets.clone()))
    }

    pub fn from_file(f: &TensorFile) -> Result<Self> {
        let meta: OapMeta = serde_json::from_value(f.meta.clone())?;
        let ds = OapDataset { x_adv: f.get("x_adv")?.clone(), targets: f.get("target")?.clone(), meta };
        if ds.x_adv.shape() != ds.targets.shape() {
            return Err(Error::Format("OAP pairs have mismatched shapes".into()));
        }
        Ok(ds)
    }
}

pub fn classifier_id(f: &Classifier) -> Result<String> {
    let bytes = f.to_checkpoint().to_bytes()?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// One pair per input: `x_adv` from PGD with `attack` (its step count is
/// replaced by `cfg.inner_attack_steps`), `x^K` from the clean input.
pub fn build_oap_dataset(f: &Classifier, data: &Dataset, cfg: &OapConfig, attack: &ThreatModel, seed: u64) -> Result<OapDataset> {
    if data.is_empty() {
        return Err(contract("OAP dataset from an empty dataset"));
    }
    cfg.validate()?;
    let mut tm = attack.clone();
    tm.steps = cfg.inner_attack_steps;
    tm.alpha = 2.5 * tm.epsilon.max(1e-6) / tm.steps as f32;
    let adv = pgd_attack(f, &data.inputs, &data.labels, &tm, derive_named(seed, "oap-pgd"))?;
    let targets = gen_reference_point(f, &data.inputs, &data.labels, cfg)?;
    Ok(OapDataset {
        x_adv: adv.adv,
        targets,
        meta: OapMeta {
            classifier_id: classifier_id(f)?,
            seed,
            k: cfg.k,
            alpha: cfg.alpha,
            attack_epsilon: tm.epsilon,
            attack_steps: tm.steps,
            labels: data.labels.clone(),
        },
    })
}

fn image_shape(ds: &OapDataset) -> Result<[usize; 3]> {
    let s = ds.x_adv.shape();
    if s.len() != 4 {
        return Err(contract(format!("purifier training needs NCHW pairs, got {s:?}")));
    }
    Ok([s[1], s[2], s[3]])
}

/// Minimises the mean absolute error `|g(x_adv) - x^K|`.
pub fn train_baseline_purifier(ds: &OapDataset, width: usize, cfg: &TrainConfig) -> Result<(Purifier, TrainCurve)> {
    if ds.is_empty() {
        return Err(contract("empty OAP dataset"));
    }
    let mut model = Purifier::new(image_shape(ds)?, width, derive_named(cfg.seed, "init"));
    let mut params = std::mem::take(&mut model.params);
    let curve = {
        let m = &model;
        fit(&mut params, ds.len(), cfg, |tape, p, batch, _| {
            let x = tape.constant(ds.x_adv.gather(batch));
            let out = m.forward_with(tape, p, x)?;
            tape.l1_loss(out, &ds.targets.gather(batch))
        })?
    };
    model.params = params;
    Ok((model, curve))
}

/// Diffusion times for noise-conditioned training, uniform on `0..=t_star`.
pub fn sample_noise_levels(n: usize, t_star: usize, r: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..=t_star)).collect()
}

/// As [`train_baseline_purifier`], but each input is first diffused to a
/// random time `t` in `0..=t_star`.
pub fn train_noise_conditioned_purifier(
    ds: &OapDataset,
    sched: &DiffusionSchedule,
    t_star: usize,
    width: usize,
    cfg: &TrainConfig,
) -> Result<(Purifier, TrainCurve)> {
    if ds.is_empty() {
        return Err(contract("empty OAP dataset"));
    }
    sched.check_t(t_star)?;
    let mut model = Purifier::new(image_shape(ds)?, width, derive_named(cfg.seed, "init"));
    model.noise_conditioned = true;
    let mut params = std::mem::take(&mut model.params);
    let per = ds.x_adv.item_len();
    let curve = {
        let m = &model;
        fit(&mut params, ds.len(), cfg, |tape, p, batch, r| {
            let ts = sample_noise_levels(batch.len(), t_star, r);
            let mut x = ds.x_adv.gather(batch);
            let eps = rng::normals(r, x.numel());
            for (i, &t) in ts.iter().enumerate() {
                let (a, b) = (sched.alpha_bar[t].sqrt() as f32, sched.noise_std(t) as f32);
                let xs = &mut x.data_mut()[i * per..(i + 1) * per];
                xs.iter_mut().zip(&eps[i * per..(i + 1) * per]).for_each(|(v, e)| *v = a * *v + b * e);
            }
            let xv = tape.constant(x);
            let out = m.forward_with(tape, p, xv)?;
            tape.l1_loss(out, &ds.targets.gather(batch))
        })?
    };
    model.params = params;
    Ok((model, curve))
}

/// A trained purifier used on its own as a (deterministic) defense.
impl Defense for Purifier {
    fn name(&self) -> String {
        "purifier".into()
    }

    fn purify(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        self.apply(x)
    }

    fn purify_on_tape(&self, tape: &mut Tape, x: Var, _seed: u64, surrogate: Surrogate) -> Result<Var> {
        match surrogate {
            Surrogate::Identity => {
                let v = self.apply(tape.value(x))?;
                identity_surrogate(tape, x, v)
            }
            Surrogate::Exact | Surrogate::Coarse => self.forward(tape, x),
        }
    }

    fn stochastic(&self) -> bool {
        false
    }
}
