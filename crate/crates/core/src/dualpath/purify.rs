use serde::{Deserialize, Serialize};

use super::sinkhorn::SinkhornConfig;
use super::transfer::{color_transfer, select_in, TargetIndex};
use crate::attacks::{CallCounter, Defense, Surrogate};
use crate::diffusion::process::{self, ChainNoise, Guidance, ScoreFn};
use crate::diffusion::DiffusionSchedule;
use crate::error::{contract, Result};
use crate::harness::data::Dataset;
use crate::models::{Classifier, Purifier};
use crate::numcore::{Tape, Tensor, Var};
use crate::oap::{gen_reference_point, OapConfig};
use crate::rng::{derive_named, derive_seed};

/// One reference image per class, each moved along its opposite
/// adversarial path. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBank {
    images: Tensor,
    labels: Vec<usize>,
}

impl TargetBank {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() || labels.is_empty() {
            return Err(contract("target bank needs one label per image"));
        }
        Ok(TargetBank { images, labels })
    }

    /// Takes the first image of every class from `data` and applies the OAP
    /// walk with its ground-truth label.
    pub fn build(f: &Classifier, data: &Dataset, cfg: &OapConfig) -> Result<Self> {
        let mut idx = Vec::with_capacity(data.classes);
        for c in 0..data.classes {
            let i = data
                .labels
                .iter()
                .position(|&y| y == c)
                .ok_or_else(|| contract(format!("no image of class {c} for the target bank")))?;
            idx.push(i);
        }
        let x = data.inputs.gather(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let images = gen_reference_point(f, &x, &labels, cfg)?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn slices(&self) -> Vec<&[f32]> {
        (0..self.len()).map(|i| self.images.item_slice(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualPathConfig {
    /// 2 runs both paths; 1 keeps only the guided path (same outer
    /// schedule), the single-path comparator.
    pub paths: usize,
    /// Outer iterations; depth is halved after each.
    pub iterations: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for DualPathConfig {
    fn default() -> Self {
        DualPathConfig { paths: 2, iterations: 2, sinkhorn: SinkhornConfig::default() }
    }
}

/// What one purification did, per outer iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualPathTrace {
    pub selected: Vec<usize>,
    pub divergences: Vec<Vec<f64>>,
    pub t_stars: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DualPathDefense {
    pub schedule: DiffusionSchedule,
    pub score: ScoreFn,
    pub t_star: usize,
    pub guide: Option<(Purifier, f32)>,
    pub bank: TargetBank,
    pub cfg: DualPathConfig,
    index: TargetIndex,
    grad_paths: CallCounter,
}

impl DualPathDefense {
    pub fn new(
        schedule: DiffusionSchedule,
        score: ScoreFn,
        t_star: usize,
        guide: Option<(Purifier, f32)>,
        bank: TargetBank,
        cfg: DualPathConfig,
    ) -> Result<Self> {
        schedule.check_t(t_star)?;
        if !(1..=2).contains(&cfg.paths) {
            return Err(contract(format!("paths must be 1 or 2, got {}", cfg.paths)));
        }
        if cfg.iterations == 0 {
            return Err(contract("need at least one outer iteration"));
        }
        cfg.sinkhorn.validate()?;
        let index = TargetIndex::new(&bank.slices(), &cfg.sinkhorn)?;
        Ok(DualPathDefense { schedule, score, t_star, guide, bank, cfg, index, grad_paths: CallCounter::default() })
    }

    /// Same models and bank with a different path count.
    pub fn with_paths(&self, paths: usize) -> Result<Self> {
        let cfg = DualPathConfig { paths, ..self.cfg.clone() };
        Self::new(self.schedule.clone(), self.score.clone(), self.t_star, self.guide.clone(), self.bank.clone(), cfg)
    }

    /// Depth of every outer iteration: `t*`, `t*/2`, ...
    pub fn t_stars(&self) -> Vec<usize> {
        let mut t = self.t_star;
        (0..self.cfg.iterations)
            .map(|_| {
                let cur = t;
                t /= 2;
                cur
            })
            .collect()
    }

    fn guidance(&self) -> Option<Guidance<'_>> {
        self.guide.as_ref().map(|(p, eta)| Guidance { purifier: p, eta: *eta })
    }

    fn noise(&self, shape: &[usize], seed: u64, iter: usize, path: usize, t: usize) -> Result<ChainNoise> {
        ChainNoise::draw(shape, t, derive_seed(derive_named(seed, "dual-path"), (2 * iter + path) as u64))
    }

    /// Purifies a single image (`[1, C, H, W]`) and reports what happened.
    pub fn purify_traced(&self, x: &Tensor, seed: u64) -> Result<(Tensor, DualPathTrace)> {
        if x.batch() != 1 {
            return Err(contract("purify_traced takes one image"));
        }
        let sk = &self.cfg.sinkhorn;
        let mut trace = DualPathTrace::default();
        let mut cur = x.clone();
        for (k, t) in self.t_stars().into_iter().enumerate() {
            trace.t_stars.push(t);
            let n1 = self.noise(x.shape(), seed, k, 0, t)?;
            let p1 = process::purify_with_noise(&self.schedule, &self.score, self.guidance(), &cur, &n1)?;
            if self.cfg.paths == 1 {
                cur = p1;
                continue;
            }
            let sel = select_in(cur.data(), &self.index, sk)?;
            if !sel.converged {
                trace.warnings.push(format!("iteration {k}: target selection did not converge"));
            }
            let ct = sel.transfer(cur.data(), self.bank.images.item_slice(sel.index), sk);
            if !ct.converged {
                trace.warnings.push(format!("iteration {k}: color transfer did not converge"));
            }
            trace.selected.push(sel.index);
            trace.divergences.push(sel.divergences);
            let x2 = Tensor::new(x.shape().to_vec(), ct.values)?;
            let n2 = self.noise(x.shape(), seed, k, 1, t)?;
            let p2 = process::purify_with_noise(&self.schedule, &self.score, None, &x2, &n2)?;
            let back = color_transfer(p2.data(), p1.data(), sk)?;
            if !back.converged {
                trace.warnings.push(format!("iteration {k}: color restoration did not converge"));
            }
            cur = Tensor::new(x.shape().to_vec(), back.values)?;
        }
        Ok((cur, trace))
    }

    fn path_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        noise: &ChainNoise,
        guide: Option<Guidance>,
        surrogate: Surrogate,
    ) -> Result<Var> {
        let (sched, score) = (&self.schedule, &self.score);
        match surrogate {
            Surrogate::Exact => process::purify_on_tape(tape, sched, score, guide, x, noise),
            Surrogate::Identity => {
                let v = process::purify_with_noise(sched, score, guide, tape.value(x), noise)?;
                tape.straight_through(v, x)
            }
            Surrogate::Coarse => {
                let v = process::purify_with_noise(sched, score, guide, tape.value(x), noise)?;
                let xt = process::noise_on_tape(tape, sched, x, noise)?;
                let jump = process::tweedie_jump_on_tape(tape, sched, score, guide, xt, noise.t_start)?;
                tape.straight_through(v, jump)
            }
        }
    }
}

impl Defense for DualPathDefense {
    fn name(&self) -> String {
        format!("dual-path(paths={}, t*={})", self.cfg.paths, self.t_star)
    }

    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let items = (0..x.batch())
            .map(|i| Ok(self.purify_traced(&x.select(i), derive_seed(seed, i as u64))?.0))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// Diffusion paths use `surrogate`; the transport steps are passed
    /// straight through (color restoration to the mean of both paths).
    fn purify_on_tape(&self, tape: &mut Tape, x: Var, seed: u64, surrogate: Surrogate) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape[0] != 1 {
            return Err(contract("dual-path gradients are taken one image at a time"));
        }
        let seed = derive_seed(seed, 0);
        let sk = &self.cfg.sinkhorn;
        let mut cur = x;
        for (k, t) in self.t_stars().into_iter().enumerate() {
            self.grad_paths.add(self.cfg.paths as u64);
            let n1 = self.noise(&shape, seed, k, 0, t)?;
            let p1 = self.path_on_tape(tape, cur, &n1, self.guidance(), surrogate)?;
            if self.cfg.paths == 1 {
                cur = p1;
                continue;
            }
            let cv = tape.value(cur).clone();
            let sel = select_in(cv.data(), &self.index, sk)?;
            let ct = sel.transfer(cv.data(), self.bank.images.item_slice(sel.index), sk);
            let x2 = tape.straight_through(Tensor::new(shape.clone(), ct.values)?, cur)?;
            let n2 = self.noise(&shape, seed, k, 1, t)?;
            let p2 = self.path_on_tape(tape, x2, &n2, None, surrogate)?;
            let back = color_transfer(tape.value(p2).data(), tape.value(p1).data(), sk)?;
            let sum = tape.add(p1, p2)?;
            let mean = tape.scale(sum, 0.5)?;
            cur = tape.straight_through(Tensor::new(shape.clone(), back.values)?, mean)?;
        }
        Ok(cur)
    }

    fn stochastic(&self) -> bool {
        self.t_star > 0
    }

    fn gradient_path_evals(&self) -> u64 {
        self.grad_paths.get()
    }
}

/// Diagnostic: a guided chain on `x_adv` pulled at every step toward a
/// second chain started from the clean image, `x1 += pull (x2 - x1)`. Not
/// part of the defense.
pub fn ideal_oracle_purify(d: &DualPathDefense, x_adv: &Tensor, x_clean: &Tensor, pull: f32, seed: u64) -> Result<Tensor> {
    if x_adv.shape() != x_clean.shape() {
        return Err(contract("ideal oracle: adversarial and clean shapes differ"));
    }
    let t0 = d.t_star;
    let n1 = ChainNoise::draw(x_adv.shape(), t0, derive_named(seed, "oracle-1"))?;
    let n2 = ChainNoise::draw(x_adv.shape(), t0, derive_named(seed, "oracle-2"))?;
    let mut a = process::forward_diffuse(x_adv, t0, &d.schedule, &n1.eps)?;
    let mut b = process::forward_diffuse(x_clean, t0, &d.schedule, &n2.eps)?;
    for t in (1..=t0).rev() {
        let step = |x: &Tensor, n: &ChainNoise, g: Option<Guidance>| -> Result<Tensor> {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let z = if t >= 2 { Some(&n.z[t]) } else { None };
            let out = process::guided_step(&mut tape, &d.schedule, &d.score, g, xv, t, z)?;
            Ok(tape.value(out).clone())
        };
        let na = step(&a, &n1, d.guidance())?;
        let nb = step(&b, &n2, None)?;
        a = na.zip_map(&nb, |u, v| u + pull * (v - u))?;
        b = nb;
    }
    Ok(a.clamp(0.0, 1.0))
}
