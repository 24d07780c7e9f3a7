use super::schedule::DiffusionSchedule;
use crate::error::{contract, shape_err, Result};
use crate::models::{Purifier, ScoreModel};
use crate::numcore::{Tape, Tensor, Var};
use crate::rng::{self, derive_named, derive_seed};

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, sched: &DiffusionSchedule, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    let (a, b) = (sched.alpha_bar[t].sqrt() as f32, sched.noise_std(t) as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Noise predictor: a trained network, or the exact answer for data drawn
/// from an isotropic Gaussian `N(mean, var I)`.
#[derive(Clone, Debug)]
pub enum ScoreFn {
    Network(ScoreModel),
    /// `mean` has the per-item shape (leading axis 1).
    Gaussian { mean: Tensor, var: f64 },
}

impl ScoreFn {
    /// Predicted noise at `x` (a batch), recorded on `tape`. The score is
    /// `-eps / sqrt(1 - abar_t)`.
    pub fn eps_on_tape(&self, tape: &mut Tape, sched: &DiffusionSchedule, x: Var, t: usize) -> Result<Var> {
        sched.check_t(t)?;
        match self {
            ScoreFn::Network(m) => {
                let n = tape.shape(x)[0];
                m.forward(tape, x, &vec![t; n])
            }
            ScoreFn::Gaussian { mean, var } => {
                let shape = tape.shape(x).to_vec();
                if mean.item_len() * shape[0] != shape.iter().product::<usize>() {
                    return Err(shape_err("gaussian score", format!("mean {:?} vs input {shape:?}", mean.shape())));
                }
                let ab = sched.alpha_bar[t];
                let k = ((1.0 - ab).sqrt() / (ab * var + 1.0 - ab)) as f32;
                let shift = ab.sqrt() as f32;
                let mut off = Vec::with_capacity(shape.iter().product());
                for _ in 0..shape[0] {
                    off.extend(mean.data().iter().map(|m| -shift * m));
                }
                let centred = tape.add_const(x, Tensor::new(shape, off)?)?;
                tape.scale(centred, k)
            }
        }
    }

    pub fn eps(&self, sched: &DiffusionSchedule, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let e = self.eps_on_tape(&mut tape, sched, xv, t)?;
        Ok(tape.value(e).clone())
    }
}

/// The guidance term `eta (g(x_t) - x_t)` added at every reverse step.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'a> {
    pub purifier: &'a Purifier,
    pub eta: f32,
}

/// One ancestral step from `x_t` to `x_{t-1}`:
/// `(x_t + beta_t s) / sqrt(alpha_t) + sigma_t z` with `s = -eps / sqrt(1 - abar_t)`.
/// `z` is ignored at `t = 1`.
pub fn reverse_step_on_tape(
    tape: &mut Tape,
    sched: &DiffusionSchedule,
    xt: Var,
    t: usize,
    eps: Var,
    z: Option<&Tensor>,
) -> Result<Var> {
    if t == 0 || t > sched.horizon {
        return Err(contract(format!("reverse step from t = {t}")));
    }
    let c = (sched.beta[t] / sched.noise_std(t)) as f32;
    let d = tape.scale(eps, c)?;
    let m = tape.sub(xt, d)?;
    let m = tape.scale(m, (1.0 / sched.alpha(t).sqrt()) as f32)?;
    match z {
        Some(z) if t > 1 => {
            let s = sched.sigma[t] as f32;
            tape.add_const(m, z.scale(s))
        }
        _ => Ok(m),
    }
}

pub fn reverse_step(sched: &DiffusionSchedule, xt: &Tensor, t: usize, eps: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(xt.clone());
    let ev = tape.constant(eps.clone());
    let out = reverse_step_on_tape(&mut tape, sched, xv, t, ev, z)?;
    Ok(tape.value(out).clone())
}

/// Randomness of one chain: the forward-noising draw and the reverse-step
/// draws `z[t]` for `t` in `2..=t_start` (entries 0 and 1 are empty).
#[derive(Clone, Debug, PartialEq)]
pub struct ChainNoise {
    pub t_start: usize,
    pub eps: Tensor,
    pub z: Vec<Tensor>,
}

impl ChainNoise {
    /// Draws for a batch of `shape`; item `i` uses `derive_seed(seed, i)`.
    pub fn draw(shape: &[usize], t_start: usize, seed: u64) -> Result<Self> {
        if shape.is_empty() {
            return Err(contract("chain noise needs a batch shape"));
        }
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let mut eps = Vec::with_capacity(n * per);
        let mut z: Vec<Vec<f32>> = vec![Vec::new(); t_start + 1];
        for i in 0..n {
            let si = derive_seed(seed, i as u64);
            let mut fr = rng::stream(derive_named(si, "forward"));
            eps.extend(rng::normals(&mut fr, per));
            let mut rr = rng::stream(derive_named(si, "reverse"));
            for t in (2..=t_start).rev() {
                z[t].extend(rng::normals(&mut rr, per));
            }
        }
        let z = z
            .into_iter()
            .map(|v| if v.is_empty() { Ok(Tensor::zeros(&[0])) } else { Tensor::new(shape.to_vec(), v) })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChainNoise { t_start, eps: Tensor::new(shape.to_vec(), eps)?, z })
    }

    fn z_at(&self, t: usize) -> Option<&Tensor> {
        if t >= 2 && t <= self.t_start {
            Some(&self.z[t])
        } else {
            None
        }
    }
}

/// Reverse chain from `x_t` at `t_start` down to 0 on `tape`, with optional
/// guidance. No clamping.
pub fn reverse_chain_on_tape(
    tape: &mut Tape,
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    xt: Var,
    noise: &ChainNoise,
) -> Result<Var> {
    let mut x = xt;
    for t in (1..=noise.t_start).rev() {
        x = guided_step(tape, sched, score, guide, x, t, noise.z_at(t))?;
    }
    Ok(x)
}

pub(crate) fn guided_step(
    tape: &mut Tape,
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    x: Var,
    t: usize,
    z: Option<&Tensor>,
) -> Result<Var> {
    let eps = score.eps_on_tape(tape, sched, x, t)?;
    let next = reverse_step_on_tape(tape, sched, x, t, eps, z)?;
    match guide {
        Some(g) if g.eta != 0.0 => {
            let gx = g.purifier.forward(tape, x)?;
            let d = tape.sub(gx, x)?;
            let d = tape.scale(d, g.eta)?;
            tape.add(next, d)
        }
        _ => Ok(next),
    }
}

/// Value-only reverse chain. Each step runs on its own tape, so memory does
/// not grow with the chain length; values match the taped chain bitwise.
pub fn reverse_chain(
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    xt: &Tensor,
    noise: &ChainNoise,
) -> Result<Tensor> {
    let mut x = xt.clone();
    for t in (1..=noise.t_start).rev() {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        let out = guided_step(&mut tape, sched, score, guide, xv, t, noise.z_at(t))?;
        x = tape.value(out).clone();
    }
    Ok(x)
}

/// Forward-noise `x` to `noise.t_start`, run the (guided) reverse chain,
/// clamp to `[0, 1]`.
pub fn purify_with_noise(
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    x: &Tensor,
    noise: &ChainNoise,
) -> Result<Tensor> {
    let xt = forward_diffuse(x, noise.t_start, sched, &noise.eps)?;
    let out = reverse_chain(sched, score, guide, &xt, noise)?;
    Ok(out.clamp(0.0, 1.0))
}

/// Taped version of [`purify_with_noise`], differentiable in `x`.
pub fn purify_on_tape(
    tape: &mut Tape,
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    x: Var,
    noise: &ChainNoise,
) -> Result<Var> {
    let xt = noise_on_tape(tape, sched, x, noise)?;
    let out = reverse_chain_on_tape(tape, sched, score, guide, xt, noise)?;
    tape.clamp(out, 0.0, 1.0)
}

pub(crate) fn noise_on_tape(tape: &mut Tape, sched: &DiffusionSchedule, x: Var, noise: &ChainNoise) -> Result<Var> {
    let t = noise.t_start;
    sched.check_t(t)?;
    let (a, b) = (sched.alpha_bar[t].sqrt() as f32, sched.noise_std(t) as f32);
    let xs = tape.scale(x, a)?;
    tape.add_const(xs, noise.eps.scale(b))
}

/// One-jump surrogate of the purification: the Tweedie estimate of `x_0`
/// from `x_t` plus one guidance term, clamped.
pub fn tweedie_jump_on_tape(
    tape: &mut Tape,
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    guide: Option<Guidance>,
    xt: Var,
    t: usize,
) -> Result<Var> {
    let eps = score.eps_on_tape(tape, sched, xt, t)?;
    let d = tape.scale(eps, sched.noise_std(t) as f32)?;
    let m = tape.sub(xt, d)?;
    let mut x0 = tape.scale(m, (1.0 / sched.alpha_bar[t].sqrt()) as f32)?;
    if let Some(g) = guide.filter(|g| g.eta != 0.0) {
        let gx = g.purifier.forward(tape, xt)?;
        let dd = tape.sub(gx, xt)?;
        let dd = tape.scale(dd, g.eta)?;
        x0 = tape.add(x0, dd)?;
    }
    tape.clamp(x0, 0.0, 1.0)
}
