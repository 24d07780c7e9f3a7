use super::process::{self, ChainNoise, Guidance, ScoreFn};
use super::schedule::DiffusionSchedule;
use crate::attacks::{identity_surrogate, CallCounter, Defense, Surrogate};
use crate::error::{contract, Result};
use crate::models::Purifier;
use crate::numcore::{Tape, Tensor, Var};

/// Single-path diffusion purification, optionally steered by a purifier.
#[derive(Clone, Debug)]
pub struct DiffusionDefense {
    pub schedule: DiffusionSchedule,
    pub score: ScoreFn,
    pub t_star: usize,
    pub guide: Option<(Purifier, f32)>,
    grad_paths: CallCounter,
}

impl DiffusionDefense {
    pub fn new(schedule: DiffusionSchedule, score: ScoreFn, t_star: usize) -> Result<Self> {
        schedule.check_t(t_star)?;
        Ok(DiffusionDefense { schedule, score, t_star, guide: None, grad_paths: CallCounter::default() })
    }

    pub fn with_guidance(mut self, purifier: Purifier, eta: f32) -> Result<Self> {
        if !eta.is_finite() {
            return Err(contract("guidance eta must be finite"));
        }
        self.guide = Some((purifier, eta));
        Ok(self)
    }

    pub fn guidance(&self) -> Option<Guidance<'_>> {
        self.guide.as_ref().map(|(p, eta)| Guidance { purifier: p, eta: *eta })
    }

    pub fn noise(&self, shape: &[usize], seed: u64) -> Result<ChainNoise> {
        ChainNoise::draw(shape, self.t_star, seed)
    }

    pub fn reset_counter(&self) {
        self.grad_paths.reset();
    }
}

impl Defense for DiffusionDefense {
    fn name(&self) -> String {
        match &self.guide {
            Some((_, eta)) => format!("oap-guided(t*={}, eta={eta})", self.t_star),
            None => format!("diffpure(t*={})", self.t_star),
        }
    }

    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let noise = self.noise(x.shape(), seed)?;
        process::purify_with_noise(&self.schedule, &self.score, self.guidance(), x, &noise)
    }

    fn purify_on_tape(&self, tape: &mut Tape, x: Var, seed: u64, surrogate: Surrogate) -> Result<Var> {
        self.grad_paths.add(1);
        let noise = self.noise(tape.shape(x), seed)?;
        let (sched, score, guide) = (&self.schedule, &self.score, self.guidance());
        match surrogate {
            Surrogate::Exact => process::purify_on_tape(tape, sched, score, guide, x, &noise),
            Surrogate::Identity => {
                let v = process::purify_with_noise(sched, score, guide, tape.value(x), &noise)?;
                identity_surrogate(tape, x, v)
            }
            Surrogate::Coarse => {
                let v = process::purify_with_noise(sched, score, guide, tape.value(x), &noise)?;
                let xt = process::noise_on_tape(tape, sched, x, &noise)?;
                let jump = process::tweedie_jump_on_tape(tape, sched, score, guide, xt, self.t_star)?;
                tape.straight_through(v, jump)
            }
        }
    }

    fn stochastic(&self) -> bool {
        self.t_star > 0
    }

    fn gradient_path_evals(&self) -> u64 {
        self.grad_paths.get()
    }
}

/// DiffPure: forward-noise to `t_star`, unguided reverse chain, clamp.
pub fn diffpure_purify(x: &Tensor, sched: &DiffusionSchedule, score: &ScoreFn, t_star: usize, seed: u64) -> Result<Tensor> {
    let noise = ChainNoise::draw(x.shape(), t_star, seed)?;
    process::purify_with_noise(sched, score, None, x, &noise)
}

/// Reverse diffusion with the guidance term `eta (g(x_t) - x_t)` at every
/// step. With `eta = 0` the result equals [`diffpure_purify`] bitwise.
pub fn oap_guided_purify(
    x: &Tensor,
    sched: &DiffusionSchedule,
    score: &ScoreFn,
    t_star: usize,
    guide: Guidance,
    seed: u64,
) -> Result<Tensor> {
    let noise = ChainNoise::draw(x.shape(), t_star, seed)?;
    process::purify_with_noise(sched, score, Some(guide), x, &noise)
}
