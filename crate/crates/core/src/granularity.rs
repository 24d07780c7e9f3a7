//! Gradients of a diffusion defense at two granularities: one aggregate
//! call through a single denoising jump, or every reverse step (with
//! activation checkpointing).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_with, Defended, Defense, Pipeline, Surrogate, ThreatModel};
use crate::diffusion::process::{self, ChainNoise};
use crate::diffusion::DiffusionDefense;
use crate::error::{contract, Error, Result};
use crate::harness::data::Dataset;
use crate::models::Classifier;
use crate::numcore::{Tape, Tensor};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One call: backward through a single denoising jump.
    Coarse,
    /// Backward through every reverse step.
    Fine,
}

impl Granularity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse" | "single-call" => Ok(Granularity::Coarse),
            "fine" | "per-step" => Ok(Granularity::Fine),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }
}

/// Every intermediate state of one purification: `states[0]` is `x_{t*}`,
/// `states[t*]` is `x_0` before clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct TapTrace {
    pub states: Vec<Tensor>,
}

/// Runs the defense's chain on `x` recording every state.
pub fn reverse_with_taps(d: &DiffusionDefense, x: &Tensor, seed: u64) -> Result<TapTrace> {
    let noise = d.noise(x.shape(), seed)?;
    let mut cur = process::forward_diffuse(x, d.t_star, &d.schedule, &noise.eps)?;
    let mut states = vec![cur.clone()];
    for t in (1..=d.t_star).rev() {
        cur = chain_segment(d, &cur, &noise, t, t - 1)?;
        states.push(cur.clone());
    }
    Ok(TapTrace { states })
}

fn z_at(noise: &ChainNoise, t: usize) -> Option<&Tensor> {
    (t >= 2 && t <= noise.t_start).then(|| &noise.z[t])
}

/// Value of the chain from time `from` down to `to`.
fn chain_segment(d: &DiffusionDefense, x: &Tensor, noise: &ChainNoise, from: usize, to: usize) -> Result<Tensor> {
    let mut cur = x.clone();
    for t in (to + 1..=from).rev() {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(cur);
        let out = process::guided_step(&mut tape, &d.schedule, &d.score, d.guidance(), xv, t, z_at(noise, t))?;
        cur = tape.value(out).clone();
    }
    Ok(cur)
}

/// Loss and gradient through the one-jump surrogate.
pub fn grad_single_call(d: &DiffusionDefense, f: &Classifier, x: &Tensor, y: &[usize], seed: u64) -> Result<(f32, Tensor)> {
    Defended::new(d, f, Surrogate::Coarse).loss_grad(x, y, seed)
}

/// Exact loss gradient through every reverse step, storing only every
/// `segment`-th state and recomputing the rest during the backward sweep.
pub fn grad_per_step(
    d: &DiffusionDefense,
    f: &Classifier,
    x: &Tensor,
    y: &[usize],
    seed: u64,
    segment: usize,
) -> Result<(f32, Tensor)> {
    if segment == 0 {
        return Err(contract("checkpoint segment must be >= 1"));
    }
    let noise = d.noise(x.shape(), seed)?;
    let ts = d.t_star;
    // Checkpointed forward sweep.
    let mut marks = vec![(ts, process::forward_diffuse(x, ts, &d.schedule, &noise.eps)?)];
    while marks.last().unwrap().0 > 0 {
        let (t, v) = marks.last().unwrap();
        let to = t.saturating_sub(segment);
        let next = chain_segment(d, v, &noise, *t, to)?;
        marks.push((to, next));
    }
    let x0 = &marks.last().unwrap().1;

    let mut tape = Tape::new();
    let xv = tape.param(x0.clone());
    let c = tape.clamp(xv, 0.0, 1.0)?;
    let logits = f.forward(&mut tape, c)?;
    let loss = tape.softmax_cross_entropy(logits, y)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).item();
    let mut cot = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    for w in marks.windows(2).rev() {
        let ((from, start), (to, _)) = (&w[0], &w[1]);
        let mut tape = Tape::new();
        let sv = tape.param(start.clone());
        let mut cur = sv;
        for t in (to + 1..=*from).rev() {
            cur = process::guided_step(&mut tape, &d.schedule, &d.score, d.guidance(), cur, t, z_at(&noise, t))?;
        }
        tape.backward_from(cur, cot)?;
        cot = tape.grad(sv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    }
    let a = d.schedule.alpha_bar[ts].sqrt() as f32;
    Ok((loss_value, cot.scale(a)))
}

/// A diffusion defense in front of a classifier, differentiated at a fixed
/// granularity.
pub struct GranularPipeline<'a> {
    pub defense: &'a DiffusionDefense,
    pub classifier: &'a Classifier,
    pub mode: Granularity,
    /// Checkpoint spacing for the fine mode.
    pub segment: usize,
}

impl Pipeline for GranularPipeline<'_> {
    fn logits(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        self.classifier.logits(&self.defense.purify(x, seed)?)
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize], seed: u64) -> Result<(f32, Tensor)> {
        match self.mode {
            Granularity::Coarse => grad_single_call(self.defense, self.classifier, x, y, seed),
            Granularity::Fine => grad_per_step(self.defense, self.classifier, x, y, seed, self.segment),
        }
    }

    fn stochastic(&self) -> bool {
        self.defense.stochastic()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityRow {
    pub mode: Granularity,
    pub eot: usize,
    pub seed: u64,
    pub robust_accuracy: f64,
    pub seconds_per_image: f64,
}

/// Robust accuracy of `testset` under PGD+EOT with each gradient mode and
/// EOT count, one row per (seed, mode, eot). Attacks of the same seed share
/// all randomness.
pub fn granularity_experiment(
    d: &DiffusionDefense,
    f: &Classifier,
    testset: &Dataset,
    tm: &ThreatModel,
    modes: &[Granularity],
    eots: &[usize],
    seeds: &[u64],
) -> Result<Vec<GranularityRow>> {
    let mut rows = Vec::new();
    let judge = Defended::new(d, f, Surrogate::Exact);
    for &seed in seeds {
        for &mode in modes {
            for &eot in eots {
                let p = GranularPipeline { defense: d, classifier: f, mode, segment: 8 };
                let r = pgd_with(&p, &judge, &testset.inputs, &testset.labels, tm, eot, derive_seed(seed, 17))?;
                rows.push(GranularityRow {
                    mode,
                    eot,
                    seed,
                    robust_accuracy: 1.0 - r.success_rate(),
                    seconds_per_image: r.mean_seconds(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_granularity_csv(rows: &[GranularityRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "mode,eot,seed,robust_accuracy,seconds_per_image")?;
    for r in rows {
        writeln!(f, "{},{},{},{:.6},{:.6}", r.mode.tag(), r.eot, r.seed, r.robust_accuracy, r.seconds_per_image)?;
    }
    Ok(())
}
