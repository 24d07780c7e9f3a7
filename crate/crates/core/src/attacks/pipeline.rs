//! What an attack sees: a classifier, possibly behind a purifier, exposing
//! logits and a (possibly surrogate) input gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::Classifier;
use crate::numcore::{Tape, Tensor, Var};

/// A forward function under attack. `seed` drives any internal randomness;
/// deterministic pipelines ignore it.
pub trait Pipeline: Sync {
    fn logits(&self, x: &Tensor, seed: u64) -> Result<Tensor>;

    /// Mean cross-entropy at `x` and its gradient under this pipeline's
    /// backward rule.
    fn loss_grad(&self, x: &Tensor, y: &[usize], seed: u64) -> Result<(f32, Tensor)>;

    fn stochastic(&self) -> bool {
        false
    }

    fn predict(&self, x: &Tensor, seed: u64) -> Result<Vec<usize>> {
        Ok(self.logits(x, seed)?.argmax_rows())
    }
}

impl Pipeline for Classifier {
    fn logits(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        Classifier::logits(self, x)
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize], _seed: u64) -> Result<(f32, Tensor)> {
        Classifier::loss_grad(self, x, y)
    }
}

/// Backward rule used when differentiating through a purifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    /// Treat the purifier as the identity map on the backward pass.
    Identity,
    /// Exact backpropagation through every stage (every reverse step).
    Exact,
    /// Backward through a one-jump approximation of the reverse chain,
    /// evaluated at the true forward trajectory.
    Coarse,
}

/// Thread-safe event counter.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        CallCounter(AtomicU64::new(self.get()))
    }
}

/// An input purifier placed in front of the classifier.
pub trait Defense: Sync {
    fn name(&self) -> String;

    /// Purifies a batch; item `i` draws its randomness from
    /// `derive_seed(seed, i)`.
    fn purify(&self, x: &Tensor, seed: u64) -> Result<Tensor>;

    /// Differentiable purification whose forward value equals
    /// [`purify`](Defense::purify) for the same seed.
    fn purify_on_tape(&self, tape: &mut Tape, x: Var, seed: u64, surrogate: Surrogate) -> Result<Var>;

    fn stochastic(&self) -> bool;

    /// Purification paths evaluated inside gradient computations so far.
    fn gradient_path_evals(&self) -> u64 {
        0
    }
}

/// The identity-surrogate backward rule: forward value `purified`, gradient
/// passed straight to `x`.
pub fn identity_surrogate(tape: &mut Tape, x: Var, purified: Tensor) -> Result<Var> {
    tape.straight_through(purified, x)
}

/// No purification at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> String {
        "none".into()
    }

    fn purify(&self, x: &Tensor, _seed: u64) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn purify_on_tape(&self, _tape: &mut Tape, x: Var, _seed: u64, _s: Surrogate) -> Result<Var> {
        Ok(x)
    }

    fn stochastic(&self) -> bool {
        false
    }
}

/// Purifier followed by classifier, differentiated with a chosen rule.
pub struct Defended<'a> {
    pub defense: &'a dyn Defense,
    pub classifier: &'a Classifier,
    pub surrogate: Surrogate,
}

impl<'a> Defended<'a> {
    pub fn new(defense: &'a dyn Defense, classifier: &'a Classifier, surrogate: Surrogate) -> Self {
        Defended { defense, classifier, surrogate }
    }
}

impl Pipeline for Defended<'_> {
    fn logits(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let p = self.defense.purify(x, seed)?;
        self.classifier.logits(&p)
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize], seed: u64) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let p = self.defense.purify_on_tape(&mut tape, xv, seed, self.surrogate)?;
        let logits = self.classifier.forward(&mut tape, p)?;
        let loss = tape.softmax_cross_entropy(logits, y)?;
        tape.backward(loss)?;
        let g = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((tape.value(loss).item(), g))
    }

    fn stochastic(&self) -> bool {
        self.defense.stochastic()
    }
}
