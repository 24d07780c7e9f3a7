//! White-box (PGD, PGD+EOT, BPDA+EOT) and black-box (SPSA) attacks.

mod pipeline;
mod pgd;
mod spsa;
mod threat;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pgd::{bpda_eot_attack, eot_gradient, pgd_attack, pgd_eot_attack, pgd_with};
pub use pipeline::{identity_surrogate, CallCounter, Defended, Defense, NoDefense, Pipeline, Surrogate};
pub use spsa::{per_item_cross_entropy, spsa_attack, spsa_gradient};
pub use threat::{l2_dist, linf_dist, sign, Norm, ThreatModel};

use crate::error::{contract, Error, Result};
use crate::models::Classifier;
use crate::numcore::Tensor;
use crate::rng::derive_seed;

/// Per-image outcome of an attack on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub adv: Tensor,
    /// Attacked pipeline misclassifies the adversarial image.
    pub success: Vec<bool>,
    pub seconds: Vec<f64>,
    /// Forward queries spent (black-box attacks; zero otherwise).
    pub queries: Vec<u64>,
    /// The image's attack stopped early on a non-finite gradient.
    pub aborted: Vec<bool>,
    pub linf: Vec<f32>,
    pub l2: Vec<f32>,
}

impl AttackResult {
    pub fn len(&self) -> usize {
        self.success.len()
    }

    pub fn is_empty(&self) -> bool {
        self.success.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.len() as f64
    }

    pub fn mean_seconds(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.seconds.iter().sum::<f64>() / self.len() as f64
    }

    /// Columns: image_id, success, linf_dist, l2_dist, seconds, queries.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "image_id,success,linf_dist,l2_dist,seconds,queries")?;
        for i in 0..self.len() {
            writeln!(
                f,
                "{i},{},{},{},{:.6},{}",
                self.success[i] as u8, self.linf[i], self.l2[i], self.seconds[i], self.queries[i]
            )?;
        }
        Ok(())
    }
}

pub(crate) struct ImageOutcome {
    pub adv: Tensor,
    pub queries: u64,
    pub aborted: bool,
}

/// Runs `attack` independently on every image (in parallel when allowed),
/// giving image `i` the seed `derive_seed(seed, i)`, and judges success with
/// `judge` under the same seed.
pub(crate) fn run_per_image(
    judge: &dyn Pipeline,
    x: &Tensor,
    y: &[usize],
    tm: &ThreatModel,
    seed: u64,
    attack: impl Fn(&Tensor, usize, u64) -> Result<ImageOutcome> + Sync + Send,
) -> Result<AttackResult> {
    tm.validate()?;
    if x.batch() != y.len() {
        return Err(contract("attack: image and label counts differ"));
    }
    let outs = crate::parallel::map_indexed(x.batch(), |i| -> Result<(ImageOutcome, f64, bool)> {
        let xi = x.select(i);
        let si = derive_seed(seed, i as u64);
        let start = std::time::Instant::now();
        let out = attack(&xi, y[i], si)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let pred = judge.predict(&out.adv, si)?[0];
        Ok((out, secs, pred != y[i]))
    });
    let mut advs = Vec::with_capacity(y.len());
    let mut res = AttackResult {
        adv: Tensor::zeros(&[0]),
        success: vec![],
        seconds: vec![],
        queries: vec![],
        aborted: vec![],
        linf: vec![],
        l2: vec![],
    };
    for (i, o) in outs.into_iter().enumerate() {
        let (o, secs, ok) = o?;
        res.linf.push(linf_dist(o.adv.data(), x.item_slice(i)));
        res.l2.push(l2_dist(o.adv.data(), x.item_slice(i)));
        res.success.push(ok);
        res.seconds.push(secs);
        res.queries.push(o.queries);
        res.aborted.push(o.aborted);
        advs.push(o.adv);
    }
    res.adv = if advs.is_empty() { Tensor::zeros(x.shape()) } else { Tensor::stack(&advs)?.reshape(x.shape())? };
    Ok(res)
}

pub(crate) fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    /// Non-adaptive: gradients of the bare classifier.
    Pgd,
    PgdEot,
    BpdaEot,
    Spsa,
}

impl AttackMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackMethod::Pgd),
            "pgd-eot" => Ok(AttackMethod::PgdEot),
            "bpda-eot" => Ok(AttackMethod::BpdaEot),
            "spsa" => Ok(AttackMethod::Spsa),
            other => Err(Error::Config(format!("unknown attack method {other:?}"))),
        }
    }
}

/// Everything needed to rerun an attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub threat: ThreatModel,
    #[serde(default = "one")]
    pub eot: usize,
    #[serde(default = "identity")]
    pub surrogate: Surrogate,
    #[serde(default = "spsa_samples")]
    pub spsa_samples: usize,
    #[serde(default = "spsa_scale")]
    pub spsa_scale: f32,
}

fn one() -> usize {
    1
}
fn identity() -> Surrogate {
    Surrogate::Identity
}
fn spsa_samples() -> usize {
    32
}
fn spsa_scale() -> f32 {
    0.01
}

impl AttackSpec {
    pub fn new(method: AttackMethod, threat: ThreatModel) -> Self {
        AttackSpec { method, threat, eot: 1, surrogate: Surrogate::Identity, spsa_samples: 32, spsa_scale: 0.01 }
    }

    pub fn with_eot(mut self, eot: usize) -> Self {
        self.eot = eot;
        self
    }

    pub fn with_surrogate(mut self, s: Surrogate) -> Self {
        self.surrogate = s;
        self
    }

    /// Attacks `classifier` behind `defense`. Success is judged through the
    /// defended pipeline in every case.
    pub fn run(&self, defense: &dyn Defense, classifier: &Classifier, x: &Tensor, y: &[usize], seed: u64) -> Result<AttackResult> {
        let judge = Defended::new(defense, classifier, Surrogate::Exact);
        match self.method {
            AttackMethod::Pgd => pgd_with(classifier, &judge, x, y, &self.threat, 1, seed),
            AttackMethod::PgdEot => pgd_eot_attack(&judge, x, y, &self.threat, self.eot, seed),
            AttackMethod::BpdaEot => {
                let p = Defended::new(defense, classifier, self.surrogate);
                bpda_eot_attack(&p, x, y, &self.threat, self.eot, seed)
            }
            AttackMethod::Spsa => spsa_attack(&judge, x, y, &self.threat, self.spsa_samples, self.spsa_scale, seed),
        }
    }
}
