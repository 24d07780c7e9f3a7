//! Clean and robust accuracy over seeds and random subsets.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::attacks::{AttackSpec, Defense, Defended, Pipeline, Surrogate};
use crate::error::{contract, Result};
use crate::models::Classifier;
use crate::parallel;
use crate::rng::{self, derive_named, derive_seed};

/// Mean and sample standard deviation of a metric, as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

/// Percentages with two decimals, `88.48±2.04`.
impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub images: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub attack_seconds_per_image: f64,
    /// Images on which the attack gave up; they count as robust only when
    /// still classified correctly.
    pub aborted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub defense: String,
    pub runs: Vec<SeedMetrics>,
    pub clean: Summary,
    pub robust: Summary,
}

impl Evaluation {
    /// One row per seed. Timing lives elsewhere so the file is reproducible
    /// byte for byte.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "seed,images,clean_accuracy,robust_accuracy,aborted")?;
        for r in &self.runs {
            writeln!(f, "{},{},{:.6},{:.6},{}", r.seed, r.images, r.clean_accuracy, r.robust_accuracy, r.aborted)?;
        }
        Ok(())
    }
}

/// Indices evaluated under `seed`: everything, or a seeded random subset.
pub fn subset_indices(n: usize, subset: Option<usize>, seed: u64) -> Vec<usize> {
    match subset {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(derive_named(seed, "subset")));
            let mut idx = idx[..k].to_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Clean accuracy of `defense` followed by `classifier` and, if `attack` is
/// given, robust accuracy under it, for every seed. Without an attack the
/// robust accuracy is the clean accuracy.
pub fn evaluate(
    defense: &dyn Defense,
    classifier: &Classifier,
    test: &Dataset,
    attack: Option<&AttackSpec>,
    seeds: &[u64],
    subset: Option<usize>,
) -> Result<Evaluation> {
    if seeds.is_empty() {
        return Err(contract("evaluate needs at least one seed"));
    }
    if test.is_empty() {
        return Err(contract("evaluate on an empty test set"));
    }
    let judge = Defended::new(defense, classifier, Surrogate::Identity);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = test.subset(&subset_indices(test.len(), subset, seed));
        let clean_seed = derive_named(seed, "clean");
        let hits = parallel::map_indexed(data.len(), |i| {
            judge.predict(&data.inputs.select(i), derive_seed(clean_seed, i as u64)).map(|p| p[0] == data.labels[i])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let clean = hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64;
        let (robust, secs, aborted) = match attack {
            None => (clean, 0.0, 0),
            Some(spec) => {
                let t = Instant::now();
                let r = spec.run(defense, classifier, &data.inputs, &data.labels, derive_named(seed, "attack"))?;
                let aborted = r.aborted.iter().filter(|&&a| a).count();
                (1.0 - r.success_rate(), t.elapsed().as_secs_f64() / data.len() as f64, aborted)
            }
        };
        runs.push(SeedMetrics {
            seed,
            images: data.len(),
            clean_accuracy: clean,
            robust_accuracy: robust,
            attack_seconds_per_image: secs,
            aborted,
        });
    }
    let clean = Summary::of(&runs.iter().map(|r| r.clean_accuracy).collect::<Vec<_>>());
    let robust = Summary::of(&runs.iter().map(|r| r.robust_accuracy).collect::<Vec<_>>());
    Ok(Evaluation { defense: defense.name(), runs, clean, robust })
}
