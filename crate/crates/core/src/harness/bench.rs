//! Wall-clock cost of purification and of adaptive attacks on it.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Defense};
use crate::error::{contract, Result};
use crate::models::Classifier;
use crate::numcore::Tensor;

/// Parameter counts standing in for the per-call costs of the classifier,
/// the score network and the guiding purifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTerms {
    pub n_c: usize,
    pub n_d: usize,
    pub n_dm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub t_eot: usize,
    pub attack_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeCostReport {
    pub defense: String,
    /// Median seconds per image.
    pub purify_seconds: f64,
    /// Median seconds per image at the spec's EOT count.
    pub attack_seconds: f64,
    pub ratio: f64,
    pub t_star: usize,
    pub t_eot: usize,
    pub paths: usize,
    pub costs: CostTerms,
    pub scaling: Vec<ScalingRow>,
    pub warnings: Vec<String>,
}

impl TimeCostReport {
    /// Largest relative departure of `time(T) / time(T_min)` from
    /// `T / T_min` over the scaling table.
    pub fn linear_scaling_error(&self) -> f64 {
        let Some(base) = self.scaling.iter().min_by_key(|r| r.t_eot) else { return 0.0 };
        self.scaling
            .iter()
            .map(|r| {
                let want = r.t_eot as f64 / base.t_eot as f64;
                ((r.attack_seconds / base.attack_seconds) / want - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "defense,t_star,paths,t_eot,purify_seconds,attack_seconds,ratio")?;
        for r in &self.scaling {
            writeln!(
                f,
                "{},{},{},{},{:.6},{:.6},{:.4}",
                self.defense,
                self.t_star,
                self.paths,
                r.t_eot,
                self.purify_seconds,
                r.attack_seconds,
                r.attack_seconds / self.purify_seconds
            )?;
        }
        Ok(())
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const MIN_ITEM_SECONDS: f64 = 1e-3;

/// Seconds per item of `work`, repeating it until the measured span
/// clears the timer floor.
fn time_per_item(items: usize, warnings: &mut Vec<String>, mut work: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut reps = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..reps {
            work()?;
        }
        let per = t.elapsed().as_secs_f64() / (reps * items) as f64;
        if per >= MIN_ITEM_SECONDS || reps >= 1 << 12 {
            return Ok(per);
        }
        reps *= 4;
        warnings.push(format!("under {MIN_ITEM_SECONDS}s per item; batching {reps} repetitions"));
    }
}

/// What to measure. `t_star`, `paths` and `costs` only label the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub repeats: usize,
    pub eots: Vec<usize>,
    pub t_star: usize,
    pub paths: usize,
    pub costs: CostTerms,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan { repeats: 3, eots: vec![1, 5, 20], t_star: 0, paths: 1, costs: CostTerms::default() }
    }
}

/// Times purification of `x` and `spec` against it, `plan.repeats` times
/// each after one warm-up, and the attack again at every EOT count in
/// `plan.eots`.
pub fn bench_time_cost(
    defense: &dyn Defense,
    classifier: &Classifier,
    spec: &AttackSpec,
    x: &Tensor,
    y: &[usize],
    plan: &BenchPlan,
) -> Result<TimeCostReport> {
    let repeats = plan.repeats;
    if repeats == 0 || x.batch() == 0 {
        return Err(contract("bench needs at least one repeat and one image"));
    }
    let n = x.batch();
    let mut warnings = Vec::new();
    defense.purify(&x.select(0), 0)?;
    spec.run(defense, classifier, &x.select(0), &y[..1], 0)?;

    let mut purify = Vec::with_capacity(repeats);
    let mut attack = Vec::with_capacity(repeats);
    for r in 0..repeats as u64 {
        purify.push(time_per_item(n, &mut warnings, || defense.purify(x, r).map(|_| ()))?);
        attack.push(time_per_item(n, &mut warnings, || spec.run(defense, classifier, x, y, r).map(|_| ()))?);
    }
    let purify_seconds = median(&mut purify);
    let attack_seconds = median(&mut attack);

    let mut scaling = Vec::with_capacity(plan.eots.len());
    for &e in &plan.eots {
        let s = spec.clone().with_eot(e);
        let mut times = Vec::with_capacity(repeats);
        for r in 0..repeats as u64 {
            times.push(time_per_item(n, &mut warnings, || s.run(defense, classifier, x, y, r).map(|_| ()))?);
        }
        scaling.push(ScalingRow { t_eot: e, attack_seconds: median(&mut times) });
    }
    warnings.dedup();
    Ok(TimeCostReport {
        defense: defense.name(),
        purify_seconds,
        attack_seconds,
        ratio: attack_seconds / purify_seconds,
        t_star: plan.t_star,
        t_eot: spec.eot,
        paths: plan.paths,
        costs: plan.costs,
        scaling,
        warnings,
    })
}
