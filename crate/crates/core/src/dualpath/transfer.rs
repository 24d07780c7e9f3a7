use super::sinkhorn::{barycentric_map, bin_of, debias, entropic_ot, self_ot, OtSolution, PixelCloud, SinkhornConfig};
use crate::error::{contract, shape_err, Result};

/// An image's intensity cloud as the solver sees it: per pixel, or binned
/// with the level index of every kept point.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCloud {
    pub cloud: PixelCloud,
    levels: Option<Vec<usize>>,
}

impl ImageCloud {
    pub fn new(values: &[f32], cfg: &SinkhornConfig) -> Result<Self> {
        Ok(match cfg.bins {
            Some(b) => {
                let (cloud, kept) = PixelCloud::binned(values, b)?;
                ImageCloud { cloud, levels: Some(kept) }
            }
            None => ImageCloud { cloud: PixelCloud::uniform(values)?, levels: None },
        })
    }
}

/// Output of [`color_transfer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub values: Vec<f32>,
    pub converged: bool,
}

/// Moves every source intensity to its barycentric image under the
/// entropic plan from the source cloud to the target cloud. Outputs are
/// convex combinations of target values.
pub fn color_transfer(src: &[f32], tgt: &[f32], cfg: &SinkhornConfig) -> Result<Transfer> {
    if src.len() != tgt.len() {
        return Err(shape_err("color_transfer", format!("{} vs {} pixels", src.len(), tgt.len())));
    }
    let (a, b) = (ImageCloud::new(src, cfg)?, ImageCloud::new(tgt, cfg)?);
    let sol = entropic_ot(&a.cloud, &b.cloud, cfg)?;
    Ok(transfer_with(src, &a, &b.cloud, tgt, &sol, cfg))
}

/// Color transfer given an already solved plan between the two clouds.
fn transfer_with(src: &[f32], a: &ImageCloud, b: &PixelCloud, tgt: &[f32], sol: &OtSolution, cfg: &SinkhornConfig) -> Transfer {
    let mapped = barycentric_map(&a.cloud, b, sol);
    let values = match (&a.levels, cfg.bins) {
        (Some(kept), Some(bins)) => {
            let mut at_level = vec![f64::NAN; bins];
            for (&k, &v) in kept.iter().zip(&mapped) {
                at_level[k] = v;
            }
            // Both neighbouring levels of a pixel carry mass, so the
            // interpolation only touches defined entries.
            let lo = tgt.iter().fold(f32::INFINITY, |m, &v| m.min(v)) as f64;
            let hi = tgt.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            src.iter()
                .map(|&v| {
                    let (k, fr) = bin_of(v, bins);
                    let m = if fr > 0.0 { (1.0 - fr) * at_level[k] + fr * at_level[k + 1] } else { at_level[k] };
                    m.clamp(lo, hi) as f32
                })
                .collect()
        }
        _ => mapped.into_iter().map(|v| v as f32).collect(),
    };
    Transfer { values, converged: sol.converged }
}

/// Solver state for a fixed set of candidate targets: their clouds and
/// self-transport costs, computed once.
#[derive(Clone, Debug)]
pub struct TargetIndex {
    clouds: Vec<ImageCloud>,
    self_costs: Vec<f64>,
    converged: bool,
}

impl TargetIndex {
    pub fn new(bank: &[&[f32]], cfg: &SinkhornConfig) -> Result<Self> {
        if bank.is_empty() {
            return Err(contract("empty target bank"));
        }
        let mut clouds = Vec::with_capacity(bank.len());
        let mut self_costs = Vec::with_capacity(bank.len());
        let mut converged = true;
        for t in bank {
            let c = ImageCloud::new(t, cfg)?;
            let s = self_ot(&c.cloud, cfg)?;
            converged &= s.converged;
            self_costs.push(s.value);
            clouds.push(c);
        }
        Ok(TargetIndex { clouds, self_costs, converged })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Chosen bank index with every divergence computed on the way, and the
/// solved plan from the input to the chosen target.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub divergences: Vec<f64>,
    pub converged: bool,
    source: ImageCloud,
    target: PixelCloud,
    plan: OtSolution,
}

impl Selection {
    /// Color transfer of the selected input onto the selected target
    /// (`tgt` supplies its pixel range), reusing the plan solved during
    /// selection.
    pub fn transfer(&self, x: &[f32], tgt: &[f32], cfg: &SinkhornConfig) -> Transfer {
        transfer_with(x, &self.source, &self.target, tgt, &self.plan, cfg)
    }
}

/// `argmin_j S(x, bank_j)`, lowest index on ties.
pub fn select_target(x: &[f32], bank: &[&[f32]], cfg: &SinkhornConfig) -> Result<Selection> {
    select_in(x, &TargetIndex::new(bank, cfg)?, cfg)
}

/// [`select_target`] against a prepared index.
pub fn select_in(x: &[f32], index: &TargetIndex, cfg: &SinkhornConfig) -> Result<Selection> {
    let source = ImageCloud::new(x, cfg)?;
    let own = self_ot(&source.cloud, cfg)?;
    let mut converged = own.converged && index.converged;
    let mut divergences = Vec::with_capacity(index.len());
    let mut best: Option<(usize, OtSolution)> = None;
    for (j, t) in index.clouds.iter().enumerate() {
        let ab = entropic_ot(&source.cloud, &t.cloud, cfg)?;
        converged &= ab.converged;
        let d = debias(ab.value, own.value, index.self_costs[j]);
        let better = match &best {
            None => true,
            Some((k, _)) => d < divergences[*k],
        };
        divergences.push(d);
        if better {
            best = Some((j, ab));
        }
    }
    let (best, plan) = best.expect("index is nonempty");
    let target = index.clouds[best].cloud.clone();
    Ok(Selection { index: best, divergences, converged, source, target, plan })
}
