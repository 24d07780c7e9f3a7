//! Procedural datasets standing in for natural-image benchmarks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numcore::{Tensor, TensorFile};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Two Gaussian blobs in the unit square.
    #[serde(rename = "points2d")]
    Points2d,
    /// Two interleaved half-moons, rescaled into the unit square.
    #[serde(rename = "moons")]
    Moons,
    /// 16x16 grayscale squares, circles and triangles.
    #[serde(rename = "shapes16")]
    Shapes16,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "points2d" => Ok(DatasetKind::Points2d),
            "moons" => Ok(DatasetKind::Moons),
            "shapes16" => Ok(DatasetKind::Shapes16),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DatasetKind::Points2d => "points2d",
            DatasetKind::Moons => "moons",
            DatasetKind::Shapes16 => "shapes16",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetKind::Points2d | DatasetKind::Moons => 2,
            DatasetKind::Shapes16 => 3,
        }
    }

    pub fn item_shape(&self) -> Vec<usize> {
        match self {
            DatasetKind::Points2d | DatasetKind::Moons => vec![2],
            DatasetKind::Shapes16 => vec![1, 16, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(kind: DatasetKind, inputs: Tensor, labels: Vec<usize>, split: &str, seed: u64) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(contract("dataset: input and label counts differ"));
        }
        let classes = kind.classes();
        if labels.iter().any(|&y| y >= classes) {
            return Err(contract("dataset: label outside [0, C)"));
        }
        Ok(Dataset { kind, inputs, labels, classes, split: split.to_string(), seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            inputs: self.inputs.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
            seed: self.seed,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Inputs and labels (stored as reals) with kind, split and seed in the
    /// metadata block.
    pub fn to_file(&self) -> TensorFile {
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&y| y as f32).collect()).expect("one label per item");
        TensorFile::new(serde_json::json!({ "kind": self.kind, "split": self.split, "seed": self.seed }))
            .with("inputs", self.inputs.clone())
            .with("labels", labels)
    }

    pub fn from_file(f: &TensorFile) -> Result<Self> {
        let kind: DatasetKind = serde_json::from_value(f.meta["kind"].clone())
            .map_err(|e| Error::Format(format!("dataset kind: {e}")))?;
        let split = f.meta["split"].as_str().unwrap_or("test");
        let seed = f.meta["seed"].as_u64().unwrap_or(0);
        let labels = f
            .get("labels")?
            .data()
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Error::Format(format!("bad label {v}"))) })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(kind, f.get("inputs")?.clone(), labels, split, seed)
    }

    /// The same labels and metadata around other inputs (adversarial or
    /// purified versions of these).
    pub fn with_inputs(&self, inputs: Tensor) -> Result<Dataset> {
        Dataset::new(self.kind, inputs, self.labels.clone(), &self.split, self.seed)
    }
}

/// `n` items of `kind`, labels cycling through the classes so every class
/// holds `n / C` items up to one. Deterministic in `seed`.
pub fn gen_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    gen_split(kind, n, seed, "train")
}

/// Like [`gen_dataset`], drawing from the stream named after `split` so that
/// different splits of the same root seed are independent.
pub fn gen_split(kind: DatasetKind, n: usize, seed: u64, split: &str) -> Result<Dataset> {
    let c = kind.classes();
    if n < c {
        return Err(contract(format!("need at least {c} items for {}", kind.tag())));
    }
    let mut r = rng::stream(rng::derive_named(seed, split));
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut data = Vec::with_capacity(n * kind.item_shape().iter().product::<usize>());
    for &y in &labels {
        match kind {
            DatasetKind::Points2d => blob_point(&mut r, y, &mut data),
            DatasetKind::Moons => moon_point(&mut r, y, &mut data),
            DatasetKind::Shapes16 => render_shape(&mut r, y, 16, &mut data),
        }
    }
    let mut shape = vec![n];
    shape.extend(kind.item_shape());
    Dataset::new(kind, Tensor::new(shape, data)?, labels, split, seed)
}

fn gauss(r: &mut impl Rng) -> f32 {
    rng::normals(r, 1)[0]
}

fn blob_point(r: &mut impl Rng, y: usize, out: &mut Vec<f32>) {
    let c = if y == 0 { 0.35 } else { 0.65 };
    for _ in 0..2 {
        out.push((c + 0.06 * gauss(r)).clamp(0.0, 1.0));
    }
}

fn moon_point(r: &mut impl Rng, y: usize, out: &mut Vec<f32>) {
    let th = r.random_range(0.0..std::f32::consts::PI);
    let (x, z) = if y == 0 { (th.cos(), th.sin()) } else { (1.0 - th.cos(), 0.5 - th.sin()) };
    let x = x + 0.1 * gauss(r);
    let z = z + 0.1 * gauss(r);
    out.push(((x + 1.5) / 4.0).clamp(0.0, 1.0));
    out.push(((z + 1.0) / 2.5).clamp(0.0, 1.0));
}

/// Renders class `y` (0 square, 1 circle, 2 triangle) on a noisy background
/// with 4x supersampled coverage.
fn render_shape(r: &mut impl Rng, y: usize, size: usize, out: &mut Vec<f32>) {
    let s = size as f32;
    let radius = r.random_range(0.22 * s..0.34 * s);
    let cx = r.random_range(radius + 0.5..s - radius - 0.5);
    let cy = r.random_range(radius + 0.5..s - radius - 0.5);
    let bg = r.random_range(0.2..0.45);
    let fg = bg + r.random_range(0.2..0.4);
    let inside = |px: f32, py: f32| -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match y {
            0 => dx.abs() <= 0.85 * radius && dy.abs() <= 0.85 * radius,
            1 => dx * dx + dy * dy <= radius * radius,
            _ => {
                // Upward isoceles triangle inscribed in the radius box.
                let top = cy - radius;
                let h = 2.0 * radius;
                let t = (py - top) / h;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * radius
            }
        }
    };
    for i in 0..size {
        for j in 0..size {
            let mut cov = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    if inside(j as f32 + 0.25 + 0.5 * b as f32, i as f32 + 0.25 + 0.5 * a as f32) {
                        cov += 0.25;
                    }
                }
            }
            let v = bg + cov * (fg - bg) + 0.03 * gauss(r);
            out.push(v.clamp(0.0, 1.0));
        }
    }
}
