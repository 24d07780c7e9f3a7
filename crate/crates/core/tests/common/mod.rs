//! Test-side oracles: independent f64 implementations of every tape
//! primitive and a central finite-difference gradient checker.

#![allow(dead_code)]

use oap_core::numcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Check {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub tape_fn: TapeFn,
    pub ref_fn: RefFn,
    /// Points where the primitive is not differentiable; inputs are kept
    /// at least 0.05 away from them.
    pub kinks: Vec<f64>,
}

fn check(name: &'static str, shapes: Vec<Vec<usize>>, kinks: Vec<f64>, tape_fn: TapeFn, ref_fn: RefFn) -> Check {
    Check { name, shapes, tape_fn, ref_fn, kinks }
}

pub fn ref_conv(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, cin: usize, cout: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for b_ in 0..n {
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = b.map(|b| b[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let (si, sj) = (i as isize + ki as isize - p, j as isize + kj as isize - p);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                    continue;
                                }
                                s += w[((co * cin + ci) * k + ki) * k + kj]
                                    * x[((b_ * cin + ci) * h + si as usize) * wd + sj as usize];
                            }
                        }
                    }
                    out[((b_ * cout + co) * h + i) * wd + j] = s;
                }
            }
        }
    }
    out
}

pub fn ref_softmax_ce(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.chunks(c).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / labels.len() as f64
}

fn map1(f: impl Fn(f64) -> f64 + 'static) -> RefFn {
    Box::new(move |v: &[Vec<f64>]| v[0].iter().map(|&x| f(x)).collect())
}

/// Every primitive of the tape paired with its f64 reference.
pub fn all_checks() -> Vec<Check> {
    let target: Vec<f64> = (0..12).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.4).collect();
    let t32 = Tensor::new(vec![3, 4], target.iter().map(|&v| v as f32).collect()).unwrap();
    let (t_l1, t_sq) = (t32.clone(), t32.clone());
    let (r_l1, r_sq) = (target.clone(), target.clone());
    let shift: Vec<f32> = (0..12).map(|i| 0.1 * i as f32 - 0.5).collect();
    let shift64: Vec<f64> = shift.iter().map(|&v| v as f64).collect();
    let labels = vec![2usize, 0, 1];
    let labels2 = labels.clone();
    vec![
        check("add", vec![vec![3, 4], vec![3, 4]], vec![], Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            Box::new(|v| v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect())),
        check("sub", vec![vec![3, 4], vec![3, 4]], vec![], Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            Box::new(|v| v[0].iter().zip(&v[1]).map(|(a, b)| a - b).collect())),
        check("mul", vec![vec![3, 4], vec![3, 4]], vec![], Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            Box::new(|v| v[0].iter().zip(&v[1]).map(|(a, b)| a * b).collect())),
        check("scale", vec![vec![3, 4]], vec![], Box::new(|t, v| t.scale(v[0], -1.7).unwrap()), map1(|x| -1.7 * x)),
        check("add_scalar", vec![vec![3, 4]], vec![], Box::new(|t, v| t.add_scalar(v[0], 0.3).unwrap()),
            map1(|x| x + 0.3f32 as f64)),
        check("add_const", vec![vec![3, 4]], vec![],
            Box::new(move |t, v| t.add_const(v[0], Tensor::new(vec![3, 4], shift.clone()).unwrap()).unwrap()),
            Box::new(move |v| v[0].iter().zip(&shift64).map(|(a, b)| a + b).collect())),
        check("matmul", vec![vec![3, 4], vec![4, 2]], vec![], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            Box::new(|v| {
                let mut out = vec![0.0; 6];
                for i in 0..3 {
                    for j in 0..2 {
                        out[i * 2 + j] = (0..4).map(|k| v[0][i * 4 + k] * v[1][k * 2 + j]).sum();
                    }
                }
                out
            })),
        check("add_row_bias", vec![vec![3, 4], vec![4]], vec![], Box::new(|t, v| t.add_row_bias(v[0], v[1]).unwrap()),
            Box::new(|v| (0..12).map(|i| v[0][i] + v[1][i % 4]).collect())),
        check("add_channel_bias/shared", vec![vec![2, 3, 2, 2], vec![3]], vec![],
            Box::new(|t, v| t.add_channel_bias(v[0], v[1]).unwrap()),
            Box::new(|v| (0..24).map(|i| v[0][i] + v[1][(i / 4) % 3]).collect())),
        check("add_channel_bias/per-item", vec![vec![2, 3, 2, 2], vec![2, 3]], vec![],
            Box::new(|t, v| t.add_channel_bias(v[0], v[1]).unwrap()),
            Box::new(|v| (0..24).map(|i| v[0][i] + v[1][i / 4]).collect())),
        check("conv2d", vec![vec![2, 2, 4, 5], vec![3, 2, 3, 3], vec![3]], vec![],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2])).unwrap()),
            Box::new(|v| ref_conv(&v[0], &v[1], Some(&v[2]), 2, 2, 3, 4, 5, 3))),
        check("conv2d/no-bias", vec![vec![1, 3, 3, 3], vec![2, 3, 1, 1]], vec![],
            Box::new(|t, v| t.conv2d(v[0], v[1], None).unwrap()),
            Box::new(|v| ref_conv(&v[0], &v[1], None, 1, 3, 2, 3, 3, 1))),
        check("avg_pool2", vec![vec![2, 2, 4, 4]], vec![], Box::new(|t, v| t.avg_pool2(v[0]).unwrap()),
            Box::new(|v| {
                let mut out = vec![0.0; 16];
                for p in 0..4 {
                    for i in 0..2 {
                        for j in 0..2 {
                            let at = |a: usize, b: usize| v[0][p * 16 + a * 4 + b];
                            out[p * 4 + i * 2 + j] = 0.25
                                * (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1));
                        }
                    }
                }
                out
            })),
        check("reshape", vec![vec![3, 4]], vec![], Box::new(|t, v| t.reshape(v[0], &[2, 6]).unwrap()), map1(|x| x)),
        check("relu", vec![vec![3, 4]], vec![0.0], Box::new(|t, v| t.relu(v[0]).unwrap()), map1(|x| x.max(0.0))),
        check("silu", vec![vec![3, 4]], vec![], Box::new(|t, v| t.silu(v[0]).unwrap()), map1(|x| x / (1.0 + (-x).exp()))),
        check("tanh", vec![vec![3, 4]], vec![], Box::new(|t, v| t.tanh(v[0]).unwrap()), map1(f64::tanh)),
        check("clamp", vec![vec![3, 4]], vec![-0.5, 0.5], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5).unwrap()),
            map1(|x| x.clamp(-0.5, 0.5))),
        check("sign", vec![vec![3, 4]], vec![0.0], Box::new(|t, v| t.sign(v[0]).unwrap()), map1(f64::signum)),
        check("sum", vec![vec![3, 4]], vec![], Box::new(|t, v| t.sum(v[0]).unwrap()), Box::new(|v| vec![v[0].iter().sum()])),
        check("mean", vec![vec![3, 4]], vec![], Box::new(|t, v| t.mean(v[0]).unwrap()),
            Box::new(|v| vec![v[0].iter().sum::<f64>() / 12.0])),
        check("softmax_cross_entropy", vec![vec![3, 4]], vec![],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap()),
            Box::new(move |v| vec![ref_softmax_ce(&v[0], &labels2, 4)])),
        check("l1_loss", vec![vec![3, 4]], vec![], Box::new(move |t, v| t.l1_loss(v[0], &t_l1).unwrap()),
            Box::new(move |v| vec![v[0].iter().zip(&r_l1).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0])),
        check("sq_l2_loss", vec![vec![3, 4]], vec![], Box::new(move |t, v| t.sq_l2_loss(v[0], &t_sq).unwrap()),
            Box::new(move |v| vec![v[0].iter().zip(&r_sq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0])),
    ]
}

/// Random inputs for `c`, away from its kinks (and away from the l1
/// target, whose entries are multiples of 1/11 shifted by -0.4).
fn inputs(c: &Check, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    c.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|i| loop {
                    let v: f64 = r.random_range(-1.0..1.0);
                    let v = (v as f32) as f64;
                    let near_kink = c.kinks.iter().any(|k| (v - k).abs() < 0.05);
                    let near_target = c.name == "l1_loss" && {
                        let t = ((i * 7 % 11) as f64) / 11.0 - 0.4;
                        (v - (t as f32) as f64).abs() < 0.05
                    };
                    if !near_kink && !near_target {
                        break v;
                    }
                })
                .collect()
        })
        .collect()
}

/// Central differences of `f` at `x` in f64.
pub fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if d == 0.0 {
        0.0
    } else {
        d / n.max(1e-6)
    }
}

/// Largest relative error between the tape's gradients (for a random linear
/// read-out of the output) and finite differences of the f64 reference.
pub fn gradcheck(c: &Check, seed: u64) -> f64 {
    let xs = inputs(c, seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs
        .iter()
        .zip(&c.shapes)
        .map(|(x, s)| tape.param(Tensor::new(s.clone(), x.iter().map(|&v| v as f32).collect()).unwrap()))
        .collect();
    let out = (c.tape_fn)(&mut tape, &vars);
    let n_out = tape.value(out).numel();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f32> = (0..n_out).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let wv = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.clone()).unwrap());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        let f = |xk: &[f64]| {
            let mut all = xs.clone();
            all[k] = xk.to_vec();
            (c.ref_fn)(&all).iter().zip(&w).map(|(o, wi)| o * *wi as f64).sum::<f64>()
        };
        let fd = fd_grad(&f, &xs[k], 1e-6);
        let g: Vec<f64> = match tape.grad(vars[k]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; xs[k].len()],
        };
        worst = worst.max(rel_err(&g, &fd));
    }
    worst
}

/// Two-class linear logistic model `logits = [0, w.x + b]` on 2-D inputs,
/// optionally with Gaussian input noise of std `noise` drawn from the seed.
pub struct Linear2d {
    pub w: [f32; 2],
    pub b: f32,
    pub noise: f32,
}

impl Linear2d {
    fn perturbed(&self, x: &Tensor, seed: u64) -> Tensor {
        if self.noise == 0.0 {
            return x.clone();
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = x.data().iter().map(|v| v + self.noise * r.sample::<f32, _>(rand_distr::StandardNormal)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn margin(&self, x: &[f32]) -> f32 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.b
    }
}

impl oap_core::attacks::Pipeline for Linear2d {
    fn logits(&self, x: &Tensor, seed: u64) -> oap_core::Result<Tensor> {
        let x = self.perturbed(x, seed);
        let mut out = Vec::new();
        for i in 0..x.batch() {
            out.push(0.0);
            out.push(self.margin(x.item_slice(i)));
        }
        Tensor::new(vec![x.batch(), 2], out)
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize], seed: u64) -> oap_core::Result<(f32, Tensor)> {
        let xp = self.perturbed(x, seed);
        let mut tape = Tape::new();
        let xv = tape.param(xp);
        let w = tape.constant(Tensor::new(vec![2, 2], vec![0.0, self.w[0], 0.0, self.w[1]]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![0.0, self.b]).unwrap());
        let z = tape.matmul(xv, w)?;
        let logits = tape.add_row_bias(z, b)?;
        let loss = tape.softmax_cross_entropy(logits, y)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), tape.grad(xv).unwrap().clone()))
    }

    fn stochastic(&self) -> bool {
        self.noise > 0.0
    }
}

pub mod toy {
    use std::sync::OnceLock;

    use oap_core::harness::data::{gen_split, Dataset, DatasetKind};
    use oap_core::models::{train_classifier, Classifier, ClassifierArch, TrainConfig};

    pub fn shapes_train() -> &'static Dataset {
        static D: OnceLock<Dataset> = OnceLock::new();
        D.get_or_init(|| gen_split(DatasetKind::Shapes16, 1500, 1, "train").unwrap())
    }

    pub fn shapes_test(n: usize) -> Dataset {
        gen_split(DatasetKind::Shapes16, n, 1, "test").unwrap()
    }

    /// cnn-tiny trained on shapes16 with light input-noise augmentation.
    pub fn classifier() -> &'static Classifier {
        static C: OnceLock<Classifier> = OnceLock::new();
        C.get_or_init(|| {
            let cfg = TrainConfig { epochs: 30, batch_size: 32, lr: 3e-3, seed: 1, noise_augment: 0.05 };
            train_classifier(shapes_train(), ClassifierArch::CnnTiny, &cfg).unwrap().0
        })
    }
}

/// Brute-force references for entropic transport.
pub mod ot {
    /// Primal entropic objective of a 2x2 plan with `pi_11 = p`.
    pub fn primal_2x2(x: [f64; 2], a: [f64; 2], y: [f64; 2], b: [f64; 2], eps: f64, p: f64) -> f64 {
        let plan = [[p, a[0] - p], [b[0] - p, a[1] - b[0] + p]];
        let mut v = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let m = plan[i][j];
                v += m * 0.5 * (x[i] - y[j]).powi(2);
                if m > 0.0 {
                    v += eps * m * (m / (a[i] * b[j])).ln();
                }
            }
        }
        v
    }

    pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..300 {
            let (c, d) = (hi - r * (hi - lo), lo + r * (hi - lo));
            if f(c) < f(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        f(0.5 * (lo + hi))
    }

    /// Plain (kernel-domain) Sinkhorn at a fixed regulariser.
    pub fn scalar_barycentric(src: &[f64], tgt: &[f64], eps: f64) -> Vec<f64> {
        let (n, m) = (src.len(), tgt.len());
        let k: Vec<Vec<f64>> = src.iter().map(|x| tgt.iter().map(|y| (-0.5 * (x - y).powi(2) / eps).exp()).collect()).collect();
        let (mut u, mut v) = (vec![1.0; n], vec![1.0; m]);
        for _ in 0..200_000 {
            for i in 0..n {
                u[i] = (1.0 / n as f64) / (0..m).map(|j| k[i][j] * v[j]).sum::<f64>();
            }
            for j in 0..m {
                v[j] = (1.0 / m as f64) / (0..n).map(|i| k[i][j] * u[i]).sum::<f64>();
            }
        }
        (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..m).map(|j| u[i] * k[i][j] * v[j]).collect();
                row.iter().zip(tgt).map(|(p, y)| p * y).sum::<f64>() / row.iter().sum::<f64>()
            })
            .collect()
    }
}
