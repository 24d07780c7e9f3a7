//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every op appends one node holding its output value. Nodes are stored in
//! execution order, so a reverse sweep over the node list is a valid
//! topological order for the backward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{contract, shape_err, Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Shift(usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    RowBias { x: usize, b: usize },
    ChannelBias { x: usize, b: usize, per_item: bool, c: usize, hw: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    AvgPool2 { x: usize, planes: usize, h: usize, w: usize },
    Reshape(usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Clamp { x: usize, lo: f32, hi: f32 },
    Sign,
    Sum(usize),
    Mean(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
    L1 { x: usize, target: Tensor },
    SqL2 { x: usize, target: Tensor },
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus per-node gradient slots.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
    non_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            non_finite: false,
        }
    }

    /// Tape that evaluates ops without recording backward information.
    pub fn no_grad() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any op produced a NaN or infinity.
    pub fn non_finite(&self) -> bool {
        self.non_finite
    }

    /// Trainable leaf: receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.recording;
        self.push_node(t, Op::Leaf, rg)
    }

    /// Detached leaf: never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !value.is_finite() {
            self.non_finite = true;
        }
        let (op, requires_grad) = if self.recording { (op, requires_grad) } else { (Op::Leaf, false) };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var { id: self.nodes.len() - 1, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(contract("variable does not belong to this tape"));
        }
        Ok(v.id)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let rg = self.rg(&[ia]);
        Ok(self.push_node(out, op(ia), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        va.same_shape(vb, name)?;
        let out = va.zip_map(vb, f)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push_node(out, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        self.unary(a, |x| x + s, Op::Shift)
    }

    /// `a + t` for a constant tensor `t`.
    pub fn add_const(&mut self, a: Var, t: Tensor) -> Result<Var> {
        let c = self.constant(t);
        self.add(a, c)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.nodes[ia].value.data(), false, self.nodes[ib].value.data(), false, 0.0, &mut out);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push_node(Tensor::new(vec![m, n], out)?, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    /// `[N, D] + [D]`, the bias is broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let bias = self.nodes[ib].value.data();
        let d = sb[0];
        let mut out = self.nodes[ix].value.clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[ix, ib]);
        Ok(self.push_node(out, Op::RowBias { x: ix, b: ib }, rg))
    }

    /// `[N, C, H, W] + b` where `b` is `[C]` (shared) or `[N, C]` (per item),
    /// broadcast over the spatial axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(shape_err("add_channel_bias", format!("input {sx:?} is not NCHW")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let per_item = match sb.as_slice() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => return Err(shape_err("add_channel_bias", format!("{sx:?} + {sb:?}"))),
        };
        let bias = self.nodes[ib].value.data();
        let mut out = self.nodes[ix].value.clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = if per_item { bias[p] } else { bias[p % c] };
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[ix, ib]);
        Ok(self.push_node(out, Op::ChannelBias { x: ix, b: ib, per_item, c, hw }, rg))
    }

    /// Stride-1 "same" convolution. `x`: `[N, Cin, H, W]`, `w`:
    /// `[Cout, Cin, k, k]` with odd `k`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ibias = b.map(|b| self.check(b)).transpose()?;
        let sx = self.nodes[ix].value.shape();
        let sw = self.nodes[iw].value.shape();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let geom = ConvGeom { batch: sx[0], cin: sx[1], cout: sw[0], h: sx[2], w: sx[3], k: sw[2] };
        if let Some(ib) = ibias {
            if self.nodes[ib].value.shape() != [geom.cout] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.nodes[ib].value.shape())));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ibias.map(|ib| self.nodes[ib].value.data()),
        );
        let mut ids = vec![ix, iw];
        ids.extend(ibias);
        let rg = self.rg(&ids);
        let t = Tensor::new(vec![geom.batch, geom.cout, geom.h, geom.w], out)?;
        Ok(self.push_node(t, Op::Conv2d { x: ix, w: iw, b: ibias, geom }, rg))
    }

    /// 2x2 average pooling, stride 2, over an NCHW input with even H and W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("{s:?}")));
        }
        let planes = s[0] * s[1];
        let out = kernels::avg_pool2_forward(planes, s[2], s[3], self.nodes[ix].value.data());
        let rg = self.rg(&[ix]);
        let t = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push_node(t, Op::AvgPool2 { x: ix, planes, h: s[2], w: s[3] }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push_node(t, Op::Reshape(ix), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f32::tanh, Op::Tanh)
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(contract(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.unary(a, |x| x.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Elementwise sign. Its gradient is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }, |_| Op::Sign)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.sum();
        let rg = self.rg(&[ia]);
        Ok(self.push_node(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.mean();
        let rg = self.rg(&[ia]);
        Ok(self.push_node(Tensor::scalar(s), Op::Mean(ia), rg))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let s = self.nodes[il].value.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", format!("{s:?} with {} labels", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(contract(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = vec![0.0f32; labels.len() * c];
        let mut loss = 0.0f64;
        for (i, row) in self.nodes[il].value.data().chunks(c).enumerate() {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += (lse - row[labels[i]]) as f64;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let n = labels.len() as f64;
        let rg = self.rg(&[il]);
        let op = Op::SoftmaxCe { logits: il, labels: labels.to_vec(), probs };
        Ok(self.push_node(Tensor::scalar((loss / n) as f32), op, rg))
    }

    /// Mean absolute deviation from a constant target.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let ix = self.check(x)?;
        self.nodes[ix].value.same_shape(target, "l1_loss")?;
        let v = self.nodes[ix].value.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        let n = target.numel() as f64;
        let rg = self.rg(&[ix]);
        Ok(self.push_node(Tensor::scalar((v / n) as f32), Op::L1 { x: ix, target: target.clone() }, rg))
    }

    /// Mean squared deviation from a constant target.
    pub fn sq_l2_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let ix = self.check(x)?;
        self.nodes[ix].value.same_shape(target, "sq_l2_loss")?;
        let v = self.nodes[ix].value.data().iter().zip(target.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        let n = target.numel() as f64;
        let rg = self.rg(&[ix]);
        Ok(self.push_node(Tensor::scalar((v / n) as f32), Op::SqL2 { x: ix, target: target.clone() }, rg))
    }

    /// Node whose forward value is `value` and whose backward pass hands the
    /// incoming gradient to `surrogate` unchanged. This is the backward-pass
    /// substitution used to attack non-differentiable stages.
    pub fn straight_through(&mut self, value: Tensor, surrogate: Var) -> Result<Var> {
        let is = self.check(surrogate)?;
        self.nodes[is].value.same_shape(&value, "straight_through")?;
        let rg = self.rg(&[is]);
        Ok(self.push_node(value, Op::StraightThrough(is), rg))
    }

    /// Backpropagate a scalar loss; gradients accumulate into the slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_from(loss, Tensor::ones(self.nodes[il].value.shape()))
    }

    /// Vector-Jacobian product: propagate `cotangent` from `out` to every
    /// node that requires gradients, accumulating into the slots.
    pub fn backward_from(&mut self, out: Var, cotangent: Tensor) -> Result<()> {
        let io = self.check(out)?;
        if !self.recording {
            return Err(contract("backward on a tape that does not record"));
        }
        self.nodes[io].value.same_shape(&cotangent, "backward_from")?;
        let mut adj: Vec<Option<Tensor>> = vec![None; io + 1];
        adj[io] = Some(cotangent);
        for id in (0..=io).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj)?;
            match &mut self.grads[id] {
                Some(acc) => acc.add_assign_scaled(&g, 1.0)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let acc = |adj: &mut [Option<Tensor>], i: usize, f: &dyn Fn(&mut [f32])| {
            if !nodes[i].requires_grad {
                return;
            }
            let slot = adj[i].get_or_insert_with(|| Tensor::zeros(nodes[i].value.shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, *a, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(adj, *b, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(adj, *a, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(adj, *b, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(adj, *a, &|d| d.iter_mut().zip(gd).zip(vb).for_each(|((d, g), y)| *d += g * y));
                acc(adj, *b, &|d| d.iter_mut().zip(gd).zip(va).for_each(|((d, g), x)| *d += g * x));
            }
            Op::Scale(a, s) => acc(adj, *a, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += s * g)),
            Op::Shift(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                acc(adj, *a, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g))
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(adj, *a, &|d| kernels::gemm(*m, *n, *k, gd, false, vb, true, 1.0, d));
                acc(adj, *b, &|d| kernels::gemm(*k, *m, *n, va, true, gd, false, 1.0, d));
            }
            Op::RowBias { x, b } => {
                acc(adj, *x, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(adj, *b, &|d| {
                    let w = d.len();
                    for row in gd.chunks(w) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::ChannelBias { x, b, per_item, c, hw } => {
                acc(adj, *x, &|d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(adj, *b, &|d| {
                    for (p, plane) in gd.chunks(*hw).enumerate() {
                        let j = if *per_item { p } else { p % c };
                        d[j] += plane.iter().sum::<f32>();
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
                let mut dx = nodes[*x].requires_grad.then(|| vec![0.0; vx.len()]);
                let mut dw = nodes[*w].requires_grad.then(|| vec![0.0; vw.len()]);
                let mut db = b.filter(|&i| nodes[i].requires_grad).map(|_| vec![0.0; geom.cout]);
                kernels::conv2d_backward(geom, vx, vw, gd, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    acc(adj, *x, &|d| d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g));
                }
                if let Some(dw) = dw {
                    acc(adj, *w, &|d| d.iter_mut().zip(&dw).for_each(|(d, g)| *d += g));
                }
                if let (Some(db), Some(bi)) = (db, b) {
                    acc(adj, *bi, &|d| d.iter_mut().zip(&db).for_each(|(d, g)| *d += g));
                }
            }
            Op::AvgPool2 { x, planes, h, w } => {
                acc(adj, *x, &|d| kernels::avg_pool2_backward(*planes, *h, *w, gd, d));
            }
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                acc(adj, *a, &|d| {
                    d.iter_mut().zip(gd).zip(va).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Silu(a) => {
                let va = nodes[*a].value.data();
                acc(adj, *a, &|d| {
                    d.iter_mut().zip(gd).zip(va).for_each(|((d, g), x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        *d += g * (s + x * s * (1.0 - s));
                    })
                });
            }
            Op::Tanh(a) => {
                let vy = nodes[id].value.data();
                acc(adj, *a, &|d| d.iter_mut().zip(gd).zip(vy).for_each(|((d, g), y)| *d += g * (1.0 - y * y)));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = nodes[*x].value.data();
                acc(adj, *x, &|d| {
                    d.iter_mut().zip(gd).zip(vx).for_each(|((d, g), v)| {
                        if *v >= *lo && *v <= *hi {
                            *d += g
                        }
                    })
                });
            }
            Op::Sign => {}
            Op::Sum(a) => {
                let s = gd[0];
                acc(adj, *a, &|d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / nodes[*a].value.numel() as f32;
                acc(adj, *a, &|d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let s = gd[0] / labels.len() as f32;
                acc(adj, *logits, &|d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::L1 { x, target } => {
                let vx = nodes[*x].value.data();
                let s = gd[0] / target.numel() as f32;
                acc(adj, *x, &|d| {
                    d.iter_mut().zip(vx).zip(target.data()).for_each(|((d, a), b)| {
                        let diff = a - b;
                        if diff > 0.0 {
                            *d += s
                        } else if diff < 0.0 {
                            *d -= s
                        }
                    })
                });
            }
            Op::SqL2 { x, target } => {
                let vx = nodes[*x].value.data();
                let s = 2.0 * gd[0] / target.numel() as f32;
                acc(adj, *x, &|d| d.iter_mut().zip(vx).zip(target.data()).for_each(|((d, a), b)| *d += s * (a - b)));
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("id", &self.id).field("nodes", &self.nodes.len()).field("recording", &self.recording).finish()
    }
}

/// Convenience for callers that only need a contract error on NaN.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
