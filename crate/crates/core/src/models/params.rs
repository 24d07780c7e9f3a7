use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, Tape, Tensor, Var};

/// Named parameter tensors of one network, in forward-pass order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    /// He-uniform conv kernel `[cout, cin, k, k]` plus zero bias.
    pub fn push_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (cin * k * k) as f32).sqrt();
        self.push(format!("{name}.w"), Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng));
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// He-uniform dense weight `[din, dout]` plus zero bias.
    pub fn push_linear(&mut self, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
        let bound = (6.0 / din as f32).sqrt();
        self.push(format!("{name}.w"), Tensor::uniform(&[din, dout], -bound, bound, rng));
        self.push(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    pub fn zero_out(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    pub fn to_checkpoint(&self, arch: &str, meta: serde_json::Value) -> Checkpoint {
        let params = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        Checkpoint::new(arch, meta, params)
    }

    /// Loads values from `ck`, requiring the same names and shapes as `self`.
    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.params.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), (want, cur)) in ck.params.iter().zip(self.names.iter().zip(self.tensors.iter_mut())) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Format(format!("checkpoint tensor {name} {:?} does not match {want} {:?}", t.shape(), cur.shape())));
            }
            *cur = t.clone();
        }
        Ok(())
    }
}

/// Conv layer from the bound parameter slice starting at `at`.
pub(crate) fn conv(tape: &mut Tape, p: &[Var], at: usize, x: Var) -> Result<Var> {
    tape.conv2d(x, p[at], Some(p[at + 1]))
}

/// Dense layer from the bound parameter slice starting at `at`.
pub(crate) fn linear(tape: &mut Tape, p: &[Var], at: usize, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p[at])?;
    tape.add_row_bias(h, p[at + 1])
}
