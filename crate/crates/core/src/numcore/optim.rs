use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Adam with bias correction. Moment buffers are created on the first step
/// and persist across calls.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self::with(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with(lr: f32, betas: (f32, f32), eps: f32) -> Self {
        Adam { lr, betas, eps, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if grads.is_empty() || grads.len() != params.len() {
            return Err(contract(format!("adam: {} params but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(contract("adam: parameter list changed between steps"));
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "adam")?;
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
