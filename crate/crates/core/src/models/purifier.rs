use super::params::{conv, ParamSet};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{Checkpoint, Tape, Tensor, Var};
use crate::rng;

/// Convolutional encoder-decoder with a residual connection from the input.
/// Outputs are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Purifier {
    pub input_shape: [usize; 3],
    pub width: usize,
    /// Trained on diffusion-noised inputs (usable inside the reverse chain).
    pub noise_conditioned: bool,
    pub params: ParamSet,
}

const LAYERS: [&str; 6] = ["enc1", "enc2", "enc3", "dec1", "dec2", "dec3"];

impl Purifier {
    pub fn new(input_shape: [usize; 3], width: usize, seed: u64) -> Self {
        let c = input_shape[0];
        let mut r = rng::stream(seed);
        let mut params = ParamSet::default();
        for (i, name) in LAYERS.iter().enumerate() {
            let cin = if i == 0 { c } else { width };
            let cout = if i == LAYERS.len() - 1 { c } else { width };
            params.push_conv(name, cin, cout, 3, &mut r);
        }
        // Near-identity at initialization.
        for v in params.tensors_mut()[10].data_mut() {
            *v *= 0.1;
        }
        Purifier { input_shape, width, noise_conditioned: false, params }
    }

    pub fn forward_with(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(shape_err("purifier", format!("expects [N, {:?}], got {shape:?}", self.input_shape)));
        }
        let mut h = x;
        for i in 0..LAYERS.len() {
            h = conv(tape, p, 2 * i, h)?;
            if i + 1 < LAYERS.len() {
                h = tape.relu(h)?;
            }
        }
        let r = tape.add(x, h)?;
        tape.clamp(r, 0.0, 1.0)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.forward_with(tape, &p, x)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "input_shape": self.input_shape,
            "width": self.width,
            "noise_conditioned": self.noise_conditioned,
        });
        self.params.to_checkpoint("purifier-convres", meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != "purifier-convres" {
            return Err(Error::Format(format!("expected a purifier checkpoint, got {}", ck.arch)));
        }
        let shape: [usize; 3] = serde_json::from_value(ck.meta["input_shape"].clone())?;
        let width = ck.meta["width"].as_u64().ok_or_else(|| Error::Format("missing width".into()))? as usize;
        let mut m = Self::new(shape, width, 0);
        m.noise_conditioned = ck.meta["noise_conditioned"].as_bool().unwrap_or(false);
        m.params.load_from(ck)?;
        Ok(m)
    }
}
