use super::params::{conv, linear, ParamSet};
use crate::error::{contract, shape_err, Error, Result};
use crate::numcore::{Checkpoint, Tape, Tensor, Var};
use crate::rng;

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding of `t / horizon` with geometric frequencies from 1
/// to 1000. Returns `[len(ts), TIME_EMBED_DIM]`.
pub fn time_embedding(ts: &[usize], horizon: usize) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        let s = t as f32 / horizon as f32;
        for k in 0..half {
            let f = 1000f32.powf(k as f32 / (half - 1) as f32);
            data.push((s * f).sin());
        }
        for k in 0..half {
            let f = 1000f32.powf(k as f32 / (half - 1) as f32);
            data.push((s * f).cos());
        }
    }
    Tensor::new(vec![ts.len(), TIME_EMBED_DIM], data).expect("embedding shape")
}

/// Noise-prediction network: a 4-layer conv trunk whose first activation
/// receives a per-item bias projected from the time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    /// Per-item input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub width: usize,
    /// Largest diffusion index the model is defined on.
    pub horizon: usize,
    pub params: ParamSet,
}

impl ScoreModel {
    pub fn new(input_shape: [usize; 3], width: usize, horizon: usize, seed: u64) -> Self {
        let c = input_shape[0];
        let mut r = rng::stream(seed);
        let mut params = ParamSet::default();
        params.push_conv("in", c, width, 3, &mut r);
        params.push_linear("temb", TIME_EMBED_DIM, width, &mut r);
        params.push_conv("mid1", width, width, 3, &mut r);
        params.push_conv("mid2", width, width, 3, &mut r);
        params.push_conv("out", width, c, 3, &mut r);
        // Start the output layer small so the untrained prediction is near 0.
        for v in params.tensors_mut()[8].data_mut() {
            *v *= 0.1;
        }
        ScoreModel { input_shape, width, horizon, params }
    }

    /// Predicted noise for `x` (`[N, C, H, W]`) at per-item times `ts`.
    pub fn forward_with(&self, tape: &mut Tape, p: &[Var], x: Var, ts: &[usize]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(shape_err("score_forward", format!("expects [N, {:?}], got {shape:?}", self.input_shape)));
        }
        if ts.len() != shape[0] {
            return Err(contract(format!("score_forward: {} times for a batch of {}", ts.len(), shape[0])));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > self.horizon) {
            return Err(contract(format!("diffusion time {t} outside [0, {}]", self.horizon)));
        }
        let emb = tape.constant(time_embedding(ts, self.horizon));
        let temb = linear(tape, p, 2, emb)?;
        let h = conv(tape, p, 0, x)?;
        let h = tape.add_channel_bias(h, temb)?;
        let h = tape.silu(h)?;
        let h = conv(tape, p, 4, h)?;
        let h = tape.silu(h)?;
        let h = conv(tape, p, 6, h)?;
        let h = tape.silu(h)?;
        conv(tape, p, 8, h)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.forward_with(tape, &p, x, ts)
    }

    pub fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let ts = vec![t; x.batch()];
        let out = self.forward(&mut tape, xv, &ts)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "input_shape": self.input_shape, "width": self.width, "horizon": self.horizon });
        self.params.to_checkpoint("score-conv", meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != "score-conv" {
            return Err(Error::Format(format!("expected a score-conv checkpoint, got {}", ck.arch)));
        }
        let shape: [usize; 3] = serde_json::from_value(ck.meta["input_shape"].clone())?;
        let width = ck.meta["width"].as_u64().ok_or_else(|| Error::Format("missing width".into()))? as usize;
        let horizon = ck.meta["horizon"].as_u64().ok_or_else(|| Error::Format("missing horizon".into()))? as usize;
        let mut m = Self::new(shape, width, horizon, 0);
        m.params.load_from(ck)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_output_is_finite_and_shaped() {
        let m = ScoreModel::new([1, 8, 8], 8, 1000, 3);
        let x = Tensor::randn(&[2, 1, 8, 8], &mut rng::stream(1));
        for t in [0, 500, 1000] {
            let e = m.predict(&x, t).unwrap();
            assert_eq!(e.shape(), x.shape());
            assert!(e.is_finite());
        }
        assert!(m.predict(&x, 1001).is_err());
    }

    #[test]
    fn embedding_is_bounded_and_time_dependent() {
        let e = time_embedding(&[0, 10], 100);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.item_slice(0), e.item_slice(1));
    }
}
