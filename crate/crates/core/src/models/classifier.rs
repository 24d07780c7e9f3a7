use serde::{Deserialize, Serialize};

use super::params::{conv, linear, ParamSet};
use crate::error::{contract, shape_err, Error, Result};
use crate::numcore::{Checkpoint, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierArch {
    /// 2 -> 64 -> 64 -> C, ReLU.
    #[serde(rename = "mlp-2d")]
    Mlp2d,
    /// Three 3x3 convs (8, 16, 16 channels) with 2x2 average pooling after
    /// the first two, then a linear head.
    #[serde(rename = "cnn-tiny")]
    CnnTiny,
}

impl ClassifierArch {
    pub fn tag(&self) -> &'static str {
        match self {
            ClassifierArch::Mlp2d => "mlp-2d",
            ClassifierArch::CnnTiny => "cnn-tiny",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "mlp-2d" => Ok(ClassifierArch::Mlp2d),
            "cnn-tiny" => Ok(ClassifierArch::CnnTiny),
            other => Err(Error::Format(format!("unknown classifier architecture {other:?}"))),
        }
    }
}

/// The attacked classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub classes: usize,
    /// Per-item input shape: `[2]` for `mlp-2d`, `[C, H, W]` for `cnn-tiny`.
    pub input_shape: Vec<usize>,
    pub params: ParamSet,
}

impl Classifier {
    pub fn mlp_2d(classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let mut params = ParamSet::default();
        params.push_linear("fc1", 2, 64, &mut r);
        params.push_linear("fc2", 64, 64, &mut r);
        params.push_linear("out", 64, classes, &mut r);
        Classifier { arch: ClassifierArch::Mlp2d, classes, input_shape: vec![2], params }
    }

    /// `input_shape` is `[channels, H, W]` with H and W divisible by 4.
    pub fn cnn_tiny(input_shape: [usize; 3], classes: usize, seed: u64) -> Self {
        let [c, h, w] = input_shape;
        let mut r = rng::stream(seed);
        let mut params = ParamSet::default();
        params.push_conv("conv1", c, 8, 3, &mut r);
        params.push_conv("conv2", 8, 16, 3, &mut r);
        params.push_conv("conv3", 16, 16, 3, &mut r);
        params.push_linear("head", 16 * (h / 4) * (w / 4), classes, &mut r);
        Classifier { arch: ClassifierArch::CnnTiny, classes, input_shape: input_shape.to_vec(), params }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(shape_err("classifier_forward", format!("{} expects [N, {:?}], got {shape:?}", self.arch.tag(), self.input_shape)));
        }
        Ok(())
    }

    /// Logits `[N, classes]` for the bound parameters `p`.
    pub fn forward_with(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        self.check_input(&shape)?;
        match self.arch {
            ClassifierArch::Mlp2d => {
                let h = linear(tape, p, 0, x)?;
                let h = tape.relu(h)?;
                let h = linear(tape, p, 2, h)?;
                let h = tape.relu(h)?;
                linear(tape, p, 4, h)
            }
            ClassifierArch::CnnTiny => {
                let h = conv(tape, p, 0, x)?;
                let h = tape.relu(h)?;
                let h = tape.avg_pool2(h)?;
                let h = conv(tape, p, 2, h)?;
                let h = tape.relu(h)?;
                let h = tape.avg_pool2(h)?;
                let h = conv(tape, p, 4, h)?;
                let h = tape.relu(h)?;
                let flat: usize = tape.shape(h)[1..].iter().product();
                let h = tape.reshape(h, &[shape[0], flat])?;
                linear(tape, p, 6, h)
            }
        }
    }

    /// Logits with the parameters held constant (gradients reach `x` only).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.forward_with(tape, &p, x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if x.batch() != labels.len() {
            return Err(contract("accuracy: input and label counts differ"));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Mean cross-entropy loss and its gradient with respect to `x`.
    pub fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let logits = self.forward(&mut tape, xv)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let g = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((tape.value(loss).item(), g))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "classes": self.classes, "input_shape": self.input_shape });
        self.params.to_checkpoint(self.arch.tag(), meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ClassifierArch::from_tag(&ck.arch)?;
        let classes = ck.meta["classes"].as_u64().ok_or_else(|| Error::Format("classifier checkpoint lacks classes".into()))? as usize;
        let mut model = match arch {
            ClassifierArch::Mlp2d => Self::mlp_2d(classes, 0),
            ClassifierArch::CnnTiny => {
                let s: Vec<usize> = serde_json::from_value(ck.meta["input_shape"].clone())?;
                let shape: [usize; 3] = s.try_into().map_err(|_| Error::Format("cnn-tiny input_shape must have 3 entries".into()))?;
                Self::cnn_tiny(shape, classes, 0)
            }
        };
        model.params.load_from(ck)?;
        Ok(model)
    }
}
