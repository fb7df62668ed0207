use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BufferId, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = he_uniform(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel);
        let weight = store.add_param(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros([cout]), false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Batch norm over axis 1 with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(format!("{name}.weight"), Tensor::full([channels], 1.0), false)?,
            beta: store.add_param(format!("{name}.bias"), Tensor::zeros([channels]), false)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], 1.0))?,
        })
    }

    /// In train mode, normalizes with batch statistics and folds them into the
    /// running averages with momentum [`BN_MOMENTUM`].
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval {
                mean: store.buffer(self.running_mean).data().to_vec(),
                var: store.buffer(self.running_var).data().to_vec(),
            },
        };
        let (y, stats) = tape.batch_norm(x, g, b, &bn_mode, BN_EPS)?;
        if let Some(stats) = stats {
            let blend = |dst: &mut Tensor, src: &[f32]| {
                for (d, &s) in dst.data_mut().iter_mut().zip(src) {
                    *d = (1.0 - BN_MOMENTUM) * *d + BN_MOMENTUM * s;
                }
            };
            blend(store.buffer_mut(self.running_mean), &stats.mean);
            blend(store.buffer_mut(self.running_var), &stats.var_unbiased);
        }
        Ok(y)
    }
}

/// Fully connected layer with weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_param(format!("{name}.weight"), he_uniform(rng, &[in_dim, out_dim], in_dim), true)?,
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros([out_dim]), false)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match tape.value(x).shape() {
            [_, d] if *d == self.in_dim => {}
            s => return Err(Error::shape("linear", format!("input {s:?}, expected [n, {}]", self.in_dim))),
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Two linear layers with batch norm and ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), input, hidden)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, output)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = self.bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }
}
