use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Distribution a parameter was drawn from. Kept so any element can be redrawn identically in law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Uniform { bound: f64 },
    Constant(f64),
}

impl Init {
    /// Kaiming-uniform for ReLU networks: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn kaiming_uniform(fan_in: usize) -> Self {
        Init::Uniform {
            bound: (6.0 / fan_in as f64).sqrt(),
        }
    }

    /// Bias init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn bias_uniform(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        }
    }

    pub fn sample<T: Scalar>(&self, rng: &mut Rng) -> T {
        match *self {
            Init::Uniform { bound } => T::from_f64_lossy(rng.random_range(-bound..=bound)),
            Init::Constant(c) => T::from_f64_lossy(c),
        }
    }

    pub fn tensor<T: Scalar>(&self, shape: Vec<usize>, rng: &mut Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.sample(rng)).collect();
        Tensor::new(shape, data).expect("shape product")
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub init: Init,
    /// Frozen parameters get no gradient and are skipped by optimizers.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, init: Init) -> Self {
        Self {
            value,
            init,
            frozen: false,
        }
    }

    pub fn draw(shape: Vec<usize>, init: Init, rng: &mut Rng) -> Self {
        Self::new(init.tensor(shape, rng), init)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d<T> {
    /// `[out_channels, in_channels, kernel]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            weight: Param::draw(
                vec![out_channels, in_channels, kernel],
                Init::kaiming_uniform(fan_in),
                rng,
            ),
            bias: Param::draw(vec![out_channels], Init::bias_uniform(fan_in), rng),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(vec![channels], T::one()), Init::Constant(1.0)),
            beta: Param::new(Tensor::zeros(vec![channels]), Init::Constant(0.0)),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], T::one()),
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    /// Folds one batch's statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        let correction = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(biased_var) {
            *r = keep * *r + m * v * correction;
        }
    }

    /// Restores channel `c` to its initial state.
    pub fn reset_channel(&mut self, c: usize) {
        self.gamma.value.data_mut()[c] = T::one();
        self.beta.value.data_mut()[c] = T::zero();
        self.running_mean.data_mut()[c] = T::zero();
        self.running_var.data_mut()[c] = T::one();
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `[out_features, in_features]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::draw(vec![out_features, in_features], Init::kaiming_uniform(in_features), rng),
            bias: Param::draw(vec![out_features], Init::bias_uniform(in_features), rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }
    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// Appends `n_new` output rows drawn from the recorded initializers; existing rows are copied verbatim.
    pub fn extend_outputs(&mut self, n_new: usize, rng: &mut Rng) -> Result<()> {
        if n_new == 0 {
            return Err(Error::InvalidArgument("head extension by zero classes".into()));
        }
        let (out, inp) = (self.out_features(), self.in_features());
        let mut w = self.weight.value.data().to_vec();
        w.extend((0..n_new * inp).map(|_| self.weight.init.sample::<T>(rng)));
        let mut b = self.bias.value.data().to_vec();
        b.extend((0..n_new).map(|_| self.bias.init.sample::<T>(rng)));
        self.weight.value = Tensor::new(vec![out + n_new, inp], w)?;
        self.bias.value = Tensor::new(vec![out + n_new], b)?;
        Ok(())
    }
}

/// A hidden layer whose output units are tracked by continual backprop.
/// Conv blocks run conv -> batchnorm -> ReLU; dense blocks flatten, then linear -> ReLU.
#[derive(Clone, Debug)]
pub enum Block<T> {
    Conv {
        conv: Conv1d<T>,
        bn: Option<BatchNorm1d<T>>,
    },
    Dense {
        linear: Linear<T>,
    },
}

impl<T: Scalar> Block<T> {
    /// Number of hidden units (channels or neurons).
    pub fn units(&self) -> usize {
        match self {
            Block::Conv { conv, .. } => conv.out_channels(),
            Block::Dense { linear } => linear.out_features(),
        }
    }

    /// `(channels, length)` produced for an input of `(channels, length)`.
    pub fn output_shape(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        match self {
            Block::Conv { conv, .. } => {
                if input.0 != conv.in_channels() {
                    return Err(Error::Shape(format!(
                        "conv expects {} channels, got {}",
                        conv.in_channels(),
                        input.0
                    )));
                }
                Ok((
                    conv.out_channels(),
                    kernels::conv_out_len(input.1, conv.kernel(), conv.stride, conv.padding)?,
                ))
            }
            Block::Dense { linear } => {
                if input.0 * input.1 != linear.in_features() {
                    return Err(Error::Shape(format!(
                        "dense expects {} inputs, got {}x{}",
                        linear.in_features(),
                        input.0,
                        input.1
                    )));
                }
                Ok((linear.out_features(), 1))
            }
        }
    }

    /// Weight matrix consumed by the next layer, viewed per input unit.
    pub(crate) fn incoming_weight(&self) -> &Param<T> {
        match self {
            Block::Conv { conv, .. } => &conv.weight,
            Block::Dense { linear } => &linear.weight,
        }
    }

    pub(crate) fn incoming_weight_mut(&mut self) -> &mut Param<T> {
        match self {
            Block::Conv { conv, .. } => &mut conv.weight,
            Block::Dense { linear } => &mut linear.weight,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        match self {
            Block::Conv { conv, bn } => {
                let mut v = vec![
                    (format!("{prefix}.conv.weight"), &conv.weight),
                    (format!("{prefix}.conv.bias"), &conv.bias),
                ];
                if let Some(bn) = bn {
                    v.push((format!("{prefix}.bn.gamma"), &bn.gamma));
                    v.push((format!("{prefix}.bn.beta"), &bn.beta));
                }
                v
            }
            Block::Dense { linear } => vec![
                (format!("{prefix}.linear.weight"), &linear.weight),
                (format!("{prefix}.linear.bias"), &linear.bias),
            ],
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        match self {
            Block::Conv { conv, bn } => {
                let mut v = vec![
                    (format!("{prefix}.conv.weight"), &mut conv.weight),
                    (format!("{prefix}.conv.bias"), &mut conv.bias),
                ];
                if let Some(bn) = bn {
                    v.push((format!("{prefix}.bn.gamma"), &mut bn.gamma));
                    v.push((format!("{prefix}.bn.beta"), &mut bn.beta));
                }
                v
            }
            Block::Dense { linear } => vec![
                (format!("{prefix}.linear.weight"), &mut linear.weight),
                (format!("{prefix}.linear.bias"), &mut linear.bias),
            ],
        }
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        match self {
            Block::Conv { bn: Some(bn), .. } => vec![
                (format!("{prefix}.bn.running_mean"), &bn.running_mean),
                (format!("{prefix}.bn.running_var"), &bn.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.incoming_weight().frozen
    }

    /// Records the block on the tape. Returns the output and, for a training-mode
    /// batchnorm, the batch mean and biased variance with their element count.
    pub(crate) fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        train: bool,
        track_grad: bool,
        name: &str,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>, usize)>)> {
        let p = |g: &mut Graph<'a, T>, suffix: &str, param: &'a Param<T>| {
            if track_grad {
                g.param(format!("{name}.{suffix}"), param)
            } else {
                g.constant_param(format!("{name}.{suffix}"), param)
            }
        };
        match self {
            Block::Conv { conv, bn } => {
                let w = p(g, "conv.weight", &conv.weight);
                let b = p(g, "conv.bias", &conv.bias);
                let mut h = g.conv1d(x, w, b, conv.stride, conv.padding)?;
                let mut stats = None;
                if let Some(bn) = bn {
                    let gamma = p(g, "bn.gamma", &bn.gamma);
                    let beta = p(g, "bn.beta", &bn.beta);
                    if train && !bn.gamma.frozen {
                        let count = g.value(h).shape()[0] * g.value(h).shape()[2];
                        let (y, mean, var) = g.batchnorm_train(h, gamma, beta)?;
                        stats = Some((mean, var, count));
                        h = y;
                    } else {
                        h = g.batchnorm_eval(h, gamma, beta, bn.running_mean.data(), bn.running_var.data())?;
                    }
                }
                Ok((g.relu(h), stats))
            }
            Block::Dense { linear } => {
                let flat = g.flatten(x)?;
                let w = p(g, "linear.weight", &linear.weight);
                let b = p(g, "linear.bias", &linear.bias);
                let h = g.linear(flat, w, b)?;
                Ok((g.relu(h), None))
            }
        }
    }
}
