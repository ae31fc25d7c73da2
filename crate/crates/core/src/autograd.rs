//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed rather than copied, so the graph lives only as long as the model
//! it reads from. [`Graph::backward`] consumes the tape and returns one
//! gradient per registered trainable parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormCache, ConvGeometry};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a, T> {
    Borrowed(&'a Tensor<T>),
    Owned(Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op<T> {
    Input,
    Param(String),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    /// Soft-target cross-entropy or KL over the leading `cols` logits.
    SoftTarget {
        logits: Var,
        cols: usize,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
        temperature: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of trainable parameters, keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

pub struct Graph<'a, T> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Value<'a, T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Value::Owned(t), Op::Input, false)
    }

    /// Registers a parameter leaf. Frozen parameters do not require a gradient.
    pub fn param(&mut self, name: impl Into<String>, p: &'a Param<T>) -> Var {
        let trainable = !p.frozen;
        self.push(Value::Borrowed(&p.value), Op::Param(name.into()), trainable)
    }

    /// Parameter leaf that never requires a gradient regardless of its frozen flag.
    pub fn constant_param(&mut self, name: impl Into<String>, p: &'a Param<T>) -> Var {
        self.push(Value::Borrowed(&p.value), Op::Param(name.into()), false)
    }

    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || self.value(bias).len() != ws[0] {
            return Err(Error::Shape(format!("conv1d input {xs:?} with weight {ws:?}")));
        }
        let out_len = kernels::conv_out_len(xs[2], ws[2], stride, padding)?;
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            in_len: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
            out_len,
        };
        let (out, cols) = kernels::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geometry,
        );
        let requires = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![xs[0], ws[0], out_len], out)?;
        let cols = if requires { cols } else { Vec::new() };
        Ok(self.push(
            Value::Owned(value),
            Op::Conv1d {
                input,
                weight,
                bias,
                geometry,
                cols,
            },
            requires,
        ))
    }

    fn bn_dims(&self, input: Var, gamma: Var) -> Result<(usize, usize, usize)> {
        let s = self.value(input).shape();
        let (b, c, l) = match *s {
            [b, c, l] => (b, c, l),
            [b, c] => (b, c, 1),
            _ => return Err(Error::Shape(format!("batchnorm input {s:?}"))),
        };
        if self.value(gamma).len() != c {
            return Err(Error::Shape(format!(
                "batchnorm with {c} channels, gamma {:?}",
                self.value(gamma).shape()
            )));
        }
        Ok((b, c, l))
    }

    /// Batch norm using the current batch's statistics. Returns the node and the batch mean/biased variance.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, l) = self.bn_dims(input, gamma)?;
        let (y, cache) = kernels::batchnorm_train_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            b,
            c,
            l,
        );
        let (mean, var) = (cache.mean.clone(), cache.var.clone());
        let requires = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(input).shape().to_vec();
        let v = self.push(
            Value::Owned(Tensor::new(shape, y)?),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            },
            requires,
        );
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (b, c, l) = self.bn_dims(input, gamma)?;
        let (y, xhat) = kernels::batchnorm_eval_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            b,
            c,
            l,
        );
        let eps = T::from_f64_lossy(kernels::BN_EPS);
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let requires = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(
            Value::Owned(Tensor::new(shape, y)?),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat: if requires { xhat } else { Vec::new() },
                inv_std,
            },
            requires,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let requires = self.needs(input);
        self.push(Value::Owned(y), Op::Relu { input }, requires)
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() == 2 {
            return Ok(input);
        }
        let rows = s[0];
        let width = s[1..].iter().product();
        let y = self.value(input).clone().reshape(vec![rows, width])?;
        let requires = self.needs(input);
        Ok(self.push(Value::Owned(y), Op::Reshape { input }, requires))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.value(bias).len() != ws[0] {
            return Err(Error::Shape(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let y = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            xs[1],
            ws[0],
        );
        let requires = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Value::Owned(Tensor::new(vec![xs[0], ws[0]], y)?),
            Op::Linear { input, weight, bias },
            requires,
        ))
    }

    /// Concatenates 2-D inputs along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("concat of no inputs".into()));
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let rows = self.value(inputs[0]).shape()[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat operand {s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let requires = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Value::Owned(Tensor::new(vec![rows, total], out)?),
            Op::Concat {
                inputs: inputs.iter().copied().zip(widths).collect(),
            },
            requires,
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross entropy logits {s:?} with {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::InvalidArgument(format!("target {bad} outside {} classes", s[1])));
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), s[1], T::one());
        let mut total = T::zero();
        for (row, &t) in logp.chunks(s[1]).zip(targets) {
            total -= row[t];
        }
        let loss = total / T::from_usize(s[0]).unwrap();
        let probs = logp.iter().map(|v| v.exp()).collect();
        let requires = self.needs(logits);
        Ok(self.push(
            Value::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            requires,
        ))
    }

    fn soft_target(
        &mut self,
        logits: Var,
        teacher_probs: Vec<T>,
        cols: usize,
        temperature: T,
        kl: bool,
    ) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || cols == 0 || cols > s[1] || teacher_probs.len() != s[0] * cols || s[0] == 0 {
            return Err(Error::Shape(format!(
                "soft target over {cols} columns of {s:?} with {} teacher values",
                teacher_probs.len()
            )));
        }
        let lead = kernels::leading_columns(self.value(logits).data(), s[1], cols);
        let logp = kernels::log_softmax_rows(&lead, cols, temperature);
        let mut total = T::zero();
        for (&pt, &lp) in teacher_probs.iter().zip(&logp) {
            if pt > T::zero() {
                total -= pt * lp;
                if kl {
                    total += pt * pt.ln();
                }
            }
        }
        let loss = total / T::from_usize(s[0]).unwrap();
        let requires = self.needs(logits);
        Ok(self.push(
            Value::Owned(Tensor::scalar(loss)),
            Op::SoftTarget {
                logits,
                cols,
                student_probs: logp.iter().map(|v| v.exp()).collect(),
                teacher_probs,
                temperature,
            },
            requires,
        ))
    }

    /// Mean over the batch of `-sum_k p_k log q_k`, with `q = softmax(logits[:, :cols] / T)`.
    ///
    /// `teacher_probs` is `[batch, cols]`, already softened with the same temperature.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        teacher_probs: Vec<T>,
        cols: usize,
        temperature: T,
    ) -> Result<Var> {
        self.soft_target(logits, teacher_probs, cols, temperature, false)
    }

    /// Mean over the batch of `KL(p || softmax(logits / T))`.
    pub fn kl_divergence(&mut self, logits: Var, teacher_probs: Vec<T>, temperature: T) -> Result<Var> {
        let cols = *self.value(logits).shape().last().unwrap_or(&0);
        self.soft_target(logits, teacher_probs, cols, temperature, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let requires = self.needs(a) || self.needs(b);
        Ok(self.push(Value::Owned(t), Op::Add { a, b }, requires))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let t = self.value(input).map(|v| v * factor);
        let requires = self.needs(input);
        self.push(Value::Owned(t), Op::Scale { input, factor }, requires)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        // Sum as a linear map against a ones vector keeps the op set small.
        let n = self.value(input).len();
        let flat = self.value(input).clone().reshape(vec![1, n])?;
        let x = self.push(Value::Owned(flat), Op::Reshape { input }, self.needs(input));
        let ones = self.input(Tensor::filled(vec![1, n], T::one()));
        let zero = self.input(Tensor::zeros(vec![1]));
        let y = self.linear(x, ones, zero)?;
        let s = self.value(y).clone().reshape(vec![])?;
        let requires = self.needs(y);
        Ok(self.push(Value::Owned(s), Op::Reshape { input: y }, requires))
    }

    /// On/off state of every ReLU on the tape, in recording order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                out.extend(self.value(input).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Propagates from a scalar `loss`. Each trainable parameter leaf gets a gradient;
    /// leaves registered under the same name are summed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let emit = |v: Var, d: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(d).for_each(|(a, x)| *a += x),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    let shape = node.value.get().shape().to_vec();
                    let t = Tensor::new(shape, g)?;
                    match out.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &x)| *a += x),
                        None => {
                            out.insert(name.clone(), t);
                        }
                    }
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    geometry,
                    cols,
                } => {
                    let need_params = self.needs(*weight) || self.needs(*bias);
                    let r = kernels::conv1d_backward(
                        &g,
                        cols,
                        self.value(*weight).data(),
                        geometry,
                        self.needs(*input),
                        need_params,
                    );
                    if let Some(d) = r.input {
                        emit(*input, d, &mut grads);
                    }
                    if let Some(d) = r.weight {
                        emit(*weight, d, &mut grads);
                    }
                    if let Some(d) = r.bias {
                        emit(*bias, d, &mut grads);
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (b, c, l) = self.bn_dims(*input, *gamma)?;
                    let r = kernels::batchnorm_train_backward(
                        &g,
                        cache,
                        self.value(*gamma).data(),
                        b,
                        c,
                        l,
                        self.needs(*input),
                    );
                    if let Some(d) = r.input {
                        emit(*input, d, &mut grads);
                    }
                    emit(*gamma, r.gamma, &mut grads);
                    emit(*beta, r.beta, &mut grads);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (b, c, l) = self.bn_dims(*input, *gamma)?;
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * l;
                            for i in off..off + l {
                                dx[i] = g[i] * gam[ch] * inv_std[ch];
                                dbeta[ch] += g[i];
                                if !xhat.is_empty() {
                                    dgamma[ch] += g[i] * xhat[i];
                                }
                            }
                        }
                    }
                    emit(*input, dx, &mut grads);
                    emit(*gamma, dgamma, &mut grads);
                    emit(*beta, dbeta, &mut grads);
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    emit(*input, d, &mut grads);
                }
                Op::Reshape { input } => emit(*input, g, &mut grads),
                Op::Linear { input, weight, bias } => {
                    let xs = self.value(*input).shape();
                    let outputs = self.value(*weight).shape()[0];
                    let r = kernels::linear_backward(
                        &g,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        xs[0],
                        xs[1],
                        outputs,
                        self.needs(*input),
                        self.needs(*weight) || self.needs(*bias),
                    );
                    if let Some(d) = r.input {
                        emit(*input, d, &mut grads);
                    }
                    if let Some(d) = r.weight {
                        emit(*weight, d, &mut grads);
                    }
                    if let Some(d) = r.bias {
                        emit(*bias, d, &mut grads);
                    }
                }
                Op::Concat { inputs } => {
                    let total: usize = inputs.iter().map(|&(_, w)| w).sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &(v, w) in inputs {
                        if self.needs(v) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            emit(v, d, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, probs, targets } => {
                    let width = probs.len() / targets.len();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * width + t] -= scale;
                    }
                    emit(*logits, d, &mut grads);
                }
                Op::SoftTarget {
                    logits,
                    cols,
                    student_probs,
                    teacher_probs,
                    temperature,
                } => {
                    let width = self.value(*logits).shape()[1];
                    let rows = student_probs.len() / cols;
                    let scale = g[0] / (T::from_usize(rows).unwrap() * *temperature);
                    let mut d = vec![T::zero(); rows * width];
                    for r in 0..rows {
                        let mut teacher_mass = T::zero();
                        for k in 0..*cols {
                            teacher_mass += teacher_probs[r * cols + k];
                        }
                        for k in 0..*cols {
                            let i = r * cols + k;
                            d[r * width + k] = scale * (teacher_mass * student_probs[i] - teacher_probs[i]);
                        }
                    }
                    emit(*logits, d, &mut grads);
                }
                Op::Add { a, b } => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::Scale { input, factor } => {
                    let d = g.iter().map(|&v| v * *factor).collect();
                    emit(*input, d, &mut grads);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Param};

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Param<f64> {
        Param::new(Tensor::new(shape, data).unwrap(), Init::Constant(0.0))
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let w = param(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
        let mut g = Graph::new();
        let v = g.param("w", &w);
        let s = g.sum(v).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["w"].data(), &[1.0; 6]);
        assert_eq!(grads["w"].shape(), &[2, 3]);
    }

    #[test]
    fn uniform_logit_cross_entropy_gradient_is_closed_form() {
        let (batch, classes) = (4, 5);
        let logits = param(vec![batch, classes], vec![0.3; batch * classes]);
        let targets = vec![0, 3, 4, 3];
        let mut g = Graph::new();
        let z = g.param("z", &logits);
        let loss = g.cross_entropy(z, &targets).unwrap();
        assert!((g.value(loss).data()[0] - (classes as f64).ln()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        for r in 0..batch {
            for c in 0..classes {
                let onehot = if targets[r] == c { 1.0 } else { 0.0 };
                let expect = (1.0 / classes as f64 - onehot) / batch as f64;
                assert!((grads["z"].data()[r * classes + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let w = param(vec![1], vec![1.0]);
        let mut g = Graph::new();
        let v = g.param("w", &w);
        let s = g.sum(v).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let w = param(vec![2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.param("w", &w);
        assert!(matches!(g.backward(v), Err(Error::NotScalar(_))));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut w = param(vec![1, 2], vec![1.0, 2.0]);
        w.frozen = true;
        let x = param(vec![1, 2], vec![0.5, 0.5]);
        let b = param(vec![1], vec![0.0]);
        let mut g = Graph::new();
        let xv = g.param("x", &x);
        let wv = g.param("w", &w);
        let bv = g.param("b", &b);
        let y = g.linear(xv, wv, bv).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.contains_key("w"));
        assert_eq!(grads["x"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_temperature_rejects_nonpositive() {
        let z = param(vec![1, 2], vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.param("z", &z);
        assert!(g.soft_cross_entropy(v, vec![0.5, 0.5], 2, 0.0).is_err());
    }
}
