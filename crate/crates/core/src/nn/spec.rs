use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::nn::layers::{BatchNorm1d, Block, Conv1d, Linear};
use crate::nn::model::Sequential;
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv1d,
    BatchNorm1d,
    Relu,
    Linear,
    Softmax,
}

/// One entry of the flattened layer list, with the shape it produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output length along the spectral axis (1 for dense layers).
    pub out_len: usize,
}

/// Backbone description: a stack of conv blocks followed by one hidden dense layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_len: usize,
    pub convs: Vec<ConvSpec>,
    pub fc_units: usize,
    pub batchnorm: bool,
    /// Number of leading conv blocks that form the shared (generalized) block of a
    /// decoupled backbone; the rest plus the dense layer form the specialized block.
    pub shared_convs: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetworkSpec {
    /// The full-width 8-conv backbone: kernel 4 throughout, stride 1 for the first
    /// three layers then 2, channels 32..2048, dense 256.
    pub fn reference() -> Self {
        let channels = [32, 64, 96, 128, 256, 512, 1024, 2048];
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvSpec {
                kernel: 4,
                stride: if i < 3 { 1 } else { 2 },
                padding: 0,
                out_channels: c,
            })
            .collect();
        Self {
            input_channels: 1,
            input_len: 128,
            convs,
            fc_units: 256,
            batchnorm: true,
            shared_convs: 7,
        }
    }

    /// The reference spec with every conv width divided by `divisor` (at least 1 channel).
    pub fn scaled(divisor: usize) -> Self {
        let mut s = Self::reference();
        for c in &mut s.convs {
            c.out_channels = (c.out_channels / divisor.max(1)).max(1);
        }
        s
    }

    /// Conv block output shapes `(channels, length)`, validated.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>> {
        if self.input_channels == 0 || self.fc_units == 0 {
            return Err(Error::InvalidArgument(
                "channel and unit counts must be positive".into(),
            ));
        }
        let mut len = self.input_len;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            if c.out_channels == 0 {
                return Err(Error::InvalidArgument(format!("conv {i} has zero channels")));
            }
            len = conv_out_len(len, c.kernel, c.stride, c.padding).map_err(|_| Error::EmptyExtent {
                layer: format!("conv{i}"),
                length: (len as i64 + 2 * c.padding as i64 - c.kernel as i64).div_euclid(c.stride.max(1) as i64) + 1,
            })?;
            out.push((c.out_channels, len));
        }
        Ok(out)
    }

    /// Width of the flattened conv output feeding the dense layer.
    pub fn flat_features(&self) -> Result<usize> {
        let shapes = self.conv_shapes()?;
        Ok(shapes
            .last()
            .map(|&(c, l)| c * l)
            .unwrap_or(self.input_channels * self.input_len))
    }

    /// Flattened layer list: conv, batchnorm, relu per block, then linear, relu,
    /// and the classification head of `classes` outputs with its softmax.
    pub fn layer_specs(&self, classes: usize) -> Result<Vec<LayerSpec>> {
        let shapes = self.conv_shapes()?;
        let mut layers = Vec::new();
        let mut in_ch = self.input_channels;
        for (c, &(ch, len)) in self.convs.iter().zip(&shapes) {
            layers.push(LayerSpec {
                kind: LayerKind::Conv1d,
                kernel_size: c.kernel,
                stride: c.stride,
                padding: c.padding,
                in_channels: in_ch,
                out_channels: ch,
                out_len: len,
            });
            let passthrough = |kind| LayerSpec {
                kind,
                kernel_size: 0,
                stride: 0,
                padding: 0,
                in_channels: ch,
                out_channels: ch,
                out_len: len,
            };
            if self.batchnorm {
                layers.push(passthrough(LayerKind::BatchNorm1d));
            }
            layers.push(passthrough(LayerKind::Relu));
            in_ch = ch;
        }
        let flat = self.flat_features()?;
        let dense = |kind, i, o| LayerSpec {
            kind,
            kernel_size: 0,
            stride: 0,
            padding: 0,
            in_channels: i,
            out_channels: o,
            out_len: 1,
        };
        layers.push(dense(LayerKind::Linear, flat, self.fc_units));
        layers.push(dense(LayerKind::Relu, self.fc_units, self.fc_units));
        layers.push(dense(LayerKind::Linear, self.fc_units, classes));
        layers.push(dense(LayerKind::Softmax, classes, classes));
        Ok(layers)
    }

    /// Trainable parameter count of the backbone plus a head of `classes` outputs,
    /// summed from the layer list.
    pub fn parameter_count(&self, classes: usize) -> Result<usize> {
        Ok(self
            .layer_specs(classes)?
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv1d => l.kernel_size * l.in_channels * l.out_channels + l.out_channels,
                LayerKind::BatchNorm1d => 2 * l.out_channels,
                LayerKind::Linear => l.in_channels * l.out_channels + l.out_channels,
                LayerKind::Relu | LayerKind::Softmax => 0,
            })
            .sum())
    }

    fn conv_blocks<T: Scalar>(&self, range: std::ops::Range<usize>, rng: &mut Rng) -> Result<Vec<Block<T>>> {
        self.conv_shapes()?;
        let mut blocks = Vec::new();
        for i in range {
            let c = self.convs[i];
            let in_ch = if i == 0 {
                self.input_channels
            } else {
                self.convs[i - 1].out_channels
            };
            blocks.push(Block::Conv {
                conv: Conv1d::new(in_ch, c.out_channels, c.kernel, c.stride, c.padding, rng),
                bn: self.batchnorm.then(|| BatchNorm1d::new(c.out_channels)),
            });
        }
        Ok(blocks)
    }

    fn dense_block<T: Scalar>(&self, rng: &mut Rng) -> Result<Block<T>> {
        Ok(Block::Dense {
            linear: Linear::new(self.flat_features()?, self.fc_units, rng),
        })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.input_channels, self.input_len)
    }

    /// Shared (generalized) part of a decoupled backbone.
    pub fn build_generalized<T: Scalar>(&self, rng: &mut Rng) -> Result<Sequential<T>> {
        let split = self.shared_convs.min(self.convs.len());
        Sequential::new(self.conv_blocks(0..split, rng)?, self.input_shape())
    }

    /// Specialized part of a decoupled backbone: remaining convs and the dense layer.
    pub fn build_specialized<T: Scalar>(&self, rng: &mut Rng) -> Result<Sequential<T>> {
        let split = self.shared_convs.min(self.convs.len());
        let input = if split == 0 {
            self.input_shape()
        } else {
            self.conv_shapes()?[split - 1]
        };
        let mut blocks = self.conv_blocks(split..self.convs.len(), rng)?;
        blocks.push(self.dense_block(rng)?);
        Sequential::new(blocks, input)
    }
}

/// Full feature extractor: every conv block followed by the dense layer.
pub fn build_backbone<T: Scalar>(spec: &NetworkSpec, rng: &mut Rng) -> Result<Sequential<T>> {
    let mut blocks = spec.conv_blocks(0..spec.convs.len(), rng)?;
    blocks.push(spec.dense_block(rng)?);
    Sequential::new(blocks, spec.input_shape())
}
