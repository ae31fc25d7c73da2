use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Block, Linear, Param};
use crate::nn::spec::{build_backbone, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Location of a hidden block inside a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum BlockKey {
    Shared(usize),
    Branch(usize, usize),
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKey::Shared(j) => write!(f, "shared.{j}"),
            BlockKey::Branch(i, j) => write!(f, "branch{i}.{j}"),
        }
    }
}

/// An ordered stack of hidden blocks.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub blocks: Vec<Block<T>>,
    input_shape: (usize, usize),
}

impl<T: Scalar> Sequential<T> {
    pub fn new(blocks: Vec<Block<T>>, input_shape: (usize, usize)) -> Result<Self> {
        let s = Self { blocks, input_shape };
        s.shapes()?;
        Ok(s)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    /// Output shape of every block in order.
    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut cur = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            cur = b.output_shape(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.shapes()
            .ok()
            .and_then(|s| s.last().copied())
            .unwrap_or(self.input_shape)
    }

    /// Flattened output width.
    pub fn output_width(&self) -> usize {
        let (c, l) = self.output_shape();
        c * l
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            for (_, p) in b.params_mut("") {
                p.frozen = frozen;
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.is_frozen())
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.params(""))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        mut x: Var,
        opts: ForwardOptions,
        key: impl Fn(usize) -> BlockKey,
        trace: &mut TraceSink<T>,
    ) -> Result<Var> {
        for (j, block) in self.blocks.iter().enumerate() {
            let k = key(j);
            let (y, stats) = block.forward(g, x, opts.train, opts.track_grad, &k.to_string())?;
            if let Some((mean, var, count)) = stats {
                trace.bn_stats.push(BatchStats {
                    block: k,
                    mean,
                    var,
                    count,
                });
            }
            if opts.record_activity {
                trace.activity.insert(k, mean_abs_per_unit(g.value(y)));
            }
            x = y;
        }
        Ok(x)
    }
}

fn mean_abs_per_unit<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let s = t.shape();
    let (batch, units, len) = match *s {
        [b, c, l] => (b, c, l),
        [b, c] => (b, c, 1),
        _ => return Vec::new(),
    };
    let mut out = vec![0.0; units];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let off = (b * units + c) * len;
            *acc += t.data()[off..off + len].iter().map(|v| v.as_f64().abs()).sum::<f64>();
        }
    }
    let n = (batch * len).max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Use batch statistics in unfrozen batchnorm layers.
    pub train: bool,
    /// Register trainable parameters for gradients.
    pub track_grad: bool,
    /// Record mean absolute activation of every hidden unit.
    pub record_activity: bool,
}

impl ForwardOptions {
    pub const TRAIN: Self = Self {
        train: true,
        track_grad: true,
        record_activity: false,
    };
    pub const EVAL: Self = Self {
        train: false,
        track_grad: false,
        record_activity: false,
    };
}

/// One training-mode batchnorm's batch statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub block: BlockKey,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Default)]
struct TraceSink<T> {
    bn_stats: Vec<BatchStats<T>>,
    activity: BTreeMap<BlockKey, Vec<f64>>,
}

pub struct ForwardTrace<T> {
    pub logits: Var,
    pub features: Var,
    pub bn_stats: Vec<BatchStats<T>>,
    /// Mean |activation| per unit, per hidden block.
    pub activity: BTreeMap<BlockKey, Vec<f64>>,
}

/// A classifier: optional shared block, one or more feature branches whose outputs are
/// concatenated, and a linear head over the concatenation.
///
/// A plain network has one branch. Expanded ensembles append branches; a decoupled
/// backbone puts its shallow layers in `shared`.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub shared: Option<Sequential<T>>,
    pub branches: Vec<Sequential<T>>,
    pub head: Linear<T>,
}

const EVAL_CHUNK: usize = 512;

impl<T: Scalar> Model<T> {
    /// Single full backbone plus a head of `classes` outputs.
    pub fn new(spec: &NetworkSpec, classes: usize, rng: &mut Rng) -> Result<Self> {
        let backbone = build_backbone(spec, rng)?;
        let head = Linear::new(backbone.output_width(), classes, rng);
        Self::from_parts(None, vec![backbone], head)
    }

    /// Shared generalized block, one specialized block, and a head.
    pub fn decoupled(spec: &NetworkSpec, classes: usize, rng: &mut Rng) -> Result<Self> {
        let shared = spec.build_generalized(rng)?;
        let branch = spec.build_specialized(rng)?;
        let head = Linear::new(branch.output_width(), classes, rng);
        Self::from_parts(Some(shared), vec![branch], head)
    }

    pub fn from_parts(shared: Option<Sequential<T>>, branches: Vec<Sequential<T>>, head: Linear<T>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one branch".into()));
        }
        let seam = shared.as_ref().map(|s| s.output_shape());
        for (i, b) in branches.iter().enumerate() {
            let expect = seam.unwrap_or(branches[0].input_shape());
            if b.input_shape() != expect {
                return Err(Error::Shape(format!(
                    "branch {i} expects input {:?}, upstream gives {expect:?}",
                    b.input_shape()
                )));
            }
        }
        let m = Self { shared, branches, head };
        if m.head.in_features() != m.feature_dim() {
            return Err(Error::Shape(format!(
                "head reads {} features, branches give {}",
                m.head.in_features(),
                m.feature_dim()
            )));
        }
        Ok(m)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        match &self.shared {
            Some(s) => s.input_shape(),
            None => self.branches[0].input_shape(),
        }
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.output_width()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_widths().iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    pub fn backbone_count(&self) -> usize {
        self.branches.len()
    }

    /// Appends `n_new` head outputs; old rows are untouched.
    pub fn extend_head(&mut self, n_new: usize, rng: &mut Rng) -> Result<()> {
        self.head.extend_outputs(n_new, rng)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, opts: ForwardOptions) -> Result<ForwardTrace<T>> {
        let mut sink = TraceSink::default();
        let h = match &self.shared {
            Some(s) => s.forward(g, x, opts, BlockKey::Shared, &mut sink)?,
            None => x,
        };
        let mut feats = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            let y = b.forward(g, h, opts, |j| BlockKey::Branch(i, j), &mut sink)?;
            feats.push(g.flatten(y)?);
        }
        let features = g.concat(&feats)?;
        let (w, bias) = if opts.track_grad {
            (
                g.param("head.weight", &self.head.weight),
                g.param("head.bias", &self.head.bias),
            )
        } else {
            (
                g.constant_param("head.weight", &self.head.weight),
                g.constant_param("head.bias", &self.head.bias),
            )
        };
        let logits = g.linear(features, w, bias)?;
        Ok(ForwardTrace {
            logits,
            features,
            bn_stats: sink.bn_stats,
            activity: sink.activity,
        })
    }

    fn eval_chunks(&self, x: &Tensor<T>, features: bool) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "model input must be [batch, channels, len], got {s:?}"
            )));
        }
        let per = s[1] * s[2];
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..s[0]).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(s[0]);
            let chunk = Tensor::new(vec![end - start, s[1], s[2]], x.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let xv = g.input(chunk);
            let trace = self.forward(&mut g, xv, ForwardOptions::EVAL)?;
            let v = g.value(if features { trace.features } else { trace.logits });
            width = v.shape()[1];
            out.extend_from_slice(v.data());
        }
        Tensor::new(vec![s[0], width], out)
    }

    /// Eval-mode logits `[batch, classes]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval_chunks(x, false)
    }

    /// Eval-mode concatenated features `[batch, feature_dim]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval_chunks(x, true)
    }

    /// Argmax class per row; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn block(&self, key: BlockKey) -> Option<&Block<T>> {
        match key {
            BlockKey::Shared(j) => self.shared.as_ref()?.blocks.get(j),
            BlockKey::Branch(i, j) => self.branches.get(i)?.blocks.get(j),
        }
    }

    pub fn block_mut(&mut self, key: BlockKey) -> Option<&mut Block<T>> {
        match key {
            BlockKey::Shared(j) => self.shared.as_mut()?.blocks.get_mut(j),
            BlockKey::Branch(i, j) => self.branches.get_mut(i)?.blocks.get_mut(j),
        }
    }

    /// Keys of every hidden block in network order.
    pub fn block_keys(&self) -> Vec<BlockKey> {
        let mut keys = Vec::new();
        if let Some(s) = &self.shared {
            keys.extend((0..s.blocks.len()).map(BlockKey::Shared));
        }
        for (i, b) in self.branches.iter().enumerate() {
            keys.extend((0..b.blocks.len()).map(|j| BlockKey::Branch(i, j)));
        }
        keys
    }

    /// All trainable tensors with their names, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        if let Some(s) = &self.shared {
            for (j, b) in s.blocks.iter().enumerate() {
                v.extend(b.params(&BlockKey::Shared(j).to_string()));
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            for (j, b) in br.blocks.iter().enumerate() {
                v.extend(b.params(&BlockKey::Branch(i, j).to_string()));
            }
        }
        v.push(("head.weight".into(), &self.head.weight));
        v.push(("head.bias".into(), &self.head.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        if let Some(s) = &mut self.shared {
            for (j, b) in s.blocks.iter_mut().enumerate() {
                v.extend(b.params_mut(&BlockKey::Shared(j).to_string()));
            }
        }
        for (i, br) in self.branches.iter_mut().enumerate() {
            for (j, b) in br.blocks.iter_mut().enumerate() {
                v.extend(b.params_mut(&BlockKey::Branch(i, j).to_string()));
            }
        }
        v.push(("head.weight".into(), &mut self.head.weight));
        v.push(("head.bias".into(), &mut self.head.bias));
        v
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.block_keys()
            .into_iter()
            .flat_map(|k| self.block(k).map(|b| b.buffers(&k.to_string())).unwrap_or_default())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Folds training-mode batch statistics into running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        for s in stats {
            if let Some(Block::Conv { bn: Some(bn), .. }) = self.block_mut(s.block) {
                bn.update_running(&s.mean, &s.var, s.count);
            }
        }
    }

    /// Name of the last conv layer's kernel in branch `branch`, if any.
    pub fn last_conv_in_branch(&self, branch: usize) -> Option<(BlockKey, String)> {
        let br = self.branches.get(branch)?;
        let j = br.blocks.iter().rposition(|b| matches!(b, Block::Conv { .. }));
        match j {
            Some(j) => Some((
                BlockKey::Branch(branch, j),
                format!("{}.conv.weight", BlockKey::Branch(branch, j)),
            )),
            None => {
                let s = self.shared.as_ref()?;
                let j = s.blocks.iter().rposition(|b| matches!(b, Block::Conv { .. }))?;
                Some((BlockKey::Shared(j), format!("{}.conv.weight", BlockKey::Shared(j))))
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_spec() -> NetworkSpec {
        let mut s = NetworkSpec::scaled(16);
        s.fc_units = 8;
        s
    }

    fn probe(rng_seed: u64, batch: usize, len: usize) -> Tensor<f64> {
        use rand::Rng as _;
        let mut rng = stream(rng_seed, "probe");
        Tensor::new(
            vec![batch, 1, len],
            (0..batch * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn extend_head_preserves_old_logits() {
        let mut rng = stream(1, "init");
        let mut m: Model<f64> = Model::new(&tiny_spec(), 5, &mut rng).unwrap();
        let x = probe(2, 3, 128);
        let before = m.logits(&x).unwrap();
        m.extend_head(5, &mut rng).unwrap();
        let after = m.logits(&x).unwrap();
        assert_eq!(after.shape(), &[3, 10]);
        for r in 0..3 {
            assert_eq!(&before.data()[r * 5..r * 5 + 5], &after.data()[r * 10..r * 10 + 5]);
        }
        assert!(m.extend_head(0, &mut rng).is_err());
    }

    #[test]
    fn head_grows_per_task() {
        let mut rng = stream(1, "init");
        let mut m: Model<f32> = Model::new(&tiny_spec(), 5, &mut rng).unwrap();
        let mut sizes = vec![m.num_classes()];
        for _ in 0..4 {
            m.extend_head(5, &mut rng).unwrap();
            sizes.push(m.num_classes());
        }
        assert_eq!(sizes, vec![5, 10, 15, 20, 25]);
    }

    #[test]
    fn decoupled_model_has_same_length_profile() {
        let mut rng = stream(1, "init");
        let m: Model<f64> = Model::decoupled(&tiny_spec(), 5, &mut rng).unwrap();
        assert_eq!(m.shared.as_ref().unwrap().blocks.len(), 7);
        assert_eq!(m.branches[0].blocks.len(), 2);
        assert_eq!(m.feature_dim(), 8);
        let whole: Model<f64> = Model::new(&tiny_spec(), 5, &mut rng).unwrap();
        assert_eq!(whole.parameter_count(), m.parameter_count());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = NetworkSpec::reference();
        let mut rng = stream(1, "init");
        let m: Model<f32> = Model::new(&spec, 25, &mut rng).unwrap();
        let mut expect = 0;
        let mut cin = 1;
        for c in &spec.convs {
            expect += c.kernel * cin * c.out_channels + c.out_channels + 2 * c.out_channels;
            cin = c.out_channels;
        }
        expect += 2048 * 256 + 256 + 256 * 25 + 25;
        assert_eq!(m.parameter_count(), expect);
        assert_eq!(spec.parameter_count(25).unwrap(), expect);
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let mut rng = stream(9, "init");
        let m: Model<f64> = Model::new(&tiny_spec(), 7, &mut rng).unwrap();
        let logits = m.logits(&probe(3, 4, 128)).unwrap();
        let p = crate::kernels::softmax_rows(logits.data(), 7, 1.0);
        for row in p.chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
