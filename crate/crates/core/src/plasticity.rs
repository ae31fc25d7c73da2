//! Continual backpropagation: per-unit utility, maturity and selective reinitialization.
//!
//! A unit is an output channel of a conv block or a neuron of a dense block. Its
//! outgoing weights are the downstream weights that read it: the next conv kernel
//! slice, the matching flatten columns of a dense layer, or the head columns at the
//! branch's feature offset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockKey, Model, Param};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Maturity threshold that no unit ever exceeds.
pub const NEVER_MATURE: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbConfig {
    pub enabled: bool,
    /// Replacement rate: fraction of mature units replaced per update.
    pub rho: f64,
    /// Maturity threshold in updates; units with `age > maturity` are eligible.
    pub maturity: u64,
    /// Utility decay.
    pub eta: f64,
}

impl Default for CbConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rho: 0.001,
            maturity: 2000,
            eta: 0.99,
        }
    }
}

impl CbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("replacement rate {} outside [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("utility decay {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Which hidden blocks a strategy exposes to continual backprop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbTarget {
    /// Every hidden block; the head is never a target.
    AllButHead,
    /// Blocks of the most recently added branch.
    NewestBackbone,
    /// Every hidden block of the distilled single-backbone student.
    Student,
    /// The shared block feeding all specialized branches.
    Generalized,
}

impl CbTarget {
    pub fn for_strategy(name: &str) -> Result<Self> {
        Ok(match name {
            "finetune" | "ewc" | "lwf" | "replay" | "icarl" | "wa" | "retrain" => CbTarget::AllButHead,
            "der" => CbTarget::NewestBackbone,
            "foster" => CbTarget::Student,
            "memo" => CbTarget::Generalized,
            other => return Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        })
    }
}

pub fn select_cb_target<T: Scalar>(target: CbTarget, model: &Model<T>) -> Result<Vec<BlockKey>> {
    let keys: Vec<BlockKey> = match target {
        CbTarget::AllButHead | CbTarget::Student => model.block_keys(),
        CbTarget::NewestBackbone => {
            let i = model.branches.len() - 1;
            (0..model.branches[i].blocks.len())
                .map(|j| BlockKey::Branch(i, j))
                .collect()
        }
        CbTarget::Generalized => model
            .shared
            .as_ref()
            .map(|s| (0..s.blocks.len()).map(BlockKey::Shared).collect())
            .unwrap_or_default(),
    };
    if keys.is_empty() {
        return Err(Error::InvalidArgument(format!("{target:?} selects no layers")));
    }
    Ok(keys)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerUtility {
    pub utility: Vec<f64>,
    pub age: Vec<u64>,
    pub accumulator: f64,
}

impl LayerUtility {
    fn new(units: usize) -> Self {
        Self {
            utility: vec![0.0; units],
            age: vec![0; units],
            accumulator: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityState {
    pub eta: f64,
    pub layers: BTreeMap<BlockKey, LayerUtility>,
}

/// Units reinitialized in one layer by one [`cb_step`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Replacement {
    pub layer: BlockKey,
    pub units: Vec<usize>,
}

impl UtilityState {
    pub fn new<T: Scalar>(model: &Model<T>, keys: &[BlockKey], eta: f64) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for &k in keys {
            let block = model
                .block(k)
                .ok_or_else(|| Error::InvalidArgument(format!("no block {k}")))?;
            layers.insert(k, LayerUtility::new(block.units()));
        }
        Ok(Self { eta, layers })
    }

    /// Keeps the state of layers still in `keys`, starts fresh ones for new keys, drops the rest.
    pub fn retarget<T: Scalar>(&mut self, model: &Model<T>, keys: &[BlockKey]) -> Result<()> {
        let mut fresh = Self::new(model, keys, self.eta)?;
        for (k, l) in fresh.layers.iter_mut() {
            if let Some(old) = self.layers.remove(k) {
                if old.utility.len() == l.utility.len() {
                    *l = old;
                }
            }
        }
        *self = fresh;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Consumer {
    /// Next conv block reads input channel `unit`.
    Conv(BlockKey),
    /// Dense block reads flatten columns `unit * len .. (unit + 1) * len`.
    Dense(BlockKey, usize),
    /// Head reads columns `offset + unit * len ..`.
    Head(usize, usize),
}

fn consumers<T: Scalar>(model: &Model<T>, key: BlockKey) -> Result<Vec<Consumer>> {
    let missing = || Error::InvalidArgument(format!("no block {key}"));
    let next_of = |k: BlockKey, len: usize| -> Result<Consumer> {
        match model.block(k).ok_or_else(missing)? {
            Block::Conv { .. } => Ok(Consumer::Conv(k)),
            Block::Dense { .. } => Ok(Consumer::Dense(k, len)),
        }
    };
    match key {
        BlockKey::Shared(j) => {
            let shared = model.shared.as_ref().ok_or_else(missing)?;
            let len = shared.shapes()?.get(j).ok_or_else(missing)?.1;
            if j + 1 < shared.blocks.len() {
                Ok(vec![next_of(BlockKey::Shared(j + 1), len)?])
            } else {
                (0..model.branches.len())
                    .map(|i| next_of(BlockKey::Branch(i, 0), len))
                    .collect()
            }
        }
        BlockKey::Branch(i, j) => {
            let branch = model.branches.get(i).ok_or_else(missing)?;
            let len = branch.shapes()?.get(j).ok_or_else(missing)?.1;
            if j + 1 < branch.blocks.len() {
                Ok(vec![next_of(BlockKey::Branch(i, j + 1), len)?])
            } else {
                let offset = model.feature_widths()[..i].iter().sum();
                Ok(vec![Consumer::Head(offset, len)])
            }
        }
    }
}

fn consumer_weight<'m, T: Scalar>(model: &'m Model<T>, c: &Consumer) -> &'m Param<T> {
    match *c {
        Consumer::Conv(k) | Consumer::Dense(k, _) => model.block(k).expect("consumer exists").incoming_weight(),
        Consumer::Head(..) => &model.head.weight,
    }
}

/// Visits every outgoing-weight index of `unit` through `c`, as offsets into the weight data.
fn for_each_outgoing(shape: &[usize], c: &Consumer, unit: usize, mut f: impl FnMut(usize)) {
    match (*c, shape) {
        (Consumer::Conv(_), &[out, inp, k]) => {
            for o in 0..out {
                let base = (o * inp + unit) * k;
                (base..base + k).for_each(&mut f);
            }
        }
        (Consumer::Dense(_, len), &[out, inp]) => {
            for o in 0..out {
                let base = o * inp + unit * len;
                (base..base + len).for_each(&mut f);
            }
        }
        (Consumer::Head(offset, len), &[out, inp]) => {
            for o in 0..out {
                let base = o * inp + offset + unit * len;
                (base..base + len).for_each(&mut f);
            }
        }
        _ => unreachable!("consumer weight rank"),
    }
}

/// `Σ|w|` over each unit's outgoing weights.
pub fn outgoing_abs_sums<T: Scalar>(model: &Model<T>, key: BlockKey) -> Result<Vec<f64>> {
    let units = model
        .block(key)
        .ok_or_else(|| Error::InvalidArgument(format!("no block {key}")))?
        .units();
    let mut sums = vec![0.0; units];
    for c in consumers(model, key)? {
        let w = &consumer_weight(model, &c).value;
        for (u, s) in sums.iter_mut().enumerate() {
            for_each_outgoing(w.shape(), &c, u, |i| *s += w.data()[i].as_f64().abs());
        }
    }
    Ok(sums)
}

/// Zeroes every outgoing weight of `unit`.
pub fn zero_outgoing<T: Scalar>(model: &mut Model<T>, key: BlockKey, unit: usize) -> Result<()> {
    for c in consumers(model, key)? {
        let w = match c {
            Consumer::Conv(k) | Consumer::Dense(k, _) => {
                model.block_mut(k).expect("consumer exists").incoming_weight_mut()
            }
            Consumer::Head(..) => &mut model.head.weight,
        };
        let shape = w.value.shape().to_vec();
        let data = w.value.data_mut();
        for_each_outgoing(&shape, &c, unit, |i| data[i] = T::zero());
    }
    Ok(())
}

fn has_frozen_consumer<T: Scalar>(model: &Model<T>, key: BlockKey) -> Result<bool> {
    Ok(consumers(model, key)?.iter().any(|c| consumer_weight(model, c).frozen))
}

/// One utility update per optimizer step. `activity` holds mean |h| per unit for each
/// hidden block, as recorded by the training forward pass. Ages advance by one.
pub fn update_utility<T: Scalar>(
    state: &mut UtilityState,
    model: &Model<T>,
    activity: &BTreeMap<BlockKey, Vec<f64>>,
) -> Result<()> {
    let eta = state.eta;
    for (&key, layer) in state.layers.iter_mut() {
        let h = activity
            .get(&key)
            .ok_or_else(|| Error::InvalidArgument(format!("no activity recorded for {key}")))?;
        let w = outgoing_abs_sums(model, key)?;
        if h.len() != layer.utility.len() || w.len() != layer.utility.len() {
            return Err(Error::Shape(format!(
                "utility of {key} tracks {} units",
                layer.utility.len()
            )));
        }
        for ((u, &hv), &wv) in layer.utility.iter_mut().zip(h).zip(&w) {
            *u = eta * *u + (1.0 - eta) * hv * wv;
        }
        for a in layer.age.iter_mut() {
            *a = a.saturating_add(1);
        }
    }
    Ok(())
}

fn reinit_unit<T: Scalar>(block: &mut Block<T>, unit: usize, rng: &mut Rng) {
    let mut redraw = |p: &mut Param<T>| {
        let per = p.value.len() / p.value.shape()[0];
        let init = p.init;
        for v in &mut p.value.data_mut()[unit * per..(unit + 1) * per] {
            *v = init.sample(rng);
        }
    };
    match block {
        Block::Conv { conv, bn } => {
            redraw(&mut conv.weight);
            redraw(&mut conv.bias);
            if let Some(bn) = bn {
                bn.reset_channel(unit);
            }
        }
        Block::Dense { linear } => {
            redraw(&mut linear.weight);
            redraw(&mut linear.bias);
        }
    }
}

/// Replaces the lowest-utility mature units of every tracked layer.
///
/// Per layer: `accumulator += rho * mature`, `n = min(floor(accumulator), mature)`,
/// `accumulator -= n`. Selection is by ascending `(utility, unit)`. Layers whose
/// outgoing weights feed a frozen component are left alone.
pub fn cb_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut UtilityState,
    rho: f64,
    maturity: u64,
    rng: &mut Rng,
) -> Result<Vec<Replacement>> {
    let mut report = Vec::new();
    if rho == 0.0 || maturity == NEVER_MATURE {
        return Ok(report);
    }
    for (&key, layer) in state.layers.iter_mut() {
        let frozen_self = model.block(key).map(|b| b.is_frozen()).unwrap_or(true);
        if frozen_self || has_frozen_consumer(model, key)? {
            continue;
        }
        let mut mature: Vec<usize> = (0..layer.age.len()).filter(|&u| layer.age[u] > maturity).collect();
        if mature.is_empty() {
            continue;
        }
        layer.accumulator += rho * mature.len() as f64;
        let n = (layer.accumulator.floor() as usize).min(mature.len());
        layer.accumulator -= n as f64;
        if n == 0 {
            continue;
        }
        mature.sort_by(|&a, &b| layer.utility[a].total_cmp(&layer.utility[b]).then(a.cmp(&b)));
        let mut units: Vec<usize> = mature[..n].to_vec();
        units.sort_unstable();
        for &u in &units {
            reinit_unit(model.block_mut(key).expect("tracked block"), u, rng);
            zero_outgoing(model, key, u)?;
            layer.utility[u] = 0.0;
            layer.age[u] = 0;
        }
        report.push(Replacement { layer: key, units });
    }
    Ok(report)
}
