use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ewc::EwcState;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix, Scores};
use crate::nn::{Adam, AdamConfig, ForwardOptions, Model};
use crate::plasticity::{cb_step, update_utility, CbConfig, UtilityState};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cb: CbConfig,
    /// Keep a digest of every parameter after every optimizer step.
    #[serde(skip)]
    pub record_trajectory: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            adam: AdamConfig::default(),
            cb: CbConfig::default(),
            record_trajectory: false,
        }
    }
}

/// Inputs `[n, 1, bands]` with head-index labels.
#[derive(Clone, Debug)]
pub struct LabeledSet<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.x.shape();
        let per = s[1] * s[2];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let x = Tensor::new(vec![idx.len(), s[1], s[2]], data).expect("row gather");
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Soft targets precomputed for every training row from a frozen teacher.
pub(crate) enum Guide<T> {
    None,
    /// `λ · (-Σ p log q)` over the first `cols` classes.
    Distill {
        probs: Vec<T>,
        cols: usize,
        lambda: T,
        temperature: T,
    },
    /// `KL(p || q)` over every class.
    Kl {
        probs: Vec<T>,
        classes: usize,
        temperature: T,
    },
}

/// One reinitialization reported during training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CbEvent {
    pub epoch: usize,
    pub step: u64,
    pub layer: String,
    pub units: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct FitReport {
    pub best_epoch: Option<usize>,
    pub best_val: Option<Scores>,
    pub epochs: Vec<EpochLog>,
    pub events: Vec<CbEvent>,
}

/// Randomness and counters that persist across the tasks of one run.
pub(crate) struct Runtime {
    pub order: Rng,
    pub cb: Rng,
    pub step: u64,
    pub trajectory: Vec<[u8; 32]>,
    pub record_trajectory: bool,
}

pub fn parameter_digest<T: Scalar>(model: &Model<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, p) in model.params() {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, set: &LabeledSet<T>) -> Result<(Scores, ConfusionMatrix)> {
    let pred = model.predict(&set.x)?;
    let cm = confusion(&pred, &set.y, model.num_classes())?;
    Ok((cm.scores()?, cm))
}

fn batch_rows<T: Scalar>(all: &[T], width: usize, idx: &[usize]) -> Vec<T> {
    idx.iter()
        .flat_map(|&i| all[i * width..(i + 1) * width].iter().copied())
        .collect()
}

/// Mini-batch Adam over `train` for the configured epochs. After each epoch the model
/// is scored on `val`; the epoch with the highest weighted F1 (earliest on ties) is
/// restored at the end, together with its continual-backprop state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<T: Scalar>(
    rt: &mut Runtime,
    cfg: &TrainConfig,
    model: &mut Model<T>,
    train: &LabeledSet<T>,
    val: &LabeledSet<T>,
    guide: &Guide<T>,
    ewc: Option<(&EwcState<T>, f64)>,
    mut cb: Option<&mut UtilityState>,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let opts = ForwardOptions {
        train: true,
        track_grad: true,
        record_activity: cb.is_some(),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FitReport {
        best_epoch: None,
        best_val: None,
        epochs: Vec::with_capacity(cfg.epochs),
        events: Vec::new(),
    };
    let mut best: Option<(Model<T>, Option<UtilityState>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rt.order);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (xb, yb) = train.rows(idx);
            let (mut grads, stats, activity, loss) = {
                let mut g = Graph::new();
                let x = g.input(xb);
                let trace = model.forward(&mut g, x, opts)?;
                let mut loss = g.cross_entropy(trace.logits, &yb)?;
                match guide {
                    Guide::None => {}
                    Guide::Distill {
                        probs,
                        cols,
                        lambda,
                        temperature,
                    } => {
                        let d =
                            g.soft_cross_entropy(trace.logits, batch_rows(probs, *cols, idx), *cols, *temperature)?;
                        let d = g.scale(d, *lambda);
                        loss = g.add(loss, d)?;
                    }
                    Guide::Kl {
                        probs,
                        classes,
                        temperature,
                    } => {
                        let d = g.kl_divergence(trace.logits, batch_rows(probs, *classes, idx), *temperature)?;
                        loss = g.add(loss, d)?;
                    }
                }
                let value = g.value(loss).data()[0].as_f64();
                (g.backward(loss)?, trace.bn_stats, trace.activity, value)
            };
            loss_sum += loss * idx.len() as f64;
            if let Some((state, lambda)) = ewc {
                state.add_penalty_grad(model, &mut grads, lambda)?;
            }
            model.apply_batch_stats(&stats);
            adam.step(model.params_mut(), &grads)?;
            rt.step += 1;
            if rt.record_trajectory {
                rt.trajectory.push(parameter_digest(model));
            }
            if let Some(state) = cb.as_deref_mut() {
                update_utility(state, model, &activity)?;
                for r in cb_step(model, state, cfg.cb.rho, cfg.cb.maturity, &mut rt.cb)? {
                    report.events.push(CbEvent {
                        epoch,
                        step: rt.step,
                        layer: r.layer.to_string(),
                        units: r.units,
                    });
                }
            }
        }
        let mut log = EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_f1: None,
            val_accuracy: None,
        };
        if !val.is_empty() {
            let (scores, _) = evaluate(model, val)?;
            log.val_f1 = Some(scores.f1);
            log.val_accuracy = Some(scores.accuracy);
            if report.best_val.is_none_or(|b| scores.f1 > b.f1) {
                report.best_val = Some(scores);
                report.best_epoch = Some(epoch);
                best = Some((model.clone(), cb.as_deref().cloned()));
            }
        }
        log::debug!("epoch {epoch}: loss {:.5} val_f1 {:?}", log.loss, log.val_f1);
        report.epochs.push(log);
    }
    if val.is_empty() && cfg.epochs > 0 {
        report.best_epoch = Some(cfg.epochs - 1);
    }
    if let Some((m, state)) = best {
        *model = m;
        if let (Some(dst), Some(src)) = (cb, state) {
            *dst = src;
        }
    }
    Ok(report)
}
