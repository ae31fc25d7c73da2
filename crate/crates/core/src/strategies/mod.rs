//! Class-incremental training procedures.
//!
//! A [`Learner`] owns everything one run carries from task to task: the network (or
//! ensemble), the exemplar store, the regularizer anchor, the continual-backprop
//! state and the run's random streams.

mod align;
mod distill;
mod ewc;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use align::weight_align;
pub use distill::{distill_loss, soft_targets};
pub use ewc::{estimate_fisher, EwcState};
pub use train::{evaluate, parameter_digest, CbEvent, EpochLog, LabeledSet, TrainConfig};

use crate::data::{Dataset, ExemplarStore, SelectionMode, Splits, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::nn::{BlockKey, Linear, Model, NetworkSpec};
use crate::plasticity::{select_cb_target, CbTarget, UtilityState};
use crate::rng::{stream, streams, Rng};
use crate::tensor::Scalar;
use train::{fit, FitReport, Guide, Runtime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Finetune,
    Ewc,
    Lwf,
    Replay,
    Icarl,
    Wa,
    Der,
    Foster,
    Memo,
    Retrain,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Finetune,
        StrategyKind::Lwf,
        StrategyKind::Ewc,
        StrategyKind::Replay,
        StrategyKind::Icarl,
        StrategyKind::Wa,
        StrategyKind::Der,
        StrategyKind::Foster,
        StrategyKind::Memo,
        StrategyKind::Retrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Replay => "replay",
            StrategyKind::Icarl => "icarl",
            StrategyKind::Wa => "wa",
            StrategyKind::Der => "der",
            StrategyKind::Foster => "foster",
            StrategyKind::Memo => "memo",
            StrategyKind::Retrain => "retrain",
        }
    }

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "Finetune",
            StrategyKind::Ewc => "EWC",
            StrategyKind::Lwf => "LwF",
            StrategyKind::Replay => "Replay",
            StrategyKind::Icarl => "iCaRL",
            StrategyKind::Wa => "WA",
            StrategyKind::Der => "DER",
            StrategyKind::Foster => "FOSTER",
            StrategyKind::Memo => "MEMO",
            StrategyKind::Retrain => "Retrain",
        }
    }

    /// Whether old-class exemplars join each task's training set.
    pub fn uses_exemplars(self) -> bool {
        matches!(
            self,
            StrategyKind::Replay
                | StrategyKind::Icarl
                | StrategyKind::Wa
                | StrategyKind::Der
                | StrategyKind::Foster
                | StrategyKind::Memo
        )
    }

    pub fn cb_target(self) -> CbTarget {
        CbTarget::for_strategy(self.name()).expect("every kind has a target")
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub lambda_ewc: f64,
    pub lambda_lwf: f64,
    pub temperature: f64,
    pub exemplars_per_class: usize,
    pub selection: SelectionMode,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            lambda_ewc: 5000.0,
            lambda_lwf: 1.0,
            temperature: 2.0,
            exemplars_per_class: 20,
            selection: SelectionMode::Random,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ewc >= 0.0 && self.lambda_lwf >= 0.0) {
            return Err(Error::Config("regularization weights must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("distillation temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Read-only inputs shared by every task of a run.
#[derive(Clone, Copy)]
pub struct TaskContext<'d> {
    pub dataset: &'d Dataset,
    pub stream: &'d TaskStream,
    pub splits: &'d Splits,
}

impl TaskContext<'_> {
    fn set<T: Scalar>(&self, ids: &[usize]) -> Result<LabeledSet<T>> {
        let y = ids
            .iter()
            .map(|&i| {
                let c = self.dataset.samples()[i].class_id;
                self.stream
                    .head_index(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("class {c} is in no task")))
            })
            .collect::<Result<_>>()?;
        Ok(LabeledSet {
            x: self.dataset.tensor(ids),
            y,
        })
    }
}

/// Flattened weights of one layer, tagged for the weight-statistics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerWeights {
    /// Row label: the strategy, or `FOSTER t` / `FOSTER s` for teacher and student.
    pub method: String,
    /// Position in the full conv stack, `conv1` first.
    pub layer: String,
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskOutcome {
    pub task: usize,
    pub classes_seen: usize,
    pub test: Scores,
    pub val: Option<Scores>,
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
    pub parameter_count: usize,
    pub backbones: usize,
    pub exemplars: usize,
    pub alignment: Option<f64>,
    pub replacements: usize,
    #[serde(skip)]
    pub cb_events: Vec<CbEvent>,
    #[serde(skip)]
    pub layers: Vec<LayerWeights>,
    pub epochs: Vec<EpochLog>,
}

pub struct Learner<T> {
    pub kind: StrategyKind,
    pub config: StrategyConfig,
    pub train: TrainConfig,
    spec: NetworkSpec,
    seed: u64,
    model: Option<Model<T>>,
    /// Last FOSTER teacher, kept for reporting.
    teacher: Option<Model<T>>,
    ewc: Option<EwcState<T>>,
    store: ExemplarStore,
    cb: Option<UtilityState>,
    init: Rng,
    rt: Runtime,
    tasks_done: usize,
    alignments: usize,
}

impl<T: Scalar> Learner<T> {
    pub fn new(
        kind: StrategyKind,
        config: StrategyConfig,
        train: TrainConfig,
        spec: NetworkSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        train.cb.validate()?;
        Ok(Self {
            kind,
            config,
            spec,
            seed,
            model: None,
            teacher: None,
            ewc: None,
            store: ExemplarStore::new(),
            cb: None,
            init: stream(seed, streams::INIT),
            rt: Runtime {
                order: stream(seed, streams::ORDER),
                cb: stream(seed, streams::CB),
                step: 0,
                trajectory: Vec::new(),
                record_trajectory: train.record_trajectory,
            },
            train,
            tasks_done: 0,
            alignments: 0,
        })
    }

    pub fn model(&self) -> Option<&Model<T>> {
        self.model.as_ref()
    }

    pub fn teacher(&self) -> Option<&Model<T>> {
        self.teacher.as_ref()
    }

    pub fn exemplars(&self) -> &ExemplarStore {
        &self.store
    }

    pub fn ewc_state(&self) -> Option<&EwcState<T>> {
        self.ewc.as_ref()
    }

    pub fn utility(&self) -> Option<&UtilityState> {
        self.cb.as_ref()
    }

    /// Per-step parameter digests, when trajectory recording is on.
    pub fn trajectory(&self) -> &[[u8; 32]] {
        &self.rt.trajectory
    }

    pub fn steps(&self) -> u64 {
        self.rt.step
    }

    /// Number of weight alignments applied so far.
    pub fn alignments(&self) -> usize {
        self.alignments
    }

    fn fresh_model(&mut self, classes: usize) -> Result<Model<T>> {
        match self.kind {
            StrategyKind::Memo => Model::decoupled(&self.spec, classes, &mut self.init),
            _ => Model::new(&self.spec, classes, &mut self.init),
        }
    }

    fn attach_cb(&mut self, model: &Model<T>, fresh: bool) -> Result<()> {
        if !self.train.cb.enabled {
            return Ok(());
        }
        let keys = select_cb_target(self.kind.cb_target(), model)?;
        match (&mut self.cb, fresh) {
            (Some(state), false) => state.retarget(model, &keys)?,
            _ => self.cb = Some(UtilityState::new(model, &keys, self.train.cb.eta)?),
        }
        Ok(())
    }

    fn run_fit(
        &mut self,
        model: &mut Model<T>,
        train: &LabeledSet<T>,
        val: &LabeledSet<T>,
        guide: &Guide<T>,
        use_cb: bool,
    ) -> Result<FitReport> {
        let lambda = self.config.lambda_ewc;
        let ewc = match (self.kind, &self.ewc) {
            (StrategyKind::Ewc, Some(state)) if lambda > 0.0 => Some((state, lambda)),
            _ => None,
        };
        let cb = if use_cb { self.cb.as_mut() } else { None };
        fit(&mut self.rt, &self.train, model, train, val, guide, ewc, cb)
    }

    fn distill_guide(&self, teacher: &Model<T>, train: &LabeledSet<T>) -> Result<Guide<T>> {
        let lambda = self.config.lambda_lwf;
        if lambda == 0.0 {
            return Ok(Guide::None);
        }
        let cols = teacher.num_classes();
        let t = T::from_f64_lossy(self.config.temperature);
        Ok(Guide::Distill {
            probs: soft_targets(teacher.logits(&train.x)?.data(), cols, cols, t),
            cols,
            lambda: T::from_f64_lossy(lambda),
            temperature: t,
        })
    }

    /// Trains on task `task` and evaluates on the test split of every class seen so far.
    pub fn learn_task(&mut self, ctx: &TaskContext<'_>, task: usize) -> Result<TaskOutcome> {
        if task != self.tasks_done || task >= ctx.stream.len() {
            return Err(Error::InvalidArgument(format!(
                "expected task {} of {}, got {task}",
                self.tasks_done,
                ctx.stream.len()
            )));
        }
        let new_classes = ctx.stream.tasks[task].classes.clone();
        let seen = ctx.stream.seen_classes(task);
        let (n_new, n_seen) = (new_classes.len(), seen.len());
        let kind = self.kind;

        let mut train_ids = if kind == StrategyKind::Retrain {
            Splits::restrict(&ctx.splits.train, ctx.dataset, &seen)
        } else {
            Splits::restrict(&ctx.splits.train, ctx.dataset, &new_classes)
        };
        if kind.uses_exemplars() {
            train_ids.extend(self.store.ids());
        }
        let train = ctx.set::<T>(&train_ids)?;
        let val = ctx.set::<T>(&Splits::restrict(&ctx.splits.val, ctx.dataset, &seen))?;
        let test = ctx.set::<T>(&Splits::restrict(&ctx.splits.test, ctx.dataset, &seen))?;

        let mut alignment = None;
        let mut layers = Vec::new();
        let (model, report) = match (kind, self.model.take()) {
            (StrategyKind::Retrain, _) | (_, None) => {
                let classes = if kind == StrategyKind::Retrain { n_seen } else { n_new };
                let mut model = self.fresh_model(classes)?;
                self.attach_cb(&model, true)?;
                let report = self.run_fit(&mut model, &train, &val, &Guide::None, true)?;
                (model, report)
            }
            (StrategyKind::Finetune | StrategyKind::Ewc | StrategyKind::Replay | StrategyKind::Wa, Some(mut model)) => {
                model.extend_head(n_new, &mut self.init)?;
                self.attach_cb(&model, false)?;
                let report = self.run_fit(&mut model, &train, &val, &Guide::None, true)?;
                if kind == StrategyKind::Wa {
                    alignment = Some(weight_align(&mut model.head, n_seen - n_new, n_new)?);
                    self.alignments += 1;
                }
                (model, report)
            }
            (StrategyKind::Lwf | StrategyKind::Icarl, Some(mut model)) => {
                let teacher = model.clone();
                model.extend_head(n_new, &mut self.init)?;
                self.attach_cb(&model, false)?;
                let guide = self.distill_guide(&teacher, &train)?;
                let report = self.run_fit(&mut model, &train, &val, &guide, true)?;
                (model, report)
            }
            (StrategyKind::Der | StrategyKind::Memo, Some(model)) => {
                let mut model = expand(&model, n_new, &mut self.init)?;
                self.attach_cb(&model, false)?;
                let report = self.run_fit(&mut model, &train, &val, &Guide::None, true)?;
                (model, report)
            }
            (StrategyKind::Foster, Some(student)) => {
                let mut teacher = expand(&student, n_new, &mut self.init)?;
                let mut report = self.run_fit(&mut teacher, &train, &val, &Guide::None, false)?;
                let t = T::from_f64_lossy(self.config.temperature);
                let guide = Guide::Kl {
                    probs: soft_targets(teacher.logits(&train.x)?.data(), n_seen, n_seen, t),
                    classes: n_seen,
                    temperature: t,
                };
                let mut student = self.fresh_model(n_seen)?;
                self.attach_cb(&student, true)?;
                let distilled = self.run_fit(&mut student, &train, &val, &guide, true)?;
                report.events.extend(distilled.events);
                report.epochs.extend(distilled.epochs);
                report.best_epoch = distilled.best_epoch;
                report.best_val = distilled.best_val;
                self.teacher = Some(teacher);
                (student, report)
            }
        };
        if model.num_classes() != n_seen {
            return Err(Error::Shape(format!(
                "model predicts {} classes after task {task}, {n_seen} seen",
                model.num_classes()
            )));
        }

        if kind == StrategyKind::Ewc {
            let current = ctx.set::<T>(&Splits::restrict(&ctx.splits.train, ctx.dataset, &new_classes))?;
            let omega = estimate_fisher(&model, &current.x, &current.y)?;
            self.ewc = Some(EwcState::snapshot(&model, omega)?);
        }
        if kind.uses_exemplars() {
            self.select_exemplars(ctx, &model, &new_classes, task)?;
        }

        let (scores, cm) = evaluate(&model, &test)?;
        self.collect_layers(&model, &mut layers);
        let outcome = TaskOutcome {
            task,
            classes_seen: n_seen,
            test: scores,
            val: report.best_val,
            best_epoch: report.best_epoch,
            confusion: cm,
            parameter_count: model.parameter_count(),
            backbones: model.backbone_count(),
            exemplars: self.store.len(),
            alignment,
            replacements: report.events.iter().map(|e| e.units.len()).sum(),
            cb_events: report.events,
            layers,
            epochs: report.epochs,
        };
        self.model = Some(model);
        self.tasks_done += 1;
        Ok(outcome)
    }

    fn select_exemplars(
        &mut self,
        ctx: &TaskContext<'_>,
        model: &Model<T>,
        classes: &[usize],
        task: usize,
    ) -> Result<()> {
        let ids = Splits::restrict(&ctx.splits.train, ctx.dataset, classes);
        let mut candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in ids {
            candidates.entry(ctx.dataset.samples()[i].class_id).or_default().push(i);
        }
        let quota = self.config.exemplars_per_class;
        match self.config.selection {
            SelectionMode::Random => {
                let mut rng = stream(self.seed.wrapping_add(task as u64), streams::EXEMPLAR);
                self.store.select_random(&candidates, quota, &mut rng)
            }
            SelectionMode::Herding => self.store.select_herding(&candidates, quota, |ids| {
                let f = model.features(&ctx.dataset.tensor::<T>(ids))?;
                let d = f.shape()[1];
                Ok(f.data()
                    .chunks(d)
                    .map(|r| r.iter().map(|v| v.as_f64()).collect())
                    .collect())
            }),
        }
    }

    fn collect_layers(&self, model: &Model<T>, out: &mut Vec<LayerWeights>) {
        let grab = |m: &Model<T>, branch: usize, method: &str, out: &mut Vec<LayerWeights>| {
            if let Some((key, name)) = m.last_conv_in_branch(branch) {
                if let Some(p) = m.param(&name) {
                    let shared_convs = m.shared.as_ref().map_or(0, |s| {
                        s.blocks
                            .iter()
                            .filter(|b| matches!(b, crate::nn::Block::Conv { .. }))
                            .count()
                    });
                    let position = match key {
                        BlockKey::Shared(j) => j + 1,
                        BlockKey::Branch(_, j) => shared_convs + j + 1,
                    };
                    out.push(LayerWeights {
                        method: method.to_string(),
                        layer: format!("conv{position}"),
                        param: name,
                        values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                    });
                }
            }
        };
        match self.kind {
            StrategyKind::Foster => {
                let teacher = self.teacher.as_ref().unwrap_or(model);
                grab(teacher, teacher.backbone_count() - 1, "FOSTER t", out);
                grab(model, 0, "FOSTER s", out);
            }
            StrategyKind::Der => grab(model, model.backbone_count() - 1, self.kind.label(), out),
            _ => grab(model, 0, self.kind.label(), out),
        }
    }
}

/// Freezes every branch, appends a trainable copy of the newest one, and widens the
/// head to the concatenated features plus `n_new` classes. The old head occupies the
/// top-left block of the new one; the rest is freshly drawn.
pub fn expand<T: Scalar>(model: &Model<T>, n_new: usize, rng: &mut Rng) -> Result<Model<T>> {
    if n_new == 0 {
        return Err(Error::InvalidArgument("expansion by zero classes".into()));
    }
    let mut branches = model.branches.clone();
    for b in &mut branches {
        b.set_frozen(true);
    }
    let mut fresh = model.branches.last().expect("at least one branch").clone();
    fresh.set_frozen(false);
    branches.push(fresh);
    let old = &model.head;
    let (old_out, old_in) = (old.out_features(), old.in_features());
    let new_in: usize = branches.iter().map(|b| b.output_width()).sum();
    let mut head = Linear::new(new_in, old_out + n_new, rng);
    {
        let w = head.weight.value.data_mut();
        for r in 0..old_out {
            w[r * new_in..r * new_in + old_in].copy_from_slice(&old.weight.value.data()[r * old_in..(r + 1) * old_in]);
        }
    }
    head.bias.value.data_mut()[..old_out].copy_from_slice(old.bias.value.data());
    Model::from_parts(model.shared.clone(), branches, head)
}
