//! Configuration-driven experiments: rounds of full task streams per strategy, the
//! continual-backprop sensitivity grid, aggregation over rounds and report files.
//!
//! Every (strategy, round, CB setting) run is self-contained, so runs are mapped over
//! in parallel when the `parallel` feature is on and the config asks for it. Results
//! are always collected in job order.

mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{emit_grid_reports, emit_reports, f1_table, format_cell, grid_table, weight_stats_csv};

use crate::analysis::{layer_stats, WeightStats};
use crate::data::{
    default_class_counts, generate_synthetic, load_csv, split_tasks, split_train_val_test, Dataset, SplitRatios,
    SyntheticConfig, TaskStream,
};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{Checkpoint, NetworkSpec};
use crate::plasticity::CbConfig;
use crate::strategies::{CbEvent, Learner, StrategyConfig, StrategyKind, TaskContext, TrainConfig};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated spectra; `counts` are per-class sizes before `scale` is applied.
    Synthetic {
        #[serde(default = "default_counts")]
        counts: Vec<usize>,
        #[serde(default = "default_bands")]
        bands: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Rows of `label,v0,v1,...`; spectra are taken as given unless `snv` is set.
    Csv {
        path: PathBuf,
        #[serde(default)]
        snv: bool,
    },
}

fn default_counts() -> Vec<usize> {
    default_class_counts()
}

fn default_bands() -> usize {
    128
}

fn default_noise() -> f64 {
    SyntheticConfig::default().noise
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            counts: default_counts(),
            bands: default_bands(),
            noise: default_noise(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub rho: Vec<f64>,
    pub maturity: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rho: vec![0.001, 0.1, 0.5],
            maturity: vec![500, 2000, 5000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Multiplier on synthetic class counts (at least 3 per class when not 1).
    pub scale: f64,
    /// Divides every conv width and the dense width of the reference network.
    pub width_divisor: usize,
    pub classes_per_task: usize,
    pub ratios: SplitRatios,
    pub strategies: Vec<StrategyKind>,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    /// Also run each strategy with the opposite CB setting and report both.
    pub compare_cb: bool,
    pub rounds: usize,
    /// Round `r` uses seed `seed + r`.
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub parallel: bool,
    /// Save the final model of round 0 for every run.
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.adam.lr = 1e-4;
        Self {
            data: DataSource::default(),
            scale: 0.2,
            width_divisor: 8,
            classes_per_task: 5,
            ratios: SplitRatios::default(),
            strategies: StrategyKind::ALL.to_vec(),
            strategy: StrategyConfig::default(),
            train,
            grid: GridConfig::default(),
            compare_cb: false,
            rounds: 5,
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("results"),
            parallel: true,
            checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.width_divisor == 0 || self.classes_per_task == 0 || self.rounds == 0 {
            return Err(Error::Config(
                "width_divisor, classes_per_task and rounds must be positive".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies selected".into()));
        }
        if !(self.train.adam.lr > 0.0) || self.train.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        self.ratios.validate()?;
        self.strategy.validate()?;
        self.train.cb.validate()?;
        Ok(())
    }

    pub fn validate_grid(&self) -> Result<()> {
        self.validate()?;
        if self.grid.rho.is_empty() || self.grid.maturity.is_empty() {
            return Err(Error::Config("grid needs at least one rho and one maturity".into()));
        }
        for &rho in &self.grid.rho {
            CbConfig { rho, ..self.train.cb }.validate()?;
        }
        Ok(())
    }

    /// Network for `bands`-long inputs at the configured width.
    pub fn network(&self, bands: usize) -> NetworkSpec {
        let mut spec = NetworkSpec::scaled(self.width_divisor);
        spec.fc_units = (spec.fc_units / self.width_divisor).max(1);
        spec.input_len = bands;
        spec
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic { counts, bands, noise } => generate_synthetic(&SyntheticConfig {
                counts: counts.clone(),
                scale: self.scale,
                bands: *bands,
                noise: *noise,
                seed: self.seed,
                snv: true,
            }),
            DataSource::Csv { path, snv } => {
                let ds = load_csv(path, None)?;
                if *snv {
                    ds.snv()
                } else {
                    Ok(ds)
                }
            }
        }
    }

    /// Git-style blob hash of the canonical JSON of this config.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One unit of work: a full task stream for one strategy under one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub kind: StrategyKind,
    pub round: usize,
    pub cb: CbConfig,
}

impl Job {
    /// Strategy label with a `+CB` suffix when continual backprop is on.
    pub fn label(&self) -> String {
        variant_label(self.kind, self.cb.enabled)
    }
}

pub fn variant_label(kind: StrategyKind, cb: bool) -> String {
    if cb {
        format!("{}+CB", kind.label())
    } else {
        kind.label().to_string()
    }
}

/// Per-task metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskRecord {
    pub strategy: StrategyKind,
    pub cb: bool,
    pub round: usize,
    pub task: usize,
    pub classes_seen: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub parameter_count: usize,
    pub backbones: usize,
    pub exemplars: usize,
    pub replacements: usize,
    pub alignment: Option<f64>,
    pub confusion_file: String,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRecord {
    pub strategy: StrategyKind,
    pub cb: bool,
    pub round: usize,
    pub task: usize,
    pub method: String,
    pub layer: String,
    pub param: String,
    pub stats: WeightStats,
    /// Raw weights, kept for round 0 only.
    #[serde(skip)]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub strategy: StrategyKind,
    pub cb: bool,
    pub round: usize,
    pub task: usize,
    #[serde(flatten)]
    pub event: CbEvent,
}

/// Everything one job produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub job: Job,
    pub tasks: Vec<TaskRecord>,
    pub layers: Vec<LayerRecord>,
    pub events: Vec<EventRecord>,
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunOutput>,
}

impl RunReport {
    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.runs.iter().flat_map(|r| &r.tasks)
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        aggregate(self.records())
    }
}

/// Mean and population standard deviation over rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub strategy: StrategyKind,
    pub cb: bool,
    pub task: usize,
    pub rounds: usize,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
}

/// Groups records by (strategy, cb, task) in first-seen order.
pub fn aggregate<'r>(records: impl IntoIterator<Item = &'r TaskRecord>) -> Vec<Aggregate> {
    let mut groups: Vec<((StrategyKind, bool, usize), Vec<&TaskRecord>)> = Vec::new();
    for r in records {
        let key = (r.strategy, r.cb, r.task);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((strategy, cb, task), rs)| {
            let col = |f: fn(&TaskRecord) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Aggregate {
                strategy,
                cb,
                task,
                rounds: rs.len(),
                f1: col(|r| r.f1),
                precision: col(|r| r.precision),
                recall: col(|r| r.recall),
            }
        })
        .collect()
}

/// Data, task stream and network shared by every job of an experiment.
pub struct Prepared {
    pub dataset: Dataset,
    pub stream: TaskStream,
    pub spec: NetworkSpec,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let dataset = config.load_dataset()?;
        let stream = split_tasks(&dataset, config.classes_per_task)?;
        let spec = config.network(dataset.bands());
        Ok(Self { dataset, stream, spec })
    }
}

fn run_typed<T: Scalar>(config: &ExperimentConfig, data: &Prepared, job: Job) -> Result<RunOutput> {
    let seed = config.seed.wrapping_add(job.round as u64);
    let splits = split_train_val_test(&data.dataset, config.ratios, seed)?;
    let ctx = TaskContext {
        dataset: &data.dataset,
        stream: &data.stream,
        splits: &splits,
    };
    let train = TrainConfig {
        cb: job.cb,
        ..config.train.clone()
    };
    let mut learner = Learner::<T>::new(job.kind, config.strategy.clone(), train, data.spec.clone(), seed)?;
    let label = job.label().replace('+', "_").to_ascii_lowercase();
    let mut out = RunOutput {
        job,
        tasks: Vec::new(),
        layers: Vec::new(),
        events: Vec::new(),
        checkpoint: None,
    };
    for task in 0..data.stream.len() {
        let start = Instant::now();
        let o = learner.learn_task(&ctx, task)?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{} round {} task {task}: f1 {:.4} ({seconds:.1}s)",
            job.label(),
            job.round,
            o.test.f1
        );
        out.tasks.push(TaskRecord {
            strategy: job.kind,
            cb: job.cb.enabled,
            round: job.round,
            task,
            classes_seen: o.classes_seen,
            f1: o.test.f1,
            precision: o.test.precision,
            recall: o.test.recall,
            accuracy: o.test.accuracy,
            val_f1: o.val.map(|v| v.f1),
            best_epoch: o.best_epoch,
            parameter_count: o.parameter_count,
            backbones: o.backbones,
            exemplars: o.exemplars,
            replacements: o.replacements,
            alignment: o.alignment,
            confusion_file: format!("confusion_{label}_task{task}_round{}.csv", job.round),
            confusion: o.confusion,
            seconds,
        });
        for w in o.layers {
            out.layers.push(LayerRecord {
                strategy: job.kind,
                cb: job.cb.enabled,
                round: job.round,
                task,
                stats: layer_stats(&w.values)?,
                method: w.method,
                layer: w.layer,
                param: w.param,
                values: (job.round == 0).then_some(w.values),
            });
        }
        out.events.extend(o.cb_events.into_iter().map(|event| EventRecord {
            strategy: job.kind,
            cb: job.cb.enabled,
            round: job.round,
            task,
            event,
        }));
    }
    if config.checkpoints && job.round == 0 {
        let model = learner.model().expect("trained at least one task");
        out.checkpoint = Some(Checkpoint::from_model(
            model,
            serde_json::json!({
                "strategy": job.kind,
                "cb": job.cb.enabled,
                "round": job.round,
                "task": data.stream.len() - 1,
                "precision": config.precision,
            }),
        ));
    }
    Ok(out)
}

pub fn run_job(config: &ExperimentConfig, data: &Prepared, job: Job) -> Result<RunOutput> {
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, data, job),
        Precision::F64 => run_typed::<f64>(config, data, job),
    }
}

/// Runs `jobs` and returns their outputs in input order. Parallel only when requested
/// and the `parallel` feature is compiled in.
pub fn run_jobs(config: &ExperimentConfig, data: &Prepared, jobs: &[Job], parallel: bool) -> Result<Vec<RunOutput>> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return jobs.par_iter().map(|&j| run_job(config, data, j)).collect();
    }
    let _ = parallel;
    jobs.iter().map(|&j| run_job(config, data, j)).collect()
}

/// Jobs of a plain experiment: strategies × (CB settings) × rounds.
pub fn experiment_jobs(config: &ExperimentConfig) -> Vec<Job> {
    let mut settings = vec![config.train.cb];
    if config.compare_cb {
        settings.push(CbConfig {
            enabled: !config.train.cb.enabled,
            ..config.train.cb
        });
        settings.sort_by_key(|c| c.enabled);
    }
    let mut jobs = Vec::new();
    for &kind in &config.strategies {
        for &cb in &settings {
            for round in 0..config.rounds {
                jobs.push(Job { kind, round, cb });
            }
        }
    }
    jobs
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let data = Prepared::new(config)?;
    let runs = run_jobs(config, &data, &experiment_jobs(config), config.parallel)?;
    Ok(RunReport {
        config: config.clone(),
        runs,
    })
}

/// One (ρ, m) cell for one strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub strategy: StrategyKind,
    pub rho: f64,
    pub maturity: u64,
    /// Weighted F1 over rounds, per task.
    pub tasks: Vec<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridBest {
    pub strategy: StrategyKind,
    pub rho: f64,
    pub maturity: u64,
    pub final_f1: MeanStd,
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub config: ExperimentConfig,
    pub cells: Vec<GridCell>,
    pub best: Vec<GridBest>,
    pub runs: Vec<RunOutput>,
}

/// Highest final-task mean F1; ties go to the lower ρ, then the lower m.
pub fn select_best(cells: &[GridCell]) -> Vec<GridBest> {
    let mut out: Vec<GridBest> = Vec::new();
    for c in cells {
        let Some(last) = c.tasks.last().copied() else { continue };
        let cand = GridBest {
            strategy: c.strategy,
            rho: c.rho,
            maturity: c.maturity,
            final_f1: last,
        };
        match out.iter_mut().find(|b| b.strategy == c.strategy) {
            None => out.push(cand),
            Some(b) => {
                let better = last.mean > b.final_f1.mean
                    || (last.mean == b.final_f1.mean && (c.rho, c.maturity) < (b.rho, b.maturity));
                if better {
                    *b = cand;
                }
            }
        }
    }
    out
}

pub fn run_sensitivity_grid(config: &ExperimentConfig) -> Result<GridReport> {
    config.validate_grid()?;
    let data = Prepared::new(config)?;
    let mut jobs = Vec::new();
    for &kind in &config.strategies {
        for &rho in &config.grid.rho {
            for &maturity in &config.grid.maturity {
                let cb = CbConfig {
                    enabled: true,
                    rho,
                    maturity,
                    ..config.train.cb
                };
                jobs.extend((0..config.rounds).map(|round| Job { kind, round, cb }));
            }
        }
    }
    let runs = run_jobs(config, &data, &jobs, config.parallel)?;
    let tasks = data.stream.len();
    let cells: Vec<GridCell> = runs
        .chunks(config.rounds)
        .map(|chunk| {
            let job = chunk[0].job;
            GridCell {
                strategy: job.kind,
                rho: job.cb.rho,
                maturity: job.cb.maturity,
                tasks: (0..tasks)
                    .map(|t| MeanStd::of(&chunk.iter().map(|r| r.tasks[t].f1).collect::<Vec<_>>()))
                    .collect(),
            }
        })
        .collect();
    let best = select_best(&cells);
    Ok(GridReport {
        config: config.clone(),
        cells,
        best,
        runs,
    })
}

/// Parsed `--strategy` list: comma-separated names or `all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrategyList(pub Vec<StrategyKind>);

impl FromStr for StrategyList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self(StrategyKind::ALL.to_vec()));
        }
        let kinds = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse())
            .collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() {
            return Err(Error::InvalidArgument("empty strategy list".into()));
        }
        Ok(Self(kinds))
    }
}

impl fmt::Display for StrategyList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|k| k.name()).collect();
        f.write_str(&names.join(","))
    }
}
