use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{variant_label, Aggregate, GridReport, LayerRecord, MeanStd, RunReport, TaskRecord};
use crate::analysis::{kde, kde_grid, scott_bandwidth};
use crate::error::Result;
use crate::io::write_atomic;

const KDE_POINTS: usize = 200;

/// `mean±std` in percent with two decimals.
pub fn format_cell(m: MeanStd) -> String {
    format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std)
}

/// One row per strategy variant, one column per task, cells `mean±std` of weighted F1.
pub fn f1_table(aggregates: &[Aggregate]) -> String {
    let tasks = aggregates.iter().map(|a| a.task + 1).max().unwrap_or(0);
    let mut rows: Vec<(String, Vec<Option<MeanStd>>)> = Vec::new();
    for a in aggregates {
        let label = variant_label(a.strategy, a.cb);
        let idx = match rows.iter().position(|(l, _)| *l == label) {
            Some(i) => i,
            None => {
                rows.push((label, vec![None; tasks]));
                rows.len() - 1
            }
        };
        rows[idx].1[a.task] = Some(a.f1);
    }
    let mut out = String::from("method");
    for t in 0..tasks {
        let _ = write!(out, ",task{t}");
    }
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&label);
        for c in cells {
            out.push(',');
            if let Some(c) = c {
                out.push_str(&format_cell(c));
            }
        }
        out.push('\n');
    }
    out
}

pub fn weight_stats_csv(layers: &[LayerRecord]) -> String {
    let mut out = String::from("method,cb,round,task,layer,param,count,mean,std,skewness,kurtosis\n");
    for l in layers {
        let s = l.stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            l.method, l.cb, l.round, l.task, l.layer, l.param, s.count, s.mean, s.std, s.skewness, s.kurtosis
        );
    }
    out
}

fn csv_of<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| crate::Error::InvalidArgument(format!("csv buffer: {e}")))
}

#[derive(Serialize)]
struct ResultRow<'r> {
    round: usize,
    task: usize,
    classes_seen: usize,
    f1: f64,
    precision: f64,
    recall: f64,
    accuracy: f64,
    val_f1: Option<f64>,
    best_epoch: Option<usize>,
    parameter_count: usize,
    backbones: usize,
    exemplars: usize,
    replacements: usize,
    alignment: Option<f64>,
    confusion_file: &'r str,
}

impl<'r> From<&'r TaskRecord> for ResultRow<'r> {
    fn from(r: &'r TaskRecord) -> Self {
        Self {
            round: r.round,
            task: r.task,
            classes_seen: r.classes_seen,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            accuracy: r.accuracy,
            val_f1: r.val_f1,
            best_epoch: r.best_epoch,
            parameter_count: r.parameter_count,
            backbones: r.backbones,
            exemplars: r.exemplars,
            replacements: r.replacements,
            alignment: r.alignment,
            confusion_file: &r.confusion_file,
        }
    }
}

#[derive(Serialize)]
struct TimingRow<'r> {
    strategy: &'r str,
    cb: bool,
    round: usize,
    task: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct Summary<'r, C: Serialize> {
    config: &'r C,
    config_hash: String,
    aggregates: Vec<Aggregate>,
    records: Vec<&'r TaskRecord>,
}

fn file_stem(label: &str) -> String {
    label.replace('+', "_").to_ascii_lowercase()
}

struct Sink {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Sink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }
}

/// Mean std of each (method, task, layer) under CB off and on, where both exist.
fn cb_std_comparison(layers: &[LayerRecord]) -> Option<String> {
    let mut groups: BTreeMap<(String, usize, String), [Vec<f64>; 2]> = BTreeMap::new();
    for l in layers {
        groups.entry((l.method.clone(), l.task, l.layer.clone())).or_default()[l.cb as usize].push(l.stats.std);
    }
    let mut out = String::from("method,task,layer,std_vanilla,std_cb,cb_lower\n");
    let mut any = false;
    for ((method, task, layer), [off, on]) in groups {
        if off.is_empty() || on.is_empty() {
            continue;
        }
        any = true;
        let (a, b) = (MeanStd::of(&off).mean, MeanStd::of(&on).mean);
        let _ = writeln!(out, "{method},{task},{layer},{a},{b},{}", b < a);
    }
    any.then_some(out)
}

/// Writes every report of `report` into `dir` and returns the paths written.
/// Everything except `timings.csv` is a pure function of the config.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut sink = Sink {
        dir: dir.to_path_buf(),
        written: Vec::new(),
    };
    let aggregates = report.aggregates();

    let mut by_variant: Vec<(String, Vec<&TaskRecord>)> = Vec::new();
    for r in report.records() {
        let label = variant_label(r.strategy, r.cb);
        match by_variant.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(r),
            None => by_variant.push((label, vec![r])),
        }
    }
    for (label, records) in &by_variant {
        sink.put(
            &format!("results_{}.csv", file_stem(label)),
            &csv_of(records.iter().map(|r| ResultRow::from(*r)))?,
        )?;
        for r in records {
            sink.put(&r.confusion_file, r.confusion.to_csv().as_bytes())?;
        }
    }
    sink.put("f1_table.csv", f1_table(&aggregates).as_bytes())?;

    let layers: Vec<LayerRecord> = report.runs.iter().flat_map(|r| r.layers.iter().cloned()).collect();
    sink.put("weight_stats.csv", weight_stats_csv(&layers).as_bytes())?;
    if let Some(cmp) = cb_std_comparison(&layers) {
        sink.put("cb_std_comparison.csv", cmp.as_bytes())?;
    }
    let mut kde_files: BTreeMap<(String, usize), String> = BTreeMap::new();
    for l in &layers {
        let Some(values) = &l.values else { continue };
        let h = scott_bandwidth(values)?;
        let grid = kde_grid(values, h, KDE_POINTS)?;
        let density = kde(values, &grid, h)?;
        let text = kde_files
            .entry((l.layer.clone(), l.task))
            .or_insert_with(|| String::from("method,x,density\n"));
        let method = if l.cb {
            format!("{}+CB", l.method)
        } else {
            l.method.clone()
        };
        for (x, d) in grid.iter().zip(&density) {
            let _ = writeln!(text, "{method},{x},{d}");
        }
    }
    for ((layer, task), text) in &kde_files {
        sink.put(&format!("kde_{layer}_task{task}.csv"), text.as_bytes())?;
    }

    let mut events = String::new();
    for e in report.runs.iter().flat_map(|r| &r.events) {
        events.push_str(&serde_json::to_string(e)?);
        events.push('\n');
    }
    sink.put("events.jsonl", events.as_bytes())?;

    let summary = Summary {
        config: &report.config,
        config_hash: report.config.content_hash(),
        aggregates,
        records: report.records().collect(),
    };
    sink.put("summary.json", &serde_json::to_vec_pretty(&summary)?)?;

    let timings: Vec<TimingRow> = report
        .records()
        .map(|r| TimingRow {
            strategy: r.strategy.name(),
            cb: r.cb,
            round: r.round,
            task: r.task,
            seconds: r.seconds,
        })
        .collect();
    sink.put("timings.csv", &csv_of(timings)?)?;

    for run in &report.runs {
        if let Some(ck) = &run.checkpoint {
            sink.put(
                &format!(
                    "checkpoints/{}_round{}.ckpt",
                    file_stem(&run.job.label()),
                    run.job.round
                ),
                &ck.to_bytes()?,
            )?;
        }
    }
    Ok(sink.written)
}

/// One row per (ρ, m), one column per task.
pub fn grid_table(report: &GridReport, strategy: crate::strategies::StrategyKind) -> String {
    let mut out = String::from("rho,maturity");
    let tasks = report.cells.first().map_or(0, |c| c.tasks.len());
    for t in 0..tasks {
        let _ = write!(out, ",task{t}");
    }
    out.push('\n');
    for c in report.cells.iter().filter(|c| c.strategy == strategy) {
        let _ = write!(out, "{},{}", c.rho, c.maturity);
        for m in &c.tasks {
            let _ = write!(out, ",{}", format_cell(*m));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct GridSummary<'r, C: Serialize> {
    config: &'r C,
    config_hash: String,
    cells: &'r [super::GridCell],
    best: &'r [super::GridBest],
}

pub fn emit_grid_reports(report: &GridReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut sink = Sink {
        dir: dir.to_path_buf(),
        written: Vec::new(),
    };
    for b in &report.best {
        sink.put(
            &format!("grid_{}.csv", b.strategy.name()),
            grid_table(report, b.strategy).as_bytes(),
        )?;
    }
    let mut best = String::from("strategy,rho,maturity,final_f1\n");
    for b in &report.best {
        let _ = writeln!(
            best,
            "{},{},{},{}",
            b.strategy.label(),
            b.rho,
            b.maturity,
            format_cell(b.final_f1)
        );
    }
    sink.put("grid_best.csv", best.as_bytes())?;
    let summary = GridSummary {
        config: &report.config,
        config_hash: report.config.content_hash(),
        cells: &report.cells,
        best: &report.best,
    };
    sink.put("grid_summary.json", &serde_json::to_vec_pretty(&summary)?)?;
    let mut events = String::new();
    for run in &report.runs {
        for e in &run.events {
            let mut v = serde_json::to_value(e)?;
            v["rho"] = serde_json::json!(run.job.cb.rho);
            v["maturity"] = serde_json::json!(run.job.cb.maturity);
            events.push_str(&serde_json::to_string(&v)?);
            events.push('\n');
        }
    }
    sink.put("grid_events.jsonl", events.as_bytes())?;
    Ok(sink.written)
}
