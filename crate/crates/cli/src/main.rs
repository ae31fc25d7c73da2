use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spectral_cil::analysis::{kde, kde_grid, layer_stats, scott_bandwidth, trapezoid};
use spectral_cil::data::write_csv;
use spectral_cil::io::write_atomic;
use spectral_cil::nn::Checkpoint;
use spectral_cil::runner::{
    emit_grid_reports, emit_reports, f1_table, run_experiment, run_sensitivity_grid, ExperimentConfig, StrategyList,
};
use spectral_cil::{Error, Result};

#[derive(Parser)]
#[command(name = "spectral-cil", version, about = "Class-incremental learning on 1-D spectra")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured strategy over all rounds and write reports.
    Run(ConfigArgs),
    /// Sweep the continual-backprop (rho, maturity) grid and pick the best cell per strategy.
    Grid(ConfigArgs),
    /// Write the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight statistics and KDE of every weight tensor in a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for per-tensor KDE curves.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategy names, or `all`.
    #[arg(long)]
    strategy: Option<StrategyList>,
    /// Enable or disable continual backprop.
    #[arg(long)]
    cb: Option<bool>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    maturity: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long = "output-dir")]
    output_dir: Option<PathBuf>,
    /// Run jobs one after another.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.strategy {
            c.strategies = s.0.clone();
        }
        if let Some(v) = self.cb {
            c.train.cb.enabled = v;
        }
        if let Some(v) = self.rho {
            c.train.cb.rho = v;
        }
        if let Some(v) = self.maturity {
            c.train.cb.maturity = v;
        }
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.scale {
            c.scale = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if self.sequential {
            c.parallel = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn analyze(checkpoint: &Path, out: Option<&Path>, points: usize) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut layers = Vec::new();
    for t in ck
        .tensors
        .iter()
        .filter(|t| t.name.ends_with(".weight") && t.values.len() >= 2)
    {
        let stats = layer_stats(&t.values)?;
        let h = scott_bandwidth(&t.values)?;
        let grid = kde_grid(&t.values, h, points)?;
        let density = kde(&t.values, &grid, h)?;
        if let Some(dir) = out {
            let mut text = String::from("x,density\n");
            for (x, d) in grid.iter().zip(&density) {
                text.push_str(&format!("{x},{d}\n"));
            }
            write_atomic(&dir.join(format!("kde_{}.csv", t.name)), text.as_bytes())?;
        }
        layers.push(json!({
            "name": t.name,
            "shape": t.shape,
            "stats": stats,
            "bandwidth": h,
            "kde_integral": trapezoid(&grid, &density),
        }));
    }
    Ok(json!({ "meta": ck.meta, "layers": layers }))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let c = args.resolve()?;
            let report = run_experiment(&c)?;
            let files = emit_reports(&report, &c.output_dir)?;
            print!("{}", f1_table(&report.aggregates()));
            log::info!("wrote {} files to {}", files.len(), c.output_dir.display());
        }
        Command::Grid(args) => {
            let c = args.resolve()?;
            c.validate_grid()?;
            let report = run_sensitivity_grid(&c)?;
            emit_grid_reports(&report, &c.output_dir)?;
            for b in &report.best {
                println!("{}: rho {} maturity {}", b.strategy.label(), b.rho, b.maturity);
            }
        }
        Command::GenData { config, out } => {
            let ds = config.resolve()?.load_dataset()?;
            write_csv(&ds, &out)?;
            log::info!("{} spectra of {} bands to {}", ds.len(), ds.bands(), out.display());
        }
        Command::Analyze {
            checkpoint,
            out,
            points,
        } => {
            if points < 2 {
                return Err(Error::InvalidArgument("need at least 2 KDE points".into()));
            }
            let v = analyze(&checkpoint, out.as_deref(), points)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
