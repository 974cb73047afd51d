use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use otpel_core::eval::RESULTS_HEADER;
use otpel_core::ot::MetricKind;
use otpel_core::pel::Method;
use otpel_core::pipeline::{self, GridCell, RunConfig};
use otpel_core::train::{DISTANCES_HEADER, METRICS_HEADER};
use otpel_core::Error;

const SCHEMAS: &str = "\
Output files (under out_dir):
  source.bin target.bin backbone.bin bank.bin
  runs/<cell>/run.toml pel.bin metrics.csv results.csv distances.csv

CSV schemas:
  metrics.csv    {metrics}
  distances.csv  {distances}
  results.csv    {results}

metrics.csv has one row per step; l_ot is the negated distance averaged over
the adapted taps, dist_before/dist_after are filled on the first step of each
epoch. Empty cells mean \"not measured\".

OTPEL_SEED overrides the top-level seed of the config file.";

fn after_help() -> String {
    SCHEMAS
        .replace("{metrics}", &METRICS_HEADER.join(","))
        .replace("{distances}", &DISTANCES_HEADER.join(","))
        .replace("{results}", &RESULTS_HEADER.join(","))
}

#[derive(Parser)]
#[command(name = "otpel", version, about = "Parameter-efficient adaptation of a frozen spectrogram model")]
#[command(after_long_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long, default_value = "otpel.toml")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate both corpora and pretrain the backbone on the source split.
    Pretrain(ConfigArg),
    /// Record source-domain features at every decoder tap.
    Bank(ConfigArg),
    /// Adapt one method on the target training split.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArg,
        /// IR, LA, IR+LR, decoder-FT or FT.
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// SWD or MMD; defaults to the metric of the [train] section.
        #[arg(long, value_parser = parse_metric, conflicts_with = "no_ot")]
        metric: Option<MetricKind>,
        /// Train without the auxiliary distance loss.
        #[arg(long)]
        no_ot: bool,
    },
    /// Score a run directory on the held-out target split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        run_dir: PathBuf,
    },
    /// Print the aggregate results table of several run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Also write the combined rows to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Extract the per-epoch before/after distances of a run.
    Distances { run_dir: PathBuf },
    /// Adapt, evaluate and report every cell of the [grid] section.
    Grid {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Worker processes; each cell writes to its own directory.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Adapt, evaluate and extract distances for a single grid cell.
    #[command(hide = true)]
    Cell {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_cell)]
        cell: GridCell,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cell(s: &str) -> Result<GridCell, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(arg: &ConfigArg) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(&arg.config)?)
}

fn resolve_cell(cfg: &RunConfig, method: Method, metric: Option<MetricKind>, no_ot: bool) -> anyhow::Result<GridCell> {
    let metric = match (method.is_pel(), no_ot, metric) {
        (_, true, _) => None,
        (true, false, m) => Some(m.unwrap_or(cfg.train.metric.kind)),
        (false, false, None) => None,
        (false, false, Some(_)) => {
            return Err(Error::Config(format!("{method}: --metric applies to IR, LA and IR+LR only")).into())
        }
    };
    Ok(GridCell { method, metric })
}

fn print_eval(dir: &Path, s: &pipeline::EvalSummary) {
    println!(
        "{}: {} MCD {:.4} ± {:.4} dB, trainable {:.3}%, held-out MAE {:.5}",
        dir.display(),
        s.row.method,
        s.row.mcd_mean,
        s.row.mcd_std,
        100.0 * s.row.ratio,
        s.heldout_mae
    );
}

fn grid(arg: &ConfigArg, jobs: usize) -> anyhow::Result<()> {
    let cfg = load(arg)?;
    let cells = cfg.grid.cells.clone();
    if jobs <= 1 {
        for &cell in &cells {
            let s = pipeline::run_cell(&cfg, cell)?;
            print_eval(&cfg.run_dir(cell), &s);
        }
    } else {
        let exe = std::env::current_exe().context("locating the otpel executable")?;
        let mut failed = Vec::new();
        for chunk in cells.chunks(jobs) {
            let mut children = Vec::new();
            for cell in chunk {
                let child = Command::new(&exe)
                    .arg("cell")
                    .arg("--config")
                    .arg(&arg.config)
                    .arg("--cell")
                    .arg(cell.label())
                    .spawn()
                    .with_context(|| format!("spawning worker for {cell}"))?;
                children.push((*cell, child));
            }
            for (cell, mut child) in children {
                if !child.wait()?.success() {
                    failed.push(cell.label());
                }
            }
        }
        if !failed.is_empty() {
            bail!("grid cells failed: {}", failed.join(", "));
        }
    }
    let dirs: Vec<PathBuf> = cells.iter().map(|&c| cfg.run_dir(c)).collect();
    let report = pipeline::cmd_report(&dirs, Some(&cfg.out_dir.join("report.csv")))?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::Pretrain(arg) => {
            let cfg = load(&arg)?;
            let s = pipeline::cmd_pretrain(&cfg)?;
            println!(
                "backbone: {} parameters, held-out MAE source {:.5}, target {:.5}",
                s.n_params, s.source_heldout_mae, s.target_heldout_mae
            );
        }
        Cmd::Bank(arg) => {
            let cfg = load(&arg)?;
            let bank = pipeline::cmd_bank(&cfg)?;
            for (tap, cloud) in &bank.clouds {
                println!("{tap}: {} frames × {}", cloud.len(), cloud.dim());
            }
        }
        Cmd::Adapt {
            cfg: arg,
            method,
            metric,
            no_ot,
        } => {
            let cfg = load(&arg)?;
            let cell = resolve_cell(&cfg, method, metric, no_ot)?;
            let dir = pipeline::cmd_adapt(&cfg, cell)?;
            println!("{}: adapted {cell}", dir.display());
        }
        Cmd::Eval { cfg: arg, run_dir } => {
            let cfg = load(&arg)?;
            let s = pipeline::cmd_eval(&cfg, &run_dir)?;
            print_eval(&run_dir, &s);
        }
        Cmd::Report { run_dirs, csv } => {
            let report = pipeline::cmd_report(&run_dirs, csv.as_deref())?;
            print!("{}", report.to_table());
            if !report.absent.is_empty() {
                bail!("{} run directories had no results.csv", report.absent.len());
            }
        }
        Cmd::Distances { run_dir } => {
            let out = pipeline::cmd_distances(&run_dir)?;
            println!("{}", out.display());
        }
        Cmd::Grid { cfg, jobs } => grid(&cfg, jobs)?,
        Cmd::Cell { cfg: arg, cell } => {
            let cfg = load(&arg)?;
            let s = pipeline::run_cell(&cfg, cell)?;
            print_eval(&cfg.run_dir(cell), &s);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(core) => eprintln!("error[{}]: {core}", core.code()),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
