//! `towerlab` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration or precondition error, 2 numerical
//! failure, 3 inconclusive.

mod config;
mod error;
mod output;
mod pipelines;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::Parser;
use towerlab::model::HyperbolicModel;
use towerlab::returns::LevelTable;

use config::Config;
use error::CliError;
use output::{summary_block, Status, SummaryHeader};
use pipelines::{Context, Registry};

fn command_names() -> PossibleValuesParser {
    let mut names = Registry::default().names();
    names.push("all");
    PossibleValuesParser::new(names)
}

#[derive(Debug, Parser)]
#[command(
    name = "towerlab",
    version,
    about = "Numerical experiments on an intermittent hyperbolic model and its Young tower"
)]
struct Args {
    /// Pipeline to run.
    #[arg(value_parser = command_names())]
    command: String,
    /// TOML configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Main sample count of the selected pipeline(s).
    #[arg(long)]
    samples: Option<usize>,
}

impl Args {
    fn config(&self) -> Result<Config, CliError> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.theta {
            c.theta = t;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.to_string_lossy().into_owned();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        if let Some(n) = self.samples {
            let all = self.command == "all";
            let is = |name: &str| all || self.command == name;
            if is("tails") {
                c.tails.samples = n;
            }
            if is("validate") {
                c.validate.pairs = n;
            }
            if is("correlations") {
                c.correlations.length = n as u64;
            }
            if is("ld") {
                c.ld.ensemble = n;
            }
            if is("spectra") {
                c.spectra.grid.points_per_bin = n;
            }
            if is("couple") {
                c.couple.pairs = n;
            }
        }
        Ok(c)
    }
}

fn run(args: &Args) -> Result<Status, CliError> {
    let cfg = args.config()?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    }
    let model = HyperbolicModel::build(&cfg.model_config())?;
    let table = LevelTable::new(&model, cfg.model.level_depth)?;
    let ctx = Context {
        cfg: &cfg,
        model: &model,
        table: &table,
    };
    let report = Registry::default().run(&args.command, &ctx)?;

    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    for t in &report.tables {
        t.write(&dir, &hash, cfg.seed)?;
    }
    let header = SummaryHeader {
        command: &args.command,
        seed: cfg.seed,
        theta: cfg.theta,
        zeta_target: cfg.zeta_target(),
        config_hash: &hash,
    };
    let summary = summary_block(&header, &report);
    std::fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(report.worst())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(2),
        Ok(Status::Inconclusive) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
