use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use agedecor::difficulty::DEFAULT_BINS;
use agedecor::experiment::{
    cmd_evaluate, cmd_generate, cmd_plotdata, cmd_run, cmd_train, cmd_trend, CellRequest, Manifest,
};
use agedecor::trainer::Variant;
use agedecor::Error;

/// Age-confounding experiments: synthetic data, training, evaluation and
/// plot-data export.
#[derive(Parser)]
#[command(name = "agedecor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArgs {
    /// Flat key = value experiment manifest.
    #[arg(long, alias = "config")]
    manifest: PathBuf,
    /// Overrides the manifest's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> agedecor::Result<Manifest> {
        let mut m = Manifest::from_file(&self.manifest)?;
        if let Some(out) = &self.out {
            m.output_dir.clone_from(out);
        }
        Ok(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the population and one split bundle per gamma.
    Generate(ManifestArgs),
    /// Run the method x gamma x seed matrix, resuming completed cells.
    Run {
        #[command(flatten)]
        manifest: ManifestArgs,
        #[arg(long)]
        workers: Option<usize>,
        /// Also run the variant without trend affinity.
        #[arg(long)]
        no_affinity: bool,
        /// Also run the variant without coverage modulation.
        #[arg(long)]
        no_coverage: bool,
    },
    /// Train and evaluate a single cell.
    Train {
        #[arg(long, alias = "manifest")]
        config: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "ours")]
        method: Variant,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        no_affinity: bool,
        #[arg(long)]
        no_coverage: bool,
        /// Cell output directory (default: inside the results tree).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a saved run.json on a split directory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Binned difficulty-vs-age trend of a saved model on a training split.
    Trend {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export figure CSVs from an experiment directory.
    Plotdata {
        /// Experiment output directory.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn emit(text: &str, out: Option<&Path>) -> agedecor::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> agedecor::Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => {
            let m = args.load()?;
            for dir in cmd_generate(&m)? {
                info!("wrote {}", dir.display());
            }
        }
        Command::Run {
            manifest,
            workers,
            no_affinity,
            no_coverage,
        } => {
            let mut m = manifest.load()?;
            if let Some(w) = workers {
                m.workers = w;
            }
            for (flag, v) in [(no_affinity, Variant::OursNoAffinity), (no_coverage, Variant::OursNoCoverage)] {
                if flag && !m.variants.contains(&v) {
                    m.variants.push(v);
                }
            }
            let summary = cmd_run(&m)?;
            println!("{}", summary.summary_path.display());
            if summary.n_failed() > 0 {
                error!("{} of {} cells failed", summary.n_failed(), summary.cells.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Train {
            config,
            gamma,
            seed,
            method,
            lambda,
            no_affinity,
            no_coverage,
            out,
        } => {
            let m = Manifest::from_file(&config)?;
            let req = CellRequest {
                gamma,
                seed,
                variant: Some(method),
                lambda,
                no_affinity,
                no_coverage,
            };
            let (_, report, dir) = cmd_train(&m, &req, out.as_deref())?;
            info!("wrote {}", dir.display());
            println!("{}", report.to_json()?);
        }
        Command::Evaluate { run, split, out } => {
            let report = cmd_evaluate(&run, &split)?;
            emit(&(report.to_json()? + "\n"), out.as_deref())?;
        }
        Command::Trend {
            run,
            split,
            bins,
            out,
        } => {
            let report = cmd_trend(&run, &split, bins)?;
            emit(&report.to_csv_string(), out.as_deref())?;
        }
        Command::Plotdata { dir } => {
            for path in cmd_plotdata(&dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            match e {
                Error::InvalidConfig(_) | Error::Parse(_) | Error::MissingResults(_) | Error::Io { .. } => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
