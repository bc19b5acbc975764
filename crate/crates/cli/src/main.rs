//! `carat`: analyze a trial CSV or run a simulation scenario from a TOML
//! config, writing JSON/CSV reports.
//!
//! Exit codes: 0 success, 2 config or schema errors, 3 estimation refusal
//! (the requested variance flavor is unavailable for the scheme), 1 other
//! failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use carat_core::data::load_csv;
use carat_core::report::analyze;
use carat_core::sim::{figure1_experiment, run_scenario};
use carat_core::Error as CoreError;
use config::{Mode, RunConfig};

const THREADS_ENV: &str = "CARAT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "carat", version, about = "Covariate-adjusted analysis of randomized trials under covariate-adaptive randomization")]
struct Args {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for simulation replicates (default: CARAT_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: String) -> Self {
        Failure { code: 2, message }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::FlavorRefused { .. } => 3,
            CoreError::Csv(_)
            | CoreError::Io(_)
            | CoreError::BadCell { .. }
            | CoreError::ArmOutOfRange { .. }
            | CoreError::MissingColumn(_)
            | CoreError::EmptyDataset
            | CoreError::InvalidSchema(_)
            | CoreError::InvalidAllocation(_)
            | CoreError::InvalidScheme(_)
            | CoreError::InvalidScenario(_)
            | CoreError::BadContrast(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(args: &Args) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", args.config.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Failure::config(format!("config parse error: {e}")))?;
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;

    let threads = args
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .or(cfg.threads);
    if let Some(t) = threads {
        // ignore failure if a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }

    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());

    match cfg.mode {
        Mode::Analyze => {
            let a = cfg.analyze.as_ref().expect("validated");
            let dataset_path = resolve_relative(&args.config, &a.dataset);
            let d = load_csv(&dataset_path, &a.schema)?;
            let report = analyze(&d, &a.pipeline, &a.scheme, &a.contrast, seed)?;
            let table = report.human_table(cfg.output.times100);
            write_outputs(&out_dir, &[("report.json", report.to_json()), ("report.txt", table.clone())])?;
            print!("{table}");
            Ok(())
        }
        Mode::Simulate => {
            let s = cfg.simulate.as_ref().expect("validated");
            let spec = s.to_scenario(seed);
            spec.validate()?;
            let mut files: Vec<(&str, String)> = Vec::new();
            if s.emit_samples {
                if spec.dgp != carat_core::sim::Dgp::Figure1 {
                    return Err(Failure::config("emit_samples requires dgp = \"figure1\"".into()));
                }
                let samples = figure1_experiment(spec.replicates, spec.n, seed)?;
                files.push(("samples.csv", samples.to_csv()));
                files.push((
                    "samples.json",
                    serde_json::to_string_pretty(&samples).expect("serializable samples"),
                ));
            }
            let summary = run_scenario(&spec)?;
            files.push(("summary.csv", summary.to_csv()));
            files.push(("summary.json", summary.to_json()));
            write_outputs(&out_dir, &files)?;
            println!("{}", summary.to_csv());
            Ok(())
        }
    }
}

/// Dataset paths in the config resolve against the config file's directory.
fn resolve_relative(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure { code: 1, message: format!("cannot create {}: {e}", dir.display()) })?;
    for (name, content) in files {
        std::fs::write(dir.join(name), content)
            .map_err(|e| Failure { code: 1, message: format!("cannot write {name}: {e}") })?;
    }
    Ok(())
}
