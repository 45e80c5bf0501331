use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covadj_core::{
    load_config, load_dataset, run_analysis, run_monte_carlo, validate_inputs, AnalysisConfig,
    Error, SimulationConfig,
};
use serde::Serialize;
use serde_json::json;

/// Covariate-adjusted marginal treatment effects for two-arm randomized trials.
#[derive(Parser)]
#[command(name = "covadj", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured analysis on a CSV file.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; the JSON report goes to stdout when neither this
        /// nor `output` in the config is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-replicate estimates as CSV.
        #[arg(long)]
        replicates_csv: Option<PathBuf>,
    },
    /// Check a config and data file without estimating.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (operation, result) = match cli.command {
        Command::Analyze { config, data, out } => ("analyze", analyze(&config, &data, out)),
        Command::Simulate {
            config,
            jobs,
            out,
            replicates_csv,
        } => ("simulate", simulate(&config, jobs, out, replicates_csv)),
        Command::Validate { config, data } => ("validate", validate(&config, &data)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(operation, &e);
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn report_error(operation: &str, e: &Error) {
    let mut payload = json!({
        "kind": e.kind(),
        "category": format!("{:?}", e.category()).to_lowercase(),
        "module": e.module(),
        "operation": operation,
        "message": e.to_string(),
    });
    if let Error::InvalidConfig { field, .. } = e.root() {
        payload["field"] = json!(field);
    }
    if !e.hint().is_empty() {
        payload["hint"] = json!(e.hint());
    }
    let text = serde_json::to_string_pretty(&json!({ "error": payload })).expect("serializable");
    eprintln!("{text}");
}

fn io_error(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn analyze(config_path: &Path, data_path: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let config: AnalysisConfig = load_config(config_path)?;
    config.check()?;
    let data = load_dataset(data_path, &config.data)?;
    let report = run_analysis(&config, &data)?;
    match out.or(config.output) {
        Some(path) => {
            write_json(&report, Some(&path))?;
            print!("{}", report.summary());
            println!("\nreport written to {}", path.display());
        }
        None => write_json(&report, None)?,
    }
    Ok(())
}

fn simulate(
    config_path: &Path,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    replicates_csv: Option<PathBuf>,
) -> Result<(), Error> {
    let config: SimulationConfig = load_config(config_path)?;
    let report = run_monte_carlo(&config, jobs)?;
    if let Some(path) = &replicates_csv {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        report.write_replicates_csv(BufWriter::new(file))?;
    }
    match out {
        Some(path) => {
            write_json(&report, Some(&path))?;
            println!(
                "{} replicates, n = {}, true {} = {:.6}",
                report.replicates,
                report.n,
                report.scale,
                report.truth.contrast(report.scale).unwrap_or(f64::NAN)
            );
            for e in &report.estimators {
                println!(
                    "  {:<28} mean {:>10.6}  sd {:.6}  coverage {:.3}  rejection {:.3}  rel. eff. {:.3}",
                    e.name, e.mean, e.empirical_sd, e.coverage, e.rejection_rate, e.relative_efficiency
                );
            }
            println!("report written to {}", path.display());
        }
        None => write_json(&report, None)?,
    }
    Ok(())
}

fn validate(config_path: &Path, data_path: &Path) -> Result<(), Error> {
    let config: AnalysisConfig = load_config(config_path)?;
    let report = validate_inputs(&config, data_path)?;
    write_json(&report, None)
}
