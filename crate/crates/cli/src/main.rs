use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use des_cli::matrix::{profile_complete, run_matrix, summary_table};
use des_cli::spec::load_spec;
use des_cli::CliError;
use des_core::bench::{read_metrics, write_profiles};
use des_core::dataio::{read_libsvm_file, LabelRule, ParseOptions};
use des_core::DesError;

#[derive(Parser)]
#[command(name = "des", version, about = "Distributed evolution strategies benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec and write metrics.csv and profile.csv.
    Run {
        spec: PathBuf,
        /// Override a spec key, e.g. `--set algorithms.0.alpha=[1,10]`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to the spec's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Recompute performance profiles from a metrics CSV.
    Profile {
        metrics: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a LIBSVM file and report its shape.
    ParseCheck {
        file: PathBuf,
        /// Labels above this are positive when they are not already binary.
        #[arg(long)]
        label_threshold: Option<f64>,
    },
}

fn parse_error(e: DesError) -> CliError {
    match e {
        DesError::Io(_) => CliError::Runtime(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run {
            spec,
            overrides,
            out,
            threads,
        } => {
            if threads == Some(0) {
                return Err(CliError::Validation("--threads must be positive".into()));
            }
            let parsed = load_spec(&spec, &overrides)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let out = out.unwrap_or_else(|| parsed.out.clone());
            let outcome = run_matrix(&parsed, base, &out, threads)?;
            print!("{}", summary_table(&outcome));
            println!("wrote {} runs to {}", outcome.runs.len(), out.display());
            Ok(outcome.exit_code())
        }
        Command::Profile { metrics, delta, out } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(CliError::Field {
                    field: "delta".into(),
                    reason: format!("{delta} not in (0, 1)"),
                });
            }
            let file = File::open(&metrics)
                .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", metrics.display())))?;
            let runs = read_metrics(BufReader::new(file)).map_err(parse_error)?;
            let curves = profile_complete(&runs, delta).map_err(parse_error)?;
            let written = match out {
                Some(path) => File::create(&path)
                    .map_err(DesError::from)
                    .and_then(|f| write_profiles(f, &curves)),
                None => write_profiles(io::stdout().lock(), &curves),
            };
            written.map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(0)
        }
        Command::ParseCheck { file, label_threshold } => {
            let opts = ParseOptions {
                labels: label_threshold.map_or(LabelRule::Auto, LabelRule::AutoOr),
                dim: None,
            };
            let data = read_libsvm_file(&file, &opts).map_err(parse_error)?;
            let positives = data.examples().iter().filter(|e| e.label() > 0.0).count();
            let nnz: usize = data.examples().iter().map(|e| e.nnz()).sum();
            let mut stdout = io::stdout().lock();
            writeln!(
                stdout,
                "{}: {} examples, dimension {}, {} nonzeros, {} positive / {} negative",
                file.display(),
                data.len(),
                data.dim(),
                nnz,
                positives,
                data.len() - positives
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
