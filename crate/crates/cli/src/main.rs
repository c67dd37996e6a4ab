use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use focal_cli::config::RunConfig;
use focal_cli::dataset::{self, DatasetError, DatasetRecord};
use focal_cli::output::write_json;
use focal_cli::run::{self, Metric, RunSummary, Session};
use focal_cli::synth::{self, SynthSpec};
use focal_cli::{EXIT_CONFIG, EXIT_IO, EXIT_RECORD};
use focal_core::focus::Method;

#[derive(Parser)]
#[command(name = "focal", version, about = "Budgeted attribution for long documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Focus,
    Lime,
    ProxyOnly,
    FocusNoProxy,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Focus => Method::Focus,
            MethodArg::Lime => Method::Lime,
            MethodArg::ProxyOnly => Method::ProxyOnly,
            MethodArg::FocusNoProxy => Method::FocusNoProxy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Aopc,
    Recall,
}

#[derive(Subcommand)]
enum Command {
    /// Attribute every record of a dataset.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "focus")]
        method: MethodArg,
        /// Defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score saved explanations by deletion (aopc) or evidence overlap (recall).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        explanations: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and a matching config.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iteratively freeze the least important units and track AOPC.
    Narrow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render HTML heatmaps for a directory of explanations.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Fail(i32, String);

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(EXIT_IO, e.to_string())
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::load(path).map_err(|e| Fail(EXIT_CONFIG, e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<Vec<DatasetRecord>, Fail> {
    dataset::load(path).map_err(|e| match e {
        DatasetError::Io { .. } => Fail(EXIT_IO, e.to_string()),
        DatasetError::Record { .. } => Fail(EXIT_RECORD, e.to_string()),
    })
}

fn session(cfg: RunConfig) -> Result<Session, Fail> {
    Session::new(cfg).map_err(|e| Fail(EXIT_CONFIG, e.to_string()))
}

fn finish(summary: RunSummary) -> i32 {
    eprintln!(
        "{}: {} of {} records succeeded",
        summary.command, summary.succeeded, summary.records
    );
    for f in &summary.failed {
        eprintln!("  {} ({:?}): {}", f.id, f.kind, f.message);
    }
    summary.exit_code()
}

fn run(cli: Cli) -> Result<i32, Fail> {
    match cli.command {
        Command::Explain {
            config,
            data,
            method,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let records = load_data(&data)?;
            let s = session(cfg)?;
            Ok(finish(run::explain(&s, &records, method.into(), &out)?))
        }
        Command::Evaluate {
            config,
            data,
            explanations,
            metric,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let out = out.unwrap_or_else(|| explanations.clone());
            let records = load_data(&data)?;
            let metric = match metric {
                MetricArg::Aopc => Metric::Aopc,
                MetricArg::Recall => Metric::Recall,
            };
            let s = session(cfg)?;
            Ok(finish(run::evaluate(&s, &records, &explanations, metric, &out)?))
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec: SynthSpec = serde_json::from_str(&text)
                .map_err(|e| Fail(EXIT_CONFIG, format!("{}: {e}", spec.display())))?;
            let suite = synth::generate(&spec).map_err(|e| Fail(EXIT_CONFIG, e))?;
            std::fs::create_dir_all(&out)?;
            dataset::write(&out.join("dataset.jsonl"), &suite.records)?;
            write_json(&out.join("config.json"), &suite.config)?;
            eprintln!(
                "wrote {} records to {}",
                suite.records.len(),
                out.join("dataset.jsonl").display()
            );
            Ok(0)
        }
        Command::Narrow {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let records = load_data(&data)?;
            let s = session(cfg)?;
            Ok(finish(run::narrow(&s, &records, &out)?))
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            Ok(finish(run::report(&input, &out)?))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(c) => c,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    };
    ExitCode::from(code as u8)
}
