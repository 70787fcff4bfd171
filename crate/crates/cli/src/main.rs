use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use harood_core::analysis::{pairwise_domain_distances, CostAggregation, DistanceOptions};
use harood_core::data::cache::{ingest, write_atomic};
use harood_core::data::{NormalizationMode, NormalizationSpec};
use harood_core::eval::SelectionKind;
use harood_core::runner::{
    build_bundle, emit_report, parse_config, parse_overrides, train_entry_with, ConfigSource, ResultsStore,
    RunConfig, RunOptions,
};
use harood_core::scenario::bundle_io::{load_bundle, save_bundle};
use harood_core::{HaroodError, Result};

#[derive(Parser)]
#[command(name = "harood", version, about = "Out-of-distribution benchmarking for sensor-based activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalization {
    Minmax,
    Zscore,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Valid,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Normalized,
    Summed,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw dataset and write its recording cache.
    Ingest {
        #[arg(long)]
        dataset: String,
        /// Directory holding the raw dataset files.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
    },
    /// Build a scenario bundle and save it.
    Build {
        /// Scenario id: cross_person, cross_position, cross_dataset or cross_time.
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "dsads")]
        dataset: String,
        #[arg(long)]
        window_length: Option<usize>,
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
        /// Build from generated recordings with this many windows each.
        #[arg(long)]
        mock: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured algorithm over its grid, tasks and trials.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key, e.g. `--set lr=2e-3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Stop after this many new runs; rerun to resume.
        #[arg(long)]
        max_new_runs: Option<usize>,
    },
    /// Pairwise domain distances of a saved bundle.
    Analyze {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "minmax")]
        normalization: Normalization,
        #[arg(long, value_enum, default_value = "normalized")]
        aggregation: Aggregation,
        #[arg(long, default_value_t = 1000)]
        sample_cap: usize,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, rank, confusion and timing tables from a results store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        protocol: Protocol,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { dataset, root, cache } => {
            let summary = ingest(&dataset, &root, &cache)?;
            println!("{}", print_json(&summary)?);
        }
        Command::Build {
            task,
            dataset,
            window_length,
            cache,
            mock,
            seed,
            out,
        } => {
            let cfg = RunConfig {
                task,
                dataset,
                window_length,
                cache_dir: cache,
                mock_windows: mock,
                seed,
                ..RunConfig::default()
            };
            let bundle = build_bundle(&cfg)?;
            let manifest = save_bundle(&bundle, &out)?;
            println!("{}", print_json(&manifest)?);
        }
        Command::Run {
            config,
            set,
            max_new_runs,
        } => {
            let overrides = parse_overrides(&set)?;
            let source = match &config {
                Some(p) => ConfigSource::File(p),
                None => ConfigSource::Defaults,
            };
            let cfg = parse_config(source, &overrides)?;
            let summary = train_entry_with(&cfg, RunOptions { max_new_runs })?;
            println!("{}", print_json(&summary)?);
        }
        Command::Analyze {
            bundle,
            normalization,
            aggregation,
            sample_cap,
            bins,
            seed,
            out,
        } => {
            let b = load_bundle(&bundle)?;
            let mode = match normalization {
                Normalization::Minmax => NormalizationMode::MinMax,
                Normalization::Zscore => NormalizationMode::ZScore,
                Normalization::None => NormalizationMode::None,
            };
            let opts = DistanceOptions {
                normalization: NormalizationSpec {
                    mode,
                    ..b.spec.normalization
                },
                sample_cap,
                seed,
                bins,
                aggregation: match aggregation {
                    Aggregation::Normalized => CostAggregation::Normalized,
                    Aggregation::Summed => CostAggregation::Summed,
                },
                ..DistanceOptions::default()
            };
            let report = pairwise_domain_distances(&b.id(), &b.domains, &opts)?;
            let text = print_json(&report)?;
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
        Command::Report { store, protocol, out } => {
            let kind = match protocol {
                Protocol::Valid => SelectionKind::TrainingDomainValidation,
                Protocol::Oracle => SelectionKind::Oracle,
            };
            if !store.is_dir() {
                return Err(HaroodError::Report(format!("{} is not a directory", store.display())));
            }
            let files = emit_report(&ResultsStore::open(&store)?, kind, out.as_deref())?;
            for f in files.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
