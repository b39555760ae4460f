use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fleetsense::config::{ConfigError, ExperimentConfig};
use fleetsense::demand::DemandError;
use fleetsense::harness::{
    metrics_csv, policy_label, run_evaluate, run_ingest, run_simulate, run_sweep, run_training,
    write_text, HarnessError,
};
use fleetsense::nn::ParamStore;
use fleetsense::report::{collect_metrics, long_csv, summary_csv, ReportError};
use fleetsense::sensing::DistributionTag;

const EXIT_VALIDATION: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_SCHEMA: u8 = 4;

#[derive(Parser)]
#[command(name = "fleetsense", about = "Fleet dispatch and sensing experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set env.num_vehicles=20
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a rule-based or bandit policy and write metrics CSVs.
    Simulate(ConfigArgs),
    /// Train the configured learner; writes checkpoints and diagnostics.
    Train(ConfigArgs),
    /// Evaluate a saved checkpoint greedily.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Convert a taxi-trip CSV into the order cache.
    Ingest {
        /// Raw trip CSV.
        #[arg(long)]
        input: PathBuf,
        /// Bounding box as min_lat,min_lon,max_lat,max_lon.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        bbox: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value_t = 60)]
        slot_seconds: u64,
        #[arg(long, default_value_t = 15)]
        expiry_slots: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-product of seeds and PoI distributions.
    Sweep(ConfigArgs),
    /// Aggregate metrics CSVs into summary and long-format tables.
    Report {
        /// Directory tree containing metrics.csv files.
        #[arg(long)]
        input: PathBuf,
        /// Where summary.csv and long.csv are written.
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_exit(err: &ConfigError) -> u8 {
    match err {
        ConfigError::MissingFile(_) => EXIT_MISSING,
        _ => EXIT_VALIDATION,
    }
}

fn harness_exit(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(c) => config_exit(c),
        HarnessError::Demand(DemandError::MissingFile(..)) => EXIT_MISSING,
        HarnessError::Demand(_) => EXIT_SCHEMA,
        HarnessError::Io { .. } => EXIT_MISSING,
        _ => EXIT_VALIDATION,
    }
}

fn report_exit(err: &ReportError) -> u8 {
    match err {
        ReportError::NoInputs(_) | ReportError::Io { .. } => EXIT_MISSING,
        ReportError::Malformed { .. } => EXIT_SCHEMA,
    }
}

fn fail(message: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, ConfigError> {
    ExperimentConfig::load(&args.config, &args.overrides)
}

fn seed_dir(config: &ExperimentConfig, tag: DistributionTag, seed: u64) -> PathBuf {
    config
        .output_dir
        .join(policy_label(config.policy))
        .join(tag.as_str())
        .join(format!("seed{seed}"))
}

fn simulate(config: &ExperimentConfig) -> Result<(), HarnessError> {
    let hash = config.hash();
    let tag = config.env.pois.distribution;
    for &seed in &config.seeds {
        let (rows, tuning) = run_simulate(config, tag, seed)?;
        let dir = seed_dir(config, tag, seed);
        let csv = metrics_csv(
            &hash,
            seed,
            policy_label(config.policy),
            tag.as_str(),
            config.env.alpha,
            config.env.beta,
            &rows,
        );
        write_text(&dir.join("metrics.csv"), &csv)?;
        if let Some(history) = tuning.history_csv() {
            write_text(&dir.join("rank_history.csv"), &history)?;
        }
        println!("wrote {}", dir.join("metrics.csv").display());
    }
    Ok(())
}

fn train(config: &ExperimentConfig) -> Result<(), HarnessError> {
    let hash = config.hash();
    let tag = config.env.pois.distribution;
    for &seed in &config.seeds {
        let artifacts = run_training(config, tag, seed)?;
        let dir = seed_dir(config, tag, seed);
        std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
            path: dir.clone(),
            source,
        })?;
        let ckpt = dir.join("checkpoint.txt");
        artifacts.store.save(&ckpt).map_err(|source| HarnessError::Io {
            path: ckpt.clone(),
            source,
        })?;
        write_text(
            &dir.join("diagnostics.csv"),
            &format!("# config_hash={hash} seed={seed}\n{}", artifacts.diagnostics_csv),
        )?;
        if !artifacts.rows.is_empty() {
            let csv = metrics_csv(
                &hash,
                seed,
                policy_label(config.policy),
                tag.as_str(),
                config.env.alpha,
                config.env.beta,
                &artifacts.rows,
            );
            write_text(&dir.join("metrics.csv"), &csv)?;
        }
        if let Some(history) = artifacts.rank_history_csv {
            write_text(&dir.join("rank_history.csv"), &history)?;
        }
        println!("wrote {}", ckpt.display());
    }
    Ok(())
}

fn evaluate(config: &ExperimentConfig, checkpoint: &PathBuf) -> Result<(), HarnessError> {
    if !checkpoint.exists() {
        return Err(HarnessError::Io {
            path: checkpoint.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let store = ParamStore::load(checkpoint).map_err(|source| HarnessError::Io {
        path: checkpoint.clone(),
        source,
    })?;
    let hash = config.hash();
    let tag = config.env.pois.distribution;
    for &seed in &config.seeds {
        let rows = run_evaluate(config, tag, seed, store.clone())?;
        let dir = seed_dir(config, tag, seed).join("eval");
        let csv = metrics_csv(
            &hash,
            seed,
            policy_label(config.policy),
            tag.as_str(),
            config.env.alpha,
            config.env.beta,
            &rows,
        );
        write_text(&dir.join("metrics.csv"), &csv)?;
        println!("wrote {}", dir.join("metrics.csv").display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(&e, config_exit(&e)),
            };
            match simulate(&config) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Train(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(&e, config_exit(&e)),
            };
            match train(&config) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Evaluate { config, checkpoint } => {
            let config = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e, config_exit(&e)),
            };
            match evaluate(&config, &checkpoint) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Ingest { input, bbox, rows, cols, slot_seconds, expiry_slots, out } => {
            if bbox.len() != 4 {
                return fail("--bbox needs min_lat,min_lon,max_lat,max_lon", EXIT_VALIDATION);
            }
            let bbox = fleetsense::grid::Bbox {
                min_lat: bbox[0],
                min_lon: bbox[1],
                max_lat: bbox[2],
                max_lon: bbox[3],
            };
            match run_ingest(&input, bbox, rows, cols, slot_seconds, expiry_slots, &out) {
                Ok((_, report)) => {
                    print!("{report}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Sweep(args) => {
            let config = match load_config(&args) {
                Ok(c) => c,
                Err(e) => return fail(&e, config_exit(&e)),
            };
            match run_sweep(&config) {
                Ok(paths) => {
                    println!("wrote {} metrics files under {}", paths.len(), config.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e, harness_exit(&e)),
            }
        }
        Command::Report { input, out } => match collect_metrics(&input) {
            Ok(files) => {
                let write = |name: &str, text: String| -> Result<(), HarnessError> {
                    write_text(&out.join(name), &text)
                };
                let result = write("summary.csv", summary_csv(&files))
                    .and_then(|_| write("long.csv", long_csv(&files)));
                match result {
                    Ok(()) => {
                        println!("wrote {} and {}", out.join("summary.csv").display(), out.join("long.csv").display());
                        ExitCode::SUCCESS
                    }
                    Err(e) => fail(&e, harness_exit(&e)),
                }
            }
            Err(e) => fail(&e, report_exit(&e)),
        },
    }
}
