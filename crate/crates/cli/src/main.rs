//! `caos` command-line runner.
//!
//! Exit codes: 0 success, 1 run marked failed (or a runtime error), 2
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use caos::engine::pope::NegativeSampling;
use caos::gateway::{GatewayMode, HttpTransport};
use caos::pipeline::{convert_coco, CocoOptions, PipelineError, ReportFormat, RunConfig, RunOutcome, Session};
use caos::Vocabulary;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "caos", version, about = "Object hallucination evaluation for image captions")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Gateway mode: live, record or replay.
    #[arg(long, global = true)]
    mode: Option<GatewayMode>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate captions only, into `captions.jsonl` in the output directory.
    Caption,
    /// Run the full pipeline, or score ingested captions.
    Score {
        /// Score these captions instead of generating new ones.
        #[arg(long)]
        captions: Option<PathBuf>,
    },
    /// CAOS_K for k = 1..=k-max over the recorded captions.
    SweepK {
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Subset breakdowns over the recorded captions.
    Subsets {
        /// Number of most frequent objects left out of the exclusion subset.
        #[arg(long)]
        exclude_top: Option<usize>,
    },
    /// Yes/no probing baseline with the `[pope]` model.
    Pope {
        #[arg(long)]
        sampling: Option<NegativeSampling>,
        #[arg(long)]
        questions_per_image: Option<usize>,
    },
    /// Rebuild the report from recorded captions and print one export.
    Report {
        /// summary, per-caption, sweep, subsets or instruction-variability
        #[arg(long, default_value = "summary")]
        format: ReportFormat,
    },
    /// Convert a COCO instances file into dataset, frequency and
    /// co-occurrence files.
    ConvertCoco {
        /// COCO `instances_*.json` file.
        annotations: PathBuf,
        /// Directory for the converted files.
        #[arg(long = "to")]
        to: PathBuf,
        /// Normalize category names through this vocabulary.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
        /// Prefix for image locators.
        #[arg(long)]
        image_root: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(c) = cli.concurrency {
        cfg.concurrency = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.cache_dir {
        cfg.cache_dir = absolute(d);
    }
    if let Some(d) = &cli.out {
        cfg.out_dir = absolute(d);
    }
    Ok(cfg)
}

fn open(cfg: RunConfig) -> Result<Session, PipelineError> {
    let transport = HttpTransport::new().map_err(|e| PipelineError::Stage(e.to_string()))?;
    Session::open(cfg, Arc::new(transport))
}

fn print_export(outcome: &RunOutcome, format: ReportFormat) -> Result<(), PipelineError> {
    let path = outcome.out_dir.join(format.file_name());
    let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io { path, source })?;
    print!("{text}");
    Ok(())
}

fn status(outcome: &RunOutcome) -> i32 {
    eprintln!(
        "{} of {} work items failed; outputs in {}",
        outcome.report.failed_items,
        outcome.report.work_items,
        outcome.out_dir.display()
    );
    i32::from(outcome.failed())
}

fn execute(cli: Cli) -> Result<i32, PipelineError> {
    match &cli.command {
        Command::ConvertCoco {
            annotations,
            to,
            vocabulary,
            image_root,
            limit,
        } => {
            let vocab = vocabulary
                .as_deref()
                .map(Vocabulary::load)
                .transpose()
                .map_err(|e| PipelineError::Config(format!("vocabulary: {e}")))?;
            let options = CocoOptions {
                image_root: image_root.clone(),
                limit: *limit,
            };
            let conv = convert_coco(annotations, vocab.as_ref(), &options)?;
            for p in conv.write(to)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Caption => {
            let cfg = load_config(&cli)?;
            let threshold = cfg.max_failure_fraction;
            let session = open(cfg)?;
            let (done, failed) = session.generate_captions()?;
            eprintln!("{done} captions written, {failed} failed");
            let total = done + failed;
            Ok(i32::from(total > 0 && failed as f64 / total as f64 > threshold))
        }
        Command::Score { captions } => {
            let mut cfg = load_config(&cli)?;
            if let Some(c) = captions {
                cfg.captions = Some(absolute(c));
            }
            let outcome = open(cfg)?.run()?;
            print_export(&outcome, ReportFormat::Summary)?;
            Ok(status(&outcome))
        }
        Command::SweepK { k_max } => {
            let mut cfg = load_config(&cli)?;
            if let Some(k) = k_max {
                cfg.sweep_k = (1..=*k).collect();
            }
            let outcome = open(cfg)?.report_from_records()?;
            print_export(&outcome, ReportFormat::Sweep)?;
            Ok(0)
        }
        Command::Subsets { exclude_top } => {
            let mut cfg = load_config(&cli)?;
            if let Some(m) = exclude_top {
                cfg.exclude_top_m = *m;
            }
            let outcome = open(cfg)?.report_from_records()?;
            print_export(&outcome, ReportFormat::Subsets)?;
            Ok(0)
        }
        Command::Pope {
            sampling,
            questions_per_image,
        } => {
            let mut cfg = load_config(&cli)?;
            let section = cfg
                .pope
                .as_mut()
                .ok_or_else(|| PipelineError::Config("no [pope] section in the configuration".into()))?;
            if let Some(s) = sampling {
                section.sampling = *s;
            }
            if let Some(q) = questions_per_image {
                section.questions_per_image = *q;
            }
            let metrics = open(cfg)?.pope()?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            Ok(0)
        }
        Command::Report { format } => {
            let outcome = open(load_config(&cli)?)?.report_from_records()?;
            print_export(&outcome, *format)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
