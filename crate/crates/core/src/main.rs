//! Command-line front end: synthetic data generation, data validation,
//! language-model pretraining, single training runs, variation sweeps, and
//! report generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wordsig::checkpoint;
use wordsig::data::{self, DataError, Dataset, SyntheticConfig};
use wordsig::encoder::{EncoderConfig, Vocabulary};
use wordsig::report::{self, ReportError, RunStore};
use wordsig::signals::Signal;
use wordsig::stats::StatsError;
use wordsig::tape::{ParameterSet, TapeError};
use wordsig::train::{
    self, OptimizerHyper, Schedule, TrainError, TrainOptions, TrainingVariation,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Validation(_) => EXIT_VALIDATION,
            AppError::Io(_) => EXIT_IO,
            AppError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match &e {
            DataError::Io(_) => AppError::Io(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteGradient(_) | TrainError::Stats(_) => {
                AppError::Numerical(e.to_string())
            }
            TrainError::Tape(TapeError::NonFinite { .. }) => AppError::Numerical(e.to_string()),
            TrainError::Data(DataError::Io(_)) => AppError::Io(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl From<ReportError> for AppError {
    fn from(e: ReportError) -> Self {
        match &e {
            ReportError::Io { .. } | ReportError::Checkpoint(_) => AppError::Io(e.to_string()),
            ReportError::Data(DataError::Io(_)) => AppError::Io(e.to_string()),
            ReportError::Stats(_) => AppError::Numerical(e.to_string()),
            ReportError::Train(t) => AppError::from_train_ref(t, &e),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl AppError {
    fn from_train_ref(t: &TrainError, outer: &ReportError) -> Self {
        match t {
            TrainError::NonFiniteGradient(_) | TrainError::Stats(_) => {
                AppError::Numerical(outer.to_string())
            }
            _ => AppError::Validation(outer.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for AppError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        match &e {
            checkpoint::CheckpointError::Io(_) => AppError::Io(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl From<StatsError> for AppError {
    fn from(e: StatsError) -> Self {
        AppError::Numerical(e.to_string())
    }
}

type Result<T> = std::result::Result<T, AppError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Resolved configuration: TOML file values overridden by CLI flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    master_seed: Option<u64>,
    workers: Option<usize>,
    schedule: Option<String>,
    batch_size: Option<usize>,
    runs: Option<usize>,
    lm_epochs: Option<usize>,
    lm_batch_size: Option<usize>,
    encoder: Option<EncoderConfig>,
    optimizer: Option<OptimizerHyper>,
    synthetic: Option<SyntheticConfig>,
}

#[derive(Args, Clone, Debug)]
struct CommonOpts {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all derived randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers (also settable via WORDSIG_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

struct Resolved {
    config: AppConfig,
    master_seed: u64,
    workers: usize,
    schedule: Schedule,
    hyper: OptimizerHyper,
    encoder: EncoderConfig,
    batch_size: usize,
    runs: usize,
    lm_epochs: usize,
    lm_batch_size: usize,
}

impl Resolved {
    /// Stable digest of everything that influences training numerics.
    fn config_hash(&self) -> String {
        let doc = serde_json::json!({
            "master_seed": self.master_seed,
            "schedule": self.schedule,
            "optimizer": self.hyper,
            "encoder": self.encoder,
            "batch_size": self.batch_size,
        });
        let mut hasher = Sha256::new();
        hasher.update(doc.to_string().as_bytes());
        checkpoint::hex_string(&hasher.finalize())
    }
}

fn resolve(common: &CommonOpts, schedule_flag: Option<&str>) -> Result<Resolved> {
    let config: AppConfig = match &common.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| AppError::Io(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&raw)
                .map_err(|e| AppError::Validation(format!("bad config {}: {e}", path.display())))?
        }
        None => AppConfig::default(),
    };
    let env_workers = std::env::var("WORDSIG_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let schedule_name = schedule_flag
        .map(str::to_string)
        .or_else(|| config.schedule.clone())
        .unwrap_or_else(|| "default".to_string());
    let schedule = Schedule::by_name(&schedule_name)
        .ok_or_else(|| AppError::Validation(format!("unknown schedule '{schedule_name}'")))?;
    let encoder = config.encoder.clone().unwrap_or_default();
    encoder
        .validate()
        .map_err(|e| AppError::Validation(e.to_string()))?;
    let hyper = config.optimizer.clone().unwrap_or_default();
    hyper.validate().map_err(AppError::from)?;
    Ok(Resolved {
        master_seed: common.seed.or(config.master_seed).unwrap_or(0),
        workers: common.workers.or(env_workers).or(config.workers).unwrap_or(1),
        schedule,
        hyper,
        encoder,
        batch_size: config.batch_size.unwrap_or(32),
        runs: config.runs.unwrap_or(10),
        lm_epochs: config.lm_epochs.unwrap_or(10),
        lm_batch_size: config.lm_batch_size.unwrap_or(16),
        config,
    })
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "wordsig", version, about = "Per-word signal prediction from recurrent language models")]
struct Cli {
    #[command(flatten)]
    common: CommonOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic word-signal dataset with known structure.
    SynthData {
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that a dataset file loads and report its dimensions.
    ValidateData {
        #[arg(long)]
        data: PathBuf,
    },
    /// Pretrain the bidirectional language model on a dataset's sentences.
    LmTrain {
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// One training run for one signal set.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Results directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated signals entering the loss, e.g. N400,P600.
        #[arg(long)]
        signals: String,
        /// Signal under evaluation; defaults to the first of --signals.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Train many variations over many paired splits.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "erp" for all 63 combinations, or comma-separated signal sets
        /// separated by ';' (e.g. "N400;N400,P600").
        #[arg(long, default_value = "erp")]
        variations: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Aggregate a results directory into summary tables and curve files.
    Report {
        /// Results directory written by train/sweep.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// FDR level for significance markers.
        #[arg(long, default_value_t = 0.01)]
        q: f64,
        /// Dataset for the signal correlation table (optional).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_signals(spec: &str) -> Result<Vec<Signal>> {
    spec.split(',')
        .map(|s| s.trim().parse::<Signal>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| AppError::Validation(e.to_string()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(data::load_word_signals(path)?)
}

fn dataset_vocab(dataset: &Dataset) -> Vocabulary {
    let sents: Vec<Vec<String>> = dataset
        .sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.text.clone()).collect())
        .collect();
    Vocabulary::build(sents.iter().map(|s| s.as_slice()))
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    format: String,
    encoder: EncoderConfig,
    vocab: Vocabulary,
    config_hash: String,
    nll: Vec<f64>,
}

fn load_encoder(path: &Path) -> Result<(EncoderConfig, Vocabulary, ParameterSet<f32>)> {
    let (header, params) = checkpoint::load::<f32>(path)?;
    let mut header: EncoderHeader = serde_json::from_str(&header)
        .map_err(|e| AppError::Validation(format!("bad encoder header: {e}")))?;
    header.vocab.rebuild_index();
    Ok((header.encoder, header.vocab, params))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out } => {
            let resolved = resolve(&cli.common, None)?;
            let cfg = resolved.config.synthetic.clone().unwrap_or_default();
            cfg.validate()?;
            let (dataset, truth) = data::generate_synthetic(&cfg, resolved.master_seed)?;
            data::save_word_signals(&out, &dataset)?;
            println!(
                "wrote {} sentences, {} participants, {} frames to {}",
                dataset.sentences.len(),
                dataset.participants.len(),
                dataset.frame_count(),
                out.display()
            );
            for (sig, var) in &truth.signal_variance {
                println!("{sig}: variance {var:.4}, pove ceiling {:.4}", truth.pove_ceiling[sig]);
            }
            Ok(())
        }
        Command::ValidateData { data } => {
            let dataset = load_dataset(&data)?;
            let content: usize = dataset
                .sentences
                .iter()
                .map(|s| s.tokens.iter().filter(|t| t.is_content()).count())
                .sum();
            println!(
                "{}: {} sentences, {} content words, {} participants, signals [{}], {} frames",
                data.display(),
                dataset.sentences.len(),
                content,
                dataset.participants.len(),
                dataset
                    .signals
                    .iter()
                    .map(|s| s.name())
                    .collect::<Vec<_>>()
                    .join(", "),
                dataset.frame_count()
            );
            Ok(())
        }
        Command::LmTrain { data, out, epochs } => {
            let resolved = resolve(&cli.common, None)?;
            let dataset = load_dataset(&data)?;
            let vocab = dataset_vocab(&dataset);
            let corpus: Vec<Vec<usize>> = dataset
                .sentences
                .iter()
                .map(|s| vocab.ids(&s.tokens.iter().map(|t| t.text.clone()).collect::<Vec<_>>()))
                .filter(|ids| ids.len() >= 2)
                .collect();
            let epochs = epochs.or(resolved.config.lm_epochs).unwrap_or(resolved.lm_epochs);
            let (params, history) = train::lm_train(
                &corpus,
                &vocab,
                &resolved.encoder,
                resolved.master_seed,
                epochs,
                resolved.lm_batch_size,
                &resolved.hyper,
            )?;
            let header = serde_json::to_string(&EncoderHeader {
                format: "wordsig-encoder/1".to_string(),
                encoder: resolved.encoder.clone(),
                vocab,
                config_hash: resolved.config_hash(),
                nll: history.nll.clone(),
            })
            .map_err(|e| AppError::Io(e.to_string()))?;
            checkpoint::save(&out, &header, &params)?;
            let last = history.nll.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs on {} sentences; final NLL {last:.4}; wrote {}",
                epochs,
                corpus.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, encoder, out, signals, target, run, schedule } => {
            let resolved = resolve(&cli.common, schedule.as_deref())?;
            let dataset = load_dataset(&data)?;
            let (enc_cfg, vocab, enc_params) = load_encoder(&encoder)?;
            let included = parse_signals(&signals)?;
            let target = match target {
                Some(t) => t.parse::<Signal>().map_err(|e| AppError::Validation(e.to_string()))?,
                None => included[0],
            };
            let variation = TrainingVariation::new(included, target)?;
            let opts = TrainOptions {
                master_seed: resolved.master_seed,
                run_index: run,
                schedule: resolved.schedule.clone(),
                hyper: resolved.hyper.clone(),
                batch_size: resolved.batch_size,
            };
            let (result, params) =
                train::train_run(&dataset, &vocab, &enc_cfg, &enc_params, &variation, &opts)?;
            let store = RunStore::new(&out);
            let dir = store.save_run(&result, &params, opts.master_seed, &resolved.config_hash())?;
            for (sig, pove) in &result.final_pove {
                println!("{sig}: held-out POVE {pove:.4}");
            }
            println!("run saved to {}", dir.display());
            Ok(())
        }
        Command::Sweep { data, encoder, out, variations, runs, schedule } => {
            let resolved = resolve(&cli.common, schedule.as_deref())?;
            let dataset = load_dataset(&data)?;
            let (enc_cfg, vocab, enc_params) = load_encoder(&encoder)?;
            let vars: Vec<TrainingVariation> = if variations == "erp" {
                train::sweep_erp_combinations()
            } else {
                let mut parsed = Vec::new();
                for set in variations.split(';') {
                    let included = parse_signals(set)?;
                    let target = included[0];
                    parsed.push(TrainingVariation::new(included, target)?);
                }
                parsed
            };
            let runs = runs.unwrap_or(resolved.runs);
            let jobs = report::sweep_jobs(&vars, runs);
            let store = RunStore::new(&out);
            let opts = TrainOptions {
                master_seed: resolved.master_seed,
                run_index: 0,
                schedule: resolved.schedule.clone(),
                hyper: resolved.hyper.clone(),
                batch_size: resolved.batch_size,
            };
            let summary = report::execute_sweep(
                &store,
                &dataset,
                &vocab,
                &enc_cfg,
                &enc_params,
                &jobs,
                &opts,
                &resolved.config_hash(),
                resolved.workers,
            )?;
            println!(
                "sweep complete: {} runs executed, {} already done, results in {}",
                summary.executed,
                summary.skipped,
                out.display()
            );
            Ok(())
        }
        Command::Report { results, out, q, data } => {
            if !(0.0..1.0).contains(&q) || q <= 0.0 {
                return Err(AppError::Validation(format!("q = {q} outside (0,1)")));
            }
            let store = RunStore::new(&results);
            let files = report::write_report(&store, &out, q)?;
            if let Some(path) = data {
                let dataset = load_dataset(&path)?;
                let corr = report::correlation_matrix(&dataset)
                    .map_err(AppError::from)?;
                let corr_path = out.join("correlations.tsv");
                report::write_correlations(&corr_path, &corr)?;
                println!("wrote {}", corr_path.display());
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
