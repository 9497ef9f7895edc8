//! `semicontrast`: config-driven entry point for corpus generation, the
//! individual training stages, evaluation, the experiment matrix, the loss
//! self-checks, the complexity benchmark and plotting.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
//! Failures print one JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use log::warn;

use semicontrast::config::{parse_config, parse_config_str, ExperimentConfig, Variant, DEFAULTS_TOML};
use semicontrast::data::{write_corpus_dir, DatasetSplits, Volume};
use semicontrast::eval::{
    average_scores, embedding_separation, emit_plots, evaluate_volume, export_embeddings, DiceScores, Separation,
};
use semicontrast::losses::SetSpec;
use semicontrast::model::{build_network, load_checkpoint, save_checkpoint, NetworkState};
use semicontrast::training::{
    embed_seed, finetune, finetune_seed, fold_splits, global_seed, init_seed, load_corpus, local_seed,
    local_stage_kind, log_to_tsv, pretrain_global, pretrain_local, run_experiment, LabelUse, PreparedCorpus,
    SlicePool, StageConfig, StageKind, StageRun,
};
use semicontrast::verify::{bench_complexity, verify_losses, BenchRow};
use semicontrast::Error;

/// Environment variable that replaces `output_dir` unless it is set with
/// `--set`.
const OUTPUT_ROOT_ENV: &str = "SEMICONTRAST_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "semicontrast", version, about = "Semi-supervised contrastive pre-training for segmentation")]
struct Cli {
    /// Experiment config (TOML). Omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set losses.tau=0.2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Experiment seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LocalArg {
    Stride,
    Block,
    Selfsup,
}

impl LocalArg {
    /// The matrix variant whose stage this command reproduces.
    fn variant(self, warm_start: bool) -> Variant {
        match (self, warm_start) {
            (LocalArg::Stride, false) => Variant::LocalStride,
            (LocalArg::Stride, true) => Variant::GlobalLocalStride,
            (LocalArg::Block, false) => Variant::LocalBlock,
            (LocalArg::Block, true) => Variant::GlobalLocalBlock,
            (LocalArg::Selfsup, _) => Variant::GlobalLocalSelf,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it as an array directory.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Global contrastive pre-training on one fold's training volumes.
    PretrainGlobal {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Checkpoint path; the epoch log is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local contrastive pre-training, from a fresh network or `--init`.
    PretrainLocal {
        #[arg(long, value_enum)]
        strategy: LocalArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Label fraction; defaults to the first configured one.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning on the labeled training volumes.
    Finetune {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-set Dice of a checkpoint, printed as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        fraction: Option<f64>,
        /// Also export level-1 embeddings of the test slices as TSV.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Run (or resume) the fold x fraction x variant matrix.
    RunMatrix,
    /// Oracle, gradient and invariance checks of the losses.
    VerifyLosses,
    /// Interaction counts and wall times per strategy and map side.
    BenchComplexity {
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 160])]
        sides: Vec<usize>,
        /// Largest side that is also timed.
        #[arg(long, default_value_t = 160)]
        time_up_to: usize,
        /// Also write the rows to this TSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render plots of a report directory into `<dir>/plots`.
    Plot {
        /// Report directory; defaults to the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Config { key: String, message: String },
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config { .. } => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn json_line(&self) -> String {
        let value = match self {
            Failure::Usage(m) => serde_json::json!({"status": "error", "kind": "usage", "code": 1, "message": m}),
            Failure::Config { key, message } => {
                serde_json::json!({"status": "error", "kind": "config", "code": 2, "key": key, "message": message})
            }
            Failure::Runtime(m) => serde_json::json!({"status": "error", "kind": "runtime", "code": 3, "message": m}),
        };
        value.to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { key, message } => Failure::Config { key, message },
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !overrides.iter().any(|o| o.trim_start().starts_with("output_dir")) {
            overrides.insert(0, format!("output_dir={root:?}"));
        }
    }
    let cfg = match &cli.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Config { key: "config".into(), message: format!("config file {} not found", path.display()) });
            }
            parse_config(path, &overrides)?
        }
        None => parse_config_str(DEFAULTS_TOML, &overrides)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Data {
    volumes: Vec<Volume>,
    corpus: PreparedCorpus,
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    let volumes = load_corpus(cfg)?;
    let corpus = PreparedCorpus::new(&volumes, cfg.dataset.resolution)?;
    Ok(Data { volumes, corpus })
}

fn fraction_or_default(cfg: &ExperimentConfig, fraction: Option<f64>) -> CliResult<f64> {
    let f = fraction.unwrap_or(cfg.experiment.label_fractions[0]);
    if !(f > 0.0 && f <= 1.0) {
        return Err(Failure::Usage(format!("--fraction must be in (0, 1], got {f}")));
    }
    Ok(f)
}

fn check_fold(cfg: &ExperimentConfig, fold: usize) -> CliResult<()> {
    if fold >= cfg.experiment.folds {
        return Err(Failure::Usage(format!("--fold {fold} out of range for {} folds", cfg.experiment.folds)));
    }
    Ok(())
}

fn start_network(cfg: &ExperimentConfig, fold: usize, init: Option<&Path>) -> CliResult<(NetworkState, String)> {
    match init {
        Some(path) => Ok(load_checkpoint(path, Some(&cfg.model))?),
        None => {
            let net = build_network(&cfg.model, init_seed(cfg, fold))?;
            let hash = semicontrast::model::content_hash(&semicontrast::model::checkpoint_bytes(&net)?);
            Ok((net, hash))
        }
    }
}

fn finish_stage(mut run: StageRun, parent: String, out: &Path, log_name: &str) -> CliResult<()> {
    run.net.parent_hash = Some(parent);
    let dir = out.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(log_name);
    std::fs::write(&log_path, log_to_tsv(&run.log)).map_err(|e| Error::io(&log_path, e))?;
    let hash = save_checkpoint(&run.net, out)?;
    println!("{}\t{}", out.display(), hash);
    Ok(())
}

fn splits_for(cfg: &ExperimentConfig, data: &Data, fold: usize, fraction: f64) -> CliResult<DatasetSplits> {
    Ok(fold_splits(cfg, &data.volumes, fold, fraction)?)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let out_root = PathBuf::from(&cfg.output_dir);
    match &cli.command {
        Command::GenData { out } => {
            let dir = out.clone().unwrap_or_else(|| out_root.join("corpus"));
            let volumes = load_corpus(&cfg)?;
            write_corpus_dir(&dir, &volumes)?;
            println!("wrote {} volumes to {}", volumes.len(), dir.display());
        }
        Command::PretrainGlobal { fold, out } => {
            check_fold(&cfg, *fold)?;
            let data = load_data(&cfg)?;
            let splits = splits_for(&cfg, &data, *fold, cfg.experiment.label_fractions[0])?;
            let (net, parent) = start_network(&cfg, *fold, None)?;
            let sc = StageConfig::from_experiment(&cfg, StageKind::Global, None, global_seed(&cfg, *fold));
            let run = pretrain_global(net, &data.corpus, &splits, &sc)?;
            let out = out.clone().unwrap_or_else(|| out_root.join(format!("fold{fold}/global/checkpoint.ckpt")));
            finish_stage(run, parent, &out, "epochs.tsv")?;
        }
        Command::PretrainLocal { strategy, fold, fraction, init, out } => {
            check_fold(&cfg, *fold)?;
            let fraction = fraction_or_default(&cfg, *fraction)?;
            let data = load_data(&cfg)?;
            let splits = splits_for(&cfg, &data, *fold, fraction)?;
            let variant = strategy.variant(init.is_some());
            let kind = variant.local_strategy().expect("local variants have a strategy");
            let (net, parent) = start_network(&cfg, *fold, init.as_deref())?;
            let seed = local_seed(&cfg, *fold, variant, fraction);
            let sc = StageConfig::from_experiment(&cfg, local_stage_kind(kind), Some(kind), seed);
            let run = pretrain_local(net, &data.corpus, &splits, &sc)?;
            let out = out
                .clone()
                .unwrap_or_else(|| out_root.join(format!("fold{fold}/frac{fraction}/{}/local.ckpt", variant.slug())));
            finish_stage(run, parent, &out, "local_epochs.tsv")?;
        }
        Command::Finetune { fold, fraction, init, out } => {
            check_fold(&cfg, *fold)?;
            let fraction = fraction_or_default(&cfg, *fraction)?;
            let data = load_data(&cfg)?;
            let splits = splits_for(&cfg, &data, *fold, fraction)?;
            let (net, parent) = start_network(&cfg, *fold, init.as_deref())?;
            let sc = StageConfig::from_experiment(&cfg, StageKind::Finetune, None, finetune_seed(&cfg, *fold, fraction));
            let run = finetune(net, &data.corpus, &splits, &sc)?;
            let out = out.clone().unwrap_or_else(|| out_root.join(format!("fold{fold}/frac{fraction}/finetune/finetuned.ckpt")));
            finish_stage(run, parent, &out, "finetune_epochs.tsv")?;
        }
        Command::Evaluate { checkpoint, fold, fraction, embeddings } => {
            check_fold(&cfg, *fold)?;
            let fraction = fraction_or_default(&cfg, *fraction)?;
            let data = load_data(&cfg)?;
            let splits = splits_for(&cfg, &data, *fold, fraction)?;
            let (net, hash) = load_checkpoint(checkpoint, Some(&cfg.model))?;
            let test = SlicePool::new(&data.corpus, &splits.test, LabelUse::Require)?;
            let scores: DiceScores =
                average_scores(&test.volumes().iter().map(|v| evaluate_volume(&net, v)).collect::<Result<Vec<_>, _>>()?);
            let mut separation: Option<Separation> = None;
            if let Some(path) = embeddings {
                let slices = test.volumes().concat();
                let table = export_embeddings(&net, &slices, cfg.experiment.embedding_cap, embed_seed(&cfg, *fold))?;
                std::fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))?;
                separation = embedding_separation(&table);
            }
            let report = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "hash": hash,
                "fold": fold,
                "fraction": fraction,
                "per_class_dice": scores.per_class,
                "mean_dice": scores.mean,
                "embedding": separation,
            });
            println!("{report}");
        }
        Command::RunMatrix => {
            let report = run_experiment(&cfg)?;
            print!("{}", report.table_markdown());
            let failed = report.cells.iter().filter(|c| c.status == semicontrast::training::CellStatus::Failed).count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} matrix cells failed; see result.json files under {}", out_root.display())));
            }
        }
        Command::VerifyLosses => {
            let summaries = verify_losses(cfg.seed)?;
            for s in &summaries {
                println!("{s}");
            }
            let failed: Vec<&str> = summaries.iter().filter(|s| !s.ok()).map(|s| s.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Runtime(format!("loss checks failed: {}", failed.join(", "))));
            }
        }
        Command::BenchComplexity { sides, time_up_to, out } => {
            let l = &cfg.losses;
            let specs = [
                SetSpec::full(),
                SetSpec::stride(2),
                SetSpec::stride(l.stride),
                SetSpec::block(8),
                SetSpec::block(l.block_size),
                SetSpec::grid(l.grid_points),
            ];
            let mut seen = Vec::new();
            let specs: Vec<SetSpec> = specs.into_iter().filter(|s| !seen.contains(s) && { seen.push(*s); true }).collect();
            let rows = bench_complexity(sides, &specs, *time_up_to, cfg.seed)?;
            let mut text = String::from(BenchRow::TSV_HEADER);
            text.push('\n');
            for r in &rows {
                text.push_str(&r.tsv_row());
                text.push('\n');
            }
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
            }
        }
        Command::Plot { dir } => {
            let dir = dir.clone().unwrap_or(out_root);
            let summary = emit_plots(&dir)?;
            for m in &summary.missing {
                warn!("missing {m}");
            }
            for p in &summary.written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", Failure::Usage(first).json_line());
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.json_line());
            ExitCode::from(f.code())
        }
    }
}
