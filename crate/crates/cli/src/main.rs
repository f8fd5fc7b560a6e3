//! `patchrank`: file-to-file commands for each pipeline stage.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 I/O error,
//! 4 non-finite training loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchrank::fusion::{FusionTrainConfig, DEFAULT_HIDDEN};
use patchrank::head::format_training_log;
use patchrank::pipeline::{harvest_fusion_samples, pooled_samples, rerank_lists, search_queries};
use patchrank::synth::{write_dataset, SynthConfig};
use patchrank::tsv::{format_ranked, format_reranked, parse_ranked};
use patchrank::{
    build_store, evaluate, load_manifest, train_fusion, train_head, DescriptorStore, Error, FusionModel,
    ProjectionHead, Split, TrainerConfig, DEFAULT_K,
};

#[derive(Parser)]
#[command(
    name = "patchrank",
    version,
    about = "Two-stage landmark retrieval over stored feature maps"
)]
struct Cli {
    /// Worker threads (default: all cores). PATCHRANK_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a descriptor store from the manifest's index entries.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Projection head applied to every pooled descriptor.
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Rank the store against every query entry of the manifest.
    Search {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short, default_value_t = DEFAULT_K)]
        k: usize,
        /// Must be the head the store was built with.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Re-score ranked lists by patch matching and fuse the scores.
    Rerank {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        fusion: FusionChoice,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Train a projection head on the pooled descriptors of a split.
    TrainHead(TrainHeadArgs),
    /// Train the MLP fusion on neighbours harvested from the train split.
    TrainFusion(TrainFusionArgs),
    /// Print mAP@k of ranked lists against the manifest's labels.
    Evaluate {
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short, default_value_t = DEFAULT_K)]
        k: usize,
        /// Also write the report as JSON Lines.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Generate a synthetic dataset: manifest.tsv plus features/*.prfm.
    Synth(SynthArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FusionChoice {
    /// Fusion checkpoint written by train-fusion.
    #[arg(long)]
    fusion: Option<PathBuf>,
    /// Linear fusion weight on the global score.
    #[arg(long)]
    alpha: Option<f32>,
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Per-epoch log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1.5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 4)]
    classes_per_batch: usize,
    #[arg(long, default_value_t = 4)]
    samples_per_class: usize,
    /// Output dimension; defaults to the input dimension.
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Head used for the stage-1 neighbour search.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Neighbours harvested per train document.
    #[arg(long, short, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 7)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    /// Shuffle prototype positions independently for every member.
    #[arg(long)]
    permute: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Consecutive classes sharing one pooled descriptor.
    #[arg(long, default_value_t = 1)]
    group_size: usize,
    #[arg(long)]
    signal_rank: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f32,
    #[arg(long, default_value_t = 2)]
    queries_per_class: usize,
    #[arg(long, default_value_t = 2)]
    train_per_class: usize,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
        .map_err(|_| format!("unknown split {s:?}; expected index, query or train"))
}

enum Failure {
    Lib(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) => match e.root() {
                Error::Io { .. } | Error::MissingFeatureMap(_) => 3,
                Error::NonFiniteLoss(_) => 4,
                _ => 2,
            },
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn log_path(output: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut p = output.as_os_str().to_owned();
        p.push(".log");
        p.into()
    })
}

fn load_head(path: Option<&Path>) -> Result<Option<ProjectionHead>, Error> {
    path.map(ProjectionHead::load).transpose()
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match std::env::var("PATCHRANK_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("PATCHRANK_THREADS must be a thread count, got {v:?}")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest { manifest, output, head } => {
            let manifest = load_manifest(&manifest)?;
            let head = load_head(head.as_deref())?;
            let outcome = build_store(&manifest, head.as_ref())?;
            outcome.store.save(&output)?;
            for s in &outcome.skipped {
                println!("skipped\t{}\t{}", s.id, s.reason);
            }
            eprintln!(
                "stored {} descriptors, skipped {}",
                outcome.store.len(),
                outcome.skipped.len()
            );
        }
        Command::Search {
            store,
            manifest,
            k,
            head,
            output,
        } => {
            let store = DescriptorStore::load(&store)?;
            let manifest = load_manifest(&manifest)?;
            let head = load_head(head.as_deref())?;
            let lists = search_queries(&manifest, &store, head.as_ref(), k)?;
            write(&output, format_ranked(&lists))?;
        }
        Command::Rerank {
            store,
            ranked,
            manifest,
            fusion,
            output,
        } => {
            let model = match (fusion.fusion, fusion.alpha) {
                (Some(path), _) => FusionModel::load(path)?,
                (None, Some(alpha)) => FusionModel::linear(alpha)?,
                (None, None) => unreachable!("clap requires one fusion source"),
            };
            let store = DescriptorStore::load(&store)?;
            let manifest = load_manifest(&manifest)?;
            let lists = parse_ranked(&read_text(&ranked)?, DEFAULT_K)?;
            let out = rerank_lists(&manifest, &store, &lists, &model)?;
            write(&output, format_reranked(&out))?;
        }
        Command::TrainHead(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let samples = pooled_samples(&manifest, a.split)?;
            let config = TrainerConfig {
                learning_rate: a.lr,
                adam_epsilon: a.epsilon,
                epochs: a.epochs,
                margin: a.margin,
                classes_per_batch: a.classes_per_batch,
                samples_per_class: a.samples_per_class,
                seed: a.seed,
                out_dim: a.out_dim,
                ..Default::default()
            };
            let outcome = train_head(&config, &samples)?;
            outcome.head.save(&a.output)?;
            write(&log_path(&a.output, a.log), format_training_log(&outcome.log))?;
        }
        Command::TrainFusion(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let head = load_head(a.head.as_deref())?;
            let samples = harvest_fusion_samples(&manifest, head.as_ref(), a.k)?;
            let config = FusionTrainConfig {
                learning_rate: a.lr,
                epochs: a.epochs,
                seed: a.seed,
                hidden: a.hidden,
            };
            let outcome = train_fusion(&samples, &config)?;
            outcome.model.save(&a.output)?;
            let log: String = outcome
                .losses
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{}\t{l}\n", i + 1))
                .collect();
            write(&log_path(&a.output, a.log), log)?;
            eprintln!("{} samples, final loss {}", samples.len(), outcome.final_loss);
        }
        Command::Evaluate {
            ranked,
            manifest,
            k,
            jsonl,
        } => {
            let manifest = load_manifest(&manifest)?;
            let lists = parse_ranked(&read_text(&ranked)?, k)?;
            let report = evaluate(&lists, &manifest)?;
            print!("{}", report.to_tsv());
            if let Some(path) = jsonl {
                write(&path, report.to_jsonl())?;
            }
        }
        Command::Synth(a) => {
            let config = SynthConfig {
                classes: a.classes,
                per_class: a.per_class,
                height: a.height,
                width: a.width,
                channels: a.channels,
                noise: a.noise,
                permute: a.permute,
                seed: a.seed,
                group_size: a.group_size,
                signal_rank: a.signal_rank,
                mean_scale: a.mean_scale,
                queries_per_class: a.queries_per_class,
                train_per_class: a.train_per_class,
            };
            let manifest = write_dataset(&config, &a.output)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads(cli.threads).and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(failure.exit_code())
        }
    }
}
