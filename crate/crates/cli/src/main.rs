//! `flavars`: pretraining, evaluation and dataset tooling.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flavars::config::RunConfig;
use flavars::datapipe::client::{caption_ground_batch, ClientConfig, GroundingClient, MockTransport, Status, Transport};
use flavars::datapipe::synth::{generate_synthetic, SynthConfig};
use flavars::datapipe::{build_vocab, filter_top_fraction, generate_splits, write_atomic, Dataset, SplitSpec};
use flavars::evaluation::{evaluate_split, Protocol};
use flavars::training::{fit, load_checkpoint, resolve_model_config, FitOptions};

#[derive(Parser)]
#[command(name = "flavars", version, about = "Vision-language-location pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain all encoders on the train split of the configured dataset.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint with one downstream protocol.
    Eval(EvalArgs),
    /// Dataset tooling.
    #[command(subcommand)]
    Data(DataCommand),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// knn, zeroshot or seg.
    protocol: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split file (overrides the config's).
    #[arg(long)]
    split: Option<PathBuf>,
    /// Evaluation dataset (overrides the config's).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file; defaults to `<out_dir>/report-<protocol>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Load even if the checkpoint was trained with a different architecture.
    #[arg(long)]
    ignore_fingerprint: bool,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Keep the top-scoring fraction of records.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        fraction: f64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a reproducible train/val/test split.
    Splits {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.7,0.1,0.2")]
        fractions: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Request grounded captions for every record.
    Ground {
        #[arg(long)]
        manifest: PathBuf,
        /// Output dataset directory; defaults to updating the input in place.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "http://localhost:8000/v1/ground")]
        endpoint: String,
        #[arg(long)]
        model: Option<String>,
        /// Response cache directory; defaults to `<dataset>/grounding-cache`.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_in_flight: usize,
        /// Answer from a local echo service instead of the network.
        #[arg(long)]
        mock_vlm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Re-ground records that already have a grounded caption.
        #[arg(long)]
        force: bool,
    },
    /// Build the vocabulary from captions.
    Vocab {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to the train ids of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        max_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        image_size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn refuse_overwrite(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(Failure::usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(Failure::usage)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn pretrain(args: PretrainArgs) -> CmdResult {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let dataset = Dataset::load(&cfg.data.dataset).map_err(Failure::usage)?;
    let split = cfg.splits(&dataset).map_err(Failure::usage)?;
    if args.resume.is_none() && cfg.out_dir.join(flavars::training::LOG_FILE).exists() && !args.force {
        return Err(Failure::usage(format!(
            "{} already holds a run; pass --force to overwrite or --resume to continue",
            cfg.out_dir.display()
        )));
    }
    if let Some(r) = &args.resume {
        if !r.exists() {
            return Err(Failure::usage(format!("checkpoint {} does not exist", r.display())));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(Failure::runtime)?;
    split
        .save(&cfg.out_dir.join("splits.json"))
        .map_err(Failure::runtime)?;
    let options = FitOptions {
        out_dir: cfg.out_dir.clone(),
        resume: args.resume,
        force: args.force,
    };
    let outcome = fit(&cfg.model, &cfg.train, &dataset, &split, &options).map_err(|e| match e {
        flavars::Error::Config(_) | flavars::Error::Fingerprint { .. } => Failure::usage(e),
        other => Failure::runtime(other),
    })?;
    if let Some(last) = outcome.history.last() {
        println!(
            "step {}  total {:.4}  mim {:.4}  mlm {:.4}  itm {:.4}  c_it {:.4}  c_il {:.4}",
            last.step, last.total, last.mim, last.mlm, last.itm, last.c_it, last.c_il
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("loss log:   {}", outcome.log_path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    let protocol: Protocol = args.protocol.parse().map_err(Failure::usage)?;
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(d) = args.dataset {
        cfg.data.dataset = d;
    }
    if let Some(s) = args.split {
        cfg.data.splits = Some(s);
    }
    let out = args
        .out
        .unwrap_or_else(|| cfg.out_dir.join(format!("report-{}.json", protocol.name())));
    refuse_overwrite(&out, args.force)?;
    if !args.checkpoint.exists() {
        return Err(Failure::usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let probe = load_checkpoint(&args.checkpoint, None, true).map_err(Failure::usage)?;
    let expected = resolve_model_config(&cfg.model, &probe.vocab).map_err(Failure::usage)?;
    let ck = load_checkpoint(&args.checkpoint, Some(&expected), args.ignore_fingerprint).map_err(Failure::usage)?;
    let dataset = Dataset::load(&cfg.data.dataset).map_err(Failure::usage)?;
    let split = cfg.splits(&dataset).map_err(Failure::usage)?;
    let report = evaluate_split(protocol, &ck.model, &ck.vocab, &dataset, &split, &cfg.eval).map_err(Failure::runtime)?;
    report.save(&out).map_err(Failure::runtime)?;
    println!("| protocol | metric   |  value | per class");
    println!("{}", report.table_row());
    println!("report: {}", out.display());
    Ok(())
}

fn parse_fractions(s: &str) -> Result<[f64; 3], Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("--fractions {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Failure::usage(format!("--fractions needs three values, got {s:?}")))
}

fn data(cmd: DataCommand) -> CmdResult {
    match cmd {
        DataCommand::Filter { manifest, fraction, out, force } => {
            refuse_overwrite(&out.join(flavars::datapipe::MANIFEST_FILE), force)?;
            let ds = Dataset::load(&manifest).map_err(Failure::usage)?;
            let kept = filter_top_fraction(&ds.records, fraction).map_err(Failure::usage)?;
            let root = std::fs::canonicalize(&ds.root).map_err(Failure::runtime)?;
            let absolute = |p: &str| root.join(p).display().to_string();
            let records = kept
                .into_iter()
                .map(|mut r| {
                    r.image_path = absolute(&r.image_path);
                    r.mask_path = r.mask_path.as_deref().map(absolute);
                    r
                })
                .collect();
            let mut filtered = Dataset {
                root: out.clone(),
                manifest: ds.manifest.clone(),
                records,
            };
            filtered.save().map_err(Failure::runtime)?;
            println!("kept {} of {} records -> {}", filtered.records.len(), ds.records.len(), out.display());
            Ok(())
        }
        DataCommand::Splits { manifest, seed, fractions, out, force } => {
            refuse_overwrite(&out, force)?;
            let fr = parse_fractions(&fractions)?;
            let ds = Dataset::load(&manifest).map_err(Failure::usage)?;
            let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
            let spec: SplitSpec = generate_splits(&ids, seed, fr).map_err(Failure::usage)?;
            spec.save(&out).map_err(Failure::runtime)?;
            println!(
                "train {} / val {} / test {} -> {}",
                spec.train.len(),
                spec.val.len(),
                spec.test.len(),
                out.display()
            );
            Ok(())
        }
        DataCommand::Ground {
            manifest,
            out,
            endpoint,
            model,
            cache,
            max_in_flight,
            mock_vlm,
            seed,
            force,
        } => {
            let mut ds = Dataset::load(&manifest).map_err(Failure::usage)?;
            let mut config = ClientConfig::new(endpoint, cache.unwrap_or_else(|| ds.root.join("grounding-cache")));
            config.model = model;
            config.max_in_flight = max_in_flight;
            config.force = force;
            config.jitter_seed = seed;
            let transport: Box<dyn Transport> = if mock_vlm {
                Box::new(MockTransport::echo())
            } else {
                http_transport(&config)?
            };
            let client = GroundingClient::new(config, transport).map_err(Failure::usage)?;
            let source = ds.clone();
            let report = caption_ground_batch(&mut ds.records, |r| source.load_rgb(r), &client).map_err(Failure::runtime)?;
            if let Some(dir) = out {
                let root = std::fs::canonicalize(&source.root).map_err(Failure::runtime)?;
                for r in &mut ds.records {
                    r.image_path = root.join(&r.image_path).display().to_string();
                    r.mask_path = r.mask_path.as_deref().map(|m| root.join(m).display().to_string());
                }
                ds.root = dir;
            }
            ds.save().map_err(Failure::runtime)?;
            for r in report.records.iter().filter(|r| r.status == Status::Failed) {
                eprintln!("failed {}: {}", r.id, r.error.as_deref().unwrap_or("unknown error"));
            }
            println!(
                "succeeded {}  cached {}  skipped {}  failed {}  calls {}",
                report.count(Status::Succeeded),
                report.count(Status::Cached),
                report.count(Status::Skipped),
                report.count(Status::Failed),
                report.network_calls()
            );
            if report.count(Status::Failed) > 0 {
                return Err(Failure::runtime("some records could not be grounded"));
            }
            Ok(())
        }
        DataCommand::Vocab { manifest, split, max_size, out, force } => {
            refuse_overwrite(&out, force)?;
            let ds = Dataset::load(&manifest).map_err(Failure::usage)?;
            let captions: Vec<String> = match split {
                Some(p) => {
                    let spec = SplitSpec::load(&p).map_err(Failure::usage)?;
                    ds.select(&spec.train)
                        .map_err(Failure::usage)?
                        .into_iter()
                        .map(|r| r.caption)
                        .collect()
                }
                None => ds.records.iter().map(|r| r.caption.clone()).collect(),
            };
            let vocab = build_vocab(&captions, max_size).map_err(Failure::usage)?;
            let bytes = serde_json::to_vec_pretty(&vocab).map_err(Failure::runtime)?;
            write_atomic(&out, &bytes).map_err(Failure::runtime)?;
            println!("{} tokens, fingerprint {} -> {}", vocab.len(), vocab.fingerprint(), out.display());
            Ok(())
        }
        DataCommand::Synth { out, samples, image_size, seed, force } => {
            refuse_overwrite(&out.join(flavars::datapipe::MANIFEST_FILE), force)?;
            let ds = generate_synthetic(&out, &SynthConfig { samples, image_size, seed }).map_err(Failure::usage)?;
            println!("{} samples -> {}", ds.records.len(), out.display());
            Ok(())
        }
    }
}

#[cfg(feature = "http")]
fn http_transport(config: &ClientConfig) -> Result<Box<dyn Transport>, Failure> {
    let t = flavars::datapipe::client::HttpTransport::from_env(config).map_err(Failure::usage)?;
    Ok(Box::new(t))
}

#[cfg(not(feature = "http"))]
fn http_transport(_config: &ClientConfig) -> Result<Box<dyn Transport>, Failure> {
    Err(Failure::usage("built without the http feature; use --mock-vlm"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Data(d) => data(d),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
