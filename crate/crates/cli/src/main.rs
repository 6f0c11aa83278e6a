use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teran::config::RunConfig;
use teran::data::generate_synthetic;
use teran::numerics::{Fault, OpKind};
use teran::pipeline;
use teran::Error;

#[derive(Parser)]
#[command(name = "teran", version, about = "Region-word alignment for image-text retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a log into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Report Recall@K and NDCG in both retrieval directions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second model whose scores are averaged with the first.
        #[arg(long)]
        checkpoint_b: Option<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export word-to-region groundings for the given image ids (all when none).
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        ids: Vec<String>,
    },
    /// Finite-difference check of every layer and the full loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale the adjoints of one op kind, e.g. `softmax:1.1`.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write a synthetic corpus with planted region-word correspondences.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> teran::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    Ok(cfg)
}

fn parse_fault(text: &str) -> teran::Result<Fault> {
    let (name, factor) = text.split_once(':').unwrap_or((text, "2"));
    let kind = match name {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "add_row" => OpKind::AddRow,
        "relu" => OpKind::Relu,
        "softmax" => OpKind::Softmax,
        "layer_norm" => OpKind::LayerNorm,
        "cosine" => OpKind::Cosine,
        "normalize_rows" => OpKind::NormalizeRows,
        "gather" => OpKind::Gather,
        "sparse" => OpKind::Sparse,
        _ => return Err(Error::Config(format!("unknown fault op {name:?}"))),
    };
    let factor = factor
        .parse()
        .map_err(|_| Error::Config(format!("bad fault factor {factor:?}")))?;
    Ok(Fault { kind, factor })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn run(cli: Cli) -> teran::Result<()> {
    match cli.command {
        Command::Train { common, out, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = out
                .or_else(|| cfg.paths.out_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.out_dir".into()))?;
            let summary = pipeline::train(&cfg, &out, checkpoint.as_deref(), &mut |r| {
                println!(
                    "epoch {:>3}  steps {:>6}  lr {:.1e}  loss {:.5}  i2t R@1 {:.3}  t2i R@1 {:.3}  ndcg {:.4}{}",
                    r.epoch,
                    r.steps,
                    r.lr,
                    r.mean_loss,
                    r.validation.sentence_retrieval.r1,
                    r.validation.image_retrieval.r1,
                    r.score,
                    if r.best { "  *" } else { "" }
                );
            })?;
            println!(
                "trained {} steps, best validation ndcg {:.4}, best checkpoint {}",
                summary.steps,
                summary.best_score,
                summary.best_checkpoint.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            checkpoint_b,
            out,
        } => {
            let cfg = load_config(&common)?;
            let result = pipeline::evaluate(&cfg, &checkpoint, checkpoint_b.as_deref())?;
            eprintln!(
                "encoded {} images and {} captions",
                result.images_encoded, result.captions_encoded
            );
            let json = to_json(&result.report);
            // A closed pipe (e.g. `| head`) is not an error for a report dump.
            let _ = writeln!(std::io::stdout().lock(), "{json}");
            if let Some(path) = out {
                write(&path, &json)?;
            }
        }
        Command::Align {
            common,
            checkpoint,
            out,
            ids,
        } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::align(&cfg, &checkpoint, &ids, &out)?;
            println!("wrote {} grounding files to {}", summary.files.len(), out.display());
            if let Some(acc) = summary.accuracy() {
                println!(
                    "planted grounding accuracy {:.4} ({}/{})",
                    acc, summary.planted_correct, summary.planted_words
                );
            }
        }
        Command::Gradcheck { common, fault } => {
            let cfg = load_config(&common)?;
            let fault = fault.as_deref().map(parse_fault).transpose()?;
            let summary = pipeline::gradcheck(&cfg, fault)?;
            print!("{}", summary.table());
            println!("{} checks in {:.2} s", summary.reports.len(), summary.seconds);
            let failed = summary.reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::CheckFailed(format!("{failed} gradient checks failed")));
            }
        }
        Command::GenSynth { common, out } => {
            let cfg = load_config(&common)?;
            let manifest = generate_synthetic(&cfg.synthetic, &out)?;
            println!(
                "wrote {} images to {}",
                manifest.items.len(),
                out.join("manifest.jsonl").display()
            );
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> teran::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Vocabulary { .. } => 3,
        Error::CheckFailed(_) => 4,
        Error::Shape { .. } | Error::Numeric { .. } => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
