//! Argument parsing and dispatch for the `vista` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use vista_core::checkpoint::{file_digest, Checkpoint, FORMAT_VERSION};
use vista_core::retrieval::FusionMethod;
use vista_core::train::Stage;
use vista_core::TokenOrder;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "vista", version, about = "Universal multi-modal embeddings on a desk-sized budget")]
pub struct Args {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: vista_core::Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionMethod, String> {
    s.parse().map_err(|e: vista_core::Error| e.to_string())
}

fn parse_order(s: &str) -> Result<TokenOrder, String> {
    s.parse().map_err(|e: vista_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate composed-image and document-retrieval manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint used to filter training edits.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one stage: 1, 2, finetune or pseudo_map.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Earlier-stage checkpoint, or a checkpoint of this stage to resume.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on both retrieval tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// interleaved, score_fusion or pseudo_token; defaults to the config.
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMethod>,
        /// visual_first or text_first; defaults to the checkpoint's order.
        #[arg(long, value_parser = parse_order)]
        token_order: Option<TokenOrder>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation sweep over the configured seeds (or `--seed`).
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's metadata and table of contents.
    InspectCheckpoint { path: PathBuf },
}

/// Caps the worker pool at `VISTA_THREADS` when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("VISTA_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("VISTA_THREADS must be a positive integer, got {v:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn stdout_line(out: &mut impl Write, s: &str) -> CliResult<()> {
    writeln!(out, "{s}").map_err(|e| CliError::Io(PathBuf::from("<stdout>"), e))
}

fn inspect(path: &Path, out: &mut impl Write) -> CliResult<()> {
    let ck = Checkpoint::load(path)?;
    let mut lines = vec![
        format!("format_version: {FORMAT_VERSION}"),
        format!("sha256: {}", file_digest(path)?),
        format!("model: {}", serde_json::to_string(&ck.model.config).expect("config serializes")),
        format!("vocab: {} tokens", ck.model.vocab.len()),
        format!("completed_stages: {}", ck.completed_stages.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
    ];
    match &ck.training {
        Some(t) => lines.push(format!("training: stage {} step {}/{}", t.config.stage, t.step, t.config.total_steps)),
        None => lines.push("training: none".into()),
    }
    lines.push(format!("parameters: {}", ck.model.params.data().len()));
    for e in ck.toc() {
        let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        lines.push(format!("{}\t[{}]\toffset={}\ttrainable={}", e.name, shape.join(", "), e.offset, e.trainable));
    }
    stdout_line(out, &lines.join("\n"))
}

pub fn run(args: Args) -> CliResult<()> {
    init_threads()?;
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut stdout = std::io::stdout().lock();
    match args.command {
        Command::GenData { out, checkpoint } => {
            let summary = pipeline::gen_data(&cfg, &out, checkpoint.as_deref())?;
            stdout_line(&mut stdout, &summary.to_string())
        }
        Command::Train { stage, data, checkpoint, out } => {
            let every = Some(cfg.checkpoint_every);
            let path = pipeline::train_stage(&cfg, stage, &data, checkpoint.as_deref(), &out, every, &mut stdout)?;
            stdout_line(&mut stdout, &format!("wrote {}", path.display()))
        }
        Command::Eval { checkpoint, data, fusion, token_order, out } => {
            let fusion = fusion.unwrap_or(cfg.fusion);
            for r in pipeline::evaluate(&cfg, &checkpoint, fusion, token_order, &data, &out)? {
                stdout_line(
                    &mut stdout,
                    &format!(
                        "{} fusion={} R@1={:.4} R@5={:.4} R@10={:.4} R@20={:.4} MRR@10={:.4} queries={} corpus={}",
                        r.task, r.fusion, r.recall_at_1, r.recall_at_5, r.recall_at_10, r.recall_at_20, r.mrr_at_10, r.queries, r.corpus
                    ),
                )?;
            }
            Ok(())
        }
        Command::Ablate { out } => {
            let seeds = args.seed.map_or_else(|| cfg.ablation.seeds.clone(), |s| vec![s]);
            let table = pipeline::ablate(&cfg, &seeds, &out, &mut std::io::stderr())?;
            stdout_line(&mut stdout, &table.to_markdown())
        }
        Command::InspectCheckpoint { path } => inspect(&path, &mut stdout),
    }
}
