use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use textloc::commands::{self, AblationOptions, EvalCommand, GenOptions, InferOptions, Template, TrainOptions};
use textloc::core::TaskKind;
use textloc::{Engine, ServiceTask};

/// Generative OCR with text and location tokens from one decoder.
#[derive(Parser)]
#[command(name = "textloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Wiki,
    Receipt,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Ocr,
    OcrLayout,
    Region,
    Locate,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Corpus recipe (TOML or JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "wiki")]
        template: TemplateArg,
        #[arg(long, default_value_t = 320)]
        width: u32,
        #[arg(long, default_value_t = 112)]
        height: u32,
    },
    /// Run the staged training plan; writes checkpoints and a JSONL loss log.
    Train {
        /// Training config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "test")]
        validation_split: String,
        #[arg(long)]
        limit: Option<usize>,
        /// Continue from the saved state in --out.
        #[arg(long)]
        resume: bool,
        /// Save state and stop after this many global steps.
        #[arg(long)]
        pause_at: Option<usize>,
    },
    /// Score a checkpoint on a corpus split; writes metric JSON and an optional prediction dump.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score ground-truth answers instead of a checkpoint (metric ceiling).
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        /// Comma-separated subset of ocr, ocr_layout, read_at, find_it.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train one model per encoding scheme and compare layout OCR scores.
    AblateEncodings {
        #[command(flatten)]
        common: AblationArgs,
    },
    /// Quantization error per grid step; with --config, also train per step.
    AblateGrid {
        #[command(flatten)]
        common: AblationArgs,
        #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_GRID_STEPS)]
        steps: Vec<u32>,
    },
    /// Run a checkpoint on PNG images; writes JSONL predictions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "ocr-layout")]
        task: TaskArg,
        /// Pixel box x1,y1,x2,y2 for --task region.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        region: Option<Vec<u32>>,
        /// Text to find for --task locate.
        #[arg(long)]
        query: Option<String>,
        /// Grow every returned box by this many pixels.
        #[arg(long)]
        pad: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Neighbor-distance continuity of the location-token embeddings.
    ProbeEmbeddings {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed UI origin; repeat for several. Defaults to any.
        #[arg(long)]
        cors_origin: Vec<String>,
    },
}

#[derive(clap::Args)]
struct AblationArgs {
    /// Training config shared by every arm.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "test")]
    eval_split: String,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl AblationArgs {
    fn options(self) -> AblationOptions {
        AblationOptions {
            config: self.config,
            corpus: self.corpus,
            train_split: self.train_split,
            eval_split: self.eval_split,
            train_limit: self.train_limit,
            eval_limit: self.eval_limit,
            out: self.out,
        }
    }
}

fn parse_task(name: &str) -> Result<TaskKind> {
    match TaskKind::ALL.iter().find(|t| t.name() == name) {
        Some(t) => Ok(*t),
        None => bail!("unknown task {name:?}; expected one of ocr, ocr_layout, read_at, find_it"),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, config, n, seed, template, width, height } => {
            let template = match template {
                TemplateArg::Wiki => Template::Wiki,
                TemplateArg::Receipt => Template::Receipt,
                TemplateArg::Mixed => Template::Mixed,
            };
            let s = commands::gen(&GenOptions { out, config, n, seed, template, width, height })?;
            println!("{} pages in {}", s.pages, s.dir.display());
            for (task, count) in &s.task_counts {
                println!("  {task}: {count}");
            }
            println!("hash {}", s.hash);
        }
        Command::Train { config, corpus, out, split, validation_split, limit, resume, pause_at } => {
            let opts = TrainOptions { config, corpus, out, split, validation_split, limit, resume, pause_at };
            let summary = commands::train(&opts, &mut |row| {
                println!(
                    "stage {} step {:>6}  loss {:.4}  text {:.4}  loc {:.4}",
                    row.stage, row.step, row.total, row.text_ce, row.loc_ce
                );
            })?;
            print_json(&summary)?;
        }
        Command::Eval { checkpoint, oracle: _, corpus, split, limit, tasks, out, dump } => {
            let tasks = tasks.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>>>()?;
            let report = commands::eval(&EvalCommand { checkpoint, corpus, split, limit, tasks, out, dump })?;
            print_json(&report)?;
        }
        Command::AblateEncodings { common } => {
            let table = commands::ablate_encodings_cmd(&common.options())?;
            print!("{}", table.to_markdown());
        }
        Command::AblateGrid { common, steps } => {
            let rows = commands::ablate_grid_cmd(&common.options(), &steps)?;
            for r in &rows {
                println!(
                    "step {:>2}px  tokens {}x{}  corner error {:.3}px  oracle det F1 {:.4}",
                    r.step_px, r.tokens.0, r.tokens.1, r.mean_corner_error, r.oracle_det_f1
                );
                if let Some(t) = &r.trained {
                    println!("          trained det F1 {:.4}  rec F1 {:.4}", t.detection.f1, t.recognition.f1);
                }
            }
        }
        Command::Infer { checkpoint, task, region, query, pad, out, images } => {
            let task = match task {
                TaskArg::Ocr => ServiceTask::Ocr,
                TaskArg::OcrLayout => ServiceTask::OcrLayout,
                TaskArg::Region => ServiceTask::Region,
                TaskArg::Locate => ServiceTask::Locate,
            };
            let region = region.map(|r| [r[0], r[1], r[2], r[3]]);
            let rows = commands::infer(&InferOptions { checkpoint, images, task, region, query, pad, out: out.clone() })?;
            println!("{} predictions written to {}", rows.len(), out.display());
        }
        Command::ProbeEmbeddings { checkpoints, out } => {
            let reports = commands::probe_embeddings(&checkpoints, out.as_deref())?;
            for (path, r) in &reports {
                for a in &r.continuity.axes {
                    println!("{path}  {}: adjacent/non-adjacent distance ratio {:.4}", a.axis, a.ratio);
                }
            }
        }
        Command::Serve { checkpoint, addr, cors_origin } => {
            let engine = Engine::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            log::info!("checkpoint {}", engine.checkpoint_hash());
            tokio::runtime::Runtime::new()?.block_on(textloc::server::serve(engine, addr, &cors_origin))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
