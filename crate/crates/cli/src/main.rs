use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use factrace_cli::{Options, Pipeline, RunConfig, Stage};
use factrace_core::attribution::{Normalize, Precondition};
use factrace_core::eval::SliceKind;

#[derive(Parser)]
#[command(name = "factrace", version, about = "Fact-tracing benchmark pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Rerun the stage even if its cached output is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset bundle.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Bundle directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model: pretraining, fine-tuning, or both.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, value_parser = ["pretrain", "finetune"])]
        phase: Option<String>,
        /// Fine-tune from this checkpoint instead of the pretrained one.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick TracIn checkpoints and decode queries for slicing.
    CkptSelect {
        #[command(flatten)]
        common: Common,
        /// Number of checkpoints.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Build the BM25 index, top-k retrievals and candidate sets.
    Bm25 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value = "query", value_parser = ["query"])]
        query_split: String,
        #[arg(long)]
        top_k: Option<usize>,
        /// Also copy the top-k table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the attribution score caches.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Evaluate methods on the configured query slice.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Comma-separated methods.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        slice: Option<String>,
        /// Subsampling as `NxM`: N subsamples of M queries.
        #[arg(long)]
        subsamples: Option<String>,
        /// Write per-query rankings.
        #[arg(long)]
        dump_rankings: bool,
    },
    /// Evaluate layer tag sets from the score caches.
    SweepLayers {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Tag set; repeat for more. Comma-joined tags are summed.
        #[arg(long = "tags", required = true)]
        tags: Vec<String>,
    },
    /// Write the final report from the evaluation output.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage, reusing up-to-date outputs.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dump_rankings: bool,
    },
}

/// TracIn options applied when the scores are folded.
#[derive(Args)]
struct Scoring {
    #[arg(long, value_parser = ["tracin", "embed", "ensemble"])]
    method: Option<String>,
    /// Comma-separated layer tags (G.* for TracIn, A.* for embeddings).
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated checkpoint steps.
    #[arg(long)]
    ckpts: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    precondition: Option<String>,
}

impl Scoring {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.method {
            config.eval.methods = vec![m.clone()];
        }
        if let Some(layers) = &self.layers {
            let (a, g): (Vec<String>, Vec<String>) =
                layers.split(',').map(str::to_string).partition(|t| t.starts_with("A."));
            if !g.is_empty() {
                config.attribution.layers = g;
            }
            if !a.is_empty() {
                config.attribution.embed_layers = a;
            }
        }
        if let Some(ckpts) = &self.ckpts {
            let steps = ckpts.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<u64>, _>>()?;
            config.attribution.steps = Some(steps);
        }
        if let Some(n) = &self.norm {
            config.attribution.normalize = n.parse::<Normalize>()?;
        }
        if let Some(p) = &self.precondition {
            config.attribution.precondition = p.parse::<Precondition>()?;
        }
        Ok(())
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load(&common.config)
}

fn options(common: &Common) -> Options {
    Options {
        force: common.force,
        ..Options::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let mut config = load(&common)?;
            if let Some(out) = out {
                config.paths.bundle = out;
            }
            Pipeline::new(config, options(&common)).run_single(Stage::Gen)
        }
        Command::Train {
            common,
            bundle,
            phase,
            from,
            out,
        } => {
            let mut config = load(&common)?;
            if let Some(b) = bundle {
                config.paths.bundle = b;
            }
            if let Some(o) = out {
                config.paths.checkpoints = o;
            }
            let mut opts = options(&common);
            opts.finetune_from = from;
            let mut p = Pipeline::new(config, opts);
            match phase.as_deref() {
                Some("pretrain") => p.run_single(Stage::Pretrain),
                Some(_) => p.run_single(Stage::Finetune),
                None => {
                    p.run_single(Stage::Pretrain)?;
                    p.run_single(Stage::Finetune)
                }
            }
        }
        Command::CkptSelect { common, k } => {
            let mut config = load(&common)?;
            if let Some(k) = k {
                config.attribution.checkpoints = k;
            }
            Pipeline::new(config, options(&common)).run_single(Stage::Select)
        }
        Command::Bm25 {
            common,
            bundle,
            query_split: _,
            top_k,
            out,
        } => {
            let mut config = load(&common)?;
            if let Some(b) = bundle {
                config.paths.bundle = b;
            }
            if let Some(k) = top_k {
                config.eval.bm25_top_k = k;
            }
            let mut p = Pipeline::new(config, options(&common));
            p.run_single(Stage::Bm25)?;
            if let Some(out) = out {
                std::fs::copy(p.dir(Stage::Bm25).join("topk.tsv"), out)?;
            }
            Ok(())
        }
        Command::Score { common, scoring } => {
            let mut config = load(&common)?;
            scoring.apply(&mut config)?;
            Pipeline::new(config, options(&common)).run_single(Stage::Score)
        }
        Command::Eval {
            common,
            scoring,
            methods,
            slice,
            subsamples,
            dump_rankings,
        } => {
            let mut config = load(&common)?;
            scoring.apply(&mut config)?;
            if let Some(m) = methods {
                config.eval.methods = m.split(',').map(str::to_string).collect();
            }
            if let Some(s) = slice {
                config.eval.slice = s.parse::<SliceKind>()?;
            }
            if let Some(s) = subsamples {
                let (n, m) = parse_subsamples(&s)?;
                config.eval.subsamples = n;
                config.eval.subsample_size = m;
            }
            config.validate()?;
            let mut opts = options(&common);
            opts.dump_rankings = dump_rankings;
            let mut p = Pipeline::new(config, opts);
            p.run_single(Stage::Eval)?;
            print!("{}", std::fs::read_to_string(p.dir(Stage::Eval).join("eval.txt"))?);
            Ok(())
        }
        Command::SweepLayers { common, scoring, tags } => {
            let mut config = load(&common)?;
            scoring.apply(&mut config)?;
            let mut opts = options(&common);
            opts.sweep = tags;
            let mut p = Pipeline::new(config, opts);
            p.run_single(Stage::Sweep)?;
            print!("{}", std::fs::read_to_string(p.dir(Stage::Sweep).join("sweep.txt"))?);
            Ok(())
        }
        Command::Report { common } => {
            let mut p = Pipeline::new(load(&common)?, options(&common));
            p.run_single(Stage::Report)?;
            print!("{}", std::fs::read_to_string(p.dir(Stage::Report).join("report.txt"))?);
            Ok(())
        }
        Command::Pipeline { common, dump_rankings } => {
            let mut opts = options(&common);
            opts.dump_rankings = dump_rankings;
            let mut p = Pipeline::new(load(&common)?, opts);
            p.ensure(Stage::Report)?;
            print!("{}", std::fs::read_to_string(p.dir(Stage::Report).join("report.txt"))?);
            Ok(())
        }
    }
}

fn parse_subsamples(s: &str) -> Result<(usize, usize)> {
    let Some((n, m)) = s.split_once('x') else {
        bail!("expected NxM, got {s:?}");
    };
    Ok((n.trim().parse()?, m.trim().parse()?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
