use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use pdlab_core::corpus::generate_corpus;
use pdlab_core::experiment::{
    ablate_prompt_length, asymmetric_grid, backbone_dir, load_checkpoint, pretrain_or_load, run_pipeline,
    symmetric_grid, write_sweep, Workspace,
};
use pdlab_core::{Error, ExperimentConfig, Result, Strategy};

#[derive(Parser)]
#[command(name = "pdlab", version, about = "Two-stage prompt adaptation experiments on a synthetic retrieval corpus")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON, or TOML by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; the corpus lives in `<out>/corpus`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Epochs per adaptation stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    prompt_len_text: Option<usize>,
    #[arg(long, global = true)]
    prompt_len_image: Option<usize>,
    #[arg(long, global = true)]
    prompt_dropout: Option<f64>,
    /// Weight of the identity loss.
    #[arg(long = "lambda", global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target corpora.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the backbone on the source domain.
    Pretrain {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt a backbone to the target domain with one strategy.
    Adapt {
        #[arg(long)]
        strategy: Strategy,
        /// Backbone checkpoint directory; defaults to `<out>/backbone`.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of source-train, source-test, target-train, target-test.
        #[arg(long, default_value = "target-test")]
        split: String,
        /// Also write every query's ranking to this CSV file.
        #[arg(long)]
        dump_rankings: Option<PathBuf>,
    },
    /// Two-stage runs across prompt lengths.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,8")]
        lengths: Vec<usize>,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Hold one side at this length and vary the other instead of
        /// sweeping both together.
        #[arg(long)]
        pivot: Option<usize>,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Corpus, backbone, and every strategy over every configured seed.
    Pipeline,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut c = match &g.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &g.out {
        c.out_dir = o.clone();
    }
    if let Some(e) = g.epochs {
        c.schedule.total_epochs = e;
    }
    if let Some(n) = g.prompt_len_text {
        c.prompt_len_text = n;
    }
    if let Some(n) = g.prompt_len_image {
        c.prompt_len_image = n;
    }
    if let Some(p) = g.prompt_dropout {
        c.prompt_dropout = p;
    }
    if let Some(l) = g.lambda {
        c.loss.lambda = l;
    }
    c.validate()?;
    Ok(c)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn backbone_params(ws: &Workspace, path: Option<&Path>) -> Result<pdlab_core::experiment::Checkpoint> {
    match path {
        Some(p) => Ok(load_checkpoint(p)?),
        None => pretrain_or_load(ws, ws.config.seeds[0]),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli.global)?;
    match cli.command {
        Command::GenData { seed } => {
            if let Some(s) = seed {
                config.data_seed = s;
            }
            let root = config.corpus_dir();
            let pair = generate_corpus(&root, &config.data, config.data_seed)?;
            println!(
                "wrote {} source and {} target identities to {}",
                pair.source.train.identity_set().len() + pair.source.val.identity_set().len() + pair.source.test.identity_set().len(),
                pair.target.train.identity_set().len() + pair.target.test.identity_set().len(),
                root.display()
            );
        }
        Command::Pretrain { seed } => {
            let ws = Workspace::open(config)?;
            let ck = pretrain_or_load(&ws, seed)?;
            let source = ws.evaluate(&ck.params, "source-test", "pretrain", seed)?;
            let zero = ws.evaluate(&ck.params, "target-test", "zero_shot", seed)?;
            info!("backbone in {}", backbone_dir(&ws.config.out_dir).display());
            print_json(&[source, zero])?;
        }
        Command::Adapt { strategy, backbone, seed } => {
            let ws = Workspace::open(config)?;
            let bb = match backbone {
                Some(p) => load_checkpoint(&p)?,
                None => pretrain_or_load(&ws, seed)?,
            };
            let dir = ws.config.out_dir.join("runs").join(strategy.as_str()).join(format!("seed{seed}"));
            let r = ws.run_adaptation(strategy, &bb.params, seed, Some(&dir))?;
            info!("run written to {}", dir.display());
            print_json(&r.report)?;
        }
        Command::Eval { checkpoint, split, dump_rankings } => {
            let ws = Workspace::open(config)?;
            let ck = load_checkpoint(&checkpoint)?;
            let report = match dump_rankings {
                Some(p) => ws.evaluate_with_dump(&ck.params, &split, &ck.stage, ck.seed, &p)?,
                None => ws.evaluate(&ck.params, &split, &ck.stage, ck.seed)?,
            };
            print_json(&report)?;
        }
        Command::Ablate { lengths, seeds, pivot, backbone } => {
            if seeds == 0 || lengths.is_empty() {
                return Err(Error::Config("ablation needs at least one length and one seed".into()));
            }
            let ws = Workspace::open(config)?;
            let bb = backbone_params(&ws, backbone.as_deref())?;
            let (grid, name) = match pivot {
                Some(p) => (asymmetric_grid(&lengths, p), format!("prompt_length_pivot{p}")),
                None => (symmetric_grid(&lengths), "prompt_length".to_string()),
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = ablate_prompt_length(&ws, &bb.params, &grid, &seeds)?;
            let dir = ws.config.out_dir.join("reports");
            write_sweep(&dir, &name, &rows)?;
            println!("wrote {} rows to {}", rows.len(), dir.join(format!("{name}.csv")).display());
        }
        Command::Pipeline => {
            let ws = Workspace::open(config)?;
            let report = run_pipeline(&ws)?;
            println!("source-test Rank-1 {:.2}", report.source_test.rank1);
            println!("zero-shot   Rank-1 {:.2}", report.zero_shot.rank1);
            println!("stage1      Rank-1 {:.2} (median)", report.stage1.rank1.median);
            for s in &report.strategies {
                println!("{:<11} Rank-1 {:.2} (median; min {:.2}, max {:.2})", s.strategy, s.rank1.median, s.rank1.min, s.rank1.max);
            }
            println!("{:.0} s; reports in {}", report.seconds, ws.config.out_dir.join("reports").display());
        }
    }
    Ok(())
}

fn init_threads() {
    let Ok(v) = std::env::var("PDLAB_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring PDLAB_THREADS={v}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
