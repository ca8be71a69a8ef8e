//! Command line entry point. Every subcommand is a thin wrapper over
//! `pipeline`; this file only parses arguments, resolves the config and
//! seed, and maps errors to exit codes (0 ok, 2 config, 3 missing
//! artifact, 4 numeric failure).

use clap::{Parser, Subcommand};
use flowseg::config::{resolve_seed_from_env, RunConfig};
use flowseg::error::Result;
use flowseg::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "flowseg",
    version,
    about = "Weakly supervised nodule segmentation on synthetic CT phantoms"
)]
struct Cli {
    /// Config file (flat `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's `out`.
    #[arg(long, global = true)]
    out: Option<String>,

    /// Root RNG seed. Precedence: this flag, then FLOWSEG_SEED, then the
    /// config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom corpus, masks, and manifest.
    GenData,
    /// Train the autoencoder for one fold (trains on the other folds).
    TrainAe {
        #[arg(long)]
        fold: usize,
    },
    /// Train the latent velocity field for one fold.
    TrainFlow {
        #[arg(long)]
        fold: usize,
    },
    /// Train the weak slice classifier for one fold.
    TrainPredictor {
        #[arg(long)]
        fold: usize,
    },
    /// Segment held-out volumes with one method.
    Segment {
        /// tfg, cam, or gradcam.
        #[arg(long)]
        method: String,
        /// Restrict to one fold; default is every fold with outputs due.
        #[arg(long)]
        fold: Option<usize>,
        /// Restrict to one volume id.
        #[arg(long)]
        volume: Option<usize>,
        /// Guidance strength override (tfg only); 0 disables steering.
        #[arg(long)]
        s: Option<f32>,
        /// Worker threads fanning out across volumes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score segment outputs and write results.csv, summary.csv, table.txt.
    Eval {
        /// Comma-separated method list.
        #[arg(long, default_value = "tfg,cam,gradcam")]
        methods: String,
        /// Evaluate folds 0..k; default is every fold in the corpus.
        #[arg(long)]
        k: Option<usize>,
        /// Worker threads fanning out across volumes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.seed = resolve_seed_from_env(cfg.seed, cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::GenData => {
            let manifest = pipeline::gen_data(&cfg)?;
            println!("wrote {} volumes to {}", manifest.volumes.len(), cfg.out);
        }
        Cmd::TrainAe { fold } => {
            let mse = pipeline::train_ae_cmd(&cfg, *fold)?;
            println!("fold {fold}: autoencoder held-out mse {mse:.6}");
        }
        Cmd::TrainFlow { fold } => {
            let (head, tail) = pipeline::train_flow_cmd(&cfg, *fold)?;
            println!("fold {fold}: flow loss {head:.4} -> {tail:.4} (first/last 100 steps)");
        }
        Cmd::TrainPredictor { fold } => {
            let f1 = pipeline::train_predictor_cmd(&cfg, *fold)?;
            println!("fold {fold}: predictor held-out F1 {f1:.4}");
        }
        Cmd::Segment { method, fold, volume, s, jobs } => {
            let n = pipeline::segment_cmd(&cfg, method, *fold, *volume, *s, *jobs)?;
            println!("segmented {n} volumes with {method}");
        }
        Cmd::Eval { methods, k, jobs } => {
            let list: Vec<String> =
                methods.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
            let table = pipeline::eval_cmd(&cfg, &list, *k, *jobs)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
