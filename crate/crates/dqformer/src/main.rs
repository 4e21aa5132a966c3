use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dqformer::commands::{cmd_eval, cmd_infer, cmd_synth, cmd_train, EvalCommand};
use dqformer::config::RunConfig;
use dqformer::evaluation::EvalOptions;

/// Dual-query LiDAR panoptic segmentation: synthesize scenes, train, evaluate
/// and run inference.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed, threaded to every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and a manifest.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the scenes of a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict and score every scene of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write one BEV heatmap image per level per scene.
        #[arg(long)]
        plots: bool,
        /// Assemble from the masks of this stage (0 = initial queries).
        #[arg(long)]
        stage: Option<usize>,
        /// Skip duplicate-mask fusion.
        #[arg(long)]
        no_mask_fusion: bool,
        /// Override an inference setting of the checkpoint config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict one cloud into a DQPR file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DQF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DQF_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { config, count, out } => {
            let cfg = config.load()?;
            let m = cmd_synth(&cfg, count, &out)?;
            println!("{} scenes -> {}", m.len(), out.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            resume,
        } => {
            let cfg = config.load()?;
            let outcome = cmd_train(&cfg, &manifest, &out, resume.as_deref())?;
            println!("checkpoint -> {}", outcome.last_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            plots,
            stage,
            no_mask_fusion,
            overrides,
        } => {
            let opts = EvalCommand {
                overrides,
                options: EvalOptions {
                    stage,
                    fuse_masks: !no_mask_fusion,
                },
                plots,
            };
            let r = cmd_eval(&checkpoint, &manifest, &out, &opts)?;
            println!(
                "PQ {:.1} PQ_th {:.1} PQ_st {:.1} SQ {:.1} RQ {:.1} PQ_dagger {:.1}",
                r.overall.pq, r.overall.pq_th, r.overall.pq_st, r.overall.sq, r.overall.rq, r.overall.pq_dagger
            );
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            overrides,
        } => {
            let p = cmd_infer(&checkpoint, &input, &output, &overrides)?;
            println!("prediction -> {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<dqformer::Error>()
                .map_or(dqformer::error::EXIT_VALIDATION, dqformer::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
