//! `flock`: train, evaluate, roll out and plot flocking policies.
//!
//! Exit codes: 0 success, 2 configuration error, 3 checkpoint error, 4 runtime error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use flock_core::checkpoint::Checkpoint;
use flock_core::config::with_fixed_squad;
use flock_core::evaluation::{
    compare_embeddings, episode_seed, evaluate, rollout, write_comparison_csv, write_metrics_csv, ComparisonMeta, MetricsRow,
    Policy, Scenario,
};
use flock_core::networks::EmbeddingVariant;
use flock_core::trainer::{derive_seed, EpisodeMetrics};
use flock_core::{plot, trajectory, FlockError, RunConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TRAIN_METRICS: &str = "train_metrics.csv";
const EVAL_METRICS: &str = "eval_metrics.csv";
const RESOLVED_CONFIG: &str = "config.toml";
/// Seed stream for the actions of a random-policy rollout.
const RANDOM_ACTION_STREAM: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "flock", version, about = "Leader-follower flocking with shared-policy actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a shared policy and write checkpoints plus per-episode metrics.
    Train(TrainArgs),
    /// Evaluate a frozen checkpoint and write one metrics row per episode.
    Eval(EvalArgs),
    /// Fly one or more episodes and write the trajectory CSV.
    Rollout(RolloutArgs),
    /// Render a trajectory CSV episode to SVG.
    Plot(PlotArgs),
    /// Train and evaluate several seeds per embedding variant and aggregate.
    Compare(CompareArgs),
}

/// Settings shared by every command that builds a run config.
#[derive(Args, Debug, Clone)]
struct Overrides {
    /// TOML run config; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training episodes (train, compare) or evaluation episodes (eval, rollout).
    #[arg(long)]
    episodes: Option<usize>,
    /// Steps per episode.
    #[arg(long)]
    steps: Option<usize>,
    /// Embedding variant: semp or cnnmp.
    #[arg(long)]
    variant: Option<EmbeddingVariant>,
    /// Fix the squad size to exactly this many followers.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[command(flatten)]
    common: Overrides,
    /// Policy checkpoint; without it followers act uniformly at random.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Four followers, four more joining at step 100, 180 steps.
    #[arg(long)]
    squad_growth: bool,
    /// Trajectory CSV path (default: <output_dir>/trajectory.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Trajectory CSV written by `rollout`.
    input: PathBuf,
    /// Episode to draw.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// SVG path (default: input with .svg extension).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Overrides,
    /// Number of seeds per variant, counting up from the master seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Variants to compare.
    #[arg(long, value_delimiter = ',', default_value = "semp,cnnmp")]
    variants: Vec<EmbeddingVariant>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<FlockError>()) {
        Some(FlockError::Config { .. } | FlockError::ConfigFile { .. }) => 2,
        Some(FlockError::Checkpoint(_) | FlockError::TopologyMismatch { .. }) => 3,
        _ => 4,
    }
}

impl Overrides {
    /// Loads the config file (or defaults) and applies command-line overrides.
    fn resolve(&self, base: Option<RunConfig>) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(base)) => base,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(variant) = self.variant {
            cfg.network.embedding.variant = variant;
        }
        if let Some(n) = self.n {
            cfg = with_fixed_squad(cfg, n);
            cfg.eval.n_values = vec![n];
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_training(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(e) = self.episodes {
            cfg.trainer.episodes = e;
        }
        if let Some(s) = self.steps {
            cfg.trainer.steps_per_episode = s;
        }
        cfg.validate()?;
        Ok(())
    }

    fn apply_eval(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(e) = self.episodes {
            cfg.eval.episodes = e;
        }
        if let Some(s) = self.steps {
            cfg.eval.steps = s;
        }
        cfg.validate()?;
        Ok(())
    }
}

fn create_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = File::create(path).map_err(FlockError::from).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_resolved_config(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(FlockError::from)?;
    fs::write(cfg.output_dir.join(RESOLVED_CONFIG), cfg.to_toml_string()?).map_err(FlockError::from)?;
    Ok(())
}

/// Trains to completion, streaming metrics and periodic checkpoints into `cfg.output_dir`.
fn run_training(cfg: &RunConfig, mut trainer: Trainer) -> anyhow::Result<Trainer> {
    write_resolved_config(cfg)?;
    let dir = &cfg.output_dir;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(FlockError::from)?;
    let mut metrics = csv::Writer::from_writer(create_file(&dir.join(TRAIN_METRICS))?);
    let every = cfg.trainer.checkpoint_every;

    let outcome = trainer.train(|m: &EpisodeMetrics, t| {
        metrics.serialize(m).map_err(|e| FlockError::Csv {
            line: m.episode as u64 + 2,
            reason: e.to_string(),
        })?;
        if every > 0 && t.episode % every == 0 && t.episode < cfg.trainer.episodes {
            Checkpoint::from_trainer(t, cfg).save(&ckpt_dir.join(format!("episode_{:06}.ckpt", t.episode)))?;
        }
        Ok(())
    });
    metrics.flush().map_err(FlockError::from)?;
    if let Err(e) = outcome {
        if matches!(e, FlockError::Diverged { .. }) {
            Checkpoint::from_trainer(&trainer, cfg).save(&dir.join("diverged.ckpt"))?;
        }
        return Err(e.into());
    }
    Checkpoint::from_trainer(&trainer, cfg).save(&dir.join("final.ckpt"))?;
    Ok(trainer)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (cfg, trainer) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::<f64>::load(path)?;
            let mut cfg = args.common.resolve(Some(ckpt.config.clone()))?;
            args.common.apply_training(&mut cfg)?;
            if cfg.network != ckpt.config.network {
                return Err(FlockError::TopologyMismatch {
                    layer: "network".into(),
                    reason: "resume config changes the network layout".into(),
                }
                .into());
            }
            let ckpt = Checkpoint { config: cfg.clone(), ..ckpt };
            (cfg, ckpt.into_trainer()?)
        }
        None => {
            let mut cfg = args.common.resolve(None)?;
            args.common.apply_training(&mut cfg)?;
            let trainer = Trainer::new(cfg.trainer.clone(), cfg.env(), &cfg.network, cfg.seed)?;
            (cfg, trainer)
        }
    };
    let trainer = run_training(&cfg, trainer)?;
    eprintln!(
        "trained {} episodes; outputs in {}",
        trainer.episode,
        cfg.output_dir.display()
    );
    Ok(())
}

/// Loads a checkpoint, checking it against `--config` when one is given.
fn load_checkpoint(path: &Path, common: &Overrides) -> anyhow::Result<(RunConfig, Checkpoint<f64>)> {
    let ckpt = match &common.config {
        Some(cfg_path) => {
            let cfg = RunConfig::load(cfg_path)?;
            Checkpoint::<f64>::load_for(path, &cfg.network)?
        }
        None => Checkpoint::<f64>::load(path)?,
    };
    let mut cfg = common.resolve(Some(ckpt.config.clone()))?;
    // Evaluation always uses the checkpoint's own network.
    cfg.network = ckpt.config.network.clone();
    common.apply_eval(&mut cfg)?;
    Ok((cfg, ckpt))
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (cfg, ckpt) = load_checkpoint(&args.checkpoint, &args.common)?;
    let variant = cfg.network.embedding.variant.to_string();
    let mut rows = Vec::new();
    for &n in &cfg.eval.n_values {
        rows.extend(evaluate(&ckpt.networks.actor, &cfg.env(), &cfg.eval, n, cfg.seed, &variant)?);
    }
    let path = cfg.output_dir.join(EVAL_METRICS);
    write_metrics_csv(create_file(&path)?, &rows)?;
    eprintln!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_rollout(args: RolloutArgs) -> anyhow::Result<()> {
    let (cfg, ckpt) = match &args.checkpoint {
        Some(path) => {
            let (cfg, ckpt) = load_checkpoint(path, &args.common)?;
            (cfg, Some(ckpt))
        }
        None => (args.common.resolve(None)?, None),
    };
    let episodes = args.common.episodes.unwrap_or(1);
    let scenario = if args.squad_growth {
        Scenario::squad_growth()
    } else {
        Scenario::fixed(cfg.eval.n_values[0], args.common.steps.unwrap_or(cfg.eval.steps))
    };
    let env = cfg.env();
    let mut logs = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let seed = episode_seed(cfg.seed, scenario.initial_followers, e);
        let log = match &ckpt {
            Some(c) => rollout(Policy::Actor(&c.networks.actor), &env, &scenario, seed, "actor")?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, RANDOM_ACTION_STREAM, 0));
                rollout(Policy::Random(&mut rng), &env, &scenario, seed, "random")?
            }
        };
        logs.push(log);
    }
    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("trajectory.csv"));
    trajectory::write_rows(create_file(&out)?, &trajectory::rows_from_logs(&logs))?;
    eprintln!("wrote {episodes} episode(s) to {}", out.display());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> anyhow::Result<()> {
    let file = File::open(&args.input)
        .map_err(FlockError::from)
        .with_context(|| format!("opening {}", args.input.display()))?;
    let rows = trajectory::read_rows(file).with_context(|| format!("reading {}", args.input.display()))?;
    let episode: Vec<_> = rows.into_iter().filter(|r| r.episode == args.episode).collect();
    let out = args.out.unwrap_or_else(|| args.input.with_extension("svg"));
    fs::write(&out, plot::render_svg(&episode)).map_err(FlockError::from)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> anyhow::Result<()> {
    let base = args.common.resolve(None)?;
    let mut all_rows: Vec<MetricsRow> = Vec::new();
    for &variant in &args.variants {
        for k in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + k;
            cfg.network.embedding.variant = variant;
            cfg.output_dir = base.output_dir.join(format!("{variant}_seed{}", cfg.seed));
            args.common.apply_training(&mut cfg)?;
            let trainer = Trainer::new(cfg.trainer.clone(), cfg.env(), &cfg.network, cfg.seed)?;
            let trainer = run_training(&cfg, trainer)?;
            for &n in &cfg.eval.n_values {
                all_rows.extend(evaluate(
                    &trainer.networks.actor,
                    &cfg.env(),
                    &cfg.eval,
                    n,
                    cfg.seed,
                    &variant.to_string(),
                )?);
            }
            eprintln!("{variant} seed {} done", cfg.seed);
        }
    }
    let table = compare_embeddings(&all_rows)?;
    let dir = &base.output_dir;
    write_metrics_csv(create_file(&dir.join(EVAL_METRICS))?, &all_rows)?;
    write_comparison_csv(create_file(&dir.join("comparison.csv"))?, &table)?;
    fs::write(
        dir.join("comparison_meta.toml"),
        format!("seeds_per_variant = {}\n{}", args.seeds, ComparisonMeta),
    )
    .map_err(FlockError::from)?;
    eprintln!("wrote comparison for {} variant(s) to {}", args.variants.len(), dir.display());
    Ok(())
}
