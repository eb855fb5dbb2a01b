//! Command-line pipeline around the `cbet` library: generate play data, fit
//! the action codec, train policies, evaluate them, and run single rollouts.
//!
//! Every subcommand accepts `--config <file>`, a JSON object whose keys are
//! the subcommand's flag names; explicit flags override file entries, which
//! override built-in defaults. Each run prints its fully resolved
//! configuration as one JSON line before doing any work, and every written
//! report embeds the build id, the seeds, and that resolved configuration.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cbet::codec::ActionCodec;
use cbet::envs::{
    fork_oracle, fork_reached_goal, push_oracle, scripted_play, EnvKind, Environment, ForkWorld,
    MultiPush,
};
use cbet::model::{GoalInput, GoalMode};
use cbet::playdata::{load_dataset, save_dataset};
use cbet::sampler::{rollout, RolloutConfig};
use cbet::trainer::{
    condition_pools, evaluate, holdout_split, load_outcome, loss_curve_csv, mode_one_hot,
    save_outcome, train_with_progress, EvalProtocol, TrainConfig, Variant, LABEL_DIM,
};

/// Stamped by the build script from `git describe`, or the package version.
const BUILD_ID: &str = env!("CBET_BUILD_ID");

#[derive(Parser)]
#[command(
    name = "cbet",
    version,
    about = "Goal-conditioned behavior cloning from play data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted play demonstrations and save them as a dataset.
    GenData(GenDataArgs),
    /// Fit the k-means action codec on a dataset and report its centers.
    FitCodec(FitCodecArgs),
    /// Train a policy on a dataset and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint with conditioned rollouts and write a report.
    Eval(EvalArgs),
    /// Run one conditioned rollout and save its trace as CSV.
    Rollout(RolloutArgs),
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => run_gen_data(a),
        Command::FitCodec(a) => run_fit_codec(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Rollout(a) => run_rollout(a),
    }
}

/// Loads the optional JSON config file backing a subcommand's flags.
fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Flag beats config file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag beats config file; one of them must be present.
fn require<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .ok_or_else(|| anyhow!("--{name} is required (as a flag or a config file entry)"))
}

fn print_resolved<T: Serialize>(resolved: &T) -> Result<()> {
    println!("resolved config: {}", serde_json::to_string(resolved)?);
    Ok(())
}

fn parse_env(s: &str) -> Result<EnvKind> {
    match s {
        "forkworld" => Ok(EnvKind::Fork),
        "multipush" => Ok(EnvKind::MultiPush),
        other => bail!("unknown env {other:?}, expected forkworld or multipush"),
    }
}

fn env_name(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::Fork => "forkworld",
        EnvKind::MultiPush => "multipush",
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "multimodal" => Ok(Variant::Multimodal),
        "unimodal" => Ok(Variant::Unimodal),
        "unconditional" => Ok(Variant::Unconditional),
        other => bail!("unknown variant {other:?}, expected multimodal, unimodal, or unconditional"),
    }
}

fn parse_goal_mode(s: &str) -> Result<GoalMode> {
    match s {
        "observation" => Ok(GoalMode::Observation),
        "label" => Ok(GoalMode::Label {
            label_dim: LABEL_DIM,
        }),
        other => bail!("unknown goal mode {other:?}, expected observation or label"),
    }
}

fn parse_mix(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad mix entry {p:?}: {e}"))
        })
        .collect()
}

fn make_env(kind: EnvKind, seed: u64) -> Box<dyn Environment> {
    match kind {
        EnvKind::Fork => Box::new(ForkWorld::new(0.0, seed)),
        EnvKind::MultiPush => Box::new(MultiPush::new()),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// JSON config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment: forkworld or multipush.
    #[arg(long)]
    env: Option<String>,
    /// Number of trajectories to generate.
    #[arg(long)]
    n: Option<usize>,
    /// RNG seed controlling all demonstration randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated mode probabilities, e.g. "0.5,0.5".
    #[arg(long)]
    mix: Option<String>,
    /// Output dataset path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GenDataFile {
    env: Option<String>,
    n: Option<usize>,
    seed: Option<u64>,
    mix: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenDataResolved {
    command: &'static str,
    build_id: &'static str,
    env: String,
    n: usize,
    seed: u64,
    mix: String,
    out: PathBuf,
}

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    let f: GenDataFile = read_config(&a.config)?;
    let resolved = GenDataResolved {
        command: "gen-data",
        build_id: BUILD_ID,
        env: pick(a.env, f.env, "forkworld".into()),
        n: pick(a.n, f.n, 200),
        seed: pick(a.seed, f.seed, 0),
        mix: pick(a.mix, f.mix, "0.5,0.5".into()),
        out: require(a.out, f.out, "out")?,
    };
    print_resolved(&resolved)?;
    let kind = parse_env(&resolved.env)?;
    let mix = parse_mix(&resolved.mix)?;
    let ds = scripted_play(kind, resolved.n, resolved.seed, &mix)?;
    save_dataset(&ds, &resolved.out)
        .with_context(|| format!("writing {}", resolved.out.display()))?;
    let lens: Vec<usize> = ds.trajectories().iter().map(|t| t.len()).collect();
    println!(
        "wrote {} trajectories to {} (steps min {} max {} total {}, d_o {}, d_a {})",
        ds.len(),
        resolved.out.display(),
        lens.iter().min().unwrap(),
        lens.iter().max().unwrap(),
        lens.iter().sum::<usize>(),
        ds.obs_dim(),
        ds.action_dim(),
    );
    Ok(())
}

// --------------------------------------------------------------- fit-codec

#[derive(Args)]
struct FitCodecArgs {
    /// JSON config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset whose actions the codec is fitted on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of action bins to request.
    #[arg(long)]
    k: Option<usize>,
    /// RNG seed for the k-means initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional JSON output path for the fitted centers.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FitCodecFile {
    data: Option<PathBuf>,
    k: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct FitCodecResolved {
    command: &'static str,
    build_id: &'static str,
    data: PathBuf,
    k: usize,
    seed: u64,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct CodecOutput<'a> {
    build_id: &'static str,
    k: usize,
    action_dim: usize,
    /// Row-major `k * action_dim` bin centers.
    centers: &'a [f32],
}

fn run_fit_codec(a: FitCodecArgs) -> Result<()> {
    let f: FitCodecFile = read_config(&a.config)?;
    let resolved = FitCodecResolved {
        command: "fit-codec",
        build_id: BUILD_ID,
        data: require(a.data, f.data, "data")?,
        k: pick(a.k, f.k, 8),
        seed: pick(a.seed, f.seed, 0),
        out: a.out.or(f.out),
    };
    print_resolved(&resolved)?;
    let ds = load_dataset(&resolved.data)
        .with_context(|| format!("loading {}", resolved.data.display()))?;
    let actions = ds.all_actions();
    let codec = ActionCodec::fit_default(&actions, ds.action_dim(), resolved.k, resolved.seed)?;
    let sse = codec.sse(&actions)?;
    println!(
        "fitted codec on {} actions: k {} (requested {}), sse {:?}",
        actions.len() / ds.action_dim(),
        codec.k(),
        resolved.k,
        sse,
    );
    if let Some(path) = &resolved.out {
        let payload = CodecOutput {
            build_id: BUILD_ID,
            k: codec.k(),
            action_dim: ds.action_dim(),
            centers: codec.centers(),
        };
        fs::write(path, serde_json::to_string_pretty(&payload)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote codec centers to {}", path.display());
    }
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// JSON config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Environment the data comes from: forkworld or multipush.
    #[arg(long)]
    env: Option<String>,
    /// Policy variant: multimodal, unimodal, or unconditional.
    #[arg(long)]
    variant: Option<String>,
    /// Conditioning input: observation or label.
    #[arg(long)]
    goal_mode: Option<String>,
    /// Hyperparameter preset: desk, carla, blockpush, or kitchen.
    #[arg(long)]
    preset: Option<String>,
    /// Override the preset's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the preset's batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// RNG seed controlling init, shuffling, dropout, and the codec fit.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve CSV output path.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    env: Option<String>,
    variant: Option<String>,
    goal_mode: Option<String>,
    preset: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    loss_csv: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainResolved<'a> {
    command: &'static str,
    build_id: &'static str,
    data: &'a PathBuf,
    preset: &'a str,
    out: &'a PathBuf,
    loss_csv: &'a PathBuf,
    config: &'a TrainConfig,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let f: TrainFile = read_config(&a.config)?;
    let data = require(a.data, f.data, "data")?;
    let out = require(a.out, f.out, "out")?;
    let loss_csv = pick(a.loss_csv, f.loss_csv, PathBuf::from("loss.csv"));
    let preset = pick(a.preset, f.preset, "desk".into());
    let env = parse_env(&pick(a.env, f.env, "forkworld".into()))?;
    let variant = parse_variant(&pick(a.variant, f.variant, "multimodal".into()))?;
    let mut cfg = TrainConfig::preset(&preset, env, variant).ok_or_else(|| {
        anyhow!("unknown preset {preset:?}, expected desk, carla, blockpush, or kitchen")
    })?;
    cfg.model.goal_mode = parse_goal_mode(&pick(a.goal_mode, f.goal_mode, "observation".into()))?;
    if let Some(epochs) = a.epochs.or(f.epochs) {
        cfg.epochs = epochs;
    }
    if let Some(batch) = a.batch_size.or(f.batch_size) {
        cfg.batch_size = batch;
    }
    cfg.seed = pick(a.seed, f.seed, cfg.seed);
    print_resolved(&TrainResolved {
        command: "train",
        build_id: BUILD_ID,
        data: &data,
        preset: &preset,
        out: &out,
        loss_csv: &loss_csv,
        config: &cfg,
    })?;
    let ds = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
    let outcome = train_with_progress(&ds, &cfg, |epoch, loss| {
        println!("epoch {epoch}: loss {loss:?}");
    })?;
    save_outcome(&outcome, &out).with_context(|| format!("writing {}", out.display()))?;
    fs::write(&loss_csv, loss_curve_csv(&outcome.loss_curve))
        .with_context(|| format!("writing {}", loss_csv.display()))?;
    let final_loss = outcome
        .loss_curve
        .last()
        .copied()
        .expect("training always runs at least one epoch");
    println!("final loss: {final_loss:?}");
    println!(
        "saved checkpoint to {} ({:.1}s), loss curve to {}",
        out.display(),
        outcome.wall_clock_secs,
        loss_csv.display(),
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    /// JSON config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// The dataset the checkpoint was trained on; conditioning windows and
    /// the held-out split are derived from it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Environment guard; must match the checkpoint when given.
    #[arg(long)]
    env: Option<String>,
    /// Total rollouts, split evenly over the two conditions.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Step budget per rollout.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Bin sampling temperature; ignored by regression heads.
    #[arg(long)]
    temperature: Option<f64>,
    /// RNG seed for the evaluation rollouts.
    #[arg(long)]
    seed: Option<u64>,
    /// Condition on training-set trajectories instead of held-out ones.
    #[arg(long, value_name = "BOOL")]
    in_set: Option<bool>,
    /// Report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads for rollouts; the report is identical for any count.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EvalFile {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    env: Option<String>,
    rollouts: Option<usize>,
    max_steps: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    in_set: Option<bool>,
    report: Option<PathBuf>,
    jobs: Option<usize>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvalResolved {
    command: &'static str,
    build_id: &'static str,
    ckpt: PathBuf,
    data: PathBuf,
    rollouts: usize,
    max_steps: usize,
    temperature: f64,
    seed: u64,
    in_set: bool,
    report: PathBuf,
    jobs: usize,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let f: EvalFile = read_config(&a.config)?;
    let resolved = EvalResolved {
        command: "eval",
        build_id: BUILD_ID,
        ckpt: require(a.ckpt, f.ckpt, "ckpt")?,
        data: pick(a.data, f.data, PathBuf::from("play.cbet")),
        rollouts: pick(a.rollouts, f.rollouts, 100),
        max_steps: pick(a.max_steps, f.max_steps, 100),
        temperature: pick(a.temperature, f.temperature, 1.0),
        seed: pick(a.seed, f.seed, 0),
        in_set: pick(a.in_set, f.in_set, false),
        report: pick(a.report, f.report, PathBuf::from("report.json")),
        jobs: pick(a.jobs, f.jobs, 1),
    };
    print_resolved(&resolved)?;
    if resolved.rollouts == 0 || resolved.rollouts % 2 != 0 {
        bail!(
            "--rollouts {} is split evenly over two conditions, so it must be even and nonzero",
            resolved.rollouts
        );
    }
    let outcome = load_outcome(&resolved.ckpt)
        .with_context(|| format!("loading {}", resolved.ckpt.display()))?;
    if let Some(env) = a.env.or(f.env) {
        let kind = parse_env(&env)?;
        if kind != outcome.cfg.env {
            bail!(
                "checkpoint was trained on {}, not {}",
                env_name(outcome.cfg.env),
                env,
            );
        }
    }
    let ds = load_dataset(&resolved.data)
        .with_context(|| format!("loading {}", resolved.data.display()))?;
    let protocol = EvalProtocol {
        rollouts_per_condition: resolved.rollouts / 2,
        max_steps: resolved.max_steps,
        temperature: resolved.temperature,
        seed: resolved.seed,
        held_out_conditioning: !resolved.in_set,
        jobs: resolved.jobs,
    };
    let report = evaluate(&outcome, &ds, &protocol)?;
    print!("{}", report.to_table());
    #[derive(Serialize)]
    #[serde(rename_all = "kebab-case")]
    struct ReportEnvelope<'a> {
        resolved: &'a EvalResolved,
        report: &'a cbet::trainer::EvalReport,
    }
    let envelope = ReportEnvelope {
        resolved: &resolved,
        report: &report,
    };
    fs::write(
        &resolved.report,
        serde_json::to_string_pretty(&envelope)? + "\n",
    )
    .with_context(|| format!("writing {}", resolved.report.display()))?;
    println!("wrote report to {}", resolved.report.display());
    Ok(())
}

// ----------------------------------------------------------------- rollout

#[derive(Args)]
struct RolloutArgs {
    /// JSON config file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to roll out.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// The dataset the checkpoint was trained on; observation conditioning
    /// draws its goal window from it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Behavior mode to condition on: a or b (forkworld), puck1 or puck2
    /// (multipush), or none.
    #[arg(long)]
    mode: Option<String>,
    /// Step budget for the episode.
    #[arg(long)]
    steps: Option<usize>,
    /// Bin sampling temperature; ignored by regression heads.
    #[arg(long)]
    temperature: Option<f64>,
    /// RNG seed for sampling and the goal window choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Trace CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RolloutFile {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    mode: Option<String>,
    steps: Option<usize>,
    temperature: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct RolloutResolved {
    command: &'static str,
    build_id: &'static str,
    ckpt: PathBuf,
    data: PathBuf,
    mode: String,
    steps: usize,
    temperature: f64,
    seed: u64,
    out: PathBuf,
}

/// Maps a mode name to its index for the checkpoint's environment.
fn parse_mode(kind: EnvKind, s: &str) -> Result<Option<usize>> {
    match (kind, s) {
        (_, "none") => Ok(None),
        (EnvKind::Fork, "a") => Ok(Some(0)),
        (EnvKind::Fork, "b") => Ok(Some(1)),
        (EnvKind::MultiPush, "puck1") => Ok(Some(0)),
        (EnvKind::MultiPush, "puck2") => Ok(Some(1)),
        (EnvKind::Fork, other) => {
            bail!("unknown forkworld mode {other:?}, expected a, b, or none")
        }
        (EnvKind::MultiPush, other) => {
            bail!("unknown multipush mode {other:?}, expected puck1, puck2, or none")
        }
    }
}

fn run_rollout(a: RolloutArgs) -> Result<()> {
    let f: RolloutFile = read_config(&a.config)?;
    let resolved = RolloutResolved {
        command: "rollout",
        build_id: BUILD_ID,
        ckpt: require(a.ckpt, f.ckpt, "ckpt")?,
        data: pick(a.data, f.data, PathBuf::from("play.cbet")),
        mode: pick(a.mode, f.mode, "a".into()),
        steps: pick(a.steps, f.steps, 100),
        temperature: pick(a.temperature, f.temperature, 1.0),
        seed: pick(a.seed, f.seed, 0),
        out: pick(a.out, f.out, PathBuf::from("rollout.csv")),
    };
    print_resolved(&resolved)?;
    let outcome = load_outcome(&resolved.ckpt)
        .with_context(|| format!("loading {}", resolved.ckpt.display()))?;
    let cfg = &outcome.cfg;
    let mode = parse_mode(cfg.env, &resolved.mode)?;
    let np = cfg.model.goal_frames;
    let goal = if np == 0 {
        GoalInput::None
    } else {
        let m = mode.ok_or_else(|| {
            anyhow!("this checkpoint expects conditioning; pick a concrete --mode")
        })?;
        match cfg.model.goal_mode {
            GoalMode::Label { .. } => GoalInput::Label(mode_one_hot(m)),
            GoalMode::Observation => {
                let ds = load_dataset(&resolved.data)
                    .with_context(|| format!("loading {}", resolved.data.display()))?;
                let (train_set, held_out) = holdout_split(ds.len(), cfg.seed);
                let mut pool = condition_pools(&ds, &held_out, cfg.env, np)?[m].clone();
                if pool.is_empty() {
                    pool = condition_pools(&ds, &train_set, cfg.env, np)?[m].clone();
                }
                if pool.is_empty() {
                    bail!("no source trajectory in {} demonstrates that mode", resolved.data.display());
                }
                let window = pool[(resolved.seed as usize) % pool.len()].clone();
                GoalInput::Frames(window)
            }
        }
    };
    let mut env = make_env(cfg.env, resolved.seed);
    let rcfg = RolloutConfig {
        max_steps: resolved.steps,
        temperature: resolved.temperature,
        seed: resolved.seed,
        goal,
    };
    let record = rollout(
        &outcome.model,
        &outcome.store,
        outcome.codec.as_ref(),
        env.as_mut(),
        &rcfg,
    )?;
    fs::write(&resolved.out, record.to_csv())
        .with_context(|| format!("writing {}", resolved.out.display()))?;
    let steps = record.actions.len() / cfg.model.d_a.max(1);
    match cfg.env {
        EnvKind::Fork => {
            let route = fork_oracle(&record.observations)?;
            let reached = fork_reached_goal(&record.observations);
            println!("rollout: {steps} steps, route {route:?}, goal reached {reached}");
        }
        EnvKind::MultiPush => {
            let tasks = push_oracle(&record.observations)?;
            println!("rollout: {steps} steps, tasks completed {tasks:?}");
        }
    }
    println!("wrote trace to {}", resolved.out.display());
    Ok(())
}
