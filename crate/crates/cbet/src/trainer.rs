//! End-to-end training and evaluation harness.
//!
//! [`train`] runs the whole pipeline on a play dataset: hold out a tenth of
//! the trajectories as conditioning sources, fit the action codec on the
//! rest, then run minibatch epochs over every admissible context window with
//! a fresh hindsight goal drawn per sample per epoch. Three variants share
//! the pipeline: `multimodal` (bin + offset head), `unimodal` (direct
//! regression head, mean squared error, no codec), and `unconditional`
//! (multimodal head with zero goal tokens).
//!
//! [`evaluate`] rolls the trained policy out in its environment under
//! per-mode conditionings, judges each rollout with the geometry oracles,
//! and aggregates success counts plus which behavior mode each rollout
//! actually visited. Everything is seeded; identical configs and seeds give
//! bit-identical loss curves and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionCodec, CodecError};
use crate::envs::{
    attribute_fork_window, fork_first_waypoint_entry, fork_oracle, judge_fork, judge_push,
    push_first_completion_entry, push_oracle, EnvError, EnvKind, Environment, ForkWorld,
    MultiPush, PushTask, Route,
};
use crate::model::{
    bet_loss, mse_loss, CBetModel, GoalInput, GoalMode, HeadKind, HeadVars, LossParams,
    ModelConfig, ModelError,
};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::nn::{Adam, AdamConfig, CheckpointError, NnError, ParamStore, Session, Tensor};
use crate::playdata::{
    draw_goal_start, enumerate_windows, min_trajectory_len, worker_rng, DataError, PlayDataset,
    SamplerConfig, WindowSlot,
};
use crate::sampler::{rollout, RolloutConfig, RolloutRecord, SamplerError};

/// Width of the one-hot mode label used by label conditioning; both
/// environments have exactly two behavior modes.
pub const LABEL_DIM: usize = 2;

/// RNG stream that owns the held-out split, distinct from the per-epoch
/// sampling streams.
const HOLDOUT_STREAM: u64 = u64::MAX;

/// Per-epoch sampling streams start here so they never collide with the
/// per-trajectory streams used during data generation.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad train config: {context}")]
    BadConfig { context: String },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("dataset admits no training windows; trajectories need >= {required} steps")]
    NoWindows { required: usize },
    #[error("trajectory {traj} has no mode label (never completes a task)")]
    UnlabeledTrajectory { traj: usize },
    #[error("no conditioning source: {context}")]
    NoConditioning { context: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which policy variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Goal-conditioned bin + offset head.
    Multimodal,
    /// Goal-conditioned direct regression head trained with mean squared
    /// error; same trunk and conditioning, no codec.
    Unimodal,
    /// Bin + offset head with no goal tokens; behaves at base rates.
    Unconditional,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Multimodal => "multimodal",
            Variant::Unimodal => "unimodal",
            Variant::Unconditional => "unconditional",
        })
    }
}

/// Everything a training run needs. `normalized` copies enforce the variant
/// invariants before any training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub variant: Variant,
    pub model: ModelConfig,
    pub loss: LossParams,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Laptop-scale default: 3 layers, 4 heads, width 64, dropout 0.1,
    /// context 5, goal frames 5, 8 bins, batch 64.
    pub fn desk(env: EnvKind, variant: Variant) -> TrainConfig {
        TrainConfig {
            env,
            variant,
            model: ModelConfig {
                layers: 3,
                heads: 4,
                embed_width: 64,
                dropout_p: 0.1,
                context_n: 5,
                goal_frames: 5,
                k: 8,
                d_o: env.d_o(),
                d_a: env.d_a(),
                goal_mode: GoalMode::Observation,
            },
            loss: LossParams::default(),
            optim: AdamConfig::default(),
            epochs: 20,
            batch_size: 64,
            seed: 0,
        }
        .normalized()
    }

    /// Named presets. `desk` is the laptop-scale default; the other three
    /// are the full-scale published configurations, usable here with any
    /// environment (observation and action widths come from `env`).
    pub fn preset(name: &str, env: EnvKind, variant: Variant) -> Option<TrainConfig> {
        let mut cfg = TrainConfig::desk(env, variant);
        let m = &mut cfg.model;
        match name {
            "desk" => {}
            "carla" => {
                (m.layers, m.heads, m.embed_width, m.dropout_p) = (3, 4, 256, 0.6);
                (m.context_n, m.goal_frames, m.k) = (10, 10, 32);
                (cfg.epochs, cfg.batch_size) = (40, 128);
            }
            "blockpush" => {
                (m.layers, m.heads, m.embed_width, m.dropout_p) = (4, 4, 72, 0.1);
                (m.context_n, m.goal_frames, m.k) = (5, 3, 24);
                (cfg.epochs, cfg.batch_size) = (350, 64);
            }
            "kitchen" => {
                (m.layers, m.heads, m.embed_width, m.dropout_p) = (6, 6, 120, 0.1);
                (m.context_n, m.goal_frames, m.k) = (10, 10, 64);
                (cfg.epochs, cfg.batch_size) = (50, 64);
            }
            _ => return None,
        }
        Some(cfg.normalized())
    }

    /// Copy with the variant invariants applied: the unconditional variant
    /// carries zero goal tokens (and therefore observation goal mode, since
    /// the label projection would be dead weight).
    pub fn normalized(&self) -> TrainConfig {
        let mut cfg = self.clone();
        if cfg.variant == Variant::Unconditional {
            cfg.model.goal_frames = 0;
            cfg.model.goal_mode = GoalMode::Observation;
        }
        cfg
    }

    /// Output head implied by the variant.
    pub fn head_kind(&self) -> HeadKind {
        match self.variant {
            Variant::Unimodal => HeadKind::Regression,
            _ => HeadKind::Bet,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig {
                context: format!(
                    "epochs {} and batch_size {} must both be >= 1",
                    self.epochs, self.batch_size
                ),
            });
        }
        if self.variant == Variant::Unconditional && self.model.goal_frames != 0 {
            return Err(TrainError::BadConfig {
                context: "unconditional variant requires zero goal frames".into(),
            });
        }
        if let GoalMode::Label { label_dim } = self.model.goal_mode {
            if label_dim != LABEL_DIM {
                return Err(TrainError::BadConfig {
                    context: format!("label conditioning needs label_dim {LABEL_DIM}, got {label_dim}"),
                });
            }
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// A trained policy plus everything needed to evaluate or resume it.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Normalized config with the effective bin count and data widths.
    pub cfg: TrainConfig,
    pub model: CBetModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// `None` for the unimodal variant.
    pub codec: Option<ActionCodec>,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Trajectory indices used for training, ascending.
    pub train_set: Vec<usize>,
    /// Trajectory indices held out as conditioning sources, ascending.
    pub held_out: Vec<usize>,
    pub wall_clock_secs: f64,
}

/// Deterministic 90/10 trajectory split: `floor(n/10)` trajectories are held
/// out as conditioning sources and never trained on. Both sides ascending.
pub fn holdout_split(n_traj: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_traj).collect();
    order.shuffle(&mut worker_rng(seed, HOLDOUT_STREAM));
    let held = n_traj / 10;
    let mut held_out = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    (train, held_out)
}

/// One-hot over the two behavior modes (fork: route A/B; push: puck 1/2
/// delivered first).
pub fn mode_one_hot(mode: usize) -> Vec<f32> {
    let mut v = vec![0.0; LABEL_DIM];
    v[mode] = 1.0;
    v
}

/// Mode index a trajectory demonstrates, or `None` when it never commits to
/// a mode (fork: no waypoint disc entered; push: nothing delivered).
pub fn trajectory_mode(env: EnvKind, obs: &[f32]) -> Result<Option<usize>, EnvError> {
    Ok(match env {
        EnvKind::Fork => match fork_oracle(obs)? {
            Route::A => Some(0),
            Route::B => Some(1),
            Route::None => None,
        },
        EnvKind::MultiPush => match push_oracle(obs)?.first() {
            Some(PushTask::Puck1) => Some(0),
            Some(PushTask::Puck2) => Some(1),
            None => None,
        },
    })
}

/// Every current-window start for goal-free training; mirrors the
/// goal-conditioned enumeration but without the future-window requirement.
fn unconditional_slots(ds: &PlayDataset, n: usize) -> Vec<WindowSlot> {
    let mut slots = Vec::new();
    for (traj, tr) in ds.trajectories().iter().enumerate() {
        if tr.len() < n {
            continue;
        }
        for t in 0..=(tr.len() - n) {
            slots.push(WindowSlot { traj, t });
        }
    }
    slots
}

/// Dropout stream for one minibatch; any fixed mixing works, it only has to
/// be deterministic and distinct across batches.
fn session_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ batch as u64
}

/// [`train`] with a per-epoch progress callback `(epoch, mean_loss)`.
pub fn train_with_progress(
    ds: &PlayDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    let t0 = Instant::now();
    let mut cfg = cfg.normalized();
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::BadConfig {
            context: "dataset has no trajectories".into(),
        });
    }
    for (name, have, want) in [
        ("observation", &mut cfg.model.d_o, ds.obs_dim()),
        ("action", &mut cfg.model.d_a, ds.action_dim()),
    ] {
        if *have == 0 {
            *have = want;
        } else if *have != want {
            return Err(TrainError::DimensionMismatch {
                context: format!("config {name} width {have}, dataset has {want}"),
            });
        }
    }

    let (train_set, held_out) = holdout_split(ds.len(), cfg.seed);
    let train_ds = ds.subset(&train_set)?;

    let codec = match cfg.variant {
        Variant::Unimodal => None,
        _ => {
            let fitted =
                ActionCodec::fit_default(&train_ds.all_actions(), cfg.model.d_a, cfg.model.k, cfg.seed)?;
            // Duplicate actions can leave fewer occupied bins than asked
            // for; the head must match the codec that decodes it.
            cfg.model.k = fitted.k();
            Some(fitted)
        }
    };

    let needs_labels =
        cfg.model.goal_frames > 0 && matches!(cfg.model.goal_mode, GoalMode::Label { .. });
    let labels: Option<Vec<Vec<f32>>> = if needs_labels {
        let mut out = Vec::with_capacity(train_ds.len());
        for (i, tr) in train_ds.trajectories().iter().enumerate() {
            match trajectory_mode(cfg.env, tr.observations())? {
                Some(mode) => out.push(mode_one_hot(mode)),
                None => return Err(TrainError::UnlabeledTrajectory { traj: train_set[i] }),
            }
        }
        Some(out)
    } else {
        None
    };

    let (n, np) = (cfg.model.context_n, cfg.model.goal_frames);
    let slots = if np == 0 {
        unconditional_slots(&train_ds, n)
    } else {
        enumerate_windows(&train_ds, &SamplerConfig::new(n, np, cfg.seed))
    };
    if slots.is_empty() {
        return Err(TrainError::NoWindows {
            required: if np == 0 { n } else { min_trajectory_len(n, np) },
        });
    }

    let mut store = ParamStore::new();
    let model = CBetModel::build(&cfg.model, cfg.head_kind(), &mut store, cfg.seed)?;
    let mut adam = Adam::new(cfg.optim, &store);

    let (d_o, d_a, gd) = (cfg.model.d_o, cfg.model.d_a, cfg.model.goal_token_dim());
    let mut order: Vec<usize> = (0..slots.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = worker_rng(cfg.seed, EPOCH_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut goal_flat = Vec::with_capacity(b * np * gd);
            let mut obs_flat = Vec::with_capacity(b * n * d_o);
            let mut act_flat = Vec::with_capacity(b * n * d_a);
            for &si in chunk {
                let slot = slots[si];
                let tr = &train_ds.trajectories()[slot.traj];
                obs_flat.extend_from_slice(tr.obs_window(slot.t, n));
                act_flat.extend_from_slice(tr.action_window(slot.t, n));
                if np > 0 {
                    match &labels {
                        Some(ls) => {
                            for _ in 0..np {
                                goal_flat.extend_from_slice(&ls[slot.traj]);
                            }
                        }
                        None => {
                            let t_goal = draw_goal_start(&train_ds, slot, np, &mut rng);
                            goal_flat.extend_from_slice(tr.obs_window(t_goal, np));
                        }
                    }
                }
            }
            let goals = Tensor::new(vec![b, np, gd], goal_flat)?;
            let obs = Tensor::new(vec![b, n, d_o], obs_flat)?;

            let mut s: Session<f32> = Session::train(session_seed(cfg.seed, epoch, batch));
            let (loss_var, loss_val) = match model.forward_batch(&mut s, &store, &goals, &obs)? {
                HeadVars::Bet {
                    bin_logits,
                    offsets,
                } => {
                    let codec = codec.as_ref().expect("bet head trains with a codec");
                    let (var, parts) =
                        bet_loss(&mut s, bin_logits, offsets, &act_flat, codec, &cfg.loss)?;
                    (var, parts.total)
                }
                HeadVars::Regression { pred } => mse_loss(&mut s, pred, &act_flat)?,
            };
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    value: loss_val,
                });
            }
            store.zero_grads();
            s.backward(loss_var, &mut store)?;
            adam.step(&mut store)?;
            sum += loss_val * b as f64;
            seen += b;
        }
        let mean = sum / seen as f64;
        loss_curve.push(mean);
        on_epoch(epoch, mean);
    }

    Ok(TrainOutcome {
        cfg,
        model,
        store,
        adam,
        codec,
        loss_curve,
        train_set,
        held_out,
        wall_clock_secs: t0.elapsed().as_secs_f64(),
    })
}

/// Trains a policy on a play dataset: split off conditioning sources, fit
/// the codec (skipped for the unimodal variant), then minibatch epochs over
/// shuffled windows with fresh hindsight goals each epoch.
pub fn train(ds: &PlayDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_progress(ds, cfg, |_, _| {})
}

/// `epoch,loss` rows for the training curve.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    out
}

/// Checkpoint sidecar: the config, the fitted codec centers, and the loss
/// curve ride along as JSON so a reloaded policy evaluates identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub codec_centers: Option<Vec<f32>>,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

/// Writes model parameters, optimizer state, config, codec, and loss curve
/// to one checkpoint file.
pub fn save_outcome<P: AsRef<Path>>(out: &TrainOutcome, path: P) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        train: out.cfg.clone(),
        codec_centers: out.codec.as_ref().map(|c| c.centers().to_vec()),
        loss_curve: out.loss_curve.clone(),
    };
    let ckpt = Checkpoint::snapshot(&out.store, Some(&out.adam), serde_json::to_string(&meta)?);
    save_checkpoint(&ckpt, path)?;
    Ok(())
}

/// Restores a checkpoint written by [`save_outcome`]. The trajectory split
/// is not stored; it is recomputed from the config seed at evaluation time.
pub fn load_outcome<P: AsRef<Path>>(path: P) -> Result<TrainOutcome, TrainError> {
    let ckpt = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.config_json)?;
    let cfg = meta.train.normalized();
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = CBetModel::build(&cfg.model, cfg.head_kind(), &mut store, 0)?;
    ckpt.apply_params(&mut store)?;
    let adam = match ckpt.restore_adam(&store)? {
        Some(adam) => adam,
        None => Adam::new(cfg.optim, &store),
    };
    let codec = match meta.codec_centers {
        Some(centers) => Some(ActionCodec::from_centers(centers, cfg.model.d_a)?),
        None => None,
    };
    Ok(TrainOutcome {
        cfg,
        model,
        store,
        adam,
        codec,
        loss_curve: meta.loss_curve,
        train_set: Vec::new(),
        held_out: Vec::new(),
        wall_clock_secs: 0.0,
    })
}

/// How to measure a trained policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Rollouts judged against each of the two behavior modes.
    pub rollouts_per_condition: usize,
    pub max_steps: usize,
    /// Bin sampling temperature; ignored by regression heads.
    pub temperature: f64,
    pub seed: u64,
    /// Draw conditioning windows from the held-out trajectories (the
    /// default) or from the training set.
    pub held_out_conditioning: bool,
    /// Worker threads for rollouts. The report is identical for any count
    /// because episode seeds are fixed up front and tallied in order.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            rollouts_per_condition: 50,
            max_steps: 100,
            temperature: 1.0,
            seed: 0,
            held_out_conditioning: true,
            jobs: 1,
        }
    }
}

impl EvalProtocol {
    fn validate(&self) -> Result<(), TrainError> {
        if self.rollouts_per_condition == 0 || self.max_steps == 0 || self.jobs == 0 {
            return Err(TrainError::BadConfig {
                context: format!(
                    "rollouts_per_condition {}, max_steps {}, and jobs {} must all be >= 1",
                    self.rollouts_per_condition, self.max_steps, self.jobs
                ),
            });
        }
        Ok(())
    }
}

/// Success tally for one conditioning mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: String,
    pub successes: usize,
    pub total: usize,
}

/// How often rollouts actually visited a behavior mode, regardless of what
/// they were conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeVisits {
    pub mode: String,
    pub count: usize,
}

/// Aggregated evaluation results. Wall-clock fields are diagnostics and do
/// not take part in equality; everything else is reproducible bit-for-bit
/// from the seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: EnvKind,
    pub variant: Variant,
    pub held_out_conditioning: bool,
    pub per_condition: Vec<ConditionStats>,
    /// Successes over all conditioned rollouts.
    pub conditioned_success: f64,
    pub mode_visits: Vec<ModeVisits>,
    pub loss_curve: Vec<f64>,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.env == other.env
            && self.variant == other.variant
            && self.held_out_conditioning == other.held_out_conditioning
            && self.per_condition == other.per_condition
            && self.conditioned_success == other.conditioned_success
            && self.mode_visits == other.mode_visits
            && self.loss_curve == other.loss_curve
            && self.train_seed == other.train_seed
            && self.eval_seed == other.eval_seed
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "env: {}  variant: {}  conditioning: {}\n",
            self.env,
            self.variant,
            if self.held_out_conditioning {
                "held-out"
            } else {
                "train-set"
            }
        );
        out.push_str("condition        successes/total\n");
        for c in &self.per_condition {
            out.push_str(&format!("{:<16} {}/{}\n", c.condition, c.successes, c.total));
        }
        out.push_str(&format!(
            "conditioned success: {:.3}\n",
            self.conditioned_success
        ));
        let visits: Vec<String> = self
            .mode_visits
            .iter()
            .map(|v| format!("{} {}", v.mode, v.count))
            .collect();
        out.push_str(&format!("mode visits: {}\n", visits.join(", ")));
        if let Some(last) = self.loss_curve.last() {
            out.push_str(&format!(
                "final loss: {last:.6} after {} epochs\n",
                self.loss_curve.len()
            ));
        }
        out.push_str(&format!(
            "train seed: {}  eval seed: {}  train {:.1}s  eval {:.1}s\n",
            self.train_seed, self.eval_seed, self.train_secs, self.eval_secs
        ));
        out
    }
}

/// What a conditioned rollout is expected to accomplish.
enum Expected {
    Fork(Route),
    Push(Vec<PushTask>),
}

fn expected_mode(env: EnvKind, mode: usize) -> Expected {
    match env {
        EnvKind::Fork => Expected::Fork(if mode == 0 { Route::A } else { Route::B }),
        EnvKind::MultiPush => Expected::Push(if mode == 0 {
            vec![PushTask::Puck1, PushTask::Puck2]
        } else {
            vec![PushTask::Puck2, PushTask::Puck1]
        }),
    }
}

fn judge(expected: &Expected, obs: &[f32]) -> Result<bool, EnvError> {
    match expected {
        Expected::Fork(route) => judge_fork(obs, *route),
        Expected::Push(order) => judge_push(obs, order),
    }
}

fn condition_name(env: EnvKind, mode: usize) -> String {
    match (env, mode) {
        (EnvKind::Fork, 0) => "route A".into(),
        (EnvKind::Fork, _) => "route B".into(),
        (EnvKind::MultiPush, 0) => "puck1 first".into(),
        (EnvKind::MultiPush, _) => "puck2 first".into(),
    }
}

/// Mode a finished rollout actually committed to, by the same oracles that
/// judge success.
fn visited_mode(env: EnvKind, obs: &[f32]) -> Result<String, EnvError> {
    Ok(match trajectory_mode(env, obs)? {
        Some(mode) => match (env, mode) {
            (EnvKind::Fork, 0) => "A".into(),
            (EnvKind::Fork, _) => "B".into(),
            (EnvKind::MultiPush, 0) => "puck1".into(),
            (EnvKind::MultiPush, _) => "puck2".into(),
        },
        None => "none".into(),
    })
}

fn make_env(kind: EnvKind, seed: u64) -> Box<dyn Environment> {
    match kind {
        EnvKind::Fork => Box::new(ForkWorld::new(0.0, seed)),
        EnvKind::MultiPush => Box::new(MultiPush::new()),
    }
}

/// Conditioning windows per mode, drawn from source trajectories. Each
/// window starts where the source first commits to its mode (clamped so the
/// window fits) and must itself pin that mode.
pub fn condition_pools(
    ds: &PlayDataset,
    sources: &[usize],
    env: EnvKind,
    np: usize,
) -> Result<[Vec<Vec<f32>>; 2], TrainError> {
    let mut pools: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
    for &idx in sources {
        let tr = &ds.trajectories()[idx];
        if tr.len() < np {
            continue;
        }
        let obs = tr.observations();
        let (mode, entry) = match env {
            EnvKind::Fork => match fork_first_waypoint_entry(obs)? {
                Some((Route::A, i)) => (0, i),
                Some((Route::B, i)) => (1, i),
                _ => continue,
            },
            EnvKind::MultiPush => {
                if push_oracle(obs)?.len() < 2 {
                    continue;
                }
                match push_first_completion_entry(obs)? {
                    Some((PushTask::Puck1, i)) => (0, i),
                    Some((PushTask::Puck2, i)) => (1, i),
                    None => continue,
                }
            }
        };
        let start = entry.min(tr.len() - np);
        let window = tr.obs_window(start, np).to_vec();
        if env == EnvKind::Fork {
            let pinned = attribute_fork_window(&window)?;
            let route = if mode == 0 { Route::A } else { Route::B };
            if pinned != route {
                return Err(TrainError::NoConditioning {
                    context: format!(
                        "trajectory {idx} window at {start} pins {pinned} but demonstrates {route}"
                    ),
                });
            }
        }
        pools[mode].push(window);
    }
    Ok(pools)
}

/// Runs the listed episodes, each `(condition, seed, goal)`, across
/// `protocol.jobs` worker threads. Records come back in list order, so
/// downstream tallies do not depend on the job count.
fn run_rollouts(
    out: &TrainOutcome,
    env: EnvKind,
    protocol: &EvalProtocol,
    specs: &[(usize, u64, GoalInput)],
) -> Result<Vec<RolloutRecord>, TrainError> {
    let run_one = |&(_, seed, ref goal): &(usize, u64, GoalInput)| {
        let mut env = make_env(env, seed);
        let rcfg = RolloutConfig {
            max_steps: protocol.max_steps,
            temperature: protocol.temperature,
            seed,
            goal: goal.clone(),
        };
        rollout(&out.model, &out.store, out.codec.as_ref(), env.as_mut(), &rcfg)
            .map_err(TrainError::from)
    };
    if protocol.jobs <= 1 || specs.len() <= 1 {
        return specs.iter().map(run_one).collect();
    }
    let chunk = specs.len().div_ceil(protocol.jobs);
    let chunked: Vec<Result<Vec<RolloutRecord>, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(run_one).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    let mut records = Vec::with_capacity(specs.len());
    for part in chunked {
        records.extend(part?);
    }
    Ok(records)
}

/// Rolls the trained policy out under both mode conditionings, judges each
/// rollout with the geometry oracle, and tallies successes and mode visits.
///
/// Conditioning follows the model: observation goals use mode-pinning
/// windows from source trajectories, label goals use the mode one-hot, and
/// goal-free models run unconditioned but are still judged per mode. The
/// trajectory split is recomputed from the training seed, so `ds` should be
/// the training dataset.
pub fn evaluate(
    out: &TrainOutcome,
    ds: &PlayDataset,
    protocol: &EvalProtocol,
) -> Result<EvalReport, TrainError> {
    let t0 = Instant::now();
    protocol.validate()?;
    let cfg = &out.cfg;
    let np = cfg.model.goal_frames;

    let goals_per_mode: [Vec<GoalInput>; 2] = if np == 0 {
        [vec![GoalInput::None], vec![GoalInput::None]]
    } else {
        match cfg.model.goal_mode {
            GoalMode::Label { .. } => [
                vec![GoalInput::Label(mode_one_hot(0))],
                vec![GoalInput::Label(mode_one_hot(1))],
            ],
            GoalMode::Observation => {
                let (train_set, held_out) = holdout_split(ds.len(), cfg.seed);
                let sources = if protocol.held_out_conditioning {
                    held_out
                } else {
                    train_set
                };
                let pools = condition_pools(ds, &sources, cfg.env, np)?;
                let [a, b] = pools;
                for (mode, pool) in [(0, &a), (1, &b)] {
                    if pool.is_empty() {
                        return Err(TrainError::NoConditioning {
                            context: format!(
                                "no {} source demonstrates {}",
                                if protocol.held_out_conditioning {
                                    "held-out"
                                } else {
                                    "train-set"
                                },
                                condition_name(cfg.env, mode)
                            ),
                        });
                    }
                }
                [
                    a.into_iter().map(GoalInput::Frames).collect(),
                    b.into_iter().map(GoalInput::Frames).collect(),
                ]
            }
        }
    };

    let mut specs: Vec<(usize, u64, GoalInput)> = Vec::new();
    let mut counter: u64 = 0;
    for (mode, goals) in goals_per_mode.iter().enumerate() {
        for i in 0..protocol.rollouts_per_condition {
            counter += 1;
            let seed = protocol.seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            specs.push((mode, seed, goals[i % goals.len()].clone()));
        }
    }
    let records = run_rollouts(out, cfg.env, protocol, &specs)?;

    let mut per_condition: Vec<ConditionStats> = (0..2)
        .map(|mode| ConditionStats {
            condition: condition_name(cfg.env, mode),
            successes: 0,
            total: protocol.rollouts_per_condition,
        })
        .collect();
    let expected = [expected_mode(cfg.env, 0), expected_mode(cfg.env, 1)];
    let mut visits: BTreeMap<String, usize> = BTreeMap::new();
    for (&(mode, _, _), record) in specs.iter().zip(&records) {
        if judge(&expected[mode], &record.observations)? {
            per_condition[mode].successes += 1;
        }
        *visits
            .entry(visited_mode(cfg.env, &record.observations)?)
            .or_insert(0) += 1;
    }

    let total: usize = per_condition.iter().map(|c| c.total).sum();
    let successes: usize = per_condition.iter().map(|c| c.successes).sum();
    Ok(EvalReport {
        env: cfg.env,
        variant: cfg.variant,
        held_out_conditioning: protocol.held_out_conditioning,
        per_condition,
        conditioned_success: successes as f64 / total as f64,
        mode_visits: visits
            .into_iter()
            .map(|(mode, count)| ModeVisits { mode, count })
            .collect(),
        loss_curve: out.loss_curve.clone(),
        train_secs: out.wall_clock_secs,
        eval_secs: t0.elapsed().as_secs_f64(),
        train_seed: cfg.seed,
        eval_seed: protocol.seed,
    })
}
