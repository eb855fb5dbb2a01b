//! Play trajectory storage, serialization, and hindsight window sampling.
//!
//! A play dataset is an unlabeled set of (observation, action) sequences.
//! Training samples are built by pairing a current window `o_{t..t+N}` and
//! its actions with a goal window `o_{t'..t'+N'}` drawn from the same
//! trajectory's future (`t' > t`), which manufactures goal-conditioned
//! triples out of reward-free data.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// File format magic for serialized datasets.
pub const DATASET_MAGIC: [u8; 4] = *b"CBET";
/// Current dataset format version.
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic bytes (expected \"CBET\")")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {DATASET_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated file: needed {needed} more bytes for {while_reading}")]
    Truncated {
        needed: usize,
        while_reading: &'static str,
    },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("trajectory {traj}: action[{index}] = {value} outside [-1, 1]")]
    ActionOutOfRange {
        traj: usize,
        index: usize,
        value: f32,
    },
    #[error("trajectory {traj}: non-finite {what} entry at index {index}")]
    NonFinite {
        traj: usize,
        what: &'static str,
        index: usize,
    },
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("trajectory must have at least one step")]
    EmptyTrajectory,
    #[error("observation/action dimensions must be nonzero")]
    ZeroDimension,
    #[error("dataset too short: no trajectory admits a window (requires length >= {required})")]
    DatasetTooShort { required: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One reward-free play trajectory: `len` aligned (observation, action) steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    obs: Vec<f32>,     // len * d_o, row-major
    actions: Vec<f32>, // len * d_a, row-major
    len: usize,
    d_o: usize,
    d_a: usize,
}

impl Trajectory {
    /// Builds a trajectory from row-major observation and action matrices,
    /// validating finiteness and the `[-1, 1]` action range.
    pub fn new(
        obs: Vec<f32>,
        actions: Vec<f32>,
        d_o: usize,
        d_a: usize,
    ) -> Result<Self, DataError> {
        if d_o == 0 || d_a == 0 {
            return Err(DataError::ZeroDimension);
        }
        if obs.len() % d_o != 0 || actions.len() % d_a != 0 {
            return Err(DataError::DimensionMismatch {
                context: format!(
                    "obs len {} not divisible by d_o {} or actions len {} by d_a {}",
                    obs.len(),
                    d_o,
                    actions.len(),
                    d_a
                ),
            });
        }
        let len = obs.len() / d_o;
        if len == 0 {
            return Err(DataError::EmptyTrajectory);
        }
        if actions.len() / d_a != len {
            return Err(DataError::DimensionMismatch {
                context: format!("{} observation rows but {} action rows", len, actions.len() / d_a),
            });
        }
        let traj = Trajectory {
            obs,
            actions,
            len,
            d_o,
            d_a,
        };
        traj.validate(0)?;
        Ok(traj)
    }

    fn validate(&self, traj_index: usize) -> Result<(), DataError> {
        for (i, &v) in self.obs.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    traj: traj_index,
                    what: "observation",
                    index: i,
                });
            }
        }
        for (i, &v) in self.actions.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    traj: traj_index,
                    what: "action",
                    index: i,
                });
            }
            // Out-of-range actions are rejected, not clipped: silent clipping
            // would corrupt the action codec fit downstream.
            if !(-1.0..=1.0).contains(&v) {
                return Err(DataError::ActionOutOfRange {
                    traj: traj_index,
                    index: i,
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.d_o
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    /// Observation row at step `t`.
    pub fn obs_at(&self, t: usize) -> &[f32] {
        &self.obs[t * self.d_o..(t + 1) * self.d_o]
    }

    /// Action row at step `t`.
    pub fn action_at(&self, t: usize) -> &[f32] {
        &self.actions[t * self.d_a..(t + 1) * self.d_a]
    }

    /// Contiguous observation rows `t .. t+n`.
    pub fn obs_window(&self, t: usize, n: usize) -> &[f32] {
        &self.obs[t * self.d_o..(t + n) * self.d_o]
    }

    /// Contiguous action rows `t .. t+n`.
    pub fn action_window(&self, t: usize, n: usize) -> &[f32] {
        &self.actions[t * self.d_a..(t + n) * self.d_a]
    }

    pub fn observations(&self) -> &[f32] {
        &self.obs
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }
}

/// A set of play trajectories sharing observation and action dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayDataset {
    trajectories: Vec<Trajectory>,
    d_o: usize,
    d_a: usize,
}

impl PlayDataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self, DataError> {
        let first = trajectories.first().ok_or(DataError::EmptyDataset)?;
        let (d_o, d_a) = (first.d_o, first.d_a);
        for (i, t) in trajectories.iter().enumerate() {
            if t.d_o != d_o || t.d_a != d_a {
                return Err(DataError::DimensionMismatch {
                    context: format!(
                        "trajectory {} has dims ({}, {}), dataset has ({}, {})",
                        i, t.d_o, t.d_a, d_o, d_a
                    ),
                });
            }
        }
        Ok(PlayDataset {
            trajectories,
            d_o,
            d_a,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.d_o
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    /// All action rows across trajectories, concatenated row-major.
    pub fn all_actions(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for t in &self.trajectories {
            out.extend_from_slice(&t.actions);
        }
        out
    }

    /// Keeps only the trajectories at `indices` (training-split plumbing).
    pub fn subset(&self, indices: &[usize]) -> Result<PlayDataset, DataError> {
        let trajs = indices
            .iter()
            .map(|&i| self.trajectories[i].clone())
            .collect();
        PlayDataset::new(trajs)
    }
}

/// Window sampling configuration: current-window length `n`, goal-window
/// length `n_goal`, and the RNG seed that owns the sampling stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n: usize,
    pub n_goal: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(n: usize, n_goal: usize, seed: u64) -> Self {
        assert!(n >= 1 && n_goal >= 1, "window lengths must be >= 1");
        SamplerConfig { n, n_goal, seed }
    }
}

/// Identifies where a sample was cut from: trajectory index, current-window
/// start `t`, and goal-window start `t_goal` (`t_goal > t` always).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSource {
    pub traj: usize,
    pub t: usize,
    pub t_goal: usize,
}

/// One training triple: current observations, their actions, and a window of
/// future observations from the same trajectory serving as the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub obs_window: Vec<f32>,    // n * d_o
    pub action_window: Vec<f32>, // n * d_a
    pub goal_window: Vec<f32>,   // n_goal * d_o
    pub n: usize,
    pub n_goal: usize,
    pub source: WindowSource,
}

/// An admissible (trajectory, t) pair; the goal start is drawn per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSlot {
    pub traj: usize,
    pub t: usize,
}

/// Minimal trajectory length that admits any sample under `(n, n_goal)`:
/// the current window must fit (`T >= n`) and some strictly later goal
/// window must fit (`T >= 1 + n_goal` so that `t' = 1` works for `t = 0`).
pub fn min_trajectory_len(n: usize, n_goal: usize) -> usize {
    n.max(n_goal + 1)
}

/// Inclusive range of admissible goal starts for a current window at `t` in
/// a trajectory of length `len`, or `None` if there is none. The goal start
/// is strictly after `t` and the goal window must lie inside the trajectory;
/// overlap with the current window is allowed.
pub fn goal_start_range(len: usize, t: usize, n_goal: usize) -> Option<(usize, usize)> {
    let lo = t + 1;
    let hi = len.checked_sub(n_goal)?;
    if lo > hi {
        return None;
    }
    Some((lo, hi))
}

/// Every admissible (trajectory, t) pair, in trajectory-then-t order.
pub fn enumerate_windows(ds: &PlayDataset, cfg: &SamplerConfig) -> Vec<WindowSlot> {
    let mut slots = Vec::new();
    for (traj, tr) in ds.trajectories().iter().enumerate() {
        let len = tr.len();
        if len < cfg.n {
            continue;
        }
        for t in 0..=(len - cfg.n) {
            if goal_start_range(len, t, cfg.n_goal).is_some() {
                slots.push(WindowSlot { traj, t });
            }
        }
    }
    slots
}

/// Draws a goal start uniformly from the admissible range for slot `(traj, t)`.
pub fn draw_goal_start<R: Rng>(
    ds: &PlayDataset,
    slot: WindowSlot,
    n_goal: usize,
    rng: &mut R,
) -> usize {
    let len = ds.trajectories()[slot.traj].len();
    let (lo, hi) =
        goal_start_range(len, slot.t, n_goal).expect("slot admits no goal window");
    rng.gen_range(lo..=hi)
}

/// Materializes the sample for a slot and goal start.
pub fn cut_sample(ds: &PlayDataset, slot: WindowSlot, t_goal: usize, cfg: &SamplerConfig) -> WindowSample {
    let tr = &ds.trajectories()[slot.traj];
    WindowSample {
        obs_window: tr.obs_window(slot.t, cfg.n).to_vec(),
        action_window: tr.action_window(slot.t, cfg.n).to_vec(),
        goal_window: tr.obs_window(t_goal, cfg.n_goal).to_vec(),
        n: cfg.n,
        n_goal: cfg.n_goal,
        source: WindowSource {
            traj: slot.traj,
            t: slot.t,
            t_goal,
        },
    }
}

/// Draws one hindsight-relabeled training sample: a slot uniform over all
/// admissible (trajectory, t) pairs, then a goal start uniform over that
/// slot's future. Pure function of (dataset, config, rng state).
pub fn sample_window<R: Rng>(
    ds: &PlayDataset,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<WindowSample, DataError> {
    let slots = enumerate_windows(ds, cfg);
    if slots.is_empty() {
        return Err(DataError::DatasetTooShort {
            required: min_trajectory_len(cfg.n, cfg.n_goal),
        });
    }
    let slot = slots[rng.gen_range(0..slots.len())];
    let t_goal = draw_goal_start(ds, slot, cfg.n_goal, rng);
    Ok(cut_sample(ds, slot, t_goal, cfg))
}

/// Deterministic per-worker sampling stream for `(seed, worker)`.
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

// ---------------------------------------------------------------------------
// Binary dataset format.
//
// Little-endian layout:
//   magic "CBET" (4 bytes), u32 version = 1, u32 n_traj, u16 d_o, u16 d_a;
//   per trajectory: u32 T, T*d_o f32 observations row-major, T*d_a f32
//   actions row-major.
// ---------------------------------------------------------------------------

/// Serializes a dataset to the binary format. Round trip is bit-exact.
pub fn save_dataset<P: AsRef<Path>>(ds: &PlayDataset, path: P) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    let bytes = encode_dataset(ds);
    file.write_all(&bytes)?;
    Ok(())
}

/// Encodes a dataset into format bytes.
pub fn encode_dataset(ds: &PlayDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.obs_dim() as u16).to_le_bytes());
    out.extend_from_slice(&(ds.action_dim() as u16).to_le_bytes());
    for tr in ds.trajectories() {
        out.extend_from_slice(&(tr.len() as u32).to_le_bytes());
        for &v in tr.observations() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in tr.actions() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Loads a dataset from a file, validating the header and all invariants.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<PlayDataset, DataError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DataError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(DataError::Truncated {
                needed: n - remaining,
                while_reading: what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DataError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32_vec(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>, DataError> {
        let b = self.take(count * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Decodes a dataset from format bytes. Never panics on malformed input;
/// every defect maps to a distinct [`DataError`].
pub fn decode_dataset(bytes: &[u8]) -> Result<PlayDataset, DataError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(DataError::VersionMismatch { found: version });
    }
    let n_traj = cur.u32("trajectory count")? as usize;
    let d_o = cur.u16("observation dim")? as usize;
    let d_a = cur.u16("action dim")? as usize;
    if n_traj == 0 {
        return Err(DataError::EmptyDataset);
    }
    if d_o == 0 || d_a == 0 {
        return Err(DataError::ZeroDimension);
    }
    let mut trajectories = Vec::with_capacity(n_traj.min(1 << 20));
    for traj_index in 0..n_traj {
        let len = cur.u32("trajectory length")? as usize;
        if len == 0 {
            return Err(DataError::EmptyTrajectory);
        }
        let obs = cur.f32_vec(len * d_o, "observations")?;
        let actions = cur.f32_vec(len * d_a, "actions")?;
        let traj = Trajectory {
            obs,
            actions,
            len,
            d_o,
            d_a,
        };
        traj.validate(traj_index)?;
        trajectories.push(traj);
    }
    if cur.pos != bytes.len() {
        return Err(DataError::DimensionMismatch {
            context: format!("{} trailing bytes after last trajectory", bytes.len() - cur.pos),
        });
    }
    PlayDataset::new(trajectories)
}
