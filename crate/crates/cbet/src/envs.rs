//! Desk-scale multi-modal environments, scripted play demonstrators, and
//! geometric evaluation oracles.
//!
//! Two worlds are pinned here. [`ForkWorld`] is a point agent that can reach
//! one goal region through either of two corridors, so the same start state
//! admits two action modes. [`MultiPush`] is a point agent that drags two
//! pucks into two target discs, so modes are task orderings. The oracles
//! classify finished trajectories by exhaustive geometric scan and are the
//! only source of ground truth; datasets never carry mode labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::playdata::{worker_rng, DataError, PlayDataset, Trajectory};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action[{index}] = {value} outside [-1, 1]")]
    ActionOutOfRange { index: usize, value: f32 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("mode mix {context}")]
    BadModeMix { context: String },
    #[error("conditioning frames are not attributable to a unique mode: {context}")]
    AmbiguousConditioning { context: String },
    #[error("scripted demonstration {traj} failed to finish its mode within {cap} steps")]
    DemonstrationFailed { traj: usize, cap: usize },
    #[error("dataset assembly: {0}")]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// ForkWorld geometry. All constants are part of the evaluation contract.

/// Position bounds, shared by both axes.
pub const FORK_BOUNDS: (f32, f32) = (-1.0, 2.0);
pub const FORK_START: (f32, f32) = (0.0, 0.0);
/// Shared stem endpoint where the two corridors separate.
pub const FORK_POINT: (f32, f32) = (0.5, 0.0);
pub const WAYPOINT_A: (f32, f32) = (1.0, 0.6);
pub const WAYPOINT_B: (f32, f32) = (1.0, -0.6);
pub const FORK_GOAL: (f32, f32) = (1.8, 0.0);
pub const FORK_GOAL_RADIUS: f32 = 0.15;
/// Disc radius around each waypoint that defines route membership.
pub const ROUTE_DISC_RADIUS: f32 = 0.2;
/// Position delta per unit action.
pub const STEP_SCALE: f32 = 0.08;

// ---------------------------------------------------------------------------
// MultiPush geometry.

pub const PUSH_BOUNDS: (f32, f32) = (-1.0, 1.0);
pub const PUSH_AGENT_START: (f32, f32) = (0.0, -0.8);
pub const PUSH_PUCK_STARTS: [(f32, f32); 2] = [(-0.4, 0.0), (0.4, 0.0)];
pub const PUSH_TARGETS: [(f32, f32); 2] = [(-0.4, 0.7), (0.4, 0.7)];
pub const PUSH_TARGET_RADIUS: f32 = 0.12;
/// A puck within this distance of the agent moves with the agent.
pub const PUSH_CONTACT_RADIUS: f32 = 0.08;

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn clamp_point(p: (f32, f32), bounds: (f32, f32)) -> (f32, f32) {
    (p.0.clamp(bounds.0, bounds.1), p.1.clamp(bounds.0, bounds.1))
}

fn check_action(action: &[f32], d_a: usize) -> Result<(), EnvError> {
    if action.len() != d_a {
        return Err(EnvError::DimensionMismatch {
            context: format!("action has {} values, want {}", action.len(), d_a),
        });
    }
    for (i, &v) in action.iter().enumerate() {
        if !(-1.0..=1.0).contains(&v) {
            return Err(EnvError::ActionOutOfRange { index: i, value: v });
        }
    }
    Ok(())
}

/// Closed-loop interface the rollout driver needs. Each instance owns its
/// RNG; many instances may run in parallel.
pub trait Environment {
    fn d_o(&self) -> usize;
    fn d_a(&self) -> usize;
    /// Full low-dimensional state, `d_o` values.
    fn observe(&self) -> Vec<f32>;
    /// Applies one action. Out-of-range actions are an error; clamping is
    /// the sampler's job.
    fn step(&mut self, action: &[f32]) -> Result<(), EnvError>;
    /// True once the episode's terminal condition holds.
    fn done(&self) -> bool;
    /// Restores the initial state (the RNG stream is not rewound).
    fn reset(&mut self);
}

/// Two corridors from one start to one goal disc. The observation is the
/// agent position; dynamics are `pos <- clamp(pos + STEP_SCALE * a + noise)`
/// with optional Gaussian position noise of standard deviation `sigma`.
#[derive(Debug, Clone)]
pub struct ForkWorld {
    pos: (f32, f32),
    sigma: f64,
    rng: ChaCha8Rng,
}

impl ForkWorld {
    pub fn new(sigma: f64, seed: u64) -> ForkWorld {
        ForkWorld {
            pos: FORK_START,
            sigma,
            rng: worker_rng(seed, 0),
        }
    }

    /// Starts from an arbitrary in-bounds position.
    pub fn with_position(pos: (f32, f32), sigma: f64, seed: u64) -> ForkWorld {
        ForkWorld {
            pos: clamp_point(pos, FORK_BOUNDS),
            sigma,
            rng: worker_rng(seed, 0),
        }
    }

    pub fn position(&self) -> (f32, f32) {
        self.pos
    }

    pub fn at_goal(&self) -> bool {
        dist(self.pos, FORK_GOAL) <= FORK_GOAL_RADIUS
    }
}

/// Standard normal draw via the Box-Muller transform.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Environment for ForkWorld {
    fn d_o(&self) -> usize {
        2
    }

    fn d_a(&self) -> usize {
        2
    }

    fn observe(&self) -> Vec<f32> {
        vec![self.pos.0, self.pos.1]
    }

    fn step(&mut self, action: &[f32]) -> Result<(), EnvError> {
        check_action(action, 2)?;
        let (mut nx, mut ny) = (
            self.pos.0 + STEP_SCALE * action[0],
            self.pos.1 + STEP_SCALE * action[1],
        );
        if self.sigma > 0.0 {
            nx += (self.sigma * standard_normal(&mut self.rng)) as f32;
            ny += (self.sigma * standard_normal(&mut self.rng)) as f32;
        }
        self.pos = clamp_point((nx, ny), FORK_BOUNDS);
        Ok(())
    }

    fn done(&self) -> bool {
        self.at_goal()
    }

    fn reset(&mut self) {
        self.pos = FORK_START;
    }
}

/// Point agent and two pucks. A puck within [`PUSH_CONTACT_RADIUS`] of the
/// agent (measured before the agent moves) translates with the agent's
/// displacement; a puck inside its own target disc is absorbed and never
/// moves again.
#[derive(Debug, Clone)]
pub struct MultiPush {
    agent: (f32, f32),
    pucks: [(f32, f32); 2],
    absorbed: [bool; 2],
}

impl MultiPush {
    pub fn new() -> MultiPush {
        MultiPush {
            agent: PUSH_AGENT_START,
            pucks: PUSH_PUCK_STARTS,
            absorbed: [false, false],
        }
    }

    /// Starts from arbitrary in-bounds entity positions.
    pub fn with_state(agent: (f32, f32), pucks: [(f32, f32); 2]) -> MultiPush {
        let mut env = MultiPush {
            agent: clamp_point(agent, PUSH_BOUNDS),
            pucks: [
                clamp_point(pucks[0], PUSH_BOUNDS),
                clamp_point(pucks[1], PUSH_BOUNDS),
            ],
            absorbed: [false, false],
        };
        env.settle();
        env
    }

    pub fn agent(&self) -> (f32, f32) {
        self.agent
    }

    pub fn puck(&self, i: usize) -> (f32, f32) {
        self.pucks[i]
    }

    pub fn absorbed(&self, i: usize) -> bool {
        self.absorbed[i]
    }

    /// Marks any puck already inside its own target as absorbed.
    fn settle(&mut self) {
        for i in 0..2 {
            if dist(self.pucks[i], PUSH_TARGETS[i]) <= PUSH_TARGET_RADIUS {
                self.absorbed[i] = true;
            }
        }
    }
}

impl Default for MultiPush {
    fn default() -> Self {
        MultiPush::new()
    }
}

impl Environment for MultiPush {
    fn d_o(&self) -> usize {
        6
    }

    fn d_a(&self) -> usize {
        2
    }

    fn observe(&self) -> Vec<f32> {
        vec![
            self.agent.0,
            self.agent.1,
            self.pucks[0].0,
            self.pucks[0].1,
            self.pucks[1].0,
            self.pucks[1].1,
        ]
    }

    fn step(&mut self, action: &[f32]) -> Result<(), EnvError> {
        check_action(action, 2)?;
        let old = self.agent;
        let new = clamp_point(
            (
                old.0 + STEP_SCALE * action[0],
                old.1 + STEP_SCALE * action[1],
            ),
            PUSH_BOUNDS,
        );
        let delta = (new.0 - old.0, new.1 - old.1);
        for i in 0..2 {
            if !self.absorbed[i] && dist(self.pucks[i], old) <= PUSH_CONTACT_RADIUS {
                self.pucks[i] = clamp_point(
                    (self.pucks[i].0 + delta.0, self.pucks[i].1 + delta.1),
                    PUSH_BOUNDS,
                );
            }
        }
        self.agent = new;
        self.settle();
        Ok(())
    }

    fn done(&self) -> bool {
        self.absorbed == [true, true]
    }

    fn reset(&mut self) {
        self.agent = PUSH_AGENT_START;
        self.pucks = PUSH_PUCK_STARTS;
        self.absorbed = [false, false];
    }
}

// ---------------------------------------------------------------------------
// Oracles. These scan recorded positions exhaustively; they are the ground
// truth for every success number and never look at model internals.

/// Which corridor a ForkWorld trajectory committed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    A,
    B,
    None,
}

impl Route {
    pub fn waypoint(self) -> Option<(f32, f32)> {
        match self {
            Route::A => Some(WAYPOINT_A),
            Route::B => Some(WAYPOINT_B),
            Route::None => None,
        }
    }
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Route::A => write!(f, "A"),
            Route::B => write!(f, "B"),
            Route::None => write!(f, "none"),
        }
    }
}

/// One deliverable task in MultiPush, identified by its puck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PushTask {
    Puck1,
    Puck2,
}

/// Mode classification of one finished trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleLabel {
    Fork(Route),
    /// Tasks in completion order; empty when nothing was delivered.
    Push(Vec<PushTask>),
}

fn xy_rows(obs: &[f32], d_o: usize) -> Result<usize, EnvError> {
    if d_o == 0 || obs.len() % d_o != 0 {
        return Err(EnvError::DimensionMismatch {
            context: format!("{} observation values are not rows of {}", obs.len(), d_o),
        });
    }
    let rows = obs.len() / d_o;
    if rows == 0 {
        return Err(EnvError::EmptyTrajectory);
    }
    Ok(rows)
}

/// First index whose position lies inside the goal disc, if any.
fn fork_goal_index(obs: &[f32]) -> Option<usize> {
    obs.chunks_exact(2)
        .position(|p| dist((p[0], p[1]), FORK_GOAL) <= FORK_GOAL_RADIUS)
}

/// True if the trajectory ever enters the goal disc.
pub fn fork_reached_goal(obs: &[f32]) -> bool {
    fork_goal_index(obs).is_some()
}

/// Route of a ForkWorld trajectory (flat `(x, y)` rows): the first waypoint
/// disc entered at or before the first goal entry. Entries after the goal do
/// not count; if the goal is never reached the whole trajectory counts.
pub fn fork_oracle(obs: &[f32]) -> Result<Route, EnvError> {
    let rows = xy_rows(obs, 2)?;
    let limit = fork_goal_index(obs).unwrap_or(rows - 1);
    for p in obs.chunks_exact(2).take(limit + 1) {
        let p = (p[0], p[1]);
        if dist(p, WAYPOINT_A) <= ROUTE_DISC_RADIUS {
            return Ok(Route::A);
        }
        if dist(p, WAYPOINT_B) <= ROUTE_DISC_RADIUS {
            return Ok(Route::B);
        }
    }
    Ok(Route::None)
}

/// First trajectory index inside either waypoint disc, with its route. Used
/// to select conditioning windows that pin a mode.
pub fn fork_first_waypoint_entry(obs: &[f32]) -> Result<Option<(Route, usize)>, EnvError> {
    let _ = xy_rows(obs, 2)?;
    for (i, p) in obs.chunks_exact(2).enumerate() {
        let p = (p[0], p[1]);
        if dist(p, WAYPOINT_A) <= ROUTE_DISC_RADIUS {
            return Ok(Some((Route::A, i)));
        }
        if dist(p, WAYPOINT_B) <= ROUTE_DISC_RADIUS {
            return Ok(Some((Route::B, i)));
        }
    }
    Ok(None)
}

/// Tasks completed by a MultiPush trajectory (flat 6-wide rows), ordered by
/// first completion.
pub fn push_oracle(obs: &[f32]) -> Result<Vec<PushTask>, EnvError> {
    let _ = xy_rows(obs, 6)?;
    let mut first_done: [Option<usize>; 2] = [None, None];
    for (i, row) in obs.chunks_exact(6).enumerate() {
        for slot in 0..2 {
            let puck = (row[2 + slot * 2], row[3 + slot * 2]);
            if first_done[slot].is_none() && dist(puck, PUSH_TARGETS[slot]) <= PUSH_TARGET_RADIUS {
                first_done[slot] = Some(i);
            }
        }
    }
    let mut done: Vec<(usize, PushTask)> = Vec::new();
    if let Some(i) = first_done[0] {
        done.push((i, PushTask::Puck1));
    }
    if let Some(i) = first_done[1] {
        done.push((i, PushTask::Puck2));
    }
    done.sort_by_key(|&(i, _)| i);
    Ok(done.into_iter().map(|(_, t)| t).collect())
}

/// First completed task of a MultiPush trajectory with the index where its
/// puck first sits in the target. Used to select conditioning windows that
/// pin an ordering.
pub fn push_first_completion_entry(obs: &[f32]) -> Result<Option<(PushTask, usize)>, EnvError> {
    let _ = xy_rows(obs, 6)?;
    for (i, row) in obs.chunks_exact(6).enumerate() {
        for slot in 0..2 {
            let puck = (row[2 + slot * 2], row[3 + slot * 2]);
            if dist(puck, PUSH_TARGETS[slot]) <= PUSH_TARGET_RADIUS {
                let task = if slot == 0 { PushTask::Puck1 } else { PushTask::Puck2 };
                return Ok(Some((task, i)));
            }
        }
    }
    Ok(None)
}

/// Success of a ForkWorld rollout under a route conditioning: the oracle
/// route matches and the goal disc was reached.
pub fn judge_fork(obs: &[f32], expected: Route) -> Result<bool, EnvError> {
    if expected == Route::None {
        return Err(EnvError::AmbiguousConditioning {
            context: "expected route is none".into(),
        });
    }
    Ok(fork_oracle(obs)? == expected && fork_reached_goal(obs))
}

/// Success of a MultiPush rollout under an ordering conditioning: the oracle
/// completion order equals the expected order exactly.
pub fn judge_push(obs: &[f32], expected: &[PushTask]) -> Result<bool, EnvError> {
    if expected.is_empty() {
        return Err(EnvError::AmbiguousConditioning {
            context: "expected ordering is empty".into(),
        });
    }
    Ok(push_oracle(obs)? == expected)
}

/// Route pinned by a window of conditioning frames (flat `(x, y)` rows).
/// The frames must touch exactly one waypoint disc; touching neither or
/// both leaves the intended mode undefined and is a setup error.
pub fn attribute_fork_window(frames: &[f32]) -> Result<Route, EnvError> {
    let _ = xy_rows(frames, 2)?;
    let (mut in_a, mut in_b) = (false, false);
    for p in frames.chunks_exact(2) {
        let p = (p[0], p[1]);
        in_a |= dist(p, WAYPOINT_A) <= ROUTE_DISC_RADIUS;
        in_b |= dist(p, WAYPOINT_B) <= ROUTE_DISC_RADIUS;
    }
    match (in_a, in_b) {
        (true, false) => Ok(Route::A),
        (false, true) => Ok(Route::B),
        (a, b) => Err(EnvError::AmbiguousConditioning {
            context: format!("frames touch waypoint A: {a}, waypoint B: {b}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Scripted play. A waypoint-following proportional controller with bounded
// uniform action noise generates reward-free demonstrations that cover all
// modes; every trajectory must finish its mode or generation fails.

/// Which world to generate or evaluate in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Fork,
    MultiPush,
}

impl EnvKind {
    pub fn d_o(self) -> usize {
        match self {
            EnvKind::Fork => 2,
            EnvKind::MultiPush => 6,
        }
    }

    pub fn d_a(self) -> usize {
        2
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvKind::Fork => write!(f, "fork"),
            EnvKind::MultiPush => write!(f, "multi_push"),
        }
    }
}

/// Proportional gain of the scripted controller.
const NAV_GAIN: f32 = 6.0;
/// Uniform action noise amplitude per coordinate.
const NOISE_AMPLITUDE: f32 = 0.25;
/// Hard step cap per demonstration.
const STEP_CAP: usize = 200;
/// Recorded steps inside the finished state before a demonstration ends,
/// so oracles see the completion in the stored observations.
const FINISH_DWELL: usize = 3;
/// Phase-advance radius for intermediate waypoints.
const ADVANCE_RADIUS: f32 = 0.12;
/// Probability that a push demonstration meanders to a detour point before
/// its first approach. Play is uncurated: identical early observations
/// continue into different headings across the dataset.
const PUSH_DETOUR_PROB: f64 = 0.5;
/// Maximum idle steps at the start of a push demonstration, drawn uniformly.
const PUSH_START_DWELL_MAX: usize = 8;
/// Clamped proportional step toward `target`, plus uniform noise, clamped
/// again so the recorded action stays in `[-1, 1]`.
fn nav_action(pos: (f32, f32), target: (f32, f32), rng: &mut ChaCha8Rng) -> [f32; 2] {
    let mut a = [
        (NAV_GAIN * (target.0 - pos.0)).clamp(-1.0, 1.0),
        (NAV_GAIN * (target.1 - pos.1)).clamp(-1.0, 1.0),
    ];
    for v in &mut a {
        *v = (*v + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)).clamp(-1.0, 1.0);
    }
    a
}

fn demonstrate_fork(route: Route, traj_idx: usize, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
    let waypoint = route.waypoint().expect("demonstrations pick a concrete route");
    let mut env = ForkWorld::new(0.0, 0);
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    // Legs: the shared fork point, then the route waypoint; after both, the
    // controller heads for the goal disc and dwells there.
    let legs = [FORK_POINT, waypoint];
    let mut phase = 0usize;
    let mut dwell = 0usize;
    for _ in 0..STEP_CAP {
        let pos = env.position();
        while phase < legs.len() && dist(pos, legs[phase]) <= ADVANCE_RADIUS {
            phase += 1;
        }
        if phase == legs.len() && dwell >= FINISH_DWELL {
            let traj = Trajectory::new(obs, actions, 2, 2)?;
            return Ok(traj);
        }
        let target = legs.get(phase).copied().unwrap_or(FORK_GOAL);
        let a = nav_action(pos, target, rng);
        obs.extend_from_slice(&env.observe());
        actions.extend_from_slice(&a);
        env.step(&a)?;
        if phase == legs.len() && env.at_goal() {
            dwell += 1;
        }
    }
    Err(EnvError::DemonstrationFailed {
        traj: traj_idx,
        cap: STEP_CAP,
    })
}

fn demonstrate_push(order: [usize; 2], traj_idx: usize, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
    let mut env = MultiPush::new();
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    // Optional detour in the lower band, far enough below the pucks that no
    // contact happens before the first approach phase.
    let mut detour: Option<(f32, f32)> = if rng.gen_bool(PUSH_DETOUR_PROB) {
        Some((rng.gen_range(-0.5..=0.5), rng.gen_range(-0.9..=-0.5)))
    } else {
        None
    };
    // Phases 0..4: approach puck order[0], deliver it, approach puck
    // order[1], deliver it; then dwell in the finished state.
    let mut rest = rng.gen_range(0..=PUSH_START_DWELL_MAX);
    let mut phase = 0usize;
    let mut dwell = 0usize;
    for _ in 0..STEP_CAP {
        if rest > 0 {
            rest -= 1;
            let a = nav_action(env.agent(), PUSH_AGENT_START, rng);
            obs.extend_from_slice(&env.observe());
            actions.extend_from_slice(&a);
            env.step(&a)?;
            continue;
        }
        if let Some(d) = detour {
            if dist(env.agent(), d) <= ADVANCE_RADIUS {
                detour = None;
            }
        }
        loop {
            let advanced = match phase {
                0 | 2 => {
                    let puck = env.puck(order[phase / 2]);
                    dist(env.agent(), puck) <= PUSH_CONTACT_RADIUS
                }
                1 | 3 => env.absorbed(order[phase / 2]),
                _ => false,
            };
            if advanced {
                phase += 1;
            } else {
                break;
            }
        }
        if phase == 4 && dwell >= FINISH_DWELL {
            let traj = Trajectory::new(obs, actions, 6, 2)?;
            return Ok(traj);
        }
        let a = if let Some(d) = detour {
            nav_action(env.agent(), d, rng)
        } else {
            match phase {
                0 | 2 => nav_action(env.agent(), env.puck(order[phase / 2]), rng),
                1 | 3 => {
                    // Steer so the dragged puck heads for its own target.
                    let i = order[phase / 2];
                    let puck = env.puck(i);
                    nav_action(puck, PUSH_TARGETS[i], rng)
                }
                _ => [0.0, 0.0],
            }
        };
        obs.extend_from_slice(&env.observe());
        actions.extend_from_slice(&a);
        env.step(&a)?;
        if phase == 4 {
            dwell += 1;
        }
    }
    Err(EnvError::DemonstrationFailed {
        traj: traj_idx,
        cap: STEP_CAP,
    })
}

/// Draws one mode index from a two-entry mix (normalized internally).
fn draw_mode(mix: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let x: f64 = rng.gen_range(0.0..total);
    if x < mix[0] {
        0
    } else {
        1
    }
}

fn check_mode_mix(mix: &[f64]) -> Result<(), EnvError> {
    if mix.len() != 2 {
        return Err(EnvError::BadModeMix {
            context: format!("has {} entries, want 2", mix.len()),
        });
    }
    if mix.iter().any(|&p| !p.is_finite() || p < 0.0) || mix.iter().sum::<f64>() <= 0.0 {
        return Err(EnvError::BadModeMix {
            context: format!("{mix:?} is not a usable distribution"),
        });
    }
    Ok(())
}

/// Generates `n_traj` scripted demonstrations with modes drawn from
/// `mode_mix` (ForkWorld: route A then B; MultiPush: puck-1-first then
/// puck-2-first). Every trajectory finishes its mode and its oracle label
/// matches the drawn mode; datasets carry no labels.
pub fn scripted_play(
    kind: EnvKind,
    n_traj: usize,
    seed: u64,
    mode_mix: &[f64],
) -> Result<PlayDataset, EnvError> {
    check_mode_mix(mode_mix)?;
    if n_traj == 0 {
        return Err(EnvError::Data(DataError::EmptyDataset));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = worker_rng(seed, i as u64);
        let mode = draw_mode(mode_mix, &mut rng);
        let traj = match kind {
            EnvKind::Fork => {
                let route = if mode == 0 { Route::A } else { Route::B };
                let traj = demonstrate_fork(route, i, &mut rng)?;
                let got = fork_oracle(traj.observations())?;
                if got != route || !fork_reached_goal(traj.observations()) {
                    return Err(EnvError::DemonstrationFailed { traj: i, cap: STEP_CAP });
                }
                traj
            }
            EnvKind::MultiPush => {
                let order = if mode == 0 { [0usize, 1] } else { [1, 0] };
                let traj = demonstrate_push(order, i, &mut rng)?;
                let want: Vec<PushTask> = order
                    .iter()
                    .map(|&p| if p == 0 { PushTask::Puck1 } else { PushTask::Puck2 })
                    .collect();
                if push_oracle(traj.observations())? != want {
                    return Err(EnvError::DemonstrationFailed { traj: i, cap: STEP_CAP });
                }
                traj
            }
        };
        trajectories.push(traj);
    }
    Ok(PlayDataset::new(trajectories)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fork_zero_action_keeps_position() {
        let mut env = ForkWorld::new(0.0, 0);
        env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(env.position(), FORK_START);
    }

    #[test]
    fn fork_step_moves_by_scaled_action() {
        let mut env = ForkWorld::new(0.0, 0);
        env.step(&[1.0, 0.0]).unwrap();
        let (x, y) = env.position();
        assert!((x - 0.08).abs() < 1e-7 && y == 0.0, "({x}, {y})");
    }

    #[test]
    fn fork_rejects_out_of_range_action() {
        let mut env = ForkWorld::new(0.0, 0);
        assert!(matches!(
            env.step(&[1.5, 0.0]),
            Err(EnvError::ActionOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            env.step(&[0.0, f32::NAN]),
            Err(EnvError::ActionOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            env.step(&[0.0]),
            Err(EnvError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fork_clamps_to_bounds() {
        let mut env = ForkWorld::new(0.0, 0);
        for _ in 0..30 {
            env.step(&[-1.0, -1.0]).unwrap();
        }
        assert_eq!(env.position(), (FORK_BOUNDS.0, FORK_BOUNDS.0));
    }

    #[test]
    fn push_far_agent_leaves_pucks() {
        let mut env = MultiPush::new();
        let before = [env.puck(0), env.puck(1)];
        env.step(&[1.0, 0.0]).unwrap();
        assert_eq!([env.puck(0), env.puck(1)], before);
    }

    #[test]
    fn push_contact_drags_puck_and_preserves_offset() {
        let mut env = MultiPush::with_state((-0.4, -0.06), PUSH_PUCK_STARTS);
        let gap_before = dist(env.agent(), env.puck(0));
        assert!(gap_before <= PUSH_CONTACT_RADIUS);
        env.step(&[0.5, 0.5]).unwrap();
        let moved = dist(env.puck(0), PUSH_PUCK_STARTS[0]);
        assert!(moved > 0.0, "contacted puck did not move");
        let gap_after = dist(env.agent(), env.puck(0));
        assert!((gap_after - gap_before).abs() < 1e-6, "drag changed the offset");
        // The far puck stays put.
        assert_eq!(env.puck(1), PUSH_PUCK_STARTS[1]);
    }

    #[test]
    fn push_absorbs_puck_inside_its_target() {
        let mut env = MultiPush::with_state((-0.4, 0.55), [(-0.4, 0.62), (0.4, 0.0)]);
        assert!(env.absorbed(0), "puck inside its target must absorb");
        let before = env.puck(0);
        env.step(&[0.0, 1.0]).unwrap();
        assert_eq!(env.puck(0), before, "absorbed puck moved");
        assert!(!env.done());
    }

    #[test]
    fn fork_oracle_classifies_synthetic_routes() {
        // Through waypoint A's disc, then the goal disc.
        let a_path = [0.0f32, 0.0, 0.5, 0.0, 1.0, 0.55, 1.5, 0.2, 1.75, 0.0];
        assert_eq!(fork_oracle(&a_path).unwrap(), Route::A);
        assert!(fork_reached_goal(&a_path));
        let b_path = [0.0f32, 0.0, 1.0, -0.5, 1.8, 0.05];
        assert_eq!(fork_oracle(&b_path).unwrap(), Route::B);
    }

    #[test]
    fn fork_oracle_stationary_is_none() {
        let still = [0.0f32, 0.0, 0.0, 0.0];
        assert_eq!(fork_oracle(&still).unwrap(), Route::None);
        assert!(!fork_reached_goal(&still));
    }

    #[test]
    fn fork_oracle_ignores_waypoints_entered_after_the_goal() {
        // Goal first, then a wander into waypoint A's disc.
        let path = [1.75f32, 0.0, 1.0, 0.6];
        assert_eq!(fork_oracle(&path).unwrap(), Route::None);
    }

    #[test]
    fn judge_fork_requires_route_match_and_goal() {
        let a_path = [1.0f32, 0.6, 1.8, 0.0];
        assert!(judge_fork(&a_path, Route::A).unwrap());
        assert!(!judge_fork(&a_path, Route::B).unwrap());
        // Waypoint without the goal fails.
        let short = [1.0f32, 0.6, 1.2, 0.3];
        assert!(!judge_fork(&short, Route::A).unwrap());
        assert!(matches!(
            judge_fork(&a_path, Route::None),
            Err(EnvError::AmbiguousConditioning { .. })
        ));
    }

    #[test]
    fn push_oracle_orders_completions() {
        // Row layout: agent, puck1, puck2. Puck2 lands first, puck1 second.
        let rows = [
            0.0f32, 0.0, -0.4, 0.0, 0.4, 0.0,
            0.0, 0.0, -0.4, 0.0, 0.4, 0.65,
            0.0, 0.0, -0.4, 0.65, 0.4, 0.65,
        ];
        assert_eq!(
            push_oracle(&rows).unwrap(),
            vec![PushTask::Puck2, PushTask::Puck1]
        );
        assert!(judge_push(&rows, &[PushTask::Puck2, PushTask::Puck1]).unwrap());
        assert!(!judge_push(&rows, &[PushTask::Puck1, PushTask::Puck2]).unwrap());
    }

    #[test]
    fn attribute_window_requires_a_unique_disc() {
        let near_a = [0.9f32, 0.55, 1.0, 0.5];
        assert_eq!(attribute_fork_window(&near_a).unwrap(), Route::A);
        let near_b = [1.05f32, -0.62];
        assert_eq!(attribute_fork_window(&near_b).unwrap(), Route::B);
        let neither = [0.0f32, 0.0, 0.5, 0.0];
        assert!(matches!(
            attribute_fork_window(&neither),
            Err(EnvError::AmbiguousConditioning { .. })
        ));
        let both = [1.0f32, 0.6, 1.0, -0.6];
        assert!(matches!(
            attribute_fork_window(&both),
            Err(EnvError::AmbiguousConditioning { .. })
        ));
    }

    #[test]
    fn scripted_fork_covers_modes_at_the_requested_mix() {
        let ds = scripted_play(EnvKind::Fork, 200, 17, &[0.5, 0.5]).unwrap();
        let mut counts = [0usize; 2];
        for traj in ds.trajectories() {
            match fork_oracle(traj.observations()).unwrap() {
                Route::A => counts[0] += 1,
                Route::B => counts[1] += 1,
                Route::None => panic!("demonstration without a route"),
            }
            assert!(fork_reached_goal(traj.observations()), "demonstration missed the goal");
            assert!(traj.len() >= 6, "trajectory too short for window sampling");
        }
        // Binomial(200, 0.5) stays within 100 +- 20 far beyond 3 sigma.
        assert!(
            (80..=120).contains(&counts[0]),
            "route counts {counts:?} outside the expected band"
        );
        assert_eq!(counts[0] + counts[1], 200);
    }

    #[test]
    fn scripted_push_produces_both_orderings() {
        let ds = scripted_play(EnvKind::MultiPush, 30, 3, &[0.5, 0.5]).unwrap();
        let mut seen_first = [false, false];
        for traj in ds.trajectories() {
            let order = push_oracle(traj.observations()).unwrap();
            assert_eq!(order.len(), 2, "demonstration left a puck undelivered");
            match order[0] {
                PushTask::Puck1 => seen_first[0] = true,
                PushTask::Puck2 => seen_first[1] = true,
            }
        }
        assert!(seen_first[0] && seen_first[1], "an ordering is missing");
    }

    #[test]
    fn scripted_play_is_deterministic_in_the_seed() {
        let a = scripted_play(EnvKind::Fork, 12, 5, &[0.5, 0.5]).unwrap();
        let b = scripted_play(EnvKind::Fork, 12, 5, &[0.5, 0.5]).unwrap();
        for (x, y) in a.trajectories().iter().zip(b.trajectories()) {
            assert_eq!(x.observations(), y.observations());
            assert_eq!(x.actions(), y.actions());
        }
        let c = scripted_play(EnvKind::Fork, 12, 6, &[0.5, 0.5]).unwrap();
        let same = a
            .trajectories()
            .iter()
            .zip(c.trajectories())
            .all(|(x, y)| x.observations() == y.observations());
        assert!(!same, "different seeds produced identical data");
    }

    #[test]
    fn scripted_play_rejects_bad_mode_mix() {
        assert!(matches!(
            scripted_play(EnvKind::Fork, 4, 0, &[0.5]),
            Err(EnvError::BadModeMix { .. })
        ));
        assert!(matches!(
            scripted_play(EnvKind::Fork, 4, 0, &[0.0, 0.0]),
            Err(EnvError::BadModeMix { .. })
        ));
        assert!(matches!(
            scripted_play(EnvKind::Fork, 4, 0, &[-1.0, 2.0]),
            Err(EnvError::BadModeMix { .. })
        ));
    }

    #[test]
    fn one_sided_mix_pins_the_mode() {
        let ds = scripted_play(EnvKind::Fork, 10, 9, &[0.0, 1.0]).unwrap();
        for traj in ds.trajectories() {
            assert_eq!(fork_oracle(traj.observations()).unwrap(), Route::B);
        }
    }

    proptest! {
        #[test]
        fn fork_oracle_is_total_and_deterministic(
            points in proptest::collection::vec((-1.0f32..2.0, -1.0f32..2.0), 1..60)
        ) {
            let flat: Vec<f32> = points.iter().flat_map(|&(x, y)| [x, y]).collect();
            let first = fork_oracle(&flat).unwrap();
            let second = fork_oracle(&flat).unwrap();
            prop_assert_eq!(first, second);
        }

        #[test]
        fn scripted_fork_actions_stay_in_range(seed in 0u64..500) {
            let ds = scripted_play(EnvKind::Fork, 2, seed, &[0.5, 0.5]).unwrap();
            for traj in ds.trajectories() {
                prop_assert!(traj.actions().iter().all(|a| (-1.0..=1.0).contains(a)));
            }
        }
    }
}
