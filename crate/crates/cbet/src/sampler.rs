//! Action sampling from head outputs and closed-loop conditioned rollouts.
//!
//! Multi-modal heads are sampled bin-first: a bin is drawn from the
//! temperature-scaled multinomial over bin logits, then the bin's center and
//! predicted offset reconstruct the action. Rollouts hold the conditioning
//! fixed, maintain a sliding observation window front-padded with the first
//! observation, and record everything needed for oracle judging.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{ActionCodec, CodecError};
use crate::envs::{EnvError, Environment, OracleLabel};
use crate::model::{CBetModel, GoalInput, HeadKind, ModelError, PolicyOutput};
use crate::nn::params::ParamStore;
use crate::playdata::worker_rng;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("temperature {got} must be finite and >= 0")]
    BadTemperature { got: f64 },
    #[error("bad rollout config: {context}")]
    BadConfig { context: String },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("record serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Bin sentinel recorded for regression-head steps, which have no bins.
pub const NO_BIN: i64 = -1;

/// One closed-loop episode's settings. The observation history length comes
/// from the model config, not from here.
#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// Softmax temperature over bin logits; 0 means argmax.
    pub temperature: f64,
    pub seed: u64,
    /// Conditioning held fixed for the whole episode.
    pub goal: GoalInput,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.max_steps == 0 {
            return Err(SamplerError::BadConfig {
                context: "max_steps must be >= 1".into(),
            });
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<(), SamplerError> {
    if !t.is_finite() || t < 0.0 {
        return Err(SamplerError::BadTemperature { got: t });
    }
    Ok(())
}

/// Everything one episode produced. Observations include the terminal state,
/// so `observations` holds `steps + 1` rows against `steps` actions and
/// bins. The oracle fields are filled by the evaluator, never by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Flat `(steps + 1) * d_o` values.
    pub observations: Vec<f32>,
    /// Flat `steps * d_a` values.
    pub actions: Vec<f32>,
    /// Sampled bin per step; [`NO_BIN`] for regression heads.
    pub bins: Vec<i64>,
    pub steps: usize,
    pub d_o: usize,
    pub d_a: usize,
    pub oracle_label: Option<OracleLabel>,
    pub success: Option<bool>,
}

#[derive(Serialize)]
struct RecordSummary<'a> {
    steps: usize,
    success: Option<bool>,
    oracle_label: Option<&'a OracleLabel>,
}

impl RolloutRecord {
    /// One CSV row per step: `step, o0.., a0.., bin`, with the observation
    /// the action was taken at.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 0..self.d_o {
            out.push_str(&format!(",o{i}"));
        }
        for i in 0..self.d_a {
            out.push_str(&format!(",a{i}"));
        }
        out.push_str(",bin\n");
        for t in 0..self.steps {
            out.push_str(&t.to_string());
            for v in &self.observations[t * self.d_o..(t + 1) * self.d_o] {
                out.push_str(&format!(",{v}"));
            }
            for v in &self.actions[t * self.d_a..(t + 1) * self.d_a] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", self.bins[t]));
        }
        out
    }

    /// JSON summary: steps taken, success flag, oracle label.
    pub fn summary_json(&self) -> Result<String, SamplerError> {
        Ok(serde_json::to_string_pretty(&RecordSummary {
            steps: self.steps,
            success: self.success,
            oracle_label: self.oracle_label.as_ref(),
        })?)
    }
}

/// Softmax of `logits / temperature` as f64 probabilities; temperature 0
/// puts all mass on the argmax (lowest index on ties).
pub fn bin_distribution(logits: &[f32], temperature: f64) -> Result<Vec<f64>, SamplerError> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(SamplerError::DimensionMismatch {
            context: "no bin logits".into(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::NonFinite {
            what: "bin logits".into(),
        });
    }
    let mut p = vec![0.0f64; logits.len()];
    if temperature == 0.0 {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        p[best] = 1.0;
        return Ok(p);
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut total = 0.0;
    for (pi, &l) in p.iter_mut().zip(logits) {
        *pi = ((l as f64 - max) / temperature).exp();
        total += *pi;
    }
    for pi in &mut p {
        *pi /= total;
    }
    Ok(p)
}

/// Draws one bin from the temperature-scaled multinomial.
pub fn sample_bin(
    logits: &[f32],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize, SamplerError> {
    let p = bin_distribution(logits, temperature)?;
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.len() - 1)
}

/// Samples one action from a single position's head output: draws a bin
/// from `logits` (length k), adds the bin's predicted offset (row of the
/// `k * d_a` matrix) to the bin center, and clamps each coordinate to
/// `[-1, 1]`.
pub fn sample_action(
    logits: &[f32],
    offsets: &[f32],
    codec: &ActionCodec,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, usize), SamplerError> {
    let (k, d_a) = (codec.k(), codec.action_dim());
    if logits.len() != k || offsets.len() != k * d_a {
        return Err(SamplerError::DimensionMismatch {
            context: format!(
                "{} logits and {} offset values against codec k {k}, d_a {d_a}",
                logits.len(),
                offsets.len()
            ),
        });
    }
    let bin = sample_bin(logits, temperature, rng)?;
    let center = codec.center(bin)?;
    let action = (0..d_a)
        .map(|d| (center[d] + offsets[bin * d_a + d]).clamp(-1.0, 1.0))
        .collect();
    Ok((action, bin))
}

/// Runs one conditioned episode: keeps the last `context_n` observations
/// (front-padded by repeating the first), forwards goal tokens plus the
/// window each step, samples an action for the latest position, and steps
/// the environment until it reports done or `max_steps` is reached.
pub fn rollout(
    model: &CBetModel,
    store: &ParamStore<f32>,
    codec: Option<&ActionCodec>,
    env: &mut dyn Environment,
    cfg: &RolloutConfig,
) -> Result<RolloutRecord, SamplerError> {
    cfg.validate()?;
    let mc = model.config();
    let (n, d_o, d_a) = (mc.context_n, mc.d_o, mc.d_a);
    if env.d_o() != d_o || env.d_a() != d_a {
        return Err(SamplerError::DimensionMismatch {
            context: format!(
                "environment dims ({}, {}) against model dims ({d_o}, {d_a})",
                env.d_o(),
                env.d_a()
            ),
        });
    }
    let codec = match (model.head_kind(), codec) {
        (HeadKind::Bet, Some(c)) => {
            if c.k() != mc.k || c.action_dim() != d_a {
                return Err(SamplerError::DimensionMismatch {
                    context: format!(
                        "codec (k {}, d_a {}) against model (k {}, d_a {d_a})",
                        c.k(),
                        c.action_dim(),
                        mc.k
                    ),
                });
            }
            Some(c)
        }
        (HeadKind::Bet, None) => {
            return Err(SamplerError::BadConfig {
                context: "multi-modal head needs an action codec".into(),
            })
        }
        (HeadKind::Regression, _) => None,
    };

    let mut rng = worker_rng(cfg.seed, 0);
    let first = env.observe();
    // Window of the last n observations, oldest first.
    let mut window: Vec<f32> = Vec::with_capacity(n * d_o);
    for _ in 0..n {
        window.extend_from_slice(&first);
    }
    let mut observations = first.clone();
    let mut actions = Vec::new();
    let mut bins = Vec::new();
    let mut steps = 0usize;

    while steps < cfg.max_steps && !env.done() {
        let out = model.forward(store, &cfg.goal, &window)?;
        let (action, bin) = match out {
            PolicyOutput::Bet(h) => {
                let k = mc.k;
                let logits = &h.bin_logits.data()[(n - 1) * k..n * k];
                let offsets = &h.offsets.data()[(n - 1) * k * d_a..n * k * d_a];
                let codec = codec.expect("checked against the head kind above");
                let (a, b) = sample_action(logits, offsets, codec, cfg.temperature, &mut rng)?;
                (a, b as i64)
            }
            PolicyOutput::Regression(pred) => {
                let row = &pred.data()[(n - 1) * d_a..n * d_a];
                let a: Vec<f32> = row.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                (a, NO_BIN)
            }
        };
        env.step(&action)?;
        let obs = env.observe();
        actions.extend_from_slice(&action);
        bins.push(bin);
        observations.extend_from_slice(&obs);
        window.drain(..d_o);
        window.extend_from_slice(&obs);
        steps += 1;
    }

    Ok(RolloutRecord {
        observations,
        actions,
        bins,
        steps,
        d_o,
        d_a,
        oracle_label: None,
        success: None,
    })
}
