//! The goal-conditioned policy network and its loss.
//!
//! The network prepends projected goal tokens (future observation frames or
//! a repeated label token) to projected current-observation tokens, runs the
//! combined sequence through a causal transformer trunk, and reads heads off
//! the current positions only. The multi-modal head emits per-timestep bin
//! logits and a per-bin offset matrix; a regression head emits raw actions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::ActionCodec;
use crate::nn::layers::{Block, LayerNorm, Linear};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::scalar::Scalar;
use crate::nn::session::{Session, Var};
use crate::nn::tensor::Tensor;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {context}")]
    BadConfig { context: String },
    #[error("conditioning input does not match goal mode: {context}")]
    GoalMode { context: String },
    #[error("dimension mismatch: {context}")]
    Dimension { context: String },
    #[error("loss params must be finite and non-negative, got gamma {gamma}, lambda {lambda}")]
    BadLossParams { gamma: f64, lambda: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("codec: {0}")]
    Codec(#[from] crate::codec::CodecError),
}

/// What the goal tokens encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// Goal tokens are future observation frames.
    Observation,
    /// Goal tokens repeat a single label vector (one-hot or binary).
    Label { label_dim: usize },
}

/// Network architecture and problem dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_width: usize,
    pub dropout_p: f64,
    /// Current-window length N.
    pub context_n: usize,
    /// Goal-window length N'; 0 trains the unconditional baseline.
    pub goal_frames: usize,
    /// Number of action bins.
    pub k: usize,
    pub d_o: usize,
    pub d_a: usize,
    pub goal_mode: GoalMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |context: String| Err(ModelError::BadConfig { context });
        if self.layers == 0 || self.heads == 0 || self.embed_width == 0 {
            return bad(format!(
                "layers {}, heads {}, width {} must all be positive",
                self.layers, self.heads, self.embed_width
            ));
        }
        if self.embed_width % self.heads != 0 {
            return bad(format!(
                "width {} not divisible by heads {}",
                self.embed_width, self.heads
            ));
        }
        if self.context_n == 0 {
            return bad("context_n must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.d_o == 0 || self.d_a == 0 {
            return bad("d_o and d_a must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if let GoalMode::Label { label_dim } = self.goal_mode {
            if label_dim == 0 {
                return bad("label_dim must be >= 1 in label mode".into());
            }
        }
        Ok(())
    }

    /// Width of one goal token before projection.
    pub fn goal_token_dim(&self) -> usize {
        match self.goal_mode {
            GoalMode::Observation => self.d_o,
            GoalMode::Label { label_dim } => label_dim,
        }
    }

    /// Trunk sequence length: goal tokens then current tokens.
    pub fn seq_len(&self) -> usize {
        self.goal_frames + self.context_n
    }
}

/// Focal exponent and offset-loss weight. Defaults: gamma 2, lambda 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            gamma: 2.0,
            lambda: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.gamma.is_finite() && self.lambda.is_finite())
            || self.gamma < 0.0
            || self.lambda < 0.0
        {
            return Err(ModelError::BadLossParams {
                gamma: self.gamma,
                lambda: self.lambda,
            });
        }
        Ok(())
    }
}

/// Which output head the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Bin logits plus per-bin offsets (multi-modal).
    Bet,
    /// Raw action regression (unimodal).
    Regression,
}

#[derive(Debug, Clone)]
enum Head {
    Bet { bin: Linear, offset: Linear },
    Regression { out: Linear },
}

/// Conditioning input for one rollout or sample.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalInput {
    /// `goal_frames * d_o` future observation values, row-major.
    Frames(Vec<f32>),
    /// One label vector of `label_dim` values.
    Label(Vec<f32>),
    /// No conditioning (unconditional baseline, `goal_frames = 0`).
    None,
}

/// Per-current-timestep multi-modal head output.
#[derive(Debug, Clone)]
pub struct HeadOutput<S> {
    /// `[context_n, k]`.
    pub bin_logits: Tensor<S>,
    /// `[context_n, k, d_a]`.
    pub offsets: Tensor<S>,
}

/// Head output for either head kind.
#[derive(Debug, Clone)]
pub enum PolicyOutput<S> {
    Bet(HeadOutput<S>),
    /// `[context_n, d_a]` raw actions.
    Regression(Tensor<S>),
}

/// Tape handles for a batched forward pass, consumed by the loss builders.
pub enum HeadVars {
    Bet {
        /// `[batch, context_n, k]`.
        bin_logits: Var,
        /// `[batch, context_n, k, d_a]`.
        offsets: Var,
    },
    Regression {
        /// `[batch, context_n, d_a]`.
        pred: Var,
    },
}

/// The policy network. Holds parameter handles and sizes only; all values
/// live in a [`ParamStore`] so the same network runs at any precision.
#[derive(Debug, Clone)]
pub struct CBetModel {
    cfg: ModelConfig,
    goal_proj: Option<Linear>,
    obs_proj: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Head,
}

impl CBetModel {
    /// Builds the network into `store` with seeded initialization. Parameter
    /// creation order (and so checkpoint order) is fixed by construction.
    pub fn build<S: Scalar>(
        cfg: &ModelConfig,
        head: HeadKind,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<CBetModel, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.embed_width;

        let goal_proj = if cfg.goal_frames > 0 {
            Some(Linear::new(store, "goal_proj", cfg.goal_token_dim(), e, &mut rng)?)
        } else {
            None
        };
        let obs_proj = Linear::new(store, "obs_proj", cfg.d_o, e, &mut rng)?;
        let pos = store.add(
            "pos",
            Tensor::from_fn(&[cfg.seq_len(), e], |_| {
                S::from_f64(crate::nn::layers::normal(&mut rng, crate::nn::layers::INIT_STD))
            }),
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("block{i}"), e, cfg.heads, cfg.dropout_p, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let ln_f = LayerNorm::new(store, "ln_f", e)?;
        let head = match head {
            HeadKind::Bet => Head::Bet {
                bin: Linear::new(store, "head.bin", e, cfg.k, &mut rng)?,
                offset: Linear::new(store, "head.offset", e, cfg.k * cfg.d_a, &mut rng)?,
            },
            HeadKind::Regression => Head::Regression {
                out: Linear::new(store, "head.out", e, cfg.d_a, &mut rng)?,
            },
        };
        Ok(CBetModel {
            cfg: cfg.clone(),
            goal_proj,
            obs_proj,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::Bet { .. } => HeadKind::Bet,
            Head::Regression { .. } => HeadKind::Regression,
        }
    }

    /// Batched forward pass. `goals` is `[batch, goal_frames, goal_dim]`
    /// (zero-length middle axis when unconditional), `obs` is
    /// `[batch, context_n, d_o]`. Outputs cover current positions only.
    pub fn forward_batch<S: Scalar>(
        &self,
        s: &mut Session<S>,
        store: &ParamStore<S>,
        goals: &Tensor<S>,
        obs: &Tensor<S>,
    ) -> Result<HeadVars, ModelError> {
        let cfg = &self.cfg;
        let (np, n, e) = (cfg.goal_frames, cfg.context_n, cfg.embed_width);
        let gd = cfg.goal_token_dim();
        let b = match obs.shape() {
            [b, n_got, d] if *n_got == n && *d == cfg.d_o => *b,
            other => {
                return Err(ModelError::Dimension {
                    context: format!(
                        "obs window shape {other:?}, want [batch, {n}, {}]",
                        cfg.d_o
                    ),
                })
            }
        };
        if goals.shape() != [b, np, gd] {
            return Err(ModelError::Dimension {
                context: format!(
                    "goal window shape {:?}, want [{b}, {np}, {gd}]",
                    goals.shape()
                ),
            });
        }

        let obs_v = s.constant(obs.clone());
        let obs_flat = s.reshape(obs_v, &[b * n, cfg.d_o])?;
        let obs_tok = self.obs_proj.forward(s, store, obs_flat)?;
        let obs_tok = s.reshape(obs_tok, &[b, n, e])?;

        let tokens = match &self.goal_proj {
            Some(proj) => {
                let goals_v = s.constant(goals.clone());
                let goals_flat = s.reshape(goals_v, &[b * np, gd])?;
                let goal_tok = proj.forward(s, store, goals_flat)?;
                let goal_tok = s.reshape(goal_tok, &[b, np, e])?;
                s.concat(goal_tok, obs_tok, 1)?
            }
            None => obs_tok,
        };

        let pos_table = s.param(store, self.pos);
        let indices: Vec<usize> = (0..np + n).collect();
        let pos_rows = s.embedding(pos_table, &indices)?;
        let mut x = s.add_rows(tokens, pos_rows)?;

        for block in &self.blocks {
            x = block.forward(s, store, x)?;
        }
        let x = self.ln_f.forward(s, store, x)?;

        // Heads read only the current positions.
        let current = s.narrow(x, 1, np, n)?;
        let flat = s.reshape(current, &[b * n, e])?;
        Ok(match &self.head {
            Head::Bet { bin, offset } => {
                let logits = bin.forward(s, store, flat)?;
                let bin_logits = s.reshape(logits, &[b, n, cfg.k])?;
                let off = offset.forward(s, store, flat)?;
                let offsets = s.reshape(off, &[b, n, cfg.k, cfg.d_a])?;
                HeadVars::Bet { bin_logits, offsets }
            }
            Head::Regression { out } => {
                let pred = out.forward(s, store, flat)?;
                let pred = s.reshape(pred, &[b, n, cfg.d_a])?;
                HeadVars::Regression { pred }
            }
        })
    }

    /// Single-window inference (no dropout): goal input plus a
    /// `context_n x d_o` observation window to per-timestep head outputs.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        goal: &GoalInput,
        obs_window: &[f32],
    ) -> Result<PolicyOutput<S>, ModelError> {
        let cfg = &self.cfg;
        if obs_window.len() != cfg.context_n * cfg.d_o {
            return Err(ModelError::Dimension {
                context: format!(
                    "obs window has {} values, want {} x {}",
                    obs_window.len(),
                    cfg.context_n,
                    cfg.d_o
                ),
            });
        }
        let goal_rows = make_goal_tokens(cfg, goal)?;
        let goals = Tensor::new(
            vec![1, cfg.goal_frames, cfg.goal_token_dim()],
            goal_rows.data().iter().map(|&v| S::from_f32(v)).collect(),
        )?;
        let obs = Tensor::new(
            vec![1, cfg.context_n, cfg.d_o],
            obs_window.iter().map(|&v| S::from_f32(v)).collect(),
        )?;
        let mut s: Session<S> = Session::eval();
        match self.forward_batch(&mut s, store, &goals, &obs)? {
            HeadVars::Bet { bin_logits, offsets } => {
                let logits = Tensor::new(
                    vec![cfg.context_n, cfg.k],
                    s.value(bin_logits).data().to_vec(),
                )?;
                let offs = Tensor::new(
                    vec![cfg.context_n, cfg.k, cfg.d_a],
                    s.value(offsets).data().to_vec(),
                )?;
                Ok(PolicyOutput::Bet(HeadOutput {
                    bin_logits: logits,
                    offsets: offs,
                }))
            }
            HeadVars::Regression { pred } => Ok(PolicyOutput::Regression(Tensor::new(
                vec![cfg.context_n, cfg.d_a],
                s.value(pred).data().to_vec(),
            )?)),
        }
    }
}

/// Builds the goal-token rows (`goal_frames` x `goal_token_dim`) for one
/// conditioning input: observation frames pass through, a label is repeated
/// once per goal position.
pub fn make_goal_tokens(cfg: &ModelConfig, goal: &GoalInput) -> Result<Tensor<f32>, ModelError> {
    let gd = cfg.goal_token_dim();
    if cfg.goal_frames == 0 {
        return match goal {
            GoalInput::None => Ok(Tensor::zeros(&[0, gd])),
            other => Err(ModelError::GoalMode {
                context: format!("unconditional model got {other:?}"),
            }),
        };
    }
    match (cfg.goal_mode, goal) {
        (GoalMode::Observation, GoalInput::Frames(frames)) => {
            if frames.len() != cfg.goal_frames * cfg.d_o {
                return Err(ModelError::Dimension {
                    context: format!(
                        "goal frames have {} values, want {} x {}",
                        frames.len(),
                        cfg.goal_frames,
                        cfg.d_o
                    ),
                });
            }
            Ok(Tensor::new(vec![cfg.goal_frames, gd], frames.clone())
                .expect("length checked above"))
        }
        (GoalMode::Label { label_dim }, GoalInput::Label(label)) => {
            if label.len() != label_dim {
                return Err(ModelError::Dimension {
                    context: format!("label has {} values, want {label_dim}", label.len()),
                });
            }
            let mut rows = Vec::with_capacity(cfg.goal_frames * label_dim);
            for _ in 0..cfg.goal_frames {
                rows.extend_from_slice(label);
            }
            Ok(Tensor::new(vec![cfg.goal_frames, gd], rows).expect("length by construction"))
        }
        (mode, other) => Err(ModelError::GoalMode {
            context: format!("mode {mode:?} got {other:?}"),
        }),
    }
}

/// Loss value plus its per-term means, all as plain numbers for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub focal: f64,
    pub offset: f64,
}

/// Builds the multi-modal loss on the tape: per timestep, a focal term
/// `-(1 - p_t)^gamma * ln p_t` on the true bin's probability plus
/// `lambda * |true_offset - predicted_offset[true_bin]|^2` on the true
/// bin's offset row only; the total is the mean over all timesteps.
pub fn bet_loss<S: Scalar>(
    s: &mut Session<S>,
    bin_logits: Var,
    offsets: Var,
    true_actions: &[f32],
    codec: &ActionCodec,
    params: &LossParams,
) -> Result<(Var, LossBreakdown), ModelError> {
    params.validate()?;
    let d_a = codec.action_dim();
    let logits_shape = s.value(bin_logits).shape().to_vec();
    let k = *logits_shape.last().ok_or_else(|| ModelError::Dimension {
        context: "bin logits are rank-0".into(),
    })?;
    let rows = s.value(bin_logits).numel() / k;
    if true_actions.len() != rows * d_a {
        return Err(ModelError::Dimension {
            context: format!(
                "{} action values for {rows} timesteps of d_a {d_a}",
                true_actions.len()
            ),
        });
    }
    if s.value(offsets).numel() != rows * k * d_a {
        return Err(ModelError::Dimension {
            context: format!(
                "offset tensor {:?} does not match {rows} x {k} x {d_a}",
                s.value(offsets).shape()
            ),
        });
    }

    let mut bins = Vec::with_capacity(rows);
    let mut target = Vec::with_capacity(rows * d_a);
    for row in true_actions.chunks_exact(d_a) {
        let enc = codec.encode(row)?;
        bins.push(enc.bin);
        target.extend(enc.offset.iter().map(|&v| S::from_f32(v)));
    }

    // Focal term over the true bin's log-probability.
    let flat_logits = s.reshape(bin_logits, &[rows, k])?;
    let logp_all = s.log_softmax_last(flat_logits)?;
    let logp = s.gather_last(logp_all, &bins)?;
    let p = s.exp(logp)?;
    let neg_p = s.scale(p, -1.0)?;
    let one_minus_p = s.add_scalar(neg_p, 1.0)?;
    let weight = s.pow_const(one_minus_p, params.gamma)?;
    let weighted = s.mul(weight, logp)?;
    let focal_vec = s.scale(weighted, -1.0)?;

    // Offset term on the true bin's row only; other rows get no gradient.
    let flat_offsets = s.reshape(offsets, &[rows, k, d_a])?;
    let picked = s.gather_rows(flat_offsets, &bins)?;
    let target_v = s.constant(Tensor::new(vec![rows, d_a], target)?);
    let diff = s.sub(target_v, picked)?;
    let sq = s.mul(diff, diff)?;
    let offset_vec = s.sum_last(sq)?;

    let scaled_offset = s.scale(offset_vec, params.lambda)?;
    let per_step = s.add(focal_vec, scaled_offset)?;
    let total = s.mean_all(per_step)?;

    let mean_of = |t: &Tensor<S>| {
        t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64
    };
    let breakdown = LossBreakdown {
        total: s.value(total).item().as_f64(),
        focal: mean_of(s.value(focal_vec)),
        offset: mean_of(s.value(offset_vec)),
    };
    Ok((total, breakdown))
}

/// Mean squared error over all action coordinates (regression head).
pub fn mse_loss<S: Scalar>(
    s: &mut Session<S>,
    pred: Var,
    true_actions: &[f32],
) -> Result<(Var, f64), ModelError> {
    if s.value(pred).numel() != true_actions.len() {
        return Err(ModelError::Dimension {
            context: format!(
                "prediction {:?} vs {} action values",
                s.value(pred).shape(),
                true_actions.len()
            ),
        });
    }
    let target = s.constant(Tensor::new(
        s.value(pred).shape().to_vec(),
        true_actions.iter().map(|&v| S::from_f32(v)).collect(),
    )?);
    let diff = s.sub(pred, target)?;
    let sq = s.mul(diff, diff)?;
    let total = s.mean_all(sq)?;
    let value = s.value(total).item().as_f64();
    Ok((total, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{fd_grad_at, rel_err};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 1,
            embed_width: 8,
            dropout_p: 0.0,
            context_n: 5,
            goal_frames: 3,
            k: 3,
            d_o: 2,
            d_a: 2,
            goal_mode: GoalMode::Observation,
        }
    }

    fn window(n: usize, d: usize, salt: f32) -> Vec<f32> {
        (0..n * d).map(|i| ((i as f32 + salt) * 0.37).sin() * 0.8).collect()
    }

    #[test]
    fn head_shapes_match_config() {
        let cfg = tiny_config();
        let mut store: ParamStore<f32> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 0).unwrap();
        let out = model
            .forward(
                &store,
                &GoalInput::Frames(window(3, 2, 0.0)),
                &window(5, 2, 1.0),
            )
            .unwrap();
        match out {
            PolicyOutput::Bet(h) => {
                assert_eq!(h.bin_logits.shape(), &[5, 3]);
                assert_eq!(h.offsets.shape(), &[5, 3, 2]);
                // Softmax of each logit row sums to one.
                for r in 0..5 {
                    let row = &h.bin_logits.data()[r * 3..(r + 1) * 3];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
                    let total: f32 = row.iter().map(|v| (v - max).exp() / sum).sum();
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
            PolicyOutput::Regression(_) => panic!("wrong head"),
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config();
        let mut store: ParamStore<f32> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 1).unwrap();
        let goal = GoalInput::Frames(window(3, 2, 0.5));
        let obs = window(5, 2, 2.0);
        let (a, b) = (
            model.forward(&store, &goal, &obs).unwrap(),
            model.forward(&store, &goal, &obs).unwrap(),
        );
        match (a, b) {
            (PolicyOutput::Bet(x), PolicyOutput::Bet(y)) => {
                assert_eq!(x.bin_logits, y.bin_logits);
                assert_eq!(x.offsets, y.offsets);
            }
            _ => panic!("wrong heads"),
        }
    }

    #[test]
    fn current_positions_are_causal_and_goals_are_global() {
        let cfg = tiny_config();
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 2).unwrap();
        let goal = window(3, 2, 0.3);
        let obs = window(5, 2, 4.0);

        let logits = |goal: &[f32], obs: &[f32]| -> Vec<f64> {
            match model
                .forward(&store, &GoalInput::Frames(goal.to_vec()), obs)
                .unwrap()
            {
                PolicyOutput::Bet(h) => h.bin_logits.data().to_vec(),
                _ => unreachable!(),
            }
        };
        let reference = logits(&goal, &obs);

        // Perturbing current token i must leave outputs at positions < i
        // bit-identical up to 1e-6.
        for i in 0..5 {
            let mut perturbed = obs.clone();
            perturbed[i * 2] += 0.25;
            let out = logits(&goal, &perturbed);
            for pos in 0..i {
                for c in 0..3 {
                    let delta = (out[pos * 3 + c] - reference[pos * 3 + c]).abs();
                    assert!(
                        delta <= 1e-6,
                        "current token {i} leaked into position {pos}: {delta}"
                    );
                }
            }
            // The perturbed position itself must respond (sanity).
            let self_delta: f64 = (0..3)
                .map(|c| (out[i * 3 + c] - reference[i * 3 + c]).abs())
                .sum();
            assert!(self_delta > 1e-9, "position {i} ignored its own input");
        }

        // A goal token may influence every current position.
        let mut goal_perturbed = goal.clone();
        goal_perturbed[0] += 0.25;
        let out = logits(&goal_perturbed, &obs);
        for pos in 0..5 {
            let delta: f64 = (0..3)
                .map(|c| (out[pos * 3 + c] - reference[pos * 3 + c]).abs())
                .sum();
            assert!(delta > 1e-9, "goal change did not reach position {pos}");
        }
    }

    #[test]
    fn focal_at_gamma_zero_is_cross_entropy() {
        // gamma = 0, lambda = 0 reduces to mean NLL of the true bins.
        let codec = ActionCodec::from_centers(vec![-0.5, 0.0, 0.5], 1).unwrap();
        let mut s: Session<f64> = Session::eval();
        let logits_data = vec![0.3, -0.7, 1.1, 0.0, 0.0, 0.0, 2.0, 1.0, -1.0];
        let logits = s.constant(Tensor::new(vec![3, 3], logits_data.clone()).unwrap());
        let offsets = s.constant(Tensor::zeros(&[3, 3, 1]));
        let actions = [-0.5f32, 0.0, 0.5]; // bins 0, 1, 2 exactly
        let params = LossParams {
            gamma: 0.0,
            lambda: 0.0,
        };
        let (_, breakdown) = bet_loss(&mut s, logits, offsets, &actions, &codec, &params).unwrap();

        let mut want = 0.0;
        for (r, &bin) in [0usize, 1, 2].iter().enumerate() {
            let row = &logits_data[r * 3..(r + 1) * 3];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            want -= row[bin] - lse;
        }
        want /= 3.0;
        assert!(
            (breakdown.total - want).abs() < 1e-7,
            "focal at gamma 0: {} vs NLL {want}",
            breakdown.total
        );
    }

    #[test]
    fn focal_term_at_p_09_matches_reference_value() {
        // One timestep with p_t = 0.9 exactly: logits = ln of the target
        // distribution. Focal(gamma 2) = 0.01 * (-ln 0.9) = 1.05361e-3.
        let codec = ActionCodec::from_centers(vec![-0.5, 0.5], 1).unwrap();
        let mut s: Session<f64> = Session::eval();
        let logits = s.constant(Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap());
        let offsets = s.constant(Tensor::zeros(&[1, 2, 1]));
        let actions = [-0.5f32];
        let params = LossParams {
            gamma: 2.0,
            lambda: 0.0,
        };
        let (_, breakdown) = bet_loss(&mut s, logits, offsets, &actions, &codec, &params).unwrap();
        assert!(
            (breakdown.total - 1.05361e-3).abs() < 1e-8,
            "focal {} vs 1.05361e-3",
            breakdown.total
        );
    }

    #[test]
    fn offset_term_matches_hand_value() {
        // True bin 1, true offset (0.2, -0.1), predicted row zero: the
        // squared norm is 0.05.
        let codec = ActionCodec::from_centers(vec![-0.5, -0.5, 0.5, 0.5], 2).unwrap();
        let mut s: Session<f64> = Session::eval();
        // Drive the encoder to bin 1 with action = center1 + (0.2, -0.1).
        let action = [0.5f32 + 0.2, 0.5 - 0.1];
        let enc = codec.encode(&action).unwrap();
        assert_eq!(enc.bin, 1);
        let logits = s.constant(Tensor::zeros(&[1, 2]));
        let offsets = s.constant(Tensor::zeros(&[1, 2, 2]));
        let params = LossParams {
            gamma: 2.0,
            lambda: 1.0,
        };
        let (_, breakdown) = bet_loss(&mut s, logits, offsets, &action, &codec, &params).unwrap();
        assert!(
            (breakdown.offset - 0.05).abs() < 1e-6,
            "offset term {} vs 0.05",
            breakdown.offset
        );
    }

    #[test]
    fn offset_gradient_skips_non_true_bins() {
        let codec = ActionCodec::from_centers(vec![-0.5, 0.0, 0.5], 1).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        let logits_id = store.add("logits", Tensor::zeros(&[2, 3])).unwrap();
        let offsets_id = store
            .add("offsets", Tensor::from_fn(&[2, 3, 1], |i| i as f64 * 0.1))
            .unwrap();
        let mut s: Session<f64> = Session::eval();
        let logits = s.param(&store, logits_id);
        let offsets = s.param(&store, offsets_id);
        let actions = [-0.45f32, 0.52]; // bins 0 and 2
        let params = LossParams::default();
        let (loss, _) = bet_loss(&mut s, logits, offsets, &actions, &codec, &params).unwrap();
        s.backward(loss, &mut store).unwrap();
        let g = store.grad(offsets_id).data();
        // Row layout: [t, bin, d_a]. True bins are (t0, bin0) and (t1, bin2);
        // every other row must have exactly zero gradient.
        for (t, bin) in [(0usize, 1usize), (0, 2), (1, 0), (1, 1)] {
            assert_eq!(g[t * 3 + bin], 0.0, "non-true bin ({t}, {bin}) got gradient");
        }
        assert!(g[0] != 0.0 && g[1 * 3 + 2] != 0.0, "true bins must get gradient");
    }

    #[test]
    fn full_model_gradcheck_against_finite_differences() {
        // Tiny config per the contract: 1 layer, 1 head, width 8, k = 3.
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            embed_width: 8,
            dropout_p: 0.0,
            context_n: 3,
            goal_frames: 2,
            k: 3,
            d_o: 2,
            d_a: 2,
            goal_mode: GoalMode::Observation,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 7).unwrap();
        let codec = ActionCodec::from_centers(vec![-0.6, -0.6, 0.0, 0.1, 0.6, 0.5], 2).unwrap();
        let goals = Tensor::new(vec![2, 2, 2], window(4, 2, 0.0).iter().map(|&v| v as f64).collect()).unwrap();
        let obs = Tensor::new(vec![2, 3, 2], window(6, 2, 3.0).iter().map(|&v| v as f64).collect()).unwrap();
        let actions: Vec<f32> = window(6, 2, 9.0);
        let params = LossParams::default();

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut s: Session<f64> = Session::eval();
            let heads = model.forward_batch(&mut s, store, &goals, &obs).unwrap();
            let HeadVars::Bet { bin_logits, offsets } = heads else { unreachable!() };
            let (loss, _) =
                bet_loss(&mut s, bin_logits, offsets, &actions, &codec, &params).unwrap();
            s.value(loss).item()
        };

        store.zero_grads();
        let mut s: Session<f64> = Session::eval();
        let heads = model.forward_batch(&mut s, &store, &goals, &obs).unwrap();
        let HeadVars::Bet { bin_logits, offsets } = heads else { unreachable!() };
        let (loss, _) = bet_loss(&mut s, bin_logits, offsets, &actions, &codec, &params).unwrap();
        s.backward(loss, &mut store).unwrap();

        // Sample a spread of coordinates from every parameter tensor.
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).numel();
            for c in [0, n / 3, n - 1] {
                let analytic = store.grad(id).data()[c];
                let fd = fd_grad_at(&mut store, id, c, |st| eval(st));
                let err = rel_err(analytic, fd);
                // The end-to-end bound is looser than the per-primitive one
                // because central-difference truncation compounds through
                // the composed graph.
                assert!(
                    err <= 1e-3,
                    "{} coord {c}: analytic {analytic}, fd {fd}, rel err {err}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn single_batch_overfit_crushes_the_loss() {
        use crate::nn::optim::{Adam, AdamConfig};
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            embed_width: 16,
            dropout_p: 0.0,
            context_n: 3,
            goal_frames: 2,
            k: 3,
            d_o: 2,
            d_a: 2,
            goal_mode: GoalMode::Observation,
        };
        let mut store: ParamStore<f32> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 11).unwrap();
        let codec = ActionCodec::from_centers(vec![-0.6, -0.6, 0.0, 0.1, 0.6, 0.5], 2).unwrap();
        let goals = Tensor::new(vec![4, 2, 2], window(8, 2, 0.0)).unwrap();
        let obs = Tensor::new(vec![4, 3, 2], window(12, 2, 5.0)).unwrap();
        let actions: Vec<f32> = window(12, 2, 8.0);
        let params = LossParams::default();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );

        let mut first = None;
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            store.zero_grads();
            let mut s: Session<f32> = Session::eval();
            let HeadVars::Bet { bin_logits, offsets } =
                model.forward_batch(&mut s, &store, &goals, &obs).unwrap()
            else {
                unreachable!()
            };
            let (loss, breakdown) =
                bet_loss(&mut s, bin_logits, offsets, &actions, &codec, &params).unwrap();
            s.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
            first.get_or_insert(breakdown.total);
            last = breakdown.total;
        }
        let first = first.unwrap();
        assert!(
            last < 0.05 * first,
            "500 steps took loss from {first} only to {last}"
        );
    }

    #[test]
    fn mse_loss_matches_hand_value() {
        let mut s: Session<f64> = Session::eval();
        let pred = s.constant(Tensor::new(vec![1, 2, 2], vec![0.5, -0.5, 0.0, 1.0]).unwrap());
        let actions = [0.0f32, 0.0, 0.0, 0.0];
        let (_, value) = mse_loss(&mut s, pred, &actions).unwrap();
        let want = (0.25 + 0.25 + 0.0 + 1.0) / 4.0;
        assert!((value - want).abs() < 1e-12);
    }

    #[test]
    fn goal_tokens_label_mode_repeats_and_separates() {
        let cfg = ModelConfig {
            goal_mode: GoalMode::Label { label_dim: 4 },
            ..tiny_config()
        };
        let one_hot_2 = vec![0.0, 0.0, 1.0, 0.0];
        let toks = make_goal_tokens(&cfg, &GoalInput::Label(one_hot_2.clone())).unwrap();
        assert_eq!(toks.shape(), &[3, 4]);
        for r in 0..3 {
            assert_eq!(&toks.data()[r * 4..(r + 1) * 4], &one_hot_2[..]);
        }
        let other = make_goal_tokens(&cfg, &GoalInput::Label(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_ne!(toks.data(), other.data());
    }

    #[test]
    fn goal_tokens_observation_mode_passes_frames_through() {
        let cfg = tiny_config();
        let frames = window(3, 2, 1.5);
        let toks = make_goal_tokens(&cfg, &GoalInput::Frames(frames.clone())).unwrap();
        assert_eq!(toks.data(), &frames[..]);
    }

    #[test]
    fn goal_tokens_reject_wrong_mode() {
        let cfg = tiny_config(); // observation mode
        assert!(matches!(
            make_goal_tokens(&cfg, &GoalInput::Label(vec![1.0])),
            Err(ModelError::GoalMode { .. })
        ));
    }

    #[test]
    fn unconditional_model_runs_without_goals() {
        let cfg = ModelConfig {
            goal_frames: 0,
            ..tiny_config()
        };
        let mut store: ParamStore<f32> = ParamStore::new();
        let model = CBetModel::build(&cfg, HeadKind::Bet, &mut store, 3).unwrap();
        let out = model
            .forward(&store, &GoalInput::None, &window(5, 2, 0.0))
            .unwrap();
        match out {
            PolicyOutput::Bet(h) => assert_eq!(h.bin_logits.shape(), &[5, 3]),
            _ => panic!("wrong head"),
        }
    }

    #[test]
    fn config_validation_catches_bad_width() {
        let cfg = ModelConfig {
            heads: 3,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig { .. })));
    }
}
