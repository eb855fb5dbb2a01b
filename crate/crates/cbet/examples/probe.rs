//! Temporary timing/quality probe for the desk preset. Not part of the
//! shipped surface.

use std::time::Instant;

use cbet::envs::EnvKind;
use cbet::model::GoalMode;
use cbet::trainer::{evaluate, train, EvalProtocol, TrainConfig, Variant, LABEL_DIM};

fn main() {
    let ds = cbet::envs::scripted_play(EnvKind::Fork, 120, 7, &[0.5, 0.5]).unwrap();
    let lens: Vec<usize> = ds.trajectories().iter().map(|t| t.len()).collect();
    println!(
        "data: {} trajs, len min {} max {} mean {:.1}",
        ds.len(),
        lens.iter().min().unwrap(),
        lens.iter().max().unwrap(),
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    );

    for seed in [7u64, 11, 13] {
        for (tag, variant, label_mode) in [
            ("multi-obs ", Variant::Multimodal, false),
            ("multi-lab ", Variant::Multimodal, true),
            ("unimodal  ", Variant::Unimodal, false),
            ("uncond    ", Variant::Unconditional, false),
        ] {
            let mut cfg = TrainConfig::desk(EnvKind::Fork, variant);
            cfg.seed = seed;
            if label_mode {
                cfg.model.goal_mode = GoalMode::Label {
                    label_dim: LABEL_DIM,
                };
            }
            let t = Instant::now();
            let out = train(&ds, &cfg).unwrap();
            let train_secs = t.elapsed().as_secs_f64();
            let held = evaluate(&out, &ds, &EvalProtocol::default()).unwrap();
            let inset = evaluate(
                &out,
                &ds,
                &EvalProtocol {
                    held_out_conditioning: false,
                    ..EvalProtocol::default()
                },
            )
            .unwrap();
            println!(
                "seed {seed} [{tag}] {train_secs:>5.1}s | held {:.2} in-set {:.2} | visits {:?} | loss {:.4}",
                held.conditioned_success,
                inset.conditioned_success,
                held.mode_visits
                    .iter()
                    .map(|v| format!("{} {}", v.mode, v.count))
                    .collect::<Vec<_>>(),
                out.loss_curve.last().unwrap()
            );
        }
    }
}
