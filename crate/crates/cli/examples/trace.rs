//! Failure-mode inspection for reach seed 1.

use msg_cli::config::{PriorSection, TrainSection};
use msg_cli::pipeline::train_streams;
use msg_core::compose::{rollout, CompositionConfig, Strategy, WeightingStrategy};
use msg_core::manifold::{norm3, sub3};
use msg_core::seeded_rng;
use msg_core::tasks::{self, episode_streams, episode_success, Method};

fn main() {
    let spec = tasks::builtin("reach").unwrap();
    let section = TrainSection {
        hidden: vec![64, 64],
        epochs: 10000,
        condition_noise: 0.05,
        prior: PriorSection {
            sigma_pos: 0.15,
            sigma_rot: 0.15,
            ..PriorSection::default()
        },
        ..TrainSection::default()
    };
    let seed = 1u64;
    let mut rng = seeded_rng(seed);
    let demos = spec.generate_demos(5, &mut rng).unwrap();
    let trained = train_streams(&spec, &demos, &section, &[Method::Msg, Method::ObjectFrame], seed).unwrap();
    for ((skill, frame), curve) in &trained.curves {
        let last = curve.last().unwrap();
        println!(
            "stream skill{skill}/{frame}: final loss {:.5} (vel {:.5} prog {:.5} lv {:.5})",
            last.total, last.velocity, last.progress, last.logvar
        );
    }

    for (name, cfg) in [
        (
            "mcmc/particle",
            CompositionConfig {
                strategy: Strategy::FlowMcmc,
                weighting: WeightingStrategy::ParticleFull,
                mcmc_noise: 0.02,
                progress_threshold: 0.9,
                step_clamp: Some(0.3),
                ..CompositionConfig::default()
            },
        ),
        (
            "ens/exp",
            CompositionConfig {
                strategy: Strategy::Ensemble,
                weighting: WeightingStrategy::Exponential,
                progress_threshold: 0.9,
                step_clamp: Some(0.3),
                ..CompositionConfig::default()
            },
        ),
    ] {
        for method in [Method::Msg, Method::ObjectFrame] {
            let mut modes = [0usize; 5];
            for e in 0..30u64 {
                let mut rng = seeded_rng(100 + e);
                let instance = spec.sample_instance(&mut rng).unwrap();
                let skills = episode_streams(&spec, &instance, method, &trained.models).unwrap();
                let r = rollout(&skills, &instance.start, &cfg, &trained.init_pools, &mut rng).unwrap();
                let poses: Vec<_> = r.steps.iter().map(|s| s.pose).collect();
                let o = episode_success(&spec, &instance, &poses);
                if o.success {
                    modes[0] += 1;
                    continue;
                }
                let inside = poses.iter().all(|p| {
                    (0..3).all(|d| {
                        (p.position[d] - spec.workspace_center[d]).abs() <= spec.workspace_half[d]
                    })
                });
                let first = &instance.skill_targets[0];
                let passed = poses
                    .iter()
                    .any(|p| norm3(sub3(p.position, first.position)) <= spec.waypoint_tol);
                if !inside {
                    modes[3] += 1;
                } else if !r.completed {
                    modes[4] += 1;
                } else if !passed {
                    modes[2] += 1;
                } else {
                    modes[1] += 1;
                }
            }
            println!(
                "{name} {method:?}: success {} | pos-miss {} way-miss {} out-of-bounds {} step-cap {}",
                modes[0], modes[1], modes[2], modes[3], modes[4]
            );
        }
    }
}
