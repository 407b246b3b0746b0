//! Probe for the kinematic task suite: method comparison and particle
//! population behavior on the reach task.

use msg_cli::config::TrainSection;
use msg_cli::pipeline::train_streams;
use msg_core::compose::{
    CompositionConfig, ParticlePopulation, Strategy, Stream, WeightingStrategy,
};
use msg_core::manifold::Frame;
use msg_core::seeded_rng;
use msg_core::tasks::{self, evaluate, Method};

fn main() {
    let spec = tasks::builtin("reach").unwrap();
    let methods = [Method::Msg, Method::ObjectFrame, Method::GlobalFrame];

    for seed in [0u64, 1] {
        let mut rng = seeded_rng(seed);
        let demos = spec.generate_demos(5, &mut rng).unwrap();
        let section = TrainSection::default();
        let t0 = std::time::Instant::now();
        let trained = train_streams(&spec, &demos, &section, &methods, seed).unwrap();
        println!("seed {seed}: trained in {:.1}s", t0.elapsed().as_secs_f64());

        for strategy in [Strategy::Ensemble, Strategy::Flow, Strategy::FlowMcmc] {
            let mut line = format!("seed {seed} {strategy:?}:");
            for method in methods {
                let cfg = CompositionConfig {
                    strategy,
                    weighting: WeightingStrategy::Exponential,
                    ..CompositionConfig::default()
                };
                let eval = evaluate(
                    &spec,
                    &trained.models,
                    method,
                    &cfg,
                    50,
                    seed * 100 + 7,
                    &trained.init_pools,
                )
                .unwrap();
                line.push_str(&format!(" {method:?}={:.2}", eval.success_rate));
            }
            println!("{line}");
        }

        // Particle retention: run repeated particle steps on skill-0 streams
        // of a fixed episode.
        let mut rng = seeded_rng(seed + 900);
        let instance = spec.sample_instance(&mut rng).unwrap();
        let streams: Vec<Stream> = spec.skill_frames[0]
            .iter()
            .map(|id| {
                Stream::new(
                    Frame::new(id.clone(), instance.frames[id]),
                    trained.models.get(0, id).unwrap(),
                )
            })
            .collect();
        for virtual_pose in [true, false] {
            let cfg = CompositionConfig {
                strategy: Strategy::Ensemble,
                weighting: WeightingStrategy::ParticleFull,
                particles: 8,
                virtual_pose_conditioning: virtual_pose,
                ..CompositionConfig::default()
            };
            let mut pop =
                ParticlePopulation::init(&trained.init_pools, &streams, 8, &mut rng).unwrap();
            let initial = pop.tangent_spread(spec.space).unwrap();
            let mut ee = instance.start;
            for _ in 0..10 {
                let (comp, _) = msg_core::compose::particle_rollout_step(
                    &mut pop, &streams, &ee, 0.5, &cfg, &mut rng,
                )
                .unwrap();
                ee = comp.pose;
            }
            let after = pop.tangent_spread(spec.space).unwrap();
            println!(
                "seed {seed} virtual={virtual_pose}: spread {initial:.4} -> {after:.4} (ratio {:.4})",
                after / initial
            );
        }
    }
}
