//! Experiment pipelines shared by the CLI commands and the acceptance suite:
//! dataset preparation (including baseline-frame augmentation), per-stream
//! training, and the evaluation grid.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use msg_core::compose::CompositionConfig;
use msg_core::flowmatch::{
    train, FlowModel, LossTerms, MixtureComponent, ModelConfig, Prior, TrainConfig, TrainSet,
};
use msg_core::manifold::{Frame, Pose};
use msg_core::compose::InitPools;
use msg_core::streams::{
    fit_gaussian_trajectory, orient_frame, to_local_dataset, Demonstration,
    GaussianTrajectoryModel,
};
use msg_core::tasks::{
    evaluate, oriented_frame_id, Evaluation, Method, ModelSet, TaskSpec, GLOBAL_FRAME_ID,
};

use crate::config::{PriorKind, RunConfig, TrainSection};

/// Inserts the synthetic baseline frames into each demonstration: the world
/// frame and, per distinct primary frame, an oriented copy pointing at the
/// episode's initial end-effector position.
pub fn augment_baseline_frames(spec: &TaskSpec, demos: &[Demonstration]) -> Result<Vec<Demonstration>> {
    let mut out = demos.to_vec();
    for demo in out.iter_mut() {
        demo.frames.insert(GLOBAL_FRAME_ID.into(), Pose::IDENTITY);
        let start = demo
            .steps
            .first()
            .ok_or_else(|| anyhow!("empty demonstration"))?
            .ee;
        for primary in &spec.primary_frames {
            let id = oriented_frame_id(primary);
            if demo.frames.contains_key(&id) {
                continue;
            }
            let pose = *demo
                .frames
                .get(primary)
                .ok_or_else(|| anyhow!("demo is missing frame `{primary}`"))?;
            let oriented = orient_frame(&Frame::new(id.clone(), pose), &start)
                .map_err(|e| anyhow!("orienting frame `{primary}`: {e}"))?;
            demo.frames.insert(id, oriented.pose);
        }
    }
    Ok(out)
}

/// The (skill, frame) pairs a set of evaluation methods needs trained.
pub fn required_streams(spec: &TaskSpec, methods: &[Method]) -> Vec<(usize, String)> {
    let mut needed: Vec<(usize, String)> = Vec::new();
    let mut push = |skill: usize, id: String| {
        let key = (skill, id);
        if !needed.contains(&key) {
            needed.push(key);
        }
    };
    for skill in 0..spec.skill_count() {
        for method in methods {
            match method {
                Method::Msg => {
                    for id in &spec.skill_frames[skill] {
                        push(skill, id.clone());
                    }
                }
                Method::ObjectFrame => push(skill, spec.primary_frames[skill].clone()),
                Method::GlobalFrame => push(skill, GLOBAL_FRAME_ID.into()),
                Method::OrientedFrame => {
                    push(skill, oriented_frame_id(&spec.primary_frames[skill]))
                }
            }
        }
    }
    needed
}

/// Stable per-stream seed derived from the run seed.
fn stream_seed(base: u64, skill: usize, frame_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in frame_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(h)
        .wrapping_add(skill as u64)
}

fn build_prior(section: &TrainSection, demos: &[Demonstration], frame_id: &str) -> Prior {
    match section.prior.kind {
        PriorKind::Standard => Prior::StandardGaussian,
        PriorKind::PoseCentric => Prior::PoseCentric {
            sigma_pos: section.prior.sigma_pos,
            sigma_rot: section.prior.sigma_rot,
        },
        PriorKind::Mixture => {
            // The world-frame unit Gaussian carried into this stream's frame,
            // one component per observed object placement.
            let weight = 1.0 / demos.len() as f64;
            let components = demos
                .iter()
                .filter_map(|d| d.frames.get(frame_id))
                .map(|pose| MixtureComponent {
                    center: pose.inverse(),
                    weight,
                })
                .collect();
            Prior::Mixture {
                components,
                sigma: section.prior.sigma,
            }
        }
    }
}

pub struct TrainedStreams {
    pub models: ModelSet,
    pub curves: BTreeMap<(usize, String), Vec<LossTerms>>,
    pub trajectory_models: BTreeMap<String, GaussianTrajectoryModel>,
    /// Training episodes' initial end-effector poses in each stream frame;
    /// initializes particle populations.
    pub init_pools: InitPools,
}

/// Trains one flow model per required (skill, frame) stream.
pub fn train_streams(
    spec: &TaskSpec,
    demos: &[Demonstration],
    section: &TrainSection,
    methods: &[Method],
    seed: u64,
) -> Result<TrainedStreams> {
    if demos.is_empty() {
        bail!("no demonstrations to train on");
    }
    let demos = augment_baseline_frames(spec, demos)?;
    let needed = required_streams(spec, methods);

    let mut datasets = BTreeMap::new();
    let mut trajectory_models = BTreeMap::new();
    for (_, frame_id) in &needed {
        if datasets.contains_key(frame_id) {
            continue;
        }
        let ds = to_local_dataset(&demos, frame_id)?;
        let gtm = fit_gaussian_trajectory(&ds, section.bins)?;
        datasets.insert(frame_id.clone(), ds);
        trajectory_models.insert(frame_id.clone(), gtm);
    }

    let mut models = ModelSet::default();
    let mut curves = BTreeMap::new();
    for (skill, frame_id) in needed {
        let ds = &datasets[&frame_id];
        let gtm = &trajectory_models[&frame_id];
        let data = TrainSet::from_local_dataset(ds, skill, spec.space, section.logvar, Some(gtm))?;
        let s = stream_seed(seed, skill, &frame_id);
        let mut rng = msg_core::seeded_rng(s ^ 0x5555_5555_5555_5555);
        let mut model = FlowModel::new(
            spec.space,
            build_prior(section, &demos, &frame_id),
            &ModelConfig {
                hidden: section.hidden.clone(),
                activation: section.activation,
                time_features: section.time_features,
                logvar: section.logvar,
                conditioned: section.conditioned,
            },
            &mut rng,
        )?;
        let curve = train(
            &mut model,
            &data,
            &TrainConfig {
                epochs: section.epochs,
                batch_size: section.batch_size,
                learning_rate: section.learning_rate,
                lr_decay: 0.1,
                condition_noise: section.condition_noise,
                seed: s,
            },
        )?;
        curves.insert((skill, frame_id.clone()), curve);
        models.insert(skill, frame_id, model);
    }
    let init_pools = initial_pools(&demos, &models);
    Ok(TrainedStreams {
        models,
        curves,
        trajectory_models,
        init_pools,
    })
}

/// Training episodes' initial end-effector poses localized in every trained
/// stream frame (using each episode's own frame placement).
pub fn initial_pools(demos: &[Demonstration], models: &ModelSet) -> InitPools {
    let mut pools: InitPools = InitPools::new();
    for (_, frame_id) in models.models.keys() {
        if pools.contains_key(frame_id) {
            continue;
        }
        let pool: Vec<Pose> = demos
            .iter()
            .filter_map(|d| {
                d.frames.get(frame_id).map(|pose| {
                    msg_core::manifold::to_local(
                        &d.steps[0].ee,
                        &Frame::new(frame_id.clone(), *pose),
                    )
                })
            })
            .collect();
        pools.insert(frame_id.clone(), pool);
    }
    pools
}

/// One grid cell of an evaluation run.
#[derive(Debug, Clone)]
pub struct EvalCell {
    pub method: Method,
    pub strategy: msg_core::compose::Strategy,
    pub weighting: msg_core::compose::WeightingStrategy,
    pub seed: u64,
    pub evaluation: Evaluation,
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::GlobalFrame => "global-frame",
        Method::ObjectFrame => "object-frame",
        Method::OrientedFrame => "oriented-frame",
        Method::Msg => "msg",
    }
}

pub fn strategy_name(s: msg_core::compose::Strategy) -> &'static str {
    match s {
        msg_core::compose::Strategy::Ensemble => "ensemble",
        msg_core::compose::Strategy::Flow => "flow",
        msg_core::compose::Strategy::FlowMcmc => "flow-mcmc",
    }
}

pub fn weighting_name(w: msg_core::compose::WeightingStrategy) -> &'static str {
    use msg_core::compose::WeightingStrategy as W;
    match w {
        W::Constant => "constant",
        W::Threshold => "threshold",
        W::Linear => "linear",
        W::Exponential => "exponential",
        W::LogvarFull => "logvar-full",
        W::LogvarGrouped => "logvar-grouped",
        W::ParticleFull => "particle-full",
        W::ParticleGrouped => "particle-grouped",
    }
}

pub fn parse_strategy(s: &str) -> Result<msg_core::compose::Strategy> {
    use msg_core::compose::Strategy as S;
    Ok(match s {
        "ensemble" => S::Ensemble,
        "flow" => S::Flow,
        "flow-mcmc" => S::FlowMcmc,
        other => bail!("unknown strategy `{other}` (ensemble | flow | flow-mcmc)"),
    })
}

pub fn parse_weighting(s: &str) -> Result<msg_core::compose::WeightingStrategy> {
    use msg_core::compose::WeightingStrategy as W;
    Ok(match s {
        "constant" => W::Constant,
        "threshold" => W::Threshold,
        "linear" => W::Linear,
        "exponential" => W::Exponential,
        "logvar-full" => W::LogvarFull,
        "logvar-grouped" => W::LogvarGrouped,
        "particle-full" => W::ParticleFull,
        "particle-grouped" => W::ParticleGrouped,
        other => bail!(
            "unknown weighting `{other}` (constant | threshold | linear | exponential | \
             logvar-full | logvar-grouped | particle-full | particle-grouped)"
        ),
    })
}

/// Runs the full (method x strategy x weighting x seed) grid.
pub fn run_eval_grid(
    spec: &TaskSpec,
    models: &ModelSet,
    config: &RunConfig,
    init_pools: &InitPools,
) -> Result<Vec<EvalCell>> {
    let mut cells = Vec::new();
    for &method in &config.eval.methods {
        for &strategy in &config.eval.strategies {
            for &weighting in &config.eval.weightings {
                for &seed in &config.eval.seeds {
                    let cfg = CompositionConfig {
                        strategy,
                        weighting,
                        ..config.composition.clone()
                    };
                    let evaluation = evaluate(
                        spec,
                        models,
                        method,
                        &cfg,
                        config.eval.episodes,
                        seed,
                        init_pools,
                    )
                    .map_err(|e| anyhow!("evaluating {}: {e}", method_name(method)))?;
                    cells.push(EvalCell {
                        method,
                        strategy,
                        weighting,
                        seed,
                        evaluation,
                    });
                }
            }
        }
    }
    Ok(cells)
}
