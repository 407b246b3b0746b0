//! The gen / train / eval / ablate / toy commands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use msg_core::compose::{
    ensemble_compose, flow_compose, CompositionConfig, FlowComposeInputs, Stream, Strategy,
    WeightingStrategy,
};
use msg_core::flowmatch::{train, FlowModel, ModelConfig, TrainConfig};
use msg_core::manifold::Pose;
use msg_core::tasks::{self, BimodalToy, Method, ModelSet, TaskSpec};
use msg_core::seeded_rng;

use crate::config::{PriorKind, RunConfig, TrainSection};
use crate::formats::{
    checkpoint_name, load_checkpoint, read_demos, save_checkpoint, write_demos,
    write_trajectories, Csv, Manifest, ManifestStream,
};
use crate::pipeline::{
    method_name, run_eval_grid, strategy_name, train_streams, weighting_name, EvalCell,
};
use crate::plot::{range_of, SvgPlot, COLORS};

fn load_task(config: &RunConfig) -> Result<TaskSpec> {
    let spec = tasks::builtin(&config.task).map_err(|e| anyhow::anyhow!("{e}"))?;
    if spec.is_toy() {
        bail!("task `{}` is the composition toy; use `msg toy`", config.task);
    }
    Ok(spec)
}

/// Writes the demonstration file for the configured task and seed.
pub fn cmd_gen(config: &RunConfig) -> Result<()> {
    let spec = load_task(config)?;
    let mut rng = seeded_rng(config.seed);
    let demos = spec
        .generate_demos(config.demos, &mut rng)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let out = config.out_dir();
    let path = out.join("demos.jsonl");
    write_demos(&path, &demos)?;
    println!(
        "wrote {} demonstrations for `{}` to {}",
        demos.len(),
        spec.name,
        path.display()
    );
    Ok(())
}

/// Trains one checkpoint per (skill, frame) stream the evaluation methods
/// need, plus loss curves and the stream manifest.
pub fn cmd_train(config: &RunConfig, force: bool) -> Result<()> {
    let spec = load_task(config)?;
    let out = config.out_dir();
    let demos = read_demos(&out.join("demos.jsonl"))
        .context("demos missing; run `msg gen` first")?;

    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        );
    }

    let trained = train_streams(&spec, &demos, &config.train, &config.eval.methods, config.seed)?;

    let mut manifest = Manifest {
        task: spec.name.clone(),
        seed: config.seed,
        demos: demos.len(),
        streams: Vec::new(),
    };
    for ((skill, frame_id), model) in &trained.models.models {
        let file = out.join("checkpoints").join(checkpoint_name(*skill, frame_id));
        save_checkpoint(&file, model)?;
        manifest.streams.push(ManifestStream {
            skill: *skill,
            frame_id: frame_id.clone(),
            file,
        });
    }
    for ((skill, frame_id), curve) in &trained.curves {
        let mut csv = Csv::new("epoch,loss,velocity,progress,logvar");
        for (epoch, t) in curve.iter().enumerate() {
            csv.row(&[
                epoch.to_string(),
                t.total.to_string(),
                t.velocity.to_string(),
                t.progress.to_string(),
                t.logvar.to_string(),
            ]);
        }
        csv.save(&out.join(format!("loss_skill{skill}_{frame_id}.csv").replace(':', "-")))?;
    }
    manifest.save(&manifest_path)?;
    println!(
        "trained {} streams for `{}`; manifest at {}",
        manifest.streams.len(),
        spec.name,
        manifest_path.display()
    );
    Ok(())
}

fn load_models(out: &Path) -> Result<(Manifest, ModelSet)> {
    let manifest = Manifest::load(&out.join("manifest.json"))
        .context("manifest missing; run `msg train` first")?;
    let mut models = ModelSet::default();
    for s in &manifest.streams {
        let model = load_checkpoint(&s.file).with_context(|| {
            format!("checkpoint for skill {} stream `{}`", s.skill, s.frame_id)
        })?;
        models.insert(s.skill, s.frame_id.clone(), model);
    }
    Ok((manifest, models))
}

fn summary_rows(csv: &mut Csv, task: &str, cells: &[EvalCell]) {
    let mut grouped: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for c in cells {
        grouped
            .entry((
                method_name(c.method).to_string(),
                strategy_name(c.strategy).to_string(),
                weighting_name(c.weighting).to_string(),
            ))
            .or_default()
            .push(c.evaluation.success_rate);
    }
    for ((method, strategy, weighting), rates) in grouped {
        let n = rates.len() as f64;
        let mean: f64 = rates.iter().sum::<f64>() / n;
        let var: f64 = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        csv.row(&[
            task.into(),
            method.clone(),
            strategy.clone(),
            weighting.clone(),
            "mean".into(),
            mean.to_string(),
        ]);
        csv.row(&[
            task.into(),
            method,
            strategy,
            weighting,
            "std".into(),
            var.sqrt().to_string(),
        ]);
    }
}

/// Runs the evaluation grid, writes the results table, per-combination
/// trajectory records, and the figures.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    let spec = load_task(config)?;
    let out = config.out_dir();
    let (_, models) = load_models(&out)?;
    let demos = read_demos(&out.join("demos.jsonl"))?;
    let init_pools = crate::pipeline::initial_pools(&demos, &models);

    let cells = run_eval_grid(&spec, &models, config, &init_pools)?;

    let mut csv = Csv::new("task,method,strategy,weighting,seed,success_rate");
    for c in &cells {
        csv.row(&[
            spec.name.clone(),
            method_name(c.method).into(),
            strategy_name(c.strategy).into(),
            weighting_name(c.weighting).into(),
            c.seed.to_string(),
            c.evaluation.success_rate.to_string(),
        ]);
    }
    summary_rows(&mut csv, &spec.name, &cells);
    csv.save(&out.join("results.csv"))?;

    for c in &cells {
        let name = format!(
            "trajectories_{}_{}_{}_{}.jsonl",
            method_name(c.method),
            strategy_name(c.strategy),
            weighting_name(c.weighting),
            c.seed
        );
        write_trajectories(
            &out.join(name),
            &c.evaluation.rollouts,
            spec.space.tangent_dim(),
        )?;
    }

    plot_trajectories(&spec, &cells, config, &out.join("plots/trajectories.svg"))?;
    plot_weight_curves(&cells, &out.join("plots/weights.svg"))?;

    println!(
        "evaluated {} grid cells; results at {}",
        cells.len(),
        out.join("results.csv").display()
    );
    Ok(())
}

fn plot_trajectories(
    spec: &TaskSpec,
    cells: &[EvalCell],
    config: &RunConfig,
    path: &Path,
) -> Result<()> {
    let cell = cells
        .iter()
        .find(|c| c.method == Method::Msg)
        .or_else(|| cells.first());
    let Some(cell) = cell else { return Ok(()) };
    let n = config.eval.plot_episodes.min(cell.evaluation.rollouts.len());

    let mut points: Vec<[f64; 2]> = Vec::new();
    for r in cell.evaluation.rollouts.iter().take(n) {
        points.extend(r.steps.iter().map(|s| [s.pose.position[0], s.pose.position[1]]));
    }
    for i in cell.evaluation.instances.iter().take(n) {
        points.extend(i.frames.values().map(|p| [p.position[0], p.position[1]]));
    }
    let (xr, yr) = range_of(points.into_iter());
    let title = format!(
        "{}: {} / {} / {} composed trajectories",
        spec.name,
        method_name(cell.method),
        strategy_name(cell.strategy),
        weighting_name(cell.weighting)
    );
    let mut plot = SvgPlot::new(&title, xr, yr);
    for (e, (r, inst)) in cell
        .evaluation
        .rollouts
        .iter()
        .zip(&cell.evaluation.instances)
        .take(n)
        .enumerate()
    {
        let color = COLORS[e % COLORS.len()];
        let pts: Vec<[f64; 2]> = r
            .steps
            .iter()
            .map(|s| [s.pose.position[0], s.pose.position[1]])
            .collect();
        plot.polyline(&pts, color, 1.5, 0.9);
        for (id, p) in &inst.frames {
            plot.marker([p.position[0], p.position[1]], color, id);
        }
        if let Some(t) = inst.skill_targets.last() {
            plot.scatter(&[[t.position[0], t.position[1]]], color, 5.0, 0.5);
        }
    }
    plot.save(path)
}

fn plot_weight_curves(cells: &[EvalCell], path: &Path) -> Result<()> {
    let mut plot = SvgPlot::new("stream 1 weight vs progress", (0.0, 1.0), (0.0, 1.0));
    let schedules: [(&str, fn(f64) -> f64); 4] = [
        ("constant", |_| 0.5),
        ("threshold", |p| if p < 0.5 { 1.0 } else { 0.0 }),
        ("linear", |p| p),
        ("exponential", |p| (1.0 - p).powi(4)),
    ];
    for (i, (_, f)) in schedules.iter().enumerate() {
        let pts: Vec<[f64; 2]> = (0..=100)
            .map(|k| {
                let p = k as f64 / 100.0;
                [p, f(p)]
            })
            .collect();
        plot.polyline(&pts, COLORS[i], 1.5, 0.9);
    }
    // Observed weights (first tangent dimension of stream 1) along the first
    // multi-stream rollout, against the rollout's progress estimate.
    if let Some(cell) = cells.iter().find(|c| c.method == Method::Msg) {
        if let Some(r) = cell.evaluation.rollouts.first() {
            let pts: Vec<[f64; 2]> = r
                .steps
                .iter()
                .filter(|s| !s.weights.is_empty())
                .map(|s| [s.progress, s.weights[0][0]])
                .collect();
            plot.scatter(&pts, COLORS[4], 3.0, 0.8);
        }
    }
    plot.legend(&[
        ("constant", COLORS[0]),
        ("threshold", COLORS[1]),
        ("linear", COLORS[2]),
        ("exponential", COLORS[3]),
        ("observed", COLORS[4]),
    ]);
    plot.save(path)
}

/// Ablation variants mirroring the design-choice study: custom prior, sample
/// matching, conditioning, step-matched flow composition, and the mixture
/// prior, each crossed with the configured weighting strategies.
pub fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let spec = load_task(config)?;
    let out = config.out_dir();
    let demos = read_demos(&out.join("demos.jsonl"))
        .context("demos missing; run `msg gen` first")?;

    #[derive(Clone, Copy, PartialEq)]
    enum TrainVariant {
        Base,
        StandardPrior,
        MixturePrior,
        Unconditioned,
    }
    struct Variant {
        label: &'static str,
        strategy: Strategy,
        train: TrainVariant,
        sample_matching: bool,
        matched_steps: bool,
    }
    let variants = [
        Variant { label: "flow", strategy: Strategy::Flow, train: TrainVariant::Base, sample_matching: true, matched_steps: false },
        Variant { label: "flow/no-custom-prior", strategy: Strategy::Flow, train: TrainVariant::StandardPrior, sample_matching: true, matched_steps: false },
        Variant { label: "flow/no-sample-matching", strategy: Strategy::Flow, train: TrainVariant::Base, sample_matching: false, matched_steps: false },
        Variant { label: "flow/no-conditioning", strategy: Strategy::Flow, train: TrainVariant::Unconditioned, sample_matching: true, matched_steps: false },
        Variant { label: "flow/mcmc-matched-steps", strategy: Strategy::Flow, train: TrainVariant::Base, sample_matching: true, matched_steps: true },
        Variant { label: "flow/mixture-prior", strategy: Strategy::Flow, train: TrainVariant::MixturePrior, sample_matching: true, matched_steps: false },
        Variant { label: "flow-mcmc", strategy: Strategy::FlowMcmc, train: TrainVariant::Base, sample_matching: true, matched_steps: false },
        Variant { label: "flow-mcmc/mixture-prior", strategy: Strategy::FlowMcmc, train: TrainVariant::MixturePrior, sample_matching: true, matched_steps: false },
        Variant { label: "flow-mcmc/no-custom-prior", strategy: Strategy::FlowMcmc, train: TrainVariant::StandardPrior, sample_matching: true, matched_steps: false },
        Variant { label: "flow-mcmc/no-conditioning", strategy: Strategy::FlowMcmc, train: TrainVariant::Unconditioned, sample_matching: true, matched_steps: false },
    ];

    // Train each distinct model variant once.
    let mut trained: BTreeMap<u8, (ModelSet, msg_core::compose::InitPools)> = BTreeMap::new();
    let mut pool_of = |v: TrainVariant| -> Result<(ModelSet, msg_core::compose::InitPools)> {
        let key = v as u8;
        if let Some(m) = trained.get(&key) {
            return Ok(m.clone());
        }
        let mut section: TrainSection = config.train.clone();
        match v {
            TrainVariant::Base => {}
            TrainVariant::StandardPrior => section.prior.kind = PriorKind::Standard,
            TrainVariant::MixturePrior => section.prior.kind = PriorKind::Mixture,
            TrainVariant::Unconditioned => section.conditioned = false,
        }
        let t = train_streams(&spec, &demos, &section, &[Method::Msg], config.seed)?;
        trained.insert(key, (t.models.clone(), t.init_pools.clone()));
        Ok(trained[&key].clone())
    };

    let mut csv = Csv::new("task,variant,weighting,seed,success_rate");
    for v in &variants {
        let (models, init_pools) = pool_of(v.train)?;
        for &weighting in &config.eval.weightings {
            for &seed in &config.eval.seeds {
                let mut cfg = CompositionConfig {
                    strategy: v.strategy,
                    weighting,
                    sample_matching: v.sample_matching,
                    ..config.composition.clone()
                };
                if v.matched_steps {
                    // Flow composition with the same number of network
                    // queries as the MCMC variant, M = 0.
                    cfg.flow_steps = config.composition.flow_steps * (1 + config.composition.mcmc_steps);
                }
                let evaluation = tasks::evaluate(
                    &spec,
                    &models,
                    Method::Msg,
                    &cfg,
                    config.eval.episodes,
                    seed,
                    &init_pools,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?;
                csv.row(&[
                    spec.name.clone(),
                    v.label.into(),
                    weighting_name(weighting).into(),
                    seed.to_string(),
                    evaluation.success_rate.to_string(),
                ]);
            }
        }
    }
    let path = out.join("ablation.csv");
    csv.save(&path)?;
    println!(
        "ablation grid: {} variants x {} weightings x {} seeds -> {}",
        variants.len(),
        config.eval.weightings.len(),
        config.eval.seeds.len(),
        path.display()
    );
    Ok(())
}

/// Reproduces the bimodal composition figure: trains the two toy streams,
/// samples every strategy, and writes scatter panels plus the mode-agreement
/// table.
pub fn cmd_toy(config: &RunConfig, samples: usize) -> Result<()> {
    let out = config.out_dir();
    let toy = BimodalToy::standard();
    let mut rng = seeded_rng(config.seed);
    let sets = toy.train_sets(4096, &mut rng);
    let mut models: Vec<FlowModel> = Vec::new();
    for (f, set) in sets.into_iter().enumerate() {
        let mut model = FlowModel::new(
            toy.space(),
            toy.stream_prior(f),
            &ModelConfig {
                hidden: vec![64, 64],
                activation: config.train.activation,
                time_features: config.train.time_features,
                logvar: msg_core::flowmatch::LogvarMode::None,
                conditioned: false,
            },
            &mut rng,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        train(
            &mut model,
            &set,
            &TrainConfig {
                epochs: 600,
                batch_size: 256,
                learning_rate: 1e-3,
                lr_decay: 0.05,
                condition_noise: 0.0,
                seed: config.seed.wrapping_add(f as u64),
            },
        )
        .map_err(|e| anyhow::anyhow!("training toy stream {f}: {e}"))?;
        models.push(model);
    }
    let streams: Vec<Stream> = toy
        .frames
        .iter()
        .zip(&models)
        .map(|(f, m)| Stream::new(f.clone(), m))
        .collect();

    let mut csv = Csv::new("strategy,common_mode_rate,samples");
    let mut panels: Vec<(String, Vec<[f64; 2]>)> = Vec::new();

    let targets: Vec<[f64; 2]> = (0..samples).map(|_| toy.sample_target(&mut rng)).collect();
    panels.push(("target".into(), targets));

    for strategy in [Strategy::Ensemble, Strategy::Flow, Strategy::FlowMcmc] {
        let cfg = CompositionConfig {
            strategy,
            weighting: WeightingStrategy::Constant,
            ..config.composition.clone()
        };
        let mut pts = Vec::with_capacity(samples);
        for _ in 0..samples {
            let c = match strategy {
                Strategy::Ensemble => {
                    ensemble_compose(&streams, &toy.start, 1.0, &cfg, &mut rng)
                }
                _ => flow_compose(
                    &streams,
                    &toy.start,
                    1.0,
                    &cfg,
                    &FlowComposeInputs::default(),
                    &mut rng,
                ),
            }
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            pts.push([c.pose.position[0], c.pose.position[1]]);
        }
        csv.row(&[
            strategy_name(strategy).into(),
            toy.common_mode_rate(&pts).to_string(),
            samples.to_string(),
        ]);
        panels.push((strategy_name(strategy).into(), pts));
    }
    csv.save(&out.join("toy.csv"))?;

    let all: Vec<[f64; 2]> = panels.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (xr, yr) = range_of(all.into_iter());
    for (i, (name, pts)) in panels.iter().enumerate() {
        let mut plot = SvgPlot::new(&format!("bimodal-2d: {name}"), xr, yr);
        plot.scatter(pts, COLORS[i % COLORS.len()], 2.0, 0.5);
        for c in &toy.centers {
            plot.marker(*c, "#000", "mode");
        }
        for f in &toy.frames {
            plot.marker([f.pose.position[0], f.pose.position[1]], "#888", &f.id);
        }
        plot.save(&out.join(format!("plots/toy_{name}.svg")))?;
    }
    println!("toy results at {}", out.join("toy.csv").display());
    Ok(())
}
