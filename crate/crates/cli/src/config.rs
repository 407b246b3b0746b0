//! Run configuration: one JSON document per experiment, with CLI flags
//! overriding individual fields.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use msg_core::compose::{CompositionConfig, Strategy, WeightingStrategy};
use msg_core::flowmatch::LogvarMode;
use msg_core::nn::Activation;
use msg_core::tasks::Method;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root directory.
pub const OUT_ROOT_ENV: &str = "MSG_OUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Task name; see `msg_core::tasks::names()`.
    pub task: String,
    /// Demonstrations to generate / train on.
    pub demos: usize,
    pub seed: u64,
    /// Output directory. Relative paths resolve under `$MSG_OUT_ROOT`
    /// (default `runs/`).
    pub out: Option<PathBuf>,
    pub train: TrainSection,
    pub composition: CompositionConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "reach".into(),
            demos: 5,
            seed: 0,
            out: None,
            train: TrainSection::default(),
            composition: CompositionConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
    /// Log-variance head trained into every stream.
    pub logvar: LogvarMode,
    /// Condition the policy on the current end-effector pose.
    pub conditioned: bool,
    pub prior: PriorSection,
    /// Progress bins of the Gaussian trajectory model.
    pub bins: usize,
    /// Tangent-space perturbation of the conditioning input during training.
    pub condition_noise: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 600,
            batch_size: 256,
            learning_rate: 1e-3,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_features: 16,
            logvar: LogvarMode::Full,
            conditioned: true,
            prior: PriorSection::default(),
            bins: 10,
            condition_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Standard,
    PoseCentric,
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub sigma_pos: f64,
    pub sigma_rot: f64,
    /// Component spread of the mixture prior.
    pub sigma: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: PriorKind::PoseCentric,
            sigma_pos: 0.3,
            sigma_rot: 0.3,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub strategies: Vec<Strategy>,
    pub weightings: Vec<WeightingStrategy>,
    /// Episodes drawn into the trajectory plot.
    pub plot_episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 25,
            seeds: vec![0, 1, 2],
            methods: vec![Method::Msg, Method::ObjectFrame],
            strategies: vec![Strategy::Ensemble, Strategy::Flow, Strategy::FlowMcmc],
            weightings: vec![WeightingStrategy::Exponential],
            plot_episodes: 5,
        }
    }
}

/// CLI flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub demos: Option<usize>,
    pub strategy: Option<Strategy>,
    pub weighting: Option<WeightingStrategy>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(task) = &o.task {
            self.task = task.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(demos) = o.demos {
            self.demos = demos;
        }
        if let Some(strategy) = o.strategy {
            self.composition.strategy = strategy;
            self.eval.strategies = vec![strategy];
        }
        if let Some(weighting) = o.weighting {
            self.composition.weighting = weighting;
            self.eval.weightings = vec![weighting];
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
    }

    /// Output directory: explicit path, or `<root>/<task>` with the root
    /// taken from `$MSG_OUT_ROOT` (default `runs/`).
    pub fn out_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        match &self.out {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.task),
        }
    }
}
