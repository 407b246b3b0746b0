//! Single-stream conditional flow matching on the pose manifold (and its
//! Euclidean toy restrictions): priors, the geodesic interpolant, the
//! regression objective with auxiliary progress and log-variance heads, a
//! seeded training loop, and an explicit Euler integrator.
//!
//! The interpolant runs from the prior at flow time 0 to the data at flow
//! time 1, `z_t = interp(z_0, z_1, t)`, and the velocity regression target is
//! the constant displacement `log(z_0 -> z_1)`, so integrating the learned
//! field from a prior draw up to t = 1 produces a data sample.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::manifold::{Pose, StateSpace, Tangent};
use crate::nn::{
    Activation, ForwardCache, HeadCotangent, HeadOutputs, InputSpec, Network, OptimizerState,
    OutputSpec, LOGVAR_CLAMP,
};
use crate::streams::{GaussianTrajectoryModel, LocalDataset};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MSGF";
const CHECKPOINT_VERSION: u32 = 1;

/// Loss mixing coefficients: the auxiliary heads must not dominate the
/// velocity regression.
pub const PROGRESS_LOSS_WEIGHT: f64 = 0.1;
pub const LOGVAR_LOSS_WEIGHT: f64 = 0.1;

/// Prior distribution the flow transports to the data distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Unit Gaussian in tangent coordinates about the identity pose.
    StandardGaussian,
    /// Gaussian about the current (conditioning) end-effector pose. Keeps the
    /// prior likely under the target, which trains converging flows.
    PoseCentric { sigma_pos: f64, sigma_rot: f64 },
    /// Gaussian mixture: a unit-scale Gaussian carried into the local frame
    /// of every observed object placement. Component centers are the local
    /// images of the world origin observed in the training episodes.
    Mixture {
        components: Vec<MixtureComponent>,
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub center: Pose,
    pub weight: f64,
}

impl Prior {
    pub fn pose_centric_default() -> Prior {
        Prior::PoseCentric {
            sigma_pos: 0.3,
            sigma_rot: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::StandardGaussian => Ok(()),
            Prior::PoseCentric { sigma_pos, sigma_rot } => {
                if *sigma_pos <= 0.0 || *sigma_rot <= 0.0 {
                    return Err(Error::InvalidConfig("prior sigmas must be positive".into()));
                }
                Ok(())
            }
            Prior::Mixture { components, sigma } => {
                if components.is_empty() {
                    return Err(Error::InvalidConfig("mixture prior needs components".into()));
                }
                if *sigma <= 0.0 {
                    return Err(Error::InvalidConfig("mixture sigma must be positive".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| c.weight < 0.0) {
                    return Err(Error::InvalidConfig(
                        "mixture weights must be non-negative and sum to one".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Draws an initial state. `conditioning` is the current end-effector
    /// pose in the frame this prior is expressed in; only the pose-centric
    /// variant uses it.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        space: StateSpace,
        conditioning: &Pose,
        rng: &mut R,
    ) -> Pose {
        match self {
            Prior::StandardGaussian => space.sample_about(&Pose::IDENTITY, 1.0, 1.0, rng),
            Prior::PoseCentric { sigma_pos, sigma_rot } => {
                space.sample_about(conditioning, *sigma_pos, *sigma_rot, rng)
            }
            Prior::Mixture { components, sigma } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = &components[components.len() - 1];
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                space.sample_about(&chosen.center, *sigma, *sigma, rng)
            }
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Prior::StandardGaussian => 0,
            Prior::PoseCentric { .. } => 1,
            Prior::Mixture { .. } => 2,
        }
    }
}

/// Which log-variance head a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LogvarMode {
    None,
    /// One value per dimension group (position / orientation).
    Grouped,
    /// One value per tangent dimension.
    Full,
}

impl LogvarMode {
    pub fn head_dim(&self, space: StateSpace) -> usize {
        match self {
            LogvarMode::None => 0,
            LogvarMode::Grouped => space.group_count(),
            LogvarMode::Full => space.tangent_dim(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            LogvarMode::None => 0,
            LogvarMode::Grouped => 1,
            LogvarMode::Full => 2,
        }
    }
}

/// A conditional flow matching policy for one stream: velocity-field network,
/// its prior, and the state space it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub network: Network,
    pub prior: Prior,
    pub space: StateSpace,
    logvar: LogvarMode,
}

/// Architecture choices for a new flow model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
    pub logvar: LogvarMode,
    /// When false the model ignores the current end-effector pose
    /// (condition input width zero).
    pub conditioned: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_features: 16,
            logvar: LogvarMode::None,
            conditioned: true,
        }
    }
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(
        space: StateSpace,
        prior: Prior,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<FlowModel> {
        space.validate()?;
        prior.validate()?;
        if config.time_features % 2 != 0 {
            return Err(Error::InvalidConfig("time features must be even".into()));
        }
        let input = InputSpec {
            state_dim: space.coord_dim(),
            condition_dim: if config.conditioned { space.coord_dim() } else { 0 },
            time_dim: config.time_features,
        };
        let output = OutputSpec {
            velocity_dim: space.tangent_dim(),
            logvar_dim: config.logvar.head_dim(space),
        };
        let mut network = Network::new(input, &config.hidden, output, config.activation, rng)?;
        // Start from an identically zero velocity field.
        network.zero_output_layer();
        Ok(FlowModel {
            network,
            prior,
            space,
            logvar: config.logvar,
        })
    }

    pub fn logvar_mode(&self) -> LogvarMode {
        self.logvar
    }

    pub fn conditioned(&self) -> bool {
        self.network.input_spec().condition_dim > 0
    }

    /// All head outputs at a state. The conditioning pose is ignored by
    /// unconditioned models.
    pub fn heads(&self, state: &Pose, condition: &Pose, t: f64) -> Result<HeadOutputs> {
        let coords = self.space.coords(state);
        let cond = if self.conditioned() {
            self.space.coords(condition)
        } else {
            Vec::new()
        };
        self.network.forward(&coords, &cond, t)
    }

    fn heads_cached(
        &self,
        state: &Pose,
        condition: &Pose,
        t: f64,
    ) -> Result<(HeadOutputs, ForwardCache)> {
        let coords = self.space.coords(state);
        let cond = if self.conditioned() {
            self.space.coords(condition)
        } else {
            Vec::new()
        };
        self.network.forward_cached(&coords, &cond, t)
    }

    pub fn velocity(&self, state: &Pose, condition: &Pose, t: f64) -> Result<Tangent> {
        let out = self.heads(state, condition, t)?;
        self.space.tangent_from_slice(&out.velocity)
    }

    /// Checkpoint encoding: network bytes extended with the prior
    /// specification and the state-space tag.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        match self.space {
            StateSpace::Euclidean(d) => {
                out.push(0);
                out.push(d as u8);
            }
            StateSpace::PoseManifold => {
                out.push(1);
                out.push(0);
            }
        }
        out.push(self.logvar.tag());
        out.push(self.prior.tag());
        match &self.prior {
            Prior::StandardGaussian => {}
            Prior::PoseCentric { sigma_pos, sigma_rot } => {
                out.extend_from_slice(&sigma_pos.to_le_bytes());
                out.extend_from_slice(&sigma_rot.to_le_bytes());
            }
            Prior::Mixture { components, sigma } => {
                out.extend_from_slice(&sigma.to_le_bytes());
                out.extend_from_slice(&(components.len() as u32).to_le_bytes());
                for c in components {
                    out.extend_from_slice(&c.weight.to_le_bytes());
                    for v in c.center.position {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    for v in [
                        c.center.orientation.w,
                        c.center.orientation.x,
                        c.center.orientation.y,
                        c.center.orientation.z,
                    ] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let net = self.network.to_bytes();
        out.extend_from_slice(&(net.len() as u64).to_le_bytes());
        out.extend_from_slice(&net);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FlowModel> {
        let take_f64 = |b: &[u8], pos: &mut usize| -> Result<f64> {
            if *pos + 8 > b.len() {
                return Err(Error::CheckpointCorrupt("truncated"));
            }
            let mut arr = [0u8; 8];
            arr.copy_from_slice(&b[*pos..*pos + 8]);
            *pos += 8;
            Ok(f64::from_le_bytes(arr))
        };
        if bytes.len() < 12 {
            return Err(Error::CheckpointCorrupt("truncated"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic"));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_VERSION,
                got: version,
            });
        }
        let space = match (bytes[8], bytes[9]) {
            (0, d) => StateSpace::Euclidean(d as usize),
            (1, _) => StateSpace::PoseManifold,
            _ => return Err(Error::CheckpointCorrupt("unknown state space tag")),
        };
        let logvar = match bytes[10] {
            0 => LogvarMode::None,
            1 => LogvarMode::Grouped,
            2 => LogvarMode::Full,
            _ => return Err(Error::CheckpointCorrupt("unknown logvar tag")),
        };
        let mut pos = 12;
        let prior = match bytes[11] {
            0 => Prior::StandardGaussian,
            1 => {
                let sigma_pos = take_f64(bytes, &mut pos)?;
                let sigma_rot = take_f64(bytes, &mut pos)?;
                Prior::PoseCentric { sigma_pos, sigma_rot }
            }
            2 => {
                let sigma = take_f64(bytes, &mut pos)?;
                if pos + 4 > bytes.len() {
                    return Err(Error::CheckpointCorrupt("truncated"));
                }
                let n = u32::from_le_bytes([
                    bytes[pos],
                    bytes[pos + 1],
                    bytes[pos + 2],
                    bytes[pos + 3],
                ]) as usize;
                pos += 4;
                let mut components = Vec::with_capacity(n);
                for _ in 0..n {
                    let weight = take_f64(bytes, &mut pos)?;
                    let px = take_f64(bytes, &mut pos)?;
                    let py = take_f64(bytes, &mut pos)?;
                    let pz = take_f64(bytes, &mut pos)?;
                    let w = take_f64(bytes, &mut pos)?;
                    let x = take_f64(bytes, &mut pos)?;
                    let y = take_f64(bytes, &mut pos)?;
                    let z = take_f64(bytes, &mut pos)?;
                    components.push(MixtureComponent {
                        center: Pose::new([px, py, pz], crate::manifold::Quat { w, x, y, z }),
                        weight,
                    });
                }
                Prior::Mixture { components, sigma }
            }
            _ => return Err(Error::CheckpointCorrupt("unknown prior tag")),
        };
        if pos + 8 > bytes.len() {
            return Err(Error::CheckpointCorrupt("truncated"));
        }
        let mut arr = [0u8; 8];
        arr.copy_from_slice(&bytes[pos..pos + 8]);
        let net_len = u64::from_le_bytes(arr) as usize;
        pos += 8;
        if pos + net_len != bytes.len() {
            return Err(Error::CheckpointCorrupt("network length disagreement"));
        }
        let network = Network::from_bytes(&bytes[pos..])?;
        Ok(FlowModel {
            network,
            prior,
            space,
            logvar,
        })
    }
}

/// One training example: the pose to reach, the conditioning pose, the skill
/// progress label, and (when a log-variance head is trained) its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub target: Pose,
    pub condition: Pose,
    pub progress: f64,
    pub logvar_target: Vec<f64>,
}

/// Training set for one stream, in that stream's local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub space: StateSpace,
    pub items: Vec<TrainItem>,
}

impl TrainSet {
    /// Builds a training set from a per-frame local dataset, keeping only the
    /// records of `skill`. Log-variance targets are read off the Gaussian
    /// trajectory model when a head is trained; a full-head target also
    /// serves grouped weighting at inference by group-averaging.
    pub fn from_local_dataset(
        ds: &LocalDataset,
        skill: usize,
        space: StateSpace,
        logvar: LogvarMode,
        gtm: Option<&GaussianTrajectoryModel>,
    ) -> Result<TrainSet> {
        let (lin_dims, ang_dims) = space.group_dims();
        let mut items = Vec::new();
        for r in ds.records.iter().filter(|r| r.skill == skill) {
            let logvar_target = match (logvar, gtm) {
                (LogvarMode::None, _) => Vec::new(),
                (_, None) => {
                    return Err(Error::InvalidConfig(
                        "logvar head requested without a trajectory model".into(),
                    ))
                }
                (LogvarMode::Full, Some(g)) => {
                    let mut t = g.logvar_full(skill, r.progress, lin_dims);
                    if ang_dims > 0 {
                        t.extend(g.logvar_full(skill, r.progress, 6)[3..3 + ang_dims].iter());
                    }
                    t
                }
                (LogvarMode::Grouped, Some(g)) => {
                    g.logvar_grouped(skill, r.progress, lin_dims, ang_dims)
                }
            };
            items.push(TrainItem {
                target: r.local_ee,
                condition: r.local_condition,
                progress: r.progress,
                logvar_target,
            });
        }
        if items.is_empty() {
            return Err(Error::Empty("training set"));
        }
        Ok(TrainSet { space, items })
    }
}

/// Training hyperparameters. Flow time is sampled uniformly on [0, 1]; the
/// learning rate anneals linearly to `learning_rate * lr_decay` over the run.
///
/// `condition_noise` perturbs the conditioning pose fed to the network (not
/// the prior) in tangent space during training, teaching the policy to pull
/// slightly off-manifold states back onto the demonstrations instead of
/// compounding receding-horizon errors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub condition_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            condition_noise: 0.0,
            seed: 0,
        }
    }
}

/// Loss decomposition of one batch or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub velocity: f64,
    pub progress: f64,
    pub logvar: f64,
}

/// The flow time, prior draw and (possibly perturbed) conditioning pose
/// paired with one training item.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub item: usize,
    pub t: f64,
    pub z0: Pose,
    pub condition: Pose,
}

/// Draws the stochastic part of the objective (flow times, prior samples and
/// conditioning perturbations) for the given items.
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &FlowModel,
    items: &[TrainItem],
    indices: &[usize],
    condition_noise: f64,
    rng: &mut R,
) -> Vec<PreparedSample> {
    indices
        .iter()
        .map(|&i| {
            let t: f64 = rng.random();
            let z0 = model.prior.sample(model.space, &items[i].condition, rng);
            let condition = if condition_noise > 0.0 {
                model
                    .space
                    .sample_about(&items[i].condition, condition_noise, condition_noise, rng)
            } else {
                items[i].condition
            };
            PreparedSample {
                item: i,
                t,
                z0,
                condition,
            }
        })
        .collect()
}

/// Evaluates the flow matching objective on prepared samples and accumulates
/// the parameter gradient. Deterministic given the prepared batch, which is
/// what the finite-difference gradient checks rely on.
pub fn cfm_loss_prepared(
    model: &FlowModel,
    items: &[TrainItem],
    prepared: &[PreparedSample],
) -> Result<(LossTerms, Vec<f64>)> {
    if prepared.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let space = model.space;
    let n = prepared.len() as f64;
    let mut grad = vec![0.0; model.network.param_count()];
    let mut terms = LossTerms::default();

    for p in prepared {
        let item = &items[p.item];
        let z_t = space.interpolate(&p.z0, &item.target, p.t)?;
        let target_v = space.log(&p.z0, &item.target)?;
        let target_v = space.tangent_to_vec(&target_v);

        let (out, cache) = model.heads_cached(&z_t, &p.condition, p.t)?;

        let mut d_velocity = vec![0.0; target_v.len()];
        for d in 0..target_v.len() {
            let e = out.velocity[d] - target_v[d];
            terms.velocity += e * e / n;
            d_velocity[d] = 2.0 * e / n;
        }

        let pe = out.progress - item.progress;
        terms.progress += pe * pe / n;
        let d_progress = PROGRESS_LOSS_WEIGHT * 2.0 * pe / n;

        let mut d_logvar = vec![0.0; out.logvar.len()];
        if !item.logvar_target.is_empty() {
            if item.logvar_target.len() != out.logvar.len() {
                return Err(Error::DimensionMismatch {
                    what: "logvar target",
                    expected: out.logvar.len(),
                    got: item.logvar_target.len(),
                });
            }
            for d in 0..out.logvar.len() {
                let e = out.logvar[d] - item.logvar_target[d];
                terms.logvar += e * e / n;
                d_logvar[d] = LOGVAR_LOSS_WEIGHT * 2.0 * e / n;
            }
        }

        let g = model.network.backward(
            &cache,
            &HeadCotangent {
                velocity: d_velocity,
                progress: d_progress,
                logvar: d_logvar,
            },
        )?;
        for (acc, gi) in grad.iter_mut().zip(g.iter()) {
            *acc += gi;
        }
    }
    terms.total =
        terms.velocity + PROGRESS_LOSS_WEIGHT * terms.progress + LOGVAR_LOSS_WEIGHT * terms.logvar;
    if !terms.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((terms, grad))
}

/// Samples the stochastic parts and evaluates the objective on one batch.
pub fn cfm_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    items: &[TrainItem],
    rng: &mut R,
) -> Result<(LossTerms, Vec<f64>)> {
    let indices: Vec<usize> = (0..items.len()).collect();
    let prepared = prepare_batch(model, items, &indices, 0.0, rng);
    cfm_loss_prepared(model, items, &prepared)
}

/// Trains the model in place. Deterministic under the config seed; returns
/// the per-epoch loss curve.
pub fn train(model: &mut FlowModel, data: &TrainSet, config: &TrainConfig) -> Result<Vec<LossTerms>> {
    if data.items.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.space != model.space {
        return Err(Error::InvalidConfig("training set state space mismatch".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    let mut rng = crate::seeded_rng(config.seed);
    let mut opt = OptimizerState::new(model.network.param_count(), config.learning_rate);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.items.len()).collect();
    let lr_end = config.learning_rate * config.lr_decay;

    for epoch in 0..config.epochs {
        let frac = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        opt.learning_rate = (1.0 - frac) * config.learning_rate + frac * lr_end;
        order.shuffle(&mut rng);
        let mut epoch_terms = LossTerms::default();
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let prepared =
                prepare_batch(model, &data.items, chunk, config.condition_noise, &mut rng);
            let (terms, grad) = cfm_loss_prepared(model, &data.items, &prepared)
                .map_err(|e| match e {
                    Error::NonFiniteLoss => Error::TrainDiverged { epoch },
                    other => other,
                })?;
            opt.step(model.network.params_mut(), &grad)
                .map_err(|e| match e {
                    Error::NonFiniteGradient => Error::TrainDiverged { epoch },
                    other => other,
                })?;
            epoch_terms.total += terms.total;
            epoch_terms.velocity += terms.velocity;
            epoch_terms.progress += terms.progress;
            epoch_terms.logvar += terms.logvar;
            batches += 1.0;
        }
        epoch_terms.total /= batches;
        epoch_terms.velocity /= batches;
        epoch_terms.progress /= batches;
        epoch_terms.logvar /= batches;
        curve.push(epoch_terms);
    }
    Ok(curve)
}

/// Final state plus the last-step head readings of one integration.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationResult {
    pub state: Pose,
    pub progress: f64,
    pub logvar: Vec<f64>,
}

/// Integrates the learned ODE from `z0` to flow time 1 with `steps` explicit
/// Euler steps. The quaternion is renormalized at every step.
pub fn integrate(
    model: &FlowModel,
    z0: &Pose,
    conditioning: &Pose,
    steps: usize,
) -> Result<IntegrationResult> {
    if steps == 0 {
        return Err(Error::InvalidConfig("integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = *z0;
    let mut progress = 0.0;
    let mut logvar = Vec::new();
    for k in 0..steps {
        let t = k as f64 * dt;
        let out = model.heads(&z, conditioning, t)?;
        let v = model.space.tangent_from_slice(&out.velocity)?;
        z = model.space.step(&z, &v, dt);
        if !z.is_finite() {
            return Err(Error::NonFiniteState);
        }
        progress = out.progress;
        logvar = out.logvar;
    }
    Ok(IntegrationResult {
        state: z,
        progress,
        logvar,
    })
}

/// Clamps a predicted log variance into the numerically safe range before it
/// is exponentiated.
pub fn clamp_logvar(v: f64) -> f64 {
    v.max(LOGVAR_CLAMP.0).min(LOGVAR_CLAMP.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Quat;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn euclid2() -> StateSpace {
        StateSpace::Euclidean(2)
    }

    fn tiny_model(space: StateSpace, rng: &mut ChaCha8Rng) -> FlowModel {
        FlowModel::new(
            space,
            Prior::StandardGaussian,
            &ModelConfig {
                hidden: vec![16, 16],
                activation: Activation::Silu,
                time_features: 8,
                logvar: LogvarMode::None,
                conditioned: true,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn prior_degenerate_sigma_returns_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let prior = Prior::PoseCentric {
            sigma_pos: 1e-300,
            sigma_rot: 1e-300,
        };
        let cond = Pose::from_xy(0.4, -0.2);
        let s = prior.sample(euclid2(), &cond, &mut rng);
        for d in 0..3 {
            assert!((s.position[d] - cond.position[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_prior_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let prior = Prior::StandardGaussian;
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let s = prior.sample(euclid2(), &Pose::IDENTITY, &mut rng);
            mean[0] += s.position[0] / n as f64;
            mean[1] += s.position[1] / n as f64;
        }
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!(norm < 0.02, "empirical mean norm {norm}");
    }

    #[test]
    fn single_identity_mixture_matches_standard() {
        // One identity component with sigma 1 draws from the same law as the
        // standard prior (and the same rng stream modulo the selector draw).
        let mixture = Prior::Mixture {
            components: vec![MixtureComponent {
                center: Pose::IDENTITY,
                weight: 1.0,
            }],
            sigma: 1.0,
        };
        let n = 50_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut mean = 0.0;
        let mut var = 0.0;
        for _ in 0..n {
            let s = mixture.sample(euclid2(), &Pose::IDENTITY, &mut rng);
            mean += s.position[0] / n as f64;
            var += s.position[0] * s.position[0] / n as f64;
        }
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        let space = euclid2();
        let z0 = Pose::from_xy(0.0, 0.0);
        let z1 = Pose::from_xy(2.0, 0.0);
        assert_eq!(space.interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(space.interpolate(&z0, &z1, 1.0).unwrap(), z1);
        let mid = space.interpolate(&z0, &z1, 0.5).unwrap();
        assert_eq!(mid.position, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_velocity_field_is_identity_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = tiny_model(euclid2(), &mut rng);
        // The output layer is zero-initialized, so the field is zero.
        let z0 = Pose::from_xy(0.7, -0.3);
        let res = integrate(&model, &z0, &Pose::IDENTITY, 10).unwrap();
        assert_eq!(res.state.position, z0.position);
    }

    #[test]
    fn euler_is_exact_on_constant_field() {
        // Hand-build a linear network computing a constant velocity (1, 0).
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut model = tiny_model(euclid2(), &mut rng);
        // Zero all parameters, then set the output bias of dim 0 to 1.
        for p in model.network.params_mut() {
            *p = 0.0;
        }
        let n = model.network.param_count();
        let out_dim = model.network.output_spec().total();
        // Biases of the last layer are the trailing out_dim parameters.
        model.network.params_mut()[n - out_dim] = 1.0;
        for steps in [1, 3, 10, 57] {
            let res = integrate(&model, &Pose::IDENTITY, &Pose::IDENTITY, steps).unwrap();
            assert!((res.state.position[0] - 1.0).abs() < 1e-12, "steps {steps}");
            assert!(res.state.position[1].abs() < 1e-12);
        }
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut model = tiny_model(euclid2(), &mut rng);
        // Random parameters rather than the zeroed output layer.
        for p in model.network.params_mut() {
            *p = rng.random::<f64>() * 0.4 - 0.2;
        }
        let items = vec![
            TrainItem {
                target: Pose::from_xy(0.8, -0.1),
                condition: Pose::from_xy(0.1, 0.0),
                progress: 0.7,
                logvar_target: vec![],
            },
            TrainItem {
                target: Pose::from_xy(-0.4, 0.5),
                condition: Pose::from_xy(0.0, 0.1),
                progress: 0.3,
                logvar_target: vec![],
            },
        ];
        let indices = vec![0, 1];
        let prepared = prepare_batch(&model, &items, &indices, 0.0, &mut rng);
        let (_, grad) = cfm_loss_prepared(&model, &items, &prepared).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in (0..model.network.param_count()).step_by(11) {
            let orig = model.network.params()[i];
            model.network.params_mut()[i] = orig + h;
            let (up, _) = cfm_loss_prepared(&model, &items, &prepared).unwrap();
            model.network.params_mut()[i] = orig - h;
            let (down, _) = cfm_loss_prepared(&model, &items, &prepared).unwrap();
            model.network.params_mut()[i] = orig;
            let fd = (up.total - down.total) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            max_rel = max_rel.max((fd - grad[i]).abs() / denom);
        }
        assert!(max_rel < 1e-4, "cfm gradient mismatch {max_rel}");
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = TrainSet {
            space: euclid2(),
            items: (0..8)
                .map(|i| TrainItem {
                    target: Pose::from_xy(0.1 * i as f64, -0.05 * i as f64),
                    condition: Pose::IDENTITY,
                    progress: (i + 1) as f64 / 8.0,
                    logvar_target: vec![],
                })
                .collect(),
        };
        let config = TrainConfig {
            lr_decay: 0.1,
            condition_noise: 0.0,
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 7,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut model = tiny_model(euclid2(), &mut rng);
            train(&mut model, &data, &config).unwrap();
            model.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn overfits_single_datapoint_with_tight_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut model = FlowModel::new(
            euclid2(),
            Prior::PoseCentric {
                sigma_pos: 1e-4,
                sigma_rot: 1e-4,
            },
            &ModelConfig {
                hidden: vec![32, 32],
                activation: Activation::Silu,
                time_features: 8,
                logvar: LogvarMode::None,
                conditioned: true,
            },
            &mut rng,
        )
        .unwrap();
        let cond = Pose::from_xy(0.0, 0.0);
        let target = Pose::from_xy(0.5, -0.3);
        let data = TrainSet {
            space: euclid2(),
            items: vec![TrainItem {
                target,
                condition: cond,
                progress: 1.0,
                logvar_target: vec![],
            }],
        };
        train(
            &mut model,
            &data,
            &TrainConfig {
                lr_decay: 0.1,
                condition_noise: 0.0,
                epochs: 1500,
                batch_size: 8,
                learning_rate: 3e-3,
                seed: 1,
            },
        )
        .unwrap();
        let z0 = model.prior.sample(model.space, &cond, &mut rng);
        let res = integrate(&model, &z0, &cond, 10).unwrap();
        let err = ((res.state.position[0] - target.position[0]).powi(2)
            + (res.state.position[1] - target.position[1]).powi(2))
        .sqrt();
        assert!(err < 1e-2, "overfit landing error {err}");
    }

    #[test]
    fn oracle_velocity_predictor_has_zero_velocity_term() {
        // With a zero network and a dataset whose target equals the prior
        // draw (sigma -> 0 pose-centric prior centred at the target), the
        // velocity target is ~0 and so is the velocity loss term.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut model = FlowModel::new(
            euclid2(),
            Prior::PoseCentric {
                sigma_pos: 1e-300,
                sigma_rot: 1e-300,
            },
            &ModelConfig {
                hidden: vec![8],
                activation: Activation::Tanh,
                time_features: 4,
                logvar: LogvarMode::None,
                conditioned: true,
            },
            &mut rng,
        )
        .unwrap();
        model.network.zero_output_layer();
        let target = Pose::from_xy(0.3, 0.4);
        let items = vec![TrainItem {
            target,
            condition: target,
            progress: 1.0,
            logvar_target: vec![],
        }];
        let (terms, _) = cfm_loss(&model, &items, &mut rng).unwrap();
        assert!(terms.velocity < 1e-20);
    }

    #[test]
    fn pose_manifold_round_trip_training_smoke() {
        // A pose-space model with logvar head trains without diverging and
        // produces valid poses at every integration step.
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let space = StateSpace::PoseManifold;
        let mut model = FlowModel::new(
            space,
            Prior::PoseCentric {
                sigma_pos: 0.3,
                sigma_rot: 0.3,
            },
            &ModelConfig {
                hidden: vec![32, 32],
                activation: Activation::Silu,
                time_features: 8,
                logvar: LogvarMode::Grouped,
                conditioned: true,
            },
            &mut rng,
        )
        .unwrap();
        let items: Vec<TrainItem> = (0..6)
            .map(|i| {
                let t = i as f64 / 5.0;
                TrainItem {
                    target: Pose::new(
                        [t, 0.2 * t, 0.0],
                        Quat::exp([0.0, 0.0, 0.8 * t]),
                    ),
                    condition: Pose::IDENTITY,
                    progress: (i + 1) as f64 / 6.0,
                    logvar_target: vec![-6.0, -6.0],
                }
            })
            .collect();
        let data = TrainSet {
            space,
            items,
        };
        train(
            &mut model,
            &data,
            &TrainConfig {
                lr_decay: 0.1,
                condition_noise: 0.0,
                epochs: 60,
                batch_size: 6,
                learning_rate: 1e-3,
                seed: 3,
            },
        )
        .unwrap();
        let z0 = model.prior.sample(space, &Pose::IDENTITY, &mut rng);
        let res = integrate(&model, &z0, &Pose::IDENTITY, 100).unwrap();
        let n = res.state.orientation.norm();
        assert!((n - 1.0).abs() < 1e-9, "orientation norm drift {n}");
        assert!(res.progress >= 0.0 && res.progress <= 1.0);
        assert_eq!(res.logvar.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip_all_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let priors = vec![
            Prior::StandardGaussian,
            Prior::PoseCentric {
                sigma_pos: 0.25,
                sigma_rot: 0.15,
            },
            Prior::Mixture {
                components: vec![
                    MixtureComponent {
                        center: Pose::from_xy_yaw(0.5, -0.2, 0.4),
                        weight: 0.3,
                    },
                    MixtureComponent {
                        center: Pose::from_xy(1.0, 0.0),
                        weight: 0.7,
                    },
                ],
                sigma: 0.5,
            },
        ];
        for prior in priors {
            let model = FlowModel::new(
                StateSpace::PoseManifold,
                prior,
                &ModelConfig {
                    hidden: vec![8],
                    activation: Activation::Tanh,
                    time_features: 4,
                    logvar: LogvarMode::Full,
                    conditioned: false,
                },
                &mut rng,
            )
            .unwrap();
            let back = FlowModel::from_bytes(&model.to_bytes()).unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut model = tiny_model(euclid2(), &mut rng);
        let data = TrainSet {
            space: euclid2(),
            items: vec![TrainItem {
                target: Pose::from_xy(1e200, 0.0),
                condition: Pose::IDENTITY,
                progress: 1.0,
                logvar_target: vec![],
            }],
        };
        let err = train(
            &mut model,
            &data,
            &TrainConfig {
                lr_decay: 0.1,
                condition_noise: 0.0,
                epochs: 10,
                batch_size: 1,
                learning_rate: 1e3,
                seed: 0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrainDiverged { .. }));
    }
}
