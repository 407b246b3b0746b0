//! Scripted desk-scale task suite: kinematic reaching, drawer-pulling and
//! pick-and-place tasks with randomized object frames, plus a bimodal 2D toy
//! for composition studies. The "simulation" is kinematic: the end-effector
//! teleports to each composed pose, so success depends only on pose accuracy.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

// Resolves f64 math in no_std builds; redundant (and lint-flagged) when a
// dependency feature pulls std into the crate graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compose::{rollout, CompositionConfig, InitPools, Rollout, SkillStreams, Stream};
use crate::flowmatch::{FlowModel, MixtureComponent, Prior, TrainItem, TrainSet};
use crate::manifold::{self, to_local, Frame, Pose, Quat, StateSpace};
use crate::streams::{Demonstration, DemoStep};
use crate::{Error, Result};

/// Frame id used by the naive world-frame baseline.
pub const GLOBAL_FRAME_ID: &str = "global";

/// Frame id of the per-episode oriented copy of an object frame.
pub fn oriented_frame_id(primary: &str) -> String {
    format!("oriented:{primary}")
}

/// Randomization ranges of one task frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDef {
    pub id: String,
    pub center: Pose,
    pub pos_half_range: [f64; 3],
    pub yaw_half_range: f64,
    pub tilt_half_range: f64,
}

/// A waypoint expressed relative to a task frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOffset {
    pub frame: String,
    pub offset: Pose,
}

/// Scripted task definition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub space: StateSpace,
    pub frames: Vec<FrameDef>,
    /// Waypoints of each skill; the last waypoint is the skill target.
    pub skill_paths: Vec<Vec<FrameOffset>>,
    /// Frame ids the multi-stream policy uses per skill.
    pub skill_frames: Vec<Vec<String>>,
    /// The task-relevant object frame per skill (single-stream baselines).
    pub primary_frames: Vec<String>,
    pub steps_per_skill: usize,
    pub demo_noise: f64,
    /// Success tolerances: position and rotation.
    pub pos_tol: f64,
    pub rot_tol: f64,
    /// Pass-through radius around intermediate skill targets.
    pub waypoint_tol: f64,
    /// Axis-aligned workspace box (center, half extents). Leaving it fails
    /// the episode, the desk-scale analog of joint limits and collisions.
    pub workspace_center: [f64; 3],
    pub workspace_half: [f64; 3],
    /// Skill index at which the gripper closes in the scripted demos.
    pub grasp_skill: usize,
}

pub fn names() -> &'static [&'static str] {
    &["bimodal-2d", "reach", "drawer", "place"]
}

/// Built-in task by name.
pub fn builtin(name: &str) -> Result<TaskSpec> {
    match name {
        "reach" => Ok(TaskSpec {
            name: "reach".into(),
            space: StateSpace::PoseManifold,
            frames: vec![
                FrameDef {
                    id: "ee".into(),
                    center: Pose::IDENTITY,
                    pos_half_range: [0.5, 0.5, 0.0],
                    yaw_half_range: 0.6,
                    tilt_half_range: 0.0,
                },
                FrameDef {
                    id: "goal".into(),
                    center: Pose::from_xy(1.3, 0.0),
                    pos_half_range: [0.5, 0.5, 0.0],
                    yaw_half_range: 0.8,
                    tilt_half_range: 0.0,
                },
            ],
            skill_paths: vec![
                // Skill 0 leads out along the end-effector's own axis; its
                // end is the first skill's target region, so the task cannot
                // be solved from the goal frame alone. Skill 1 approaches
                // and grasps in the goal frame.
                vec![FrameOffset {
                    frame: "ee".into(),
                    offset: Pose::from_xy(0.3, 0.0),
                }],
                vec![
                    FrameOffset {
                        frame: "goal".into(),
                        offset: Pose::from_xy(-0.35, 0.0),
                    },
                    FrameOffset {
                        frame: "goal".into(),
                        offset: Pose::IDENTITY,
                    },
                ],
            ],
            skill_frames: vec![
                vec!["ee".into(), "goal".into()],
                vec!["ee".into(), "goal".into()],
            ],
            primary_frames: vec!["goal".into(), "goal".into()],
            steps_per_skill: 12,
            demo_noise: 0.015,
            pos_tol: 0.05,
            rot_tol: 0.2,
            waypoint_tol: 0.1,
            workspace_center: [0.65, 0.0, 0.0],
            workspace_half: [1.35, 1.0, 0.5],
            grasp_skill: 1,
        }),
        "drawer" => Ok(TaskSpec {
            name: "drawer".into(),
            space: StateSpace::PoseManifold,
            frames: vec![
                FrameDef {
                    id: "ee".into(),
                    center: Pose::IDENTITY,
                    pos_half_range: [0.4, 0.4, 0.0],
                    yaw_half_range: 0.5,
                    tilt_half_range: 0.0,
                },
                FrameDef {
                    id: "drawer".into(),
                    center: Pose::from_xy(1.2, 0.2),
                    pos_half_range: [0.4, 0.4, 0.0],
                    yaw_half_range: 0.7,
                    tilt_half_range: 0.0,
                },
            ],
            skill_paths: vec![
                vec![
                    FrameOffset {
                        frame: "ee".into(),
                        offset: Pose::from_xy(0.25, 0.0),
                    },
                    FrameOffset {
                        frame: "drawer".into(),
                        offset: Pose::from_xy(-0.35, 0.0),
                    },
                ],
                // Pull along the drawer's local -x by a fixed displacement.
                vec![FrameOffset {
                    frame: "drawer".into(),
                    offset: Pose::from_xy(-0.6, 0.0),
                }],
            ],
            skill_frames: vec![
                vec!["ee".into(), "drawer".into()],
                vec!["ee".into(), "drawer".into()],
            ],
            primary_frames: vec!["drawer".into(), "drawer".into()],
            steps_per_skill: 12,
            demo_noise: 0.015,
            pos_tol: 0.05,
            rot_tol: 0.2,
            waypoint_tol: 0.1,
            workspace_center: [0.6, 0.1, 0.0],
            workspace_half: [1.3, 1.0, 0.5],
            grasp_skill: 1,
        }),
        "place" => Ok(TaskSpec {
            name: "place".into(),
            space: StateSpace::PoseManifold,
            frames: vec![
                FrameDef {
                    id: "ee".into(),
                    center: Pose::new([0.0, 0.0, 0.15], Quat::IDENTITY),
                    pos_half_range: [0.4, 0.4, 0.1],
                    yaw_half_range: 0.6,
                    tilt_half_range: 0.1,
                },
                FrameDef {
                    id: "objA".into(),
                    center: Pose::from_xy(1.0, -0.5),
                    pos_half_range: [0.35, 0.35, 0.0],
                    yaw_half_range: 0.7,
                    tilt_half_range: 0.0,
                },
                FrameDef {
                    id: "objB".into(),
                    center: Pose::from_xy(1.0, 0.6),
                    pos_half_range: [0.35, 0.35, 0.0],
                    yaw_half_range: 0.7,
                    tilt_half_range: 0.0,
                },
            ],
            skill_paths: vec![
                // Lead out in the end-effector frame, pick at the first
                // object, place at the second.
                vec![FrameOffset {
                    frame: "ee".into(),
                    offset: Pose::new([0.25, 0.0, 0.1], Quat::IDENTITY),
                }],
                vec![
                    FrameOffset {
                        frame: "objA".into(),
                        offset: Pose::new([0.0, 0.0, 0.25], Quat::IDENTITY),
                    },
                    FrameOffset {
                        frame: "objA".into(),
                        offset: Pose::IDENTITY,
                    },
                ],
                vec![
                    FrameOffset {
                        frame: "objB".into(),
                        offset: Pose::new([0.0, 0.0, 0.3], Quat::IDENTITY),
                    },
                    FrameOffset {
                        frame: "objB".into(),
                        offset: Pose::new([0.0, 0.0, 0.12], Quat::IDENTITY),
                    },
                ],
            ],
            skill_frames: vec![
                vec!["ee".into(), "objA".into()],
                vec!["ee".into(), "objA".into()],
                vec!["objA".into(), "objB".into()],
            ],
            primary_frames: vec!["objA".into(), "objA".into(), "objB".into()],
            steps_per_skill: 10,
            demo_noise: 0.015,
            pos_tol: 0.05,
            rot_tol: 0.2,
            waypoint_tol: 0.1,
            workspace_center: [0.55, 0.05, 0.2],
            workspace_half: [1.3, 1.35, 0.8],
            grasp_skill: 2,
        }),
        "bimodal-2d" => Ok(TaskSpec {
            name: "bimodal-2d".into(),
            space: StateSpace::Euclidean(2),
            frames: vec![],
            skill_paths: vec![],
            skill_frames: vec![],
            primary_frames: vec![],
            steps_per_skill: 0,
            demo_noise: 0.0,
            pos_tol: 0.05,
            rot_tol: 0.2,
            waypoint_tol: 0.1,
            workspace_center: [0.0; 3],
            workspace_half: [10.0; 3],
            grasp_skill: 0,
        }),
        other => Err(Error::InvalidConfig(format!(
            "unknown task `{other}`; valid tasks: {}",
            names().join(", ")
        ))),
    }
}

impl TaskSpec {
    pub fn skill_count(&self) -> usize {
        self.skill_paths.len()
    }

    pub fn is_toy(&self) -> bool {
        self.skill_paths.is_empty()
    }

    /// All frame ids the multi-stream policy needs, in declaration order.
    pub fn stream_frame_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for sf in &self.skill_frames {
            for id in sf {
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
        }
        ids
    }

    /// Samples one episode: frame placements, the start pose (the sampled
    /// "ee" frame), and the resolved per-skill target poses.
    pub fn sample_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskInstance> {
        let mut frames = BTreeMap::new();
        for def in &self.frames {
            frames.insert(def.id.clone(), sample_frame_pose(def, rng));
        }
        let start = *frames.get("ee").ok_or(Error::MissingFrame("ee".into()))?;
        let mut skill_targets = Vec::with_capacity(self.skill_count());
        for path in &self.skill_paths {
            let last = path.last().expect("skill paths are non-empty");
            let base = frames
                .get(&last.frame)
                .ok_or_else(|| Error::MissingFrame(last.frame.clone()))?;
            skill_targets.push(manifold::compose(base, &last.offset));
        }
        Ok(TaskInstance {
            frames,
            start,
            skill_targets,
        })
    }

    /// Scripted demonstrations: per episode the frames are sampled in the
    /// spec ranges and the trajectory walks piecewise geodesics through the
    /// skill waypoints with small smooth noise that vanishes at skill
    /// boundaries. Deterministic under the rng.
    pub fn generate_demos<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Demonstration>> {
        if self.is_toy() {
            return Err(Error::InvalidConfig(
                "the bimodal toy has no demonstrations; sample its target distribution".into(),
            ));
        }
        if n == 0 {
            return Err(Error::Empty("demo count"));
        }
        let mut demos = Vec::with_capacity(n);
        for _ in 0..n {
            let instance = self.sample_instance(rng)?;
            demos.push(self.scripted_demo(&instance, rng)?);
        }
        Ok(demos)
    }

    fn scripted_demo<R: Rng + ?Sized>(
        &self,
        instance: &TaskInstance,
        rng: &mut R,
    ) -> Result<Demonstration> {
        let mut steps = vec![DemoStep {
            ee: instance.start,
            gripper: 1.0,
        }];
        let mut splits = Vec::new();
        let mut cursor = instance.start;
        for (skill, path) in self.skill_paths.iter().enumerate() {
            let waypoints: Vec<Pose> = path
                .iter()
                .map(|fo| {
                    instance
                        .frames
                        .get(&fo.frame)
                        .map(|base| manifold::compose(base, &fo.offset))
                        .ok_or_else(|| Error::MissingFrame(fo.frame.clone()))
                })
                .collect::<Result<_>>()?;
            let gripper = if skill < self.grasp_skill { 1.0 } else { 0.0 };
            let poses = skill_trajectory(
                &cursor,
                &waypoints,
                self.steps_per_skill,
                self.demo_noise,
                rng,
            )?;
            cursor = *poses.last().expect("skill trajectory is non-empty");
            for p in poses {
                steps.push(DemoStep { ee: p, gripper });
            }
            if skill + 1 < self.skill_count() {
                splits.push(steps.len());
            }
        }
        let demo = Demonstration {
            steps,
            frames: instance.frames.clone(),
            skill_splits: splits,
        };
        demo.validate()?;
        Ok(demo)
    }
}

fn sample_frame_pose<R: Rng + ?Sized>(def: &FrameDef, rng: &mut R) -> Pose {
    // Fixed draw order regardless of ranges keeps episode streams aligned.
    let u: [f64; 6] = core::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
    let position = [
        def.center.position[0] + u[0] * def.pos_half_range[0],
        def.center.position[1] + u[1] * def.pos_half_range[1],
        def.center.position[2] + u[2] * def.pos_half_range[2],
    ];
    let rot = Quat::exp([
        u[4] * def.tilt_half_range,
        u[5] * def.tilt_half_range,
        u[3] * def.yaw_half_range,
    ]);
    Pose {
        position,
        orientation: rot.mul(def.center.orientation).normalized(),
    }
}

/// Piecewise geodesic through the waypoints with a smooth two-harmonic noise
/// profile that is exactly zero at both ends of the skill.
fn skill_trajectory<R: Rng + ?Sized>(
    from: &Pose,
    waypoints: &[Pose],
    steps: usize,
    noise: f64,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    if steps < waypoints.len().max(2) {
        return Err(Error::InvalidConfig("too few steps per skill".into()));
    }
    let mut pos_coeff = [[0.0f64; 3]; 2];
    let mut rot_coeff = [[0.0f64; 3]; 2];
    for h in 0..2 {
        for d in 0..3 {
            let n: f64 = StandardNormal.sample(rng);
            pos_coeff[h][d] = noise * n;
        }
        for d in 0..3 {
            let n: f64 = StandardNormal.sample(rng);
            rot_coeff[h][d] = 0.5 * noise * n;
        }
    }

    // Distribute steps over segments proportionally to their length, at
    // least one step each, so progress advances uniformly along the path.
    let segs = waypoints.len();
    let mut lengths = Vec::with_capacity(segs);
    let mut cursor_len = *from;
    for w in waypoints {
        lengths.push(manifold::norm3(manifold::sub3(w.position, cursor_len.position)).max(1e-6));
        cursor_len = *w;
    }
    let mut counts = vec![1usize; segs];
    let mut assigned = segs;
    while assigned < steps {
        // Next step goes to the segment with the largest per-step length.
        let (best, _) = lengths
            .iter()
            .enumerate()
            .map(|(i, len)| (i, len / counts[i] as f64))
            .fold((0, f64::NEG_INFINITY), |acc, (i, d)| {
                if d > acc.1 {
                    (i, d)
                } else {
                    acc
                }
            });
        counts[best] += 1;
        assigned += 1;
    }

    let mut out = Vec::with_capacity(steps);
    let mut cursor = *from;
    let mut done = 0usize;
    for (seg, target) in waypoints.iter().enumerate() {
        let n = counts[seg];
        let start = cursor;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let mut p = manifold::geodesic_interpolate(&start, target, t)?;
            let u = (done + i) as f64 / steps as f64;
            let mut pos_off = [0.0; 3];
            let mut rot_off = [0.0; 3];
            for (h, (pc, rc)) in pos_coeff.iter().zip(rot_coeff.iter()).enumerate() {
                let envelope = (core::f64::consts::PI * (h + 1) as f64 * u).sin();
                for d in 0..3 {
                    pos_off[d] += pc[d] * envelope;
                    rot_off[d] += rc[d] * envelope;
                }
            }
            p.position = manifold::add3(p.position, pos_off);
            p.orientation = Quat::exp(rot_off).mul(p.orientation).normalized();
            out.push(p);
        }
        cursor = waypoints[seg];
        done += n;
    }
    Ok(out)
}

/// One sampled episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub frames: BTreeMap<String, Pose>,
    pub start: Pose,
    pub skill_targets: Vec<Pose>,
}

/// Bimodal 2D toy: a two-component Gaussian mixture observed by two streams
/// whose frames are offset, rotated copies of the world frame.
#[derive(Debug, Clone)]
pub struct BimodalToy {
    pub centers: [[f64; 2]; 2],
    pub mode_std: f64,
    pub frames: [Frame; 2],
    pub start: Pose,
}

impl BimodalToy {
    /// The stream frames are offset along the inter-mode axis: each stream
    /// trains against its own local unit Gaussian, so its mode boundary sits
    /// at its own frame origin and the two streams frequently commit to
    /// different modes when integrated independently.
    pub fn standard() -> BimodalToy {
        BimodalToy {
            centers: [[1.2, 0.9], [1.2, -0.9]],
            mode_std: 0.25,
            frames: [
                Frame::new("a", Pose::from_xy_yaw(0.3, 0.75, 0.4)),
                Frame::new("b", Pose::from_xy_yaw(-0.2, -0.8, -0.5)),
            ],
            start: Pose::IDENTITY,
        }
    }

    /// Mode separation over mode standard deviation; at least six by
    /// construction.
    pub fn separation_ratio(&self) -> f64 {
        let dx = self.centers[0][0] - self.centers[1][0];
        let dy = self.centers[0][1] - self.centers[1][1];
        (dx * dx + dy * dy).sqrt() / self.mode_std
    }

    /// Radius around a mode center that counts as having committed to that
    /// mode. Two sigma keeps the score sensitive to within-mode sharpness.
    pub fn mode_radius(&self) -> f64 {
        2.0 * self.mode_std
    }

    /// Equal-weight draw from the two-mode target distribution.
    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let pick: f64 = rng.random();
        let c = if pick < 0.5 { self.centers[0] } else { self.centers[1] };
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        [c[0] + self.mode_std * nx, c[1] + self.mode_std * ny]
    }

    /// Fraction of samples within one mode radius of either mode center.
    pub fn common_mode_rate(&self, samples: &[[f64; 2]]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let r2 = self.mode_radius() * self.mode_radius();
        let hits = samples
            .iter()
            .filter(|s| {
                self.centers.iter().any(|c| {
                    let dx = s[0] - c[0];
                    let dy = s[1] - c[1];
                    dx * dx + dy * dy <= r2
                })
            })
            .count();
        hits as f64 / samples.len() as f64
    }

    /// The space the toy streams operate on.
    pub fn space(&self) -> StateSpace {
        StateSpace::Euclidean(2)
    }

    /// Training prior of a toy stream: its own local unit Gaussian. Matched
    /// inference draws the noise once in the world frame, so each stream sees
    /// a frame-shifted copy; the resulting mode disagreement between
    /// independently integrated streams is the phenomenon this toy exhibits.
    pub fn stream_prior(&self, _stream: usize) -> Prior {
        Prior::StandardGaussian
    }

    /// Mixture prior alternative: the unit world Gaussian carried into the
    /// stream's frame, which removes the training/inference prior shift.
    pub fn stream_mixture_prior(&self, stream: usize) -> Prior {
        Prior::Mixture {
            components: vec![MixtureComponent {
                center: self.frames[stream].pose.inverse(),
                weight: 1.0,
            }],
            sigma: 1.0,
        }
    }

    /// Per-stream unconditioned training sets: the same world target samples
    /// expressed in each stream's local frame.
    pub fn train_sets<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TrainSet> {
        let space = self.space();
        let mut items: Vec<Vec<TrainItem>> = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let s = self.sample_target(rng);
            let world = Pose::from_xy(s[0], s[1]);
            for (f, frame) in self.frames.iter().enumerate() {
                items[f].push(TrainItem {
                    target: to_local(&world, frame),
                    condition: to_local(&self.start, frame),
                    progress: 1.0,
                    logvar_target: vec![],
                });
            }
        }
        items
            .into_iter()
            .map(|items| TrainSet { space, items })
            .collect()
    }
}

/// Policy assembly strategy for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Method {
    /// Single stream trained on absolute world poses.
    GlobalFrame,
    /// Single stream in the skill's task-relevant object frame.
    ObjectFrame,
    /// Single stream in the object frame reoriented towards the episode's
    /// initial end-effector position.
    OrientedFrame,
    /// All of the skill's streams, composed.
    Msg,
}

/// Trained models keyed by (skill, frame id).
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub models: BTreeMap<(usize, String), FlowModel>,
}

impl ModelSet {
    pub fn insert(&mut self, skill: usize, frame_id: impl Into<String>, model: FlowModel) {
        self.models.insert((skill, frame_id.into()), model);
    }

    pub fn get(&self, skill: usize, frame_id: &str) -> Result<&FlowModel> {
        self.models
            .get(&(skill, frame_id.into()))
            .ok_or_else(|| Error::MissingFrame(format!("skill {skill} stream `{frame_id}`")))
    }
}

/// Outcome of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub pos_err: f64,
    pub rot_err: f64,
    pub steps: usize,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeResult>,
    pub rollouts: Vec<Rollout>,
    pub instances: Vec<TaskInstance>,
}

/// Success criterion on an executed trajectory: the final pose must be within
/// the position and rotation tolerances of the last skill target and, for
/// multi-skill tasks, the trajectory must have passed through the first
/// skill's target region.
pub fn episode_success(
    spec: &TaskSpec,
    instance: &TaskInstance,
    trajectory: &[Pose],
) -> EpisodeResult {
    let target = instance
        .skill_targets
        .last()
        .expect("kinematic tasks have at least one skill");
    let last = trajectory.last().copied().unwrap_or(instance.start);
    let pos_err = manifold::norm3(manifold::sub3(last.position, target.position));
    let rot_err = last.orientation.angle_to(target.orientation);
    let mut success = pos_err <= spec.pos_tol && rot_err <= spec.rot_tol;
    if instance.skill_targets.len() > 1 {
        let first = &instance.skill_targets[0];
        let passed = trajectory.iter().any(|p| {
            manifold::norm3(manifold::sub3(p.position, first.position)) <= spec.waypoint_tol
        });
        success = success && passed;
    }
    let inside = trajectory.iter().all(|p| {
        (0..3).all(|d| (p.position[d] - spec.workspace_center[d]).abs() <= spec.workspace_half[d])
    });
    success = success && inside;
    EpisodeResult {
        success,
        pos_err,
        rot_err,
        steps: trajectory.len(),
        completed: false,
    }
}

fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(episode as u64)
}

/// Builds the per-skill stream sets an evaluation method uses for one episode.
pub fn episode_streams<'m>(
    spec: &TaskSpec,
    instance: &TaskInstance,
    method: Method,
    models: &'m ModelSet,
) -> Result<Vec<SkillStreams<'m>>> {
    let mut skills = Vec::with_capacity(spec.skill_count());
    for skill in 0..spec.skill_count() {
        let streams = match method {
            Method::Msg => {
                let mut streams = Vec::new();
                for id in &spec.skill_frames[skill] {
                    let pose = instance
                        .frames
                        .get(id)
                        .ok_or_else(|| Error::MissingFrame(id.clone()))?;
                    streams.push(Stream::new(
                        Frame::new(id.clone(), *pose),
                        models.get(skill, id)?,
                    ));
                }
                streams
            }
            Method::ObjectFrame => {
                let id = &spec.primary_frames[skill];
                let pose = instance
                    .frames
                    .get(id)
                    .ok_or_else(|| Error::MissingFrame(id.clone()))?;
                vec![Stream::new(
                    Frame::new(id.clone(), *pose),
                    models.get(skill, id)?,
                )]
            }
            Method::GlobalFrame => vec![Stream::new(
                Frame::identity(GLOBAL_FRAME_ID),
                models.get(skill, GLOBAL_FRAME_ID)?,
            )],
            Method::OrientedFrame => {
                let id = &spec.primary_frames[skill];
                let pose = instance
                    .frames
                    .get(id)
                    .ok_or_else(|| Error::MissingFrame(id.clone()))?;
                let oriented = crate::streams::orient_frame(
                    &Frame::new(oriented_frame_id(id), *pose),
                    &instance.start,
                )?;
                vec![Stream::new(oriented, models.get(skill, &oriented_frame_id(id))?)]
            }
        };
        skills.push(SkillStreams { streams });
    }
    Ok(skills)
}

/// Runs `episodes` fresh-randomized episodes of the task and scores each one.
/// Deterministic given (seed, models, config): every episode owns an rng
/// derived from the evaluation seed.
pub fn evaluate(
    spec: &TaskSpec,
    models: &ModelSet,
    method: Method,
    config: &CompositionConfig,
    episodes: usize,
    seed: u64,
    init_pools: &InitPools,
) -> Result<Evaluation> {
    if spec.is_toy() {
        return Err(Error::InvalidConfig(
            "toy tasks are sampled, not rolled out".into(),
        ));
    }
    if episodes == 0 {
        return Err(Error::Empty("episodes"));
    }
    let mut results = Vec::with_capacity(episodes);
    let mut rollouts = Vec::with_capacity(episodes);
    let mut instances = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for e in 0..episodes {
        let mut rng = crate::seeded_rng(episode_seed(seed, e));
        let instance = spec.sample_instance(&mut rng)?;
        let skills = episode_streams(spec, &instance, method, models)?;
        // A rollout that runs numerically wild (the policy left the data
        // region and the network extrapolated) is a failed episode, not a
        // failed evaluation.
        let r = match rollout(&skills, &instance.start, config, init_pools, &mut rng) {
            Ok(r) => r,
            Err(Error::NonFiniteState) | Err(Error::GeodesicUndefined) => {
                results.push(EpisodeResult {
                    success: false,
                    pos_err: f64::INFINITY,
                    rot_err: f64::INFINITY,
                    steps: 0,
                    completed: false,
                });
                rollouts.push(Rollout {
                    steps: Vec::new(),
                    completed: false,
                });
                instances.push(instance);
                continue;
            }
            Err(e) => return Err(e),
        };
        let poses: Vec<Pose> = r.steps.iter().map(|s| s.pose).collect();
        let mut outcome = episode_success(spec, &instance, &poses);
        outcome.completed = r.completed;
        if outcome.success {
            successes += 1;
        }
        results.push(outcome);
        rollouts.push(r);
        instances.push(instance);
    }
    Ok(Evaluation {
        success_rate: successes as f64 / episodes as f64,
        episodes: results,
        rollouts,
        instances,
    })
}
