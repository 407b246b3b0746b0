//! Converts global demonstrations into per-frame local training datasets,
//! annotates skill progress, segments skills from the gripper signal, and
//! fits the per-bin Gaussian trajectory model used to supervise the
//! log-variance head.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;


// Resolves f64 math in no_std builds; redundant (and lint-flagged) when a
// dependency feature pulls std into the crate graph.
#[allow(unused_imports)]
use num_traits::Float;
use crate::manifold::{self, Frame, Pose, Quat};
use crate::nn::LOGVAR_CLAMP;
use crate::{Error, Result};

/// Lower bound on fitted variances (squared task units). Identical
/// demonstrations would otherwise report infinite precision.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One demonstration step: global end-effector pose plus gripper opening.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemoStep {
    #[cfg_attr(feature = "serde", serde(rename = "pose"))]
    pub ee: Pose,
    pub gripper: f64,
}

/// A recorded episode: end-effector trajectory, the object frames observed in
/// the episode (constant per episode; scenes are quasi-static), and the step
/// indices at which a new skill starts. Episodes without split indices can
/// derive them from the gripper signal via [`segment_by_gripper`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Demonstration {
    pub steps: Vec<DemoStep>,
    pub frames: BTreeMap<String, Pose>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub skill_splits: Vec<usize>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::Empty("demonstration needs at least two steps"));
        }
        let mut prev = 0usize;
        for &s in &self.skill_splits {
            if s <= prev || s >= self.steps.len() {
                return Err(Error::InvalidConfig(
                    "skill splits must be strictly increasing and in range".into(),
                ));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn skill_count(&self) -> usize {
        self.skill_splits.len() + 1
    }

    /// Half-open step ranges `[start, end)` of each skill.
    pub fn skill_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::with_capacity(self.skill_count());
        let mut start = 0;
        for &s in &self.skill_splits {
            ranges.push((start, s));
            start = s;
        }
        ranges.push((start, self.steps.len()));
        ranges
    }

    pub fn skill_of_step(&self, step: usize) -> usize {
        self.skill_splits.iter().filter(|&&s| step >= s).count()
    }
}

/// One local training record. `local_ee` is the pose the policy should reach
/// (the action), `local_condition` the end-effector pose it is conditioned on
/// (the pose one step earlier), both expressed in the dataset's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRecord {
    pub local_ee: Pose,
    pub local_condition: Pose,
    pub progress: f64,
    pub skill: usize,
    pub demo: usize,
    pub step: usize,
}

/// All demonstrations of a task expressed in one local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub frame_id: String,
    pub records: Vec<LocalRecord>,
}

/// Progress labels for every step: within a skill of length S the s-th step
/// (1-based) is labelled s/S, so labels are in (0, 1] and non-decreasing
/// within a skill.
pub fn annotate_progress(demo: &Demonstration) -> Vec<f64> {
    let mut labels = Vec::with_capacity(demo.steps.len());
    for (start, end) in demo.skill_ranges() {
        let len = (end - start) as f64;
        for s in start..end {
            labels.push((s - start + 1) as f64 / len);
        }
    }
    labels
}

/// Skill boundaries from gripper open/close events: a split at every step
/// where the gripper signal crosses the threshold. No crossing means a single
/// skill (empty split list).
pub fn segment_by_gripper(demo: &Demonstration, threshold: f64) -> Vec<usize> {
    let mut splits = Vec::new();
    for i in 1..demo.steps.len() {
        let before = demo.steps[i - 1].gripper >= threshold;
        let after = demo.steps[i].gripper >= threshold;
        if before != after {
            splits.push(i);
        }
    }
    splits
}

/// Expresses every demonstration in the local frame `frame_id`, pairing each
/// step with the previous step as conditioning. Transitions across skill
/// boundaries land in the incoming skill, which is also what a rollout sees
/// right after a skill switch.
pub fn to_local_dataset(demos: &[Demonstration], frame_id: &str) -> Result<LocalDataset> {
    let mut records = Vec::new();
    for (demo_idx, demo) in demos.iter().enumerate() {
        demo.validate()?;
        let frame_pose = demo
            .frames
            .get(frame_id)
            .ok_or_else(|| Error::MissingFrame(frame_id.into()))?;
        let frame = Frame::new(frame_id, *frame_pose);
        let progress = annotate_progress(demo);
        for step in 1..demo.steps.len() {
            records.push(LocalRecord {
                local_ee: manifold::to_local(&demo.steps[step].ee, &frame),
                local_condition: manifold::to_local(&demo.steps[step - 1].ee, &frame),
                progress: progress[step],
                skill: demo.skill_of_step(step),
                demo: demo_idx,
                step,
            });
        }
    }
    Ok(LocalDataset {
        frame_id: frame_id.into(),
        records,
    })
}

/// Mean and diagonal variance of one progress bin, in the dataset's local
/// frame. The variance lives in tangent coordinates about the bin mean:
/// three position dimensions, then three rotation-vector dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub mean: Pose,
    pub variance: [f64; 6],
}

/// Per-skill, per-progress-bin Gaussian model of the local trajectory
/// distribution. Doubles as the log-variance supervision signal and as a
/// desk-scale verification oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrajectoryModel {
    /// `bins[skill][bin]` over `bin_count` bins covering (0, 1].
    pub bins: Vec<Vec<BinStats>>,
    pub bin_count: usize,
}

impl GaussianTrajectoryModel {
    pub fn bin_index(&self, progress: f64) -> usize {
        bin_index(progress, self.bin_count)
    }

    pub fn stats(&self, skill: usize, progress: f64) -> &BinStats {
        let skill = skill.min(self.bins.len() - 1);
        &self.bins[skill][self.bin_index(progress)]
    }

    /// Log-variance target with one entry per dimension of `dims`, taken from
    /// the leading tangent dimensions (position block first). Targets clamp
    /// to the range the network head is used within, keeping floored
    /// variances from dominating the regression.
    pub fn logvar_full(&self, skill: usize, progress: f64, dims: usize) -> Vec<f64> {
        let stats = self.stats(skill, progress);
        stats.variance[..dims]
            .iter()
            .map(|v| v.ln().max(LOGVAR_CLAMP.0).min(LOGVAR_CLAMP.1))
            .collect()
    }

    /// Grouped log-variance target: the mean log variance of the position
    /// block and, for pose states, of the rotation block.
    pub fn logvar_grouped(
        &self,
        skill: usize,
        progress: f64,
        lin_dims: usize,
        ang_dims: usize,
    ) -> Vec<f64> {
        let stats = self.stats(skill, progress);
        let mut out = Vec::with_capacity(2);
        let clamp = |v: f64| v.max(LOGVAR_CLAMP.0).min(LOGVAR_CLAMP.1);
        let lin: f64 =
            stats.variance[..lin_dims].iter().map(|v| clamp(v.ln())).sum::<f64>() / lin_dims as f64;
        out.push(lin);
        if ang_dims > 0 {
            let ang: f64 = stats.variance[3..3 + ang_dims]
                .iter()
                .map(|v| clamp(v.ln()))
                .sum::<f64>()
                / ang_dims as f64;
            out.push(ang);
        }
        out
    }
}

fn bin_index(progress: f64, bins: usize) -> usize {
    let idx = (progress * bins as f64).floor() as isize;
    idx.clamp(0, bins as isize - 1) as usize
}

/// Fits the per-bin sample mean and diagonal sample variance (population
/// form, divided by n) in tangent coordinates about the bin mean. Variances
/// are clamped to [`VARIANCE_FLOOR`]; empty bins are filled by interpolating
/// the nearest populated bins.
pub fn fit_gaussian_trajectory(ds: &LocalDataset, bins: usize) -> Result<GaussianTrajectoryModel> {
    if bins < 2 {
        return Err(Error::InvalidConfig("need at least two progress bins".into()));
    }
    if ds.records.is_empty() {
        return Err(Error::Empty("local dataset"));
    }
    let skills = ds.records.iter().map(|r| r.skill).max().unwrap() + 1;
    let mut grouped: Vec<Vec<Vec<&LocalRecord>>> =
        alloc::vec![alloc::vec![Vec::new(); bins]; skills];
    for r in &ds.records {
        grouped[r.skill][bin_index(r.progress, bins)].push(r);
    }

    let mut model_bins = Vec::with_capacity(skills);
    for skill_bins in &grouped {
        let mut fitted: Vec<Option<BinStats>> = Vec::with_capacity(bins);
        for bin in skill_bins {
            fitted.push(fit_bin(bin)?);
        }
        if fitted.iter().all(|b| b.is_none()) {
            return Err(Error::Empty("skill has no records"));
        }
        model_bins.push(fill_empty_bins(fitted)?);
    }
    Ok(GaussianTrajectoryModel {
        bins: model_bins,
        bin_count: bins,
    })
}

fn fit_bin(records: &[&LocalRecord]) -> Result<Option<BinStats>> {
    if records.is_empty() {
        return Ok(None);
    }
    let n = records.len() as f64;
    let mut position = [0.0; 3];
    for r in records {
        for d in 0..3 {
            position[d] += r.local_ee.position[d] / n;
        }
    }
    // Sign-aligned normalized quaternion sum; records in one bin are close.
    let reference = records[0].local_ee.orientation;
    let mut acc = [0.0; 4];
    for r in records {
        let q = r.local_ee.orientation;
        let s = if reference.dot(q) < 0.0 { -1.0 } else { 1.0 };
        acc[0] += s * q.w;
        acc[1] += s * q.x;
        acc[2] += s * q.y;
        acc[3] += s * q.z;
    }
    let mean_q = Quat {
        w: acc[0],
        x: acc[1],
        y: acc[2],
        z: acc[3],
    }
    .normalized();
    let mean = Pose {
        position,
        orientation: mean_q,
    };

    let mut variance = [0.0; 6];
    for r in records {
        for d in 0..3 {
            let e = r.local_ee.position[d] - position[d];
            variance[d] += e * e / n;
        }
        let w = manifold::log_map(mean_q, r.local_ee.orientation)?;
        for d in 0..3 {
            variance[3 + d] += w[d] * w[d] / n;
        }
    }
    for v in variance.iter_mut() {
        *v = v.max(VARIANCE_FLOOR);
    }
    Ok(Some(BinStats { mean, variance }))
}

fn fill_empty_bins(fitted: Vec<Option<BinStats>>) -> Result<Vec<BinStats>> {
    let bins = fitted.len();
    let mut out = Vec::with_capacity(bins);
    for i in 0..bins {
        if let Some(stats) = &fitted[i] {
            out.push(stats.clone());
            continue;
        }
        let left = (0..i).rev().find(|&j| fitted[j].is_some());
        let right = (i + 1..bins).find(|&j| fitted[j].is_some());
        let stats = match (left, right) {
            (Some(l), Some(r)) => {
                let (a, b) = (fitted[l].as_ref().unwrap(), fitted[r].as_ref().unwrap());
                let t = (i - l) as f64 / (r - l) as f64;
                let mean = manifold::geodesic_interpolate(&a.mean, &b.mean, t)?;
                let mut variance = [0.0; 6];
                for d in 0..6 {
                    variance[d] = (1.0 - t) * a.variance[d] + t * b.variance[d];
                }
                BinStats { mean, variance }
            }
            (Some(l), None) => fitted[l].as_ref().unwrap().clone(),
            (None, Some(r)) => fitted[r].as_ref().unwrap().clone(),
            (None, None) => unreachable!("caller checked for at least one populated bin"),
        };
        out.push(stats);
    }
    Ok(out)
}

/// Reorients a frame so its x-axis points from the frame origin towards the
/// end-effector position. The basis is completed deterministically by
/// projecting world z out of the new x-axis, falling back to world y when the
/// two are parallel. The origin is unchanged.
pub fn orient_frame(f: &Frame, ee: &Pose) -> Result<Frame> {
    let delta = manifold::sub3(ee.position, f.pose.position);
    let dist = manifold::norm3(delta);
    if dist < 1e-12 {
        return Err(Error::DegenerateOrientation);
    }
    let x = manifold::scale3(delta, 1.0 / dist);
    let mut z = project_out([0.0, 0.0, 1.0], x);
    if manifold::norm3(z) < 1e-9 {
        z = project_out([0.0, 1.0, 0.0], x);
    }
    let z = manifold::scale3(z, 1.0 / manifold::norm3(z));
    let y = manifold::cross(z, x);
    Ok(Frame {
        pose: Pose {
            position: f.pose.position,
            orientation: Quat::from_basis(x, y, z),
        },
        id: f.id.clone(),
    })
}

fn project_out(v: [f64; 3], onto: [f64; 3]) -> [f64; 3] {
    let d = v[0] * onto[0] + v[1] * onto[1] + v[2] * onto[2];
    manifold::sub3(v, manifold::scale3(onto, d))
}
