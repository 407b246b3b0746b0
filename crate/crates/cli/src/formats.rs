//! On-disk formats: line-delimited demo and trajectory records, binary
//! checkpoints, the stream manifest, and CSV tables. All writes go through a
//! temp-file-plus-rename so partially written outputs never appear.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msg_core::compose::Rollout;
use msg_core::flowmatch::FlowModel;
use msg_core::streams::Demonstration;
use serde::{Deserialize, Serialize};

/// Writes atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// One episode per line, JSON-encoded.
pub fn write_demos(path: &Path, demos: &[Demonstration]) -> Result<()> {
    let mut out = Vec::new();
    for demo in demos {
        serde_json::to_writer(&mut out, demo)?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Reads a demo file; episodes without split indices derive them from
/// gripper threshold crossings at 0.5.
pub fn read_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading demos {}", path.display()))?;
    let mut demos = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut demo: Demonstration = serde_json::from_str(line)
            .with_context(|| format!("demo record on line {}", i + 1))?;
        if demo.skill_splits.is_empty() {
            demo.skill_splits = msg_core::streams::segment_by_gripper(&demo, 0.5);
        }
        demo.validate()
            .map_err(|e| anyhow::anyhow!("invalid demo on line {}: {e}", i + 1))?;
        demos.push(demo);
    }
    if demos.is_empty() {
        bail!("no demonstrations in {}", path.display());
    }
    Ok(demos)
}

pub fn save_checkpoint(path: &Path, model: &FlowModel) -> Result<()> {
    atomic_write(path, &model.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    FlowModel::from_bytes(&bytes)
        .map_err(|e| anyhow::anyhow!("loading checkpoint {}: {e}", path.display()))
}

/// Maps trained streams to their checkpoint files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub seed: u64,
    pub demos: usize,
    pub streams: Vec<ManifestStream>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestStream {
    pub skill: usize,
    pub frame_id: String,
    pub file: PathBuf,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// File-system-safe checkpoint name for a stream.
pub fn checkpoint_name(skill: usize, frame_id: &str) -> String {
    let safe: String = frame_id
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    format!("skill{skill}_{safe}.ckpt")
}

/// Accumulates CSV lines with deterministic float formatting.
#[derive(Debug, Default)]
pub struct Csv {
    lines: Vec<String>,
}

impl Csv {
    pub fn new(header: &str) -> Csv {
        Csv {
            lines: vec![header.to_string()],
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.lines.push(fields.join(","));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }
}

/// One trajectory record per rollout step, JSON-encoded, one rollout per call.
#[derive(Debug, Serialize)]
struct TrajStepRecord<'a> {
    episode: usize,
    step: usize,
    skill: usize,
    pose: &'a msg_core::manifold::Pose,
    progress: f64,
    weights: Vec<Vec<f64>>,
}

pub fn write_trajectories(path: &Path, rollouts: &[Rollout], tangent_dim: usize) -> Result<()> {
    let mut out = Vec::new();
    for (episode, rollout) in rollouts.iter().enumerate() {
        for s in &rollout.steps {
            let rec = TrajStepRecord {
                episode,
                step: s.step,
                skill: s.skill,
                pose: &s.pose,
                progress: s.progress,
                weights: s
                    .weights
                    .iter()
                    .map(|w| w[..tangent_dim.min(6)].to_vec())
                    .collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    atomic_write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use msg_core::manifold::{Pose, Quat};
    use msg_core::streams::DemoStep;
    use std::collections::BTreeMap as StdBTreeMap;

    #[test]
    fn demo_round_trip_and_gripper_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        let mut frames = alloc_frames();
        frames.insert("obj".into(), Pose::from_xy_yaw(1.0, 0.5, 0.3));
        let demo = Demonstration {
            steps: (0..6)
                .map(|i| DemoStep {
                    ee: Pose::new([i as f64 * 0.1, 0.0, 0.0], Quat::IDENTITY),
                    gripper: if i < 3 { 1.0 } else { 0.0 },
                })
                .collect(),
            frames,
            skill_splits: vec![3],
        };
        write_demos(&path, std::slice::from_ref(&demo)).unwrap();
        let back = read_demos(&path).unwrap();
        assert_eq!(back, vec![demo.clone()]);

        // Drop the splits: loading derives them from the gripper.
        let mut unsplit = demo;
        unsplit.skill_splits.clear();
        write_demos(&path, std::slice::from_ref(&unsplit)).unwrap();
        let back = read_demos(&path).unwrap();
        assert_eq!(back[0].skill_splits, vec![3]);
    }

    fn alloc_frames() -> std::collections::BTreeMap<String, Pose> {
        StdBTreeMap::new()
    }

    #[test]
    fn pose_serialization_is_seven_scalars() {
        let p = Pose::from_xy_yaw(1.0, 2.0, 0.5);
        let json = serde_json::to_string(&p).unwrap();
        let v: Vec<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 2.0);
        assert_eq!(v[3], p.orientation.w);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        atomic_write(&path, b"hello").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"hello");
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }
}
