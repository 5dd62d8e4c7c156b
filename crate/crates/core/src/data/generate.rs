//! Scripted pick-and-place demonstrations and dataset generation.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{
    render_view, CameraRig, Frame, SceneState, Stage, BOX_REST_Z, HOME, NUM_CAMERAS,
};
use super::store::{
    encode_frames, encode_labels, frames_path, labels_path, DatasetManifest, DemoInfo, FrameLabel,
    ImageFormat, Splits, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// Gripper finger angle (radians) when open; closed is 0.
pub const FINGER_OPEN: f64 = 0.6;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    /// Box and goal are drawn uniformly in `[-extent, extent]^2`.
    pub extent: f64,
    /// Horizontal reach of the arm from the base at the origin.
    pub reach: f64,
    pub min_separation: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            extent: 0.38,
            reach: 0.45,
            min_separation: 0.2,
        }
    }
}

impl PlacementConfig {
    pub fn is_valid(&self, box_xy: [f64; 2], goal_xy: [f64; 2]) -> bool {
        let norm = |p: [f64; 2]| (p[0] * p[0] + p[1] * p[1]).sqrt();
        let sep = ((box_xy[0] - goal_xy[0]).powi(2) + (box_xy[1] - goal_xy[1]).powi(2)).sqrt();
        norm(box_xy) <= self.reach && norm(goal_xy) <= self.reach && sep >= self.min_separation
    }

    /// Rejection-sample a reachable, well-separated placement.
    pub fn sample(&self, rng: &mut Rng) -> Result<([f64; 2], [f64; 2])> {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let mut draw = || [rng.gen_range(-self.extent..=self.extent), rng.gen_range(-self.extent..=self.extent)];
            let (b, g) = (draw(), draw());
            if self.is_valid(b, g) {
                return Ok((b, g));
            }
        }
        Err(Error::Dataset(format!(
            "no reachable box/goal placement after {MAX_PLACEMENT_TRIES} attempts"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub demos: usize,
    pub frames_per_demo: usize,
    pub rig: CameraRig,
    pub placement: PlacementConfig,
    /// Train/val/test sizes; defaults to a 2/3, 1/6, 1/6 split.
    pub splits: Option<[usize; 3]>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            demos: 150,
            frames_per_demo: 40,
            rig: CameraRig::default(),
            placement: PlacementConfig::default(),
            splits: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos < 1 {
            return Err(Error::Config("demos must be at least 1".into()));
        }
        if self.frames_per_demo < 4 {
            return Err(Error::Config("frames_per_demo must be at least 4".into()));
        }
        self.rig.validate().map_err(Error::Config)?;
        if let Some(s) = self.splits {
            if s.iter().sum::<usize>() != self.demos {
                return Err(Error::Config(format!(
                    "split sizes {s:?} do not add up to {} demos",
                    self.demos
                )));
            }
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        self.splits.unwrap_or_else(|| {
            let held_out = (self.demos as f64 / 6.0).round() as usize;
            let held_out = held_out.min(self.demos.saturating_sub(1) / 2);
            [self.demos - 2 * held_out, held_out, held_out]
        })
    }
}

/// One generated demonstration held in memory.
#[derive(Clone, Debug)]
pub struct Demo {
    pub scenes: Vec<SceneState>,
    pub labels: Vec<FrameLabel>,
    /// `views[v][t]`.
    pub views: Vec<Vec<Frame>>,
}

/// Frames at which the gripper reaches the box and the goal.
pub fn key_frames(frames: usize) -> (usize, usize) {
    let last = frames as f64 - 1.0;
    let reach_box = ((0.35 * last).round() as usize).clamp(1, frames - 3);
    let grasp = reach_box + 1;
    let release = ((0.8 * last).round() as usize).clamp(grasp + 1, frames - 1);
    (reach_box, release)
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn lerp(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

/// Scripted policy: approach the box, close, carry to the goal, open, lift away.
pub fn script_trajectory(box_xy: [f64; 2], goal_xy: [f64; 2], frames: usize) -> Vec<SceneState> {
    let (reach_box, release) = key_frames(frames);
    let grasp = reach_box + 1;
    let start = SceneState::initial(box_xy, goal_xy);
    let box_pose = start.box_pos;
    let place_pose = [goal_xy[0], goal_xy[1], BOX_REST_Z];
    let retreat_pose = [goal_xy[0], goal_xy[1], HOME[2]];
    (0..frames)
        .map(|t| {
            let mut s = start.clone();
            if t <= reach_box {
                s.gripper = lerp(&HOME, &box_pose, smoothstep(t as f64 / reach_box as f64));
            } else if t < release {
                let span = (release - grasp) as f64;
                s.gripper = lerp(&box_pose, &place_pose, smoothstep((t - grasp) as f64 / span));
                s.gripper_closed = true;
                s.holding = true;
                s.box_pos = s.gripper;
            } else {
                let span = (frames - 1 - release) as f64;
                let s_up = if span > 0.0 { (t - release) as f64 / span } else { 0.0 };
                s.gripper = lerp(&place_pose, &retreat_pose, smoothstep(s_up));
                s.box_pos = place_pose;
            }
            s.stage = if t >= grasp { Stage::Place } else { Stage::Pick };
            s
        })
        .collect()
}

/// Joint angles of the 4-joint abstraction: gripper position plus finger angle.
pub fn joint_angles(s: &SceneState) -> [f64; 4] {
    let finger = if s.gripper_closed { 0.0 } else { FINGER_OPEN };
    [s.gripper[0], s.gripper[1], s.gripper[2], finger]
}

pub fn labels_for(scenes: &[SceneState]) -> Vec<FrameLabel> {
    let mut prev: Option<[f64; 4]> = None;
    scenes
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let q = joint_angles(s);
            let dq = match prev {
                Some(p) => [q[0] - p[0], q[1] - p[1], q[2] - p[2], q[3] - p[3]],
                None => [0.0; 4],
            };
            prev = Some(q);
            FrameLabel {
                t,
                stage: s.stage,
                joints: q,
                velocities: dq,
                gripper_closed: s.gripper_closed,
            }
        })
        .collect()
}

/// Generate demonstration `index` of a dataset; independent of every other demo.
pub fn generate_demo(seed: u64, index: usize, cfg: &GeneratorConfig) -> Result<(Demo, DemoInfo)> {
    let mut rng = substream(seed, &format!("data/demo/{index}"));
    let (box_xy, goal_xy) = cfg.placement.sample(&mut rng)?;
    let scenes = script_trajectory(box_xy, goal_xy, cfg.frames_per_demo);
    let labels = labels_for(&scenes);
    let views = cfg
        .rig
        .cameras
        .iter()
        .map(|cam| scenes.iter().map(|s| render_view(s, cam)).collect())
        .collect();
    let info = DemoInfo {
        frames: cfg.frames_per_demo,
        box_xy,
        goal_xy,
    };
    Ok((Demo { scenes, labels, views }, info))
}

/// Write a complete dataset under `out`. Byte-identical for equal `(seed, cfg)`.
pub fn generate_dataset(out: &Path, seed: u64, cfg: &GeneratorConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let demos: Vec<(Demo, DemoInfo)> = (0..cfg.demos)
        .into_par_iter()
        .map(|d| generate_demo(seed, d, cfg))
        .collect::<Result<_>>()?;

    let mut hasher = Sha256::new();
    let mut infos = Vec::with_capacity(demos.len());
    for (d, (demo, info)) in demos.iter().enumerate() {
        let labels = encode_labels(&demo.labels);
        write_file(&out.join(labels_path(d)), &labels)?;
        hash_entry(&mut hasher, &labels_path(d), &labels);
        for (v, frames) in demo.views.iter().enumerate() {
            let bytes = encode_frames(frames);
            write_file(&out.join(frames_path(d, v)), &bytes)?;
            hash_entry(&mut hasher, &frames_path(d, v), &bytes);
        }
        infos.push(info.clone());
    }
    let [train, val, test] = cfg.split_sizes();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed,
        rig: cfg.rig.clone(),
        demo_count: cfg.demos,
        splits: Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        },
        demos: infos,
        image: ImageFormat::default(),
        content_hash: hex::encode(hasher.finalize()),
    };
    debug_assert_eq!(manifest.rig.cameras.len(), NUM_CAMERAS);
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&out.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub(crate) fn hash_entry(hasher: &mut Sha256, rel: &str, bytes: &[u8]) {
    hasher.update(rel.as_bytes());
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::distance;

    #[test]
    fn scripted_demo_postconditions() {
        let cfg = GeneratorConfig::default();
        for d in 0..20 {
            let (demo, _) = generate_demo(7, d, &cfg).unwrap();
            let last = demo.scenes.last().unwrap();
            assert!(!last.holding);
            assert!(last.box_goal_distance() <= 0.02);
            let transitions = demo.labels.windows(2).filter(|w| w[0].stage != w[1].stage).count();
            assert_eq!(transitions, 1);
            assert_eq!(demo.labels[0].stage, Stage::Pick);
            let mut grasped = false;
            for s in &demo.scenes {
                grasped |= s.holding;
                assert_eq!(s.stage == Stage::Place, grasped);
                if s.holding {
                    assert_eq!(s.box_pos, s.gripper);
                }
            }
            assert!(demo.views.iter().all(|v| v.len() == cfg.frames_per_demo));
        }
    }

    #[test]
    fn shortest_demo_still_completes_the_task() {
        let traj = script_trajectory([0.2, 0.1], [-0.2, -0.1], 4);
        assert_eq!(traj.len(), 4);
        assert_eq!(traj[2].stage, Stage::Place);
        assert!(traj[2].holding);
        assert!(!traj[3].holding);
        assert!(traj[3].box_goal_distance() < 1e-12);
    }

    #[test]
    fn velocities_are_frame_differences() {
        let (demo, _) = generate_demo(3, 0, &GeneratorConfig::default()).unwrap();
        for w in demo.labels.windows(2) {
            for j in 0..4 {
                assert!((w[1].velocities[j] - (w[1].joints[j] - w[0].joints[j])).abs() < 1e-15);
            }
        }
        assert_eq!(demo.labels[0].velocities, [0.0; 4]);
    }

    #[test]
    fn placements_respect_constraints() {
        let p = PlacementConfig::default();
        let mut rng = substream(1, "t");
        for _ in 0..200 {
            let (b, g) = p.sample(&mut rng).unwrap();
            assert!(p.is_valid(b, g));
            let b3 = [b[0], b[1], 0.0];
            let g3 = [g[0], g[1], 0.0];
            assert!(distance(&b3, &g3) >= p.min_separation);
        }
    }

    #[test]
    fn impossible_placement_errors_after_bounded_retries() {
        let p = PlacementConfig {
            min_separation: 5.0,
            ..Default::default()
        };
        assert!(matches!(p.sample(&mut substream(1, "t")), Err(Error::Dataset(_))));
    }

    #[test]
    fn default_split_is_100_25_25() {
        assert_eq!(GeneratorConfig::default().split_sizes(), [100, 25, 25]);
        let small = GeneratorConfig {
            demos: 1,
            ..Default::default()
        };
        assert_eq!(small.split_sizes(), [1, 0, 0]);
    }
}
