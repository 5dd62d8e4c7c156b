//! Kinematic pick-and-place MDP observed through a frozen frame encoder.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::generate::joint_angles;
use crate::data::sampler::demo_images;
use crate::data::scene::{
    distance, render_view, Camera, SceneState, Stage, BOX_REST_Z, WORKSPACE_MAX, WORKSPACE_MIN,
};
use crate::data::store::DemoInfo;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Embedder;
use crate::models::EMBED_DIM;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Embedding, 4 joint angles, 4 joint velocities, gripper flag.
pub const STATE_DIM: usize = EMBED_DIM + 9;
/// Four joint velocities and the gripper command.
pub const ACTION_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNorm {
    L2,
    L1,
}

/// `-||current - goal||`.
pub fn compute_reward(current: &[f32], goal: &[f32], norm: RewardNorm) -> Result<f64> {
    if current.len() != goal.len() {
        return Err(Error::shape(
            "compute_reward",
            format!("embedding dims differ: {} vs {}", current.len(), goal.len()),
        ));
    }
    let diffs = current.iter().zip(goal).map(|(&a, &b)| a as f64 - b as f64);
    Ok(match norm {
        RewardNorm::L2 => -diffs.map(|d| d * d).sum::<f64>().sqrt(),
        RewardNorm::L1 => -diffs.map(f64::abs).sum::<f64>(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub stage: Stage,
    /// Camera whose view feeds the encoder.
    pub camera: usize,
    /// Largest per-step joint displacement.
    pub v_max: f64,
    pub grasp_radius: f64,
    pub place_tolerance: f64,
    pub step_limit: usize,
    /// Box and goal are placed uniformly within this distance (per axis) of
    /// the guiding demonstration's placement.
    pub jitter: f64,
    /// Percentile of consecutive-frame embedding distances in the guiding
    /// demo used as the success threshold. The default 100 takes the largest
    /// step, so any state one demo step from the goal counts. That matters
    /// for pick: its goal frame shows the open gripper beside the box, the
    /// grasp is one of the largest steps, and a tighter threshold never ends
    /// an episode on success.
    pub threshold_percentile: f64,
    /// Overrides the calibrated threshold.
    pub success_threshold: Option<f64>,
    pub norm: RewardNorm,
    /// Guiding demonstration; defaults to the first test demo.
    pub guide_demo: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            stage: Stage::Pick,
            camera: 1,
            v_max: 0.05,
            grasp_radius: 0.03,
            place_tolerance: 0.02,
            step_limit: 100,
            jitter: 0.02,
            threshold_percentile: 100.0,
            success_threshold: None,
            norm: RewardNorm::L2,
            guide_demo: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.camera < crate::data::scene::NUM_CAMERAS
            && self.v_max > 0.0
            && self.grasp_radius > 0.0
            && self.place_tolerance > 0.0
            && self.step_limit >= 1
            && self.jitter >= 0.0
            && (0.0..=100.0).contains(&self.threshold_percentile)
            && self.success_threshold.is_none_or(|t| t >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid environment config: {self:?}")))
        }
    }
}

/// Last frame of `stage` in `demo`, embedded from `camera`.
pub fn select_goal(enc: &dyn Embedder, dataset: &Dataset, demo: usize, stage: Stage, camera: usize) -> Result<Vec<f32>> {
    let t = dataset
        .labels(demo)?
        .iter()
        .rev()
        .find(|l| l.stage == stage)
        .map(|l| l.t)
        .ok_or_else(|| Error::Env(format!("demo {demo} has no {} frames", stage.as_str())))?;
    let mut data = Vec::new();
    dataset.extend_chw(demo, camera, t, &mut data)?;
    let emb = enc.embed(&Tensor::new(vec![1, 3, 64, 64], data)?)?;
    Ok(emb.data().to_vec())
}

/// `p`-th percentile (linear interpolation) of distances between consecutive
/// frame embeddings of `demo` seen from `camera`.
pub fn calibrate_threshold(enc: &dyn Embedder, dataset: &Dataset, demo: usize, camera: usize, p: f64) -> Result<f64> {
    let emb = enc.embed(&demo_images(dataset, demo, camera)?)?;
    let mut d: Vec<f64> = (1..emb.shape()[0])
        .map(|t| -compute_reward(emb.row(t), emb.row(t - 1), RewardNorm::L2).unwrap())
        .collect();
    if d.is_empty() {
        return Err(Error::Env("need at least two frames to calibrate".into()));
    }
    d.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(d[lo] + (d[hi] - d[lo]) * (pos - lo as f64))
}

/// Everything fixed for one stage task: guiding demo, goal embedding, threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub stage: Stage,
    pub guide_demo: usize,
    pub guide: DemoInfo,
    pub goal: Vec<f32>,
    pub threshold: f64,
}

impl Task {
    pub fn from_dataset(enc: &dyn Embedder, dataset: &Dataset, cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let test = &dataset.manifest.splits.test;
        let guide_demo = match cfg.guide_demo {
            Some(d) => d,
            None => *test.first().ok_or_else(|| Error::Env("test split is empty".into()))?,
        };
        if !test.contains(&guide_demo) {
            return Err(Error::Env(format!("guiding demo {guide_demo} is not in the test split")));
        }
        let goal = select_goal(enc, dataset, guide_demo, cfg.stage, cfg.camera)?;
        let threshold = match cfg.success_threshold {
            Some(t) => t,
            None => calibrate_threshold(enc, dataset, guide_demo, cfg.camera, cfg.threshold_percentile)?,
        };
        Ok(Task {
            stage: cfg.stage,
            guide_demo,
            guide: dataset.manifest.demos[guide_demo].clone(),
            goal,
            threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub embedding: Vec<f32>,
    pub joints: [f64; 4],
    pub velocities: [f64; 4],
    pub gripper_closed: bool,
}

impl MdpState {
    /// Network input: velocities are divided by `v_max` to share the joints' scale.
    pub fn features(&self, v_max: f64) -> Vec<f32> {
        let mut f = self.embedding.clone();
        f.extend(self.joints.iter().map(|&q| q as f32));
        f.extend(self.velocities.iter().map(|&v| (v / v_max) as f32));
        f.push(self.gripper_closed as u8 as f32);
        f
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: MdpState,
    pub reward: f64,
    pub done: bool,
    /// Embedding and geometric criteria both met; the episode terminates.
    pub success: bool,
    /// Geometric stage predicate alone.
    pub achieved: bool,
}

pub struct Env<'a> {
    pub cfg: EnvConfig,
    pub task: Task,
    encoder: &'a dyn Embedder,
    camera: Camera,
    scene: SceneState,
    state: MdpState,
    steps: usize,
    done: bool,
}

impl<'a> Env<'a> {
    pub fn new(cfg: EnvConfig, task: Task, encoder: &'a dyn Embedder, camera: Camera) -> Result<Self> {
        cfg.validate()?;
        let scene = SceneState::initial(task.guide.box_xy, task.guide.goal_xy);
        Ok(Env {
            cfg,
            task,
            encoder,
            camera,
            state: MdpState {
                embedding: vec![0.0; EMBED_DIM],
                joints: joint_angles(&scene),
                velocities: [0.0; 4],
                gripper_closed: false,
            },
            scene,
            steps: 0,
            done: true,
        })
    }

    /// Convenience constructor using the dataset's camera rig.
    pub fn from_dataset(cfg: EnvConfig, enc: &'a dyn Embedder, dataset: &Dataset) -> Result<Self> {
        let task = Task::from_dataset(enc, dataset, &cfg)?;
        let camera = dataset.manifest.rig.cameras[cfg.camera];
        Env::new(cfg, task, enc, camera)
    }

    pub fn scene(&self) -> &SceneState {
        &self.scene
    }

    pub fn state(&self) -> &MdpState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn observe(&self) -> Result<Vec<f32>> {
        let mut data = Vec::new();
        render_view(&self.scene, &self.camera).extend_chw(&mut data);
        Ok(self.encoder.embed(&Tensor::new(vec![1, 3, 64, 64], data)?)?.into_data())
    }

    /// Jittered placement around the guiding demo; robot at home for pick,
    /// holding the box at its start pose for place.
    pub fn reset(&mut self, seed: u64) -> Result<MdpState> {
        let mut rng = substream(seed, "env/reset");
        let j = self.cfg.jitter;
        let mut jitter = |p: [f64; 2]| {
            let mut d = || if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
            [p[0] + d(), p[1] + d()]
        };
        let box_xy = jitter(self.task.guide.box_xy);
        let goal_xy = jitter(self.task.guide.goal_xy);
        let mut scene = SceneState::initial(box_xy, goal_xy);
        if self.cfg.stage == Stage::Place {
            scene.gripper = scene.box_pos;
            scene.gripper_closed = true;
            scene.holding = true;
            scene.stage = Stage::Place;
        }
        self.scene = scene;
        self.steps = 0;
        self.done = false;
        self.state = MdpState {
            embedding: self.observe()?,
            joints: joint_angles(&self.scene),
            velocities: [0.0; 4],
            gripper_closed: self.scene.gripper_closed,
        };
        Ok(self.state.clone())
    }

    pub fn geometric_success(&self) -> bool {
        match self.cfg.stage {
            Stage::Pick => self.scene.holding,
            Stage::Place => {
                !self.scene.holding && self.scene.box_goal_distance() <= self.cfg.place_tolerance
            }
        }
    }

    /// Apply `[dq0, dq1, dq2, dq3, grip]`. Joint commands are clamped to
    /// `v_max` (the finger joint follows the gripper, so `dq3` has no effect);
    /// `grip > 0` closes, `grip < 0` opens, `0` keeps the current state.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode; call reset first".into()));
        }
        if action.len() != ACTION_DIM || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env(format!("action must be {ACTION_DIM} finite values, got {action:?}")));
        }
        let v = self.cfg.v_max;
        let s = &mut self.scene;
        for i in 0..3 {
            let lo = if i == 2 { BOX_REST_Z } else { WORKSPACE_MIN[i] };
            s.gripper[i] = (s.gripper[i] + action[i].clamp(-v, v)).clamp(lo, WORKSPACE_MAX[i]);
        }
        let grip = action[4].clamp(-1.0, 1.0);
        if grip > 0.0 {
            if !s.holding && distance(&s.gripper, &s.box_pos) <= self.cfg.grasp_radius {
                s.holding = true;
                s.stage = Stage::Place;
            }
            s.gripper_closed = true;
        } else if grip < 0.0 {
            if s.holding {
                s.holding = false;
                s.box_pos = [s.gripper[0], s.gripper[1], BOX_REST_Z];
            }
            s.gripper_closed = false;
        }
        if s.holding {
            s.box_pos = s.gripper;
        }
        self.steps += 1;

        let joints = joint_angles(&self.scene);
        let prev = self.state.joints;
        self.state = MdpState {
            embedding: self.observe()?,
            joints,
            velocities: std::array::from_fn(|i| joints[i] - prev[i]),
            gripper_closed: self.scene.gripper_closed,
        };
        let reward = compute_reward(&self.state.embedding, &self.task.goal, self.cfg.norm)?;
        let achieved = self.geometric_success();
        let success = achieved && -reward <= self.task.threshold;
        self.done = success || self.steps >= self.cfg.step_limit;
        Ok(StepOutcome {
            state: self.state.clone(),
            reward,
            done: self.done,
            success,
            achieved,
        })
    }
}

/// Scripted controller: head for the box (or the goal) at full speed, then close (or open).
pub fn oracle_action(env: &Env<'_>) -> [f64; ACTION_DIM] {
    let s = env.scene();
    let target = match env.cfg.stage {
        Stage::Pick => s.box_pos,
        Stage::Place => [s.goal[0], s.goal[1], BOX_REST_Z],
    };
    let v = env.cfg.v_max;
    let mut a = [0.0; ACTION_DIM];
    for i in 0..3 {
        a[i] = (target[i] - s.gripper[i]).clamp(-v, v);
    }
    let arrived = distance(&s.gripper, &target) <= env.cfg.grasp_radius.min(env.cfg.place_tolerance) / 2.0;
    a[4] = match (env.cfg.stage, arrived) {
        (Stage::Pick, true) => 1.0,
        (Stage::Place, true) => -1.0,
        (Stage::Pick, false) => -1.0,
        (Stage::Place, false) => 1.0,
    };
    a
}
