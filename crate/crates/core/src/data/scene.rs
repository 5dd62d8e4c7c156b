//! Scene state, camera rig and the orthographic renderer.

use serde::{Deserialize, Serialize};

use crate::models::{IMAGE_CHANNELS, IMAGE_SIZE};

/// Table-plane workspace bounds (meters).
pub const WORKSPACE_MIN: [f64; 3] = [-0.5, -0.5, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [0.5, 0.5, 0.5];
/// Point the cameras look at.
pub const WORKSPACE_CENTER: [f64; 3] = [0.0, 0.0, 0.25];
/// Gripper start pose.
pub const HOME: [f64; 3] = [0.0, 0.0, 0.35];
/// Height of the box center when resting on the table.
pub const BOX_REST_Z: f64 = 0.05;
pub const BOX_SIZE: f64 = 0.1;
pub const GOAL_SIZE: f64 = 0.14;
pub const GRIPPER_RADIUS: f64 = 0.05;

pub const NUM_CAMERAS: usize = 5;
/// Cameras seen during encoder training in the viewpoint-generalization protocol.
pub const SEEN_VIEWS: [usize; 3] = [0, 1, 2];
pub const UNSEEN_VIEWS: [usize; 2] = [3, 4];

pub type Vec3 = [f64; 3];

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn clamp_to_workspace(p: Vec3) -> Vec3 {
    let mut out = p;
    for i in 0..3 {
        out[i] = out[i].clamp(WORKSPACE_MIN[i], WORKSPACE_MAX[i]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pick,
    Place,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pick => "pick",
            Stage::Place => "place",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stage::Pick => 0,
            Stage::Place => 1,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pick" => Ok(Stage::Pick),
            "place" => Ok(Stage::Place),
            other => Err(format!("unknown stage `{other}` (expected pick or place)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub gripper: Vec3,
    pub box_pos: Vec3,
    /// Center of the goal marker on the table plane (z = 0).
    pub goal: Vec3,
    pub gripper_closed: bool,
    pub holding: bool,
    pub stage: Stage,
}

impl SceneState {
    /// Robot at home, gripper open, box resting at `box_xy`.
    pub fn initial(box_xy: [f64; 2], goal_xy: [f64; 2]) -> Self {
        SceneState {
            gripper: HOME,
            box_pos: [box_xy[0], box_xy[1], BOX_REST_Z],
            goal: [goal_xy[0], goal_xy[1], 0.0],
            gripper_closed: false,
            holding: false,
            stage: Stage::Pick,
        }
    }

    /// Horizontal distance between the box and the goal center.
    pub fn box_goal_distance(&self) -> f64 {
        let (dx, dy) = (self.box_pos[0] - self.goal[0], self.box_pos[1] - self.goal[1]);
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Rotation about the vertical axis (radians).
    pub azimuth: f64,
    /// Downward tilt; 0 looks horizontally, pi/2 straight down (radians).
    pub elevation: f64,
    /// Image widths per meter.
    pub scale: f64,
}

impl Camera {
    pub const IDENTITY: Camera = Camera {
        azimuth: 0.0,
        elevation: 0.0,
        scale: 1.0,
    };

    /// Continuous pixel coordinates `(column, row)` of a world point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        let d = [
            p[0] - WORKSPACE_CENTER[0],
            p[1] - WORKSPACE_CENTER[1],
            p[2] - WORKSPACE_CENTER[2],
        ];
        let (sa, ca) = self.azimuth.sin_cos();
        let x1 = ca * d[0] + sa * d[1];
        let y1 = -sa * d[0] + ca * d[1];
        let (se, ce) = self.elevation.sin_cos();
        let u = x1;
        let v = y1 * se + d[2] * ce;
        let size = IMAGE_SIZE as f64;
        (size / 2.0 + u * self.scale * size, size / 2.0 - v * self.scale * size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl Default for CameraRig {
    /// Right side, front, top, behind and overhead-diagonal viewpoints.
    fn default() -> Self {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
        let cam = |azimuth, elevation| Camera {
            azimuth,
            elevation,
            scale: 0.9,
        };
        CameraRig {
            cameras: vec![
                cam(-FRAC_PI_2, 0.35),
                cam(0.0, 0.5),
                cam(FRAC_PI_2 * 0.5, 1.3),
                cam(PI, 0.6),
                cam(-3.0 * FRAC_PI_4, 1.0),
            ],
        }
    }
}

impl CameraRig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cameras.len() != NUM_CAMERAS {
            return Err(format!(
                "camera rig needs {NUM_CAMERAS} cameras, got {}",
                self.cameras.len()
            ));
        }
        if self
            .cameras
            .iter()
            .any(|c| !(c.scale > 0.0 && c.azimuth.is_finite() && c.elevation.is_finite()))
        {
            return Err("camera parameters must be finite with positive scale".into());
        }
        Ok(())
    }
}

/// Black, so an empty desk is an all-zero image and only objects excite the
/// encoder. On a white desk untrained embeddings start nearly parallel.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];
pub const BOX_COLOR: [u8; 3] = [220, 30, 30];
pub const GOAL_COLOR: [u8; 3] = [40, 180, 60];
pub const GRIPPER_OPEN_COLOR: [u8; 3] = [150, 150, 150];
pub const GRIPPER_CLOSED_COLOR: [u8; 3] = [240, 240, 240];
pub const SHADOW_COLOR: [u8; 3] = [70, 70, 70];

/// A rendered `64 x 64 x 3` RGB frame stored row-major (HWC), one byte per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub pixels: Vec<u8>,
}

pub const FRAME_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;

impl Frame {
    pub fn blank() -> Self {
        let mut pixels = Vec::with_capacity(FRAME_BYTES);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Frame { pixels }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * IMAGE_SIZE + col) * IMAGE_CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn fill(&mut self, covers: impl Fn(f64, f64) -> bool, color: [u8; 3]) {
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                if covers(col as f64 + 0.5, row as f64 + 0.5) {
                    let i = (row * IMAGE_SIZE + col) * IMAGE_CHANNELS;
                    self.pixels[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }

    /// Values in `[0, 1]`, laid out HWC.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Append this frame to `out` in CHW order with values in `[0, 1]`.
    pub fn extend_chw<T: crate::Scalar>(&self, out: &mut Vec<T>) {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..IMAGE_CHANNELS {
            out.extend((0..plane).map(|i| T::from_f64(self.pixels[i * IMAGE_CHANNELS + c] as f64 / 255.0)));
        }
    }
}

/// Orthographic render over a black desk, painted in the order goal,
/// gripper shadow, box, gripper.
///
/// The shadow (the gripper disc dropped onto the table plane) makes gripper
/// height recoverable from a single view.
pub fn render_view(scene: &SceneState, camera: &Camera) -> Frame {
    let mut frame = Frame::blank();
    let px_per_m = camera.scale * IMAGE_SIZE as f64;
    let square = |center: (f64, f64), side: f64| {
        let half = side * px_per_m / 2.0;
        move |x: f64, y: f64| (x - center.0).abs() <= half && (y - center.1).abs() <= half
    };
    let r = GRIPPER_RADIUS * px_per_m;
    let disc = |c: (f64, f64)| move |x: f64, y: f64| (x - c.0) * (x - c.0) + (y - c.1) * (y - c.1) <= r * r;
    frame.fill(square(camera.project(&scene.goal), GOAL_SIZE), GOAL_COLOR);
    let shadow = [scene.gripper[0], scene.gripper[1], 0.0];
    frame.fill(disc(camera.project(&shadow)), SHADOW_COLOR);
    frame.fill(square(camera.project(&scene.box_pos), BOX_SIZE), BOX_COLOR);
    let g = camera.project(&scene.gripper);
    let color = if scene.gripper_closed {
        GRIPPER_CLOSED_COLOR
    } else {
        GRIPPER_OPEN_COLOR
    };
    frame.fill(disc(g), color);
    frame
}
