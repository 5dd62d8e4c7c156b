//! On-disk dataset layout and lazy, hash-validated loading.
//!
//! ```text
//! manifest.json
//! frames/demo_{d}/view_{v}.bin   32-byte header, then T frames (HWC, t-major)
//! labels/demo_{d}.csv            t,stage,q0..q3,dq0..dq3,gripper_closed
//! ```
//!
//! Frame file header (little-endian): magic `CLFDFRMS`, `u32` version,
//! `u32` T, H, W, C, `u8` dtype (0 = `u8` scaled by 1/255, 1 = `f32`),
//! three reserved bytes. Datasets from other sources can be loaded by
//! re-encoding them into this layout.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::hash_entry;
use super::scene::{CameraRig, Frame, Stage, NUM_CAMERAS};
use crate::error::{Error, Result};
use crate::models::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::tensor::Scalar;

pub const FORMAT_VERSION: u32 = 1;
pub const FRAME_MAGIC: &[u8; 8] = b"CLFDFRMS";
pub const FRAME_HEADER_LEN: usize = 32;

pub fn frames_path(demo: usize, view: usize) -> String {
    format!("frames/demo_{demo}/view_{view}.bin")
}

pub fn labels_path(demo: usize) -> String {
    format!("labels/demo_{demo}.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFormat {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: Dtype,
}

impl Default for ImageFormat {
    fn default() -> Self {
        ImageFormat {
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
            channels: IMAGE_CHANNELS,
            dtype: Dtype::U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-demo record kept in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoInfo {
    pub frames: usize,
    pub box_xy: [f64; 2],
    pub goal_xy: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub rig: CameraRig,
    pub demo_count: usize,
    pub splits: Splits,
    pub demos: Vec<DemoInfo>,
    pub image: ImageFormat,
    /// SHA-256 over every labels and frames file, in demo then view order.
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn frames(&self, demo: usize) -> usize {
        self.demos[demo].frames
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabel {
    pub t: usize,
    pub stage: Stage,
    pub joints: [f64; 4],
    pub velocities: [f64; 4],
    pub gripper_closed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    t: usize,
    stage: String,
    q0: f64,
    q1: f64,
    q2: f64,
    q3: f64,
    dq0: f64,
    dq1: f64,
    dq2: f64,
    dq3: f64,
    gripper_closed: u8,
}

pub fn encode_labels(labels: &[FrameLabel]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in labels {
        let [q0, q1, q2, q3] = l.joints;
        let [dq0, dq1, dq2, dq3] = l.velocities;
        w.serialize(LabelRow {
            t: l.t,
            stage: l.stage.as_str().to_string(),
            q0,
            q1,
            q2,
            q3,
            dq0,
            dq1,
            dq2,
            dq3,
            gripper_closed: l.gripper_closed as u8,
        })
        .expect("writing to memory cannot fail");
    }
    w.into_inner().expect("writing to memory cannot fail")
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<FrameLabel>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize::<LabelRow>()
        .map(|row| {
            let row = row.map_err(|e| Error::Format(format!("labels: {e}")))?;
            Ok(FrameLabel {
                t: row.t,
                stage: row.stage.parse().map_err(Error::Format)?,
                joints: [row.q0, row.q1, row.q2, row.q3],
                velocities: [row.dq0, row.dq1, row.dq2, row.dq3],
                gripper_closed: row.gripper_closed != 0,
            })
        })
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_frames(frames: &[Frame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frames.len() * super::scene::FRAME_BYTES);
    out.extend_from_slice(FRAME_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, frames.len());
    put_u32(&mut out, IMAGE_SIZE);
    put_u32(&mut out, IMAGE_SIZE);
    put_u32(&mut out, IMAGE_CHANNELS);
    out.push(Dtype::U8.code());
    out.extend_from_slice(&[0, 0, 0]);
    for f in frames {
        out.extend_from_slice(&f.pixels);
    }
    out
}

/// Encode `[0, 1]`-valued HWC frames as an `f32` frame file.
pub fn encode_frames_f32(frames: &[Vec<f32>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FRAME_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, frames.len());
    put_u32(&mut out, IMAGE_SIZE);
    put_u32(&mut out, IMAGE_SIZE);
    put_u32(&mut out, IMAGE_CHANNELS);
    out.push(Dtype::F32.code());
    out.extend_from_slice(&[0, 0, 0]);
    for f in frames {
        f.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

/// Parsed frame file: header fields plus the raw body.
#[derive(Debug)]
pub struct FrameFile {
    pub frames: usize,
    pub dtype: Dtype,
    body: Vec<u8>,
}

const FRAME_VALUES: usize = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;

impl FrameFile {
    pub fn parse(mut bytes: Vec<u8>) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("frame file: {m}"));
        if bytes.len() < FRAME_HEADER_LEN || &bytes[..8] != FRAME_MAGIC {
            return Err(bad("missing header or bad magic".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (version, t, h, w, c) = (u(8), u(12), u(16), u(20), u(24));
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        if (h, w, c) != (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS) {
            return Err(bad(format!("frames are {h}x{w}x{c}, expected {IMAGE_SIZE}x{IMAGE_SIZE}x{IMAGE_CHANNELS}")));
        }
        let dtype = Dtype::from_code(bytes[28]).ok_or_else(|| bad(format!("unknown dtype {}", bytes[28])))?;
        let expected = FRAME_HEADER_LEN + t * FRAME_VALUES * dtype.width();
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for {t} frames, found {} (truncated?)",
                bytes.len()
            )));
        }
        bytes.drain(..FRAME_HEADER_LEN);
        Ok(FrameFile {
            frames: t,
            dtype,
            body: bytes,
        })
    }

    /// Value `i` of frame `t` (HWC index) in `[0, 1]`.
    fn values(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        let w = self.dtype.width();
        let chunk = &self.body[t * FRAME_VALUES * w..(t + 1) * FRAME_VALUES * w];
        let dtype = self.dtype;
        chunk.chunks_exact(w).map(move |c| match dtype {
            Dtype::U8 => c[0] as f64 / 255.0,
            Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
        })
    }
}

/// A dataset directory opened for random frame access.
///
/// Frame files are read on first use and cached; access is safe from many threads.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
    labels: Vec<Vec<FrameLabel>>,
    frames: Vec<OnceLock<FrameFile>>,
}

impl Dataset {
    /// Open and hash-validate the dataset at `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {}",
                manifest.format_version
            )));
        }
        if manifest.rig.cameras.len() != NUM_CAMERAS || manifest.demos.len() != manifest.demo_count {
            return Err(Error::Dataset("manifest camera or demo counts are inconsistent".into()));
        }

        let mut hasher = Sha256::new();
        let mut labels = Vec::with_capacity(manifest.demo_count);
        for d in 0..manifest.demo_count {
            let rel = labels_path(d);
            let bytes = read(&root.join(&rel))?;
            hash_entry(&mut hasher, &rel, &bytes);
            let l = decode_labels(&bytes)?;
            if l.len() != manifest.frames(d) {
                return Err(Error::Dataset(format!(
                    "demo {d}: {} label rows but {} frames",
                    l.len(),
                    manifest.frames(d)
                )));
            }
            labels.push(l);
            for v in 0..NUM_CAMERAS {
                let rel = frames_path(d, v);
                let path = root.join(&rel);
                let mut file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
                hasher.update(rel.as_bytes());
                hasher.update(len.to_le_bytes());
                let mut buf = vec![0u8; 1 << 16];
                loop {
                    let n = file.read(&mut buf).map_err(|e| Error::io(&path, e))?;
                    if n == 0 {
                        break;
                    }
                    hasher.update(&buf[..n]);
                }
            }
        }
        let actual = hex::encode(hasher.finalize());
        if actual != manifest.content_hash {
            return Err(Error::Dataset(format!(
                "content hash mismatch: manifest {}, files {actual}",
                manifest.content_hash
            )));
        }
        let frames = (0..manifest.demo_count * NUM_CAMERAS).map(|_| OnceLock::new()).collect();
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            labels,
            frames,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> &[usize] {
        self.manifest.splits.get(split)
    }

    pub fn labels(&self, demo: usize) -> Result<&[FrameLabel]> {
        self.labels
            .get(demo)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("no demo {demo}")))
    }

    fn file(&self, demo: usize, view: usize, t: usize) -> Result<&FrameFile> {
        let missing = Error::MissingFrame { demo, view, t };
        if demo >= self.manifest.demo_count || view >= NUM_CAMERAS {
            return Err(missing);
        }
        let slot = &self.frames[demo * NUM_CAMERAS + view];
        if slot.get().is_none() {
            let path = self.root.join(frames_path(demo, view));
            let parsed = FrameFile::parse(read(&path)?)?;
            if parsed.frames != self.manifest.frames(demo) {
                return Err(Error::Dataset(format!(
                    "{}: {} frames, manifest says {}",
                    path.display(),
                    parsed.frames,
                    self.manifest.frames(demo)
                )));
            }
            let _ = slot.set(parsed);
        }
        let file = slot.get().expect("slot initialised above");
        if t >= file.frames {
            return Err(missing);
        }
        Ok(file)
    }

    /// Frame `(demo, view, t)` as HWC values in `[0, 1]`.
    pub fn frame(&self, demo: usize, view: usize, t: usize) -> Result<Vec<f32>> {
        Ok(self.file(demo, view, t)?.values(t).map(|v| v as f32).collect())
    }

    /// Append frame `(demo, view, t)` to `out` in CHW order.
    pub fn extend_chw<T: Scalar>(&self, demo: usize, view: usize, t: usize, out: &mut Vec<T>) -> Result<()> {
        let hwc: Vec<f64> = self.file(demo, view, t)?.values(t).collect();
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..IMAGE_CHANNELS {
            out.extend((0..plane).map(|i| T::from_f64(hwc[i * IMAGE_CHANNELS + c])));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
