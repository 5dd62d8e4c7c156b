//! Alignment error between synchronized videos and the stage-classification probe.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::sampler::demo_images;
use crate::data::scene::{Stage, NUM_CAMERAS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ContrastiveModel, Mlp, OutputActivation, EMBED_DIM};
use crate::params::{AdamConfig, ParameterSet};
use crate::rng::{substream, Rng};
use crate::tensor::Tensor;

/// Anything that maps `[B, 3, 64, 64]` images to `[B, D]` embeddings.
pub trait Embedder: Sync {
    fn embed(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// The encoder half of a trained (or freshly initialized) contrastive model.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub model: ContrastiveModel,
    pub params: ParameterSet<f32>,
}

impl Encoder {
    pub fn new(params: ParameterSet<f32>) -> Self {
        Encoder {
            model: ContrastiveModel::default(),
            params,
        }
    }

    pub fn random(seed: u64) -> Self {
        let model = ContrastiveModel::default();
        let params = model.init_params(seed);
        Encoder { model, params }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Encoder::new(crate::checkpoint::load::<f32>(path)?.params))
    }
}

/// Where an encoder's weights come from, recorded so downstream runs can rebuild it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    Checkpoint(String),
    /// Untrained weights from this init seed.
    RandomInit(u64),
}

impl EncoderSource {
    pub fn build(&self) -> Result<Encoder> {
        match self {
            EncoderSource::Checkpoint(p) => Encoder::load(Path::new(p)),
            EncoderSource::RandomInit(seed) => Ok(Encoder::random(*seed)),
        }
    }
}

impl Embedder for Encoder {
    fn embed(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.encode(&self.params, images)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<usize> {
    if a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape() || a.shape()[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs two non-empty videos of equal length, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.shape()[0])
}

/// Nearest frame of `b` for each frame of `a`; ties go to the smallest index.
fn nearest(a: &Tensor<f32>, b: &Tensor<f32>, i: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..b.shape()[0] {
        let d = sq_dist(a.row(i), b.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mean normalized temporal offset `(1/T) sum_i |i - j*(i)| / T` between
/// embedded videos, where `j*(i)` is the nearest neighbour of frame `i`.
pub fn alignment_error(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let t = check_pair(a, b)?;
    let total: usize = (0..t).map(|i| nearest(a, b, i).0.abs_diff(i)).sum();
    Ok(total as f64 / (t * t) as f64)
}

/// Mean nearest-neighbour embedding distance `(1/T) sum_i min_j ||a_i - b_j||`.
pub fn nearest_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let t = check_pair(a, b)?;
    Ok((0..t).map(|i| nearest(a, b, i).1.sqrt()).sum::<f64>() / t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoAlignment {
    pub demo: usize,
    /// Mean over ordered viewpoint pairs, as a fraction.
    pub error: f64,
    pub nearest_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub per_demo: Vec<DemoAlignment>,
    pub mean: f64,
    pub mean_nearest_distance: f64,
    pub count: usize,
    pub views: Vec<usize>,
}

impl AlignmentReport {
    pub fn percent(&self) -> f64 {
        self.mean * 100.0
    }
}

/// Embed every frame of `demo` from each camera in `views`.
pub fn embed_demo(enc: &dyn Embedder, dataset: &Dataset, demo: usize, views: &[usize]) -> Result<Vec<Tensor<f32>>> {
    views
        .iter()
        .map(|&v| enc.embed(&demo_images(dataset, demo, v)?))
        .collect()
}

/// Alignment error of each demo averaged over all ordered camera pairs.
pub fn alignment_suite(
    enc: &dyn Embedder,
    dataset: &Dataset,
    demos: &[usize],
    views: &[usize],
) -> Result<AlignmentReport> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("alignment suite needs at least one demo".into()));
    }
    if views.len() < 2 || views.iter().any(|&v| v >= NUM_CAMERAS) {
        return Err(Error::InvalidArgument(format!("need at least two valid cameras, got {views:?}")));
    }
    let per_demo = demos
        .par_iter()
        .map(|&demo| {
            let emb = embed_demo(enc, dataset, demo, views)?;
            let (mut err, mut dist, mut n) = (0.0, 0.0, 0usize);
            for a in 0..emb.len() {
                for b in 0..emb.len() {
                    if a != b {
                        err += alignment_error(&emb[a], &emb[b])?;
                        dist += nearest_distance(&emb[a], &emb[b])?;
                        n += 1;
                    }
                }
            }
            Ok(DemoAlignment {
                demo,
                error: err / n as f64,
                nearest_distance: dist / n as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = per_demo.len();
    let mean = per_demo.iter().map(|d| d.error).sum::<f64>() / count as f64;
    let mean_nearest_distance = per_demo.iter().map(|d| d.nearest_distance).sum::<f64>() / count as f64;
    Ok(AlignmentReport {
        per_demo,
        mean,
        mean_nearest_distance,
        count,
        views: views.to_vec(),
    })
}

/// Write `alignment.csv` (per demo) and `alignment.json` (summary plus `config`).
pub fn write_alignment_report(report: &AlignmentReport, dir: &Path, config: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for d in &report.per_demo {
        w.serialize(d).map_err(|e| Error::Format(e.to_string()))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let csv_path = dir.join("alignment.csv");
    std::fs::write(&csv_path, csv_bytes).map_err(|e| Error::io(&csv_path, e))?;
    let json = serde_json::json!({
        "mean": report.mean,
        "mean_percent": report.percent(),
        "mean_nearest_distance": report.mean_nearest_distance,
        "count": report.count,
        "views": report.views,
        "per_demo": report.per_demo,
        "config": config,
    });
    let json_path = dir.join("alignment.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&json)?).map_err(|e| Error::io(&json_path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageExample {
    pub demo: usize,
    pub view: usize,
    pub t: usize,
    pub label: Stage,
}

/// Class-balanced examples spread evenly over `views`.
///
/// Example `m` of the concatenated class lists goes to `views[m % k]`, so
/// per-camera totals differ by at most one.
pub fn build_stage_dataset(
    dataset: &Dataset,
    demos: &[usize],
    views: &[usize],
    per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<StageExample>> {
    if views.is_empty() || views.iter().any(|&v| v >= NUM_CAMERAS) {
        return Err(Error::InvalidArgument(format!("invalid camera set {views:?}")));
    }
    let k = views.len();
    let mut out = Vec::with_capacity(2 * per_class);
    for (c, stage) in [Stage::Pick, Stage::Place].into_iter().enumerate() {
        let mut candidates = Vec::new();
        for &d in demos {
            for l in dataset.labels(d)? {
                if l.stage == stage {
                    candidates.push((d, l.t));
                }
            }
        }
        for (slot, &view) in views.iter().enumerate() {
            let want = (0..per_class).filter(|j| (c * per_class + j) % k == slot).count();
            if candidates.len() < want {
                return Err(Error::Dataset(format!(
                    "need {want} {} frames from camera {view}, only {} available",
                    stage.as_str(),
                    candidates.len()
                )));
            }
            let mut pool = candidates.clone();
            pool.shuffle(rng);
            out.extend(pool[..want].iter().map(|&(demo, t)| StageExample {
                demo,
                view,
                t,
                label: stage,
            }));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
    /// Permute training labels; the control run should sit at chance.
    pub shuffle_labels: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 500,
            batch_size: 100,
            lr: 1e-3,
            per_class_train: 500,
            per_class_test: 100,
            seed: 1,
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub views_train: Vec<usize>,
    pub views_test: Vec<usize>,
    pub shuffled_labels: bool,
}

fn embed_examples(enc: &dyn Embedder, dataset: &Dataset, examples: &[StageExample]) -> Result<Tensor<f32>> {
    const CHUNK: usize = 64;
    let per = crate::data::scene::FRAME_BYTES;
    let mut rows = Vec::with_capacity(examples.len() * EMBED_DIM);
    let mut dim = EMBED_DIM;
    for chunk in examples.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * per);
        for e in chunk {
            dataset.extend_chw(e.demo, e.view, e.t, &mut data)?;
        }
        let images = Tensor::new(vec![chunk.len(), 3, 64, 64], data)?;
        let emb = enc.embed(&images)?;
        dim = emb.shape()[1];
        rows.extend_from_slice(emb.data());
    }
    Tensor::new(vec![examples.len(), dim], rows)
}

fn accuracy(probe: &Mlp, params: &ParameterSet<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let logits = probe.infer(params, x)?;
    let correct = (0..labels.len())
        .filter(|&i| {
            let r = logits.row(i);
            // Ties predict class 0.
            let pred = usize::from(r[1] > r[0]);
            pred == labels[i]
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Train a 2-layer MLP on frozen embeddings of `views_train` frames from the
/// training demos and report its accuracy on `views_test` frames from the test demos.
pub fn stage_probe_eval(
    enc: &dyn Embedder,
    dataset: &Dataset,
    cfg: &ProbeConfig,
    views_train: &[usize],
    views_test: &[usize],
) -> Result<ProbeReport> {
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.per_class_train == 0 || cfg.per_class_test == 0 {
        return Err(Error::Config("probe sizes must be positive".into()));
    }
    let mut rng = substream(cfg.seed, "probe");
    let train = build_stage_dataset(dataset, &dataset.manifest.splits.train, views_train, cfg.per_class_train, &mut rng)?;
    let test = build_stage_dataset(dataset, &dataset.manifest.splits.test, views_test, cfg.per_class_test, &mut rng)?;
    let x_train = embed_examples(enc, dataset, &train)?;
    let x_test = embed_examples(enc, dataset, &test)?;
    let mut y_train: Vec<usize> = train.iter().map(|e| e.label.index()).collect();
    if cfg.shuffle_labels {
        y_train.shuffle(&mut rng);
    }
    let y_test: Vec<usize> = test.iter().map(|e| e.label.index()).collect();

    let dim = x_train.shape()[1];
    let probe = Mlp::new("probe", &[dim, cfg.hidden, 2], OutputActivation::Identity);
    let mut params = ParameterSet::new();
    probe.init_params(&mut params, &mut rng);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<f32> = batch.iter().flat_map(|&i| x_train.row(i).iter().copied()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![batch.len(), dim], rows)?);
            let logits = probe.forward(&params, &tape, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let grads = tape.backward(loss)?;
            params.adam_step(&grads, &adam)?;
        }
    }
    Ok(ProbeReport {
        accuracy: accuracy(&probe, &params, &x_test, &y_test)?,
        train_accuracy: accuracy(&probe, &params, &x_train, &y_train)?,
        n_train: train.len(),
        n_test: test.len(),
        views_train: views_train.to_vec(),
        views_test: views_test.to_vec(),
        shuffled_labels: cfg.shuffle_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_videos_align_perfectly() {
        let a = video(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 2.0], &[-1.0, 0.5]]);
        assert_eq!(alignment_error(&a, &a).unwrap(), 0.0);
        assert_eq!(nearest_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn reversed_video_of_four_frames_gives_one_half() {
        let a = video(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let b = video(&[&[3.0], &[2.0], &[1.0], &[0.0]]);
        assert_eq!(alignment_error(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn ties_pick_the_smallest_index() {
        let a = video(&[&[0.0], &[5.0]]);
        let b = video(&[&[1.0], &[-1.0]]);
        // Frame 0 is equidistant from both; frame 1 is nearest to b[0].
        assert_eq!(alignment_error(&a, &b).unwrap(), 0.25);
    }

    #[test]
    fn unequal_lengths_are_rejected() {
        let a = video(&[&[0.0], &[1.0]]);
        let b = video(&[&[0.0]]);
        assert!(alignment_error(&a, &b).is_err());
    }

    #[test]
    fn random_embeddings_approach_one_third() {
        use rand::Rng as _;
        let mut rng = substream(4, "t");
        let t = 300;
        let mut total = 0.0;
        for _ in 0..10 {
            let mut draw = || {
                let d: Vec<f32> = (0..t * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(vec![t, 8], d).unwrap()
            };
            total += alignment_error(&draw(), &draw()).unwrap();
        }
        assert!((total / 10.0 - 1.0 / 3.0).abs() < 0.02, "{}", total / 10.0);
    }

    #[test]
    fn nearest_distance_matches_hand_value() {
        let a = video(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let b = video(&[&[0.0, 1.0], &[3.0, 4.0]]);
        assert!((nearest_distance(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }
}
