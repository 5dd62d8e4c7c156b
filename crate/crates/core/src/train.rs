//! The contrastive training loop, its triplet baseline, checkpoints and resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::scene::NUM_CAMERAS;
use crate::data::{sample_contrastive_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{alignment_suite, Encoder};
use crate::models::{ContrastiveModel, FrameEncoder};
use crate::params::{AdamConfig, ParameterSet};
use crate::rng::{substream, Rng, RngState};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
const LOSS_HISTORY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ntxent,
    Triplet,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ntxent" => Ok(Objective::Ntxent),
            "triplet" => Ok(Objective::Triplet),
            other => Err(format!("unknown objective `{other}` (expected ntxent or triplet)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub adam: AdamConfig,
    pub validation_every: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Triplet margin.
    pub margin: f64,
    /// Train the triplet baseline through the projection head instead of on
    /// L2-normalized encoder embeddings.
    pub triplet_use_head: bool,
    /// Cameras that pairs (and validation) draw from.
    pub views: Vec<usize>,
    /// Pairs drawn per epoch; defaults to one per training demonstration.
    pub pairs_per_epoch: Option<usize>,
    /// Record elapsed seconds in the metrics log; off gives byte-reproducible logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Ntxent,
            batch_size: 32,
            epochs: 200,
            tau: 0.5,
            adam: AdamConfig::default(),
            validation_every: 25,
            seed: 1,
            dataset: PathBuf::from("data"),
            margin: 0.2,
            triplet_use_head: false,
            views: (0..NUM_CAMERAS).collect(),
            pairs_per_epoch: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau must be positive");
        }
        if self.validation_every < 1 {
            return fail("validation_every must be at least 1");
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam needs lr >= 0, betas in [0, 1) and eps > 0");
        }
        if !(self.margin >= 0.0) {
            return fail("margin must be non-negative");
        }
        if self.objective == Objective::Triplet && self.batch_size < 2 {
            return fail("the triplet objective needs batch_size >= 2 for in-batch negatives");
        }
        let mut v = self.views.clone();
        v.sort_unstable();
        v.dedup();
        if v.len() != self.views.len() || v.len() < 2 || v.iter().any(|&c| c >= NUM_CAMERAS) {
            return fail("views must be at least two distinct camera indices below 5");
        }
        if self.pairs_per_epoch == Some(0) {
            return fail("pairs_per_epoch must be positive");
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, train_demos: usize) -> usize {
        let pairs = self.pairs_per_epoch.unwrap_or(train_demos);
        pairs.div_ceil(self.batch_size).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_alignment_error: Option<f64>,
    pub wall_time_s: f64,
}

/// State carried in `last.ckpt` so a run can continue exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunState {
    kind: String,
    config: TrainConfig,
    epoch: usize,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    dataset_hash: String,
    batch_rng: RngState,
    negatives_rng: RngState,
    metrics: Vec<MetricsRow>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet<f32>,
    pub metrics: Vec<MetricsRow>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

struct Run<'a> {
    cfg: TrainConfig,
    dataset: &'a Dataset,
    model: ContrastiveModel,
    params: ParameterSet<f32>,
    best: Option<ParameterSet<f32>>,
    state: RunState,
    batch_rng: Rng,
    negatives_rng: Rng,
    out: PathBuf,
    started: Instant,
    time_offset: f64,
}

/// Run contrastive (or triplet) training, writing checkpoints and `metrics.csv` into `out`.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    train_on(cfg, &dataset, out)
}

/// As [`train`] with an already opened dataset (`cfg.dataset` is only recorded).
pub fn train_on(cfg: &TrainConfig, dataset: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.manifest.splits.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let model = ContrastiveModel::default();
    let params = model.init_params::<f32>(cfg.seed);
    let batch_rng = substream(cfg.seed, "batch");
    let negatives_rng = substream(cfg.seed, "negatives");
    let state = RunState {
        kind: "contrastive".into(),
        config: cfg.clone(),
        epoch: 0,
        best_val: None,
        best_epoch: None,
        dataset_hash: dataset.manifest.content_hash.clone(),
        batch_rng: RngState::capture(&batch_rng),
        negatives_rng: RngState::capture(&negatives_rng),
        metrics: Vec::new(),
    };
    let mut run = Run {
        cfg: cfg.clone(),
        dataset,
        model,
        params,
        best: None,
        state,
        batch_rng,
        negatives_rng,
        out: out.to_path_buf(),
        started: Instant::now(),
        time_offset: 0.0,
    };
    run.continue_to(cfg.epochs)
}

/// Continue the run whose `last.ckpt` is at `checkpoint` for `extra_epochs`
/// more epochs, writing outputs next to it. `dataset` overrides the recorded path.
pub fn resume(checkpoint: &Path, extra_epochs: usize, dataset: Option<&Path>) -> Result<TrainOutcome> {
    let ck = checkpoint::load::<f32>(checkpoint)?;
    let state: RunState = serde_json::from_value(ck.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
    let path = dataset.map(Path::to_path_buf).unwrap_or_else(|| state.config.dataset.clone());
    let ds = Dataset::open(&path)?;
    resume_on(checkpoint, extra_epochs, &ds)
}

/// As [`resume`] with an already opened dataset.
pub fn resume_on(checkpoint: &Path, extra_epochs: usize, dataset: &Dataset) -> Result<TrainOutcome> {
    let ck = checkpoint::load::<f32>(checkpoint)?;
    if !ck.has_optimizer_state {
        return Err(Error::Checkpoint("checkpoint has no optimizer state; pass the run's last.ckpt".into()));
    }
    let mut state: RunState = serde_json::from_value(ck.metadata)
        .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
    if state.kind != "contrastive" {
        return Err(Error::Checkpoint(format!("expected a contrastive run, found `{}`", state.kind)));
    }
    if state.dataset_hash != dataset.manifest.content_hash {
        return Err(Error::Config(format!(
            "dataset mismatch: checkpoint trained on {}, given {}",
            state.dataset_hash, dataset.manifest.content_hash
        )));
    }
    let out = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
    let best = match state.best_val {
        Some(_) => Some(checkpoint::load::<f32>(&out.join(BEST_CHECKPOINT))?.params),
        None => None,
    };
    let target = state.epoch + extra_epochs;
    state.config.epochs = target;
    let time_offset = state.metrics.last().map_or(0.0, |m| m.wall_time_s);
    let mut run = Run {
        cfg: state.config.clone(),
        dataset,
        model: ContrastiveModel::default(),
        params: ck.params,
        best,
        batch_rng: state.batch_rng.restore()?,
        negatives_rng: state.negatives_rng.restore()?,
        state,
        out,
        started: Instant::now(),
        time_offset,
    };
    run.continue_to(target)
}

impl Run<'_> {
    fn continue_to(&mut self, target: usize) -> Result<TrainOutcome> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let batches = self.cfg.batches_per_epoch(self.dataset.manifest.splits.train.len());
        let mut history: Vec<f64> = Vec::new();
        while self.state.epoch < target {
            let epoch = self.state.epoch + 1;
            let mut total = 0.0;
            for batch in 0..batches {
                let loss = self.step()?;
                history.push(loss);
                if history.len() > LOSS_HISTORY {
                    history.remove(0);
                }
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch,
                        loss,
                        history,
                    });
                }
                total += loss;
            }
            let val = if epoch.is_multiple_of(self.cfg.validation_every) {
                Some(self.validate()?)
            } else {
                None
            };
            if let Some(v) = val {
                if self.state.best_val.is_none_or(|b| v < b) {
                    self.state.best_val = Some(v);
                    self.state.best_epoch = Some(epoch);
                    self.best = Some(self.params.clone());
                    self.save_best(epoch, v)?;
                }
            }
            let wall = if self.cfg.record_wall_time {
                self.time_offset + self.started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            self.state.metrics.push(MetricsRow {
                epoch,
                train_loss: total / batches as f64,
                val_alignment_error: val,
                wall_time_s: wall,
            });
            self.state.epoch = epoch;
            log::info!(
                "epoch {epoch}: loss {:.4}{}",
                total / batches as f64,
                val.map(|v| format!(", val alignment {:.2}%", v * 100.0)).unwrap_or_default()
            );
        }
        self.state.batch_rng = RngState::capture(&self.batch_rng);
        self.state.negatives_rng = RngState::capture(&self.negatives_rng);
        let last = self.out.join(LAST_CHECKPOINT);
        checkpoint::save(&last, &self.params, &serde_json::to_value(&self.state)?, true)?;
        write_metrics(&self.out.join(METRICS_FILE), &self.state.metrics)?;
        Ok(TrainOutcome {
            params: self.params.clone(),
            metrics: self.state.metrics.clone(),
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            last_checkpoint: last,
            best_checkpoint: self.best.as_ref().map(|_| self.out.join(BEST_CHECKPOINT)),
        })
    }

    fn step(&mut self) -> Result<f64> {
        let m = &self.dataset.manifest;
        let batch = sample_contrastive_batch(m, &m.splits.train, &self.cfg.views, self.cfg.batch_size, &mut self.batch_rng)?;
        let images = batch.images::<f32>(self.dataset)?;
        let tape = Tape::new();
        let x = tape.constant(images);
        let h = self.model.encoder.forward(&self.params, &tape, x)?;
        let loss = match self.cfg.objective {
            Objective::Ntxent => {
                let z = self.model.head.forward(&self.params, &tape, h)?;
                tape.nt_xent(z, self.cfg.tau as f32)?
            }
            Objective::Triplet => {
                let e = if self.cfg.triplet_use_head {
                    self.model.head.forward(&self.params, &tape, h)?
                } else {
                    tape.l2_normalize(h)?
                };
                let triples = in_batch_triples(batch.pairs.len(), &mut self.negatives_rng);
                tape.triplet(e, &triples, self.cfg.margin as f32)?
            }
        };
        let value = tape.value(loss)?.item() as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        self.params.adam_step(&grads, &self.cfg.adam)?;
        Ok(value)
    }

    fn validate(&self) -> Result<f64> {
        let enc = Encoder {
            model: self.model.clone(),
            params: self.params.clone(),
        };
        let split = &self.dataset.manifest.splits.val;
        let demos = if split.is_empty() { &self.dataset.manifest.splits.train } else { split };
        Ok(alignment_suite(&enc, self.dataset, demos, &self.cfg.views)?.mean)
    }

    fn save_best(&self, epoch: usize, val: f64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "contrastive-best",
            "config": self.cfg,
            "epoch": epoch,
            "val_alignment_error": val,
            "dataset_hash": self.state.dataset_hash,
        });
        checkpoint::save(&self.out.join(BEST_CHECKPOINT), &self.params, &meta, false)
    }
}

/// Anchor `2k`, positive `2k + 1`, negative a uniformly drawn row of another pair.
pub fn in_batch_triples(pairs: usize, rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    (0..pairs)
        .map(|k| {
            let mut n = rng.gen_range(0..2 * (pairs - 1));
            if n >= 2 * k {
                n += 2;
            }
            (2 * k, 2 * k + 1, n)
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.views = vec![1]));
        assert!(bad(|c| c.views = vec![1, 1]));
        assert!(bad(|c| c.views = vec![0, 5]));
        assert!(bad(|c| {
            c.objective = Objective::Triplet;
            c.batch_size = 1
        }));
    }

    #[test]
    fn batches_per_epoch_rounds_up() {
        let c = TrainConfig::default();
        assert_eq!(c.batches_per_epoch(100), 4);
        assert_eq!(c.batches_per_epoch(64), 2);
        assert_eq!(c.batches_per_epoch(1), 1);
    }

    #[test]
    fn triples_use_negatives_from_other_pairs() {
        let mut rng = substream(1, "t");
        for _ in 0..200 {
            for (a, p, n) in in_batch_triples(5, &mut rng) {
                assert_eq!(p, a + 1);
                assert!(n < 10 && n != a && n != p);
            }
        }
    }
}
