//! Anchor-positive batch sampling.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::store::{Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::models::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// One anchor-positive pair: the same instant seen by two cameras.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairRef {
    pub demo: usize,
    pub t: usize,
    pub anchor_view: usize,
    pub positive_view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub pairs: Vec<PairRef>,
}

/// Draw `n` pairs with distinct `(demo, t)` from `demos`, viewpoints drawn from `views`.
pub fn sample_contrastive_batch(
    manifest: &DatasetManifest,
    demos: &[usize],
    views: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<ContrastiveBatch> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty split".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if views.len() < 2 {
        return Err(Error::InvalidArgument("need at least two viewpoints to form pairs".into()));
    }
    let available: usize = demos.iter().map(|&d| manifest.frames(d)).sum();
    if n > available {
        return Err(Error::InvalidArgument(format!(
            "batch size {n} exceeds the {available} distinct (demo, t) combinations in the split"
        )));
    }

    let mut instants: Vec<(usize, usize)> = Vec::with_capacity(n);
    if 2 * n > available {
        let mut all: Vec<(usize, usize)> = demos
            .iter()
            .flat_map(|&d| (0..manifest.frames(d)).map(move |t| (d, t)))
            .collect();
        all.shuffle(rng);
        instants.extend_from_slice(&all[..n]);
    } else {
        let mut seen = HashSet::with_capacity(n);
        while instants.len() < n {
            let d = demos[rng.gen_range(0..demos.len())];
            let t = rng.gen_range(0..manifest.frames(d));
            if seen.insert((d, t)) {
                instants.push((d, t));
            }
        }
    }

    let pairs = instants
        .into_iter()
        .map(|(demo, t)| {
            let a = rng.gen_range(0..views.len());
            let mut b = rng.gen_range(0..views.len() - 1);
            if b >= a {
                b += 1;
            }
            PairRef {
                demo,
                t,
                anchor_view: views[a],
                positive_view: views[b],
            }
        })
        .collect();
    Ok(ContrastiveBatch { pairs })
}

impl ContrastiveBatch {
    /// Images `[2N, 3, 64, 64]` with anchor `k` at row `2k` and its positive at `2k + 1`.
    pub fn images<T: Scalar>(&self, dataset: &Dataset) -> Result<Tensor<T>> {
        let per = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::with_capacity(2 * self.pairs.len() * per);
        for p in &self.pairs {
            dataset.extend_chw(p.demo, p.anchor_view, p.t, &mut data)?;
            dataset.extend_chw(p.demo, p.positive_view, p.t, &mut data)?;
        }
        Tensor::new(
            vec![2 * self.pairs.len(), IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            data,
        )
    }
}

/// Frames of one demo from one camera as a `[T, 3, 64, 64]` batch.
pub fn demo_images<T: Scalar>(dataset: &Dataset, demo: usize, view: usize) -> Result<Tensor<T>> {
    let frames = dataset
        .manifest
        .demos
        .get(demo)
        .ok_or_else(|| Error::Dataset(format!("no demo {demo}")))?
        .frames;
    let mut data = Vec::with_capacity(frames * IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    for t in 0..frames {
        dataset.extend_chw(demo, view, t, &mut data)?;
    }
    Tensor::new(vec![frames, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}
