//! Cosine similarity, the NT-Xent contrastive loss and the triplet baseline.
//!
//! Projected vectors are laid out interleaved: rows `2k` and `2k + 1` hold the
//! anchor and positive of pair `k` (0-based). Every other row of the batch
//! acts as a negative.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `a . b / (|a| |b|)`. Zero-norm inputs are rejected.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_sim",
            format!("vector lengths {} and {} differ", a.len(), b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > T::zero() && nb > T::zero()) {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Pairwise cosine similarities of the rows of a `[M, D]` tensor.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<T = f64> {
    size: usize,
    values: Vec<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_rows(z: &Tensor<T>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::shape(
                "similarity_matrix",
                format!("expected [M, D], got {:?}", z.shape()),
            ));
        }
        let size = z.shape()[0];
        let mut values = vec![T::zero(); size * size];
        for i in 0..size {
            for j in i..size {
                let s = cosine_sim(z.row(i), z.row(j))?.max(-T::one()).min(T::one());
                values[i * size + j] = s;
                values[j * size + i] = s;
            }
        }
        Ok(SimilarityMatrix { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.size + j]
    }
}

/// `2N` projected vectors in interleaved anchor/positive order.
#[derive(Clone, Debug)]
pub struct ContrastiveLayout<T = f32> {
    z: Tensor<T>,
}

impl<T: Scalar> ContrastiveLayout<T> {
    pub fn new(z: Tensor<T>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::shape(
                "contrastive_layout",
                format!("expected [2N, D], got {:?}", z.shape()),
            ));
        }
        if z.shape()[0] == 0 || !z.shape()[0].is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "contrastive layout needs a positive even number of vectors, got {}",
                z.shape()[0]
            )));
        }
        Ok(ContrastiveLayout { z })
    }

    /// Interleave equally shaped `[N, D]` anchor and positive rows.
    pub fn from_pairs(anchors: &Tensor<T>, positives: &Tensor<T>) -> Result<Self> {
        if anchors.shape() != positives.shape() || anchors.rank() != 2 {
            return Err(Error::shape(
                "contrastive_layout",
                format!("anchors {:?} vs positives {:?}", anchors.shape(), positives.shape()),
            ));
        }
        let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
        let mut data = Vec::with_capacity(2 * n * d);
        for k in 0..n {
            data.extend_from_slice(anchors.row(k));
            data.extend_from_slice(positives.row(k));
        }
        Self::new(Tensor::new(vec![2 * n, d], data)?)
    }

    pub fn pairs(&self) -> usize {
        self.z.shape()[0] / 2
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.z
    }

    /// Index of the positive partner of row `i`.
    pub fn partner(i: usize) -> usize {
        i ^ 1
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau:?}"
        )))
    }
}

/// Directed pair loss `l(a, p)` over all rows of `z`.
pub fn nt_xent_pair<T: Scalar>(a: usize, p: usize, z: &Tensor<T>, tau: T) -> Result<T> {
    check_tau(tau)?;
    let m = z.shape().first().copied().unwrap_or(0);
    if a == p || a >= m || p >= m {
        return Err(Error::InvalidArgument(format!(
            "pair ({a}, {p}) invalid for {m} vectors"
        )));
    }
    let logits: Vec<T> = (0..m)
        .filter(|&k| k != a)
        .map(|k| cosine_sim(z.row(a), z.row(k)).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let max = logits.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let lse = max + logits.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
    let positive = cosine_sim(z.row(a), z.row(p))? / tau;
    // Rounding can push a degenerate batch a hair below zero.
    Ok((lse - positive).max(T::zero()))
}

/// Mean of the `2N` directed pair losses.
pub fn nt_xent_batch<T: Scalar>(layout: &ContrastiveLayout<T>, tau: T) -> Result<T> {
    let z = layout.vectors();
    Ok(nt_xent_forward(z.data(), z.shape()[0], z.shape()[1], tau)?.loss)
}

pub(crate) struct NtXentForward<T> {
    pub loss: T,
    pub units: Vec<T>,
    pub norms: Vec<T>,
    pub probs: Vec<T>,
}

/// Loss plus the normalized rows and row softmaxes needed for the gradient.
pub(crate) fn nt_xent_forward<T: Scalar>(
    z: &[T],
    rows: usize,
    dim: usize,
    tau: T,
) -> Result<NtXentForward<T>> {
    check_tau(tau)?;
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "NT-Xent needs a positive even number of vectors, got {rows}"
        )));
    }
    let mut units = z.to_vec();
    let mut norms = Vec::with_capacity(rows);
    for (i, row) in units.chunks_mut(dim).enumerate() {
        let n = norm(row);
        if !(n > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "projected vector {i} has zero norm"
            )));
        }
        row.iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    let mut sims = vec![T::zero(); rows * rows];
    T::gemm(false, true, rows, dim, rows, T::one(), &units, &units, T::zero(), &mut sims);

    let mut probs = vec![T::zero(); rows * rows];
    let mut total = T::zero();
    for i in 0..rows {
        let row = &sims[i * rows..(i + 1) * rows];
        // Row max over k != i keeps exp() in range.
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .fold(T::neg_infinity(), |acc, (_, &s)| acc.max(s / tau));
        let mut denom = T::zero();
        for (k, &s) in row.iter().enumerate() {
            if k != i {
                let e = (s / tau - max).exp();
                probs[i * rows + k] = e;
                denom = denom + e;
            }
        }
        let lse = max + denom.ln();
        probs[i * rows..(i + 1) * rows]
            .iter_mut()
            .for_each(|p| *p = *p / denom);
        total = total + lse - row[i ^ 1] / tau;
    }
    Ok(NtXentForward {
        loss: total / T::from_f64(rows as f64),
        units,
        norms,
        probs,
    })
}

pub(crate) fn nt_xent_backward<T: Scalar>(
    units: &[T],
    norms: &[T],
    probs: &[T],
    dim: usize,
    tau: T,
    upstream: T,
) -> Vec<T> {
    let rows = norms.len();
    let scale = upstream / (T::from_f64(rows as f64) * tau);
    // dL/ds for the symmetric similarity matrix: row term plus column term.
    let mut gsym = vec![T::zero(); rows * rows];
    for i in 0..rows {
        for k in 0..rows {
            let mut g = probs[i * rows + k];
            if k == (i ^ 1) {
                g = g - T::one();
            }
            gsym[i * rows + k] = gsym[i * rows + k] + g * scale;
            gsym[k * rows + i] = gsym[k * rows + i] + g * scale;
        }
    }
    let mut du = vec![T::zero(); rows * dim];
    T::gemm(false, false, rows, rows, dim, T::one(), &gsym, units, T::zero(), &mut du);
    let mut dz = Vec::with_capacity(rows * dim);
    for ((u, g), &n) in units.chunks(dim).zip(du.chunks(dim)).zip(norms) {
        let proj = dot(u, g);
        dz.extend(u.iter().zip(g).map(|(&uv, &gv)| (gv - proj * uv) / n));
    }
    dz
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> T {
    let sq = |x: &[T], y: &[T]| {
        x.iter()
            .zip(y)
            .fold(T::zero(), |acc, (&u, &v)| acc + (u - v) * (u - v))
    };
    (sq(anchor, positive) - sq(anchor, negative) + margin).max(T::zero())
}
