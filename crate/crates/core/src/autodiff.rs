//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. `Tape::backward` walks the nodes in reverse,
//! accumulates gradients and then releases the graph; a second call fails.
//!
//! Shape rules:
//! - `linear`: x `[B, in]`, w `[out, in]`, b `[out]` -> `[B, out]`
//! - `conv2d`: x `[B, C, H, W]`, w `[Co, C, k, k]`, b `[Co]` ->
//!   `[B, Co, (H + 2p - k) / s + 1, (W + 2p - k) / s + 1]`
//! - `relu`, `tanh`, `scale`: shape preserving
//! - `global_avg_pool`: `[B, C, H, W]` -> `[B, C]`
//! - `batch_mean`: `[B, ...]` -> `[...]` (a `[B]` input gives a scalar)
//! - `l2_normalize`: `[B, D]` -> `[B, D]`, each row scaled to unit norm
//! - `concat`: `[B, m]`, `[B, n]` -> `[B, m + n]`
//! - `nt_xent`, `triplet`, `cross_entropy`, `mse`, `sum`: -> scalar

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

enum Op<T> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Relu(usize),
    Tanh(usize),
    GlobalAvgPool(usize),
    BatchMean(usize),
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    Concat(usize, usize),
    Scale(usize, T),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    NtXent {
        z: usize,
        tau: T,
        units: Vec<T>,
        norms: Vec<T>,
        probs: Vec<T>,
    },
    Triplet {
        e: usize,
        triples: Vec<(usize, usize, usize)>,
        active: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: usize,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    released: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    inner: RefCell<Inner<T>>,
    record: bool,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    _tape: PhantomData<&'t Tape<T>>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a named parameter; parameters the loss does not reach are absent.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Gradient of any leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id.get(&var.id)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Keep only named gradients whose parameter name starts with `prefix`.
    pub fn retain_prefix(mut self, prefix: &str) -> Self {
        self.by_name.retain(|k, _| k.starts_with(prefix));
        self
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                released: false,
            }),
            record: true,
        }
    }

    /// A tape for forward-only evaluation: ops skip saving backward state.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var {
            _tape: PhantomData,
            id: inner.nodes.len() - 1,
        }
    }

    /// A constant input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient retrievable through [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A named trainable parameter. Registering a name twice accumulates both gradients.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        let var = self.push(value, Op::Leaf, true);
        self.inner.borrow_mut().nodes[var.id].name = Some(name.to_string());
        var
    }

    fn check_live(&self) -> Result<()> {
        if self.inner.borrow().released {
            Err(Error::GraphReleased)
        } else {
            Ok(())
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    pub fn value(&self, var: Var<'_, T>) -> Result<Tensor<T>> {
        self.check_live()?;
        Ok(self.inner.borrow().nodes[var.id].value.clone())
    }

    pub fn shape(&self, var: Var<'_, T>) -> Vec<usize> {
        self.inner.borrow().nodes[var.id].value.shape().to_vec()
    }

    // ---- ops -------------------------------------------------------------

    pub fn linear(
        &self,
        x: Var<'_, T>,
        w: Var<'_, T>,
        b: Option<Var<'_, T>>,
    ) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let (xv, wv) = (&inner.nodes[x.id].value, &inner.nodes[w.id].value);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?} incompatible with weight {:?} (expected [B, in] and [out, in])",
                    xv.shape(),
                    wv.shape()
                ),
            ));
        }
        let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        if let Some(b) = b {
            let bv = &inner.nodes[b.id].value;
            if bv.shape() != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} does not match output width {fan_out}", bv.shape()),
                ));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            false,
            true,
            batch,
            fan_in,
            fan_out,
            T::one(),
            xv.data(),
            wv.data(),
            T::one(),
            &mut out,
        );
        drop(inner);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.needs_grad(&ids);
        Ok(self.push(
            Tensor::new(vec![batch, fan_out], out)?,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn conv2d(
        &self,
        x: Var<'_, T>,
        w: Var<'_, T>,
        b: Option<Var<'_, T>>,
        geom: ConvGeometry,
    ) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let (xv, wv) = (&inner.nodes[x.id].value, &inner.nodes[w.id].value);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expected input [B, C, H, W] and weight [Co, C, k, k], got {:?} and {:?}",
                    xv.shape(),
                    wv.shape()
                ),
            ));
        }
        let [batch, chans, height, width] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [co, ci, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if ci != chans || kh != kw || geom.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels {chans} vs weight channels {ci}, kernel {kh}x{kw}, stride {}",
                    geom.stride
                ),
            ));
        }
        if height + 2 * geom.padding < kh || width + 2 * geom.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("spatial size {height}x{width} smaller than kernel {kh}x{kw}"),
            ));
        }
        let dims = ConvDims {
            batch,
            chans,
            height,
            width,
            k: kh,
            stride: geom.stride,
            pad: geom.padding,
            out_h: (height + 2 * geom.padding - kh) / geom.stride + 1,
            out_w: (width + 2 * geom.padding - kw) / geom.stride + 1,
        };
        let cols = im2col(xv.data(), &dims);
        let (rows, ncols) = (chans * kh * kw, batch * dims.out_h * dims.out_w);
        let mut prod = vec![T::zero(); co * ncols];
        T::gemm(false, false, co, rows, ncols, T::one(), wv.data(), &cols, T::zero(), &mut prod);
        let plane = dims.out_h * dims.out_w;
        let mut out = vec![T::zero(); batch * co * plane];
        let bias = b.map(|b| inner.nodes[b.id].value.data().to_vec());
        if let Some(bias) = &bias {
            if bias.len() != co {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias length {} does not match {co} output channels", bias.len()),
                ));
            }
        }
        for c in 0..co {
            let bc = bias.as_ref().map_or(T::zero(), |bias| bias[c]);
            for n in 0..batch {
                let src = &prod[c * ncols + n * plane..c * ncols + (n + 1) * plane];
                let dst = &mut out[(n * co + c) * plane..(n * co + c + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bc;
                }
            }
        }
        drop(inner);
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.needs_grad(&ids) && self.record;
        Ok(self.push(
            Tensor::new(vec![batch, co, dims.out_h, dims.out_w], out)?,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    fn unary(&self, x: Var<'_, T>, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let value = self.inner.borrow().nodes[x.id].value.map(f);
        let rg = self.needs_grad(&[x.id]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x.id))
    }

    pub fn tanh(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.id))
    }

    pub fn scale(&self, x: Var<'_, T>, c: T) -> Result<Var<'_, T>> {
        self.unary(x, |v| v * c, Op::Scale(x.id, c))
    }

    pub fn global_avg_pool(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let xv = &inner.nodes[x.id].value;
        if xv.rank() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [B, C, H, W], got {:?}", xv.shape()),
            ));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let plane = xv.shape()[2] * xv.shape()[3];
        let inv = T::one() / T::from_f64(plane as f64);
        let out: Vec<T> = xv
            .data()
            .chunks(plane.max(1))
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        drop(inner);
        let rg = self.needs_grad(&[x.id]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x.id), rg))
    }

    pub fn batch_mean(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let xv = &inner.nodes[x.id].value;
        if xv.rank() == 0 || xv.shape()[0] == 0 {
            return Err(Error::shape(
                "batch_mean",
                format!("expected a non-empty leading batch axis, got {:?}", xv.shape()),
            ));
        }
        let b = xv.shape()[0];
        let rest = xv.shape()[1..].to_vec();
        let width = xv.len() / b;
        let inv = T::one() / T::from_f64(b as f64);
        let mut out = vec![T::zero(); width];
        for row in xv.data().chunks(width.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        drop(inner);
        let rg = self.needs_grad(&[x.id]);
        Ok(self.push(Tensor::new(rest, out)?, Op::BatchMean(x.id), rg))
    }

    pub fn l2_normalize(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let xv = &inner.nodes[x.id].value;
        if xv.rank() != 2 {
            return Err(Error::shape(
                "l2_normalize",
                format!("expected [B, D], got {:?}", xv.shape()),
            ));
        }
        let d = xv.shape()[1];
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n <= T::zero() {
                return Err(Error::shape("l2_normalize", "row with zero norm"));
            }
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let shape = xv.shape().to_vec();
        drop(inner);
        let rg = self.needs_grad(&[x.id]);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x: x.id, norms }, rg))
    }

    pub fn concat(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let (av, bv) = (&inner.nodes[a.id].value, &inner.nodes[b.id].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape(
                "concat",
                format!("cannot join {:?} and {:?} along columns", av.shape(), bv.shape()),
            ));
        }
        let (rows, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * m..(r + 1) * m]);
            out.extend_from_slice(&bv.data()[r * n..(r + 1) * n]);
        }
        drop(inner);
        let rg = self.needs_grad(&[a.id, b.id]);
        Ok(self.push(Tensor::new(vec![rows, m + n], out)?, Op::Concat(a.id, b.id), rg))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_, T>,
        b: Var<'_, T>,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let (av, bv) = (&inner.nodes[a.id].value, &inner.nodes[b.id].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!("operands {:?} and {:?} differ", av.shape(), bv.shape()),
            ));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        drop(inner);
        let rg = self.needs_grad(&[a.id, b.id]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn mul(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn sum(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        let s = self.inner.borrow().nodes[x.id]
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        let rg = self.needs_grad(&[x.id]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.id), rg))
    }

    /// NT-Xent batch loss over interleaved anchor/positive rows of `z`.
    pub fn nt_xent(&self, z: Var<'_, T>, tau: T) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let zv = &inner.nodes[z.id].value;
        if zv.rank() != 2 {
            return Err(Error::shape(
                "nt_xent",
                format!("expected [2N, D], got {:?}", zv.shape()),
            ));
        }
        let fwd = crate::losses::nt_xent_forward(zv.data(), zv.shape()[0], zv.shape()[1], tau)?;
        drop(inner);
        let rg = self.needs_grad(&[z.id]);
        Ok(self.push(
            Tensor::scalar(fwd.loss),
            Op::NtXent {
                z: z.id,
                tau,
                units: fwd.units,
                norms: fwd.norms,
                probs: fwd.probs,
            },
            rg,
        ))
    }

    /// Mean hinge triplet loss over `(anchor, positive, negative)` row indices of `e`.
    pub fn triplet(
        &self,
        e: Var<'_, T>,
        triples: &[(usize, usize, usize)],
        margin: T,
    ) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let ev = &inner.nodes[e.id].value;
        if ev.rank() != 2 || triples.is_empty() {
            return Err(Error::shape(
                "triplet",
                format!("expected [M, D] and at least one triple, got {:?}", ev.shape()),
            ));
        }
        let rows = ev.shape()[0];
        if let Some(bad) = triples
            .iter()
            .find(|&&(a, p, n)| a >= rows || p >= rows || n >= rows)
        {
            return Err(Error::shape(
                "triplet",
                format!("triple {bad:?} out of range for {rows} rows"),
            ));
        }
        let mut total = T::zero();
        let mut active = Vec::with_capacity(triples.len());
        for &(a, p, n) in triples {
            let h = crate::losses::triplet_loss(ev.row(a), ev.row(p), ev.row(n), margin);
            active.push(h > T::zero());
            total = total + h;
        }
        let loss = total / T::from_f64(triples.len() as f64);
        drop(inner);
        let rg = self.needs_grad(&[e.id]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                e: e.id,
                triples: triples.to_vec(),
                active,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` `[B, K]` against class indices.
    pub fn cross_entropy(&self, logits: Var<'_, T>, labels: &[usize]) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let lv = &inner.nodes[logits.id].value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || lv.shape()[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.shape()[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom = exps.iter().fold(T::zero(), |a, &v| a + v);
            total = total + denom.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|&e| e / denom));
        }
        let loss = total / T::from_f64(labels.len() as f64);
        drop(inner);
        let rg = self.needs_grad(&[logits.id]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&self, pred: Var<'_, T>, target: &[T]) -> Result<Var<'_, T>> {
        self.check_live()?;
        let inner = self.inner.borrow();
        let pv = &inner.nodes[pred.id].value;
        if pv.len() != target.len() || target.is_empty() {
            return Err(Error::shape(
                "mse",
                format!("prediction {:?} vs target length {}", pv.shape(), target.len()),
            ));
        }
        let total = pv
            .data()
            .iter()
            .zip(target)
            .fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        let loss = total / T::from_f64(target.len() as f64);
        drop(inner);
        let rg = self.needs_grad(&[pred.id]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pred.id,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar `loss` for every reachable parameter and leaf.
    /// Releases the graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.released {
            return Err(Error::GraphReleased);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut nodes = std::mem::take(&mut inner.nodes);
        inner.released = true;
        drop(inner);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&loss_shape, T::one()));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            backprop_node(&nodes, node, &grad, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let grad = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if let Some(name) = node.name.take() {
                match out.by_name.get_mut(&name) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        out.by_name.insert(name, grad.clone());
                    }
                }
            }
            out.by_id.insert(id, grad);
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    contribution: Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let g = grad.data();
    let val = |id: usize| &nodes[id].value;
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            if rg(*x) {
                let mut dx = vec![T::zero(); batch * fan_in];
                T::gemm(false, false, batch, fan_out, fan_in, T::one(), g, wv.data(), T::zero(), &mut dx);
                accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            if rg(*w) {
                let mut dw = vec![T::zero(); fan_out * fan_in];
                T::gemm(true, false, fan_out, batch, fan_in, T::one(), g, xv.data(), T::zero(), &mut dw);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
            if let Some(b) = b.filter(|&b| rg(b)) {
                let mut db = vec![T::zero(); fan_out];
                for row in g.chunks(fan_out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                accumulate(nodes, grads, b, Tensor::new(vec![fan_out], db).unwrap());
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (xv, wv) = (val(*x), val(*w));
            let s = xv.shape();
            let (co, k) = (wv.shape()[0], wv.shape()[2]);
            let out_shape = node.value.shape();
            let dims = ConvDims {
                batch: s[0],
                chans: s[1],
                height: s[2],
                width: s[3],
                k,
                stride: geom.stride,
                pad: geom.padding,
                out_h: out_shape[2],
                out_w: out_shape[3],
            };
            let plane = dims.out_h * dims.out_w;
            let ncols = dims.batch * plane;
            let rows = dims.chans * k * k;
            // Regroup [B, Co, plane] -> [Co, B * plane].
            let mut gmat = vec![T::zero(); co * ncols];
            for n in 0..dims.batch {
                for c in 0..co {
                    let src = &g[(n * co + c) * plane..(n * co + c + 1) * plane];
                    gmat[c * ncols + n * plane..c * ncols + (n + 1) * plane].copy_from_slice(src);
                }
            }
            if rg(*w) {
                let mut dw = vec![T::zero(); co * rows];
                T::gemm(false, true, co, ncols, rows, T::one(), &gmat, cols, T::zero(), &mut dw);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
            }
            if let Some(b) = b.filter(|&b| rg(b)) {
                let db: Vec<T> = gmat
                    .chunks(ncols)
                    .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                accumulate(nodes, grads, b, Tensor::new(vec![co], db).unwrap());
            }
            if rg(*x) {
                let mut dcols = vec![T::zero(); rows * ncols];
                T::gemm(true, false, rows, co, ncols, T::one(), wv.data(), &gmat, T::zero(), &mut dcols);
                let dx = col2im(&dcols, &dims);
                accumulate(nodes, grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
        }
        Op::Relu(x) => {
            let d = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d).unwrap());
        }
        Op::Tanh(x) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * (T::one() - y * y))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d).unwrap());
        }
        Op::Scale(x, c) => {
            let d = g.iter().map(|&gv| gv * *c).collect();
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d).unwrap());
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let plane = s[2] * s[3];
            let inv = T::one() / T::from_f64(plane as f64);
            let mut d = Vec::with_capacity(val(*x).len());
            for &gv in g {
                d.extend(std::iter::repeat_n(gv * inv, plane));
            }
            accumulate(nodes, grads, *x, Tensor::new(s.to_vec(), d).unwrap());
        }
        Op::BatchMean(x) => {
            let s = val(*x).shape();
            let inv = T::one() / T::from_f64(s[0] as f64);
            let mut d = Vec::with_capacity(val(*x).len());
            for _ in 0..s[0] {
                d.extend(g.iter().map(|&gv| gv * inv));
            }
            accumulate(nodes, grads, *x, Tensor::new(s.to_vec(), d).unwrap());
        }
        Op::L2Normalize { x, norms } => {
            let dim = node.value.shape()[1];
            let mut d = Vec::with_capacity(node.value.len());
            for ((y, gr), &n) in node.value.data().chunks(dim).zip(g.chunks(dim)).zip(norms) {
                let dot = y.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                d.extend(y.iter().zip(gr).map(|(&yv, &gv)| (gv - dot * yv) / n));
            }
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), d).unwrap());
        }
        Op::Concat(a, b) => {
            let (m, n) = (val(*a).shape()[1], val(*b).shape()[1]);
            let rows = val(*a).shape()[0];
            let mut da = Vec::with_capacity(rows * m);
            let mut db = Vec::with_capacity(rows * n);
            for row in g.chunks(m + n) {
                da.extend_from_slice(&row[..m]);
                db.extend_from_slice(&row[m..]);
            }
            accumulate(nodes, grads, *a, Tensor::new(vec![rows, m], da).unwrap());
            accumulate(nodes, grads, *b, Tensor::new(vec![rows, n], db).unwrap());
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, grad.clone());
            accumulate(nodes, grads, *b, grad.clone());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = g.iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
            let db = g.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
            accumulate(nodes, grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            accumulate(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g[0]));
        }
        Op::NtXent {
            z,
            tau,
            units,
            norms,
            probs,
        } => {
            let d = crate::losses::nt_xent_backward(units, norms, probs, val(*z).shape()[1], *tau, g[0]);
            accumulate(nodes, grads, *z, Tensor::new(val(*z).shape().to_vec(), d).unwrap());
        }
        Op::Triplet { e, triples, active } => {
            let ev = val(*e);
            let dim = ev.shape()[1];
            let scale = g[0] * T::from_f64(2.0 / triples.len() as f64);
            let mut d = vec![T::zero(); ev.len()];
            for (&(a, p, n), _) in triples.iter().zip(active).filter(|(_, &on)| on) {
                for j in 0..dim {
                    let (av, pv, nv) = (ev.row(a)[j], ev.row(p)[j], ev.row(n)[j]);
                    d[a * dim + j] = d[a * dim + j] + scale * (nv - pv);
                    d[p * dim + j] = d[p * dim + j] - scale * (av - pv);
                    d[n * dim + j] = d[n * dim + j] + scale * (av - nv);
                }
            }
            accumulate(nodes, grads, *e, Tensor::new(ev.shape().to_vec(), d).unwrap());
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = val(*logits).shape()[1];
            let scale = g[0] / T::from_f64(labels.len() as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] = d[i * k + l] - scale;
            }
            accumulate(nodes, grads, *logits, Tensor::new(val(*logits).shape().to_vec(), d).unwrap());
        }
        Op::Mse { pred, target } => {
            let pv = val(*pred);
            let scale = g[0] * T::from_f64(2.0 / target.len() as f64);
            let d = pv.data().iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect();
            accumulate(nodes, grads, *pred, Tensor::new(pv.shape().to_vec(), d).unwrap());
        }
    }
}

struct ConvDims {
    batch: usize,
    chans: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Unfold `[B, C, H, W]` into a `[C * k * k, B * out_h * out_w]` patch matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.out_h * d.out_w;
    let ncols = d.batch * plane;
    let mut cols = vec![T::zero(); d.chans * d.k * d.k * ncols];
    for c in 0..d.chans {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.batch {
                    let src = &x[(n * d.chans + c) * d.height * d.width..][..d.height * d.width];
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                        let dst = &mut dst_row[n * plane + oy * d.out_w..][..d.out_w];
                        if iy < 0 || iy >= d.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * d.width..][..d.width];
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.width as isize {
                                *slot = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.out_h * d.out_w;
    let ncols = d.batch * plane;
    let mut x = vec![T::zero(); d.batch * d.chans * d.height * d.width];
    for c in 0..d.chans {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..d.batch {
                    let dst = &mut x[(n * d.chans + c) * d.height * d.width..][..d.height * d.width];
                    for oy in 0..d.out_h {
                        let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.height as isize {
                            continue;
                        }
                        let src = &src_row[n * plane + oy * d.out_w..][..d.out_w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.width as isize {
                                let slot = &mut dst[iy as usize * d.width + ix as usize];
                                *slot = *slot + v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_zeroes_negatives() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let mut w = vec![0.0; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &w));
        let b = tape.constant(Tensor::zeros(&[3]));
        let geom = ConvGeometry { stride: 1, padding: 0 };
        let y = tape.conv2d(x, w, Some(b), geom).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), data.as_slice());
    }

    #[test]
    fn identity_linear_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("linear") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");

        let img = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let err = tape
            .conv2d(img, k, None, ConvGeometry { stride: 1, padding: 0 })
            .unwrap_err()
            .to_string();
        assert!(err.contains("conv2d"), "{err}");
    }

    #[test]
    fn squared_norm_gradient() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2], &[3.0, 4.0]));
        let sq = tape.mul(z, z).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let p = tape.param("unused", t(&[2], &[1.0, 2.0]));
        let q = tape.param("used", t(&[1], &[3.0]));
        let loss = tape.sum(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("used").unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_weight_gradient_is_input_outer_product() {
        // loss = sum(W x) => dL/dW[o][i] = x[i] for every output row o.
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.5, -2.0, 3.0]));
        let w = tape.param("w", t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.5, -2.0, 3.0, 0.5, -2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_and_releases_graph() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::GraphReleased)));
        assert!(matches!(tape.relu(x), Err(Error::GraphReleased)));
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let tape = Tape::<f64>::new();
        let a = tape.param("p", t(&[1], &[2.0]));
        let b = tape.param("p", t(&[1], &[2.0]));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0]);
    }

    #[test]
    fn inference_tape_records_no_grad_state() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::full(&[1, 2], 1.0));
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
    }
}
