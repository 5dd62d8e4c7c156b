//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    first: Tensor<T>,
    second: Tensor<T>,
}

/// Parameters keyed by path (e.g. `encoder.conv1.weight`) with Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
    moments: BTreeMap<String, Moments<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.moments.insert(
            name.clone(),
            Moments {
                first: Tensor::zeros(value.shape()),
                second: Tensor::zeros(value.shape()),
            },
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Register a parameter on `tape` under its own name.
    pub fn var<'t>(&self, tape: &'t Tape<T>, name: &str) -> Result<Var<'t, T>> {
        Ok(tape.param(name, self.expect(name)?.clone()))
    }

    /// Adam moments of a parameter, as `(first, second)`.
    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|m| (&m.first, &m.second))
    }

    pub(crate) fn set_optimizer_state(
        &mut self,
        name: &str,
        first: Tensor<T>,
        second: Tensor<T>,
    ) -> Result<()> {
        let param = self.expect(name)?;
        if first.shape() != param.shape() || second.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer state shape mismatch for `{name}`"
            )));
        }
        self.moments
            .insert(name.to_string(), Moments { first, second });
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads.iter() {
            let param = self.params.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("gradient for unknown parameter `{name}`"))
            })?;
            if g.shape() != param.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} vs parameter {:?} for `{name}`", g.shape(), param.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
        let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
        for (name, param) in self.params.iter_mut() {
            let m = self.moments.get_mut(name).expect("moments exist for every parameter");
            let grad = grads.get(name);
            let n = param.len();
            for i in 0..n {
                let g = grad.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.first.data()[i] + one_b1 * g;
                let vi = b2 * m.second.data()[i] + one_b2 * g * g;
                m.first.data_mut()[i] = mi;
                m.second.data_mut()[i] = vi;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                param.data_mut()[i] = param.data()[i] - update;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Copy of the parameters at another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), t.cast());
        }
        out
    }

    /// `self = rate * source + (1 - rate) * self` for every shared parameter.
    pub fn soft_update_from(&mut self, source: &ParameterSet<T>, rate: f64) -> Result<()> {
        let rate = T::from_f64(rate);
        for (name, target) in self.params.iter_mut() {
            let src = source.expect(name)?;
            if src.shape() != target.shape() {
                return Err(Error::shape(
                    "soft_update",
                    format!("`{name}`: {:?} vs {:?}", src.shape(), target.shape()),
                ));
            }
            for (t, &s) in target.data_mut().iter_mut().zip(src.data()) {
                *t = rate * s + (T::one() - rate) * *t;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    fn grad_of(p: &ParameterSet<f64>, g: f64) -> Gradients<f64> {
        // d/dx (g * x) = g
        let tape = Tape::new();
        let x = p.var(&tape, "x").unwrap();
        let c = tape.constant(Tensor::new(vec![1], vec![g]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_identical() {
        let mut p = scalar_set(0.123456789);
        let before = p.get("x").unwrap().clone();
        let g = grad_of(&p, 0.0);
        p.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap(), &before);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_set(1.0);
        let g = grad_of(&p, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        p.adam_step(&g, &cfg).unwrap();
        // m_hat = 1, v_hat = 1 => delta = lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_positive_gradient_decreases_monotonically() {
        let mut p = scalar_set(1.0);
        let mut last = 1.0;
        for _ in 0..2 {
            let g = grad_of(&p, 1.0);
            p.adam_step(&g, &AdamConfig::default()).unwrap();
            let now = p.get("x").unwrap().item();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(1.0);
        let g = grad_of(&p, f64::NAN);
        match p.adam_step(&g, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn moments_track_parameter_shapes() {
        let mut p = ParameterSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[3, 2]));
        let (m, v) = p.moments("w").unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(v.shape(), &[3, 2]);
    }

    #[test]
    fn soft_update_endpoints() {
        let online = scalar_set(5.0);
        let mut target = scalar_set(1.0);
        target.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(target.get("x").unwrap().item(), 1.0);
        target.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(target.get("x").unwrap().item(), 5.0);
    }
}
