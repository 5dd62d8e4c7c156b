//! Reverse-mode gradients versus central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator
/// so exactly-zero gradients compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per input (sampled without replacement).
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance,
            max_entries_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub checked: usize,
    /// Input name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compare gradients of the scalar produced by `f` with respect to each named input.
///
/// `f` is evaluated once on a recording tape and twice per checked entry on
/// inference tapes.
pub fn grad_check<F>(
    inputs: &[(&str, Tensor<f64>)],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|(name, t)| tape.param(name, t.clone()))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        worst: None,
    };
    for (slot, ((name, _), var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .wrt(*var)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?
            .clone();
        let n = analytic.len();
        let entries: Vec<usize> = match cfg.max_entries_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in entries {
            let orig = values[slot].data()[idx];
            values[slot].data_mut()[idx] = orig + cfg.step;
            let plus = eval(&values)?;
            values[slot].data_mut()[idx] = orig - cfg.step;
            let minus = eval(&values)?;
            values[slot].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    report.pass = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

/// [`grad_check`] for functions that read their weights from a parameter set
/// by name, such as model forward passes. Every parameter is checked.
pub fn grad_check_params<F>(params: &ParameterSet<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &ParameterSet<f64>) -> Result<Var<'t, f64>>,
{
    let eval = |p: &ParameterSet<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let out = f(&tape, p)?;
        Ok(tape.value(out)?.item())
    };

    let tape = Tape::new();
    let out = f(&tape, params)?;
    let grads = tape.backward(out)?;

    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        worst: None,
    };
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?
            .clone();
        let n = analytic.len();
        let entries: Vec<usize> = match cfg.max_entries_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in entries {
            let slot = |w: &mut ParameterSet<f64>, v: f64| {
                w.get_mut(name).expect("name taken from the set").data_mut()[idx] = v;
            };
            let orig = params.expect(name)?.data()[idx];
            slot(&mut work, orig + cfg.step);
            let plus = eval(&work)?;
            slot(&mut work, orig - cfg.step);
            let minus = eval(&work)?;
            slot(&mut work, orig);
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.pass = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let ok = grad_check(
            &[("x", x.clone())],
            |tape, v| {
                let y = tape.tanh(v[0])?;
                tape.sum(y)
            },
            &GradCheckConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(ok.pass, "{ok:?}");
        assert_eq!(ok.checked, 3);

        // Reading x[0] as a constant hides its dependence from the tape.
        let bad = grad_check(
            &[("x", x)],
            |tape, v| {
                let c = tape.value(v[0])?.data()[0];
                let y = tape.scale(v[0], c)?;
                tape.sum(y)
            },
            &GradCheckConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(!bad.pass);
    }
}
