//! Reverse-mode gradients of every layer, loss and the full encoder stack
//! against central finite differences at 64-bit precision.

use clfd_core::autodiff::{ConvGeometry, Tape};
use clfd_core::gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
use clfd_core::models::ContrastiveModel;
use clfd_core::models::FrameEncoder;
use clfd_core::params::ParameterSet;
use clfd_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
/// Inputs feeding a relu are pushed at least this far from the kink.
const KINK_MARGIN: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_kink(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < KINK_MARGIN { v.signum() * KINK_MARGIN + v } else { v })
}

fn assert_pass(what: &str, r: GradCheckReport) {
    assert!(r.pass, "{what}: max rel error {:.3e} at {:?}", r.max_rel_error, r.worst);
    assert!(r.checked > 0, "{what}: nothing checked");
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig::with_tolerance(TOL)
}

/// A fixed random weighting so every output entry matters to the scalar.
fn weighted_sum<'t>(
    tape: &'t clfd_core::autodiff::Tape<f64>,
    y: clfd_core::autodiff::Var<'t, f64>,
    seed: u64,
) -> clfd_core::error::Result<clfd_core::autodiff::Var<'t, f64>> {
    let w = tape.constant(random(&tape.shape(y), seed));
    tape.sum(tape.mul(y, w)?)
}

#[test]
fn linear() {
    let r = grad_check(
        &[("x", random(&[3, 5], 1)), ("w", random(&[4, 5], 2)), ("b", random(&[4], 3))],
        |t, v| weighted_sum(t, t.linear(v[0], v[1], Some(v[2]))?, 4),
        &cfg(),
    )
    .unwrap();
    assert_pass("linear", r);
}

#[test]
fn conv2d_strided_and_padded() {
    let geom = ConvGeometry { stride: 2, padding: 1 };
    let r = grad_check(
        &[("x", random(&[2, 3, 7, 7], 5)), ("w", random(&[4, 3, 3, 3], 6)), ("b", random(&[4], 7))],
        |t, v| weighted_sum(t, t.conv2d(v[0], v[1], Some(v[2]), geom)?, 8),
        &cfg(),
    )
    .unwrap();
    assert_pass("conv2d", r);
}

#[test]
fn relu() {
    let r = grad_check(
        &[("x", away_from_kink(random(&[4, 6], 9)))],
        |t, v| weighted_sum(t, t.relu(v[0])?, 10),
        &cfg(),
    )
    .unwrap();
    assert_pass("relu", r);
}

#[test]
fn tanh_and_scale() {
    let r = grad_check(
        &[("x", random(&[3, 4], 11))],
        |t, v| weighted_sum(t, t.scale(t.tanh(v[0])?, 1.7)?, 12),
        &cfg(),
    )
    .unwrap();
    assert_pass("tanh/scale", r);
}

#[test]
fn global_avg_pool() {
    let r = grad_check(
        &[("x", random(&[2, 3, 4, 5], 13))],
        |t, v| weighted_sum(t, t.global_avg_pool(v[0])?, 14),
        &cfg(),
    )
    .unwrap();
    assert_pass("global_avg_pool", r);
}

#[test]
fn batch_mean() {
    let r = grad_check(
        &[("x", random(&[5, 3], 15))],
        |t, v| weighted_sum(t, t.batch_mean(v[0])?, 16),
        &cfg(),
    )
    .unwrap();
    assert_pass("batch_mean", r);
}

#[test]
fn l2_normalize() {
    let r = grad_check(
        &[("x", random(&[4, 6], 17))],
        |t, v| weighted_sum(t, t.l2_normalize(v[0])?, 18),
        &cfg(),
    )
    .unwrap();
    assert_pass("l2_normalize", r);
}

#[test]
fn concat_add_mul() {
    let r = grad_check(
        &[("a", random(&[3, 2], 19)), ("b", random(&[3, 4], 20)), ("c", random(&[3, 6], 21))],
        |t, v| {
            let ab = t.concat(v[0], v[1])?;
            let y = t.mul(t.add(ab, v[2])?, v[2])?;
            weighted_sum(t, y, 22)
        },
        &cfg(),
    )
    .unwrap();
    assert_pass("concat/add/mul", r);
}

#[test]
fn nt_xent() {
    let r = grad_check(&[("z", random(&[8, 5], 23))], |t, v| t.nt_xent(v[0], 0.5), &cfg()).unwrap();
    assert_pass("nt_xent", r);
}

#[test]
fn triplet() {
    // Margin chosen so every hinge is active or inactive by a wide gap.
    let e = Tensor::new(
        vec![4, 2],
        vec![0.0, 0.0, 0.1, 0.05, 1.0, 0.2, 0.12, -0.02],
    )
    .unwrap();
    let triples = [(0, 1, 2), (1, 0, 3), (2, 1, 3)];
    let r = grad_check(&[("e", e)], |t, v| t.triplet(v[0], &triples, 0.2), &cfg()).unwrap();
    assert_pass("triplet", r);
}

#[test]
fn cross_entropy() {
    let r = grad_check(
        &[("logits", random(&[5, 3], 24))],
        |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0]),
        &cfg(),
    )
    .unwrap();
    assert_pass("cross_entropy", r);
}

#[test]
fn mse() {
    let r = grad_check(
        &[("y", random(&[4, 1], 25))],
        |t, v| t.mse(v[0], &[0.3, -0.1, 0.8, 0.0]),
        &cfg(),
    )
    .unwrap();
    assert_pass("mse", r);
}

/// Images made of `cells x cells` flat colored blocks. Few distinct patches
/// means few distinct relu inputs, so a draw clear of every kink is findable.
/// Zero padding still makes border activations differ from the interior.
fn blocky_images(n: usize, cells: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 64 / cells;
    let mut data = Vec::with_capacity(n * 3 * 64 * 64);
    for _ in 0..n {
        let colors: Vec<f64> = (0..3 * cells * cells).map(|_| rng.gen_range(0.0..1.0)).collect();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    data.push(colors[(c * cells + y / side) * cells + x / side]);
                }
            }
        }
    }
    Tensor::new(vec![n, 3, 64, 64], data).unwrap()
}

/// Smallest `|relu input|` anywhere in the encoder and head, evaluated layer
/// by layer from the parameter names.
fn closest_kink(params: &ParameterSet<f64>, images: &Tensor<f64>) -> f64 {
    let tape = Tape::inference();
    let mut h = tape.constant(images.clone());
    let mut closest = f64::INFINITY;
    let mut track = |v: &Tensor<f64>| {
        closest = v.data().iter().fold(closest, |m, x| m.min(x.abs()));
    };
    for name in ["conv1", "conv2", "conv3"] {
        let w = params.var(&tape, &format!("encoder.{name}.weight")).unwrap();
        let b = params.var(&tape, &format!("encoder.{name}.bias")).unwrap();
        let pre = tape.conv2d(h, w, Some(b), ConvGeometry { stride: 2, padding: 1 }).unwrap();
        track(&tape.value(pre).unwrap());
        h = tape.relu(pre).unwrap();
    }
    let pooled = tape.global_avg_pool(h).unwrap();
    let fc = |x, layer: &str| {
        let w = params.var(&tape, &format!("{layer}.weight")).unwrap();
        let b = params.var(&tape, &format!("{layer}.bias")).unwrap();
        tape.linear(x, w, Some(b)).unwrap()
    };
    let e = fc(pooled, "encoder.fc");
    let hidden = params.names().find(|n| n.starts_with("head.") && n.ends_with(".weight")).unwrap();
    let hidden = hidden.trim_end_matches(".weight").to_string();
    let pre = fc(e, &hidden);
    track(&tape.value(pre).unwrap());
    closest
}

#[test]
fn encoder_head_and_nt_xent_on_four_pairs() {
    let model = ContrastiveModel::default();
    // Non-zero biases exercise their gradients too. Draws with any relu
    // input closer than the margin to its kink are rejected.
    let (params, images) = (0..500u64)
        .map(|draw| {
            let mut params = model.init_params::<f64>(draw);
            let names: Vec<String> = params.names().filter(|n| n.ends_with("bias")).map(String::from).collect();
            for (i, name) in names.iter().enumerate() {
                let b = params.get_mut(name).unwrap();
                *b = random(b.shape(), 1000 * draw + i as u64).map(|v| 0.05 * v);
            }
            (params, blocky_images(8, 1, draw))
        })
        .find(|(p, x)| closest_kink(p, x) >= KINK_MARGIN)
        .expect("a kink-free draw");
    let check = GradCheckConfig {
        max_entries_per_input: Some(24),
        ..cfg()
    };
    let r = grad_check_params(
        &params,
        |t, p| {
            let x = t.constant(images.clone());
            let h = model.encoder.forward(p, t, x)?;
            let z = model.head.forward(p, t, h)?;
            t.nt_xent(z, 0.5)
        },
        &check,
    )
    .unwrap();
    let expected: usize = params.iter().map(|(_, t)| t.len().min(24)).sum();
    assert_eq!(r.checked, expected);
    assert_pass("encoder + head + nt_xent", r);
}
