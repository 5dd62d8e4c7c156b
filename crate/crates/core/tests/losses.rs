//! NT-Xent against a literal loop evaluation of the pair loss, plus its
//! invariances.

use clfd_core::autodiff::Tape;
use clfd_core::losses::{nt_xent_batch, ContrastiveLayout};
use clfd_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAU: f64 = 0.5;
const TOL: f64 = 1e-6;

/// Straight transcription of the pair loss: cosine similarities, the full
/// denominator over every k other than the anchor, and the mean over all 2N
/// directed pairs. No max-shifting, no shared code with the library.
fn oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let pair = |a: usize, p: usize| {
        let num = (sim(&z[a], &z[p]) / tau).exp();
        let mut den = 0.0;
        for k in 0..z.len() {
            if k != a {
                den += (sim(&z[a], &z[k]) / tau).exp();
            }
        }
        -(num / den).ln()
    };
    let n = z.len() / 2;
    let mut total = 0.0;
    for k in 0..n {
        total += pair(2 * k, 2 * k + 1) + pair(2 * k + 1, 2 * k);
    }
    total / (2 * n) as f64
}

fn layout(rows: &[Vec<f64>]) -> ContrastiveLayout<f64> {
    ContrastiveLayout::new(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                break v;
            }
        })
        .collect()
}

#[test]
fn matches_the_literal_oracle_on_1000_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let dim = rng.gen_range(2..=16);
        let rows = random_rows(&mut rng, 2 * n, dim);
        let got = nt_xent_batch(&layout(&rows), TAU).unwrap();
        worst = worst.max((got - oracle(&rows, TAU)).abs());
    }
    assert!(worst < TOL, "worst deviation {worst:e}");
}

#[test]
fn tape_loss_equals_the_batch_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows = random_rows(&mut rng, 8, 8);
    let tape = Tape::<f64>::inference();
    let z = tape.constant(Tensor::from_rows(&rows).unwrap());
    let l = tape.value(tape.nt_xent(z, TAU).unwrap()).unwrap().item();
    assert!((l - oracle(&rows, TAU)).abs() < TOL);
    assert!((l - nt_xent_batch(&layout(&rows), TAU).unwrap()).abs() < TOL);
}

#[test]
fn orthogonal_pairs_beat_the_uniform_value() {
    for n in 2..=6usize {
        let rows: Vec<Vec<f64>> = (0..2 * n)
            .map(|i| (0..n).map(|d| if d == i / 2 { 1.0 } else { 0.0 }).collect())
            .collect();
        let l = nt_xent_batch(&layout(&rows), TAU).unwrap();
        assert!(l < ((2 * n - 1) as f64).ln(), "n={n}: {l}");
        assert!((l - oracle(&rows, TAU)).abs() < TOL);
    }
}

fn layout_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=8, 2usize..=16).prop_flat_map(|(n, dim)| {
        proptest::collection::vec(
            proptest::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| {
                v.iter().map(|x| x * x).sum::<f64>() > 1e-6
            }),
            2 * n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn per_vector_scaling_leaves_the_loss_unchanged(
        rows in layout_strategy(),
        scales in proptest::collection::vec(0.01f64..100.0, 16),
    ) {
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .zip(scales.iter().cycle())
            .map(|(r, s)| r.iter().map(|x| x * s).collect())
            .collect();
        let a = nt_xent_batch(&layout(&rows), TAU).unwrap();
        let b = nt_xent_batch(&layout(&scaled), TAU).unwrap();
        prop_assert!((a - b).abs() < TOL);
    }

    #[test]
    fn permuting_pairs_leaves_the_loss_unchanged(rows in layout_strategy(), seed in any::<u64>()) {
        let n = rows.len() / 2;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = order
            .iter()
            .flat_map(|&k| [rows[2 * k].clone(), rows[2 * k + 1].clone()])
            .collect();
        let a = nt_xent_batch(&layout(&rows), TAU).unwrap();
        let b = nt_xent_batch(&layout(&permuted), TAU).unwrap();
        prop_assert!((a - b).abs() < TOL);
    }

    #[test]
    fn loss_is_finite_and_non_negative(rows in layout_strategy()) {
        let l = nt_xent_batch(&layout(&rows), TAU).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(l.is_finite());
    }
}
