//! Autograd against central differences, per primitive and for the whole
//! first-stage graph.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmoe::gradcheck::stage1_gradcheck;
use rsmoe::tensor::grad_pairs;
use rsmoe::{Graph, Result, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
/// Central differences at `H` carry roughly 1e-11 of roundoff, so smaller
/// gradients are compared absolutely.
const FLOOR: f64 = 1e-9;

/// Largest `|a - n| / (TOL * max(|a|, |n|) + FLOOR)`; below 1 passes.
fn worst<F>(f: F, x: &Tensor) -> f64
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_pairs(f, x, H)
        .unwrap()
        .into_iter()
        .map(|(a, n)| (a - n).abs() / (TOL * a.abs().max(n.abs()) + FLOOR))
        .fold(0.0, f64::max)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// `sum(y * w)` for a fixed random `w`, so every output entry carries a
/// distinct weight.
fn project(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(x: &Tensor, seed: u64, op: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    worst(
        |g, v| {
            let y = op(g, v)?;
            project(g, y, seed ^ 0x5eed)
        },
        x,
    )
}

macro_rules! small {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err < 1.0, "error {err:.3} tolerances");
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn matmul_both_sides(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let bb = b.clone();
        small!(check(&a, seed, |g, x| { let c = g.constant(bb.clone()); g.matmul(x, c) }));
        let aa = a.clone();
        small!(check(&b, seed, |g, x| { let c = g.constant(aa.clone()); g.matmul(c, x) }));
        let bt = random(&[n, k], &mut rng);
        small!(check(&a, seed, |g, x| { let c = g.constant(bt.clone()); g.matmul_nt(x, c) }));
    }

    #[test]
    fn elementwise_and_shape_ops(seed in any::<u64>(), m in 1usize..5, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, n], &mut rng);
        let other = random(&[m, n], &mut rng);
        let row = random(&[1, n], &mut rng);
        small!(check(&x, seed, |g, v| { let o = g.constant(other.clone()); g.mul(v, o) }));
        small!(check(&x, seed, |g, v| { let r = g.constant(row.clone()); g.add_row(v, r) }));
        small!(check(&x, seed, |g, v| Ok(g.gelu(v))));
        small!(check(&x, seed, |g, v| g.transpose(v)));
        small!(check(&x, seed, |g, v| g.mean_rows(v)));
        small!(check(&x, seed, |g, v| g.slice_cols(v, 1, n)));
        small!(check(&x, seed, |g, v| { let w = g.scale(v, 0.5); g.concat_rows(&[v, w]) }));
        small!(check(&x, seed, |g, v| { let w = g.scale(v, -2.0); g.concat_cols(&[w, v]) }));
    }

    #[test]
    fn softmax_either_axis(seed in any::<u64>(), m in 1usize..5, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, n], &mut rng);
        small!(check(&x, seed, |g, v| g.softmax(v, 1)));
        small!(check(&x, seed, |g, v| g.softmax(v, 0)));
    }

    #[test]
    fn layer_norm_all_inputs(seed in any::<u64>(), m in 1usize..4, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, n], &mut rng);
        let gamma = random(&[1, n], &mut rng);
        let beta = random(&[1, n], &mut rng);
        let (g0, b0) = (gamma.clone(), beta.clone());
        small!(check(&x, seed, |g, v| {
            let (ga, be) = (g.constant(g0.clone()), g.constant(b0.clone()));
            g.layer_norm(v, ga, be, 1e-5)
        }));
        let x0 = x.clone();
        small!(check(&gamma, seed, |g, v| {
            let (xi, be) = (g.constant(x0.clone()), g.constant(beta.clone()));
            g.layer_norm(xi, v, be, 1e-5)
        }));
    }

    #[test]
    fn cross_entropy_with_padding(seed in any::<u64>(), m in 1usize..5, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[m, n], &mut rng);
        let mut targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        // at least one position survives padding with id 0
        targets[0] = rng.gen_range(1..n);
        let loss = |pad| worst(|g, v| g.cross_entropy(v, &targets, pad), &x);
        small!(loss(None));
        small!(loss(Some(0)));
    }

    #[test]
    fn gather_rows_scatters(seed in any::<u64>(), rows in 2usize..6, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random(&[rows, n], &mut rng);
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..rows)).collect();
        small!(check(&table, seed, |g, v| g.gather_rows(v, &ids)));
    }
}

#[test]
fn first_stage_graph_two_seeds() {
    for seed in [0, 1] {
        let r = stage1_gradcheck(seed, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
