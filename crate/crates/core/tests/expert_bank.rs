use meme_core::autodiff::Tape;
use meme_core::expert_bank::{
    init_laplacian, shared_forward, specialized_forward, EdgeMixer, ExpertAssignment, LowRankExpert, SharedExpert,
};
use meme_core::params::ParamStore;
use meme_core::tokenizer::TokenLayout;
use meme_core::Modality;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn low_rank(dim: usize, rank: usize, seed: u64) -> (ParamStore<f64>, LowRankExpert) {
    let mut store = ParamStore::new();
    let e = LowRankExpert::new(&mut store, "e", dim, rank, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, e)
}

fn shared(dim: usize, rank: usize, seed: u64) -> (ParamStore<f64>, SharedExpert) {
    let mut store = ParamStore::new();
    let e = SharedExpert::new(&mut store, "s", dim, rank, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, e)
}

/// Runs the edge mixer alone on a one-sample, single-grid layout.
fn mix(grid: (usize, usize), plane: &Array2<f64>) -> Array2<f64> {
    let mut store = ParamStore::new();
    let mixer = EdgeMixer::new(&mut store, "m", 1);
    let layout = TokenLayout::new((0, 0), grid);
    let mut tape = Tape::inference(&store);
    let x = tape.constant(plane.clone().into_shape_with_order((grid.0 * grid.1, 1)).unwrap());
    let k = tape.param(mixer.kernel);
    let y = tape.depthwise_conv3x3(x, k, &layout);
    tape.value(y).clone().into_shape_with_order(grid).unwrap()
}

/// Number of singular values above `tol`, via Jacobi on the Gram matrix.
fn numerical_rank(a: &Array2<f64>, tol: f64) -> usize {
    let mut g = a.t().dot(a);
    let n = g.nrows();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += g[[p, q]] * g[[p, q]];
                if g[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (g[[q, q]] - g[[p, p]]) / (2.0 * g[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (gkp, gkq) = (g[[k, p]], g[[k, q]]);
                    g[[k, p]] = c * gkp - s * gkq;
                    g[[k, q]] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let (gpk, gqk) = (g[[p, k]], g[[q, k]]);
                    g[[p, k]] = c * gpk - s * gqk;
                    g[[q, k]] = s * gpk + c * gqk;
                }
            }
        }
        if off < 1e-28 {
            break;
        }
    }
    let top = (0..n).map(|i| g[[i, i]].max(0.0).sqrt()).fold(0.0, f64::max);
    (0..n).filter(|&i| g[[i, i]].max(0.0).sqrt() > tol * top.max(1e-300)).count()
}

#[test]
fn laplacian_values_and_zero_sum() {
    let k = init_laplacian::<f64>();
    assert_eq!(k, [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]);
    assert_eq!(k.iter().flatten().sum::<f64>(), 0.0);
}

#[test]
fn impulse_response_is_the_kernel() {
    let mut plane = Array2::zeros((5, 5));
    plane[[2, 2]] = 1.0;
    let out = mix((5, 5), &plane);
    for r in 0..5 {
        for c in 0..5 {
            let expect = match (r as i32 - 2, c as i32 - 2) {
                (0, 0) => -4.0,
                (0, 1) | (0, -1) | (1, 0) | (-1, 0) => 1.0,
                _ => 0.0,
            };
            assert_eq!(out[[r, c]], expect, "cell ({r}, {c})");
        }
    }
}

#[test]
fn constant_interior_is_annihilated() {
    let out = mix((6, 7), &Array2::from_elem((6, 7), 0.37));
    for r in 1..5 {
        for c in 1..6 {
            assert_eq!(out[[r, c]], 0.0);
        }
    }
    // Zero padding: corners see two missing neighbours.
    assert!((out[[0, 0]] + 2.0 * 0.37).abs() < 1e-15);
}

#[test]
fn vertical_step_lights_up_the_two_adjacent_columns() {
    let plane = Array2::from_shape_fn((8, 8), |(_, c)| if c >= 4 { 1.0 } else { 0.0 });
    let out = mix((8, 8), &plane);
    // Direct convolution oracle with zero padding.
    let at = |r: i32, c: i32| if (0..8).contains(&r) && (0..8).contains(&c) { plane[[r as usize, c as usize]] } else { 0.0 };
    for r in 0..8i32 {
        for c in 0..8i32 {
            let expect = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
            assert_eq!(out[[r as usize, c as usize]], expect);
        }
    }
    for r in 1..7 {
        for c in 1..7 {
            let nonzero = out[[r, c]] != 0.0;
            assert_eq!(nonzero, c == 3 || c == 4, "cell ({r}, {c})");
        }
    }
    assert_eq!(out[[3, 3]], 1.0);
    assert_eq!(out[[3, 4]], -1.0);
}

#[test]
fn zero_weights_give_zero_output() {
    let (mut store, e) = low_rank(10, 3, 1);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).fill(0.0);
    }
    let x = Array2::from_shape_fn((4, 10), |(i, j)| (i * j) as f64 - 3.0);
    assert!(specialized_forward(&store, &x, &e).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn outputs_span_at_most_the_rank() {
    let (mut store, e) = low_rank(16, 4, 2);
    store.get_mut(e.up.bias.unwrap()).fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Array2<f64> = Array2::from_shape_simple_fn((40, 16), || rand::Rng::random_range(&mut rng, -1.0..1.0));
    let out = specialized_forward(&store, &x, &e).unwrap();
    assert_eq!(out.dim(), (40, 4));
    assert_eq!(numerical_rank(&out, 1e-6), 4);
    // The same tokens lifted back through a D x K map still have rank <= K.
    let lift = Array2::from_shape_fn((4, 16), |(i, j)| ((i + 1) * (j + 2)) as f64 % 5.0 - 2.0);
    assert!(numerical_rank(&out.dot(&lift), 1e-6) <= 4);
    assert_eq!(numerical_rank(&x, 1e-6), 16);
}

#[test]
fn parameter_budget_at_default_sizes() {
    let (store, e) = low_rank(64, 8, 0);
    let n = e.param_count(&store);
    assert!(n <= 64 * 8 + 8 * 8 + 8 + 8);
    assert!(n < 64 * 64 / 2);
}

#[test]
fn zero_w3_leaves_the_residual() {
    let (mut store, e) = shared(12, 4, 3);
    store.get_mut(e.w3.weight).fill(0.0);
    let layout = TokenLayout::new((2, 2), (3, 3));
    let x = Array2::from_shape_fn((13, 12), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    let out = shared_forward(&store, &x, &layout, &e).unwrap();
    let m = x.dot(store.get(e.down.weight)) + store.get(e.down.bias.unwrap());
    assert_eq!(out, m);
}

#[test]
fn constant_grid_matches_hand_evaluation_in_the_interior() {
    let (store, e) = shared(12, 4, 4);
    let layout = TokenLayout::new((3, 3), (4, 4));
    let row = Array1::from_shape_fn(12, |j| (j as f64 * 0.37).sin());
    let x = Array2::from_shape_fn((25, 12), |(_, j)| row[j]);
    let out = shared_forward(&store, &x, &layout, &e).unwrap();

    let m = x.dot(store.get(e.down.weight)) + store.get(e.down.bias.unwrap());
    let mut xn = m.clone();
    for mut r in xn.rows_mut() {
        let mean = r.sum() / 4.0;
        r.mapv_inplace(|v| v - mean);
        let var = r.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let is = 1.0 / (var + 1e-5f64).sqrt();
        r.mapv_inplace(|v| v * is);
    }
    let expect = (xn.dot(store.get(e.w2.weight)) * 0.5).dot(store.get(e.w3.weight)) + &m;
    let interior = [4usize, 9 + 5, 9 + 6, 9 + 9, 9 + 10];
    for &n in &interior {
        for k in 0..4 {
            assert!(
                (out[[n, k]] - expect[[n, k]]).abs() <= 1e-14 * expect[[n, k]].abs().max(1.0),
                "token {n} channel {k}: {} vs {}",
                out[[n, k]],
                expect[[n, k]]
            );
        }
    }
}

#[test]
fn shared_and_specialised_widths_agree() {
    let (s_store, s) = shared(16, 5, 0);
    let (l_store, l) = low_rank(16, 5, 0);
    let layout = TokenLayout::new((1, 2), (2, 2));
    let x = Array2::from_elem((6, 16), 0.25);
    assert_eq!(
        shared_forward(&s_store, &x, &layout, &s).unwrap().dim(),
        specialized_forward(&l_store, &x, &l).unwrap().dim()
    );
}

#[test]
fn grid_and_token_count_mismatch_is_a_shape_error() {
    let (store, e) = shared(8, 2, 0);
    let layout = TokenLayout::new((2, 2), (3, 3));
    let err = shared_forward(&store, &Array2::zeros((12, 8)), &layout, &e).unwrap_err();
    assert!(matches!(err, meme_core::Error::Shape(_)), "{err}");
}

proptest! {
    #[test]
    fn bias_free_expert_is_linear(x in matrix(5, 8), a in -3.0f64..3.0) {
        let (store, e) = low_rank(8, 3, 5);
        let lhs = specialized_forward(&store, &(&x * a), &e).unwrap();
        let rhs = specialized_forward(&store, &x, &e).unwrap() * a;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn contiguous_assignments_are_disjoint(per in 1usize..5) {
        let h = ExpertAssignment::contiguous(per);
        h.validate(3 * per).unwrap();
        let mut all: Vec<usize> = Modality::ALL.iter().flat_map(|&m| h.experts_of(m).unwrap().to_vec()).collect();
        prop_assert!(Modality::ALL.iter().all(|&m| h.experts_of(m).unwrap().len() == per));
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), 3 * per);
    }
}
