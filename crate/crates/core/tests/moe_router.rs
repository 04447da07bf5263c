use meme_core::moe_router::{combine, gate, top_k_indices, GateConfig, GateMode, RouterDecision};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn decide(logits: &Array2<f64>, k: usize) -> RouterDecision<f64> {
    let cfg = GateConfig::new(logits.ncols(), k, 0.0).unwrap();
    let eye = Array2::eye(logits.ncols());
    gate(logits, &eye, &cfg, GateMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn shifted_rows_give_identical_probabilities() {
    let d = decide(&array![[2.0, 1.0, 0.0], [12.0, 11.0, 10.0]], 1);
    for e in 0..3 {
        assert!((d.probs[[0, e]] - d.probs[[1, e]]).abs() < 1e-15);
    }
}

#[test]
fn single_selected_expert_is_passed_through() {
    let d = RouterDecision {
        probs: array![[1.0, 0.0]],
        noisy_logits: array![[0.0, 0.0]],
        topk: vec![vec![0]],
        k: 1,
    };
    let out = combine(&[Some(array![[3.0, -2.0]]), None], &d).unwrap();
    assert_eq!(out, array![[3.0, -2.0]]);
}

#[test]
fn opposite_outputs_cancel() {
    let d = RouterDecision {
        probs: array![[0.5, 0.5]],
        noisy_logits: array![[0.0, 0.0]],
        topk: vec![vec![0, 1]],
        k: 2,
    };
    let out = combine(&[Some(array![[1.5, 2.0]]), Some(array![[-1.5, -2.0]])], &d).unwrap();
    assert_eq!(out, array![[0.0, 0.0]]);
}

#[test]
fn weighted_sum_by_hand() {
    let d = RouterDecision {
        probs: array![[0.7, 0.3]],
        noisy_logits: array![[0.0, 0.0]],
        topk: vec![vec![0, 1]],
        k: 2,
    };
    let out: Array2<f64> = combine(&[Some(array![[1.0, 1.0]]), Some(array![[3.0, 3.0]])], &d).unwrap();
    assert!((out[[0, 0]] - 1.6).abs() < 1e-12 && (out[[0, 1]] - 1.6).abs() < 1e-12);
}

#[test]
fn train_mode_is_reproducible_and_noisy() {
    let cfg = GateConfig::new(4, 2, 1.0).unwrap();
    let tokens = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.1);
    let w = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64 * 0.05);
    let a = gate(&tokens, &w, &cfg, GateMode::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = gate(&tokens, &w, &cfg, GateMode::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let clean = gate(&tokens, &w, &cfg, GateMode::Eval, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.noisy_logits, clean.noisy_logits);
    assert_eq!(clean.noisy_logits, tokens.dot(&w));
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(logits in matrix(5, 4, -30.0, 30.0), k in 1usize..=4) {
        let d = decide(&logits, k);
        for row in d.probs.rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        prop_assert!(d.dispatch_count() <= k * logits.nrows());
        for (n, sel) in d.topk.iter().enumerate() {
            prop_assert_eq!(sel.len(), k);
            prop_assert!(sel.iter().all(|&i| i < 4));
            let min_sel = sel.iter().map(|&i| d.probs[[n, i]]).fold(f64::INFINITY, f64::min);
            for i in (0..4).filter(|i| !sel.contains(i)) {
                prop_assert!(d.probs[[n, i]] <= min_sel);
            }
        }
    }

    #[test]
    fn ties_resolve_to_lower_indices(v in -5.0f64..5.0, k in 1usize..=5) {
        let row = vec![v; 5];
        prop_assert_eq!(top_k_indices(&row, k), (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn constant_logit_shift_keeps_selection(logits in matrix(4, 5, -5.0, 5.0), shift in -50.0f64..50.0, k in 1usize..=5) {
        let a = decide(&logits, k);
        let b = decide(&(logits + shift), k);
        prop_assert_eq!(a.topk, b.topk);
    }

    #[test]
    fn combine_is_linear_in_outputs(
        logits in matrix(4, 3, -2.0, 2.0),
        x in proptest::collection::vec(matrix(4, 2, -1.0, 1.0), 3),
        y in proptest::collection::vec(matrix(4, 2, -1.0, 1.0), 3),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let d = decide(&logits, 2);
        let mix: Vec<_> = x.iter().zip(&y).map(|(p, q)| Some(p * a + q * b)).collect();
        let lhs = combine(&mix, &d).unwrap();
        let cx = combine(&x.into_iter().map(Some).collect::<Vec<_>>(), &d).unwrap();
        let cy = combine(&y.into_iter().map(Some).collect::<Vec<_>>(), &d).unwrap();
        let rhs = cx * a + cy * b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn unselected_experts_contribute_nothing(logits in matrix(3, 4, -2.0, 2.0), junk in -100.0f64..100.0) {
        let d = decide(&logits, 2);
        let outs: Vec<_> = (0..4).map(|e| Some(Array2::from_elem((3, 2), e as f64))).collect();
        let base = combine(&outs, &d).unwrap();
        for e in 0..4 {
            if d.topk.iter().all(|s| !s.contains(&e)) {
                let mut o = outs.clone();
                o[e] = Some(Array2::from_elem((3, 2), junk));
                prop_assert_eq!(&combine(&o, &d).unwrap(), &base);
            }
        }
    }
}
