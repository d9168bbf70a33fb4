use super::check::grad_check;
use super::*;
use crate::rng::Rng;
use proptest::prelude::*;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_symmetric(2.0)).collect()
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
    let m = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);

    let proj = tape.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]);
    let m2 = tape.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
    let out2 = tape.matmul(proj, m2).unwrap();
    assert_eq!(tape.data(out2), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], vec![2, 3]);
    let b = tape.constant(vec![0.0; 8], vec![2, 4]);
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(1);
    let a = rand_vec(&mut rng, 9);
    let b = rand_vec(&mut rng, 9);
    let max_rel = grad_check(
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1])?;
            Ok(tape.sum(c))
        },
        &[(a, vec![3, 3]), (b, vec![3, 3])],
    )
    .unwrap();
    assert!(max_rel < 1e-6, "matmul rel err {max_rel}");
}

#[test]
fn sigmoid_tanh_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![0.0], vec![1]);
    let s = tape.sigmoid(x);
    let t = tape.tanh(x);
    assert_eq!(tape.value(s), 0.5);
    assert_eq!(tape.value(t), 0.0);
}

#[test]
fn sigmoid_gradient_matches_finite_differences() {
    let max_rel = grad_check(
        |tape, ids| {
            let s = tape.sigmoid(ids[0]);
            Ok(tape.sum(s))
        },
        &[(vec![-1.0, 0.0, 2.0], vec![3])],
    )
    .unwrap();
    assert!(max_rel < 1e-6, "sigmoid rel err {max_rel}");
}

#[test]
fn log_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1.0, 0.0], vec![2]);
    assert!(matches!(tape.log(x), Err(AmorError::LogDomain { .. })));
}

#[test]
fn softmax_uniform_and_stability() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![0.0, 0.0, 0.0], vec![3]);
    let p = tape.softmax_lastdim(x);
    for &v in tape.data(p) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let big = tape.constant(vec![1000.0, 0.0, -1000.0], vec![3]);
    let pb = tape.softmax_lastdim(big);
    let d = tape.data(pb);
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12);
    assert!(d[1] < 1e-12 && d[2] < 1e-12);
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    let mut rng = Rng::new(2);
    let x = rand_vec(&mut rng, 5);
    // Random cotangent projection so every Jacobian entry participates.
    let w = rand_vec(&mut rng, 5);
    let max_rel = grad_check(
        |tape, ids| {
            let p = tape.softmax_lastdim(ids[0]);
            let wt = tape.constant(w.clone(), vec![5]);
            let prod = tape.mul(p, wt)?;
            Ok(tape.sum(prod))
        },
        &[(x, vec![5])],
    )
    .unwrap();
    assert!(max_rel < 1e-5, "softmax rel err {max_rel}");
}

#[test]
fn cross_entropy_uniform_is_log_vocab() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![0.0; 2 * 11], vec![2, 11]);
    let loss = tape.cross_entropy(logits, &[3, 7], &[true, true]).unwrap();
    assert!((tape.value(loss) - 11.0f64.ln()).abs() < 1e-12);
    assert!((tape.value(loss) - 2.3979).abs() < 1e-4);
}

#[test]
fn cross_entropy_confident_is_near_zero() {
    let mut tape = Tape::new();
    let mut row = vec![0.0; 11];
    row[4] = 30.0;
    let logits = tape.constant(row, vec![1, 11]);
    let loss = tape.cross_entropy(logits, &[4], &[true]).unwrap();
    assert!(tape.value(loss) < 1e-12);
}

#[test]
fn cross_entropy_empty_mask_errors() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![0.0; 6], vec![2, 3]);
    assert!(matches!(
        tape.cross_entropy(logits, &[0, 1], &[false, false]),
        Err(AmorError::EmptyMask)
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let logits = rand_vec(&mut rng, 24);
    let max_rel = grad_check(
        |tape, ids| tape.cross_entropy(ids[0], &[1, 5, 0, 3], &[true, true, false, true]),
        &[(logits, vec![4, 6])],
    )
    .unwrap();
    assert!(max_rel < 1e-5, "cross_entropy rel err {max_rel}");
}

#[test]
fn topk_values_and_ties() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![5.0, 1.0, 9.0, 3.0], vec![4]);
    let (vals, idx) = tape.topk_lastdim(x, 2).unwrap();
    assert_eq!(tape.data(vals), &[9.0, 5.0]);
    assert_eq!(idx, vec![2, 0]);

    let t = tape.constant(vec![7.0, 7.0, 7.0], vec![3]);
    let (_, tie_idx) = tape.topk_lastdim(t, 2).unwrap();
    assert_eq!(tie_idx, vec![0, 1]);

    assert!(matches!(
        tape.topk_lastdim(x, 5),
        Err(AmorError::TopKTooLarge { k: 5, n: 4 })
    ));
}

#[test]
fn topk_gradient_routes_to_selected_only() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![5.0, 1.0, 9.0, 3.0], vec![4], true);
    let (vals, _) = tape.topk_lastdim(x, 2).unwrap();
    let s = tape.sum(vals);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);

    // And against finite differences away from ties.
    let max_rel = grad_check(
        |tape, ids| {
            let (vals, _) = tape.topk_lastdim(ids[0], 2)?;
            Ok(tape.sum(vals))
        },
        &[(vec![5.0, 1.0, 9.0, 3.0], vec![4])],
    )
    .unwrap();
    assert!(max_rel < 1e-9, "topk rel err {max_rel}");
}

#[test]
fn ste_threshold_forward_and_strictness() {
    let mut tape = Tape::new();
    let p = tape.constant(vec![0.7, 0.3, 0.5], vec![3]);
    let g = tape.ste_threshold(p, 0.5);
    // Strict inequality: exactly 0.5 stays off.
    assert_eq!(tape.data(g), &[1.0, 0.0, 0.0]);
}

#[test]
fn ste_threshold_backward_is_identity() {
    let mut tape = Tape::new();
    let p = tape.leaf(vec![0.7, 0.3, 0.9], vec![3], true);
    let c = tape.constant(vec![2.0, -3.0, 0.5], vec![3]);
    let g = tape.ste_threshold(p, 0.5);
    let prod = tape.mul(g, c).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(p).unwrap(), &[2.0, -3.0, 0.5]);
}

#[test]
fn concat_and_embedding_lookup() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![1.0, 2.0], vec![2]);
    let b = tape.constant(vec![3.0], vec![1]);
    let c = tape.concat_lastdim(a, b).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0]);

    let table: Vec<f64> = (0..11 * 64).map(|i| i as f64).collect();
    let t = tape.constant(table.clone(), vec![11, 64]);
    let e = tape.embedding_lookup(t, &[0]).unwrap();
    assert_eq!(tape.data(e), &table[0..64]);
}

#[test]
fn embedding_gradient_scatters() {
    let mut tape = Tape::new();
    let t = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true);
    let e = tape.embedding_lookup(t, &[2, 0, 2]).unwrap();
    let s = tape.sum(e);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn scale_rows_gradients() {
    let max_rel = grad_check(
        |tape, ids| {
            let scaled = tape.scale_rows(ids[0], ids[1])?;
            Ok(tape.sum(scaled))
        },
        &[
            (vec![1.0, -2.0, 0.5, 3.0, 1.5, -0.75], vec![3, 2]),
            (vec![0.5, -1.0, 2.0], vec![3]),
        ],
    )
    .unwrap();
    assert!(max_rel < 1e-7, "scale_rows rel err {max_rel}");
}

#[test]
fn every_differentiable_op_passes_fd_battery() {
    // Random inputs in [-2, 2]; every op's max relative error < 1e-4.
    let mut rng = Rng::new(11);
    let x6 = rand_vec(&mut rng, 6);
    let y6 = rand_vec(&mut rng, 6);
    let v3 = rand_vec(&mut rng, 3);

    let cases: Vec<(&str, f64)> = vec![
        (
            "add",
            grad_check(
                |t, ids| {
                    let o = t.add(ids[0], ids[1])?;
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![2, 3]), (y6.clone(), vec![2, 3])],
            )
            .unwrap(),
        ),
        (
            "sub_scalar_broadcast",
            grad_check(
                |t, ids| {
                    let o = t.sub(ids[0], ids[1])?;
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![2, 3]), (vec![0.7], vec![1])],
            )
            .unwrap(),
        ),
        (
            "mul",
            grad_check(
                |t, ids| {
                    let o = t.mul(ids[0], ids[1])?;
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![2, 3]), (y6.clone(), vec![2, 3])],
            )
            .unwrap(),
        ),
        (
            "tanh",
            grad_check(
                |t, ids| {
                    let o = t.tanh(ids[0]);
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![6])],
            )
            .unwrap(),
        ),
        (
            "exp",
            grad_check(
                |t, ids| {
                    let o = t.exp(ids[0]);
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![6])],
            )
            .unwrap(),
        ),
        (
            "log",
            grad_check(
                |t, ids| {
                    let e = t.exp(ids[0]);
                    let o = t.log(e)?;
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![6])],
            )
            .unwrap(),
        ),
        (
            "scale",
            grad_check(
                |t, ids| {
                    let o = t.scale(ids[0], -1.7);
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![6])],
            )
            .unwrap(),
        ),
        (
            "row_entropy",
            grad_check(
                |t, ids| {
                    let p = t.softmax_lastdim(ids[0]);
                    let h = t.row_entropy(p);
                    Ok(t.sum(h))
                },
                &[(x6.clone(), vec![2, 3])],
            )
            .unwrap(),
        ),
        (
            "mean",
            grad_check(
                |t, ids| Ok(t.mean(ids[0])),
                &[(x6.clone(), vec![6])],
            )
            .unwrap(),
        ),
        (
            "slice_repeat_transpose",
            grad_check(
                |t, ids| {
                    let rep = t.repeat_rows(ids[1], 2)?;
                    let sl = t.slice_rows(ids[0], 0, 2)?;
                    let tr = t.transpose(sl);
                    let back = t.transpose(tr);
                    let o = t.mul(back, rep)?;
                    Ok(t.sum(o))
                },
                &[(x6.clone(), vec![2, 3]), (v3.clone(), vec![3])],
            )
            .unwrap(),
        ),
        (
            "concat",
            grad_check(
                |t, ids| {
                    let o = t.concat_lastdim(ids[0], ids[1])?;
                    let sm = t.tanh(o);
                    Ok(t.sum(sm))
                },
                &[(x6.clone(), vec![2, 3]), (y6.clone(), vec![2, 3])],
            )
            .unwrap(),
        ),
    ];

    for (name, rel) in cases {
        assert!(rel < 1e-4, "{name} rel err {rel}");
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true);
    let d = tape.detach(x);
    let y = tape.mul(d, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // Only the direct (non-detached) factor contributes: d(sum(c*x))/dx = c.
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn backward_is_idempotent_and_reproducible() {
    let build = |tape: &mut Tape| -> (TensorId, TensorId) {
        let x = tape.leaf(vec![0.3, -1.2, 0.8, 2.0], vec![2, 2], true);
        let w = tape.leaf(vec![0.5, -0.25, 1.5, 0.75], vec![2, 2], true);
        let h = tape.matmul(x, w).unwrap();
        let t = tape.tanh(h);
        let p = tape.softmax_lastdim(t);
        let loss = tape.cross_entropy(p, &[0, 1], &[true, true]).unwrap();
        (loss, w)
    };
    let mut t1 = Tape::new();
    let (l1, w1) = build(&mut t1);
    t1.backward(l1).unwrap();
    let g1 = t1.grad(w1).unwrap().to_vec();

    let mut t2 = Tape::new();
    let (l2, w2) = build(&mut t2);
    t2.backward(l2).unwrap();
    t2.backward(l2).unwrap(); // repeated backward must not accumulate
    let g2 = t2.grad(w2).unwrap().to_vec();

    assert_eq!(g1, g2, "gradients must be bit-identical");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalize(xs in proptest::collection::vec(-30.0f64..30.0, 8)) {
        let mut tape = Tape::new();
        let x = tape.constant(xs, vec![2, 4]);
        let p = tape.softmax_lastdim(x);
        let d = tape.data(p);
        for r in 0..2 {
            let s: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(d.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn topk_is_deterministic_under_ties(
        vals in proptest::collection::vec(0u8..4, 6),
        k in 1usize..=6,
    ) {
        let row: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let first = top_k_indices(&row, k);
        for _ in 0..3 {
            prop_assert_eq!(top_k_indices(&row, k), first.clone());
        }
        // Descending values; ties broken by lowest index.
        for w in first.windows(2) {
            prop_assert!(
                row[w[0]] > row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1])
            );
        }
    }

    #[test]
    fn ste_forward_binary_backward_identity(
        ps in proptest::collection::vec(0.0f64..=1.0, 5),
        gs in proptest::collection::vec(-2.0f64..2.0, 5),
    ) {
        let mut tape = Tape::new();
        let p = tape.leaf(ps, vec![5], true);
        let c = tape.constant(gs.clone(), vec![5]);
        let g = tape.ste_threshold(p, 0.5);
        prop_assert!(tape.data(g).iter().all(|&v| v == 0.0 || v == 1.0));
        let prod = tape.mul(g, c).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(p).unwrap(), gs.as_slice());
    }
}
