use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Array, BoolMat, NodeId, Tape};
use crate::Error;

fn arr2(rows: usize, cols: usize, data: &[f64]) -> Array<f64> {
    Array::from_vec(vec![rows, cols], data.to_vec()).unwrap()
}

fn rand_arr(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Independent triple-loop matrix product oracle.
fn matmul_oracle(a: &Array<f64>, b: &Array<f64>) -> Array<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Array::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            out.data_mut()[i * n + j] = acc;
        }
    }
    out
}

/// Direct exp-normalize softmax oracle over unmasked entries.
fn softmax_oracle(x: &[f64], allowed: &[bool], scale: f64) -> Vec<f64> {
    let sum: f64 = x
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| (v * scale).exp())
        .sum();
    x.iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { (v * scale).exp() / sum } else { 0.0 })
        .collect()
}

fn assert_close(actual: &[f64], expect: &[f64], tol: f64) {
    assert_eq!(actual.len(), expect.len());
    for (i, (a, e)) in actual.iter().zip(expect).enumerate() {
        assert!((a - e).abs() <= tol, "[{}] {} vs {} (tol {})", i, a, e, tol);
    }
}

/// Central-difference gradient check for a scalar function of several
/// arrays, step 1e-4 in 64-bit, max relative error 1e-3.
fn fd_check(inputs: &[Array<f64>], build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId) {
    let eval = |values: &[Array<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.grad(loss, &ids).unwrap();

    let h = 1e-4;
    for (which, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = grads[which].data()[e];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() <= 1e-3,
                "input {} elem {}: analytic {} vs fd {}",
                which,
                e,
                a,
                fd
            );
        }
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.leaf(arr2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.leaf(arr2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_projector() {
    let mut tape = Tape::new();
    let p = tape.leaf(arr2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    let x = tape.leaf(arr2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(p, x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_arr(&mut rng, vec![3, 4]);
    let b = rand_arr(&mut rng, vec![4, 2]);
    let expect = matmul_oracle(&a, &b);
    let mut tape = Tape::new();
    let (ia, ib) = (tape.leaf(a), tape.leaf(b));
    let y = tape.matmul(ia, ib).unwrap();
    assert_close(tape.value(y).data(), expect.data(), 1e-6);
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Array::zeros(vec![2, 3]));
    let b = tape.leaf(Array::zeros(vec![4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn masked_softmax_symmetric_pair() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 2, &[0.0, 0.0]));
    let mask = Arc::new(BoolMat::new(1, 2, |_, _| true));
    let y = tape.masked_softmax(x, mask, 1.0).unwrap();
    assert_close(tape.value(y).data(), &[0.5, 0.5], 1e-12);
}

#[test]
fn masked_softmax_single_survivor() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 2, &[9.0, 3.0]));
    let mask = Arc::new(BoolMat::new(1, 2, |_, c| c == 0));
    let y = tape.masked_softmax(x, mask, 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn masked_softmax_matches_exp_normalize_oracle() {
    let x = [1.0, 2.0, 3.0];
    let allowed = [true, true, true];
    let expect = softmax_oracle(&x, &allowed, 1.0);
    let mut tape = Tape::new();
    let ix = tape.leaf(arr2(1, 3, &x));
    let mask = Arc::new(BoolMat::new(1, 3, |_, _| true));
    let y = tape.masked_softmax(ix, mask, 1.0).unwrap();
    assert_close(tape.value(y).data(), &expect, 1e-12);
}

#[test]
fn masked_softmax_fully_masked_row_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let mask = Arc::new(BoolMat::new(2, 2, |r, _| r == 0));
    assert!(matches!(
        tape.masked_softmax(x, mask, 1.0),
        Err(Error::DegenerateRow { row: 1 })
    ));
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 4, &[3.0, 3.0, 3.0, 3.0]));
    let gain = tape.leaf(Array::from_vec(vec![4], vec![1.0; 4]).unwrap());
    let bias = tape.leaf(Array::zeros(vec![4]));
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_close(tape.value(y).data(), &[0.0; 4], 1e-9);
}

#[test]
fn layer_norm_already_normalized_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 2, &[1.0, -1.0]));
    let gain = tape.leaf(Array::from_vec(vec![2], vec![1.0; 2]).unwrap());
    let bias = tape.leaf(Array::zeros(vec![2]));
    let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert_close(tape.value(y).data(), &[1.0, -1.0], 1e-6);
}

#[test]
fn layer_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_arr(&mut rng, vec![1, 16]);
    let eps = 1e-5;
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let gain = tape.leaf(Array::from_vec(vec![16], vec![1.0; 16]).unwrap());
    let bias = tape.leaf(Array::zeros(vec![16]));
    let y = tape.layer_norm(ix, gain, bias, eps).unwrap();
    let out = tape.value(y).data();
    let mean: f64 = out.iter().sum::<f64>() / 16.0;
    let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
    assert!(mean.abs() <= 1e-6, "mean {}", mean);
    // var = raw_var / (raw_var + eps), slightly below 1.
    assert!((var - 1.0).abs() <= 1e-3, "var {}", var);
}

#[test]
fn squared_relu_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.squared_relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 4.0]);

    let neg = tape.leaf(Array::from_vec(vec![3], vec![-5.0, -0.5, -1e9]).unwrap());
    let z = tape.squared_relu(neg).unwrap();
    assert_eq!(tape.value(z).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn squared_relu_gradient_matches_central_difference() {
    // d/dx max(x,0)^2 at x=3 is 6.
    let x = Array::from_vec(vec![1], vec![3.0f64]).unwrap();
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone());
    let y = tape.squared_relu(ix).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let g = tape.grad(loss, &[ix]).unwrap();
    assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
    fd_check(&[x], |tape, ids| {
        let y = tape.squared_relu(ids[0]).unwrap();
        tape.sum_all(y).unwrap()
    });
}

#[test]
fn grad_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_arr(&mut rng, vec![3, 5]);
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let loss = tape.sum_all(ix).unwrap();
    let g = tape.grad(loss, &[ix]).unwrap();
    assert!(g[0].data().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_of_half_square_sum_is_x() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_arr(&mut rng, vec![2, 3]);
    let mut tape = Tape::new();
    let ix = tape.leaf(x.clone());
    let sq = tape.mul(ix, ix).unwrap();
    let sum = tape.sum_all(sq).unwrap();
    let loss = tape.scale(sum, 0.5).unwrap();
    let g = tape.grad(loss, &[ix]).unwrap();
    assert_close(g[0].data(), x.data(), 1e-12);
}

#[test]
fn grad_of_disconnected_leaf_is_zeros() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 2, &[1.0, 2.0]));
    let unused = tape.leaf(arr2(2, 2, &[1.0; 4]));
    let loss = tape.sum_all(x).unwrap();
    let g = tape.grad(loss, &[unused]).unwrap();
    assert_eq!(g[0].shape(), &[2, 2]);
    assert!(g[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(arr2(1, 2, &[1.0, 2.0]));
    assert!(matches!(tape.grad(x, &[x]), Err(Error::NonScalarLoss(_))));
}

#[test]
fn finite_check_rejects_overflow() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Array::from_vec(vec![1], vec![1e30f32]).unwrap());
    let sq = tape.mul(x, x);
    assert!(matches!(sq, Err(Error::NonFinite { .. })));
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // matmul + add + add_row + scale
    let a = rand_arr(&mut rng, vec![3, 4]);
    let b = rand_arr(&mut rng, vec![4, 2]);
    let bias = rand_arr(&mut rng, vec![2]);
    fd_check(&[a, b, bias], |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        let y = tape.add_row(y, ids[2]).unwrap();
        let y = tape.scale(y, 0.7).unwrap();
        tape.sum_all(y).unwrap()
    });

    // matmul_bt + mul + sub
    let q = rand_arr(&mut rng, vec![2, 3]);
    let k = rand_arr(&mut rng, vec![4, 3]);
    let w = rand_arr(&mut rng, vec![2, 4]);
    fd_check(&[q, k, w], |tape, ids| {
        let scores = tape.matmul_bt(ids[0], ids[1]).unwrap();
        let gated = tape.mul(scores, ids[2]).unwrap();
        let diff = tape.sub(gated, ids[2]).unwrap();
        tape.sum_all(diff).unwrap()
    });

    // layer_norm with affine params
    let x = rand_arr(&mut rng, vec![3, 6]);
    let gain = rand_arr(&mut rng, vec![6]);
    let bias = rand_arr(&mut rng, vec![6]);
    fd_check(&[x, gain, bias], |tape, ids| {
        let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.sum_all(sq).unwrap()
    });

    // masked softmax through a causal-ish mask
    let scores = rand_arr(&mut rng, vec![3, 4]);
    let weight = rand_arr(&mut rng, vec![3, 4]);
    let mask = Arc::new(BoolMat::new(3, 4, |r, c| c <= r + 1));
    fd_check(&[scores, weight], move |tape, ids| {
        let probs = tape.masked_softmax(ids[0], Arc::clone(&mask), 0.5).unwrap();
        let gated = tape.mul(probs, ids[1]).unwrap();
        tape.sum_all(gated).unwrap()
    });

    // rotary, slices, concat
    let x = rand_arr(&mut rng, vec![3, 8]);
    let positions = Arc::new(vec![5usize, 9, 12]);
    fd_check(&[x], move |tape, ids| {
        let rot = tape.rotary(ids[0], Arc::clone(&positions), 4).unwrap();
        let head0 = tape.slice_cols(rot, 0, 4).unwrap();
        let head1 = tape.slice_cols(rot, 4, 4).unwrap();
        let swapped = tape.concat_cols(&[head1, head0]).unwrap();
        let rows = tape.slice_rows(swapped, 1, 2).unwrap();
        let sq = tape.mul(rows, rows).unwrap();
        tape.sum_all(sq).unwrap()
    });

    // embedding + logsumexp + take_per_row (a miniature cross-entropy)
    let table = rand_arr(&mut rng, vec![5, 4]);
    let proj = rand_arr(&mut rng, vec![4, 5]);
    let ids_in = Arc::new(vec![0u32, 3, 4]);
    let targets = Arc::new(vec![1u32, 0, 2]);
    fd_check(&[table, proj], move |tape, nodes| {
        let emb = tape.embed_rows(nodes[0], Arc::clone(&ids_in)).unwrap();
        let logits = tape.matmul(emb, nodes[1]).unwrap();
        let lse = tape.logsumexp_rows(logits).unwrap();
        let picked = tape.take_per_row(logits, Arc::clone(&targets)).unwrap();
        let ce = tape.sub(lse, picked).unwrap();
        tape.sum_all(ce).unwrap()
    });
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_arr(&mut rng, vec![17, 23]);
    let b = rand_arr(&mut rng, vec![23, 9]);
    let run = || {
        let mut tape = Tape::new();
        let (ia, ib) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = tape.matmul(ia, ib).unwrap();
        let ln_g = tape.leaf(Array::from_vec(vec![9], vec![1.0; 9]).unwrap());
        let ln_b = tape.leaf(Array::zeros(vec![9]));
        let y = tape.layer_norm(y, ln_g, ln_b, 1e-5).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}

mod proptests {
    use super::{Arc, Array, BoolMat, ChaCha8Rng, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_masked_are_zero(
            seed in 0u64..500,
            rows in 1usize..6,
            cols in 1usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array::<f64>::from_fn(vec![rows, cols], |_| rng.gen_range(-20.0..20.0));
            // Guarantee at least one allowed entry per row.
            let survivors: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
            let mask = Arc::new(BoolMat::new(rows, cols, |r, c| {
                c == survivors[r] || rng.gen_bool(0.5)
            }));
            let mut tape = Tape::new();
            let ix = tape.leaf(x);
            let y = tape.masked_softmax(ix, Arc::clone(&mask), 0.3).unwrap();
            for r in 0..rows {
                let row = tape.value(y).row(r);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                for c in 0..cols {
                    if !mask.get(r, c) {
                        prop_assert_eq!(row[c], 0.0);
                    }
                }
            }
        }
    }
}
