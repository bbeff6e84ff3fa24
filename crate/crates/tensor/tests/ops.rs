use prefixsub_tensor::{AdamW, AdamWConfig, Graph, ParamStore, TensorError};

#[test]
fn matmul_of_ones_contracts_inner_dimension() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(vec![1.0; 6], &[2, 3]).unwrap();
    let b = g.constant(vec![1.0; 6], &[3, 2]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 2]);
    assert_eq!(g.value(c), &[3.0; 4]);
}

#[test]
fn identity_matmul_returns_input() {
    let mut g = Graph::<f64>::new();
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect();
    let i4 = g.constant(eye, &[4, 4]).unwrap();
    let xv = g.constant(x.clone(), &[4, 3]).unwrap();
    let y = g.matmul(i4, xv).unwrap();
    assert_eq!(g.value(y), x.as_slice());
}

#[test]
fn matmul_dimension_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = g.constant(vec![0.0; 8], &[4, 2]).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn batched_matmul_broadcasts_a_matrix_operand() {
    let mut g = Graph::<f64>::new();
    let a = g.constant((0..12).map(|i| i as f64).collect(), &[2, 2, 3]).unwrap();
    let b = g.constant(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 2, 2]);
    assert_eq!(g.value(c), &[2.0, 3.0, 8.0, 9.0, 14.0, 15.0, 20.0, 21.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![0.0; 3], &[3]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stable_for_huge_logits() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(vec![1000.0, 0.0], &[2]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y), &[1.0, 0.0]);
}

#[test]
fn softmax_slices_sum_to_one_on_inner_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant((0..24).map(|i| (i as f64 * 0.7).sin() * 4.0).collect(), &[2, 3, 4]).unwrap();
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y);
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!(g.softmax(x, 3).is_err());
}

#[test]
fn layer_norm_degenerate_and_two_point_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![5.0, 5.0, 5.0, 1.0, 3.0, 2.0], &[2, 3]).unwrap();
    let gain = g.constant(vec![1.0; 3], &[3]).unwrap();
    let bias = g.constant(vec![0.0; 3], &[3]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y);
    assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);

    let x2 = g.constant(vec![1.0, 3.0], &[1, 2]).unwrap();
    let g2 = g.constant(vec![1.0; 2], &[2]).unwrap();
    let b2 = g.constant(vec![0.0; 2], &[2]).unwrap();
    let y2 = g.layer_norm(x2, g2, b2, 1e-12).unwrap();
    let v2 = g.value(y2);
    assert!((v2[0] + 1.0).abs() < 1e-9 && (v2[1] - 1.0).abs() < 1e-9);

    let bad_gain = g.constant(vec![1.0; 2], &[2]).unwrap();
    assert!(g.layer_norm(x, bad_gain, bias, 1e-12).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(vec![0.0, 0.0], &[1, 2]).unwrap();
    let l = g.cross_entropy(z, &[0]).unwrap();
    assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

    let z = g.constant(vec![1000.0, -1000.0], &[1, 2]).unwrap();
    let l = g.cross_entropy(z, &[0]).unwrap();
    assert_eq!(g.scalar(l), 0.0);

    assert!(matches!(g.cross_entropy(z, &[2]), Err(TensorError::Invalid(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(vec![0.5, -0.25, 1.0, 0.0, 0.0, 0.0], &[2, 3], true).unwrap();
    let l = g.cross_entropy(z, &[2, 0]).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    let e: Vec<f64> = [0.5f64, -0.25, 1.0].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    let row0 = [e[0] / s, e[1] / s, e[2] / s - 1.0];
    let row1 = [1.0 / 3.0 - 1.0, 1.0 / 3.0, 1.0 / 3.0];
    for j in 0..3 {
        assert!((grad[j] - row0[j] / 2.0).abs() < 1e-12);
        assert!((grad[3 + j] - row1[j] / 2.0).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_gives_ones_and_skips_independent_inputs() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
    let y = g.leaf(vec![4.0], &[1], true).unwrap();
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(g.grad(y).map_or(true, |gy| gy.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_requires_a_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn two_backward_passes_accumulate_like_a_combined_loss() {
    let x0 = vec![0.3, -1.2, 0.8, 2.0];
    // separate passes
    let mut g = Graph::<f64>::new();
    let x = g.leaf(x0.clone(), &[2, 2], true).unwrap();
    let t = g.tanh(x);
    let l1 = g.sum(t);
    let sq = g.mul(x, x).unwrap();
    let l2 = g.sum(sq);
    g.backward(l1).unwrap();
    g.backward(l2).unwrap();
    let separate = g.grad(x).unwrap().to_vec();
    // one combined pass
    let mut h = Graph::<f64>::new();
    let x = h.leaf(x0, &[2, 2], true).unwrap();
    let t = h.tanh(x);
    let l1 = h.sum(t);
    let sq = h.mul(x, x).unwrap();
    let l2 = h.sum(sq);
    let total = h.add(l1, l2).unwrap();
    h.backward(total).unwrap();
    let combined = h.grad(x).unwrap();
    for (a, b) in separate.iter().zip(combined) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn frozen_parameters_get_no_gradient_buffer() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let b = store.add("b", &[2], vec![0.5, 0.5], true).unwrap();
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, -1.0], &[1, 2]).unwrap();
    let wv = g.param(&store, w);
    let bv = g.param(&store, b);
    let h = g.matmul(x, wv).unwrap();
    let o = g.add(h, bv).unwrap();
    let l = g.sum(o);
    g.backward(l).unwrap();
    g.flush_grads(&mut store);
    assert!(store.grad(w).is_none());
    assert_eq!(store.grad(b).unwrap(), &[1.0, 1.0]);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let w = store
            .add("w", &[3, 2], (0..6).map(|i| (i as f32 * 0.41).sin()).collect(), true)
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.05));
        for step in 0..10 {
            let mut g = Graph::new();
            let x = g
                .constant((0..12).map(|i| ((i + step) as f32 * 0.13).cos()).collect(), &[4, 3])
                .unwrap();
            let wv = g.param(&store, w);
            let y = g.matmul(x, wv).unwrap();
            let a = g.gelu(y);
            let l = g.cross_entropy(a, &[0, 1, 1, 0]).unwrap();
            g.backward(l).unwrap();
            g.flush_grads(&mut store);
            opt.step(&mut store).unwrap();
        }
        store.values(w).to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn concat_slice_and_gather_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = g.constant(vec![5.0, 6.0], &[2, 1]).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let s = g.slice(c, 1, 1, 2).unwrap();
    assert_eq!(g.value(s), &[2.0, 5.0, 4.0, 6.0]);
    let r = g.gather_rows(a, &[1, 1, 0]).unwrap();
    assert_eq!(g.value(r), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
    assert!(g.gather_rows(a, &[2]).is_err());
    let e = g.expand(b, 2);
    assert_eq!(g.shape(e), &[2, 2, 1]);
    assert!(g.concat(&[a, b], 0).is_err());
}
