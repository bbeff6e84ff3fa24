mod common;

use common::*;
use prefixsub_core::data::Label;
use prefixsub_core::model::*;
use prefixsub_core::rng::keyed;
use prefixsub_core::subspace::*;
use prefixsub_core::tensor::{Graph, ParamStore};
use prefixsub_core::Error;
use proptest::prelude::*;

fn model(np: usize, nh: usize, seed: u64) -> PrefixModel<f64> {
    let vocab = toy_vocab();
    let base = BaseModel::<f64>::new(tiny_config(TaskHead::Classification { classes: 3 }), vocab, 2).unwrap();
    PrefixModel::new(&base.store, &base.config, np, nh, seed).unwrap()
}

/// Per-vertex `[layer][slot]` prefix values computed through the graph, one vertex at a time.
fn vertex_values(m: &PrefixModel<f64>) -> Vec<Vec<[Vec<f64>; 2]>> {
    (0..m.prefix.n())
        .map(|i| {
            let mut g = Graph::new();
            vertex_prefixes(&mut g, &m.store, &m.prefix, i)
                .unwrap()
                .into_iter()
                .map(|p| [g.value(p.key).to_vec(), g.value(p.value).to_vec()])
                .collect()
        })
        .collect()
}

#[test]
fn flat_dirichlet_moments() {
    let mut rng = keyed(&[42]);
    let draws = 100_000;
    let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
    for _ in 0..draws {
        let w = sample_weights(3, &mut rng);
        for i in 0..3 {
            sum[i] += w.as_slice()[i];
            sq[i] += w.as_slice()[i].powi(2);
        }
    }
    for i in 0..3 {
        let mean = sum[i] / draws as f64;
        let var = sq[i] / draws as f64 - mean * mean;
        assert!((mean - 1.0 / 3.0).abs() < 0.01, "mean {mean}");
        // Dir(1,1,1) marginals are Beta(1, 2): variance 2 / (9 * 4).
        assert!((var - 1.0 / 18.0).abs() < 0.005, "variance {var}");
    }
}

proptest! {
    #[test]
    fn sampled_weights_lie_on_the_simplex(n in 1usize..12, seed: u64) {
        let w = sample_weights(n, &mut keyed(&[seed]));
        prop_assert_eq!(w.len(), n);
        prop_assert!(w.as_slice().iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plan_rows_depend_only_on_key_and_observation(seed: u64, a in 0u64..1000, b in 0u64..1000) {
        let key = [seed, 7];
        let both = SamplePlan::draw(&key, &[a, b], 3, 4, 2);
        let alone = SamplePlan::draw(&key, &[b], 3, 4, 2);
        for l in 0..3 {
            for s in 0..2 {
                prop_assert_eq!(both.prefix_weights(1, l, s), alone.prefix_weights(0, l, s));
            }
        }
        prop_assert_eq!(both.head_weights(1), alone.head_weights(0));
    }
}

#[test]
fn plans_sum_to_one_and_are_uncorrelated_across_slots() {
    let n_obs = 10_000;
    let obs: Vec<u64> = (0..n_obs).collect();
    let plan = SamplePlan::draw(&[5, 9], &obs, 2, 3, 3);
    let mut xs = [Vec::new(), Vec::new(), Vec::new()];
    for o in 0..n_obs as usize {
        for l in 0..2 {
            for s in 0..2 {
                assert!((plan.prefix_weights(o, l, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!((plan.head_weights(o).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        xs[0].push(plan.prefix_weights(o, 0, KEY)[0]);
        xs[1].push(plan.prefix_weights(o, 1, VALUE)[0]);
        xs[2].push(plan.head_weights(o)[0]);
    }
    let corr = |x: &[f64], y: &[f64]| {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    };
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let r = corr(&xs[i], &xs[j]);
        assert!(r.abs() < 0.02, "slots {i},{j}: correlation {r}");
    }
    let lagged = corr(&xs[0][1..], &xs[0][..n_obs as usize - 1]);
    assert!(lagged.abs() < 0.02, "neighbouring observations: {lagged}");
}

#[test]
fn one_hot_weights_recover_each_vertex() {
    let m = model(4, 3, 8);
    let verts = vertex_values(&m);
    let vals = m.values().unwrap();
    for j in 0..4 {
        let baked = vals
            .bake(&SimplexWeights::one_hot(4, j), &SimplexWeights::one_hot(3, j % 3))
            .unwrap();
        for (l, [k, v]) in baked.prefixes.iter().enumerate() {
            assert_eq!(k, &verts[j][l][KEY]);
            assert_eq!(v, &verts[j][l][VALUE]);
        }
        let (w, b) = m.head.vertices[j % 3];
        assert_eq!(baked.head_w, m.store.values(w));
        assert_eq!(baked.head_b, m.store.values(b));
    }
}

/// Makes every prefix entry of vertex `i` equal `consts[i]` by zeroing the output weights.
fn constant_vertices(m: &mut PrefixModel<f64>, consts: &[f64]) {
    for (v, &c) in m.prefix.vertices.clone().iter().zip(consts) {
        for mlp in [&v.key, &v.value] {
            m.store.values_mut(mlp.w2).fill(0.0);
            m.store.values_mut(mlp.b2).fill(c);
        }
    }
}

#[test]
fn convex_combination_of_constant_vertices() {
    let mut m = model(3, 1, 1);
    constant_vertices(&mut m, &[1.0, 2.0, 4.0]);
    let w = SimplexWeights::new(vec![0.5, 0.25, 0.25]).unwrap();
    let plan = SamplePlan::constant(2, 2, &w, &SimplexWeights::uniform(1));
    let mut g = Graph::new();
    for p in materialize_prefixes(&mut g, &m.store, &m.prefix, &plan).unwrap() {
        assert_eq!(g.shape(p.key), &[2, 3, 8]);
        assert!(g.value(p.key).iter().chain(g.value(p.value)).all(|&x| x == 2.0));
    }
    let baked = m.values().unwrap().bake(&w, &SimplexWeights::uniform(1)).unwrap();
    assert!(baked.prefixes.iter().flatten().flatten().all(|&x| x == 2.0));
}

#[test]
fn zero_output_layer_gives_zero_prefixes() {
    let mut m = model(2, 1, 4);
    constant_vertices(&mut m, &[0.0, 0.0]);
    let plan = SamplePlan::draw(&[1], &[0, 1, 2], 2, 2, 1);
    let mut g = Graph::new();
    for p in materialize_prefixes(&mut g, &m.store, &m.prefix, &plan).unwrap() {
        assert!(g.value(p.key).iter().chain(g.value(p.value)).all(|&x| x == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn materialized_prefixes_are_linear_in_the_weights(seed: u64) {
        let m = model(3, 2, 6);
        let verts = vertex_values(&m);
        let plan = SamplePlan::draw(&[seed], &[0, 1, 2], 2, 3, 2);
        let mut g = Graph::new();
        let mats = materialize_prefixes(&mut g, &m.store, &m.prefix, &plan).unwrap();
        let sampled = m.values().unwrap().sampled(&plan).unwrap();
        let pd = 3 * 8;
        for (l, pair) in mats.iter().enumerate() {
            for (slot, var) in [pair.key, pair.value].into_iter().enumerate() {
                let got = g.value(var);
                for obs in 0..3 {
                    let a = plan.prefix_weights(obs, l, slot);
                    for e in 0..pd {
                        let want: f64 = (0..3).map(|i| a[i] * verts[i][l][slot][e]).sum();
                        prop_assert!((got[obs * pd + e] - want).abs() < 1e-6);
                        prop_assert!((sampled.prefixes[l][slot][obs * pd + e] - want).abs() < 1e-12);
                    }
                }
            }
        }
        let head = sample_head(&mut g, &m.store, &m.head, &plan).unwrap();
        prop_assert_eq!(g.shape(head.weight), &[3, 8, 3]);
        for obs in 0..3 {
            let a = plan.head_weights(obs);
            for e in 0..24 {
                let want: f64 = (0..2).map(|i| a[i] * m.store.values(m.head.vertices[i].0)[e]).sum();
                prop_assert!((g.value(head.weight)[obs * 24 + e] - want).abs() < 1e-12);
                prop_assert!((sampled.head_w[obs * 24 + e] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn centroid_is_the_vertex_mean() {
    let m = model(6, 6, 3);
    let verts = vertex_values(&m);
    let c = m.centroid().unwrap();
    for l in 0..2 {
        for slot in 0..2 {
            for e in 0..24 {
                let mean = verts.iter().map(|v| v[l][slot][e]).sum::<f64>() / 6.0;
                assert!((c.prefixes[l][slot][e] - mean).abs() < 1e-12);
            }
        }
    }
    for e in 0..24 {
        let mean = m.head.vertices.iter().map(|&(w, _)| m.store.values(w)[e]).sum::<f64>() / 6.0;
        assert!((c.head_w[e] - mean).abs() < 1e-12);
    }
}

#[test]
fn single_vertex_centroid_is_the_vertex_exactly() {
    let m = model(1, 1, 3);
    let verts = vertex_values(&m);
    let c = m.centroid().unwrap();
    for l in 0..2 {
        assert_eq!(c.prefixes[l][KEY], verts[0][l][KEY]);
        assert_eq!(c.prefixes[l][VALUE], verts[0][l][VALUE]);
    }
}

#[test]
fn gradient_is_routed_in_proportion_to_the_weights() {
    let mut m = model(3, 2, 5);
    let plan = SamplePlan::from_raw(
        1,
        2,
        3,
        2,
        [0.2, 0.4, 0.4].repeat(4),
        vec![0.25, 0.75],
    )
    .unwrap();
    let mut g = Graph::new();
    let mats = materialize_prefixes(&mut g, &m.store, &m.prefix, &plan).unwrap();
    let head = sample_head(&mut g, &m.store, &m.head, &plan).unwrap();
    let mut total = g.sum(head.bias);
    let wsum = g.sum(head.weight);
    total = g.add(total, wsum).unwrap();
    for p in &mats {
        let k = g.sum(p.key);
        let v = g.sum(p.value);
        total = g.add(total, k).unwrap();
        total = g.add(total, v).unwrap();
    }
    g.backward(total).unwrap();
    g.flush_grads(&mut m.store);
    let b2 = |i: usize| m.store.grad(m.prefix.vertices[i].key.b2).unwrap().to_vec();
    let (g0, g1, g2) = (b2(0), b2(1), b2(2));
    for e in 0..g0.len() {
        assert!((g1[e] - 2.0 * g0[e]).abs() < 1e-12);
        assert_eq!(g1[e], g2[e]);
    }
    let hb = |i: usize| m.store.grad(m.head.vertices[i].1).unwrap().to_vec();
    for (a, b) in hb(0).iter().zip(hb(1)) {
        assert!((b - 3.0 * a).abs() < 1e-12);
    }
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let vocab = toy_vocab();
    let labels: Vec<Label> = (0..3).map(|i| Label::Class(i % 3)).collect();
    let seqs = toy_sequences(&vocab, &labels);
    let mut m = model(2, 2, 9);
    let plan = SamplePlan::draw(&[3], &[0, 1, 2], 2, 2, 2);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = Batch::new(&refs).unwrap();
    let (prefix, head, enc) = (m.prefix.clone(), m.head.clone(), m.encoder.clone());
    let loss_of = |store: &ParamStore<f64>, grads: Option<&mut ParamStore<f64>>| -> f64 {
        let mut g = Graph::new();
        let pre = materialize_prefixes(&mut g, store, &prefix, &plan).unwrap();
        let hv = sample_head(&mut g, store, &head, &plan).unwrap();
        let pooled = enc.encode(&mut g, store, &batch, Some(&pre)).unwrap();
        let out = predict(&mut g, pooled, hv).unwrap();
        let loss = task_loss(&mut g, out, &labels, TaskHead::Classification { classes: 3 }).unwrap();
        if let Some(s) = grads {
            g.backward(loss).unwrap();
            g.flush_grads(s);
        }
        g.scalar(loss)
    };
    let mut s = m.store.clone();
    loss_of(&m.store, Some(&mut s));
    let ids: Vec<_> = prefix.param_ids().into_iter().chain(head.param_ids()).collect();
    let (err, n) = store_gradcheck(&mut s, &ids, 1e-5, 1e-4, |st| loss_of(st, None));
    assert!(n > 500);
    assert!(err < 1e-5, "max relative error {err}");
    for (_, p) in s.iter() {
        if p.name.starts_with("base.") {
            assert!(p.grad().is_none());
        }
    }
    m.store = s;
}

#[test]
fn initialization_is_keyed_per_vertex() {
    let a = model(3, 2, 11);
    let b = model(3, 2, 11);
    let c = model(6, 4, 11);
    let d = model(3, 2, 12);
    assert_eq!(a.simplex_snapshot(), b.simplex_snapshot());
    for (_, p) in a.store.iter() {
        let q = c.store.get(c.store.id(&p.name).unwrap());
        assert_eq!(p.values, q.values, "{} depends on the vertex count", p.name);
    }
    assert_ne!(a.simplex_snapshot(), d.simplex_snapshot());
    let verts = vertex_values(&c);
    for i in 0..6 {
        for j in i + 1..6 {
            assert_ne!(verts[i][0][KEY], verts[j][0][KEY]);
        }
    }
    assert!(base_is_frozen(&a.store));
    let emb = a.store.values(a.prefix.vertices[0].emb);
    let sd = (emb.iter().map(|x| x * x).sum::<f64>() / emb.len() as f64).sqrt();
    assert!(sd < 0.05, "embedding scale {sd}");
}

#[test]
fn empty_simplexes_and_prefixes_are_rejected() {
    let vocab = toy_vocab();
    let base = BaseModel::<f64>::new(tiny_config(TaskHead::Regression), vocab, 2).unwrap();
    assert!(matches!(PrefixModel::new(&base.store, &base.config, 0, 1, 0), Err(Error::Input(_))));
    assert!(matches!(PrefixModel::new(&base.store, &base.config, 1, 0, 0), Err(Error::Input(_))));
    let mut cfg = base.config.clone();
    cfg.prefix_len = 0;
    assert!(PrefixModel::new(&base.store, &cfg, 2, 1, 0).is_err());
}

#[test]
fn line_points() {
    let m = model(2, 2, 13);
    let verts = vertex_values(&m);
    let at1 = m.line_point(1.0).unwrap();
    let at0 = m.line_point(0.0).unwrap();
    let mid = m.line_point(0.5).unwrap();
    for l in 0..2 {
        assert_eq!(at1.prefixes[l][KEY], verts[0][l][KEY]);
        assert_eq!(at0.prefixes[l][VALUE], verts[1][l][VALUE]);
        for e in 0..24 {
            let want = 0.5 * (verts[0][l][KEY][e] + verts[1][l][KEY][e]);
            assert!((mid.prefixes[l][KEY][e] - want).abs() < 1e-12);
        }
    }
    assert_eq!(at1.head_w, m.store.values(m.head.vertices[0].0));
    assert!(matches!(m.line_point(1.5), Err(Error::Input(_))));
    assert!(matches!(model(3, 1, 0).line_point(0.5), Err(Error::Contract(_))));
    let shared = model(2, 1, 0);
    assert_eq!(shared.line_point(0.3).unwrap().head_w, shared.line_point(0.9).unwrap().head_w);
}

#[test]
fn snapshot_restore_and_rebind() {
    let mut m = model(2, 2, 1);
    let snap = m.simplex_snapshot();
    let before = m.centroid().unwrap();
    for id in m.prefix.param_ids() {
        m.store.values_mut(id).iter_mut().for_each(|x| *x += 1.0);
    }
    assert_ne!(m.centroid().unwrap(), before);
    m.restore_simplex(&snap);
    assert_eq!(m.centroid().unwrap(), before);
    let again = PrefixModel::from_store(m.store.clone(), &m.config, 2, 2).unwrap();
    assert_eq!(again.centroid().unwrap(), before);
    assert!(PrefixModel::from_store(m.store.clone(), &m.config, 3, 2).is_err());
}
