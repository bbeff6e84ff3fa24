//! Simplexes of prefix reparameterizations and prediction heads.
//!
//! Vertex `i` of the prefix simplex owns an embedding sequence `E_i` (`[P, D]`)
//! and two networks `tanh(E W1 + b1) W2 + b2` producing the keys and values
//! of every layer at once (`[P, layers * D]`). A sampled prefix is the convex
//! combination of the vertex outputs with weights drawn independently for
//! every observation, layer and key/value slot.

use rand_distr::{Distribution, Exp1, Normal};

use crate::model::{fan_in_uniform, Encoder, HeadVars, ModelConfig, PrefixPair, BASE_PREFIX};
use crate::rng::{keyed, tag, Rng};
use crate::tensor::{numel, Graph, ParamId, ParamStore, Scalar, TensorError, Var};
use crate::{Error, Result};

pub const KEY: usize = 0;
pub const VALUE: usize = 1;
pub const EMB_STD: f64 = 0.02;

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let sum: f64 = alpha.iter().sum();
        if alpha.is_empty() || alpha.iter().any(|a| !(0.0..=1.0).contains(a)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("{alpha:?} is not on the simplex")));
        }
        Ok(SimplexWeights(alpha))
    }

    pub fn uniform(n: usize) -> Self {
        SimplexWeights(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut a = vec![0.0; n];
        a[j] = 1.0;
        SimplexWeights(a)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Flat Dirichlet draw from normalized standard exponential variates.
pub fn sample_weights(n: usize, rng: &mut Rng) -> SimplexWeights {
    assert!(n >= 1, "simplex needs at least one vertex");
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    SimplexWeights(e.into_iter().map(|x| x / s).collect())
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct PrefixVertex {
    pub emb: ParamId,
    pub key: Mlp,
    pub value: Mlp,
}

#[derive(Clone, Debug)]
pub struct PrefixSimplex {
    pub vertices: Vec<PrefixVertex>,
    pub num_layers: usize,
    pub prefix_len: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug)]
pub struct HeadSimplex {
    /// `(weight [D, C], bias [C])` per vertex.
    pub vertices: Vec<(ParamId, ParamId)>,
    pub d_model: usize,
    pub output_dim: usize,
}

impl PrefixSimplex {
    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.vertices
            .iter()
            .flat_map(|v| {
                [
                    v.emb, v.key.w1, v.key.b1, v.key.w2, v.key.b2, v.value.w1, v.value.b1, v.value.w2,
                    v.value.b2,
                ]
            })
            .collect()
    }

    pub fn vertex_param_ids(&self, i: usize) -> Vec<ParamId> {
        let v = &self.vertices[i];
        vec![
            v.emb, v.key.w1, v.key.b1, v.key.w2, v.key.b2, v.value.w1, v.value.b1, v.value.w2, v.value.b2,
        ]
    }
}

impl HeadSimplex {
    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.vertices.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

fn mlp_specs(name: &str, d: usize, out: usize) -> [(String, Vec<usize>); 4] {
    [
        (format!("{name}.w1"), vec![d, 2 * d]),
        (format!("{name}.b1"), vec![2 * d]),
        (format!("{name}.w2"), vec![2 * d, out]),
        (format!("{name}.b2"), vec![out]),
    ]
}

fn add_mlp<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, d: usize, out: usize) -> Result<Mlp> {
    let [s1, s2, s3, s4] = mlp_specs(name, d, out);
    Ok(Mlp {
        w1: store.add(s1.0, &s1.1, fan_in_uniform(rng, d, numel(&s1.1)), true)?,
        b1: store.add(s2.0, &s2.1, vec![T::zero(); 2 * d], true)?,
        w2: store.add(s3.0, &s3.1, fan_in_uniform(rng, 2 * d, numel(&s3.1)), true)?,
        b2: store.add(s4.0, &s4.1, vec![T::zero(); out], true)?,
    })
}

/// Adds `n_prefix` prefix vertices and `n_head` head vertices to `store`.
/// Vertex `i` is initialized from its own stream keyed by `(seed, i)`.
pub fn init_simplex<T: Scalar>(
    store: &mut ParamStore<T>,
    config: &ModelConfig,
    n_prefix: usize,
    n_head: usize,
    seed: u64,
) -> Result<(PrefixSimplex, HeadSimplex)> {
    if n_prefix == 0 || n_head == 0 {
        return Err(Error::Input("a simplex needs at least one vertex".into()));
    }
    if config.prefix_len == 0 {
        return Err(Error::Input("prefix_len must be positive for prefix tuning".into()));
    }
    let (p, d, l) = (config.prefix_len, config.d_model, config.num_layers);
    let normal = Normal::new(0.0, EMB_STD).expect("valid std");
    let mut vertices = Vec::with_capacity(n_prefix);
    for i in 0..n_prefix {
        let mut rng = keyed(&[seed, tag::PREFIX_VERTEX, i as u64]);
        let emb_vals = (0..p * d).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let emb = store.add(format!("prefix.{i}.emb"), &[p, d], emb_vals, true)?;
        let key = add_mlp(store, &mut rng, &format!("prefix.{i}.key"), d, l * d)?;
        let value = add_mlp(store, &mut rng, &format!("prefix.{i}.value"), d, l * d)?;
        vertices.push(PrefixVertex { emb, key, value });
    }
    let c = config.task_head.output_dim();
    let mut heads = Vec::with_capacity(n_head);
    for i in 0..n_head {
        let mut rng = keyed(&[seed, tag::HEAD_VERTEX, i as u64]);
        let w = store.add(format!("head.{i}.w"), &[d, c], fan_in_uniform(&mut rng, d, d * c), true)?;
        let b = store.add(format!("head.{i}.b"), &[c], vec![T::zero(); c], true)?;
        heads.push((w, b));
    }
    Ok((
        PrefixSimplex {
            vertices,
            num_layers: l,
            prefix_len: p,
            d_model: d,
        },
        HeadSimplex {
            vertices: heads,
            d_model: d,
            output_dim: c,
        },
    ))
}

/// Rebuilds simplex handles from parameter names already present in `store`.
pub fn bind_simplex<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    n_prefix: usize,
    n_head: usize,
) -> Result<(PrefixSimplex, HeadSimplex)> {
    let (p, d, l) = (config.prefix_len, config.d_model, config.num_layers);
    let c = config.task_head.output_dim();
    let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Input(format!("missing parameter {name}")))?;
        if store.get(id).shape != shape {
            return Err(Error::Input(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                store.get(id).shape
            )));
        }
        Ok(id)
    };
    let mlp = |name: &str| -> Result<Mlp> {
        let [s1, s2, s3, s4] = mlp_specs(name, d, l * d);
        Ok(Mlp {
            w1: get(&s1.0, &s1.1)?,
            b1: get(&s2.0, &s2.1)?,
            w2: get(&s3.0, &s3.1)?,
            b2: get(&s4.0, &s4.1)?,
        })
    };
    let mut vertices = Vec::with_capacity(n_prefix);
    for i in 0..n_prefix {
        vertices.push(PrefixVertex {
            emb: get(&format!("prefix.{i}.emb"), &[p, d])?,
            key: mlp(&format!("prefix.{i}.key"))?,
            value: mlp(&format!("prefix.{i}.value"))?,
        });
    }
    let mut heads = Vec::with_capacity(n_head);
    for i in 0..n_head {
        heads.push((get(&format!("head.{i}.w"), &[d, c])?, get(&format!("head.{i}.b"), &[c])?));
    }
    Ok((
        PrefixSimplex {
            vertices,
            num_layers: l,
            prefix_len: p,
            d_model: d,
        },
        HeadSimplex {
            vertices: heads,
            d_model: d,
            output_dim: c,
        },
    ))
}

fn mlp_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, m: &Mlp) -> Result<Var> {
    let w1 = g.param(store, m.w1);
    let b1 = g.param(store, m.b1);
    let w2 = g.param(store, m.w2);
    let b2 = g.param(store, m.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h);
    let y = g.matmul(h, w2)?;
    Ok(g.add(y, b2)?)
}

/// Raw reparameterization outputs `(keys, values)` of vertex `i`, each `[P, layers * D]`.
pub fn vertex_outputs<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    simplex: &PrefixSimplex,
    i: usize,
) -> Result<(Var, Var)> {
    let v = simplex
        .vertices
        .get(i)
        .ok_or_else(|| Error::Input(format!("vertex {i} out of range for {} vertices", simplex.n())))?;
    let e = g.param(store, v.emb);
    let k = mlp_forward(g, store, e, &v.key)?;
    let val = mlp_forward(g, store, e, &v.value)?;
    Ok((k, val))
}

/// Per-layer `[P, D]` key and value prefixes of vertex `i`.
pub fn vertex_prefixes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    simplex: &PrefixSimplex,
    i: usize,
) -> Result<Vec<PrefixPair>> {
    let (k, v) = vertex_outputs(g, store, simplex, i)?;
    let (p, l, d) = (simplex.prefix_len, simplex.num_layers, simplex.d_model);
    let k = g.reshape(k, &[p, l, d])?;
    let v = g.reshape(v, &[p, l, d])?;
    let mut out = Vec::with_capacity(l);
    for layer in 0..l {
        let kl = g.slice(k, 1, layer, 1)?;
        let vl = g.slice(v, 1, layer, 1)?;
        out.push(PrefixPair {
            key: g.reshape(kl, &[p, d])?,
            value: g.reshape(vl, &[p, d])?,
        });
    }
    Ok(out)
}

/// Mixing weights for one batch: one vector per (observation, layer, key/value)
/// for the prefixes and one per observation for the head.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub batch: usize,
    pub layers: usize,
    pub n_prefix: usize,
    pub n_head: usize,
    prefix: Vec<f64>,
    head: Vec<f64>,
}

pub const HEAD_SLOT: u64 = 2;

impl SamplePlan {
    /// Draws every weight vector from a stream keyed by `key ++ [observation, layer, slot]`.
    pub fn draw(key: &[u64], observations: &[u64], layers: usize, n_prefix: usize, n_head: usize) -> Self {
        let batch = observations.len();
        let mut prefix = Vec::with_capacity(batch * layers * 2 * n_prefix);
        let mut head = Vec::with_capacity(batch * n_head);
        let mut k = key.to_vec();
        let base = k.len();
        for &obs in observations {
            for l in 0..layers {
                for slot in 0..2u64 {
                    k.truncate(base);
                    k.extend([obs, l as u64, slot]);
                    prefix.extend_from_slice(sample_weights(n_prefix, &mut keyed(&k)).as_slice());
                }
            }
            k.truncate(base);
            k.extend([obs, u64::MAX, HEAD_SLOT]);
            head.extend_from_slice(sample_weights(n_head, &mut keyed(&k)).as_slice());
        }
        SamplePlan {
            batch,
            layers,
            n_prefix,
            n_head,
            prefix,
            head,
        }
    }

    /// Every weight vector at `1/n`.
    pub fn uniform(batch: usize, layers: usize, n_prefix: usize, n_head: usize) -> Self {
        SamplePlan {
            batch,
            layers,
            n_prefix,
            n_head,
            prefix: SimplexWeights::uniform(n_prefix).0.repeat(batch * layers * 2),
            head: SimplexWeights::uniform(n_head).0.repeat(batch),
        }
    }

    /// Same weights for every slot of every observation.
    pub fn constant(batch: usize, layers: usize, prefix: &SimplexWeights, head: &SimplexWeights) -> Self {
        SamplePlan {
            batch,
            layers,
            n_prefix: prefix.len(),
            n_head: head.len(),
            prefix: prefix.0.repeat(batch * layers * 2),
            head: head.0.repeat(batch),
        }
    }

    /// Arbitrary weights, checked only for dimensions. Intended for controlled experiments.
    pub fn from_raw(
        batch: usize,
        layers: usize,
        n_prefix: usize,
        n_head: usize,
        prefix: Vec<f64>,
        head: Vec<f64>,
    ) -> Result<Self> {
        if prefix.len() != batch * layers * 2 * n_prefix || head.len() != batch * n_head {
            return Err(Error::Input("plan dimensions do not match".into()));
        }
        Ok(SamplePlan {
            batch,
            layers,
            n_prefix,
            n_head,
            prefix,
            head,
        })
    }

    pub fn prefix_weights(&self, obs: usize, layer: usize, slot: usize) -> &[f64] {
        let at = ((obs * self.layers + layer) * 2 + slot) * self.n_prefix;
        &self.prefix[at..at + self.n_prefix]
    }

    pub fn head_weights(&self, obs: usize) -> &[f64] {
        &self.head[obs * self.n_head..(obs + 1) * self.n_head]
    }
}

fn check_plan(plan: &SamplePlan, n_prefix: Option<usize>, layers: usize, n_head: Option<usize>) -> Result<()> {
    let ok = n_prefix.is_none_or(|n| n == plan.n_prefix)
        && n_head.is_none_or(|n| n == plan.n_head)
        && plan.layers == layers;
    if !ok {
        return Err(TensorError::shape(
            "sample plan",
            &[plan.layers, plan.n_prefix, plan.n_head],
            &[layers, n_prefix.unwrap_or(plan.n_prefix), n_head.unwrap_or(plan.n_head)],
        )
        .into());
    }
    Ok(())
}

/// Per-layer `[B, P, D]` prefixes: for every observation, layer and slot the
/// plan-weighted sum of the vertex prefixes. Differentiable into every vertex.
pub fn materialize_prefixes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    simplex: &PrefixSimplex,
    plan: &SamplePlan,
) -> Result<Vec<PrefixPair>> {
    let (p, l, d, n, b) = (simplex.prefix_len, simplex.num_layers, simplex.d_model, simplex.n(), plan.batch);
    check_plan(plan, Some(n), l, None)?;
    let mut stacks = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let (k, v) = vertex_outputs(g, store, simplex, i)?;
        for (slot, x) in [k, v].into_iter().enumerate() {
            let x = g.reshape(x, &[p, l, d])?;
            let x = g.permute(x, &[1, 0, 2])?;
            stacks[slot].push(g.reshape(x, &[l, 1, p * d])?);
        }
    }
    let mut mixed = Vec::with_capacity(2);
    for (slot, parts) in stacks.iter().enumerate() {
        let stacked = g.concat(parts, 1)?;
        let mut alpha = Vec::with_capacity(l * b * n);
        for layer in 0..l {
            for obs in 0..b {
                alpha.extend(plan.prefix_weights(obs, layer, slot).iter().map(|&a| T::lit(a)));
            }
        }
        let alpha = g.constant(alpha, &[l, b, n])?;
        mixed.push(g.matmul(alpha, stacked)?);
    }
    let mut out = Vec::with_capacity(l);
    for layer in 0..l {
        let mut pair = [mixed[0]; 2];
        for (slot, &m) in mixed.iter().enumerate() {
            let s = g.slice(m, 0, layer, 1)?;
            pair[slot] = g.reshape(s, &[b, p, d])?;
        }
        out.push(PrefixPair {
            key: pair[0],
            value: pair[1],
        });
    }
    Ok(out)
}

/// Per-observation head `[B, D, C]` / `[B, C]` mixed with the plan's head weights.
pub fn sample_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &HeadSimplex,
    plan: &SamplePlan,
) -> Result<HeadVars> {
    let (d, c, n, b) = (head.d_model, head.output_dim, head.n(), plan.batch);
    if plan.n_head != n {
        return Err(TensorError::shape("head plan", &[plan.n_head], &[n]).into());
    }
    let mut ws = Vec::with_capacity(n);
    let mut bs = Vec::with_capacity(n);
    for &(w, bias) in &head.vertices {
        let w = g.param(store, w);
        ws.push(g.reshape(w, &[1, d * c])?);
        let bias = g.param(store, bias);
        bs.push(g.reshape(bias, &[1, c])?);
    }
    let w_stack = g.concat(&ws, 0)?;
    let b_stack = g.concat(&bs, 0)?;
    let alpha: Vec<T> = (0..b).flat_map(|o| plan.head_weights(o).to_vec()).map(T::lit).collect();
    let alpha = g.constant(alpha, &[b, n])?;
    let w = g.matmul(alpha, w_stack)?;
    let weight = g.reshape(w, &[b, d, c])?;
    let bias = g.matmul(alpha, b_stack)?;
    Ok(HeadVars { weight, bias })
}

/// `Σ α_i x_i`, evaluated so that bitwise-identical parts are combined first.
/// A single distinct part is returned unchanged whatever the weights.
pub fn mix<T: Scalar>(parts: &[&[T]], alpha: &[f64]) -> Vec<T> {
    debug_assert_eq!(parts.len(), alpha.len());
    let mut groups: Vec<(usize, f64)> = Vec::with_capacity(parts.len());
    for (i, &a) in alpha.iter().enumerate() {
        match groups.iter_mut().find(|(j, _)| parts[*j] == parts[i]) {
            Some(gr) => gr.1 += a,
            None => groups.push((i, a)),
        }
    }
    if groups.len() == 1 {
        return parts[groups[0].0].to_vec();
    }
    let mut out = vec![T::zero(); parts[0].len()];
    for (j, a) in groups {
        let a = T::lit(a);
        for (o, &x) in out.iter_mut().zip(parts[j]) {
            *o += a * x;
        }
    }
    out
}

/// Static prefixes (`[P, D]` per layer and slot) and a single head.
#[derive(Clone, Debug, PartialEq)]
pub struct BakedModel<T> {
    pub prefix_len: usize,
    pub d_model: usize,
    pub output_dim: usize,
    /// `[key, value]` per layer.
    pub prefixes: Vec<[Vec<T>; 2]>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

impl<T: Scalar> BakedModel<T> {
    pub fn prefix_vars(&self, g: &mut Graph<T>) -> Result<Vec<PrefixPair>> {
        let shape = [self.prefix_len, self.d_model];
        self.prefixes
            .iter()
            .map(|[k, v]| {
                Ok(PrefixPair {
                    key: g.constant(k.clone(), &shape)?,
                    value: g.constant(v.clone(), &shape)?,
                })
            })
            .collect()
    }

    pub fn head_vars(&self, g: &mut Graph<T>) -> Result<HeadVars> {
        Ok(HeadVars {
            weight: g.constant(self.head_w.clone(), &[self.d_model, self.output_dim])?,
            bias: g.constant(self.head_b.clone(), &[self.output_dim])?,
        })
    }
}

/// Numeric vertex outputs, the input to every non-differentiable materialization.
#[derive(Clone, Debug)]
pub struct SimplexValues<T> {
    pub prefix_len: usize,
    pub d_model: usize,
    pub output_dim: usize,
    /// `vertex -> layer -> [key, value]`, each `[P * D]`.
    pub prefix: Vec<Vec<[Vec<T>; 2]>>,
    /// `(weight, bias)` per head vertex.
    pub head: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> SimplexValues<T> {
    pub fn compute(store: &ParamStore<T>, prefix: &PrefixSimplex, head: &HeadSimplex) -> Result<Self> {
        let (p, l, d) = (prefix.prefix_len, prefix.num_layers, prefix.d_model);
        let mut verts = Vec::with_capacity(prefix.n());
        for i in 0..prefix.n() {
            let mut g = Graph::new();
            let (k, v) = vertex_outputs(&mut g, store, prefix, i)?;
            let split = |x: &[T]| -> Vec<Vec<T>> {
                (0..l)
                    .map(|layer| {
                        (0..p)
                            .flat_map(|row| x[row * l * d + layer * d..row * l * d + (layer + 1) * d].iter().copied())
                            .collect()
                    })
                    .collect()
            };
            let ks = split(g.value(k));
            let vs = split(g.value(v));
            verts.push(ks.into_iter().zip(vs).map(|(a, b)| [a, b]).collect());
        }
        let heads = head
            .vertices
            .iter()
            .map(|&(w, b)| (store.values(w).to_vec(), store.values(b).to_vec()))
            .collect();
        Ok(SimplexValues {
            prefix_len: p,
            d_model: d,
            output_dim: head.output_dim,
            prefix: verts,
            head: heads,
        })
    }

    pub fn n_prefix(&self) -> usize {
        self.prefix.len()
    }

    pub fn n_head(&self) -> usize {
        self.head.len()
    }

    pub fn num_layers(&self) -> usize {
        self.prefix.first().map_or(0, Vec::len)
    }

    fn mixed_prefix(&self, layer: usize, slot: usize, alpha: &[f64]) -> Vec<T> {
        let parts: Vec<&[T]> = self.prefix.iter().map(|v| v[layer][slot].as_slice()).collect();
        mix(&parts, alpha)
    }

    fn mixed_head(&self, alpha: &[f64]) -> (Vec<T>, Vec<T>) {
        let ws: Vec<&[T]> = self.head.iter().map(|h| h.0.as_slice()).collect();
        let bs: Vec<&[T]> = self.head.iter().map(|h| h.1.as_slice()).collect();
        (mix(&ws, alpha), mix(&bs, alpha))
    }

    /// Static model with the same weights in every layer and slot.
    pub fn bake(&self, prefix_alpha: &SimplexWeights, head_alpha: &SimplexWeights) -> Result<BakedModel<T>> {
        if prefix_alpha.len() != self.n_prefix() || head_alpha.len() != self.n_head() {
            return Err(Error::Input(format!(
                "weights of length {}/{} for a {}/{}-vertex simplex",
                prefix_alpha.len(),
                head_alpha.len(),
                self.n_prefix(),
                self.n_head()
            )));
        }
        let a = prefix_alpha.as_slice();
        let prefixes = (0..self.num_layers())
            .map(|l| [self.mixed_prefix(l, KEY, a), self.mixed_prefix(l, VALUE, a)])
            .collect();
        let (head_w, head_b) = self.mixed_head(head_alpha.as_slice());
        Ok(BakedModel {
            prefix_len: self.prefix_len,
            d_model: self.d_model,
            output_dim: self.output_dim,
            prefixes,
            head_w,
            head_b,
        })
    }

    /// All weights at `1/n`.
    pub fn centroid(&self) -> BakedModel<T> {
        self.bake(&SimplexWeights::uniform(self.n_prefix()), &SimplexWeights::uniform(self.n_head()))
            .expect("uniform weights match")
    }

    /// Model at `(alpha, 1 - alpha)` on a two-vertex line. A one-vertex head is shared by every point.
    pub fn line_point(&self, alpha: f64) -> Result<BakedModel<T>> {
        if self.n_prefix() != 2 || self.n_head() > 2 {
            return Err(Error::Contract(format!(
                "line points need a 2-vertex prefix simplex, got {} prefix and {} head vertices",
                self.n_prefix(),
                self.n_head()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Input(format!("alpha {alpha} outside [0, 1]")));
        }
        let w = SimplexWeights(vec![alpha, 1.0 - alpha]);
        let hw = if self.n_head() == 2 { w.clone() } else { SimplexWeights(vec![1.0]) };
        self.bake(&w, &hw)
    }

    /// Per-observation `[B, P, D]` prefixes per layer and `[B, D, C]` / `[B, C]` head values.
    pub fn sampled(&self, plan: &SamplePlan) -> Result<SampledValues<T>> {
        if plan.n_prefix != self.n_prefix() || plan.n_head != self.n_head() || plan.layers != self.num_layers() {
            return Err(TensorError::shape(
                "sample plan",
                &[plan.layers, plan.n_prefix, plan.n_head],
                &[self.num_layers(), self.n_prefix(), self.n_head()],
            )
            .into());
        }
        let b = plan.batch;
        let mut prefixes = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let mut pair: [Vec<T>; 2] = Default::default();
            for (slot, out) in pair.iter_mut().enumerate() {
                for obs in 0..b {
                    out.extend(self.mixed_prefix(l, slot, plan.prefix_weights(obs, l, slot)));
                }
            }
            prefixes.push(pair);
        }
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for obs in 0..b {
            let (w, bias) = self.mixed_head(plan.head_weights(obs));
            head_w.extend(w);
            head_b.extend(bias);
        }
        Ok(SampledValues {
            batch: b,
            prefix_len: self.prefix_len,
            d_model: self.d_model,
            output_dim: self.output_dim,
            prefixes,
            head_w,
            head_b,
        })
    }
}

/// Plan-materialized values for one batch, outside the differentiation graph.
#[derive(Clone, Debug)]
pub struct SampledValues<T> {
    pub batch: usize,
    pub prefix_len: usize,
    pub d_model: usize,
    pub output_dim: usize,
    pub prefixes: Vec<[Vec<T>; 2]>,
    pub head_w: Vec<T>,
    pub head_b: Vec<T>,
}

impl<T: Scalar> SampledValues<T> {
    pub fn prefix_vars(&self, g: &mut Graph<T>) -> Result<Vec<PrefixPair>> {
        let shape = [self.batch, self.prefix_len, self.d_model];
        self.prefixes
            .iter()
            .map(|[k, v]| {
                Ok(PrefixPair {
                    key: g.constant(k.clone(), &shape)?,
                    value: g.constant(v.clone(), &shape)?,
                })
            })
            .collect()
    }

    pub fn head_vars(&self, g: &mut Graph<T>) -> Result<HeadVars> {
        Ok(HeadVars {
            weight: g.constant(self.head_w.clone(), &[self.batch, self.d_model, self.output_dim])?,
            bias: g.constant(self.head_b.clone(), &[self.batch, self.output_dim])?,
        })
    }
}

/// A frozen encoder with a prefix simplex and a head simplex in one parameter store.
#[derive(Clone, Debug)]
pub struct PrefixModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub prefix: PrefixSimplex,
    pub head: HeadSimplex,
}

impl<T: Scalar> PrefixModel<T> {
    /// Copies the `base.*` parameters of `base`, freezes them and adds fresh simplexes.
    pub fn new(base: &ParamStore<T>, config: &ModelConfig, n_prefix: usize, n_head: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, p) in base.iter() {
            if p.name.starts_with(BASE_PREFIX) {
                store.add(p.name.clone(), &p.shape, p.values.clone(), false)?;
            }
        }
        let encoder = Encoder::bind(&store, config)?;
        let (prefix, head) = init_simplex(&mut store, config, n_prefix, n_head, seed)?;
        Ok(PrefixModel {
            config: config.clone(),
            store,
            encoder,
            prefix,
            head,
        })
    }

    /// Rebinds handles on a store that already holds base and simplex parameters.
    pub fn from_store(store: ParamStore<T>, config: &ModelConfig, n_prefix: usize, n_head: usize) -> Result<Self> {
        let encoder = Encoder::bind(&store, config)?;
        let (prefix, head) = bind_simplex(&store, config, n_prefix, n_head)?;
        Ok(PrefixModel {
            config: config.clone(),
            store,
            encoder,
            prefix,
            head,
        })
    }

    pub fn values(&self) -> Result<SimplexValues<T>> {
        SimplexValues::compute(&self.store, &self.prefix, &self.head)
    }

    pub fn centroid(&self) -> Result<BakedModel<T>> {
        Ok(self.values()?.centroid())
    }

    pub fn line_point(&self, alpha: f64) -> Result<BakedModel<T>> {
        self.values()?.line_point(alpha)
    }

    /// Parameter values of the simplexes, in store order.
    pub fn simplex_snapshot(&self) -> Vec<Vec<T>> {
        self.prefix
            .param_ids()
            .into_iter()
            .chain(self.head.param_ids())
            .map(|id| self.store.values(id).to_vec())
            .collect()
    }

    pub fn restore_simplex(&mut self, snapshot: &[Vec<T>]) {
        let ids: Vec<ParamId> = self.prefix.param_ids().into_iter().chain(self.head.param_ids()).collect();
        for (id, v) in ids.into_iter().zip(snapshot) {
            self.store.values_mut(id).copy_from_slice(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_vertex_weight_is_exactly_one() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(sample_weights(1, &mut rng).as_slice(), &[1.0]);
        }
    }

    #[test]
    fn mix_is_exact_for_duplicates_and_one_hot() {
        let a = [1.0f64, 2.0];
        let b = [0.3f64, -7.0];
        assert_eq!(mix(&[&a, &a, &a], &[0.2, 0.3, 0.5]), a.to_vec());
        assert_eq!(mix(&[&a, &b], &[0.0, 1.0]), b.to_vec());
        assert_eq!(mix(&[&a, &b], &[1.0, 0.0]), a.to_vec());
        let m = mix(&[&a, &b, &a], &[0.25, 0.5, 0.25]);
        assert!((m[0] - 0.65).abs() < 1e-12 && (m[1] + 2.5).abs() < 1e-12);
    }

    #[test]
    fn simplex_weights_validate() {
        assert!(SimplexWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn plan_indexing() {
        let plan = SamplePlan::draw(&[1, 2], &[10, 11, 12], 2, 3, 4);
        assert_eq!(plan.prefix_weights(2, 1, 1).len(), 3);
        assert_eq!(plan.head_weights(2).len(), 4);
        let again = SamplePlan::draw(&[1, 2], &[12], 2, 3, 4);
        assert_eq!(again.prefix_weights(0, 1, 0), plan.prefix_weights(2, 1, 0));
        assert_eq!(again.head_weights(0), plan.head_weights(2));
    }
}
