use crate::kernels::{
    broadcast_layout, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, permute_map,
};
use crate::param::{ParamId, ParamStore};
use crate::{numel, Result, Scalar, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Expand {
        a: Var,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// insertion order is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, values: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if values.len() != numel(shape) {
            return Err(TensorError::Invalid(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    /// Brings a stored parameter into the graph. The node requires a gradient
    /// iff the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.shape.clone(),
            p.values.clone(),
            p.requires_grad(),
            Op::Param(id),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let a_batched = !ba.is_empty();
        let b_batched = !bb.is_empty();
        let batch_dims: Vec<usize> = match (a_batched, b_batched) {
            (true, true) if ba == bb => ba.to_vec(),
            (true, false) => ba.to_vec(),
            (false, true) => bb.to_vec(),
            (false, false) => Vec::new(),
            _ => return Err(TensorError::shape("matmul", &sa, &sb)),
        };
        let batch = numel(&batch_dims);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if a_batched && !b_batched {
                gemm_nn(batch * m, k, n, av, bv, &mut out);
            } else {
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    gemm_nn(
                        m,
                        k,
                        n,
                        &av[ao..ao + m * k],
                        &bv[bo..bo + k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = batch_dims;
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::shape(op, sa, sb))?;
        let la = broadcast_layout(&shape, sa);
        let lb = broadcast_layout(&shape, sb);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = numel(&shape);
        let out = (0..n).map(|i| f(av[la.index(i)], bv[lb.index(i)])).collect();
        Ok((shape, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Scale(a, f))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Gelu(a))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = &self.nodes[a.0].value;
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Softmax { a, axis }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::Invalid("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gain)));
        }
        let rows = numel(&shape) / d.max(1);
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits` (`[batch, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if b == 0 {
            return Err(TensorError::Invalid("cross_entropy on an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / sum;
            }
            let lse = max + sum.ln();
            total += lse - row[labels[r]];
        }
        let loss = total / T::lit(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error between every element of `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(TensorError::shape("mse", self.shape(pred), &[target.len()]));
        }
        let n = T::lit(p.len() as f64);
        let loss = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(TensorError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", &shape, perm));
        }
        let map = permute_map(&shape, perm);
        let x = self.value(a);
        let out = map.iter().map(|&i| x[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * dim * inner + start * inner;
            out.extend_from_slice(&x[off..off + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(s, out, rg, Op::Slice { a, axis, start }))
    }

    /// Selects rows of a 2-D table: result is `[indices.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::shape("gather_rows", &shape, &[indices.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for {rows} rows")));
        }
        let x = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            rg,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Repeats `a` along a new leading axis of size `count`.
    pub fn expand(&mut self, a: Var, count: usize) -> Var {
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len() * count);
        for _ in 0..count {
            out.extend_from_slice(x);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(a));
        let rg = self.rg(a);
        self.push(shape, out, rg, Op::Expand { a, count })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Intermediate gradients are recomputed on every call; gradients held by
    /// leaves and parameters accumulate across calls until [`Graph::flush_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf | Op::Param(_)) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, 1, |g| g[0] += T::one());
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    /// Moves parameter-node gradients into `store` and clears them from the graph.
    pub fn flush_grads(&mut self, store: &mut ParamStore<T>) {
        for node in &mut self.nodes {
            if let Op::Param(id) = node.op {
                if let Some(g) = node.grad.take() {
                    store.accumulate_grad(id, &g);
                }
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Parents always have smaller indices than their child.
        let (before, rest) = self.nodes.split_at_mut(idx);
        let node = &rest[0];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                with_grad(before, a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    if a_batched && !b_batched {
                        gemm_nt(batch * m, n, k, g, bv, ga);
                    } else {
                        for bi in 0..batch {
                            let ao = if a_batched { bi * m * k } else { 0 };
                            let bo = if b_batched { bi * k * n } else { 0 };
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bo..bo + k * n],
                                &mut ga[ao..ao + m * k],
                            );
                        }
                    }
                });
                with_grad(before, b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    if a_batched && !b_batched {
                        gemm_tn(k, batch * m, n, av, g, gb);
                    } else {
                        for bi in 0..batch {
                            let ao = if a_batched { bi * m * k } else { 0 };
                            let bo = if b_batched { bi * k * n } else { 0 };
                            gemm_tn(
                                k,
                                m,
                                n,
                                &av[ao..ao + m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bo..bo + k * n],
                            );
                        }
                    }
                });
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                for (v, s) in [(a, T::one()), (b, sign)] {
                    with_grad(before, v, |gv, nodes| {
                        let layout = broadcast_layout(&node.shape, &nodes[v.0].shape);
                        for (i, &gi) in g.iter().enumerate() {
                            gv[layout.index(i)] += s * gi;
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    with_grad(before, v, |gv, nodes| {
                        let lv = broadcast_layout(&node.shape, &nodes[v.0].shape);
                        let lo = broadcast_layout(&node.shape, &nodes[other.0].shape);
                        let ov = &nodes[other.0].value;
                        for (i, &gi) in g.iter().enumerate() {
                            gv[lv.index(i)] += gi * ov[lo.index(i)];
                        }
                    });
                }
            }
            &Op::Scale(a, f) => {
                with_grad(before, a, |ga, _| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * f;
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                with_grad(before, a, |ga, _| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            &Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                with_grad(before, a, |ga, nodes| {
                    let x = &nodes[a.0].value;
                    for i in 0..x.len() {
                        let xi = x[i];
                        let t = (c * (xi + k * xi * xi * xi)).tanh();
                        let d = half * (T::one() + t)
                            + half * xi * (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&node.shape, axis);
                let y = &node.value;
                with_grad(before, a, |ga, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot += y[base + j * inner] * g[base + j * inner];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *node.shape.last().unwrap();
                let rows = rstd.len();
                let dn = T::lit(d as f64);
                with_grad(before, x, |gx, nodes| {
                    let gv = &nodes[gain.0].value;
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                });
                with_grad(before, gain, |gg, _| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                with_grad(before, bias, |gb, _| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::lit(b as f64);
                with_grad(before, *logits, |gl, _| {
                    for r in 0..b {
                        for j in 0..c {
                            let mut v = probs[r * c + j];
                            if j == labels[r] {
                                v -= T::one();
                            }
                            gl[r * c + j] += scale * v;
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let scale = g[0] * T::lit(2.0) / T::lit(target.len() as f64);
                with_grad(before, pred, |gp, nodes| {
                    let pv = &nodes[pred.0].value;
                    for i in 0..target.len() {
                        gp[i] += scale * (pv[i] - target[i]);
                    }
                });
            }
            &Op::Sum(a) => {
                with_grad(before, a, |ga, _| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            &Op::Reshape(a) => {
                with_grad(before, a, |ga, _| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::Permute { a, perm } => {
                with_grad(before, *a, |ga, nodes| {
                    let map = permute_map(&nodes[a.0].shape, perm);
                    for (i, &src) in map.iter().enumerate() {
                        ga[src] += g[i];
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let shape = &node.shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = before[v.0].shape[axis] * inner;
                    with_grad(before, v, |gv, _| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (x, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Slice { a, axis, start } => {
                let len = node.shape[axis];
                with_grad(before, a, |ga, nodes| {
                    let (outer, dim, inner) = split_axis(&nodes[a.0].shape, axis);
                    for o in 0..outer {
                        let off = o * dim * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (x, &s) in ga[off..off + len * inner].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                with_grad(before, *table, |gt, nodes| {
                    let cols = nodes[table.0].shape[1];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            gt[i * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            &Op::Expand { a, count } => {
                with_grad(before, a, |ga, _| {
                    let len = ga.len();
                    for c in 0..count {
                        for (x, &s) in ga.iter_mut().zip(&g[c * len..(c + 1) * len]) {
                            *x += s;
                        }
                    }
                });
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// Runs `f` on the gradient buffer of `v` (allocating it on first use) while
/// giving read access to every node. No-op when `v` does not require a gradient.
fn with_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut buf = nodes[v.0].grad.take().unwrap_or_else(|| vec![T::zero(); len]);
    f(&mut buf, nodes);
    nodes[v.0].grad = Some(buf);
}
