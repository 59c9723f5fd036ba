//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] borrows the parameter store for the duration of one forward
//! pass. Every primitive appends a node holding its value; nodes whose
//! inputs require gradients also record what backward needs. Nodes are
//! appended in evaluation order, so walking the tape in reverse is a valid
//! topological order and visits each entry once.

use super::kernels::{axpy, canonical_sum, dot, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    /// Leaf, or any node that no gradient flows through.
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    CausalAttention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<T> },
    Mix { weights: Var, branches: Vec<Var> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Pick(Var, usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Float> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    record: bool,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), record: true }
    }

    /// A tape that never records backward information, for evaluation.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), record: false }
    }

    /// A tape with no parameter store; only constants and explicit leaves.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), record: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value: Value::Owned(data), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referencing a stored parameter; it requires a gradient iff the
    /// parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.record && t.trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let store = self.params.expect("tape has no parameter store");
        let id = store.expect_id(name)?;
        Ok(self.param(id))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.id(name).is_some())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.expect("param leaf").get(*id).data(),
        }
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("consistent node")
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what} must be 2-D, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` vector to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "bias of shape {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let out = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer norm affine params {:?}/{:?} do not match width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xs.len() / d;
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = if rg { Op::LayerNorm { x, gamma, beta, xhat, rstd } } else { Op::Leaf };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum. The
    /// normaliser is summed in ascending order so permuting the entries
    /// along `axis` permutes the output exactly.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let n = shape[axis];
        if n == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut out = vec![T::zero(); xs.len()];
        let mut exps = vec![T::zero(); n];
        let mut scratch = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| xs[at(k)]).fold(T::neg_infinity(), T::max);
                for k in 0..n {
                    exps[k] = (xs[at(k)] - max).exp();
                }
                scratch.copy_from_slice(&exps);
                let z = canonical_sum(&mut scratch);
                for k in 0..n {
                    out[at(k)] = exps[k] / z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Multi-head causal self-attention over `q, k, v` of shape
    /// `[sequences * seq_len, d]`. Position `t` attends to positions `<= t`
    /// of its own sequence only.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = self.matrix_dims(q, "attention input")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(format!("{rows} rows do not split into sequences of {seq_len}")));
        }
        let seqs = rows / seq_len;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); seqs * heads * seq_len * seq_len];
        for s in 0..seqs {
            for h in 0..heads {
                let col = h * dh;
                for t in 0..seq_len {
                    let rt = s * seq_len + t;
                    let qt = &qs[rt * d + col..rt * d + col + dh];
                    let p = &mut probs[((s * heads + h) * seq_len + t) * seq_len..][..seq_len];
                    let mut max = T::neg_infinity();
                    for u in 0..=t {
                        let ru = s * seq_len + u;
                        let sc = dot(qt, &ks[ru * d + col..ru * d + col + dh]) * scale;
                        p[u] = sc;
                        max = max.max(sc);
                    }
                    let mut z = T::zero();
                    for pu in p.iter_mut().take(t + 1) {
                        *pu = (*pu - max).exp();
                        z += *pu;
                    }
                    let o = &mut out[rt * d + col..rt * d + col + dh];
                    for u in 0..=t {
                        p[u] = p[u] / z;
                        let ru = s * seq_len + u;
                        axpy(p[u], &vs[ru * d + col..ru * d + col + dh], o);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::CausalAttention { q, k, v, seq_len, heads, probs };
        Ok(self.push(vec![rows, d], out, op, rg))
    }

    /// Per-row convex combination `y[r] = Σ_j w[r, j] · branch_j[r]`.
    ///
    /// The first branch is added first; the remaining terms are summed in
    /// ascending order of value, so permuting branches `1..` together with
    /// the matching weight columns leaves the output bit-identical.
    pub fn mix(&mut self, weights: Var, branches: &[Var]) -> Result<Var> {
        let (rows, kw) = self.matrix_dims(weights, "mix weights")?;
        if kw != branches.len() || branches.is_empty() {
            return Err(Error::dim(format!(
                "mix has {} branches but weight width {kw}",
                branches.len()
            )));
        }
        let shape = self.shape(branches[0]).to_vec();
        for &b in branches {
            self.same_shape(branches[0], b, "mix branches")?;
        }
        let (brows, d) = self.matrix_dims(branches[0], "mix branch")?;
        if brows != rows {
            return Err(Error::dim(format!("mix weights have {rows} rows, branches {brows}")));
        }
        let w = self.data(weights);
        let mut out = vec![T::zero(); rows * d];
        let mut terms = vec![T::zero(); kw.saturating_sub(1)];
        let bdata: Vec<&[T]> = branches.iter().map(|&b| self.data(b)).collect();
        for r in 0..rows {
            for c in 0..d {
                let i = r * d + c;
                let head = w[r * kw] * bdata[0][i];
                if kw == 1 {
                    out[i] = head;
                    continue;
                }
                for j in 1..kw {
                    terms[j - 1] = w[r * kw + j] * bdata[j][i];
                }
                out[i] = head + canonical_sum(&mut terms);
            }
        }
        let mut all = vec![weights];
        all.extend_from_slice(branches);
        let rg = self.rg(&all);
        Ok(self.push(shape, out, Op::Mix { weights, branches: branches.to_vec() }, rg))
    }

    /// Gathers rows of `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for table of {v} rows")));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "logits")?;
        if targets.len() != n {
            return Err(Error::dim(format!("{n} logit rows but {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} out of range for {v} classes")));
        }
        let xs = self.data(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &xs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            loss += z.ln() + max - row[targets[r]];
        }
        loss = loss / T::from_f64(n as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Scalar element at flat index `idx`.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let len = self.data(a).len();
        if idx >= len {
            return Err(Error::dim(format!("pick index {idx} out of range for {len} values")));
        }
        let x = self.data(a)[idx];
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![x], Op::Pick(a, idx), rg))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    /// Returns gradients for every trainable parameter reachable from it.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Value::Param(id) = node.value {
                if node.requires_grad {
                    out.by_param.push((id, g));
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        out.by_param.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = self.data(Var(i));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bd = self.data(*b);
                    self.accum(grads, *a, |ga| gemm_nt_acc(g, bd, ga, m, n, k));
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a);
                    self.accum(grads, *b, |gb| gemm_tn_acc(ad, g, gb, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.requires_grad(x) {
                        self.accum(grads, x, |gx| axpy(T::one(), g, gx));
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(*x) {
                    self.accum(grads, *x, |gx| axpy(T::one(), g, gx));
                }
                if self.requires_grad(*bias) {
                    let d = self.shape(*bias)[0];
                    self.accum(grads, *bias, |gb| {
                        for row in g.chunks_exact(d) {
                            axpy(T::one(), row, gb);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bd = self.data(*b);
                    self.accum(grads, *a, |ga| {
                        for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bd) {
                            *o += gi * bi;
                        }
                    });
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a);
                    self.accum(grads, *b, |gb| {
                        for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ad) {
                            *o += gi * ai;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, |ga| axpy(*c, g, ga));
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                if self.requires_grad(*gamma) {
                    self.accum(grads, *gamma, |gg| {
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for c in 0..d {
                                gg[c] += grow[c] * hrow[c];
                            }
                        }
                    });
                }
                if self.requires_grad(*beta) {
                    self.accum(grads, *beta, |gb| {
                        for grow in g.chunks_exact(d) {
                            axpy(T::one(), grow, gb);
                        }
                    });
                }
                if self.requires_grad(*x) {
                    let gam = self.data(*gamma);
                    let dn = T::from_f64(d as f64);
                    self.accum(grads, *x, |gx| {
                        let mut dh = vec![T::zero(); d];
                        for r in 0..rstd.len() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for c in 0..d {
                                dh[c] = grow[c] * gam[c];
                                mean_dh += dh[c];
                                mean_dh_h += dh[c] * hrow[c];
                            }
                            mean_dh = mean_dh / dn;
                            mean_dh_h = mean_dh_h / dn;
                            for c in 0..d {
                                gx[r * d + c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                self.accum(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let s: T = (0..n).map(|k| out[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += out[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::CausalAttention { q, k, v, seq_len, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *seq_len, *heads, probs, grads);
            }
            Op::Mix { weights, branches } => {
                let kw = branches.len();
                let d = self.shape(branches[0])[1];
                let w = self.data(*weights);
                if self.requires_grad(*weights) {
                    let bdata: Vec<&[T]> = branches.iter().map(|&b| self.data(b)).collect();
                    self.accum(grads, *weights, |gw| {
                        for (r, grow) in g.chunks_exact(d).enumerate() {
                            for (j, bd) in bdata.iter().enumerate() {
                                gw[r * kw + j] += dot(grow, &bd[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
                for (j, &b) in branches.iter().enumerate() {
                    if self.requires_grad(b) {
                        self.accum(grads, b, |gb| {
                            for (r, grow) in g.chunks_exact(d).enumerate() {
                                axpy(w[r * kw + j], grow, &mut gb[r * d..(r + 1) * d]);
                            }
                        });
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                self.accum(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * v..(r + 1) * v];
                        axpy(scale, &probs[r * v..(r + 1) * v], row);
                        row[t] = row[t] - scale;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accum(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Pick(a, idx) => {
                let s = g[0];
                self.accum(grads, *a, |ga| ga[*idx] += s);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (rows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let seqs = rows / seq_len;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); seq_len];
        for s in 0..seqs {
            for h in 0..heads {
                let col = h * dh;
                for t in 0..seq_len {
                    let rt = s * seq_len + t;
                    let p = &probs[((s * heads + h) * seq_len + t) * seq_len..][..seq_len];
                    let go = &g[rt * d + col..rt * d + col + dh];
                    let mut acc = T::zero();
                    for u in 0..=t {
                        let ru = s * seq_len + u;
                        dp[u] = dot(go, &vs[ru * d + col..ru * d + col + dh]);
                        acc += p[u] * dp[u];
                        axpy(p[u], go, &mut gv[ru * d + col..ru * d + col + dh]);
                    }
                    for u in 0..=t {
                        let ru = s * seq_len + u;
                        let ds = p[u] * (dp[u] - acc) * scale;
                        axpy(ds, &ks[ru * d + col..ru * d + col + dh], &mut gq[rt * d + col..rt * d + col + dh]);
                        axpy(ds, &qs[rt * d + col..rt * d + col + dh], &mut gk[ru * d + col..ru * d + col + dh]);
                    }
                }
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(x) {
                self.accum(grads, x, |acc| axpy(T::one(), &gx, acc));
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], x: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let len = self.data(x).len();
        let buf = grads[x.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let dinner = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}
