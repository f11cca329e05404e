//! Reverse-mode tape over dense tensors.
//!
//! Every op appends one node holding its output values and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a single
//! reverse sweep visits each node once.

use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a batched multi-head attention call.
///
/// Query row `b * q_len + i` attends to key rows `b * k_len + j` for
/// `j < key_lengths[b]` (and `j <= i` when causal).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_lengths: Vec<usize>,
    pub causal: bool,
    pub heads: usize,
}

impl AttnLayout {
    fn visible(&self, b: usize, i: usize) -> usize {
        let len = self.key_lengths[b].min(self.k_len);
        if self.causal {
            len.min(i + 1)
        } else {
            len
        }
    }
}

enum Data {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Map(Var, fn(f64) -> f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Embed { table: Var, ids: Vec<u32>, scale: f64 },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64>, mask: Option<Vec<f64>> },
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: Option<u32>, probs: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::MulConst(..) => "mul_const",
            Op::AddConst(..) => "add_const",
            Op::Map(..) => "map",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Embed { .. } => "embed",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    data: Data,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: BTreeMap<usize, Vec<f64>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a tensor leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f64>> {
        self.params
    }

    /// Writes each parameter gradient into its tensor's `grad` slot.
    pub fn populate(&self, store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let g = if store.is_frozen(id) {
                Some(vec![0.0; store.values(id).len()])
            } else {
                Some(self.params.get(&id).cloned().unwrap_or_else(|| vec![0.0; store.values(id).len()]))
            };
            store.tensor_mut(id).set_grad(g).expect("gradient length matches parameter");
        }
    }
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store; inputs come from [`Tape::leaf`].
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), param_nodes: Vec::new() }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape { params: Some(params), nodes: Vec::with_capacity(256), param_nodes: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].data {
            Data::Owned(x) => x,
            Data::Param(id) => self.params.expect("param node without store").values(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).unwrap_or_else(|_| Tensor::zeros(self.shape(v).to_vec()))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        assert_eq!(x.len(), 1, "scalar() on a non-scalar node");
        x[0]
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().unwrap_or(&1);
        let len: usize = shape.iter().product();
        (len / cols.max(1), cols)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data: Data::Owned(data), shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a tensor input; it participates in backward when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(t.into_values(), shape, Op::Leaf, needs)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.push(values, shape, Op::Leaf, false)
    }

    /// Node bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("Tape::param requires a parameter store");
        let needs = !store.is_frozen(id);
        self.nodes.push(Node { data: Data::Param(id), shape: store.shape(id).to_vec(), op: Op::Param(id), needs_grad: needs });
        let v = Var(self.nodes.len() - 1);
        if id.0 >= self.param_nodes.len() {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], Op::MatMul(a, b), needs)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], Op::MatMulNT(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add(a, b), needs)
    }

    /// Adds a length-`n` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (_, n) = self.dims2(x);
        assert_eq!(self.value(bias).len(), n, "add_row bias length");
        let b = self.value(bias);
        let out: Vec<f64> = self.value(x).chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let needs = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::AddRow(x, bias), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu(a), needs)
    }

    /// Elementwise `f` with derivative `df` (evaluated at the input).
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Map(a, df), needs)
    }

    /// Multiplies by a fixed mask (no gradient flows into the mask).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(a).len(), "mul_const mask length");
        let out: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::MulConst(a, mask), needs)
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        assert_eq!(c.len(), self.value(a).len(), "add_const length");
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddConst(a), needs)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        self.mul_const(a, mask)
    }

    /// Row-wise layer normalization followed by the affine map `gamma, beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.value(gamma).len(), n, "layer_norm gamma");
        assert_eq!(self.value(beta).len(), n, "layer_norm beta");
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.dims2(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Softmax(a), needs)
    }

    /// Gathers rows `ids` of `table` and multiplies them by `scale`.
    pub fn embed(&mut self, table: Var, ids: &[u32], scale: f64) -> Var {
        let (vocab, d) = self.dims2(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            out.extend(t[id * d..(id + 1) * d].iter().map(|v| v * scale));
        }
        let needs = self.needs(table);
        self.push(out, vec![ids.len(), d], Op::Embed { table, ids: ids.to_vec(), scale }, needs)
    }

    /// Fused scaled dot-product multi-head attention with padding and causal masks.
    ///
    /// `attn_dropout` is applied to the attention probabilities.
    pub fn attention<R: Rng>(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout, attn_dropout: Option<(f64, &mut R)>) -> Var {
        let (qr, d) = self.dims2(q);
        let (kr, dk) = self.dims2(k);
        assert_eq!(d, dk, "attention q/k width");
        assert_eq!(self.dims2(v), (kr, d), "attention v shape");
        assert_eq!(qr, layout.batch * layout.q_len, "attention query rows");
        assert_eq!(kr, layout.batch * layout.k_len, "attention key rows");
        assert_eq!(layout.key_lengths.len(), layout.batch, "attention key lengths");
        assert!(layout.heads > 0 && d % layout.heads == 0, "attention heads");
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, h) = (layout.q_len, layout.k_len, layout.heads);
        let qs = self.value(q);
        let ks = self.value(k);
        let vs = self.value(v);
        let mut probs = vec![0.0; layout.batch * h * tq * tk];
        let mut mask = attn_dropout.as_ref().map(|_| vec![1.0; probs.len()]);
        let mut out = vec![0.0; qr * d];
        let mut rng_p = attn_dropout;
        for b in 0..layout.batch {
            for hh in 0..h {
                let col = hh * dh;
                for i in 0..tq {
                    let vis = layout.visible(b, i);
                    let base = ((b * h + hh) * tq + i) * tk;
                    let qrow = &qs[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    let p = &mut probs[base..base + tk];
                    for j in 0..vis {
                        let krow = &ks[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                        p[j] = dot(qrow, krow) * scale;
                    }
                    if vis == 0 {
                        continue;
                    }
                    softmax_in_place(&mut p[..vis]);
                    let orow = &mut out[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    for j in 0..vis {
                        let mut w = p[j];
                        if let (Some((pd, rng)), Some(m)) = (rng_p.as_mut(), mask.as_mut()) {
                            let mv = if rng.gen::<f64>() < *pd { 0.0 } else { 1.0 / (1.0 - *pd) };
                            m[base + j] = mv;
                            w *= mv;
                        }
                        let vrow = &vs[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, vec![qr, d], Op::Attention { q, k, v, layout, probs, mask }, needs)
    }

    /// Summed token cross-entropy over rows whose target is not `ignore`.
    ///
    /// Returns the scalar loss node and the number of counted rows.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[u32], ignore: Option<u32>) -> (Var, usize) {
        let (n, vocab) = self.dims2(logits);
        assert_eq!(targets.len(), n, "cross_entropy target count");
        let zs = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..n {
            let t = targets[r];
            if Some(t) == ignore {
                continue;
            }
            assert!((t as usize) < vocab, "target id out of range");
            let row = &zs[r * vocab..(r + 1) * vocab];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            let lse = log_sum_exp(p);
            loss += lse - row[t as usize];
            for x in p.iter_mut() {
                *x = (*x - lse).exp();
            }
            count += 1;
        }
        let needs = self.needs(logits);
        let var = self.push(vec![loss], vec![1], Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs }, needs);
        (var, count)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![s], vec![1], Op::Sum(a), needs)
    }

    /// Fails with a numeric error naming the node if `v` holds NaN/Inf.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(format!("node {} ({})", v.0, self.nodes[v.0].op.name()), "non-finite forward value"))
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("node {i} ({})", node.op.name()), format!("non-finite gradient at flat index {pos}")));
            }
            self.backprop_node(i, node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, index: usize, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {
                out.leaves.insert(index, g);
            }
            Op::Param(id) => {
                let mut g = g;
                let store = self.params.expect("param node without store");
                if let Some(row) = store.fixed_row(*id) {
                    let cols = *store.shape(*id).last().unwrap_or(&1);
                    g[row * cols..(row + 1) * cols].iter_mut().for_each(|x| *x = 0.0);
                }
                match out.params.get_mut(id) {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                    None => {
                        out.params.insert(*id, g);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| gemm(m, n, k, &g, false, bv, true, 1.0, da));
                acc(*b, &mut |db| gemm(k, m, n, av, true, &g, false, 1.0, db));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| gemm(m, n, k, &g, false, bv, false, 1.0, da));
                acc(*b, &mut |db| gemm(n, m, k, &g, true, av, false, 1.0, db));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, &g));
                acc(*b, &mut |db| add_into(db, &g));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |dx| add_into(dx, &g));
                acc(*bias, &mut |db| {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| {
                for (d, gi) in da.iter_mut().zip(&g) {
                    *d += gi * c;
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), x) in da.iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::MulConst(a, mask) => acc(*a, &mut |da| {
                for ((d, gi), m) in da.iter_mut().zip(&g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::AddConst(a) => acc(*a, &mut |da| add_into(da, &g)),
            Op::Map(a, df) => {
                let av = self.value(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), x) in da.iter_mut().zip(&g).zip(av) {
                        *d += gi * df(*x);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).len();
                let gm = self.value(*gamma);
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dh = vec![0.0; n];
                    for (r, ((grow, hrow), dxrow)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dh[c] = grow[c] * gm[c];
                            s1 += dh[c];
                            s2 += dh[c] * hrow[c];
                        }
                        let (m1, m2) = (s1 / n as f64, s2 / n as f64);
                        for c in 0..n {
                            dxrow[c] += rstd[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.node_value(node);
                let (_, n) = self.dims2(*a);
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            drow[c] += yrow[c] * (grow[c] - s);
                        }
                    }
                });
            }
            Op::Embed { table, ids, scale } => {
                let (_, d) = self.dims2(*table);
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c] * scale;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs, mask } => {
                self.attention_backward(*q, *k, *v, layout, probs, mask.as_deref(), &g, grads)
            }
            Op::CrossEntropy { logits, targets, ignore, probs } => {
                let (_, vocab) = self.dims2(*logits);
                let g0 = g[0];
                acc(*logits, &mut |dz| {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &mut dz[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for c in 0..vocab {
                            row[c] += g0 * p[c];
                        }
                        row[t as usize] -= g0;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g0));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        mask: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, d) = self.dims2(q);
        let (tq, tk, h) = (layout.q_len, layout.k_len, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..layout.batch {
            for hh in 0..h {
                let col = hh * dh;
                for i in 0..tq {
                    let vis = layout.visible(b, i);
                    if vis == 0 {
                        continue;
                    }
                    let base = ((b * h + hh) * tq + i) * tk;
                    let p = &probs[base..base + vis];
                    let qoff = (b * tq + i) * d + col;
                    let grow = &g[qoff..qoff + dh];
                    // dP' = dO V^T ; dV += P'^T dO
                    for j in 0..vis {
                        let voff = (b * tk + j) * d + col;
                        let m = mask.map_or(1.0, |m| m[base + j]);
                        dp[j] = dot(grow, &vs[voff..voff + dh]) * m;
                        let w = p[j] * m;
                        if w != 0.0 {
                            for (dvx, gx) in dv[voff..voff + dh].iter_mut().zip(grow) {
                                *dvx += w * gx;
                            }
                        }
                    }
                    let s: f64 = (0..vis).map(|j| dp[j] * p[j]).sum();
                    for j in 0..vis {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * tk + j) * d + col;
                        for c in 0..dh {
                            dq[qoff + c] += ds * ks[koff + c];
                            dk[koff + c] += ds * qs[qoff + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => add_into(existing, &buf),
                slot @ None => *slot = Some(buf),
            }
        }
    }

    fn node_value<'a>(&'a self, node: &'a Node) -> &'a [f64] {
        match &node.data {
            Data::Owned(x) => x,
            Data::Param(id) => self.params.expect("param node without store").values(*id),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Returns `log(sum(exp(row)))` without modifying `row`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, values).unwrap().with_requires_grad(true))
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![0.3, -1.2, 2.0, 5.0, 0.0, -0.5]);
        let s = tape.softmax(x);
        let total = tape.sum(s);
        let grads = tape.backward(total).unwrap();
        for g in grads.wrt(x).unwrap() {
            assert!(g.abs() < 1e-15, "{g}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..40).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
        let x = tape.constant(vec![5, 8], vals);
        let s = tape.softmax(x);
        for row in tape.value(s).chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..48).map(|i| (i as f64 * 1.7).sin() * 3.0 + i as f64).collect();
        let x = tape.constant(vec![4, 12], vals);
        let g = tape.constant(vec![12], vec![1.0; 12]);
        let b = tape.constant(vec![12], vec![0.0; 12]);
        let y = tape.layer_norm(x, g, b, 0.0);
        for row in tape.value(y).chunks(12) {
            let mean = row.iter().sum::<f64>() / 12.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn non_scalar_loss_is_a_contract_violation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_during_backward_names_the_node() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.map(x, f64::sqrt, |x| 0.5 / x.sqrt());
        let z = tape.sum(y);
        // the sum node is the first to receive a NaN gradient
        let w = tape.map(z, |x| x, |_| f64::NAN);
        match tape.backward(w) {
            Err(Error::Numeric { location, .. }) => assert!(location.contains("(sum)"), "{location}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn untouched_leaves_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![2.0]);
        let unused = leaf(&mut tape, vec![1], vec![5.0]);
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(unused).is_none());
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let vals = |n: usize, rng: &mut ChaCha8Rng| (0..n * d).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<_>>();
        let (qv, kv, vv) = (vals(3, &mut rng), vals(3, &mut rng), vals(3, &mut rng));
        let layout = AttnLayout { batch: 1, q_len: 3, k_len: 3, key_lengths: vec![3], causal: true, heads: 2 };
        let run = |kv: &[f64], vv: &[f64]| {
            let mut tape = Tape::new();
            let q = tape.constant(vec![3, d], qv.clone());
            let k = tape.constant(vec![3, d], kv.to_vec());
            let v = tape.constant(vec![3, d], vv.to_vec());
            let o = tape.attention::<ChaCha8Rng>(q, k, v, layout.clone(), None);
            tape.value(o).to_vec()
        };
        let base = run(&kv, &vv);
        let mut kv2 = kv.clone();
        let mut vv2 = vv.clone();
        for c in 0..d {
            kv2[2 * d + c] += 10.0;
            vv2[2 * d + c] -= 7.0;
        }
        let moved = run(&kv2, &vv2);
        assert_eq!(&base[..2 * d], &moved[..2 * d]);
        assert_ne!(&base[2 * d..], &moved[2 * d..]);
    }
}
