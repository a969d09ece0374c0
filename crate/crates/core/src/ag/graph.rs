use std::collections::HashMap;

use crate::ag::params::{Gradients, ParamId, ParamStore};
use crate::ag::tensor::{argmax, top_k_indices, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Right operand equals the trailing axes of the left one.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn plan(op: &'static str, node: usize, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        let nb: usize = b.iter().product();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        if b.len() > a.len() {
            return Err(shape_err(op, node, format!("cannot broadcast {b:?} onto {a:?}")));
        }
        let off = a.len() - b.len();
        if a[off..] == *b {
            return Ok(Bcast::Suffix(nb));
        }
        for (i, &d) in b.iter().enumerate() {
            if d != 1 && d != a[off + i] {
                return Err(shape_err(op, node, format!("cannot broadcast {b:?} onto {a:?}")));
            }
        }
        // Contiguous strides of b, zeroed along broadcast axes.
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                strides[off + i] = s;
            }
            s *= b[i];
        }
        let n: usize = a.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..a.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < a[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Bcast::General(map))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::General(m) => m[i],
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, T),
    L2Normalize(Var),
    MaxLast(Var, Vec<usize>),
    SegmentMax { x: Var, groups: Vec<Vec<usize>>, arg: Vec<Option<usize>> },
    TopKSoftmax { x: Var, selected: Vec<Vec<usize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, idx: Vec<usize> },
    PickLast { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager reverse-mode tape: every op computes its value immediately and
/// records enough to propagate gradients back to trainable parameters.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, node: usize, detail: String) -> Error {
    Error::Shape { op, node, detail }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let w = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if w == 0 { 0 } else { n / w }, w)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `op(a) · op(b)` for a single matrix pair given their stored layouts.
#[allow(clippy::too_many_arguments)]
fn gemm_t<T: Scalar>(a: &[T], ar: usize, ac: usize, ta: bool, b: &[T], br: usize, bc: usize, tb: bool) -> Vec<T> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let at;
    let a = if ta {
        at = transpose(a, ar, ac);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transpose(b, br, bc);
        &bt[..]
    } else {
        b
    };
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, b, &mut c);
    c
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dinner = c * (one + T::lit(3.0) * k * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * dinner;
    (y, dy)
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permuted_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    // For each output position (row-major over the permuted shape), the input offset.
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        offs.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offs
}

impl<T: Scalar> Graph<T> {
    /// A tape that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape for evaluation only; no node requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The stored parameter a leaf node was bound from, if any.
    pub fn bound_param(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Expert selections recorded by a [`Graph::top_k_softmax`] node.
    pub fn top_k_selection(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].op {
            Op::TopKSoftmax { selected, .. } => Some(selected),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    /// Constant input; never receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Param(id), rg);
        self.bound.insert(id, v);
        v
    }

    /// `op(a) · op(b)` for rank-2 operands, or batched over a shared leading axis for rank-3.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let node = self.next_id();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, ar, ac, br, bc) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => {
                return Err(shape_err(
                    "matmul",
                    node,
                    format!("operands {sa:?} x {sb:?} must both be rank 2 or rank 3 with equal batch"),
                ))
            }
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                node,
                format!("inner extents differ: {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            ));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let pa = &da[bi * ar * ac..(bi + 1) * ar * ac];
            let pb = &db[bi * br * bc..(bi + 1) * br * bc];
            out.extend(gemm_t(pa, ar, ac, ta, pb, br, bc, tb));
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Bcast)> {
        let node = self.next_id();
        let plan = Bcast::plan(name, node, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va.data().iter().enumerate().map(|(i, &x)| f(x, vb[plan.at(i)])).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, plan))
    }

    /// Elementwise `a + b`; `b` broadcasts onto `a` along matching-or-1 trailing axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, plan), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, plan), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, plan), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::ln);
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.rows() {
            data.extend(crate::ag::tensor::softmax(row));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis (log-sum-exp form, never `ln(0)` of a rounded probability).
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.rows() {
            data.extend(crate::ag::tensor::log_softmax(row));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit population variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let wn = T::lit(w as f64);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.rows() {
            let mu = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / wn;
            let inv = T::one() / (var + eps).sqrt();
            data.extend(row.iter().map(|&a| (a - mu) * inv));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LayerNorm(x, eps), rg)
    }

    /// Scales each last-axis row to unit Euclidean norm; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.numel());
        for row in v.rows() {
            data.extend(crate::ag::tensor::l2_normalize(row));
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::L2Normalize(x), rg)
    }

    /// Maximum over the last axis. The gradient goes to the first maximal element.
    pub fn max_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, _) = split_last(v.shape());
        let arg: Vec<usize> = v.rows().map(argmax).collect();
        let data = v.rows().zip(&arg).map(|(r, &i)| r[i]).collect();
        let shape = v.shape()[..v.rank().saturating_sub(1)].to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), rows);
        let t = Tensor::new(shape, data).expect("reduced shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxLast(x, arg), rg)
    }

    /// For each group of last-axis positions, the maximum over that group.
    /// Empty groups yield `-inf` and receive no gradient.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let node = self.next_id();
        let v = self.value(x);
        let w = v.last_dim();
        if let Some(bad) = groups.iter().flatten().find(|&&i| i >= w) {
            return Err(shape_err("segment_max", node, format!("index {bad} out of range {w}")));
        }
        let (rows, _) = split_last(v.shape());
        let mut data = Vec::with_capacity(rows * groups.len());
        let mut arg = Vec::with_capacity(rows * groups.len());
        for row in v.rows() {
            for g in groups {
                let mut best: Option<usize> = None;
                for &i in g {
                    if best.is_none_or(|b| row[i] > row[b]) {
                        best = Some(i);
                    }
                }
                data.push(best.map_or(T::neg_infinity(), |b| row[b]));
                arg.push(best);
            }
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = groups.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SegmentMax {
                x,
                groups: groups.to_vec(),
                arg,
            },
            rg,
        ))
    }

    /// Per last-axis row: keep the `k` largest entries (ties to lower index),
    /// softmax over them, and zero the rest. `k = 0` yields all zeros.
    pub fn top_k_softmax(&mut self, x: Var, k: usize) -> Var {
        let v = self.value(x);
        let w = v.last_dim();
        let mut data = vec![T::zero(); v.numel()];
        let mut selected = Vec::new();
        for (r, row) in v.rows().enumerate() {
            let sel = top_k_indices(row, k);
            let vals: Vec<T> = sel.iter().map(|&i| row[i]).collect();
            for (&i, p) in sel.iter().zip(crate::ag::tensor::softmax(&vals)) {
                data[r * w + i] = p;
            }
            selected.push(sel);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::TopKSoftmax { x, selected }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let node = self.next_id();
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", node, "no operands".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", node, format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", node, format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let node = self.next_id();
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", node, format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    /// Row lookup along axis 0 (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let node = self.next_id();
        let s = self.shape(table).to_vec();
        let n = *s.first().ok_or_else(|| shape_err("gather", node, "scalar table".into()))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", node, format!("row {bad} out of range {n}")));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `out[b] = x[b, idx[b]]` for a rank-2 `x`.
    pub fn pick_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let node = self.next_id();
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err("pick_last", node, format!("{} indices into {s:?}", idx.len())));
        }
        let v = self.value(x);
        let data = idx.iter().enumerate().map(|(b, &i)| v.data()[b * s[1] + i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::PickLast { x, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let node = self.next_id();
        let shape = shape.into();
        let t = self.value(x).clone().reshaped(shape).map_err(|e| match e {
            Error::Shape { op, detail, .. } => Error::Shape { op, node, detail },
            other => other,
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let node = self.next_id();
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", node, format!("{perm:?} is not a permutation of {s:?}")));
        }
        let offs = permuted_offsets(&s, perm);
        let src = self.value(x).data();
        let data = offs.iter().map(|&o| src[o]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::lit(v.numel().max(1) as f64);
        let t = Tensor::scalar(v.data().iter().copied().sum::<T>() / n);
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// `x · W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Mean cross-entropy of rank-2 `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits);
        let picked = self.pick_last(lp, labels)?;
        let m = self.mean(picked);
        Ok(self.scale(m, -T::one()))
    }

    /// Reverse sweep from a scalar loss. Every trainable parameter of `store`
    /// gets a gradient; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() != 0 {
            return Err(shape_err(
                "backward",
                loss.0,
                format!("loss must be a scalar of shape [], got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = vec![None; store.len()];
        for id in store.trainable_ids() {
            let shape = store.get(id).shape().to_vec();
            let g = self
                .bound
                .get(&id)
                .filter(|v| v.0 <= loss.0)
                .and_then(|v| grads[v.0].take())
                .map(|d| Tensor::new(shape.clone(), d).expect("gradient shape"))
                .unwrap_or_else(|| Tensor::zeros(shape));
            out[id.0] = Some(g);
        }
        Ok(Gradients::new(out))
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_bcast(&self, g: &[T], b: Var, plan: &Bcast, f: impl Fn(usize, T) -> T) -> Vec<T> {
        let nb = self.value(b).numel();
        let mut out = vec![T::zero(); nb];
        for (i, &gi) in g.iter().enumerate() {
            let j = plan.at(i);
            out[j] = out[j] + f(i, gi);
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (batch, ar, ac, br, bc) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[0], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[1], sb[2])
                };
                let m = if ta { ac } else { ar };
                let n = if tb { br } else { bc };
                let da = self.value(a).data();
                let db = self.value(b).data();
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let mut ga = Vec::with_capacity(if need_a { da.len() } else { 0 });
                let mut gb = Vec::with_capacity(if need_b { db.len() } else { 0 });
                for bi in 0..batch {
                    let pa = &da[bi * ar * ac..(bi + 1) * ar * ac];
                    let pb = &db[bi * br * bc..(bi + 1) * br * bc];
                    let pg = &g[bi * m * n..(bi + 1) * m * n];
                    if need_a {
                        if ta {
                            ga.extend(gemm_t(pb, br, bc, tb, pg, m, n, true));
                        } else {
                            ga.extend(gemm_t(pg, m, n, false, pb, br, bc, !tb));
                        }
                    }
                    if need_b {
                        if tb {
                            gb.extend(gemm_t(pg, m, n, true, pa, ar, ac, ta));
                        } else {
                            gb.extend(gemm_t(pa, ar, ac, !ta, pg, m, n, false));
                        }
                    }
                }
                if need_a {
                    self.accum(grads, a, ga);
                }
                if need_b {
                    self.accum(grads, b, gb);
                }
            }
            Op::Add(a, b, plan) => {
                self.accum(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let gb = self.reduce_bcast(g, *b, plan, |_, gi| gi);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Sub(a, b, plan) => {
                self.accum(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let gb = self.reduce_bcast(g, *b, plan, |_, gi| -gi);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b, plan) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    let ga = g.iter().enumerate().map(|(i, &gi)| gi * vb[plan.at(i)]).collect();
                    self.accum(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.reduce_bcast(g, *b, plan, |i, gi| gi * va[i]);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, g.iter().map(|&gi| gi * c).collect());
            }
            Op::Exp(x) => {
                self.accum(grads, *x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(vx).map(|(&gi, &xi)| gi / xi).collect());
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(vx).map(|(&gi, &xi)| gi * sigmoid(xi)).collect());
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.accum(grads, *x, g.iter().zip(vx).map(|(&gi, &xi)| gi * gelu_parts(xi).1).collect());
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accum(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(w).zip(y.chunks_exact(w)) {
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - s)));
                }
                self.accum(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let w = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(w).zip(y.chunks_exact(w)) {
                    let s: T = gr.iter().copied().sum();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * s));
                }
                self.accum(grads, *x, gx);
            }
            Op::LayerNorm(x, eps) => {
                let vx = self.value(*x);
                let w = vx.last_dim();
                let wn = T::lit(w as f64);
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(vx.rows()) {
                    let mu = xr.iter().copied().sum::<T>() / wn;
                    let var = xr.iter().map(|&a| (a - mu) * (a - mu)).sum::<T>() / wn;
                    let inv = T::one() / (var + *eps).sqrt();
                    let gm = gr.iter().copied().sum::<T>() / wn;
                    let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wn;
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| inv * (gi - gm - yi * gym)));
                }
                self.accum(grads, *x, gx);
            }
            Op::L2Normalize(x) => {
                let vx = self.value(*x);
                let w = vx.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks_exact(w).zip(y.chunks_exact(w)).zip(vx.rows()) {
                    let n = xr.iter().map(|&a| a * a).sum::<T>().sqrt();
                    if n == T::zero() {
                        gx.extend(std::iter::repeat_n(T::zero(), w));
                        continue;
                    }
                    let gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * gy) / n));
                }
                self.accum(grads, *x, gx);
            }
            Op::MaxLast(x, arg) => {
                let w = self.value(*x).last_dim();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, (&gi, &a)) in g.iter().zip(arg).enumerate() {
                    gx[r * w + a] = gi;
                }
                self.accum(grads, *x, gx);
            }
            Op::SegmentMax { x, groups, arg } => {
                let w = self.value(*x).last_dim();
                let ng = groups.len();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (j, (&gi, a)) in g.iter().zip(arg).enumerate() {
                    if let Some(a) = a {
                        let r = j / ng;
                        gx[r * w + a] = gx[r * w + a] + gi;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::TopKSoftmax { x, selected } => {
                let w = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for (r, sel) in selected.iter().enumerate() {
                    let s: T = sel.iter().map(|&c| g[r * w + c] * y[r * w + c]).sum();
                    for &c in sel {
                        gx[r * w + c] = y[r * w + c] * (g[r * w + c] - s);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if self.nodes[p.0].requires_grad {
                        let mut gp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + block]);
                        }
                        self.accum(grads, p, gp);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, inner) = outer_inner(s, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = o * s[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accum(grads, *x, gx);
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let inner: usize = t.shape()[1..].iter().product();
                let mut gt = vec![T::zero(); t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..inner {
                        gt[i * inner + c] = gt[i * inner + c] + g[r * inner + c];
                    }
                }
                self.accum(grads, *table, gt);
            }
            Op::PickLast { x, idx } => {
                let w = self.value(*x).last_dim();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (b, (&gi, &i)) in g.iter().zip(idx).enumerate() {
                    gx[b * w + i] = gi;
                }
                self.accum(grads, *x, gx);
            }
            Op::Reshape(x) => self.accum(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let offs = permuted_offsets(self.shape(*x), perm);
                let mut gx = vec![T::zero(); g.len()];
                for (&o, &gi) in offs.iter().zip(g) {
                    gx[o] = gi;
                }
                self.accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accum(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gi = g[0] / T::lit(n.max(1) as f64);
                self.accum(grads, *x, vec![gi; n]);
            }
        }
    }
}
