use super::{Float, Node, Tensor};
use crate::error::{Error, Result};

const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Float = 0.044_715;

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Minimum(Tensor, Tensor),
    Scale(Tensor, Float),
    AddScalar(Tensor),
    BroadcastTo(Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    GatherRows { table: Tensor, ids: Vec<usize> },
    Pick { x: Tensor, idx: Vec<usize> },
    Softmax(Tensor),
    LogSoftmax(Tensor),
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<Float>, inv_std: Vec<Float> },
    Gelu(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Softplus(Tensor),
    Clamp { x: Tensor, lo: Float, hi: Float },
    CrossEntropy { logits: Tensor, targets: Vec<usize>, probs: Vec<Float> },
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { x: Tensor, axis: usize, start: usize },
    Sum(Tensor),
    SumLast(Tensor),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Minimum(..) => "minimum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::Clamp { .. } => "clamp",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::BroadcastTo(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Softplus(x)
            | Op::Sum(x)
            | Op::SumLast(x) => vec![x],
            Op::GatherRows { table, .. } => vec![table],
            Op::Pick { x, .. } | Op::Clamp { x, .. } | Op::Slice { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Concat { parts, .. } => parts.iter().collect(),
        }
    }

    /// Vector-Jacobian products, one entry per parent (None = zero).
    pub(crate) fn backward(&self, out: &Node, g: &[Float]) -> Vec<Option<Vec<Float>>> {
        match self {
            Op::MatMul(a, b) => {
                let (batch, m, k, n) = matmul_dims(a.shape(), b.shape());
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for bi in 0..batch {
                    let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let bd = &b.data()[bi * k * n..(bi + 1) * k * n];
                    let gd = &g[bi * m * n..(bi + 1) * m * n];
                    if a.requires_grad() {
                        matmul_nt(gd, bd, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                    if b.requires_grad() {
                        matmul_tn(ad, gd, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Add(..) => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub(..) => vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => vec![
                Some(g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
                Some(g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
            ],
            Op::Minimum(a, b) => {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a.data()[i] <= b.data()[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(_, s) => vec![Some(g.iter().map(|x| x * s).collect())],
            Op::AddScalar(_) => vec![Some(g.to_vec())],
            Op::BroadcastTo(x) => {
                let mut gx = vec![0.0; x.numel()];
                for (i, src) in broadcast_index(x.shape(), &out.shape).into_iter().enumerate() {
                    gx[src] += g[i];
                }
                vec![Some(gx)]
            }
            Op::Transpose(x) => {
                let (batch, m, n) = last_two(x.shape());
                vec![Some(transpose_data(g, batch, n, m))]
            }
            Op::Reshape(_) => vec![Some(g.to_vec())],
            Op::GatherRows { table, ids } => {
                let h = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * h..(id + 1) * h];
                    dst.iter_mut().zip(&g[r * h..(r + 1) * h]).for_each(|(d, s)| *d += s);
                }
                vec![Some(gt)]
            }
            Op::Pick { x, idx } => {
                let v = last_dim(x.shape());
                let mut gx = vec![0.0; x.numel()];
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * v + j] += g[r];
                }
                vec![Some(gx)]
            }
            Op::Softmax(_) => {
                let v = last_dim(&out.shape);
                let y = &out.data;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / v {
                    let s = r * v..(r + 1) * v;
                    let dot: Float = g[s.clone()].iter().zip(&y[s.clone()]).map(|(g, y)| g * y).sum();
                    for i in s {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::LogSoftmax(_) => {
                let v = last_dim(&out.shape);
                let y = &out.data;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / v {
                    let s = r * v..(r + 1) * v;
                    let gsum: Float = g[s.clone()].iter().sum();
                    for i in s {
                        gx[i] = g[i] - y[i].exp() * gsum;
                    }
                }
                vec![Some(gx)]
            }
            Op::LayerNorm { gamma, xhat, inv_std, .. } => {
                let h = gamma.numel();
                let rows = xhat.len() / h;
                let gam = gamma.data();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; h];
                let mut gb = vec![0.0; h];
                let hf = h as Float;
                for r in 0..rows {
                    let off = r * h;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..h {
                        let gi = g[off + j];
                        gg[j] += gi * xhat[off + j];
                        gb[j] += gi;
                        let d = gi * gam[j];
                        sum_d += d;
                        sum_dx += d * xhat[off + j];
                    }
                    for j in 0..h {
                        let d = g[off + j] * gam[j];
                        gx[off + j] = inv_std[r] / hf * (hf * d - sum_d - xhat[off + j] * sum_dx);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }
            Op::Gelu(x) => {
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(gx)]
            }
            Op::Exp(_) => vec![Some(out.data.iter().zip(g).map(|(y, g)| y * g).collect())],
            Op::Ln(x) => vec![Some(x.data().iter().zip(g).map(|(x, g)| g / x).collect())],
            Op::Softplus(x) => vec![Some(x.data().iter().zip(g).map(|(&x, g)| g * sigmoid(x)).collect())],
            Op::Clamp { x, lo, hi } => vec![Some(
                x.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect(),
            )],
            Op::CrossEntropy { logits, targets, probs } => {
                let v = last_dim(logits.shape());
                let mut gx = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        gx[r * v + j] = g[r] * probs[r * v + j];
                    }
                    gx[r * v + t] -= g[r];
                }
                vec![Some(gx)]
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(&out.shape, *axis);
                let total = out.shape[*axis];
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = p.shape()[*axis];
                        let mut gp = vec![0.0; p.numel()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        offset += len;
                        Some(gp)
                    })
                    .collect()
            }
            Op::Slice { x, axis, start } => {
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let total = x.shape()[*axis];
                let len = out.shape[*axis];
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gx)]
            }
            Op::Sum(x) => vec![Some(vec![g[0]; x.numel()])],
            Op::SumLast(x) => {
                let v = last_dim(x.shape());
                vec![Some((0..x.numel()).map(|i| g[i / v]).collect())]
            }
        }
    }
}

pub fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: Float) -> Float {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid(x: Float) -> Float {
    -softplus(-x)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn last_two(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    if a.len() == 2 {
        (1, a[0], a[1], b[1])
    } else {
        (a[0], a[1], a[2], b[2])
    }
}

/// c[m×n] += a[m×k] · b[k×n]
fn matmul_nn(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
fn matmul_nt(a: &[Float], b: &[Float], c: &mut [Float], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<Float>();
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_tn(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
}

fn transpose_data(x: &[Float], batch: usize, m: usize, n: usize) -> Vec<Float> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = x[off + i * n + j];
            }
        }
    }
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat source index in `from`.
fn broadcast_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let r = to.len();
    let pad = r - from.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..from.len()).rev() {
        strides[i + pad] = if from[i] == 1 { 0 } else { s };
        s *= from[i];
    }
    let n: usize = to.iter().product();
    let mut idx = vec![0usize; r];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl Tensor {
    fn broadcast_pair(&self, other: &Tensor, op: &'static str) -> Result<(Tensor, Tensor)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        Ok((self.broadcast_to(&shape)?, other.broadcast_to(&shape)?))
    }

    fn map(&self, f: impl Fn(Float) -> Float) -> Vec<Float> {
        self.data().iter().map(|&x| f(x)).collect()
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let ok = match (a.len(), b.len()) {
            (2, 2) => a[1] == b[0],
            (3, 3) => a[0] == b[0] && a[2] == b[1],
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (batch, m, k, n) = matmul_dims(a, b);
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            matmul_nn(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                &mut c[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if batch == 1 && a.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Tensor::from_op(c, shape, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::from_op(data, a.shape().to_vec(), Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::from_op(data, a.shape().to_vec(), Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Tensor::from_op(data, a.shape().to_vec(), Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, "minimum")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        Tensor::from_op(data, a.shape().to_vec(), Op::Minimum(a, b))
    }

    pub fn scale(&self, s: Float) -> Result<Tensor> {
        Tensor::from_op(self.map(|x| x * s), self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: Float) -> Result<Tensor> {
        Tensor::from_op(self.map(|x| x + s), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let data = broadcast_index(self.shape(), shape).into_iter().map(|i| self.data()[i]).collect();
        Tensor::from_op(data, shape.to_vec(), Op::BroadcastTo(self.clone()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape().len() < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let (batch, m, n) = last_two(self.shape());
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Tensor::from_op(transpose_data(self.data(), batch, m, n), shape, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        super::check_shape(self.numel(), shape)?;
        Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone()))
    }

    /// Embedding lookup: rows of a `[V,H]` table, giving `[ids.len(), H]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape().to_vec(),
                reason: "gather_rows needs a [V,H] table".into(),
            });
        }
        let (v, h) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id: id as u32, vocab: v });
            }
            data.extend_from_slice(&self.data()[id * h..(id + 1) * h]);
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids"));
        }
        Tensor::from_op(data, vec![ids.len(), h], Op::GatherRows { table: self.clone(), ids: ids.to_vec() })
    }

    /// One entry from each row of the last axis: `[.., V] -> [..]` flattened to `[rows]`.
    pub fn pick(&self, idx: &[usize]) -> Result<Tensor> {
        let v = last_dim(self.shape());
        let rows = self.numel() / v;
        if idx.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: self.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= v {
                return Err(Error::TokenOutOfRange { id: j as u32, vocab: v });
            }
            data.push(self.data()[r * v + j]);
        }
        Tensor::from_op(data, vec![rows], Op::Pick { x: self.clone(), idx: idx.to_vec() })
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let v = last_dim(self.shape());
        let mut out = self.to_vec();
        for row in out.chunks_mut(v) {
            let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let v = last_dim(self.shape());
        let mut out = self.to_vec();
        for row in out.chunks_mut(v) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::LogSoftmax(self.clone()))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of shape `[H]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: Float) -> Result<Tensor> {
        let h = last_dim(self.shape());
        if gamma.shape() != [h] || beta.shape() != [h] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / h;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data()[r * h..(r + 1) * h];
            let mean = x.iter().sum::<Float>() / h as Float;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / h as Float;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let xh = (x[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * gamma.data()[j] + beta.data()[j];
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, inv_std },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::from_op(self.map(Float::exp), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Result<Tensor> {
        Tensor::from_op(self.map(Float::ln), self.shape().to_vec(), Op::Ln(self.clone()))
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&self) -> Result<Tensor> {
        Tensor::from_op(self.map(softplus), self.shape().to_vec(), Op::Softplus(self.clone()))
    }

    /// `ln σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&self) -> Result<Tensor> {
        self.neg()?.softplus()?.neg()
    }

    pub fn clamp(&self, lo: Float, hi: Float) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        Tensor::from_op(self.map(|x| x.clamp(lo, hi)), self.shape().to_vec(), Op::Clamp { x: self.clone(), lo, hi })
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Per-row cross-entropy of `[.., V]` logits against integer targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let v = last_dim(self.shape());
        let rows = self.numel() / v;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; self.numel()];
        let mut loss = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t as u32, vocab: v });
            }
            let row = &self.data()[r * v..(r + 1) * v];
            let lse = logsumexp(row);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            loss.push(lse - row[t]);
        }
        Tensor::from_op(loss, vec![rows], Op::CrossEntropy { logits: self.clone(), targets: targets.to_vec(), probs })
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat parts"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} for rank {rank}")));
        }
        for p in &parts[1..] {
            let ok = p.shape().len() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(data, shape, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("slice axis {axis} [{start}, {})", start + len),
            });
        }
        let (outer, inner) = outer_inner(shape, axis);
        let total = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(data, out_shape, Op::Slice { x: self.clone(), axis, start })
    }

    pub fn sum(&self) -> Result<Tensor> {
        Tensor::from_op(vec![self.data().iter().sum()], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as Float)
    }

    /// Sums out the last axis. A rank-1 input yields shape `[1]`.
    pub fn sum_last(&self) -> Result<Tensor> {
        let v = last_dim(self.shape());
        let data = self.data().chunks(v).map(|c| c.iter().sum()).collect();
        let mut shape = self.shape()[..self.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op(data, shape, Op::SumLast(self.clone()))
    }
}

pub(crate) fn logsumexp(row: &[Float]) -> Float {
    let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<Float>().ln()
}
