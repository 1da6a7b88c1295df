use super::{Graph, LeafKind, NodeId, ReadTracker};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, gemm_nt, gemm_tn, layernorm_stats, Result, Tensor,
    TensorError,
};

/// Layout of a batched attention call.
///
/// `q` is `D x (batch * queries)`, `k` and `v` are `D x (batch * keys)`;
/// sample `b` owns the contiguous column block `b * queries ..` (resp. keys).
/// Rows are split evenly into `heads` groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub scale: f64,
}

pub(crate) enum Op {
    Leaf(LeafKind),
    MatMul,
    Add,
    /// Bias of length rows added to every column.
    AddColBias,
    /// Bias of length cols added to every row.
    AddRowBias,
    Scale(f64),
    Mul,
    Gelu,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxCols,
    Attention { spec: AttentionSpec, probs: Vec<f64> },
    Gather { index: Vec<usize> },
    ConcatCols { widths: Vec<usize> },
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Sum,
}

/// Buffers a backward rule reads, given which parents need gradients.
pub(crate) struct Saved {
    pub inputs: Vec<bool>,
    pub output: bool,
    pub internal_bytes: usize,
}

const F64: usize = std::mem::size_of::<f64>();

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Param) => "param",
            Op::Leaf(LeafKind::Input) => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddColBias => "add_col_bias",
            Op::AddRowBias => "add_row_bias",
            Op::Scale(_) => "scale",
            Op::Mul => "mul",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::SoftmaxCols => "softmax_columns",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather",
            Op::ConcatCols { .. } => "concat_cols",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
        }
    }

    /// Drops buffers that only a backward pass would read.
    pub fn without_buffers(self) -> Self {
        match self {
            Op::LayerNorm { .. } => Op::LayerNorm {
                xhat: Vec::new(),
                rstd: Vec::new(),
            },
            Op::Attention { spec, .. } => Op::Attention {
                spec,
                probs: Vec::new(),
            },
            Op::CrossEntropy { labels, .. } => Op::CrossEntropy {
                labels,
                probs: Vec::new(),
            },
            other => other,
        }
    }

    pub fn internal_bytes(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd } => (xhat.len() + rstd.len()) * F64,
            Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => probs.len() * F64,
            _ => 0,
        }
    }

    pub fn saved(&self, mask: &[bool]) -> Saved {
        let none = |n: usize| vec![false; n];
        match self {
            Op::MatMul | Op::Mul => Saved {
                inputs: vec![mask[1], mask[0]],
                output: false,
                internal_bytes: 0,
            },
            Op::Gelu => Saved {
                inputs: vec![mask[0]],
                output: false,
                internal_bytes: 0,
            },
            Op::SoftmaxCols => Saved {
                inputs: none(1),
                output: mask[0],
                internal_bytes: 0,
            },
            Op::LayerNorm { xhat, rstd } => {
                let mut bytes = 0;
                if mask[0] || mask[1] {
                    bytes += xhat.len() * F64;
                }
                if mask[0] {
                    bytes += rstd.len() * F64;
                }
                Saved {
                    inputs: vec![false, mask[0], false],
                    output: false,
                    internal_bytes: bytes,
                }
            }
            Op::Attention { probs, .. } => Saved {
                inputs: vec![mask[1], mask[0], mask[0] || mask[1]],
                output: false,
                internal_bytes: probs.len() * F64,
            },
            Op::CrossEntropy { probs, .. } => Saved {
                inputs: none(1),
                output: false,
                internal_bytes: if mask[0] { probs.len() * F64 } else { 0 },
            },
            Op::Leaf(_) => Saved {
                inputs: Vec::new(),
                output: false,
                internal_bytes: 0,
            },
            Op::Add | Op::AddColBias | Op::AddRowBias => Saved {
                inputs: none(2),
                output: false,
                internal_bytes: 0,
            },
            Op::ConcatCols { widths } => Saved {
                inputs: none(widths.len()),
                output: false,
                internal_bytes: 0,
            },
            Op::Scale(_) | Op::Gather { .. } | Op::Sum => Saved {
                inputs: none(1),
                output: false,
                internal_bytes: 0,
            },
        }
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?.check_finite("matmul")?;
        Ok(self.push(Op::MatMul, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let out = out.check_finite("add")?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    /// Adds a length-`rows` bias to every column of a matrix.
    pub fn add_col_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = matrix("add_col_bias", self.value(x))?;
        let b = self.value(bias);
        if b.len() != r {
            return Err(TensorError::shape(
                "add_col_bias",
                format!("bias of length {} for {r} rows", b.len()),
            ));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            for v in row {
                *v += bd[i];
            }
        }
        let out = out.check_finite("add_col_bias")?;
        Ok(self.push(Op::AddColBias, vec![x, bias], out))
    }

    /// Adds a length-`cols` bias to every row of a matrix.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = matrix("add_row_bias", self.value(x))?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(TensorError::shape(
                "add_row_bias",
                format!("bias of length {} for {c} columns", b.len()),
            ));
        }
        let bd = b.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bd) {
                *v += b;
            }
        }
        let out = out.check_finite("add_row_bias")?;
        Ok(self.push(Op::AddRowBias, vec![x, bias], out))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let out = self.value(x).scaled(s).check_finite("scale")?;
        Ok(self.push(Op::Scale(s), vec![x], out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?.check_finite("mul")?;
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu_scalar).check_finite("gelu")?;
        Ok(self.push(Op::Gelu, vec![x], out))
    }

    /// Column-wise layer normalization of a `D x n` matrix.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (d, n) = matrix("layernorm", self.value(x))?;
        if d < 2 {
            return Err(TensorError::Contract(format!("layernorm needs D >= 2, got {d}")));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(TensorError::shape(
                "layernorm",
                format!("affine params of length {}/{} for D = {d}", g.len(), b.len()),
            ));
        }
        let stats = layernorm_stats(self.value(x).data(), d, n, eps);
        let mut out = stats.xhat.clone();
        for i in 0..d {
            let (gi, bi) = (g.data()[i], b.data()[i]);
            for v in &mut out[i * n..(i + 1) * n] {
                *v = *v * gi + bi;
            }
        }
        let out = Tensor::new(vec![d, n], out)?.check_finite("layernorm")?;
        Ok(self.push(
            Op::LayerNorm {
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            vec![x, gamma, beta],
            out,
        ))
    }

    pub fn softmax_columns(&mut self, x: NodeId) -> Result<NodeId> {
        let out = crate::tensor::softmax_columns(self.value(x))?;
        Ok(self.push(Op::SoftmaxCols, vec![x], out))
    }

    /// Batched multi-head attention `V softmax(scale * K^T Q)` per sample and head.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec) -> Result<NodeId> {
        let (dq, cq) = matrix("attention", self.value(q))?;
        let (dk, ck) = matrix("attention", self.value(k))?;
        let (dv, cv) = matrix("attention", self.value(v))?;
        if dq != dk || dk != dv {
            return Err(TensorError::shape(
                "attention",
                format!("row counts differ: q {dq}, k {dk}, v {dv}"),
            ));
        }
        if spec.heads == 0 || dq % spec.heads != 0 {
            return Err(TensorError::shape(
                "attention",
                format!("{} heads do not divide D = {dq}", spec.heads),
            ));
        }
        if cq != spec.batch * spec.queries || ck != spec.batch * spec.keys || cv != ck {
            return Err(TensorError::shape(
                "attention",
                format!(
                    "columns q {cq}, k {ck}, v {cv} for batch {} x ({} queries, {} keys)",
                    spec.batch, spec.queries, spec.keys
                ),
            ));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dq,
            &spec,
        );
        let out = Tensor::new(vec![dq, cq], out)?.check_finite("attention")?;
        Ok(self.push(Op::Attention { spec, probs }, vec![q, k, v], out))
    }

    /// `out.flat[i] = x.flat[index[i]]`; covers permutations, slicing and tiling.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { index }, vec![x], out))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        }
        let rows = matrix("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("row counts {rows} and {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols { widths }, parts.to_vec(), out))
    }

    /// Mean softmax cross-entropy of `B x C` logits against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = matrix("cross_entropy", self.value(logits))?;
        if labels.len() != b {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Contract(format!("label {y} with {c} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= sum;
            }
            loss += sum.ln() + max - row[y];
        }
        let out = Tensor::scalar(loss / b as f64).check_finite("cross_entropy")?;
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            out,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum()).check_finite("sum")?;
        Ok(self.push(Op::Sum, vec![x], out))
    }
}

fn prob_index(spec: &AttentionSpec, b: usize, h: usize, i: usize, t: usize) -> usize {
    ((b * spec.heads + h) * spec.keys + i) * spec.queries + t
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: usize, spec: &AttentionSpec) -> (Vec<f64>, Vec<f64>) {
    let AttentionSpec {
        heads,
        batch,
        queries: nq,
        keys: nk,
        scale,
    } = *spec;
    let dh = d / heads;
    let cq = batch * nq;
    let ck = batch * nk;
    let mut out = vec![0.0; d * cq];
    let mut probs = vec![0.0; batch * heads * nk * nq];
    let mut kt = vec![0.0; nk * dh];
    let mut vt = vec![0.0; nk * dh];
    let mut qt = vec![0.0; dh];
    let mut scores = vec![0.0; nk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..nk {
                for r in 0..dh {
                    kt[i * dh + r] = k[(h * dh + r) * ck + b * nk + i];
                    vt[i * dh + r] = v[(h * dh + r) * ck + b * nk + i];
                }
            }
            for t in 0..nq {
                for r in 0..dh {
                    qt[r] = q[(h * dh + r) * cq + b * nq + t];
                }
                let mut max = f64::NEG_INFINITY;
                for i in 0..nk {
                    let mut s = 0.0;
                    for r in 0..dh {
                        s += kt[i * dh + r] * qt[r];
                    }
                    let s = s * scale;
                    scores[i] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = 1.0 / sum;
                for (i, s) in scores.iter_mut().enumerate() {
                    *s *= inv;
                    probs[prob_index(spec, b, h, i, t)] = *s;
                }
                for r in 0..dh {
                    let mut acc = 0.0;
                    for i in 0..nk {
                        acc += vt[i * dh + r] * scores[i];
                    }
                    out[(h * dh + r) * cq + b * nq + t] = acc;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of one node's parents; `None` where the mask says none is needed.
pub(crate) fn backward(
    graph: &Graph,
    id: NodeId,
    g: &Tensor,
    mask: &[bool],
    rt: &mut ReadTracker,
) -> Result<Vec<Option<Tensor>>> {
    let node = &graph.nodes[id.0];
    let p = &node.parents;
    let shape_of = |i: usize| graph.value(p[i]).shape().to_vec();
    let out: Vec<Option<Tensor>> = match &node.op {
        Op::Leaf(_) => Vec::new(),
        Op::MatMul => {
            let (m, q) = (shape_of(0)[0], shape_of(0)[1]);
            let r = shape_of(1)[1];
            let ga = if mask[0] {
                let b = rt.value(graph, p[1]);
                let mut buf = vec![0.0; m * q];
                gemm_nt(g.data(), b.data(), &mut buf, m, r, q);
                Some(Tensor::new(vec![m, q], buf)?)
            } else {
                None
            };
            let gb = if mask[1] {
                let a = rt.value(graph, p[0]);
                let mut buf = vec![0.0; q * r];
                gemm_tn(a.data(), g.data(), &mut buf, q, m, r);
                Some(Tensor::new(vec![q, r], buf)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Add => vec![
            mask[0].then(|| g.clone()),
            mask[1].then(|| g.clone()),
        ],
        Op::AddColBias => {
            let c = g.cols();
            let gb = mask[1].then(|| {
                let sums = g.data().chunks(c).map(|row| row.iter().sum()).collect();
                Tensor::new(shape_of(1), sums).expect("bias shape")
            });
            vec![mask[0].then(|| g.clone()), gb]
        }
        Op::AddRowBias => {
            let c = g.cols();
            let gb = mask[1].then(|| {
                let mut sums = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (s, v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                Tensor::new(shape_of(1), sums).expect("bias shape")
            });
            vec![mask[0].then(|| g.clone()), gb]
        }
        Op::Scale(s) => vec![Some(g.scaled(*s))],
        Op::Mul => {
            let ga = if mask[0] {
                let b = rt.value(graph, p[1]);
                let d = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Some(Tensor::new(g.shape().to_vec(), d)?)
            } else {
                None
            };
            let gb = if mask[1] {
                let a = rt.value(graph, p[0]);
                let d = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
                Some(Tensor::new(g.shape().to_vec(), d)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Gelu => {
            let x = rt.value(graph, p[0]);
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d)?)]
        }
        Op::LayerNorm { xhat, rstd } => {
            let (d, n) = (g.rows(), g.cols());
            let gd = g.data();
            let gbeta = mask[2].then(|| {
                let s = gd.chunks(n).map(|row| row.iter().sum()).collect();
                Tensor::new(vec![d], s).expect("beta shape")
            });
            if mask[0] || mask[1] {
                rt.internal(id);
            }
            let ggamma = mask[1].then(|| {
                let s = (0..d)
                    .map(|i| (0..n).map(|j| gd[i * n + j] * xhat[i * n + j]).sum())
                    .collect();
                Tensor::new(vec![d], s).expect("gamma shape")
            });
            let gx = if mask[0] {
                let gamma = rt.value(graph, p[1]).data().to_vec();
                let mut out = vec![0.0; d * n];
                let inv_d = 1.0 / d as f64;
                for j in 0..n {
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    for i in 0..d {
                        let dy = gd[i * n + j] * gamma[i];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[i * n + j];
                    }
                    mean_dy *= inv_d;
                    mean_dy_xhat *= inv_d;
                    for i in 0..d {
                        let dy = gd[i * n + j] * gamma[i];
                        out[i * n + j] = rstd[j] * (dy - mean_dy - xhat[i * n + j] * mean_dy_xhat);
                    }
                }
                Some(Tensor::new(vec![d, n], out)?)
            } else {
                None
            };
            vec![gx, ggamma, gbeta]
        }
        Op::SoftmaxCols => {
            let y = rt.value(graph, id);
            let (r, c) = (y.rows(), y.cols());
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![0.0; r * c];
            for j in 0..c {
                let dot: f64 = (0..r).map(|i| yd[i * c + j] * gd[i * c + j]).sum();
                for i in 0..r {
                    out[i * c + j] = yd[i * c + j] * (gd[i * c + j] - dot);
                }
            }
            vec![Some(Tensor::new(vec![r, c], out)?)]
        }
        Op::Attention { spec, probs } => {
            rt.internal(id);
            attention_backward(graph, p, g, mask, spec, probs, rt)?
        }
        Op::Gather { index } => {
            let mut buf = vec![0.0; graph.value(p[0]).len()];
            for (gv, &i) in g.data().iter().zip(index) {
                buf[i] += gv;
            }
            vec![Some(Tensor::new(shape_of(0), buf)?)]
        }
        Op::ConcatCols { widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.rows();
            let mut offset = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (k, &w) in widths.iter().enumerate() {
                if mask[k] {
                    let mut buf = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        buf.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    res.push(Some(Tensor::new(vec![rows, w], buf)?));
                } else {
                    res.push(None);
                }
                offset += w;
            }
            res
        }
        Op::CrossEntropy { labels, probs } => {
            rt.internal(id);
            let b = labels.len();
            let c = probs.len() / b;
            let scale = g.item() / b as f64;
            let mut buf = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                buf[i * c + y] -= 1.0;
            }
            for v in &mut buf {
                *v *= scale;
            }
            vec![Some(Tensor::new(vec![b, c], buf)?)]
        }
        Op::Sum => vec![Some(Tensor::full(&shape_of(0), g.item()))],
    };
    Ok(out)
}

fn attention_backward(
    graph: &Graph,
    p: &[NodeId],
    g: &Tensor,
    mask: &[bool],
    spec: &AttentionSpec,
    probs: &[f64],
    rt: &mut ReadTracker,
) -> Result<Vec<Option<Tensor>>> {
    let AttentionSpec {
        heads,
        batch,
        queries: nq,
        keys: nk,
        scale,
    } = *spec;
    let d = g.rows();
    let dh = d / heads;
    let cq = batch * nq;
    let ck = batch * nk;
    let need_scores = mask[0] || mask[1];
    let q = mask[1].then(|| rt.value(graph, p[0]).data());
    let k = mask[0].then(|| rt.value(graph, p[1]).data());
    let v = need_scores.then(|| rt.value(graph, p[2]).data());
    let gd = g.data();
    let mut gq = mask[0].then(|| vec![0.0; d * cq]);
    let mut gk = mask[1].then(|| vec![0.0; d * ck]);
    let mut gv = mask[2].then(|| vec![0.0; d * ck]);
    let mut ds = vec![0.0; nk];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..nq {
                let pcol = |i: usize| probs[prob_index(spec, b, h, i, t)];
                if let Some(gv) = gv.as_mut() {
                    for i in 0..nk {
                        let pi = pcol(i);
                        for r in 0..dh {
                            let row = h * dh + r;
                            gv[row * ck + b * nk + i] += gd[row * cq + b * nq + t] * pi;
                        }
                    }
                }
                if !need_scores {
                    continue;
                }
                let v = v.expect("values retained");
                let mut dot = 0.0;
                for i in 0..nk {
                    let mut dp = 0.0;
                    for r in 0..dh {
                        let row = h * dh + r;
                        dp += v[row * ck + b * nk + i] * gd[row * cq + b * nq + t];
                    }
                    ds[i] = dp;
                    dot += pcol(i) * dp;
                }
                for i in 0..nk {
                    ds[i] = pcol(i) * (ds[i] - dot) * scale;
                }
                if let (Some(gq), Some(k)) = (gq.as_mut(), k) {
                    for r in 0..dh {
                        let row = h * dh + r;
                        let mut acc = 0.0;
                        for i in 0..nk {
                            acc += k[row * ck + b * nk + i] * ds[i];
                        }
                        gq[row * cq + b * nq + t] += acc;
                    }
                }
                if let (Some(gk), Some(q)) = (gk.as_mut(), q) {
                    for r in 0..dh {
                        let row = h * dh + r;
                        let qv = q[row * cq + b * nq + t];
                        for i in 0..nk {
                            gk[row * ck + b * nk + i] += qv * ds[i];
                        }
                    }
                }
            }
        }
    }
    let wrap = |buf: Option<Vec<f64>>, cols: usize| -> Result<Option<Tensor>> {
        buf.map(|b| Tensor::new(vec![d, cols], b)).transpose()
    };
    Ok(vec![wrap(gq, cq)?, wrap(gk, ck)?, wrap(gv, ck)?])
}
