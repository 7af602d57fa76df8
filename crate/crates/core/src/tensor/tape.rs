//! Computation tape: records forward operations and replays them in reverse
//! to accumulate gradients.
//!
//! Nodes are appended in forward order, so input indices always precede the
//! node that consumes them and one reverse sweep visits every node exactly
//! once. Gradients accumulate additively when a node feeds several consumers.

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add { a: usize, b: usize },
    /// Matrix `[r, c]` plus a row vector `[c]` broadcast over rows.
    AddRow { x: usize, row: usize },
    /// Elementwise product of two same-shape tensors.
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Gelu { x: usize },
    SoftmaxLastDim { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    /// Row lookup into a `[rows, c]` table; backward scatter-adds.
    GatherRows { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    SumAll { x: usize },
    /// Mean over rows of `[r, c]`, producing `[1, c]`.
    MeanRows { x: usize },
    /// Mean negative log-softmax over non-ignored positions of `[t, v]` logits.
    CrossEntropyLogits { logits: usize, targets: Vec<usize>, ignore: Vec<bool> },
    /// Mean binary cross-entropy with logits against per-element targets.
    BceWithLogits { x: usize, targets: Vec<f64> },
    /// 1-D convolution along the frame axis of `[t, h, w, c]`, zero padding k/2.
    TemporalConv { x: usize, w: usize, b: usize, stride: usize },
    /// 2-D convolution over the spatial axes of `[t, h, w, c]`, zero padding k/2.
    SpatialConv { x: usize, w: usize, b: usize, stride: usize },
    /// `[t, h, w, c]` -> `[t, c]` average over spatial positions.
    GlobalAvgPoolSpatial { x: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Treats a 1-D shape as a single row.
fn dims2(s: &[usize]) -> (usize, usize) {
    match s.len() {
        1 => (1, s[0]),
        2 => (s[0], s[1]),
        _ => panic!("expected 1-D or 2-D node, got shape {s:?}"),
    }
}

/// Records operations for one forward pass. Single-writer: one tape per
/// sample or per training step; distinct tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Output length of a padded strided conv axis (padding k/2 on both sides).
pub fn conv_out_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * (kernel / 2) - kernel) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, op, needs_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. Its gradient is available after backward
    /// when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> NodeId {
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        dims2(&self.nodes[id.0].shape)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                got: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(data, shape, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.rows_cols(x);
        let (rr, rc) = self.rows_cols(row);
        if rr != 1 || rc != c {
            return Err(TensorError::ShapeMismatch {
                expected: format!("[1, {c}]"),
                got: format!("{:?}", self.nodes[row.0].shape),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x.0) || self.needs(row.0);
        Ok(self.push(data, shape, Op::AddRow { x: x.0, row: row.0 }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                got: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(data, shape, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x.0);
        self.push(data, shape, Op::Scale { x: x.0, c }, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                expected: format!("inner dim {k}"),
                got: format!("inner dim {k2}"),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(data, vec![m, n], Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(x);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x.0);
        self.push(data, vec![c, r], Op::Transpose { x: x.0 }, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x.0);
        self.push(data, shape, Op::Gelu { x: x.0 }, ng)
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let last = *shape.last().expect("softmax needs at least one dim");
        assert!(last >= 1, "softmax over empty last dim");
        let mut data = self.nodes[x.0].data.clone();
        for slice in data.chunks_mut(last) {
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in slice.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(x.0);
        self.push(data, shape, Op::SoftmaxLastDim { x: x.0 }, ng)
    }

    /// Per-slice normalization over the last dimension followed by an affine
    /// transform with `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().expect("layer_norm needs at least one dim");
        if self.nodes[gamma.0].data.len() != d || self.nodes[beta.0].data.len() != d {
            return Err(TensorError::ShapeMismatch {
                expected: format!("[{d}]"),
                got: format!(
                    "gamma {:?}, beta {:?}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        let gdat = self.nodes[gamma.0].data.clone();
        let bdat = self.nodes[beta.0].data.clone();
        let mut data = self.nodes[x.0].data.clone();
        for slice in data.chunks_mut(d) {
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in slice.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gdat[j] + bdat[j];
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(data, shape, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, ng))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, c) = self.rows_cols(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfVocab { id, vocab: rows });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * c..(id + 1) * c]);
        }
        let ng = self.needs(table.0);
        Ok(self.push(
            data,
            vec![ids.len(), c],
            Op::GatherRows { table: table.0, ids: ids.to_vec() },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(x);
        assert!(start + len <= r, "row slice out of range");
        let data = self.nodes[x.0].data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x.0);
        self.push(data, vec![len, c], Op::SliceRows { x: x.0, start, len }, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(x);
        assert!(start + len <= c, "column slice out of range");
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x.0);
        self.push(data, vec![r, len], Op::SliceCols { x: x.0, start, len }, ng)
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let (_, c) = self.rows_cols(xs[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c2) = self.rows_cols(x);
            if c2 != c {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("{c} columns"),
                    got: format!("{c2} columns"),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[x.0].data);
        }
        let ng = xs.iter().any(|x| self.needs(x.0));
        Ok(self.push(data, vec![rows, c], Op::ConcatRows { xs: xs.iter().map(|x| x.0).collect() }, ng))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let (r, _) = self.rows_cols(xs[0]);
        let mut total_c = 0;
        for &x in xs {
            let (r2, c) = self.rows_cols(x);
            if r2 != r {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("{r} rows"),
                    got: format!("{r2} rows"),
                });
            }
            total_c += c;
        }
        let mut data = vec![0.0; r * total_c];
        let mut offset = 0;
        for &x in xs {
            let (_, c) = self.rows_cols(x);
            let src = &self.nodes[x.0].data;
            for i in 0..r {
                data[i * total_c + offset..i * total_c + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ng = xs.iter().any(|x| self.needs(x.0));
        Ok(self.push(data, vec![r, total_c], Op::ConcatCols { xs: xs.iter().map(|x| x.0).collect() }, ng))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x.0);
        self.push(vec![s], vec![1], Op::SumAll { x: x.0 }, ng)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(x);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let ng = self.needs(x.0);
        self.push(data, vec![1, c], Op::MeanRows { x: x.0 }, ng)
    }

    /// Mean negative log-softmax of the target class over non-ignored rows.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<NodeId, TensorError> {
        let (t, v) = self.rows_cols(logits);
        if targets.len() != t || ignore.len() != t {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{t} targets and mask entries"),
                got: format!("{} targets, {} mask entries", targets.len(), ignore.len()),
            });
        }
        let used = ignore.iter().filter(|m| !**m).count();
        if used == 0 {
            return Err(TensorError::EmptyLossSet);
        }
        let mut total = 0.0;
        for i in 0..t {
            if ignore[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::IndexOutOfVocab { id: targets[i], vocab: v });
            }
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[targets[i]] - lse;
        }
        let ng = self.needs(logits.0);
        Ok(self.push(
            vec![total / used as f64],
            vec![1],
            Op::CrossEntropyLogits { logits: logits.0, targets: targets.to_vec(), ignore: ignore.to_vec() },
            ng,
        ))
    }

    /// Mean binary cross-entropy of logits against {0,1} targets.
    pub fn bce_with_logits(&mut self, x: NodeId, targets: &[f64]) -> Result<NodeId, TensorError> {
        let n = self.nodes[x.0].data.len();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{n} targets"),
                got: format!("{}", targets.len()),
            });
        }
        let mut total = 0.0;
        for (z, y) in self.nodes[x.0].data.iter().zip(targets) {
            total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let ng = self.needs(x.0);
        Ok(self.push(
            vec![total / n as f64],
            vec![1],
            Op::BceWithLogits { x: x.0, targets: targets.to_vec() },
            ng,
        ))
    }

    /// Convolution along the frame axis. `x`: `[t, h, w, cin]`,
    /// `w`: `[k, cin, cout]`, `b`: `[cout]`.
    pub fn temporal_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 3 || xs[3] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                expected: "x [t,h,w,cin], w [k,cin,cout]".into(),
                got: format!("x {xs:?}, w {ws:?}"),
            });
        }
        let (t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cout) = (ws[0], ws[2]);
        let pad = k / 2;
        let t_out = conv_out_len(t, k, stride);
        let xd = &self.nodes[x.0].data;
        let wdat = &self.nodes[w.0].data;
        let bdat = &self.nodes[b.0].data;
        let mut out = vec![0.0; t_out * h * wd * cout];
        for to in 0..t_out {
            for hh in 0..h {
                for ww in 0..wd {
                    let o_base = ((to * h + hh) * wd + ww) * cout;
                    out[o_base..o_base + cout].copy_from_slice(bdat);
                    for dt in 0..k {
                        let ti = (to * stride + dt) as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let i_base = (((ti as usize) * h + hh) * wd + ww) * cin;
                        for ci in 0..cin {
                            let xv = xd[i_base + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let w_base = (dt * cin + ci) * cout;
                            for co in 0..cout {
                                out[o_base + co] += xv * wdat[w_base + co];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            out,
            vec![t_out, h, wd, cout],
            Op::TemporalConv { x: x.0, w: w.0, b: b.0, stride },
            ng,
        ))
    }

    /// Convolution over the spatial axes. `x`: `[t, h, w, cin]`,
    /// `w`: `[k, k, cin, cout]`, `b`: `[cout]`.
    pub fn spatial_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || ws[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                expected: "x [t,h,w,cin], w [k,k,cin,cout]".into(),
                got: format!("x {xs:?}, w {ws:?}"),
            });
        }
        let (t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cout) = (ws[0], ws[3]);
        let pad = k / 2;
        let h_out = conv_out_len(h, k, stride);
        let w_out = conv_out_len(wd, k, stride);
        let xd = &self.nodes[x.0].data;
        let wdat = &self.nodes[w.0].data;
        let bdat = &self.nodes[b.0].data;
        let mut out = vec![0.0; t * h_out * w_out * cout];
        for tt in 0..t {
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let o_base = ((tt * h_out + ho) * w_out + wo) * cout;
                    out[o_base..o_base + cout].copy_from_slice(bdat);
                    for dh in 0..k {
                        let hi = (ho * stride + dh) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..k {
                            let wi = (wo * stride + dw) as isize - pad as isize;
                            if wi < 0 || wi >= wd as isize {
                                continue;
                            }
                            let i_base = ((tt * h + hi as usize) * wd + wi as usize) * cin;
                            for ci in 0..cin {
                                let xv = xd[i_base + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let w_base = ((dh * k + dw) * cin + ci) * cout;
                                for co in 0..cout {
                                    out[o_base + co] += xv * wdat[w_base + co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        Ok(self.push(
            out,
            vec![t, h_out, w_out, cout],
            Op::SpatialConv { x: x.0, w: w.0, b: b.0, stride },
            ng,
        ))
    }

    /// Average over spatial positions, keeping the temporal token axis.
    pub fn global_avg_pool_spatial(&mut self, x: NodeId) -> NodeId {
        let xs = self.nodes[x.0].shape.clone();
        assert_eq!(xs.len(), 4, "pool expects [t,h,w,c]");
        let (t, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; t * c];
        for tt in 0..t {
            for hh in 0..h {
                for ww in 0..w {
                    let base = ((tt * h + hh) * w + ww) * c;
                    for cc in 0..c {
                        out[tt * c + cc] += src[base + cc];
                    }
                }
            }
        }
        let scale = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        let ng = self.needs(x.0);
        self.push(out, vec![t, c], Op::GlobalAvgPoolSpatial { x: x.0 }, ng)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn acc_grad(&mut self, idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let n = self.nodes[idx].data.len();
        debug_assert_eq!(contrib.len(), n);
        match &mut self.nodes[idx].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => self.nodes[idx].grad = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar loss. Every leaf recorded with
    /// `requires_grad` ends up with `dLoss/dLeaf` in its tape gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            // Pass-through nodes never touched by this loss carry no grad.
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            match op {
                Op::Leaf => unreachable!(),
                Op::Add { a, b } => {
                    self.acc_grad(a, g.clone());
                    self.acc_grad(b, g);
                }
                Op::AddRow { x, row } => {
                    let (r, c) = dims2(&self.nodes[x].shape);
                    if self.needs(row) {
                        let mut dr = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dr[j] += g[i * c + j];
                            }
                        }
                        self.acc_grad(row, dr);
                    }
                    self.acc_grad(x, g);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> =
                            g.iter().zip(&self.nodes[b].data).map(|(g, v)| g * v).collect();
                        self.acc_grad(a, da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a].data).map(|(g, v)| g * v).collect();
                        self.acc_grad(b, db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.acc_grad(x, dx);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = dims2(&self.nodes[a].shape);
                    let n = *self.nodes[i].shape.last().unwrap();
                    if self.needs(a) {
                        // dA = G . B^T
                        let bd = &self.nodes[b].data;
                        let mut bt = vec![0.0; n * k];
                        for p in 0..k {
                            for j in 0..n {
                                bt[j * k + p] = bd[p * n + j];
                            }
                        }
                        let mut da = vec![0.0; m * k];
                        matmul_raw(&g, &bt, m, n, k, &mut da);
                        self.acc_grad(a, da);
                    }
                    if self.needs(b) {
                        // dB = A^T . G
                        let ad = &self.nodes[a].data;
                        let mut at = vec![0.0; k * m];
                        for ii in 0..m {
                            for p in 0..k {
                                at[p * m + ii] = ad[ii * k + p];
                            }
                        }
                        let mut db = vec![0.0; k * n];
                        matmul_raw(&at, &g, k, m, n, &mut db);
                        self.acc_grad(b, db);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![0.0; r * c];
                    for ii in 0..r {
                        for j in 0..c {
                            dx[j * r + ii] = g[ii * c + j];
                        }
                    }
                    self.acc_grad(x, dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.acc_grad(x, dx);
                }
                Op::SoftmaxLastDim { x } => {
                    let last = *self.nodes[i].shape.last().unwrap();
                    let out = &self.nodes[i].data;
                    let mut dx = vec![0.0; out.len()];
                    for (slice_idx, (o_slice, g_slice)) in
                        out.chunks(last).zip(g.chunks(last)).enumerate()
                    {
                        let dot: f64 = o_slice.iter().zip(g_slice).map(|(s, g)| s * g).sum();
                        let base = slice_idx * last;
                        for j in 0..last {
                            dx[base + j] = o_slice[j] * (g_slice[j] - dot);
                        }
                    }
                    self.acc_grad(x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let xd = &self.nodes[x].data;
                    let gd = &self.nodes[gamma].data;
                    let slices = xd.len() / d;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for s in 0..slices {
                        let xs = &xd[s * d..(s + 1) * d];
                        let gs = &g[s * d..(s + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                            dxhat[j] = gs[j] * gd[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[s * d + j] =
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.acc_grad(x, dx);
                    self.acc_grad(gamma, dgamma);
                    self.acc_grad(beta, dbeta);
                }
                Op::GatherRows { table, ids } => {
                    if self.needs(table) {
                        let c = *self.nodes[table].shape.last().unwrap();
                        let mut dt = vec![0.0; self.nodes[table].data.len()];
                        for (pos, &id) in ids.iter().enumerate() {
                            for j in 0..c {
                                dt[id * c + j] += g[pos * c + j];
                            }
                        }
                        self.acc_grad(table, dt);
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let c = *self.nodes[x].shape.last().unwrap();
                    let mut dx = vec![0.0; self.nodes[x].data.len()];
                    dx[start * c..(start + len) * c].copy_from_slice(&g);
                    self.acc_grad(x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = dims2(&self.nodes[x].shape);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.acc_grad(x, dx);
                }
                Op::ConcatRows { xs } => {
                    let c = *self.nodes[i].shape.last().unwrap();
                    let mut offset = 0;
                    for x in xs {
                        let r = dims2(&self.nodes[x].shape).0;
                        let part = g[offset * c..(offset + r) * c].to_vec();
                        self.acc_grad(x, part);
                        offset += r;
                    }
                }
                Op::ConcatCols { xs } => {
                    let (r, total_c) = dims2(&self.nodes[i].shape);
                    let mut offset = 0;
                    for x in xs {
                        let c = *self.nodes[x].shape.last().unwrap();
                        if self.needs(x) {
                            let mut part = vec![0.0; r * c];
                            for ii in 0..r {
                                part[ii * c..(ii + 1) * c].copy_from_slice(
                                    &g[ii * total_c + offset..ii * total_c + offset + c],
                                );
                            }
                            self.acc_grad(x, part);
                        }
                        offset += c;
                    }
                }
                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.nodes[x].data.len()];
                    self.acc_grad(x, dx);
                }
                Op::MeanRows { x } => {
                    let (r, c) = dims2(&self.nodes[x].shape);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] / r as f64;
                        }
                    }
                    self.acc_grad(x, dx);
                }
                Op::CrossEntropyLogits { logits, targets, ignore } => {
                    let (t, v) = dims2(&self.nodes[logits].shape);
                    let used = ignore.iter().filter(|m| !**m).count() as f64;
                    let ld = &self.nodes[logits].data;
                    let mut dl = vec![0.0; t * v];
                    for i in 0..t {
                        if ignore[i] {
                            continue;
                        }
                        let row = &ld[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..v {
                            let p = exps[j] / sum;
                            let y = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * v + j] = g[0] * (p - y) / used;
                        }
                    }
                    self.acc_grad(logits, dl);
                }
                Op::BceWithLogits { x, targets } => {
                    let n = targets.len() as f64;
                    let dx: Vec<f64> = self.nodes[x]
                        .data
                        .iter()
                        .zip(&targets)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                        .collect();
                    self.acc_grad(x, dx);
                }
                Op::TemporalConv { x, w, b, stride } => {
                    let xs = self.nodes[x].shape.clone();
                    let ws = self.nodes[w].shape.clone();
                    let (t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                    let (k, cout) = (ws[0], ws[2]);
                    let pad = k / 2;
                    let t_out = self.nodes[i].shape[0];
                    let xd = &self.nodes[x].data;
                    let wdat = &self.nodes[w].data;
                    let need_x = self.needs(x);
                    let need_w = self.needs(w);
                    let need_b = self.needs(b);
                    let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                    let mut dw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
                    let mut db = if need_b { vec![0.0; cout] } else { Vec::new() };
                    for to in 0..t_out {
                        for hh in 0..h {
                            for ww in 0..wd {
                                let o_base = ((to * h + hh) * wd + ww) * cout;
                                if need_b {
                                    for co in 0..cout {
                                        db[co] += g[o_base + co];
                                    }
                                }
                                for dt in 0..k {
                                    let ti = (to * stride + dt) as isize - pad as isize;
                                    if ti < 0 || ti >= t as isize {
                                        continue;
                                    }
                                    let i_base = (((ti as usize) * h + hh) * wd + ww) * cin;
                                    for ci in 0..cin {
                                        let w_base = (dt * cin + ci) * cout;
                                        if need_x {
                                            let mut s = 0.0;
                                            for co in 0..cout {
                                                s += g[o_base + co] * wdat[w_base + co];
                                            }
                                            dx[i_base + ci] += s;
                                        }
                                        if need_w {
                                            let xv = xd[i_base + ci];
                                            if xv != 0.0 {
                                                for co in 0..cout {
                                                    dw[w_base + co] += g[o_base + co] * xv;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        self.acc_grad(x, dx);
                    }
                    if need_w {
                        self.acc_grad(w, dw);
                    }
                    if need_b {
                        self.acc_grad(b, db);
                    }
                }
                Op::SpatialConv { x, w, b, stride } => {
                    let xs = self.nodes[x].shape.clone();
                    let ws = self.nodes[w].shape.clone();
                    let (t, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                    let (k, cout) = (ws[0], ws[3]);
                    let pad = k / 2;
                    let (h_out, w_out) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                    let xd = &self.nodes[x].data;
                    let wdat = &self.nodes[w].data;
                    let need_x = self.needs(x);
                    let need_w = self.needs(w);
                    let need_b = self.needs(b);
                    let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                    let mut dw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
                    let mut db = if need_b { vec![0.0; cout] } else { Vec::new() };
                    for tt in 0..t {
                        for ho in 0..h_out {
                            for wo in 0..w_out {
                                let o_base = ((tt * h_out + ho) * w_out + wo) * cout;
                                if need_b {
                                    for co in 0..cout {
                                        db[co] += g[o_base + co];
                                    }
                                }
                                for dh in 0..k {
                                    let hi = (ho * stride + dh) as isize - pad as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for dws in 0..k {
                                        let wi = (wo * stride + dws) as isize - pad as isize;
                                        if wi < 0 || wi >= wd as isize {
                                            continue;
                                        }
                                        let i_base =
                                            ((tt * h + hi as usize) * wd + wi as usize) * cin;
                                        for ci in 0..cin {
                                            let w_base = ((dh * k + dws) * cin + ci) * cout;
                                            if need_x {
                                                let mut s = 0.0;
                                                for co in 0..cout {
                                                    s += g[o_base + co] * wdat[w_base + co];
                                                }
                                                dx[i_base + ci] += s;
                                            }
                                            if need_w {
                                                let xv = xd[i_base + ci];
                                                if xv != 0.0 {
                                                    for co in 0..cout {
                                                        dw[w_base + co] += g[o_base + co] * xv;
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        self.acc_grad(x, dx);
                    }
                    if need_w {
                        self.acc_grad(w, dw);
                    }
                    if need_b {
                        self.acc_grad(b, db);
                    }
                }
                Op::GlobalAvgPoolSpatial { x } => {
                    let xs = self.nodes[x].shape.clone();
                    let (t, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let scale = 1.0 / (h * w) as f64;
                    let mut dx = vec![0.0; t * h * w * c];
                    for tt in 0..t {
                        for hh in 0..h {
                            for ww in 0..w {
                                let base = ((tt * h + hh) * w + ww) * c;
                                for cc in 0..c {
                                    dx[base + cc] = g[tt * c + cc] * scale;
                                }
                            }
                        }
                    }
                    self.acc_grad(x, dx);
                }
            }
        }
        Ok(())
    }
}
