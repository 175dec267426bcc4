use std::sync::Arc;

use super::gemm::{gemm, Strides};
use super::tensor::{DiffTensor, Tensor};
use super::DiffError;

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale(f64),
    LeakyRelu(f64),
    Concat,
    Slice { axis: usize, start: usize },
    Reshape,
    MaskedSoftmax,
    CausalConv { dilation: usize },
    ChannelLinear,
    PairSum { neighbors: Arc<[usize]> },
    NeighborSum { neighbors: Arc<[usize]> },
    Mse,
    Sum,
}

/// One recorded operation: what produced a tensor and from which inputs.
#[derive(Debug, Clone)]
pub struct TapeNode {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
}

impl TapeNode {
    pub fn op_name(&self) -> &'static str {
        match self.op {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::MaskedSoftmax => "masked_softmax",
            Op::CausalConv { .. } => "causal_dilated_conv1d",
            Op::ChannelLinear => "channel_linear",
            Op::PairSum { .. } => "pair_sum",
            Op::NeighborSum { .. } => "neighbor_sum",
            Op::Mse => "mse",
            Op::Sum => "sum",
        }
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }
}

/// Reverse-mode recording of a computation over [`Tensor`]s.
///
/// Nodes are appended in execution order, so the tape is a DAG whose
/// topological order is its index order. A tape is single-threaded;
/// parameters are copied in as leaves and gradients read back out.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<DiffTensor>,
    nodes: Vec<TapeNode>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.tensors[v.0].requires_grad);
        self.tensors.push(DiffTensor::new(value, requires_grad));
        self.nodes.push(TapeNode { op, inputs });
        Var(self.tensors.len() - 1)
    }

    /// Records an input tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.tensors.push(DiffTensor::new(value, requires_grad));
        self.nodes.push(TapeNode {
            op: Op::Leaf,
            inputs: vec![],
        });
        Var(self.tensors.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn tensor(&self, v: Var) -> &DiffTensor {
        &self.tensors[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.tensors[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tensors[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.tensors[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Sign pattern of every leaky-ReLU input on the tape (`true` for x > 0).
    ///
    /// Two evaluations with equal signatures lie on the same linear piece of
    /// every kink, which is what finite-difference checks rely on.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(_) = node.op {
                sig.extend(self.value(node.inputs[0]).data().iter().map(|&x| x > 0.0));
            }
        }
        sig
    }

    // ------------------------------------------------------------------
    // forward primitives
    // ------------------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// Supported layouts: `[.., m, k] · [k, n]` (weight shared over the
    /// leading axes), `[m, k] · [.., k, n]`, and `[b.., m, k] · [b.., k, n]`
    /// with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ra, rb) = (sa.len(), sb.len());
        if ra < 2 || rb < 2 || sa[ra - 1] != sb[rb - 2] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (out_shape, out) = if rb == 2 {
            let rows = av.len() / k.max(1);
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, av, Strides::rm(k), bv, Strides::rm(n), &mut out, Strides::rm(n), false);
            let mut shape = sa[..ra - 1].to_vec();
            shape.push(n);
            (shape, out)
        } else if ra == 2 || sa[..ra - 2] == sb[..rb - 2] {
            let batch: usize = sb[..rb - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            let a_step = if ra == 2 { 0 } else { m * k };
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * a_step..],
                    Strides::rm(k),
                    &bv[bi * k * n..],
                    Strides::rm(n),
                    &mut out[bi * m * n..],
                    Strides::rm(n),
                    false,
                );
            }
            let mut shape = sb[..rb - 2].to_vec();
            shape.extend([m, n]);
            (shape, out)
        } else {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        };
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul, vec![a, b]))
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s and
    /// is then repeated over the leading (batch) axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if !is_suffix(&sa, self.shape(b)) {
            return Err(shape_err("add", format!("{sa:?} + {:?}", self.shape(b))));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::Add, vec![a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if !is_suffix(&sa, self.shape(b)) {
            return Err(shape_err("mul", format!("{sa:?} * {:?}", self.shape(b))));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % nb])
            .collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Scale(factor), vec![a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a);
        let out = value
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LeakyRelu(slope), vec![a])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let s0 = self.shape(first).to_vec();
        let Some((_, lead)) = s0.split_last() else {
            return Err(shape_err("concat", "scalar input".into()));
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[..s.len() - 1] != *lead {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat, parts.to_vec()))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { axis, start }, vec![a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape, vec![a]))
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. `mask_shape` must be a suffix of the score shape; masked
    /// positions get probability exactly 0 and receive no gradient.
    pub fn masked_softmax(&mut self, scores: Var, mask: Arc<[bool]>, mask_shape: &[usize]) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        let mask_len: usize = mask_shape.iter().product();
        if mask_shape.is_empty() || !is_suffix(&s, mask_shape) || mask.len() != mask_len {
            return Err(shape_err("masked_softmax", format!("scores {s:?}, mask {mask_shape:?}")));
        }
        let width = s[s.len() - 1];
        let src = self.value(scores).data();
        let mut out = vec![0.0; src.len()];
        for (r, (row, dst)) in src.chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let moff = (r * width) % mask_len;
            let valid = &mask[moff..moff + width];
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !valid.iter().any(|&v| v) {
                return Err(DiffError::AllMasked { row: r });
            }
            let mut total = 0.0;
            for ((d, &x), &v) in dst.iter_mut().zip(row).zip(valid) {
                if v {
                    *d = (x - max).exp();
                    total += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        Ok(self.push(Tensor::new(s, out)?, Op::MaskedSoftmax, vec![scores]))
    }

    /// Channel-wise causal dilated convolution.
    ///
    /// `input` is `[.., C, L]`, `kernel` is `[C, k]`;
    /// `y[c, t] = Σ_i kernel[c, i] · x[c, t − i·dilation]` with zeros for
    /// negative time indices, so the output keeps length `L`.
    pub fn causal_dilated_conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let ks = self.shape(kernel);
        if s.len() < 2 || ks.len() != 2 || ks[0] != s[s.len() - 2] || dilation == 0 {
            return Err(shape_err("causal_dilated_conv1d", format!("input {s:?}, kernel {ks:?}, d={dilation}")));
        }
        let (channels, taps) = (ks[0], ks[1]);
        let len = s[s.len() - 1];
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks(len).zip(out.chunks_mut(len)).enumerate() {
            let c = r % channels;
            for i in 0..taps {
                let wi = w[c * taps + i];
                let shift = i * dilation;
                for t in shift..len {
                    yr[t] += wi * xr[t - shift];
                }
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::CausalConv { dilation }, vec![input, kernel]))
    }

    /// Per-channel linear map over the last axis:
    /// `y[b, d, h] = Σ_l w[d, h, l] · x[b, d, l]`.
    pub fn channel_linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if s.len() != 3 || ws.len() != 3 || ws[0] != s[1] || ws[2] != s[2] {
            return Err(shape_err("channel_linear", format!("input {s:?}, weight {ws:?}")));
        }
        let (batch, chans, len, horizon) = (s[0], s[1], s[2], ws[1]);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; batch * chans * horizon];
        for d in 0..chans {
            gemm(
                batch,
                len,
                horizon,
                &x[d * len..],
                Strides { row: chans * len, col: 1 },
                &w[d * horizon * len..],
                Strides::tr(len),
                &mut out[d * horizon..],
                Strides { row: chans * horizon, col: 1 },
                false,
            );
        }
        let t = Tensor::new(vec![batch, chans, horizon], out)?;
        Ok(self.push(t, Op::ChannelLinear, vec![input, weight]))
    }

    /// Pairwise node sums over a neighbor table:
    /// `out[b, i, m, :] = query[b, i, :] + key[b, neighbors[i·M + m], :]`.
    pub fn pair_sum(&mut self, query: Var, key: Var, neighbors: Arc<[usize]>) -> Result<Var> {
        let s = self.shape(query).to_vec();
        if s.len() != 3 || self.shape(key) != s.as_slice() || s[1] == 0 || neighbors.len() % s[1] != 0 {
            return Err(shape_err("pair_sum", format!("query {s:?}, key {:?}", self.shape(key))));
        }
        let (batch, nodes, width) = (s[0], s[1], s[2]);
        let fan = neighbors.len() / nodes;
        if neighbors.iter().any(|&j| j >= nodes) {
            return Err(shape_err("pair_sum", "neighbor index out of range".into()));
        }
        let q = self.value(query).data();
        let k = self.value(key).data();
        let mut out = Vec::with_capacity(batch * nodes * fan * width);
        for b in 0..batch {
            for i in 0..nodes {
                let qi = &q[(b * nodes + i) * width..][..width];
                for &j in &neighbors[i * fan..(i + 1) * fan] {
                    let kj = &k[(b * nodes + j) * width..][..width];
                    out.extend(qi.iter().zip(kj).map(|(x, y)| x + y));
                }
            }
        }
        let t = Tensor::new(vec![batch, nodes, fan, width], out)?;
        Ok(self.push(t, Op::PairSum { neighbors }, vec![query, key]))
    }

    /// Attention-weighted aggregation over a neighbor table:
    /// `out[b, i, :] = Σ_m weights[b, i, m] · values[b, neighbors[i·M + m], :]`.
    pub fn neighbor_sum(&mut self, weights: Var, values: Var, neighbors: Arc<[usize]>) -> Result<Var> {
        let sw = self.shape(weights).to_vec();
        let sv = self.shape(values).to_vec();
        if sw.len() != 3 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] || neighbors.len() != sw[1] * sw[2] {
            return Err(shape_err("neighbor_sum", format!("weights {sw:?}, values {sv:?}")));
        }
        let (batch, nodes, fan, width) = (sv[0], sv[1], sw[2], sv[2]);
        if neighbors.iter().any(|&j| j >= nodes) {
            return Err(shape_err("neighbor_sum", "neighbor index out of range".into()));
        }
        let a = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; batch * nodes * width];
        for b in 0..batch {
            for i in 0..nodes {
                let dst = &mut out[(b * nodes + i) * width..][..width];
                for m in 0..fan {
                    let alpha = a[(b * nodes + i) * fan + m];
                    let j = neighbors[i * fan + m];
                    let vj = &v[(b * nodes + j) * width..][..width];
                    dst.iter_mut().zip(vj).for_each(|(d, x)| *d += alpha * x);
                }
            }
        }
        let t = Tensor::new(sv, out)?;
        Ok(self.push(t, Op::NeighborSum { neighbors }, vec![weights, values]))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(pred), self.shape(target))));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len().max(1) as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse, vec![pred, target]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum, vec![a])
    }

    // ------------------------------------------------------------------
    // reverse pass
    // ------------------------------------------------------------------

    /// Accumulates `d loss / d t` into the gradient of every tensor `t` on the
    /// tape that requires it. Calling twice without [`Tape::zero_grad`]
    /// doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(DiffError::EmptyTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.tensors[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            if let Some(acc) = &mut self.tensors[idx].grad {
                acc.data_mut().iter_mut().zip(&g).for_each(|(a, x)| *a += x);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.tensors[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => self.back_matmul(ins[0], ins[1], g, adj),
            Op::Add => {
                let (a, b) = (ins[0], ins[1]);
                if self.needs(a) {
                    accumulate(adj, a, g.to_vec());
                }
                if self.needs(b) {
                    let nb = self.value(b).numel();
                    let mut db = vec![0.0; nb];
                    g.iter().enumerate().for_each(|(i, x)| db[i % nb] += x);
                    accumulate(adj, b, db);
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let nb = bv.len();
                if self.needs(a) {
                    let da = g.iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
                    accumulate(adj, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; nb];
                    g.iter().zip(av).enumerate().for_each(|(i, (x, y))| db[i % nb] += x * y);
                    accumulate(adj, b, db);
                }
            }
            Op::Scale(c) => {
                if self.needs(ins[0]) {
                    accumulate(adj, ins[0], g.iter().map(|x| c * x).collect());
                }
            }
            Op::LeakyRelu(slope) => {
                let x = self.value(ins[0]).data();
                if self.needs(ins[0]) {
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                        .collect();
                    accumulate(adj, ins[0], dx);
                }
            }
            Op::Concat => {
                let widths: Vec<usize> = ins.iter().map(|&v| *self.shape(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&v, &w) in ins.iter().zip(&widths) {
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(adj, v, d);
                    }
                    offset += w;
                }
            }
            Op::Slice { axis, start } => {
                let a = ins[0];
                if self.needs(a) {
                    let s = self.shape(a);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let dim = s[*axis];
                    let len = self.shape(Var(idx))[*axis];
                    let mut d = vec![0.0; self.value(a).numel()];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(adj, a, d);
                }
            }
            Op::Reshape => {
                if self.needs(ins[0]) {
                    accumulate(adj, ins[0], g.to_vec());
                }
            }
            Op::MaskedSoftmax => {
                if self.needs(ins[0]) {
                    let y = self.value(Var(idx)).data();
                    let width = *self.shape(Var(idx)).last().unwrap();
                    let mut d = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dd, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *dd = yy * (gg - dot);
                        }
                    }
                    // masked entries have y = 0, hence d = 0 already
                    accumulate(adj, ins[0], d);
                }
            }
            Op::CausalConv { dilation } => self.back_conv(ins[0], ins[1], *dilation, g, adj),
            Op::ChannelLinear => self.back_channel_linear(ins[0], ins[1], g, adj),
            Op::PairSum { neighbors } => {
                let (q, k) = (ins[0], ins[1]);
                let s = self.shape(q);
                let (batch, nodes, width) = (s[0], s[1], s[2]);
                let fan = neighbors.len() / nodes;
                let mut dq = self.needs(q).then(|| vec![0.0; batch * nodes * width]);
                let mut dk = self.needs(k).then(|| vec![0.0; batch * nodes * width]);
                for b in 0..batch {
                    for i in 0..nodes {
                        for m in 0..fan {
                            let j = neighbors[i * fan + m];
                            let gr = &g[((b * nodes + i) * fan + m) * width..][..width];
                            if let Some(dq) = &mut dq {
                                let dst = &mut dq[(b * nodes + i) * width..][..width];
                                dst.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                            }
                            if let Some(dk) = &mut dk {
                                let dst = &mut dk[(b * nodes + j) * width..][..width];
                                dst.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                            }
                        }
                    }
                }
                if let Some(dq) = dq {
                    accumulate(adj, q, dq);
                }
                if let Some(dk) = dk {
                    accumulate(adj, k, dk);
                }
            }
            Op::NeighborSum { neighbors } => {
                let (w, v) = (ins[0], ins[1]);
                let sv = self.shape(v);
                let (batch, nodes, width) = (sv[0], sv[1], sv[2]);
                let fan = neighbors.len() / nodes;
                let av = self.value(w).data();
                let vv = self.value(v).data();
                let mut dw = self.needs(w).then(|| vec![0.0; av.len()]);
                let mut dv = self.needs(v).then(|| vec![0.0; vv.len()]);
                for b in 0..batch {
                    for i in 0..nodes {
                        let gr = &g[(b * nodes + i) * width..][..width];
                        for m in 0..fan {
                            let j = neighbors[i * fan + m];
                            let widx = (b * nodes + i) * fan + m;
                            let vj = &vv[(b * nodes + j) * width..][..width];
                            if let Some(dw) = &mut dw {
                                dw[widx] += gr.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                            }
                            if let Some(dv) = &mut dv {
                                let alpha = av[widx];
                                let dst = &mut dv[(b * nodes + j) * width..][..width];
                                dst.iter_mut().zip(gr).for_each(|(d, x)| *d += alpha * x);
                            }
                        }
                    }
                }
                if let Some(dw) = dw {
                    accumulate(adj, w, dw);
                }
                if let Some(dv) = dv {
                    accumulate(adj, v, dv);
                }
            }
            Op::Mse => {
                let (p, t) = (ins[0], ins[1]);
                let pv = self.value(p).data();
                let tv = self.value(t).data();
                let scale = 2.0 * g[0] / pv.len().max(1) as f64;
                let diff: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect();
                if self.needs(t) {
                    accumulate(adj, t, diff.iter().map(|x| -x).collect());
                }
                if self.needs(p) {
                    accumulate(adj, p, diff);
                }
            }
            Op::Sum => {
                if self.needs(ins[0]) {
                    accumulate(adj, ins[0], vec![g[0]; self.value(ins[0]).numel()]);
                }
            }
        }
    }

    fn back_matmul(&self, a: Var, b: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut da = self.needs(a).then(|| vec![0.0; av.len()]);
        let mut db = self.needs(b).then(|| vec![0.0; bv.len()]);
        if rb == 2 {
            let rows = av.len() / k.max(1);
            if let Some(da) = &mut da {
                gemm(rows, n, k, g, Strides::rm(n), bv, Strides::tr(n), da, Strides::rm(k), true);
            }
            if let Some(db) = &mut db {
                gemm(k, rows, n, av, Strides::tr(k), g, Strides::rm(n), db, Strides::rm(n), true);
            }
        } else {
            let batch: usize = sb[..rb - 2].iter().product();
            let a_step = if ra == 2 { 0 } else { m * k };
            for bi in 0..batch {
                let gb = &g[bi * m * n..];
                if let Some(da) = &mut da {
                    gemm(m, n, k, gb, Strides::rm(n), &bv[bi * k * n..], Strides::tr(n), &mut da[bi * a_step..], Strides::rm(k), true);
                }
                if let Some(db) = &mut db {
                    gemm(k, m, n, &av[bi * a_step..], Strides::tr(k), gb, Strides::rm(n), &mut db[bi * k * n..], Strides::rm(n), true);
                }
            }
        }
        if let Some(da) = da {
            accumulate(adj, a, da);
        }
        if let Some(db) = db {
            accumulate(adj, b, db);
        }
    }

    fn back_conv(&self, input: Var, kernel: Var, dilation: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let len = *self.shape(input).last().unwrap();
        let ks = self.shape(kernel);
        let (channels, taps) = (ks[0], ks[1]);
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut dx = self.needs(input).then(|| vec![0.0; x.len()]);
        let mut dw = self.needs(kernel).then(|| vec![0.0; w.len()]);
        for (r, (xr, gr)) in x.chunks(len).zip(g.chunks(len)).enumerate() {
            let c = r % channels;
            for i in 0..taps {
                let shift = i * dilation;
                if shift >= len {
                    continue;
                }
                if let Some(dx) = &mut dx {
                    let wi = w[c * taps + i];
                    let dxr = &mut dx[r * len..(r + 1) * len];
                    for t in shift..len {
                        dxr[t - shift] += wi * gr[t];
                    }
                }
                if let Some(dw) = &mut dw {
                    dw[c * taps + i] += (shift..len).map(|t| gr[t] * xr[t - shift]).sum::<f64>();
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(adj, input, dx);
        }
        if let Some(dw) = dw {
            accumulate(adj, kernel, dw);
        }
    }

    fn back_channel_linear(&self, input: Var, weight: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let s = self.shape(input);
        let (batch, chans, len) = (s[0], s[1], s[2]);
        let horizon = self.shape(weight)[1];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut dx = self.needs(input).then(|| vec![0.0; x.len()]);
        let mut dw = self.needs(weight).then(|| vec![0.0; w.len()]);
        let gs = Strides { row: chans * horizon, col: 1 };
        for d in 0..chans {
            let gd = &g[d * horizon..];
            if let Some(dx) = &mut dx {
                gemm(batch, horizon, len, gd, gs, &w[d * horizon * len..], Strides::rm(len), &mut dx[d * len..], Strides { row: chans * len, col: 1 }, true);
            }
            if let Some(dw) = &mut dw {
                gemm(
                    horizon,
                    batch,
                    len,
                    gd,
                    Strides { row: 1, col: chans * horizon },
                    &x[d * len..],
                    Strides { row: chans * len, col: 1 },
                    &mut dw[d * horizon * len..],
                    Strides::rm(len),
                    true,
                );
            }
        }
        if let Some(dx) = dx {
            accumulate(adj, input, dx);
        }
        if let Some(dw) = dw {
            accumulate(adj, weight, dw);
        }
    }
}
