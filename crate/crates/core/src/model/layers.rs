//! Tape-level building blocks of one component model.
//!
//! Node features are batched as `[B, D, L]`: batch, channel node, time.

use std::sync::Arc;

use crate::diff::{DiffError, Tape, Var};
use crate::graph::ComponentGraph;

/// Fixed-fan neighbor table with self-loops, padded and masked so that every
/// node has the same number `M` of slots.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    /// `D·M` node ids; slot `m` of node `i` is at `i·M + m`.
    pub index: Arc<[usize]>,
    /// `D·M` validity flags, `false` on padding.
    pub mask: Arc<[bool]>,
    pub nodes: usize,
    pub fan: usize,
}

impl NeighborIndex {
    /// Node `i` attends to itself first, then to its graph neighbors in
    /// ascending order. Padding slots repeat `i` and are masked out.
    pub fn with_self_loops(graph: &ComponentGraph) -> Self {
        let d = graph.nodes();
        let lists: Vec<Vec<usize>> = (0..d)
            .map(|i| std::iter::once(i).chain(graph.neighbors(i)).collect())
            .collect();
        let fan = lists.iter().map(Vec::len).max().unwrap_or(1);
        let mut index = Vec::with_capacity(d * fan);
        let mut mask = Vec::with_capacity(d * fan);
        for (i, list) in lists.iter().enumerate() {
            for m in 0..fan {
                index.push(list.get(m).copied().unwrap_or(i));
                mask.push(m < list.len());
            }
        }
        Self {
            index: index.into(),
            mask: mask.into(),
            nodes: d,
            fan,
        }
    }

    /// Valid neighbor ids of node `i`, self first.
    pub fn slots(&self, i: usize) -> Vec<usize> {
        (0..self.fan)
            .filter(|&m| self.mask[i * self.fan + m])
            .map(|m| self.index[i * self.fan + m])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadVars {
    /// `[2·L, d_h]`; rows `0..L` act on the query node, `L..2L` on the key.
    pub w: Var,
    /// `[d_h, 1]`.
    pub a: Var,
    /// `[d_h, L]`, present when `d_h ≠ L`.
    pub out: Option<Var>,
}

/// Attention logits `e_ij = aᵀ·leaky(W·[h_i ∥ h_j])` for every slot, shaped
/// `[B, D, M]`, together with the key transform `W_key·h` `[B, D, d_h]`.
///
/// `W·[h_i ∥ h_j]` is evaluated as `W_queryᵀh_i + W_keyᵀh_j`, the same
/// product split along the concatenation.
pub fn gatv2_logits(
    tape: &mut Tape,
    h: Var,
    head: &HeadVars,
    nbrs: &NeighborIndex,
    slope: f64,
) -> Result<(Var, Var), DiffError> {
    let s = tape.shape(h).to_vec();
    let (batch, nodes, width) = (s[0], s[1], s[2]);
    let w_query = tape.slice(head.w, 0, 0, width)?;
    let w_key = tape.slice(head.w, 0, width, width)?;
    let query = tape.matmul(h, w_query)?;
    let key = tape.matmul(h, w_key)?;
    let pairs = tape.pair_sum(query, key, nbrs.index.clone())?;
    let act = tape.leaky_relu(pairs, slope);
    let e = tape.matmul(act, head.a)?;
    let e = tape.reshape(e, &[batch, nodes, nbrs.fan])?;
    Ok((e, key))
}

/// Attention weights `α` over each node's slots, `[B, D, M]`.
pub fn gatv2_attention(
    tape: &mut Tape,
    h: Var,
    head: &HeadVars,
    nbrs: &NeighborIndex,
    slope: f64,
) -> Result<Var, DiffError> {
    let (e, _) = gatv2_logits(tape, h, head, nbrs, slope)?;
    tape.masked_softmax(e, nbrs.mask.clone(), &[nbrs.nodes, nbrs.fan])
}

/// One GATv2 layer: each head aggregates `α_ij · W_key h_j`, projects back to
/// width `L` when needed; heads are averaged and passed through leaky ReLU.
pub fn gatv2_layer(
    tape: &mut Tape,
    h: Var,
    heads: &[HeadVars],
    nbrs: &NeighborIndex,
    slope: f64,
) -> Result<Var, DiffError> {
    let mut total: Option<Var> = None;
    for head in heads {
        let (e, key) = gatv2_logits(tape, h, head, nbrs, slope)?;
        let alpha = tape.masked_softmax(e, nbrs.mask.clone(), &[nbrs.nodes, nbrs.fan])?;
        let mut agg = tape.neighbor_sum(alpha, key, nbrs.index.clone())?;
        if let Some(out) = head.out {
            agg = tape.matmul(agg, out)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, agg)?,
            None => agg,
        });
    }
    let total = total.ok_or(DiffError::Shape {
        op: "gatv2_layer",
        detail: "no attention heads".into(),
    })?;
    let mean = if heads.len() > 1 {
        tape.scale(total, 1.0 / heads.len() as f64)
    } else {
        total
    };
    Ok(tape.leaky_relu(mean, slope))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Leaky,
    Identity,
}

/// Stacked causal dilated convolutions; layer `n` uses dilation `2ⁿ` and
/// computes `σ(conv(x) + x)`, or `σ(conv(x))` without the residual.
pub fn tcn_forward(
    tape: &mut Tape,
    x: Var,
    kernels: &[Var],
    residual: bool,
    activation: Activation,
    slope: f64,
) -> Result<Var, DiffError> {
    let mut h = x;
    for (n, &k) in kernels.iter().enumerate() {
        let mut y = tape.causal_dilated_conv1d(h, k, 1 << n)?;
        if residual {
            y = tape.add(y, h)?;
        }
        h = match activation {
            Activation::Leaky => tape.leaky_relu(y, slope),
            Activation::Identity => y,
        };
    }
    Ok(h)
}

/// `E·x_time` per time step: `[D, F] · [B, F, L] → [B, D, L]`.
pub fn time_embedding(tape: &mut Tape, x_time: Var, embed: Var) -> Result<Var, DiffError> {
    tape.matmul(embed, x_time)
}

/// `Y[b, d, h] = Σ_l W[d, h, l]·X[b, d, l] + b[d, h]`.
pub fn linear_head(tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = tape.channel_linear(features, w)?;
    tape.add(y, b)
}
