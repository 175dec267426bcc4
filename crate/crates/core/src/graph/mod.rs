//! Offline graph inference: decompose each channel, downsample every
//! component, measure pairwise DTW distances and keep each node's K nearest
//! neighbors.

mod io;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{decompose_series, ComponentKind, Components, DecomposeError, DecompositionConfig};

pub use io::{read_adjacency_csv, read_edge_list, write_adjacency_csv, write_distance_csv, write_edge_list};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("downsample factor must be at least 1")]
    Factor,
    #[error("DTW needs non-empty series")]
    EmptySeries,
    #[error("channel {channel} has length {len}, expected {expected}")]
    LengthMismatch { channel: usize, len: usize, expected: usize },
    #[error("K = {k} is outside 1..={max} for {nodes} nodes")]
    NeighborCount { k: usize, max: usize, nodes: usize },
    #[error("need at least one channel")]
    NoChannels,
    #[error("malformed graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Averages non-overlapping windows of `factor` points; a short tail window
/// is averaged over the points it has.
pub fn downsample(series: &[f64], factor: usize) -> Result<Vec<f64>, GraphError> {
    if factor == 0 {
        return Err(GraphError::Factor);
    }
    Ok(series
        .chunks(factor)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// DTW with local cost `|a_i − b_j|` and steps (i−1,j), (i,j−1), (i−1,j−1).
///
/// `band` is the Sakoe-Chiba half-width; it is widened to `|n − m|` when
/// narrower, since otherwise no warping path reaches the corner.
pub fn dtw_distance(a: &[f64], b: &[f64], band: Option<usize>) -> Result<f64, GraphError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(GraphError::EmptySeries);
    }
    let r = band.unwrap_or(n.max(m)).max(n.abs_diff(m));
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(r).max(1);
        let hi = (i + r).min(m);
        for j in lo..=hi {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = (a[i - 1] - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl DistanceMatrix {
    pub fn nodes(&self) -> usize {
        self.values.nrows()
    }

    /// Min-max scales the off-diagonal entries into [0, 1]. When all of
    /// them are equal they become 0.
    pub fn normalized(&self) -> Self {
        let d = self.nodes();
        let off = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)));
        let (lo, hi) = off
            .clone()
            .map(|(i, j)| self.values[[i, j]])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let mut values = Array2::zeros((d, d));
        for (i, j) in off {
            values[[i, j]] = if span > 0.0 {
                (self.values[[i, j]] - lo) / span
            } else {
                0.0
            };
        }
        Self {
            values,
            normalized: true,
        }
    }
}

/// DTW distance between every pair of rows; pairs run in parallel and are
/// written back by index, so the result does not depend on scheduling.
pub fn pairwise_distances(series: &[Vec<f64>], band: Option<usize>) -> Result<DistanceMatrix, GraphError> {
    let d = series.len();
    if d == 0 {
        return Err(GraphError::NoChannels);
    }
    let expected = series[0].len();
    for (channel, s) in series.iter().enumerate() {
        if s.len() != expected {
            return Err(GraphError::LengthMismatch {
                channel,
                len: s.len(),
                expected,
            });
        }
    }
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(&series[i], &series[j], band))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values = Array2::zeros((d, d));
    for (&(i, j), v) in pairs.iter().zip(dists) {
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    Ok(DistanceMatrix {
        values,
        normalized: false,
    })
}

/// Directed neighbor graph over channel nodes. `adjacency[[i, j]] == 1`
/// means `j` is a neighbor of `i`, so messages flow from `j` into `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentGraph {
    pub adjacency: Array2<u8>,
    pub kind: ComponentKind,
}

impl ComponentGraph {
    /// A graph with no edges; the model's self-loops are then the only neighborhood.
    pub fn empty(nodes: usize, kind: ComponentKind) -> Self {
        Self {
            adjacency: Array2::zeros((nodes, nodes)),
            kind,
        }
    }

    pub fn from_edges(nodes: usize, kind: ComponentKind, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut g = Self::empty(nodes, kind);
        for &(src, dst) in edges {
            if src >= nodes || dst >= nodes || src == dst {
                return Err(GraphError::Format(format!("edge {src}->{dst} invalid for {nodes} nodes")));
            }
            g.adjacency[[src, dst]] = 1;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.adjacency
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == 1)
            .map(|(j, _)| j)
            .collect()
    }

    /// Edges `(i, j)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.nodes())
            .flat_map(|i| self.neighbors(i).into_iter().map(move |j| (i, j)))
            .collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[[i, j]] == 1
    }
}

/// Keeps, for every node, the `k` smallest off-diagonal distances in its
/// row; equal distances go to the lower channel index.
pub fn knn_graph(dist: &DistanceMatrix, k: usize, kind: ComponentKind) -> Result<ComponentGraph, GraphError> {
    let d = dist.nodes();
    if k == 0 || k >= d {
        return Err(GraphError::NeighborCount {
            k,
            max: d.saturating_sub(1),
            nodes: d,
        });
    }
    let mut g = ComponentGraph::empty(d, kind);
    for i in 0..d {
        let mut order: Vec<usize> = (0..d).filter(|&j| j != i).collect();
        order.sort_by(|&x, &y| dist.values[[i, x]].total_cmp(&dist.values[[i, y]]).then(x.cmp(&y)));
        for &j in &order[..k] {
            g.adjacency[[i, j]] = 1;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub k: usize,
    /// Downsample factors for trend, seasonal and residual; `None` means
    /// `p`, `1` and `p` respectively.
    pub downsample: [Option<usize>; 3],
    pub dtw_band: Option<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 3,
            downsample: [None; 3],
            dtw_band: None,
        }
    }
}

impl GraphConfig {
    pub fn factor(&self, kind: ComponentKind, period: usize) -> usize {
        let idx = kind as usize;
        self.downsample[idx].unwrap_or(match kind {
            ComponentKind::Seasonal => 1,
            _ => period,
        })
    }
}

/// The three inferred graphs and the distances they were selected from.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGraphs {
    pub graphs: Components<ComponentGraph>,
    pub distances: Components<DistanceMatrix>,
}

/// Builds one graph per component from a `T × D` block of training rows.
pub fn build_component_graphs(
    values: ArrayView2<f64>,
    decomposition: &DecompositionConfig,
    cfg: &GraphConfig,
) -> Result<ComponentGraphs, GraphError> {
    let d = values.ncols();
    if d == 0 {
        return Err(GraphError::NoChannels);
    }
    let parts = (0..d)
        .into_par_iter()
        .map(|c| decompose_series(&values.column(c).to_vec(), decomposition))
        .collect::<Result<Vec<_>, _>>()?;

    let one = |kind: ComponentKind| -> Result<(ComponentGraph, DistanceMatrix), GraphError> {
        let factor = cfg.factor(kind, decomposition.period);
        let series = parts
            .iter()
            .map(|c| downsample(c.get(kind), factor))
            .collect::<Result<Vec<_>, _>>()?;
        let dist = pairwise_distances(&series, cfg.dtw_band)?;
        let graph = if d == 1 {
            ComponentGraph::empty(1, kind)
        } else {
            knn_graph(&dist, cfg.k, kind)?
        };
        Ok((graph, dist.normalized()))
    };
    let (tg, td) = one(ComponentKind::Trend)?;
    let (sg, sd) = one(ComponentKind::Seasonal)?;
    let (rg, rd) = one(ComponentKind::Residual)?;
    Ok(ComponentGraphs {
        graphs: Components {
            trend: tg,
            seasonal: sg,
            residual: rg,
        },
        distances: Components {
            trend: td,
            seasonal: sd,
            residual: rd,
        },
    })
}

/// Graph over the undecomposed series, for models run without
/// decomposition. Downsampled like the trend component; tagged as trend.
pub fn build_raw_graph(
    values: ArrayView2<f64>,
    period: usize,
    cfg: &GraphConfig,
) -> Result<(ComponentGraph, DistanceMatrix), GraphError> {
    let d = values.ncols();
    if d == 0 {
        return Err(GraphError::NoChannels);
    }
    let factor = cfg.factor(ComponentKind::Trend, period);
    let series = (0..d)
        .map(|c| downsample(&values.column(c).to_vec(), factor))
        .collect::<Result<Vec<_>, _>>()?;
    let dist = pairwise_distances(&series, cfg.dtw_band)?;
    let graph = if d == 1 {
        ComponentGraph::empty(1, ComponentKind::Trend)
    } else {
        knn_graph(&dist, cfg.k, ComponentKind::Trend)?
    };
    Ok((graph, dist.normalized()))
}
