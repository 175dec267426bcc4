//! Dense reference scoring for GAT and GATv2 attention, used to show that
//! GATv2 ranks keys differently per query while GAT cannot.

use ndarray::{array, Array2, ArrayView2};

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// GAT logits `e_ij = leaky(aᵀ[W h_i ∥ W h_j])` for node features `h`
/// `[n, f]`, shared transform `w` `[f, d_h]` and `a` of length `2·d_h`.
pub fn gat_logits(h: ArrayView2<f64>, w: ArrayView2<f64>, a: &[f64], slope: f64) -> Array2<f64> {
    let z = h.dot(&w);
    let dh = w.ncols();
    let n = h.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let s: f64 = (0..dh).map(|k| a[k] * z[[i, k]] + a[dh + k] * z[[j, k]]).sum();
        leaky(s, slope)
    })
}

/// GATv2 logits `e_ij = aᵀ leaky(Wᵀ[h_i ∥ h_j])` with `w` `[2f, d_h]` and `a`
/// of length `d_h`.
pub fn gatv2_logits(h: ArrayView2<f64>, w: ArrayView2<f64>, a: &[f64], slope: f64) -> Array2<f64> {
    let (n, f) = h.dim();
    let dh = w.ncols();
    Array2::from_shape_fn((n, n), |(i, j)| {
        (0..dh)
            .map(|k| {
                let z: f64 = (0..f).map(|c| h[[i, c]] * w[[c, k]] + h[[j, c]] * w[[f + c, k]]).sum();
                a[k] * leaky(z, slope)
            })
            .sum()
    })
}

/// Keys of each query row ordered by descending score; ties keep index order.
pub fn rankings(logits: ArrayView2<f64>) -> Vec<Vec<usize>> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            order
        })
        .collect()
}

pub fn query_dependent(rankings: &[Vec<usize>]) -> bool {
    rankings.windows(2).any(|w| w[0] != w[1])
}

/// A three-node instance with one scalar feature per node.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessInstance {
    /// `[3, 1]` node features 0, 1, 2.
    pub h: Array2<f64>,
    /// GATv2 weights `[2, 2]`: `W·[h_i ∥ h_j] = (h_j − h_i, h_i − h_j)`.
    pub gatv2_w: Array2<f64>,
    /// With `a = (−1, −1)` the GATv2 score is `−(1 − slope)·|h_j − h_i|`.
    pub gatv2_a: Vec<f64>,
    pub gat_w: Array2<f64>,
    pub gat_a: Vec<f64>,
}

impl WitnessInstance {
    pub fn new() -> Self {
        Self {
            h: array![[0.0], [1.0], [2.0]],
            gatv2_w: array![[-1.0, 1.0], [1.0, -1.0]],
            gatv2_a: vec![-1.0, -1.0],
            gat_w: array![[1.0, -1.0]],
            gat_a: vec![0.5, -0.3, 1.0, 0.7],
        }
    }
}

impl Default for WitnessInstance {
    fn default() -> Self {
        Self::new()
    }
}
