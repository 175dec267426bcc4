//! Additive trend / seasonal / residual decomposition.
//!
//! The trend is a tricube-weighted moving average. The seasonal part averages
//! period-length blocks of the detrended series under a sliding block window,
//! with the edge blocks repeated as padding.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DecomposeError {
    #[error("trend window must be odd and positive, got {0}")]
    TrendWindow(usize),
    #[error("period must be at least 2, got {0}")]
    Period(usize),
    #[error("block window and block stride must be positive (got {block_window}, {block_stride})")]
    Block { block_window: usize, block_stride: usize },
    #[error("series of length {len} is shorter than the period {period}")]
    TooShort { len: usize, period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecompositionConfig {
    /// Tricube kernel length `w`, odd.
    pub trend_window: usize,
    /// Seasonality length `p` in steps.
    pub period: usize,
    /// Number of blocks `l` averaged per window.
    pub block_window: usize,
    /// Window stride `m`, in blocks.
    pub block_stride: usize,
}

impl DecompositionConfig {
    /// `w` is the smallest odd integer ≥ p + 1; `l = 3`, `m = 1`.
    pub fn for_period(period: usize) -> Self {
        Self {
            trend_window: default_trend_window(period),
            period,
            block_window: 3,
            block_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        if self.trend_window % 2 == 0 {
            return Err(DecomposeError::TrendWindow(self.trend_window));
        }
        if self.period < 2 {
            return Err(DecomposeError::Period(self.period));
        }
        if self.block_window == 0 || self.block_stride == 0 {
            return Err(DecomposeError::Block {
                block_window: self.block_window,
                block_stride: self.block_stride,
            });
        }
        Ok(())
    }
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self::for_period(24)
    }
}

pub fn default_trend_window(period: usize) -> usize {
    let w = period + 1;
    if w % 2 == 0 {
        w + 1
    } else {
        w
    }
}

/// One decomposition; each field has the input's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Components<T> {
    pub trend: T,
    pub seasonal: T,
    pub residual: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Trend,
    Seasonal,
    Residual,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [ComponentKind::Trend, ComponentKind::Seasonal, ComponentKind::Residual];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Trend => "trend",
            ComponentKind::Seasonal => "seasonal",
            ComponentKind::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl<T> Components<T> {
    pub fn get(&self, kind: ComponentKind) -> &T {
        match kind {
            ComponentKind::Trend => &self.trend,
            ComponentKind::Seasonal => &self.seasonal,
            ComponentKind::Residual => &self.residual,
        }
    }
}

pub fn tricube(x: f64) -> f64 {
    let a = x.abs();
    if a > 1.0 {
        0.0
    } else {
        let u = 1.0 - a * a * a;
        u * u * u
    }
}

/// Unnormalized kernel taps for offsets `−h..=h`, `h = (w − 1)/2`.
fn trend_kernel(w: usize) -> Vec<f64> {
    let h = (w - 1) / 2;
    let scale = (h + 1) as f64;
    (0..w).map(|i| tricube((i as f64 - h as f64) / scale)).collect()
}

/// Tricube moving average; at the edges the truncated kernel is renormalized.
pub fn extract_trend(series: &[f64], trend_window: usize) -> Result<Vec<f64>, DecomposeError> {
    if trend_window % 2 == 0 {
        return Err(DecomposeError::TrendWindow(trend_window));
    }
    let kernel = trend_kernel(trend_window);
    let h = (trend_window - 1) / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(h);
        let hi = (t + h).min(n - 1);
        let (mut acc, mut norm) = (0.0, 0.0);
        for (s, x) in series.iter().enumerate().take(hi + 1).skip(lo) {
            let k = kernel[s + h - t];
            acc += k * x;
            norm += k;
        }
        out.push(acc / norm);
    }
    Ok(out)
}

/// Block-average seasonal estimate of a detrended series.
///
/// Block `i` covers `[i·p, (i+1)·p)`; a partial trailing block contributes
/// only the entries it has. Window starts advance by `m` blocks and each
/// window's average is written to the `m` blocks it starts at.
pub fn extract_seasonal(detrended: &[f64], cfg: &DecompositionConfig) -> Result<Vec<f64>, DecomposeError> {
    cfg.validate()?;
    let p = cfg.period;
    let n = detrended.len();
    if n < p {
        return Err(DecomposeError::TooShort { len: n, period: p });
    }
    let blocks = n.div_ceil(p);
    let pad = (cfg.block_window - 1).div_ceil(2);
    // Padded block index j maps to an original block; beyond the padding the
    // edge block keeps repeating so that every stride position has a window.
    let source = |j: usize| j.saturating_sub(pad).min(blocks - 1);

    let mut out = vec![0.0; n];
    let mut sums = vec![0.0; p];
    let mut counts = vec![0usize; p];
    let mut start = 0;
    while start < blocks {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for j in start..start + cfg.block_window {
            let b = source(j);
            for (k, x) in detrended[b * p..((b + 1) * p).min(n)].iter().enumerate() {
                sums[k] += x;
                counts[k] += 1;
            }
        }
        for b in start..(start + cfg.block_stride).min(blocks) {
            for k in 0..p {
                let idx = b * p + k;
                if idx >= n {
                    break;
                }
                // A window holding only the partial last block is written back only to it,
                // so the count is positive here.
                out[idx] = sums[k] / counts[k] as f64;
            }
        }
        start += cfg.block_stride;
    }
    Ok(out)
}

pub fn decompose_series(series: &[f64], cfg: &DecompositionConfig) -> Result<Components<Vec<f64>>, DecomposeError> {
    cfg.validate()?;
    let trend = extract_trend(series, cfg.trend_window)?;
    let detrended: Vec<f64> = series.iter().zip(&trend).map(|(x, t)| x - t).collect();
    let seasonal = extract_seasonal(&detrended, cfg)?;
    let residual = series
        .iter()
        .zip(&trend)
        .zip(&seasonal)
        .map(|((x, t), s)| x - t - s)
        .collect();
    Ok(Components {
        trend,
        seasonal,
        residual,
    })
}

fn decompose_row(row: ArrayView1<f64>, cfg: &DecompositionConfig) -> Result<Components<Vec<f64>>, DecomposeError> {
    match row.as_slice() {
        Some(s) => decompose_series(s, cfg),
        None => decompose_series(&row.to_vec(), cfg),
    }
}

/// Decomposes every row of a `D × L` matrix independently.
pub fn decompose(input: ArrayView2<f64>, cfg: &DecompositionConfig) -> Result<Components<Array2<f64>>, DecomposeError> {
    let shape = input.raw_dim();
    let mut out = Components {
        trend: Array2::zeros(shape),
        seasonal: Array2::zeros(shape),
        residual: Array2::zeros(shape),
    };
    for (d, row) in input.axis_iter(Axis(0)).enumerate() {
        let c = decompose_row(row, cfg)?;
        out.trend.row_mut(d).assign(&ArrayView1::from(&c.trend));
        out.seasonal.row_mut(d).assign(&ArrayView1::from(&c.seasonal));
        out.residual.row_mut(d).assign(&ArrayView1::from(&c.residual));
    }
    Ok(out)
}
