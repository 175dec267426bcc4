use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::model::AblationFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    NoDecomposition,
    NoTimeEmbedding,
    NoTemporal,
    NoSpatial,
    Original,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::NoDecomposition,
        AblationVariant::NoTimeEmbedding,
        AblationVariant::NoTemporal,
        AblationVariant::NoSpatial,
        AblationVariant::Original,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoDecomposition => "no-decomposition",
            AblationVariant::NoTimeEmbedding => "no-time-embedding",
            AblationVariant::NoTemporal => "no-temporal",
            AblationVariant::NoSpatial => "no-spatial",
            AblationVariant::Original => "original",
        }
    }

    /// `base` with this variant's module switched off.
    pub fn apply(self, base: AblationFlags) -> AblationFlags {
        let mut f = base;
        match self {
            AblationVariant::NoDecomposition => f.decomposition = false,
            AblationVariant::NoTimeEmbedding => f.time_embedding = false,
            AblationVariant::NoTemporal => f.temporal = false,
            AblationVariant::NoSpatial => f.spatial = false,
            AblationVariant::Original => {}
        }
        f
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: EvalReport,
}

/// Runs every variant through `run` (train + evaluate with the caller's
/// seed) and returns the rows in [`AblationVariant::ALL`] order. Runs are
/// independent and execute concurrently.
pub fn ablate<E, F>(base: AblationFlags, run: F) -> Result<Vec<AblationRow>, E>
where
    E: Send,
    F: Fn(AblationVariant, AblationFlags) -> Result<EvalReport, E> + Sync,
{
    AblationVariant::ALL
        .par_iter()
        .map(|&v| run(v, v.apply(base)).map(|report| AblationRow { variant: v, report }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub layers: usize,
    pub report: EvalReport,
}

/// One run per GATv2 depth `1..=max_layers`, concurrently, in depth order.
pub fn layer_sweep<E, F>(max_layers: usize, run: F) -> Result<Vec<SweepPoint>, E>
where
    E: Send,
    F: Fn(usize) -> Result<EvalReport, E> + Sync,
{
    (1..=max_layers)
        .into_par_iter()
        .map(|layers| run(layers).map(|report| SweepPoint { layers, report }))
        .collect()
}
