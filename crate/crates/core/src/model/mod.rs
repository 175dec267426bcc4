//! The decomposition-based spatio-temporal forecaster.
//!
//! Each decomposition component gets its own model: a GATv2 spatial branch
//! and a TCN temporal branch run in parallel on the `[B, D, L]` input, their
//! outputs are added to a linear date-time embedding, and a per-channel
//! linear head maps the result to `[B, D, H]`. The forecast is the sum of
//! the component forecasts.

pub mod layers;
mod params;
pub mod witness;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{WindowSample, TIME_FEATURES};
use crate::decompose::{decompose, DecomposeError, DecompositionConfig};
use crate::diff::{DiffError, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::graph::ComponentGraph;

pub use layers::{Activation, HeadVars, NeighborIndex};
pub use params::ParamSet;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("graph has {got} nodes, model expects {expected}")]
    GraphSize { expected: usize, got: usize },
    #[error("expected {expected} component graphs, got {got}")]
    GraphCount { expected: usize, got: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sample shape {got:?} does not match the model ({expected:?})")]
    SampleShape { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("parameter {0:?} is missing or has the wrong shape")]
    Parameter(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

/// Switches for the single-module ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub decomposition: bool,
    pub time_embedding: bool,
    pub temporal: bool,
    pub spatial: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            decomposition: true,
            time_embedding: true,
            temporal: true,
            spatial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub time_features: usize,
    pub decomposition: DecompositionConfig,
    /// GATv2 hidden width; `None` keeps the look-back length.
    pub gat_hidden: Option<usize>,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub tcn_residual: bool,
    pub tcn_activation: Activation,
    pub slope: f64,
    pub flags: AblationFlags,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize, decomposition: DecompositionConfig) -> Self {
        Self {
            channels,
            lookback,
            horizon,
            time_features: TIME_FEATURES,
            decomposition,
            gat_hidden: None,
            gat_heads: 1,
            gat_layers: 1,
            tcn_layers: 3,
            tcn_kernel: 3,
            tcn_residual: true,
            tcn_activation: Activation::Leaky,
            slope: DEFAULT_LEAKY_SLOPE,
            flags: AblationFlags::default(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gat_hidden.unwrap_or(self.lookback)
    }

    /// Number of component models: three with decomposition, one without.
    pub fn slots(&self) -> usize {
        if self.flags.decomposition {
            3
        } else {
            1
        }
    }

    pub fn slot_names(&self) -> &'static [&'static str] {
        if self.flags.decomposition {
            &["trend", "seasonal", "residual"]
        } else {
            &["raw"]
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("gat_heads", self.gat_heads),
            ("gat_layers", self.gat_layers),
            ("tcn_kernel", self.tcn_kernel),
            ("gat_hidden", self.hidden()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.tcn_layers > 30 {
            return Err(ModelError::Config("tcn_layers must be at most 30".into()));
        }
        if self.flags.decomposition {
            self.decomposition.validate()?;
        }
        Ok(())
    }

    /// Receptive field of the temporal stack: `1 + (k − 1)·(2ⁿ − 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.tcn_kernel - 1) * ((1usize << self.tcn_layers) - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadSlots {
    w: usize,
    a: usize,
    out: Option<usize>,
}

/// Parameter positions of one component model.
#[derive(Debug, Clone, PartialEq)]
struct ComponentSlots {
    gat: Vec<Vec<HeadSlots>>,
    tcn: Vec<usize>,
    time: usize,
    head_w: usize,
    head_b: usize,
}

/// A batch in model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// One `[B, D, L]` tensor per component slot.
    pub inputs: Vec<Tensor>,
    /// `[B, F, L]`.
    pub time: Tensor,
    /// `[B, D, H]`.
    pub target: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.time.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DstModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    neighbors: Vec<NeighborIndex>,
    slots: Vec<ComponentSlots>,
}

impl DstModel {
    /// Builds a model with seeded uniform `±sqrt(1/fan_in)` initialization.
    ///
    /// `graphs` holds one graph per component slot (trend, seasonal,
    /// residual; or a single graph without decomposition).
    pub fn new(config: ModelConfig, graphs: &[ComponentGraph], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if graphs.len() != config.slots() {
            return Err(ModelError::GraphCount {
                expected: config.slots(),
                got: graphs.len(),
            });
        }
        for g in graphs {
            if g.nodes() != config.channels {
                return Err(ModelError::GraphSize {
                    expected: config.channels,
                    got: g.nodes(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let (d, l, h, f, dh) = (
            config.channels,
            config.lookback,
            config.horizon,
            config.time_features,
            config.hidden(),
        );
        let mut slots = Vec::new();
        for name in config.slot_names() {
            let mut gat = Vec::new();
            for layer in 0..config.gat_layers {
                let mut heads = Vec::new();
                for head in 0..config.gat_heads {
                    let p = format!("{name}.gat{layer}.h{head}");
                    heads.push(HeadSlots {
                        w: params.init(&mut rng, format!("{p}.w"), &[2 * l, dh], 2 * l),
                        a: params.init(&mut rng, format!("{p}.a"), &[dh, 1], dh),
                        out: (dh != l).then(|| params.init(&mut rng, format!("{p}.out"), &[dh, l], dh)),
                    });
                }
                gat.push(heads);
            }
            let tcn = (0..config.tcn_layers)
                .map(|n| {
                    params.init(
                        &mut rng,
                        format!("{name}.tcn{n}.kernel"),
                        &[d, config.tcn_kernel],
                        config.tcn_kernel,
                    )
                })
                .collect();
            let time = params.init(&mut rng, format!("{name}.time.embed"), &[d, f], f);
            let head_w = params.init(&mut rng, format!("{name}.head.w"), &[d, h, l], l);
            let head_b = params.init(&mut rng, format!("{name}.head.b"), &[d, h], l);
            slots.push(ComponentSlots {
                gat,
                tcn,
                time,
                head_w,
                head_b,
            });
        }
        Ok(Self {
            neighbors: graphs.iter().map(NeighborIndex::with_self_loops).collect(),
            config,
            params,
            slots,
        })
    }

    /// Rebuilds a model around saved parameters; names and shapes must match
    /// what [`DstModel::new`] would create.
    pub fn with_params(config: ModelConfig, graphs: &[ComponentGraph], params: ParamSet) -> Result<Self, ModelError> {
        let mut model = Self::new(config, graphs, 0)?;
        for (name, t) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            let saved = params.get(name).ok_or_else(|| ModelError::Parameter(name.clone()))?;
            if saved.shape() != t.shape() {
                return Err(ModelError::Parameter(name.clone()));
            }
            *t = saved.clone();
        }
        if params.len() != model.params.len() {
            return Err(ModelError::Parameter("unexpected extra parameters".into()));
        }
        Ok(model)
    }

    pub fn neighbors(&self, slot: usize) -> &NeighborIndex {
        &self.neighbors[slot]
    }

    /// Registers every parameter on the tape, in [`ParamSet`] order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Head variables of GATv2 layer `layer` in component `slot`.
    pub fn head_vars(&self, vars: &[Var], slot: usize, layer: usize) -> Vec<HeadVars> {
        self.slots[slot].gat[layer]
            .iter()
            .map(|h| HeadVars {
                w: vars[h.w],
                a: vars[h.a],
                out: h.out.map(|o| vars[o]),
            })
            .collect()
    }

    /// Spatial branch of component `slot`: the stacked GATv2 layers.
    pub fn spatial(&self, tape: &mut Tape, vars: &[Var], slot: usize, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        for layer in 0..self.config.gat_layers {
            let heads = self.head_vars(vars, slot, layer);
            h = layers::gatv2_layer(tape, h, &heads, &self.neighbors[slot], self.config.slope)?;
        }
        Ok(h)
    }

    pub fn temporal(&self, tape: &mut Tape, vars: &[Var], slot: usize, x: Var) -> Result<Var, ModelError> {
        let kernels: Vec<Var> = self.slots[slot].tcn.iter().map(|&i| vars[i]).collect();
        Ok(layers::tcn_forward(
            tape,
            x,
            &kernels,
            self.config.tcn_residual,
            self.config.tcn_activation,
            self.config.slope,
        )?)
    }

    /// One component model: `[B, D, L]` input and `[B, F, L]` calendar
    /// features to a `[B, D, H]` forecast.
    ///
    /// Disabled branches are left out of the feature sum; the time
    /// embedding's removal equals adding zeros. With everything disabled
    /// the head reads the input directly.
    pub fn component_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        slot: usize,
        x: Var,
        x_time: Var,
    ) -> Result<Var, ModelError> {
        let flags = self.config.flags;
        let mut parts = Vec::new();
        if flags.spatial {
            parts.push(self.spatial(tape, vars, slot, x)?);
        }
        if flags.temporal {
            parts.push(self.temporal(tape, vars, slot, x)?);
        }
        if flags.time_embedding {
            parts.push(layers::time_embedding(tape, x_time, vars[self.slots[slot].time])?);
        }
        let mut features = match parts.first() {
            Some(&p) => p,
            None => x,
        };
        for &p in parts.iter().skip(1) {
            features = tape.add(features, p)?;
        }
        let s = &self.slots[slot];
        Ok(layers::linear_head(tape, features, vars[s.head_w], vars[s.head_b])?)
    }

    /// Per-component forecasts, in slot order.
    pub fn component_forecasts(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Vec<Var>, ModelError> {
        let x_time = tape.constant(batch.time.clone());
        (0..self.slots.len())
            .map(|slot| {
                let x = tape.constant(batch.inputs[slot].clone());
                self.component_forward(tape, vars, slot, x, x_time)
            })
            .collect()
    }

    /// Sum of the component forecasts, `[B, D, H]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var, ModelError> {
        let parts = self.component_forecasts(tape, vars, batch)?;
        let mut out = parts[0];
        for &p in &parts[1..] {
            out = tape.add(out, p)?;
        }
        Ok(out)
    }

    /// Mean squared error of the forecast against `batch.target`.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var, ModelError> {
        self.loss_on(tape, vars, batch, None)
    }

    /// Like [`DstModel::loss`], restricted to one output channel when given.
    pub fn loss_on(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, channel: Option<usize>) -> Result<Var, ModelError> {
        let mut pred = self.forward(tape, vars, batch)?;
        let mut target = tape.constant(batch.target.clone());
        if let Some(c) = channel {
            pred = tape.slice(pred, 1, c, 1)?;
            target = tape.slice(target, 1, c, 1)?;
        }
        Ok(tape.mse(pred, target)?)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &Batch, channel: Option<usize>) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let loss = self.loss_on(&mut tape, &vars, batch, channel)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads = vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Stacks samples into model layout, decomposing each look-back when
    /// decomposition is enabled.
    pub fn batch(&self, samples: &[&WindowSample]) -> Result<Batch, ModelError> {
        let (d, l, h, f) = (
            self.config.channels,
            self.config.lookback,
            self.config.horizon,
            self.config.time_features,
        );
        let b = samples.len();
        let mut inputs = vec![Vec::with_capacity(b * d * l); self.slots.len()];
        let mut time = Vec::with_capacity(b * f * l);
        let mut target = Vec::with_capacity(b * d * h);
        for s in samples {
            let got = (s.lookback.nrows(), s.lookback.ncols(), s.target.ncols());
            if got != (d, l, h) || s.time_features.dim() != (f, l) || s.target.nrows() != d {
                return Err(ModelError::SampleShape {
                    expected: (d, l, h),
                    got,
                });
            }
            if self.config.flags.decomposition {
                let c = decompose(s.lookback.view(), &self.config.decomposition)?;
                extend_rows(&mut inputs[0], c.trend.view());
                extend_rows(&mut inputs[1], c.seasonal.view());
                extend_rows(&mut inputs[2], c.residual.view());
            } else {
                extend_rows(&mut inputs[0], s.lookback.view());
            }
            extend_rows(&mut time, s.time_features.view());
            extend_rows(&mut target, s.target.view());
        }
        Ok(Batch {
            inputs: inputs
                .into_iter()
                .map(|v| Tensor::new(vec![b, d, l], v))
                .collect::<Result<_, _>>()?,
            time: Tensor::new(vec![b, f, l], time)?,
            target: Tensor::new(vec![b, d, h], target)?,
        })
    }

    /// Forecasts `D × H` for each sample. Chunks run in parallel on copies of
    /// the parameters; results do not depend on the chunking.
    pub fn predict(&self, samples: &[&WindowSample], chunk: usize) -> Result<Vec<Array2<f64>>, ModelError> {
        let (d, h) = (self.config.channels, self.config.horizon);
        let chunks: Vec<Vec<Array2<f64>>> = samples
            .par_chunks(chunk.max(1))
            .map(|part| -> Result<Vec<Array2<f64>>, ModelError> {
                let batch = self.batch(part)?;
                let mut tape = Tape::new();
                let vars: Vec<Var> = self.params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
                let out = self.forward(&mut tape, &vars, &batch)?;
                Ok(tape
                    .value(out)
                    .data()
                    .chunks(d * h)
                    .map(|c| Array2::from_shape_vec((d, h), c.to_vec()).expect("D·H chunk"))
                    .collect())
            })
            .collect::<Result<_, _>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict_one(&self, sample: &WindowSample) -> Result<Array2<f64>, ModelError> {
        Ok(self.predict(&[sample], 1)?.remove(0))
    }
}

fn extend_rows(dst: &mut Vec<f64>, m: ArrayView2<f64>) {
    match m.as_slice() {
        Some(s) => dst.extend_from_slice(s),
        None => dst.extend(m.iter()),
    }
}
