use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Linear;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gating::Shortfall;
use crate::params::{Graph, Init, ParamStore, Session};
use crate::sparse_linear::{BlockGeometry, DynamicLinear, DynamicLinearSpec, GateInit};

/// Feed-forward classifier: a dense input projection, `hidden_layers`
/// dynamic sparse `width×width` layers with ReLU, and a dense output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub block: usize,
    pub sparsity: f64,
    pub num_classes: usize,
    /// Gate key length; `None` feeds the whole hidden vector to the gate.
    pub key_size: Option<usize>,
    /// Use zero gate weights with a constant bias instead of random gates.
    pub constant_gates: bool,
    /// Plain dense hidden layers (the baseline) instead of gated ones.
    pub dense: bool,
    pub shortfall: Shortfall,
}

impl MlpConfig {
    /// Five dynamic 1024-unit layers with 128×128 blocks at ς = 0.9.
    pub fn full_scale() -> Self {
        Self {
            input_dim: 784,
            width: 1024,
            hidden_layers: 5,
            block: 128,
            sparsity: 0.9,
            num_classes: 10,
            key_size: None,
            constant_gates: false,
            dense: false,
            shortfall: Shortfall::Keep,
        }
    }

    /// Two dynamic 512-unit layers with 64×64 blocks at ς = 0.9.
    pub fn desk() -> Self {
        Self {
            width: 512,
            hidden_layers: 2,
            block: 64,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.block == 0 || self.width % self.block != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of block {}",
                self.width, self.block
            )));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Hidden {
    Dense(Linear),
    Dynamic(DynamicLinear),
}

#[derive(Clone, Debug)]
pub struct Mlp {
    cfg: MlpConfig,
    input: Linear,
    hidden: Vec<Hidden>,
    output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        cfg: MlpConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let input = Linear::new(
            store,
            "input",
            cfg.input_dim,
            w,
            Init::He {
                fan_in: cfg.input_dim,
            },
            rng,
        )?;
        let gate_init = if cfg.constant_gates {
            GateInit::Constant(crate::gating::GATE_BIAS_INIT)
        } else {
            GateInit::Random
        };
        let hidden = (0..cfg.hidden_layers)
            .map(|l| {
                let name = format!("hidden{}", l + 1);
                if cfg.dense {
                    return Ok(Hidden::Dense(Linear::new(
                        store,
                        &name,
                        w,
                        w,
                        Init::He { fan_in: w },
                        rng,
                    )?));
                }
                let spec = DynamicLinearSpec {
                    geometry: BlockGeometry::with_block(w, w, cfg.block)?,
                    key_size: cfg.key_size.unwrap_or(w),
                    sparsity: cfg.sparsity,
                    bias: true,
                    weight_init: Init::He { fan_in: w },
                    gate_init,
                    own_gate: true,
                    shortfall: cfg.shortfall,
                };
                Ok(Hidden::Dynamic(DynamicLinear::new(
                    store, &name, spec, rng,
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(
            store,
            "output",
            w,
            cfg.num_classes,
            Init::He { fan_in: w },
            rng,
        )?;
        Ok(Self {
            cfg,
            input,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    /// Gated hidden layers, input side first. Empty for a dense model.
    pub fn dynamic_layers(&self) -> Vec<&DynamicLinear> {
        self.hidden
            .iter()
            .filter_map(|h| match h {
                Hidden::Dynamic(d) => Some(d),
                Hidden::Dense(_) => None,
            })
            .collect()
    }

    pub fn set_sparsity(&mut self, sparsity: f64) -> Result<()> {
        for h in &mut self.hidden {
            if let Hidden::Dynamic(d) = h {
                d.set_sparsity(sparsity)?;
            }
        }
        self.cfg.sparsity = sparsity;
        Ok(())
    }

    /// Logits for `x: [B×input_dim]` (or a single `[input_dim]` vector).
    pub fn forward(&self, g: &Graph<'_>, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut h = g.tape.relu(self.input.forward(g, x)?)?;
        for layer in &self.hidden {
            let y = match layer {
                Hidden::Dense(l) => l.forward(g, h)?,
                Hidden::Dynamic(d) => d.forward(g, s, h)?,
            };
            h = g.tape.relu(y)?;
        }
        self.output.forward(g, h)
    }
}
