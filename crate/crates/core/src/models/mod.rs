//! Experiment architectures assembled from dense and dynamic sparse layers.

mod lstm;
mod mlp;

pub use lstm::{lstm_cell, LayerMode, LstmLm, LstmLmConfig, LstmState, Recurrent, SegmentOutput};
pub use mlp::{Mlp, MlpConfig};

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Plain `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[outputs, inputs], rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let y = g.tape.linear(x, g.param(self.weight)?)?;
        g.tape.add_bias(y, g.param(self.bias)?)
    }
}
