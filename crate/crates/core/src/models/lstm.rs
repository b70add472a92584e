use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Linear;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gating::Shortfall;
use crate::params::{Graph, Init, ParamGrads, ParamId, ParamStore, Session};
use crate::pruning::StaticMask;
use crate::sparse_linear::{BlockGeometry, DynamicLinear, DynamicLinearSpec, GateInit};
use crate::tensor::Tensor;

/// How an LSTM layer's input-to-hidden and hidden-to-hidden matrices are
/// computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Dense,
    Dynamic,
    /// Dense matrices with a per-weight magnitude-pruning mask.
    Static,
}

impl std::str::FromStr for LayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "dynamic" => Ok(Self::Dynamic),
            "static" => Ok(Self::Static),
            other => Err(Error::Config(format!("unknown layer mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub block: usize,
    pub sparsity: f64,
    /// Gate key length for every gated matrix; `None` uses a quarter of the
    /// matrix input size.
    pub key_size: Option<usize>,
    pub modes: Vec<LayerMode>,
    /// One gate per layer, computed from the recurrent state and applied to
    /// both matrices. Requires `embed_dim == hidden_dim`.
    pub shared_gate: bool,
    pub init_range: f64,
    pub shortfall: Shortfall,
}

impl LstmLmConfig {
    /// Two 1536-unit layers, 128×128 blocks, 65% dropout.
    pub fn full_scale(vocab_size: usize, mode: LayerMode) -> Self {
        Self {
            vocab_size,
            embed_dim: 1536,
            hidden_dim: 1536,
            num_layers: 2,
            dropout: 0.65,
            block: 128,
            sparsity: 0.5,
            key_size: None,
            modes: vec![mode; 2],
            shared_gate: false,
            init_range: 0.05,
            shortfall: Shortfall::Keep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
        {
            return err("LM sizes must be positive".into());
        }
        if self.modes.len() != self.num_layers {
            return err(format!(
                "{} layer modes for {} layers",
                self.modes.len(),
                self.num_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.modes.contains(&LayerMode::Dynamic) {
            if self.block == 0
                || self.hidden_dim % self.block != 0
                || self.embed_dim % self.block != 0
            {
                return err(format!(
                    "embed {} and hidden {} must be multiples of block {}",
                    self.embed_dim, self.hidden_dim, self.block
                ));
            }
            if self.shared_gate && self.embed_dim != self.hidden_dim {
                return err("a shared gate needs embed_dim == hidden_dim".into());
            }
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    fn key_for(&self, inputs: usize) -> usize {
        self.key_size.unwrap_or((inputs / 4).max(1))
    }

    /// Scalar parameters of the model, gating networks included.
    pub fn param_count(&self) -> usize {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut n = v * e + v * h + v;
        for l in 0..self.num_layers {
            n += 4 * h * self.layer_input(l) + 4 * h * h + 4 * h;
        }
        n + self.gating_param_count()
    }

    /// `Σ (key_size·r·c + r·c)` over the gated matrices.
    pub fn gating_param_count(&self) -> usize {
        let h = self.hidden_dim;
        let mut n = 0;
        for (l, mode) in self.modes.iter().enumerate() {
            if *mode != LayerMode::Dynamic {
                continue;
            }
            let rows = 4 * h / self.block;
            let hh = rows * (h / self.block);
            if self.shared_gate {
                n += self.key_for(h) * hh + hh;
            } else {
                let inp = self.layer_input(l);
                let xh = rows * (inp / self.block);
                n += self.key_for(inp) * xh + xh + self.key_for(h) * hh + hh;
            }
        }
        n
    }
}

/// One fused `4H×in` gate matrix.
#[derive(Clone, Debug)]
pub enum Recurrent {
    Dense {
        weight: ParamId,
        geometry: BlockGeometry,
        name: String,
    },
    Dynamic(DynamicLinear),
}

impl Recurrent {
    pub fn weight(&self) -> ParamId {
        match self {
            Recurrent::Dense { weight, .. } => *weight,
            Recurrent::Dynamic(d) => d.weight(),
        }
    }

    fn name(&self) -> &str {
        match self {
            Recurrent::Dense { name, .. } => name,
            Recurrent::Dynamic(d) => d.name(),
        }
    }

    fn dense_product(&self, g: &Graph<'_>, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let Recurrent::Dense {
            weight,
            geometry,
            name,
        } = self
        else {
            unreachable!("dense product on a dynamic matrix")
        };
        let rows = g.tape.value(x).as_matrix_dims().0 as u64;
        s.ledger(name).record_product(geometry, rows, rows);
        g.tape.linear(x, g.param(*weight)?)
    }
}

#[derive(Clone, Debug)]
struct LstmLayer {
    mode: LayerMode,
    wx: Recurrent,
    wh: Recurrent,
    bias: ParamId,
}

/// Recurrent state, one `[B×H]` hidden and cell tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![Tensor::zeros(&[batch, hidden]); layers],
            c: vec![Tensor::zeros(&[batch, hidden]); layers],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(Tensor::is_finite)
    }
}

/// Standard LSTM update from the fused pre-activation `z = W_x·x + W_h·h + b`
/// laid out as `[i | f | g | o]`.
pub fn lstm_cell(t: &Tape, z: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = t.sigmoid(t.slice_cols(z, 0, hidden)?)?;
    let f = t.sigmoid(t.slice_cols(z, hidden, hidden)?)?;
    let gg = t.tanh(t.slice_cols(z, 2 * hidden, hidden)?)?;
    let o = t.sigmoid(t.slice_cols(z, 3 * hidden, hidden)?)?;
    let c_new = t.add(t.mul(f, c)?, t.mul(i, gg)?)?;
    let h_new = t.mul(o, t.tanh(c_new)?)?;
    Ok((h_new, c_new))
}

/// Result of running the model over one truncated-BPTT segment.
pub struct SegmentOutput {
    /// Mean token cross-entropy over the segment.
    pub loss: Var,
    pub tokens: usize,
    /// Final state values, detached from the tape.
    pub state: LstmState,
}

/// Word-level LSTM language model with dense embedding and output layers.
#[derive(Clone, Debug)]
pub struct LstmLm {
    cfg: LstmLmConfig,
    embedding: ParamId,
    layers: Vec<LstmLayer>,
    output: Linear,
    static_masks: Vec<(ParamId, StaticMask)>,
}

impl LstmLm {
    pub fn new<R: Rng + ?Sized>(
        cfg: LstmLmConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let init = Init::Uniform(cfg.init_range);
        let h = cfg.hidden_dim;
        let embedding = store.add(
            "embedding",
            init.sample(&[cfg.vocab_size, cfg.embed_dim], rng),
        )?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let inp = cfg.layer_input(l);
            let mode = cfg.modes[l];
            let mut matrix = |suffix: &str, cols: usize, own_gate: bool| -> Result<Recurrent> {
                let name = format!("lstm{l}.{suffix}");
                match mode {
                    LayerMode::Dynamic => {
                        let spec = DynamicLinearSpec {
                            geometry: BlockGeometry::with_block(4 * h, cols, cfg.block)?,
                            key_size: cfg.key_for(cols),
                            sparsity: cfg.sparsity,
                            bias: false,
                            weight_init: init,
                            gate_init: GateInit::Random,
                            own_gate,
                            shortfall: cfg.shortfall,
                        };
                        Ok(Recurrent::Dynamic(DynamicLinear::new(
                            store, &name, spec, rng,
                        )?))
                    }
                    LayerMode::Dense | LayerMode::Static => {
                        let weight = store
                            .add(format!("{name}.weight"), init.sample(&[4 * h, cols], rng))?;
                        Ok(Recurrent::Dense {
                            weight,
                            geometry: BlockGeometry::new(4 * h, cols, 1, 1)?,
                            name,
                        })
                    }
                }
            };
            let wx = matrix("wx", inp, !cfg.shared_gate)?;
            let wh = matrix("wh", h, true)?;
            let bias = store.add(format!("lstm{l}.bias"), init.sample(&[4 * h], rng))?;
            layers.push(LstmLayer { mode, wx, wh, bias });
        }
        let output = Linear::new(store, "decoder", h, cfg.vocab_size, init, rng)?;
        let mut lm = Self {
            cfg,
            embedding,
            layers,
            output,
            static_masks: Vec::new(),
        };
        lm.static_masks = lm
            .static_weights()
            .into_iter()
            .map(|id| (id, StaticMask::all_true(store.get(id).shape())))
            .collect();
        Ok(lm)
    }

    pub fn config(&self) -> &LstmLmConfig {
        &self.cfg
    }

    pub fn initial_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(self.cfg.num_layers, batch, self.cfg.hidden_dim)
    }

    pub fn set_sparsity(&mut self, sparsity: f64) -> Result<()> {
        for layer in &mut self.layers {
            for m in [&mut layer.wx, &mut layer.wh] {
                if let Recurrent::Dynamic(d) = m {
                    d.set_sparsity(sparsity)?;
                }
            }
        }
        self.cfg.sparsity = sparsity;
        Ok(())
    }

    /// Gated matrices, in layer order.
    pub fn dynamic_layers(&self) -> Vec<&DynamicLinear> {
        self.layers
            .iter()
            .flat_map(|l| [&l.wx, &l.wh])
            .filter_map(|m| match m {
                Recurrent::Dynamic(d) => Some(d),
                Recurrent::Dense { .. } => None,
            })
            .collect()
    }

    /// Weights of layers in static (pruned) mode.
    pub fn static_weights(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter(|l| l.mode == LayerMode::Static)
            .flat_map(|l| [l.wx.weight(), l.wh.weight()])
            .collect()
    }

    pub fn static_masks(&self) -> &[(ParamId, StaticMask)] {
        &self.static_masks
    }

    /// Installs new pruning masks and zeroes the pruned weights.
    pub fn set_static_masks(
        &mut self,
        store: &mut ParamStore,
        masks: Vec<(ParamId, StaticMask)>,
    ) -> Result<()> {
        self.static_masks = masks;
        self.apply_static_masks(store)
    }

    pub fn apply_static_masks(&self, store: &mut ParamStore) -> Result<()> {
        for (id, mask) in &self.static_masks {
            mask.apply(store.get_mut(*id))?;
        }
        Ok(())
    }

    /// Discards gradients flowing to pruned weights.
    pub fn mask_gradients(&self, grads: &mut ParamGrads) -> Result<()> {
        for (id, mask) in &self.static_masks {
            if let Some(g) = grads.get_mut(*id) {
                mask.apply(g)?;
            }
        }
        Ok(())
    }

    fn gated_matrix(
        &self,
        g: &Graph<'_>,
        s: &mut Session<'_>,
        m: &Recurrent,
        x: Var,
        key: Var,
        shared: Option<Var>,
    ) -> Result<Var> {
        match m {
            Recurrent::Dense { .. } => m.dense_product(g, s, x),
            Recurrent::Dynamic(d) => match shared {
                Some(mask) => d.apply(g, s, x, mask),
                None => {
                    let key = d.key(g, key)?;
                    let mask = d.gate(g, s, key)?;
                    d.apply(g, s, x, mask)
                }
            },
        }
    }

    /// One time step of one layer. `x` is the (possibly dropped-out) input,
    /// `x_key` the same input before dropout, which the gate reads.
    fn step(
        &self,
        g: &Graph<'_>,
        s: &mut Session<'_>,
        layer: &LstmLayer,
        x: Var,
        x_key: Var,
        (h, c): (Var, Var),
    ) -> Result<(Var, Var)> {
        let shared = match (&layer.wh, self.cfg.shared_gate) {
            (Recurrent::Dynamic(d), true) => {
                let key = d.key(g, h)?;
                Some(d.gate(g, s, key)?)
            }
            _ => None,
        };
        let zx = self.gated_matrix(g, s, &layer.wx, x, x_key, shared)?;
        let zh = self.gated_matrix(g, s, &layer.wh, h, h, shared)?;
        let z = g.tape.add_bias(g.tape.add(zx, zh)?, g.param(layer.bias)?)?;
        lstm_cell(&g.tape, z, c, self.cfg.hidden_dim)
    }

    /// Runs `inputs` (time-major, `T` steps of `B` ids) from `state` and
    /// returns per-step logits `[B×V]` and the final state vars.
    pub fn forward(
        &self,
        g: &Graph<'_>,
        s: &mut Session<'_>,
        inputs: &[Vec<usize>],
        state: &LstmState,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let t = &g.tape;
        let mut hs = state
            .h
            .iter()
            .map(|h| t.constant(h.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut cs = state
            .c
            .iter()
            .map(|c| t.constant(c.clone()))
            .collect::<Result<Vec<_>>>()?;
        let table = g.param(self.embedding)?;
        let mut logits = Vec::with_capacity(inputs.len());
        for ids in inputs {
            if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
                return Err(Error::Index {
                    what: "token id",
                    index: bad,
                    size: self.cfg.vocab_size,
                });
            }
            let mut key = t.embedding(table, ids)?;
            let mut x = t.dropout(key, self.cfg.dropout, s.training, s.rng)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let (h, c) = self.step(g, s, layer, x, key, (hs[l], cs[l]))?;
                hs[l] = h;
                cs[l] = c;
                key = h;
                x = t.dropout(h, self.cfg.dropout, s.training, s.rng)?;
            }
            logits.push(self.output.forward(g, x)?);
        }
        Ok((logits, hs, cs))
    }

    /// Mean cross-entropy of predicting `targets` over one segment.
    pub fn segment(
        &self,
        g: &Graph<'_>,
        s: &mut Session<'_>,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        state: &LstmState,
    ) -> Result<SegmentOutput> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::shape(
                "LstmLm::segment",
                format!(
                    "{} input steps for {} target steps",
                    inputs.len(),
                    targets.len()
                ),
            ));
        }
        let (logits, hs, cs) = self.forward(g, s, inputs, state)?;
        let t = &g.tape;
        let mut total = None;
        for (l, y) in logits.iter().zip(targets) {
            let ce = t.cross_entropy(*l, y)?;
            total = Some(match total {
                None => ce,
                Some(acc) => t.add(acc, ce)?,
            });
        }
        let loss = t.scale(total.expect("non-empty segment"), 1.0 / inputs.len() as f64)?;
        let state = LstmState {
            h: hs
                .iter()
                .map(|v| t.value(*v).clone().with_requires_grad(false))
                .collect(),
            c: cs
                .iter()
                .map(|v| t.value(*v).clone().with_requires_grad(false))
                .collect(),
        };
        Ok(SegmentOutput {
            loss,
            tokens: inputs.len() * inputs[0].len(),
            state,
        })
    }

    /// Names of the ledgers recorded for the recurrent matrices.
    pub fn matrix_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [l.wx.name().to_string(), l.wh.name().to_string()])
            .collect()
    }
}
