//! Named parameter storage, per-step tape bindings, and the mutable state
//! threaded through a forward pass.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse_linear::ComputeLedger;
use crate::tensor::Tensor;

/// The crate's only RNG type; every random draw flows from one seed.
pub type SeededRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform(f64),
    /// He-uniform for ReLU stacks: `U(±√(6/fan_in))`.
    He {
        fan_in: usize,
    },
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        match *self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Uniform(b) => Tensor::uniform(shape, -b, b, rng),
            Init::He { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::uniform(shape, -b, b, rng)
            }
        }
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor by name, keeping the registered shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::shape(
                "ParamStore::assign",
                format!(
                    "{name}: {:?} vs stored {:?}",
                    tensor.shape(),
                    self.tensors[id.0].shape()
                ),
            ));
        }
        self.tensors[id.0] = tensor.with_requires_grad(true);
        Ok(())
    }
}

/// One forward/backward pass over a [`ParamStore`]: parameters are bound to
/// tape leaves lazily, the first time a layer asks for them.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let v = self.tape.param(self.store.get(id).clone())?;
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    /// Backpropagates from `loss` and collects one gradient per parameter
    /// that took part in the pass.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let bound = self.bound.borrow();
        Ok(ParamGrads {
            grads: bound
                .iter()
                .map(|v| v.and_then(|v| grads.take(v)))
                .collect(),
        })
    }
}

/// Gradients keyed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, grad: Tensor) {
        self.grads[id.0] = Some(grad);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Gate values observed for one layer, one row of `gates` values per input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub gates: usize,
    pub values: Vec<f64>,
}

impl LayerTrace {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.gates.max(1))
    }

    pub fn instances(&self) -> usize {
        self.values.len().checked_div(self.gates).unwrap_or(0)
    }
}

/// Mutable per-pass state: dropout RNG, train/eval mode, compute ledgers and
/// an optional recording of every gate mask.
pub struct Session<'r> {
    pub training: bool,
    pub rng: &'r mut SeededRng,
    pub ledgers: BTreeMap<String, ComputeLedger>,
    pub trace: Option<BTreeMap<String, LayerTrace>>,
}

impl<'r> Session<'r> {
    pub fn new(training: bool, rng: &'r mut SeededRng) -> Self {
        Self {
            training,
            rng,
            ledgers: BTreeMap::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(BTreeMap::new());
        self
    }

    pub fn ledger(&mut self, layer: &str) -> &mut ComputeLedger {
        self.ledgers.entry(layer.to_string()).or_default()
    }

    pub fn record_gates(&mut self, layer: &str, gates: usize, values: &[f64]) {
        if let Some(trace) = &mut self.trace {
            let t = trace.entry(layer.to_string()).or_default();
            t.gates = gates;
            t.values.extend_from_slice(values);
        }
    }

    /// Sum of all ledgers.
    pub fn total_ledger(&self) -> ComputeLedger {
        self.ledgers
            .values()
            .fold(ComputeLedger::default(), |acc, l| acc.merged(l))
    }
}
