//! Sparseness ramp, optimizers, epoch loops and the experiment drivers shared
//! by the command line and the test suites.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config::{OptimKind, RunConfig, RunMode};
use crate::io::corpus::Corpus;
use crate::io::mnist::MnistData;
use crate::models::{LayerMode, LstmLm, LstmLmConfig, LstmState, Mlp, MlpConfig};
use crate::params::{Graph, ParamGrads, ParamStore, SeededRng, Session};
use crate::pruning::{agp_target_sparsity, magnitude_prune, small_dense_config, PruneSchedule};
use crate::sparse_linear::ComputeLedger;
use crate::tensor::Tensor;

/// Linear increase of the sparseness level from 0 at `start_epoch` to
/// `final_sparsity` at `end_epoch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityRamp {
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub final_sparsity: f64,
}

impl SparsityRamp {
    pub fn new(start_epoch: f64, end_epoch: f64, final_sparsity: f64) -> Result<Self> {
        if start_epoch.is_nan() || end_epoch.is_nan() || start_epoch >= end_epoch {
            return Err(Error::Parameter(format!(
                "ramp start {start_epoch} must precede end {end_epoch}"
            )));
        }
        if !(0.0..1.0).contains(&final_sparsity) {
            return Err(Error::Parameter(format!(
                "final sparsity {final_sparsity} not in [0,1)"
            )));
        }
        Ok(Self {
            start_epoch,
            end_epoch,
            final_sparsity,
        })
    }
}

pub fn ramp_value(epoch: f64, ramp: &SparsityRamp) -> f64 {
    let p = ((epoch - ramp.start_epoch) / (ramp.end_epoch - ramp.start_epoch)).clamp(0.0, 1.0);
    p * ramp.final_sparsity
}

/// Sparseness level per epoch: a ramp, or the final level throughout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsitySchedule {
    Constant(f64),
    Ramp(SparsityRamp),
}

impl SparsitySchedule {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.ramp_start == cfg.ramp_end {
            Ok(Self::Constant(cfg.sparsity))
        } else {
            Ok(Self::Ramp(SparsityRamp::new(
                cfg.ramp_start as f64,
                cfg.ramp_end as f64,
                cfg.sparsity,
            )?))
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match self {
            Self::Constant(s) => *s,
            Self::Ramp(r) => ramp_value(epoch as f64, r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before every step.
    pub clip: Option<f64>,
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            ..Self::sgd(lr, 0.0)
        }
    }

    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip: (cfg.clip > 0.0).then_some(cfg.clip),
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// SGD with momentum (`v ← μv + g; p ← p − η·v`) or Adam with bias
/// correction.
pub struct Optimizer {
    cfg: OptimConfig,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        if cfg.lr.is_nan() || cfg.lr <= 0.0 {
            return Err(Error::Parameter(format!(
                "learning rate {} must be positive",
                cfg.lr
            )));
        }
        Ok(Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Applies one update. Parameters without a gradient are left alone.
    /// Non-finite gradients abort the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if let Some(c) = self.cfg.clip {
            clip_gradients(grads, c);
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            match c.kind {
                OptimKind::Sgd => {
                    let v = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((p, v), g) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *v = c.momentum * *v + g;
                        *p -= c.lr * *v;
                    }
                }
                OptimKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                    for (((p, m), v), g) in p
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn perplexity(total_nll: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::Parameter("perplexity over zero tokens".into()));
    }
    Ok((total_nll / token_count as f64).exp())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Perplexity for language models, accuracy for classifiers.
    pub ppl_or_acc: f64,
    pub sparsity: f64,
    /// Multiply-adds of the gateable matrices relative to dense, gating
    /// included.
    pub comput_fraction: f64,
    pub gating_fallback_count: u64,
}

impl EpochReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn merge_ledgers(
    into: &mut BTreeMap<String, ComputeLedger>,
    from: &BTreeMap<String, ComputeLedger>,
) {
    for (k, l) in from {
        let e = into.entry(k.clone()).or_default();
        *e = e.merged(l);
    }
}

fn total(ledgers: &BTreeMap<String, ComputeLedger>) -> ComputeLedger {
    ledgers
        .values()
        .fold(ComputeLedger::default(), |a, l| a.merged(l))
}

fn fraction_or_one(l: &ComputeLedger) -> f64 {
    if l.dense_madds == 0 {
        1.0
    } else {
        l.fraction()
    }
}

/// One shuffled pass over `data` with cross-entropy loss.
pub fn train_mlp_epoch(
    mlp: &Mlp,
    store: &mut ParamStore,
    optim: &mut Optimizer,
    data: &MnistData,
    batch_size: usize,
    epoch: usize,
    rng: &mut SeededRng,
) -> Result<EpochReport> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut ledgers = BTreeMap::new();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let mut grads = {
            let g = Graph::new(store);
            let mut s = Session::new(true, rng);
            let xv = g.tape.constant(x)?;
            let logits = mlp.forward(&g, &mut s, xv)?;
            correct += count_correct(&g.tape.value(logits), &y);
            let loss = g.tape.cross_entropy(logits, &y)?;
            loss_sum += g.tape.value(loss).item() * chunk.len() as f64;
            merge_ledgers(&mut ledgers, &s.ledgers);
            g.backward(loss)?
        };
        optim.step(store, &mut grads)?;
    }
    let t = total(&ledgers);
    Ok(EpochReport {
        epoch,
        split: "train".into(),
        loss: loss_sum / data.len() as f64,
        ppl_or_acc: correct as f64 / data.len() as f64,
        sparsity: mlp.config().sparsity,
        comput_fraction: fraction_or_one(&t),
        gating_fallback_count: t.fallbacks,
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (_, classes) = logits.as_matrix_dims();
    labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count()
}

/// Evaluation pass; `trace` additionally records every gate mask.
pub fn eval_mlp(
    mlp: &Mlp,
    store: &ParamStore,
    data: &MnistData,
    batch_size: usize,
    epoch: usize,
    split: &str,
) -> Result<EpochReport> {
    Ok(eval_mlp_traced(mlp, store, data, batch_size, epoch, split, false)?.0)
}

#[allow(clippy::type_complexity)]
pub fn eval_mlp_traced(
    mlp: &Mlp,
    store: &ParamStore,
    data: &MnistData,
    batch_size: usize,
    epoch: usize,
    split: &str,
    trace: bool,
) -> Result<(EpochReport, BTreeMap<String, crate::params::LayerTrace>)> {
    let mut rng = SeededRng::seed_from_u64(0);
    let mut ledgers = BTreeMap::new();
    let mut traces: BTreeMap<String, crate::params::LayerTrace> = BTreeMap::new();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let g = Graph::new(store);
        let mut s = Session::new(false, &mut rng);
        if trace {
            s = s.with_trace();
        }
        let xv = g.tape.constant(x)?;
        let logits = mlp.forward(&g, &mut s, xv)?;
        correct += count_correct(&g.tape.value(logits), &y);
        let loss = g.tape.cross_entropy(logits, &y)?;
        loss_sum += g.tape.value(loss).item() * chunk.len() as f64;
        merge_ledgers(&mut ledgers, &s.ledgers);
        for (k, t) in s.trace.take().unwrap_or_default() {
            let e = traces.entry(k).or_default();
            e.gates = t.gates;
            e.values.extend(t.values);
        }
    }
    let t = total(&ledgers);
    let report = EpochReport {
        epoch,
        split: split.into(),
        loss: loss_sum / data.len() as f64,
        ppl_or_acc: correct as f64 / data.len() as f64,
        sparsity: mlp.config().sparsity,
        comput_fraction: fraction_or_one(&t),
        gating_fallback_count: t.fallbacks,
    };
    Ok((report, traces))
}

/// Splits a token stream into `batch` contiguous streams, returned
/// time-major: element `t` holds the `t`-th token of every stream.
pub fn batchify(tokens: &[usize], batch: usize) -> Result<Vec<Vec<usize>>> {
    let len = tokens.len() / batch.max(1);
    if batch == 0 || len < 2 {
        return Err(Error::Parameter(format!(
            "{} tokens cannot fill {batch} streams of at least 2 tokens",
            tokens.len()
        )));
    }
    Ok((0..len)
        .map(|t| (0..batch).map(|b| tokens[b * len + t]).collect())
        .collect())
}

/// `(inputs, targets)` segment bounds over a time-major batch.
fn segments(steps: usize, bptt: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..steps - 1)
        .step_by(bptt)
        .map(move |s| (s, bptt.min(steps - 1 - s)))
}

/// One pass over the training stream with truncated BPTT and carried state.
pub fn train_lm_epoch(
    lm: &LstmLm,
    store: &mut ParamStore,
    optim: &mut Optimizer,
    data: &[Vec<usize>],
    bptt: usize,
    epoch: usize,
    rng: &mut SeededRng,
) -> Result<EpochReport> {
    let batch = data[0].len();
    let mut state = lm.initial_state(batch);
    let mut ledgers = BTreeMap::new();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (start, len) in segments(data.len(), bptt) {
        let inputs = &data[start..start + len];
        let targets = &data[start + 1..start + 1 + len];
        let mut grads = {
            let g = Graph::new(store);
            let mut s = Session::new(true, rng);
            let out = lm.segment(&g, &mut s, inputs, targets, &state)?;
            nll += g.tape.value(out.loss).item() * out.tokens as f64;
            tokens += out.tokens;
            state = out.state;
            merge_ledgers(&mut ledgers, &s.ledgers);
            g.backward(out.loss)?
        };
        lm.mask_gradients(&mut grads)?;
        optim.step(store, &mut grads)?;
        lm.apply_static_masks(store)?;
    }
    lm_report(lm, epoch, "train", nll, tokens, &ledgers)
}

fn lm_report(
    lm: &LstmLm,
    epoch: usize,
    split: &str,
    nll: f64,
    tokens: usize,
    ledgers: &BTreeMap<String, ComputeLedger>,
) -> Result<EpochReport> {
    let t = total(ledgers);
    Ok(EpochReport {
        epoch,
        split: split.into(),
        loss: nll / tokens as f64,
        ppl_or_acc: perplexity(nll, tokens)?,
        sparsity: if lm.config().modes.contains(&LayerMode::Dynamic) {
            lm.config().sparsity
        } else {
            0.0
        },
        comput_fraction: fraction_or_one(&t),
        gating_fallback_count: t.fallbacks,
    })
}

/// Evaluation over a time-major batch, state carried across segments.
pub fn eval_lm(
    lm: &LstmLm,
    store: &ParamStore,
    data: &[Vec<usize>],
    bptt: usize,
    epoch: usize,
    split: &str,
) -> Result<EpochReport> {
    Ok(eval_lm_traced(lm, store, data, bptt, epoch, split, false)?.0)
}

#[allow(clippy::type_complexity)]
pub fn eval_lm_traced(
    lm: &LstmLm,
    store: &ParamStore,
    data: &[Vec<usize>],
    bptt: usize,
    epoch: usize,
    split: &str,
    trace: bool,
) -> Result<(EpochReport, BTreeMap<String, crate::params::LayerTrace>)> {
    let mut rng = SeededRng::seed_from_u64(0);
    let mut state: LstmState = lm.initial_state(data[0].len());
    let mut ledgers = BTreeMap::new();
    let mut traces: BTreeMap<String, crate::params::LayerTrace> = BTreeMap::new();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (start, len) in segments(data.len(), bptt) {
        let g = Graph::new(store);
        let mut s = Session::new(false, &mut rng);
        if trace {
            s = s.with_trace();
        }
        let out = lm.segment(
            &g,
            &mut s,
            &data[start..start + len],
            &data[start + 1..start + 1 + len],
            &state,
        )?;
        nll += g.tape.value(out.loss).item() * out.tokens as f64;
        tokens += out.tokens;
        state = out.state;
        merge_ledgers(&mut ledgers, &s.ledgers);
        for (k, t) in s.trace.take().unwrap_or_default() {
            let e = traces.entry(k).or_default();
            e.gates = t.gates;
            e.values.extend(t.values);
        }
    }
    Ok((lm_report(lm, epoch, split, nll, tokens, &ledgers)?, traces))
}

/// Model, parameters and the RNG stream that continues after initialization.
pub struct Built<M> {
    pub model: M,
    pub store: ParamStore,
    pub rng: SeededRng,
}

pub fn mlp_config(cfg: &RunConfig, input_dim: usize) -> Result<MlpConfig> {
    let dense = match cfg.mode {
        RunMode::Dense => true,
        RunMode::Dynamic => false,
        other => {
            return Err(Error::Config(format!(
                "mode {other} is not available for the mnist task"
            )))
        }
    };
    Ok(MlpConfig {
        input_dim,
        width: cfg.width,
        hidden_layers: cfg.hidden_layers,
        block: cfg.block,
        sparsity: SparsitySchedule::from_config(cfg)?.at(1),
        num_classes: 10,
        key_size: (cfg.key_size > 0).then_some(cfg.key_size),
        constant_gates: false,
        dense,
        shortfall: cfg.shortfall,
    })
}

pub fn build_mlp(cfg: &RunConfig, input_dim: usize) -> Result<Built<Mlp>> {
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Mlp::new(mlp_config(cfg, input_dim)?, &mut store, &mut rng)?;
    Ok(Built { model, store, rng })
}

pub fn lm_config(cfg: &RunConfig, vocab_size: usize) -> Result<LstmLmConfig> {
    let (mode, hidden) = match cfg.mode {
        RunMode::Dense => (LayerMode::Dense, cfg.hidden),
        RunMode::Dynamic => (LayerMode::Dynamic, cfg.hidden),
        RunMode::StaticAgp => (LayerMode::Static, cfg.hidden),
        RunMode::SmallDense => (
            LayerMode::Dense,
            small_dense_config(cfg.hidden, 1.0 - cfg.sparsity)?,
        ),
    };
    Ok(LstmLmConfig {
        vocab_size,
        embed_dim: cfg.embed,
        hidden_dim: hidden,
        num_layers: cfg.layers,
        dropout: cfg.dropout,
        block: cfg.block,
        sparsity: SparsitySchedule::from_config(cfg)?.at(1),
        key_size: (cfg.key_size > 0).then_some(cfg.key_size),
        modes: vec![mode; cfg.layers],
        shared_gate: cfg.shared_gate,
        init_range: 0.05,
        shortfall: cfg.shortfall,
    })
}

pub fn build_lm(cfg: &RunConfig, vocab_size: usize) -> Result<Built<LstmLm>> {
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = LstmLm::new(lm_config(cfg, vocab_size)?, &mut store, &mut rng)?;
    Ok(Built { model, store, rng })
}

pub fn prune_schedule(cfg: &RunConfig) -> Result<PruneSchedule> {
    PruneSchedule::new(
        cfg.prune_initial,
        cfg.sparsity,
        cfg.prune_start,
        cfg.prune_end,
        cfg.prune_frequency,
    )
}

/// Re-derives pruning masks from current magnitudes at scheduled epochs.
fn update_static_masks(
    lm: &mut LstmLm,
    store: &mut ParamStore,
    sched: &PruneSchedule,
    epoch: usize,
) -> Result<()> {
    if lm.static_weights().is_empty() || !sched.updates_at(epoch) {
        return Ok(());
    }
    let target = agp_target_sparsity(epoch as f64, sched);
    let masks = lm
        .static_weights()
        .into_iter()
        .map(|id| Ok((id, magnitude_prune(store.get(id), target)?)))
        .collect::<Result<Vec<_>>>()?;
    lm.set_static_masks(store, masks)
}

/// Trains the classifier for `cfg.epochs`, reporting a train and a test line
/// per epoch through `emit`.
pub fn run_mnist(
    cfg: &RunConfig,
    train: &MnistData,
    test: &MnistData,
    emit: &mut dyn FnMut(&EpochReport) -> Result<()>,
) -> Result<Built<Mlp>> {
    let mut built = build_mlp(cfg, train.dim())?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let mut optim = Optimizer::new(OptimConfig::from_run(cfg))?;
    for epoch in 1..=cfg.epochs {
        built.model.set_sparsity(schedule.at(epoch))?;
        let r = train_mlp_epoch(
            &built.model,
            &mut built.store,
            &mut optim,
            train,
            cfg.batch_size,
            epoch,
            &mut built.rng,
        )?;
        emit(&r)?;
        emit(&eval_mlp(
            &built.model,
            &built.store,
            test,
            cfg.eval_batch_size,
            epoch,
            "test",
        )?)?;
    }
    Ok(built)
}

/// Trains the language model for `cfg.epochs`, reporting train and valid
/// lines per epoch through `emit`.
pub fn run_lm(
    cfg: &RunConfig,
    corpus: &Corpus,
    emit: &mut dyn FnMut(&EpochReport) -> Result<()>,
) -> Result<Built<LstmLm>> {
    let mut built = build_lm(cfg, corpus.vocab.len())?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let prune = prune_schedule(cfg)?;
    let mut optim = Optimizer::new(OptimConfig::from_run(cfg))?;
    let train = batchify(&corpus.train, cfg.batch_size)?;
    let valid = batchify(&corpus.valid, cfg.eval_batch_size)?;
    for epoch in 1..=cfg.epochs {
        if cfg.mode == RunMode::Dynamic {
            built.model.set_sparsity(schedule.at(epoch))?;
        }
        update_static_masks(&mut built.model, &mut built.store, &prune, epoch)?;
        let r = train_lm_epoch(
            &built.model,
            &mut built.store,
            &mut optim,
            &train,
            cfg.bptt,
            epoch,
            &mut built.rng,
        )?;
        emit(&r)?;
        emit(&eval_lm(
            &built.model,
            &built.store,
            &valid,
            cfg.bptt,
            epoch,
            "valid",
        )?)?;
    }
    Ok(built)
}

/// Sparseness level in force after `cfg.epochs` epochs (or at the first
/// epoch for an untrained model).
pub fn final_sparsity(cfg: &RunConfig) -> Result<f64> {
    Ok(SparsitySchedule::from_config(cfg)?.at(cfg.epochs.max(1)))
}

/// Train and test splits from `cfg.data_dir`, truncated to the configured
/// limits (0 keeps everything).
pub fn load_mnist_data(cfg: &RunConfig) -> Result<(MnistData, MnistData)> {
    let limit = |d: MnistData, n: usize| if n == 0 { d } else { d.truncated(n) };
    let train = crate::io::mnist::load_mnist_split(&cfg.data_dir, true)?;
    let test = crate::io::mnist::load_mnist_split(&cfg.data_dir, false)?;
    Ok((limit(train, cfg.train_limit), limit(test, cfg.test_limit)))
}
