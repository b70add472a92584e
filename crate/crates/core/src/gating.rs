//! Input-conditioned block gates.
//!
//! The primary gate scores every block with a single-layer ReLU network over a
//! key slice of the layer input, keeps the `k` largest scores, and divides the
//! resulting sparse vector by its mean over *all* `r·c` positions, so the gate
//! values always average to exactly 1:
//!
//! ```text
//! G(h) = S_k(relu(Wg·h_key + bg)) / mean(S_k(relu(Wg·h_key + bg)))
//! ```
//!
//! The alternative gate sums `k` temperature softmaxes and rescales by
//! `1/(1−ς)`; it is dense at any finite temperature and only approaches a
//! `k`-hot mask as the temperature goes to zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial value of every gating-network bias. Slightly positive so that
/// ReLU scores start out mostly active.
pub const GATE_BIAS_INIT: f64 = 0.1;

/// Grid sizes above this only get a warning from [`softmax_sum_gate`]; the
/// summed-softmax gate costs `k` full scoring networks.
pub const SOFTMAX_GATE_SOFT_LIMIT: usize = 256;

/// Number of open gates for sparseness `ς` over `gates` positions:
/// `round((1−ς)·gates)`, rejected when it would be zero.
pub fn open_count(sparsity: f64, gates: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Parameter(format!(
            "sparsity {sparsity} not in [0,1)"
        )));
    }
    let k = ((1.0 - sparsity) * gates as f64).round() as usize;
    if k == 0 || k > gates {
        return Err(Error::Parameter(format!(
            "sparsity {sparsity} over {gates} gates leaves k = {k}"
        )));
    }
    Ok(k)
}

/// Treatment of a row with fewer than `k` positive scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortfall {
    /// Use the all-ones mask, so every other row has exactly `k` open gates.
    #[default]
    Dense,
    /// Open only the positive scores; all-ones only when every score is zero.
    Keep,
}

impl std::str::FromStr for Shortfall {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "keep" => Ok(Self::Keep),
            other => Err(Error::Config(format!("unknown shortfall {other}"))),
        }
    }
}

impl std::fmt::Display for Shortfall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Keep => "keep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsenessConfig {
    sparsity: f64,
    grid_rows: usize,
    grid_cols: usize,
    key_size: usize,
    open: usize,
    shortfall: Shortfall,
}

impl SparsenessConfig {
    pub fn new(sparsity: f64, grid_rows: usize, grid_cols: usize, key_size: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || key_size == 0 {
            return Err(Error::Parameter(format!(
                "grid {grid_rows}x{grid_cols} and key size {key_size} must be positive"
            )));
        }
        let open = open_count(sparsity, grid_rows * grid_cols)?;
        Ok(Self {
            sparsity,
            grid_rows,
            grid_cols,
            key_size,
            open,
            shortfall: Shortfall::Dense,
        })
    }

    pub fn with_shortfall(mut self, shortfall: Shortfall) -> Self {
        self.shortfall = shortfall;
        self
    }

    pub fn shortfall(&self) -> Shortfall {
        self.shortfall
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn gate_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn key_size(&self) -> usize {
        self.key_size
    }

    /// `k`, fixed for the lifetime of this configuration.
    pub fn open_count(&self) -> usize {
        self.open
    }

    pub fn with_sparsity(&self, sparsity: f64) -> Result<Self> {
        Ok(
            Self::new(sparsity, self.grid_rows, self.grid_cols, self.key_size)?
                .with_shortfall(self.shortfall),
        )
    }
}

/// Single-layer scorer `relu(W·h_key + b)` with one output per block.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingNetwork {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GatingNetwork {
    /// Weights uniform in `±1/√key_size`, biases at [`GATE_BIAS_INIT`].
    pub fn new<R: Rng + ?Sized>(gates: usize, key_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (key_size as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[gates, key_size], -bound, bound, rng),
            bias: Tensor::full(&[gates], GATE_BIAS_INIT),
        }
    }

    /// Zero weights and a constant bias: every block gets the same score for
    /// every input, which makes the gate all-ones at `ς = 0`.
    pub fn constant(gates: usize, key_size: usize, bias: f64) -> Self {
        Self {
            weight: Tensor::zeros(&[gates, key_size]),
            bias: Tensor::full(&[gates], bias),
        }
    }

    pub fn gates(&self) -> usize {
        self.bias.len()
    }

    pub fn key_size(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Post-ReLU scores for one key vector.
    pub fn scores(&self, h_key: &[f64]) -> Result<Vec<f64>> {
        if h_key.len() != self.key_size() {
            return Err(Error::shape(
                "GatingNetwork::scores",
                format!(
                    "key of length {} for key size {}",
                    h_key.len(),
                    self.key_size()
                ),
            ));
        }
        let k = self.key_size();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let row = &self.weight.data()[i * k..(i + 1) * k];
                (crate::kernels::dot(row, h_key) + b).max(0.0)
            })
            .collect())
    }

    /// Top-k gate for one input, outside any tape.
    pub fn gate(&self, h_key: &[f64], cfg: &SparsenessConfig) -> Result<GateMask> {
        if self.gates() != cfg.gate_count() {
            return Err(Error::shape(
                "GatingNetwork::gate",
                format!("{} outputs for {} gates", self.gates(), cfg.gate_count()),
            ));
        }
        let scores = self.scores(h_key)?;
        Ok(GateMask::from_scores_with(
            &scores,
            cfg.open_count(),
            cfg.shortfall(),
        ))
    }
}

/// Records `relu(x_key·Wᵀ + b)` on the tape.
pub fn gate_scores(tape: &Tape, key: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = tape.linear(key, weight)?;
    let z = tape.add_bias(z, bias)?;
    tape.relu(z)
}

/// Per-input gate coefficients over the `r·c` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    pub values: Vec<f64>,
    pub open_count: usize,
    /// True when the dense all-ones mask was used instead of a top-k
    /// selection.
    pub fallback: bool,
}

impl GateMask {
    /// Applies top-k selection and mean normalization to post-ReLU scores.
    pub fn from_scores(scores: &[f64], k: usize) -> Self {
        Self::from_scores_with(scores, k, Shortfall::Dense)
    }

    pub fn from_scores_with(scores: &[f64], k: usize, shortfall: Shortfall) -> Self {
        let mut values = vec![0.0; scores.len()];
        let row = topk_normalize(scores, k, &mut values, &mut Vec::new(), shortfall);
        let open_count = values.iter().filter(|&&v| v > 0.0).count();
        GateMask {
            values,
            open_count,
            fallback: row == RowKind::Fallback,
        }
    }

    pub fn all_open(gates: usize) -> Self {
        GateMask {
            values: vec![1.0; gates],
            open_count: gates,
            fallback: false,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_score);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_score);
    idx
}

/// Writes the normalized top-k mask for one row into `out` and the selected
/// indices into `selected`. Returns true when the row falls back to all-ones
/// because fewer than `k` scores are strictly positive (this includes the
/// all-zero case, where the mean would be zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RowKind {
    Full,
    Short,
    Fallback,
}

fn topk_normalize(
    scores: &[f64],
    k: usize,
    out: &mut [f64],
    selected: &mut Vec<usize>,
    shortfall: Shortfall,
) -> RowKind {
    let positive = scores.iter().filter(|&&s| s > 0.0).count();
    selected.clear();
    if positive == 0 || (positive < k && shortfall == Shortfall::Dense) {
        out.fill(1.0);
        return RowKind::Fallback;
    }
    out.fill(0.0);
    selected.extend(top_k_indices(scores, k.min(positive)));
    let total: f64 = selected.iter().map(|&i| scores[i]).sum();
    let n = scores.len() as f64;
    for &i in selected.iter() {
        out[i] = scores[i] * n / total;
    }
    if positive < k {
        RowKind::Short
    } else {
        RowKind::Full
    }
}

struct TopKGateOp {
    gates: usize,
    /// Per row: selected indices and their score sum; `None` for fallback rows.
    rows: Vec<Option<(Vec<usize>, f64)>>,
}

impl CustomOp for TopKGateOp {
    fn name(&self) -> &'static str {
        "topk_gate"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        if !ctx.needs_grad[0] {
            return Ok(vec![None]);
        }
        let scores = ctx.inputs[0];
        let n = self.gates as f64;
        let mut d = vec![0.0; scores.len()];
        for (r, row) in self.rows.iter().enumerate() {
            let Some((sel, total)) = row else { continue };
            let base = r * self.gates;
            let g = &ctx.grad.data()[base..base + self.gates];
            let s = &scores.data()[base..base + self.gates];
            // mask_j = n·s_j / S over the selected set, S = Σ_sel s.
            let weighted: f64 = sel.iter().map(|&j| g[j] * s[j]).sum();
            for &l in sel {
                d[base + l] = n / total * g[l] - n / (total * total) * weighted;
            }
        }
        Ok(vec![Some(Tensor::new(scores.shape().to_vec(), d)?)])
    }

    fn support(&self) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for row in &self.rows {
            match row {
                Some((sel, _)) => {
                    let mut sel = sel.clone();
                    sel.sort_unstable();
                    out.extend(sel);
                }
                None => out.push(usize::MAX),
            }
            out.push(usize::MAX - 1);
        }
        Some(out)
    }
}

/// Output of [`topk_gate`].
#[derive(Clone, Copy, Debug)]
pub struct TopKGate {
    pub mask: Var,
    pub fallback_rows: usize,
    /// Rows that opened fewer than `k` gates under [`Shortfall::Keep`].
    pub short_rows: usize,
}

/// Records top-k selection plus mean normalization of post-ReLU `scores`
/// (`[gates]` or `[B×gates]`). Gradients reach the selected scores both
/// directly and through the normalizer; unselected scores get zero.
pub fn topk_gate(tape: &Tape, scores: Var, k: usize) -> Result<TopKGate> {
    topk_gate_with(tape, scores, k, Shortfall::Dense)
}

/// [`topk_gate`] with an explicit policy for rows short of `k` positive
/// scores.
pub fn topk_gate_with(
    tape: &Tape,
    scores: Var,
    k: usize,
    shortfall: Shortfall,
) -> Result<TopKGate> {
    let (value, rows, fallback_rows, short_rows, gates) = {
        let st = tape.value(scores);
        let (batch, gates) = st.as_matrix_dims();
        if st.ndim() == 0 || st.ndim() > 2 || k == 0 || k > gates {
            return Err(Error::shape(
                "topk_gate",
                format!("k = {k} for scores {:?}", st.shape()),
            ));
        }
        if let Some(neg) = st.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Parameter(format!(
                "topk_gate expects post-ReLU scores, found {neg}"
            )));
        }
        let mut out = vec![0.0; st.len()];
        let mut rows = Vec::with_capacity(batch);
        let (mut fallback_rows, mut short_rows) = (0, 0);
        let mut selected = Vec::new();
        for r in 0..batch {
            let s = &st.data()[r * gates..(r + 1) * gates];
            let o = &mut out[r * gates..(r + 1) * gates];
            match topk_normalize(s, k, o, &mut selected, shortfall) {
                RowKind::Fallback => {
                    fallback_rows += 1;
                    rows.push(None);
                    continue;
                }
                RowKind::Short => short_rows += 1,
                RowKind::Full => {}
            }
            let total = selected.iter().map(|&i| s[i]).sum();
            rows.push(Some((selected.clone(), total)));
        }
        (
            Tensor::new(st.shape().to_vec(), out)?,
            rows,
            fallback_rows,
            short_rows,
            gates,
        )
    };
    let mask = tape.custom(&[scores], value, Box::new(TopKGateOp { gates, rows }))?;
    Ok(TopKGate {
        mask,
        fallback_rows,
        short_rows,
    })
}

/// Temperature annealing for the summed-softmax gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub floor: f64,
    /// Multiplicative decay applied once per epoch.
    pub decay: f64,
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxGateConfig {
    pub k: usize,
    pub temperature: f64,
    pub schedule: TemperatureSchedule,
}

impl SoftmaxGateConfig {
    pub fn new(k: usize, schedule: TemperatureSchedule) -> Result<Self> {
        if k == 0
            || [schedule.initial, schedule.floor, schedule.decay]
                .iter()
                .any(|v| v.is_nan() || *v <= 0.0)
        {
            return Err(Error::Parameter(format!(
                "softmax gate needs k > 0 and positive temperatures, got k = {k}, {schedule:?}"
            )));
        }
        Ok(Self {
            k,
            temperature: schedule.initial,
            schedule,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.temperature = self.schedule.at(epoch);
    }
}

/// Records `G = 1/(1−ς) · Σᵢ softmax((Wᵢ·h_key + bᵢ)/τ)` for the `k` scoring
/// networks in `nets` (pairs of weight and bias vars). The scorers are affine:
/// a ReLU would tie every non-positive score at zero and keep the softmaxes
/// from sharpening.
pub fn softmax_sum_gate(
    tape: &Tape,
    key: Var,
    nets: &[(Var, Var)],
    sparsity: f64,
    temperature: f64,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Parameter(format!(
            "sparsity {sparsity} not in [0,1)"
        )));
    }
    let Some(&(w0, _)) = nets.first() else {
        return Err(Error::Parameter(
            "softmax_sum_gate needs at least one network".into(),
        ));
    };
    let gates = tape.shape(w0)[0];
    let expected = (1.0 - sparsity) * gates as f64;
    if (expected - nets.len() as f64).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "{} softmaxes but (1-ς)·r·c = {expected}",
            nets.len()
        )));
    }
    if gates > SOFTMAX_GATE_SOFT_LIMIT {
        log::warn!("summed-softmax gate over {gates} blocks; this gate is meant for small grids");
    }
    let mut total: Option<Var> = None;
    for &(w, b) in nets {
        let z = tape.linear(key, w)?;
        let z = tape.add_bias(z, b)?;
        let p = tape.softmax(z, temperature)?;
        total = Some(match total {
            None => p,
            Some(acc) => tape.add(acc, p)?,
        });
    }
    tape.scale(total.expect("non-empty"), 1.0 / (1.0 - sparsity))
}

/// `true` where the gate value exceeds `eps`.
pub fn hard_threshold(values: &[f64], eps: f64) -> Vec<bool> {
    values.iter().map(|&v| v > eps).collect()
}
