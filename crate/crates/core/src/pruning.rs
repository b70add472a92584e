//! Static baselines: gradual magnitude pruning with a cubic schedule, and the
//! compute-matched small dense model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub start_epoch: usize,
    pub end_epoch: usize,
    /// Epochs between mask updates inside the ramp.
    pub frequency: usize,
}

impl PruneSchedule {
    pub fn new(
        initial_sparsity: f64,
        final_sparsity: f64,
        start_epoch: usize,
        end_epoch: usize,
        frequency: usize,
    ) -> Result<Self> {
        if !(0.0 <= initial_sparsity && initial_sparsity <= final_sparsity && final_sparsity < 1.0)
        {
            return Err(Error::Parameter(format!(
                "prune sparsities must satisfy 0 <= {initial_sparsity} <= {final_sparsity} < 1"
            )));
        }
        if start_epoch >= end_epoch || frequency == 0 {
            return Err(Error::Parameter(format!(
                "prune epochs {start_epoch}..{end_epoch} every {frequency} is not a valid ramp"
            )));
        }
        Ok(Self {
            initial_sparsity,
            final_sparsity,
            start_epoch,
            end_epoch,
            frequency,
        })
    }

    /// Whether masks are recomputed at the start of `epoch`.
    pub fn updates_at(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch
            && epoch <= self.end_epoch
            && ((epoch - self.start_epoch) % self.frequency == 0 || epoch == self.end_epoch)
    }
}

/// `s(t) = s_f + (s_i − s_f)·(1 − clamp((t−t₀)/(t₁−t₀), 0, 1))³`.
pub fn agp_target_sparsity(epoch: f64, sched: &PruneSchedule) -> f64 {
    let span = (sched.end_epoch - sched.start_epoch) as f64;
    let p = ((epoch - sched.start_epoch as f64) / span).clamp(0.0, 1.0);
    sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * (1.0 - p).powi(3)
}

/// Per-weight keep mask congruent with a weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl StaticMask {
    pub fn all_true(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    /// Keeps exactly the nonzero entries of `w`, as after loading weights
    /// that were saved with their mask applied.
    pub fn nonzero(w: &Tensor) -> Self {
        Self {
            shape: w.shape().to_vec(),
            keep: w.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned() as f64 / self.keep.len() as f64
    }

    /// Zeroes masked-off entries in place.
    pub fn apply(&self, w: &mut Tensor) -> Result<()> {
        if w.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "StaticMask::apply",
                format!("{:?} vs mask {:?}", w.shape(), self.shape),
            ));
        }
        for (v, &k) in w.data_mut().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// The mask as a 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .keep
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("mask shape")
    }
}

/// Masks off the `⌊target·count⌋` smallest-magnitude entries; ties go to the
/// lower flat index.
pub fn magnitude_prune(w: &Tensor, target_sparsity: f64) -> Result<StaticMask> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Parameter(format!(
            "prune target {target_sparsity} not in [0,1)"
        )));
    }
    let n = w.len();
    let drop = (target_sparsity * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let d = w.data();
    order.sort_unstable_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    Ok(StaticMask {
        shape: w.shape().to_vec(),
        keep,
    })
}

/// Multiply-adds per time step of the two-layer LSTM with hidden size `h` and
/// input (embedding) size `embed`: `4h·embed + 4h² + 8h²`.
pub fn lstm_step_madds(h: usize, embed: usize) -> u64 {
    let (h, e) = (h as u64, embed as u64);
    4 * h * e + 12 * h * h
}

/// Hidden size of a dense LSTM whose recurrent-stack multiply-adds best
/// match `target_fraction` of the base model's. The embedding size stays at
/// `base_hidden`, as it does when only the hidden width is shrunk.
pub fn small_dense_config(base_hidden: usize, target_fraction: f64) -> Result<usize> {
    small_dense_config_by(base_hidden, target_fraction, |h| {
        lstm_step_madds(h, base_hidden)
    })
}

/// [`small_dense_config`] over an arbitrary monotone madd formula.
pub fn small_dense_config_by(
    base_hidden: usize,
    target_fraction: f64,
    madds: impl Fn(usize) -> u64,
) -> Result<usize> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) || base_hidden == 0 {
        return Err(Error::Parameter(format!(
            "target fraction {target_fraction} must be in (0,1] with a positive base size"
        )));
    }
    let target = target_fraction * madds(base_hidden) as f64;
    (1..=base_hidden)
        .min_by(|&a, &b| {
            let ea = (madds(a) as f64 - target).abs();
            let eb = (madds(b) as f64 - target).abs();
            ea.total_cmp(&eb).then(a.cmp(&b))
        })
        .ok_or_else(|| Error::Parameter("empty search range".into()))
}
