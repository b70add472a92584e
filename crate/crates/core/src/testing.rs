//! Finite-difference gradient oracle shared by unit, integration and
//! acceptance tests.
//!
//! The oracle only evaluates forward passes; it never looks at the gradient
//! rules it is checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Graph, ParamStore};
use crate::sparse_linear::BlockGeometry;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for [`rel_err`], so that gradients that are zero up to
/// rounding do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose `±FD_STEP` perturbation changed a discrete support
    /// (such as a top-k selection) and were therefore not compared.
    pub skipped: usize,
}

struct Eval {
    value: f64,
    support: Vec<Vec<usize>>,
}

/// Central difference with respect to one coordinate, or `None` when either
/// perturbation leaves the smooth piece the base point lies on.
fn central_difference(
    base: &[Vec<usize>],
    mut eval: impl FnMut(f64) -> Result<Eval>,
) -> Result<Option<f64>> {
    let plus = eval(FD_STEP)?;
    let minus = eval(-FD_STEP)?;
    if plus.support != base || minus.support != base {
        return Ok(None);
    }
    Ok(Some((plus.value - minus.value) / (2.0 * FD_STEP)))
}

fn eval_inputs<F>(xs: &[Tensor], f: &F) -> Result<Eval>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = xs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let value = tape.value(out).item();
    Ok(Eval {
        value,
        support: tape.support(),
    })
}

/// Central differences of a scalar function `f` with respect to every entry
/// of every input tensor; `None` where the perturbation changes the support.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<Option<f64>>>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let base = eval_inputs(inputs, f)?.support;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            let d = central_difference(&base, |step| {
                work[i].data_mut()[j] = orig + step;
                let e = eval_inputs(&work, f);
                work[i].data_mut()[j] = orig;
                e
            })?;
            g.push(d);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Reverse-mode gradients of `f` with every input marked trainable.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

fn tally(pairs: impl Iterator<Item = (f64, Option<f64>)>) -> GradCheck {
    let mut out = GradCheck::default();
    for (a, n) in pairs {
        match n {
            Some(n) => {
                out.checked += 1;
                out.max_rel_err = out.max_rel_err.max(rel_err(a, n));
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// Compares reverse-mode and central-difference gradients of `f`.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f)?;
    Ok(tally(
        analytic
            .iter()
            .flatten()
            .copied()
            .zip(numeric.iter().flatten().copied()),
    ))
}

/// Largest [`rel_err`] over the support-preserving coordinates.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check(inputs, f)?.max_rel_err)
}

/// [`grad_check`] over every tensor of a parameter store, for models that
/// bind their parameters through a [`Graph`].
pub fn store_grad_check<F>(store: &ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<Eval> {
        let g = Graph::new(s);
        let loss = f(&g)?;
        let value = g.tape.value(loss).item();
        Ok(Eval {
            value,
            support: g.tape.support(),
        })
    };
    let base = eval(store)?.support;
    let analytic = {
        let g = Graph::new(store);
        let loss = f(&g)?;
        g.backward(loss)?
    };
    let mut work = store.clone();
    let mut pairs = Vec::new();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let orig = work.get(id).data()[j];
            let numeric = central_difference(&base, |step| {
                work.get_mut(id).data_mut()[j] = orig + step;
                let e = eval(&work);
                work.get_mut(id).data_mut()[j] = orig;
                e
            })?;
            pairs.push((analytic.get(id).map_or(0.0, |g| g.data()[j]), numeric));
        }
    }
    Ok(tally(pairs.into_iter()))
}

/// Largest [`rel_err`] of [`store_grad_check`].
pub fn check_store_gradients<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&Graph<'_>) -> Result<Var>,
{
    Ok(store_grad_check(store, f)?.max_rel_err)
}

/// Expands one gate per block into a full `m×n` elementwise mask, so that a
/// gated product can be checked against `(M ⊙ W)·h` computed densely.
pub fn expand_mask(gates: &[f64], g: &BlockGeometry) -> Tensor {
    let (bh, bw) = (g.block_height(), g.block_width());
    let mut m = vec![0.0; g.rows * g.cols];
    for r in 0..g.rows {
        for c in 0..g.cols {
            m[r * g.cols + c] = gates[(r / bh) * g.grid_cols + c / bw];
        }
    }
    Tensor::new(vec![g.rows, g.cols], m).expect("geometry-consistent size")
}

/// Naive `(M ⊙ W)·h` with `w` row-major `m×n`.
pub fn dense_masked_matvec(w: &Tensor, mask: &Tensor, h: &[f64]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|r| {
            (0..n)
                .map(|c| mask.data()[r * n + c] * w.data()[r * n + c] * h[c])
                .sum()
        })
        .collect()
}
