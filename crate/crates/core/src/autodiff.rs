//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation is evaluated eagerly and recorded on a [`Tape`]. A single
//! call to [`Tape::backward`] then walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created
//! with `requires_grad`.
//!
//! Shapes never broadcast implicitly. The only mixed-shape operations are
//! the explicit ones: [`Tape::add_bias`] (row vector onto each row of a
//! matrix), [`Tape::scale`] / [`Tape::div_scalar`] (scalar constants), and
//! the reductions.
//!
//! Operations that live in other modules (top-k gating, gated block products)
//! plug in through [`CustomOp`].

use std::cell::{Cell, Ref, RefCell};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule for an operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs_grad` is false.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;

    /// Discrete choices made in the forward pass (for example a selected
    /// index set). Two evaluations with different supports lie on different
    /// smooth pieces of the function.
    fn support(&self) -> Option<Vec<usize>> {
        None
    }
}

pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs_grad: Vec<bool>,
}

enum Op {
    Leaf,
    MatVec {
        w: usize,
        h: usize,
    },
    Linear {
        x: usize,
        w: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    Softmax {
        x: usize,
        temperature: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: usize,
        scaled_keep: Vec<f64>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatVec { w, h } => vec![*w, *h],
            Op::Linear { x, w } => vec![*x, *w],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Dropout { x, .. } => vec![*x],
            Op::SliceCols { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it.
/// A tape supports exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        check_finite(&value, op_name)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    pub fn param(&self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// `y = W·h` for `W: [m×n]`, `h: [n]`.
    pub fn matvec(&self, w: Var, h: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (wt, ht) = (&nodes[w.0].value, &nodes[h.0].value);
            if wt.ndim() != 2 || ht.ndim() != 1 || wt.shape()[1] != ht.shape()[0] {
                return Err(Error::shape(
                    "matvec",
                    format!("W {:?} · h {:?}", wt.shape(), ht.shape()),
                ));
            }
            let (m, n) = (wt.shape()[0], wt.shape()[1]);
            let y = (0..m)
                .map(|i| kernels::dot(&wt.data()[i * n..(i + 1) * n], ht.data()))
                .collect();
            Tensor::from_vec(y)
        };
        self.push(value, Op::MatVec { w: w.0, h: h.0 }, "matvec")
    }

    /// Batched dense product `y = x·Wᵀ` for `x: [B×n]` (or `[n]`) and `W: [m×n]`.
    pub fn linear(&self, x: Var, w: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let (b, n) = xt.as_matrix_dims();
            if wt.ndim() != 2 || xt.ndim() == 0 || xt.ndim() > 2 || wt.shape()[1] != n {
                return Err(Error::shape(
                    "linear",
                    format!("x {:?} · W {:?}ᵀ", xt.shape(), wt.shape()),
                ));
            }
            let m = wt.shape()[0];
            let mut y = vec![0.0; b * m];
            kernels::matmul_nt(xt.data(), wt.data(), &mut y, b, n, m, 0.0);
            let shape = if xt.ndim() == 1 { vec![m] } else { vec![b, m] };
            Tensor::new(shape, y)?
        };
        self.push(value, Op::Linear { x: x.0, w: w.0 }, "linear")
    }

    /// Adds the vector `b: [m]` to every row of `x: [B×m]` (or to `x: [m]`).
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, bt) = (&nodes[x.0].value, &nodes[b.0].value);
            let (_, m) = xt.as_matrix_dims();
            if bt.ndim() != 1 || bt.len() != m || xt.ndim() == 0 {
                return Err(Error::shape(
                    "add_bias",
                    format!("x {:?} + b {:?}", xt.shape(), bt.shape()),
                ));
            }
            let mut out = xt.clone().with_requires_grad(false);
            for row in out.data_mut().chunks_mut(m) {
                for (o, bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
            out
        };
        self.push(value, Op::AddBias { x: x.0, b: b.0 }, "add_bias")
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, at, bt)?;
            let data = at
                .data()
                .iter()
                .zip(bt.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(at.shape().to_vec(), data)?
        };
        self.push(value, op, name)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op, name)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * s, Op::Scale(a.0, s))
    }

    pub fn div_scalar(&self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Parameter(format!("div_scalar by {s}")));
        }
        self.unary(a, "div_scalar", |x| x / s, Op::Scale(a.0, 1.0 / s))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a.0))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(v), Op::Sum(a.0), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let v = self.nodes.borrow()[a.0].value.mean();
        self.push(Tensor::scalar(v), Op::Mean(a.0), "mean")
    }

    /// Softmax of `x / temperature` along the last dimension (each row of a
    /// matrix independently), computed with max-subtraction.
    pub fn softmax(&self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 || temperature.is_infinite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            if xt.ndim() == 0 || xt.ndim() > 2 {
                return Err(Error::shape("softmax", format!("{:?}", xt.shape())));
            }
            let (_, n) = xt.as_matrix_dims();
            let mut out = xt.clone().with_requires_grad(false);
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row, temperature);
            }
            out
        };
        self.push(
            value,
            Op::Softmax {
                x: x.0,
                temperature,
            },
            "softmax",
        )
    }

    /// Mean over rows of `−log softmax(logits_row)[target_row]`.
    ///
    /// `logits` is `[V]` with one target, or `[B×V]` with `B` targets.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lt = &nodes[logits.0].value;
            if lt.ndim() == 0 || lt.ndim() > 2 {
                return Err(Error::shape("cross_entropy", format!("{:?}", lt.shape())));
            }
            let (rows, v) = lt.as_matrix_dims();
            if targets.len() != rows {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{rows} rows vs {} targets", targets.len()),
                ));
            }
            let mut probs = lt.data().to_vec();
            let mut loss = 0.0;
            for (row, &t) in probs.chunks_mut(v).zip(targets) {
                if t >= v {
                    return Err(Error::Index {
                        what: "cross_entropy target",
                        index: t,
                        size: v,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
                for z in row.iter_mut() {
                    *z = (*z - lse).exp();
                }
            }
            (loss / rows as f64, probs)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`.
    /// Identity at inference or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} not in [0,1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let (value, scaled_keep) = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let mask: Vec<f64> = (0..xt.len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect();
            let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::new(xt.shape().to_vec(), data)?, mask)
        };
        self.push(
            value,
            Op::Dropout {
                x: x.0,
                scaled_keep,
            },
            "dropout",
        )
    }

    /// Columns `start..start+len` of `x` (`[n]` or `[B×n]`).
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let (rows, n) = xt.as_matrix_dims();
            if xt.ndim() == 0 || xt.ndim() > 2 || start + len > n {
                return Err(Error::shape(
                    "slice_cols",
                    format!("{start}..{} of {:?}", start + len, xt.shape()),
                ));
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&xt.data()[r * n + start..r * n + start + len]);
            }
            let shape = if xt.ndim() == 1 {
                vec![len]
            } else {
                vec![rows, len]
            };
            Tensor::new(shape, data)?
        };
        self.push(value, Op::SliceCols { x: x.0, start }, "slice_cols")
    }

    /// Gathers rows of `table: [V×d]` into a `[ids.len()×d]` matrix.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            if tt.ndim() != 2 {
                return Err(Error::shape("embedding", format!("{:?}", tt.shape())));
            }
            let (v, d) = (tt.shape()[0], tt.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Index {
                        what: "embedding id",
                        index: id,
                        size: v,
                    });
                }
                data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Concatenated [`CustomOp::support`] of every recorded custom op.
    pub fn support(&self) -> Vec<Vec<usize>> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Custom { op, .. } => op.support(),
                _ => None,
            })
            .collect()
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let n = self.len();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= n) {
            return Err(Error::Tape(format!("{name}: unknown input {}", bad.0)));
        }
        self.push(
            value.with_requires_grad(false),
            Op::Custom {
                inputs: inputs.iter().map(|v| v.0).collect(),
                op,
            },
            name,
        )
    }

    /// Backpropagates from the scalar `loss`. Gradients accumulate additively
    /// across fan-out. May be called once per tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are dropped once propagated; leaves keep theirs.
            let Some(g) = grads[idx].take() else { continue };
            let contributions = backward_node(&nodes, node, &g)?;
            for (input, grad) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = ((*z - max) / temperature).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let like = |i: usize, data: Vec<f64>| Tensor::new(nodes[i].value.shape().to_vec(), data);
    let mut out = Vec::with_capacity(2);

    match &node.op {
        Op::Leaf => {}
        Op::MatVec { w, h } => {
            let (wt, ht) = (val(*w), val(*h));
            let (m, n) = (wt.shape()[0], wt.shape()[1]);
            if needs(*w) {
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for (d, hv) in dw[i * n..(i + 1) * n].iter_mut().zip(ht.data()) {
                        *d = gi * hv;
                    }
                }
                out.push((*w, like(*w, dw)?));
            }
            if needs(*h) {
                let mut dh = vec![0.0; n];
                kernels::matmul_nn(g.data(), wt.data(), &mut dh, 1, m, n, 0.0);
                out.push((*h, like(*h, dh)?));
            }
        }
        Op::Linear { x, w } => {
            let (xt, wt) = (val(*x), val(*w));
            let (b, n) = xt.as_matrix_dims();
            let m = wt.shape()[0];
            if needs(*w) {
                let mut dw = vec![0.0; m * n];
                kernels::matmul_tn(g.data(), xt.data(), &mut dw, m, b, n, 0.0);
                out.push((*w, like(*w, dw)?));
            }
            if needs(*x) {
                let mut dx = vec![0.0; b * n];
                kernels::matmul_nn(g.data(), wt.data(), &mut dx, b, m, n, 0.0);
                out.push((*x, like(*x, dx)?));
            }
        }
        Op::AddBias { x, b } => {
            if needs(*x) {
                out.push((*x, g.clone()));
            }
            if needs(*b) {
                let m = val(*b).len();
                let mut db = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                out.push((*b, like(*b, db)?));
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                out.push((*a, g.clone()));
            }
            if needs(*b) {
                out.push((*b, g.map(|v| -v)));
            }
        }
        Op::Mul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            if needs(*a) {
                let d = g.data().iter().zip(bt.data()).map(|(g, y)| g * y).collect();
                out.push((*a, like(*a, d)?));
            }
            if needs(*b) {
                let d = g.data().iter().zip(at.data()).map(|(g, x)| g * x).collect();
                out.push((*b, like(*b, d)?));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.map(|v| v * s))),
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            out.push((*a, like(*a, d)?));
        }
        Op::Sigmoid(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            out.push((*a, like(*a, d)?));
        }
        Op::Tanh(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            out.push((*a, like(*a, d)?));
        }
        Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.item()))),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            out.push((*a, Tensor::full(val(*a).shape(), g.item() / n)));
        }
        Op::Softmax { x, temperature } => {
            let (_, n) = node.value.as_matrix_dims();
            let mut d = vec![0.0; node.value.len()];
            for ((drow, yrow), grow) in d
                .chunks_mut(n)
                .zip(node.value.data().chunks(n))
                .zip(g.data().chunks(n))
            {
                let inner = kernels::dot(grow, yrow);
                for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dv = y * (gv - inner) / temperature;
                }
            }
            out.push((*x, like(*x, d)?));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let (rows, v) = val(*logits).as_matrix_dims();
            let scale = g.item() / rows as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * v + t] -= scale;
            }
            out.push((*logits, like(*logits, d)?));
        }
        Op::Dropout { x, scaled_keep } => {
            let d = g
                .data()
                .iter()
                .zip(scaled_keep)
                .map(|(g, m)| g * m)
                .collect();
            out.push((*x, like(*x, d)?));
        }
        Op::SliceCols { x, start } => {
            let (rows, n) = val(*x).as_matrix_dims();
            let (_, len) = g.as_matrix_dims();
            let mut d = vec![0.0; rows * n];
            for r in 0..rows {
                d[r * n + start..r * n + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            out.push((*x, like(*x, d)?));
        }
        Op::Embedding { table, ids } => {
            let d_model = val(*table).shape()[1];
            let mut d = vec![0.0; val(*table).len()];
            for (r, &id) in ids.iter().enumerate() {
                let src = &g.data()[r * d_model..(r + 1) * d_model];
                for (dv, gv) in d[id * d_model..(id + 1) * d_model].iter_mut().zip(src) {
                    *dv += gv;
                }
            }
            out.push((*table, like(*table, d)?));
        }
        Op::Custom { inputs, op } => {
            let ctx = BackwardCtx {
                inputs: inputs.iter().map(|&i| val(i)).collect(),
                output: &node.value,
                grad: g,
                needs_grad: inputs.iter().map(|&i| needs(i)).collect(),
            };
            let grads = op.backward(&ctx)?;
            if grads.len() != inputs.len() {
                return Err(Error::Tape(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (&i, grad) in inputs.iter().zip(grads) {
                if let Some(grad) = grad {
                    if grad.len() != val(i).len() {
                        return Err(Error::shape(op.name(), "gradient size mismatch"));
                    }
                    out.push((i, grad));
                }
            }
        }
    }
    Ok(out)
}
