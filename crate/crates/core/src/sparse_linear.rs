//! Block-partitioned linear layers with per-input gated block skipping.
//!
//! A weight matrix `W: [m×n]` is cut into an `r×c` grid of dense blocks and
//! stored block-contiguously. The gated product
//!
//! ```text
//! y_i = Σ_j G_ij · W_ij · h_j
//! ```
//!
//! visits only blocks whose gate is non-zero; closed blocks are never read in
//! forward or backward. Every call is accounted in a [`ComputeLedger`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::gating::{self, GateMask, GatingNetwork, Shortfall, SparsenessConfig};
use crate::kernels;
use crate::params::{Graph, Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub rows: usize,
    pub cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl BlockGeometry {
    pub fn new(rows: usize, cols: usize, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if grid_rows == 0
            || grid_cols == 0
            || rows % grid_rows != 0
            || cols % grid_cols != 0
            || rows == 0
            || cols == 0
        {
            return Err(Error::Parameter(format!(
                "{rows}x{cols} matrix cannot be split into a {grid_rows}x{grid_cols} grid"
            )));
        }
        Ok(Self {
            rows,
            cols,
            grid_rows,
            grid_cols,
        })
    }

    /// Grid with square blocks of edge `block`.
    pub fn with_block(rows: usize, cols: usize, block: usize) -> Result<Self> {
        if block == 0 || rows % block != 0 || cols % block != 0 {
            return Err(Error::Parameter(format!(
                "{rows}x{cols} matrix is not divisible into {block}x{block} blocks"
            )));
        }
        Self::new(rows, cols, rows / block, cols / block)
    }

    pub fn block_height(&self) -> usize {
        self.rows / self.grid_rows
    }

    pub fn block_width(&self) -> usize {
        self.cols / self.grid_cols
    }

    pub fn gates(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn block_len(&self) -> usize {
        self.block_height() * self.block_width()
    }

    pub fn dense_madds(&self) -> u64 {
        (self.rows * self.cols) as u64
    }

    /// Shape of the block-contiguous storage tensor.
    pub fn storage_shape(&self) -> [usize; 3] {
        [self.gates(), self.block_height(), self.block_width()]
    }
}

/// Weight matrix stored as `r·c` contiguous dense blocks, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    geometry: BlockGeometry,
    blocks: Tensor,
}

impl BlockMatrix {
    pub fn zeros(geometry: BlockGeometry) -> Self {
        Self {
            geometry,
            blocks: Tensor::zeros(&geometry.storage_shape()),
        }
    }

    pub fn from_blocks(geometry: BlockGeometry, blocks: Tensor) -> Result<Self> {
        if blocks.shape() != geometry.storage_shape() {
            return Err(Error::shape(
                "BlockMatrix::from_blocks",
                format!("{:?} for geometry {:?}", blocks.shape(), geometry),
            ));
        }
        Ok(Self { geometry, blocks })
    }

    pub fn from_dense(dense: &Tensor, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if dense.ndim() != 2 {
            return Err(Error::shape(
                "BlockMatrix::from_dense",
                format!("{:?}", dense.shape()),
            ));
        }
        let g = BlockGeometry::new(dense.shape()[0], dense.shape()[1], grid_rows, grid_cols)?;
        let (bh, bw) = (g.block_height(), g.block_width());
        let mut data = Vec::with_capacity(dense.len());
        for i in 0..g.grid_rows {
            for j in 0..g.grid_cols {
                for p in 0..bh {
                    let start = (i * bh + p) * g.cols + j * bw;
                    data.extend_from_slice(&dense.data()[start..start + bw]);
                }
            }
        }
        Self::from_blocks(g, Tensor::new(g.storage_shape().to_vec(), data)?)
    }

    /// The logical `m×n` matrix.
    pub fn assemble(&self) -> Tensor {
        blocks_to_dense(&self.geometry, self.blocks.data())
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.geometry
    }

    pub fn block(&self, i: usize, j: usize) -> &[f64] {
        let len = self.geometry.block_len();
        let g = i * self.geometry.grid_cols + j;
        &self.blocks.data()[g * len..(g + 1) * len]
    }

    pub fn storage(&self) -> &Tensor {
        &self.blocks
    }

    pub fn into_storage(self) -> Tensor {
        self.blocks
    }
}

/// Reassembles block-contiguous storage into a row-major `m×n` matrix.
pub fn blocks_to_dense(g: &BlockGeometry, blocks: &[f64]) -> Tensor {
    let (bh, bw) = (g.block_height(), g.block_width());
    let mut out = vec![0.0; g.rows * g.cols];
    for i in 0..g.grid_rows {
        for j in 0..g.grid_cols {
            let b = &blocks[(i * g.grid_cols + j) * bh * bw..][..bh * bw];
            for p in 0..bh {
                let dst = (i * bh + p) * g.cols + j * bw;
                out[dst..dst + bw].copy_from_slice(&b[p * bw..(p + 1) * bw]);
            }
        }
    }
    Tensor::new(vec![g.rows, g.cols], out).expect("geometry-consistent size")
}

/// Per-block read counters, for verifying that closed blocks are skipped.
#[derive(Debug)]
pub struct BlockAccess {
    forward: Vec<AtomicU64>,
    backward: Vec<AtomicU64>,
}

impl BlockAccess {
    pub fn new(gates: usize) -> Self {
        Self {
            forward: (0..gates).map(|_| AtomicU64::new(0)).collect(),
            backward: (0..gates).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// Number of (input row, block) visits in forward passes.
    pub fn forward_reads(&self) -> Vec<u64> {
        self.forward
            .iter()
            .map(|a| a.load(Ordering::Relaxed))
            .collect()
    }

    pub fn backward_reads(&self) -> Vec<u64> {
        self.backward
            .iter()
            .map(|a| a.load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset(&self) {
        for a in self.forward.iter().chain(&self.backward) {
            a.store(0, Ordering::Relaxed);
        }
    }
}

/// Multiply-add accounting for gated products.
///
/// `actual_madds = open_blocks · block_height · block_width + gating_madds`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    /// `m·n` per input row.
    pub dense_madds: u64,
    pub actual_madds: u64,
    /// `key_size·r·c` per gate evaluation.
    pub gating_madds: u64,
    /// Top-k scan and normalization work, excluded from the fractions.
    pub aux_ops: u64,
    pub open_blocks: u64,
    pub block_len: u64,
    pub rows: u64,
    pub fallbacks: u64,
    /// Rows that opened fewer than `k` gates.
    pub short_rows: u64,
}

impl ComputeLedger {
    pub fn merged(&self, other: &ComputeLedger) -> ComputeLedger {
        ComputeLedger {
            dense_madds: self.dense_madds + other.dense_madds,
            actual_madds: self.actual_madds + other.actual_madds,
            gating_madds: self.gating_madds + other.gating_madds,
            aux_ops: self.aux_ops + other.aux_ops,
            open_blocks: self.open_blocks + other.open_blocks,
            // only meaningful for a single layer
            block_len: if self.block_len == other.block_len {
                self.block_len
            } else {
                0
            },
            rows: self.rows + other.rows,
            fallbacks: self.fallbacks + other.fallbacks,
            short_rows: self.short_rows + other.short_rows,
        }
    }

    pub fn record_product(&mut self, geometry: &BlockGeometry, rows: u64, open_blocks: u64) {
        let block_len = geometry.block_len() as u64;
        self.dense_madds += geometry.dense_madds() * rows;
        self.actual_madds += open_blocks * block_len;
        self.open_blocks += open_blocks;
        self.block_len = block_len;
        self.rows += rows;
    }

    pub fn record_gating(
        &mut self,
        key_size: usize,
        gates: usize,
        k: usize,
        rows: u64,
        fallbacks: u64,
    ) {
        let madds = (key_size * gates) as u64 * rows;
        self.gating_madds += madds;
        self.actual_madds += madds;
        self.aux_ops += (gates + k) as u64 * rows;
        self.fallbacks += fallbacks;
    }

    /// `actual_madds / dense_madds`, gating included.
    pub fn fraction(&self) -> f64 {
        comput_fraction(self)
    }

    /// Fraction spent in the block products alone.
    pub fn matvec_fraction(&self) -> f64 {
        (self.actual_madds - self.gating_madds) as f64 / self.dense_madds as f64
    }

    pub fn gating_fraction(&self) -> f64 {
        self.gating_madds as f64 / self.dense_madds as f64
    }
}

/// Multiply-adds of the gated path relative to the dense product.
pub fn comput_fraction(ledger: &ComputeLedger) -> f64 {
    if ledger.dense_madds == 0 {
        return f64::NAN;
    }
    ledger.actual_madds as f64 / ledger.dense_madds as f64
}

fn open_rows(mask: &[f64], gates: usize, g: usize, batch: usize, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..batch).filter(|&b| mask[b * gates + g] != 0.0));
}

/// `y[B×m] += Σ_open mask·W_ij·x_j` over a batch with one mask row per input.
fn forward_kernel(
    geom: &BlockGeometry,
    blocks: &[f64],
    x: &[f64],
    batch: usize,
    mask: &[f64],
    y: &mut [f64],
    access: Option<&BlockAccess>,
) -> u64 {
    let (bh, bw, gates) = (geom.block_height(), geom.block_width(), geom.gates());
    let (m, n) = (geom.rows, geom.cols);
    let mut rows = Vec::with_capacity(batch);
    let mut xs = Vec::new();
    let mut t = Vec::new();
    let mut opened = 0u64;
    for i in 0..geom.grid_rows {
        for j in 0..geom.grid_cols {
            let g = i * geom.grid_cols + j;
            open_rows(mask, gates, g, batch, &mut rows);
            if rows.is_empty() {
                continue;
            }
            opened += rows.len() as u64;
            if let Some(a) = access {
                a.forward[g].fetch_add(rows.len() as u64, Ordering::Relaxed);
            }
            let w = &blocks[g * bh * bw..(g + 1) * bh * bw];
            xs.clear();
            for &b in &rows {
                xs.extend_from_slice(&x[b * n + j * bw..b * n + (j + 1) * bw]);
            }
            t.resize(rows.len() * bh, 0.0);
            kernels::matmul_nt(&xs, w, &mut t, rows.len(), bw, bh, 0.0);
            for (r, &b) in rows.iter().enumerate() {
                let gv = mask[b * gates + g];
                let dst = &mut y[b * m + i * bh..b * m + (i + 1) * bh];
                for (d, v) in dst.iter_mut().zip(&t[r * bh..(r + 1) * bh]) {
                    *d += gv * v;
                }
            }
        }
    }
    opened
}

struct BackwardOut<'a> {
    dblocks: Option<&'a mut [f64]>,
    dmask: Option<&'a mut [f64]>,
    dx: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
fn backward_kernel(
    geom: &BlockGeometry,
    blocks: &[f64],
    x: &[f64],
    batch: usize,
    mask: &[f64],
    gy: &[f64],
    mut out: BackwardOut<'_>,
    access: Option<&BlockAccess>,
) {
    let (bh, bw, gates) = (geom.block_height(), geom.block_width(), geom.gates());
    let (m, n) = (geom.rows, geom.cols);
    let mut rows = Vec::with_capacity(batch);
    let (mut xs, mut gys, mut u) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..geom.grid_rows {
        for j in 0..geom.grid_cols {
            let g = i * geom.grid_cols + j;
            open_rows(mask, gates, g, batch, &mut rows);
            if rows.is_empty() {
                continue;
            }
            if let Some(a) = access {
                a.backward[g].fetch_add(rows.len() as u64, Ordering::Relaxed);
            }
            let nb = rows.len();
            let w = &blocks[g * bh * bw..(g + 1) * bh * bw];
            xs.clear();
            gys.clear();
            for &b in &rows {
                xs.extend_from_slice(&x[b * n + j * bw..b * n + (j + 1) * bw]);
                gys.extend_from_slice(&gy[b * m + i * bh..b * m + (i + 1) * bh]);
            }
            if out.dmask.is_some() || out.dx.is_some() {
                // u = gy_i · W_ij, so dmask = u·x_j and dx_j += mask·u
                u.resize(nb * bw, 0.0);
                kernels::matmul_nn(&gys, w, &mut u, nb, bh, bw, 0.0);
                for (r, &b) in rows.iter().enumerate() {
                    let ur = &u[r * bw..(r + 1) * bw];
                    if let Some(dmask) = out.dmask.as_deref_mut() {
                        dmask[b * gates + g] += kernels::dot(ur, &xs[r * bw..(r + 1) * bw]);
                    }
                    if let Some(dx) = out.dx.as_deref_mut() {
                        let gv = mask[b * gates + g];
                        for (d, v) in dx[b * n + j * bw..b * n + (j + 1) * bw].iter_mut().zip(ur) {
                            *d += gv * v;
                        }
                    }
                }
            }
            if let Some(dblocks) = out.dblocks.as_deref_mut() {
                for (r, &b) in rows.iter().enumerate() {
                    let gv = mask[b * gates + g];
                    gys[r * bh..(r + 1) * bh].iter_mut().for_each(|v| *v *= gv);
                }
                let dw = &mut dblocks[g * bh * bw..(g + 1) * bh * bw];
                kernels::matmul_tn(&gys, &xs, dw, bh, nb, bw, 1.0);
            }
        }
    }
}

/// Gated product for a single input vector, outside any tape.
pub fn gated_matvec(
    w: &BlockMatrix,
    h: &Tensor,
    mask: &GateMask,
) -> Result<(Tensor, ComputeLedger)> {
    gated_matvec_tracked(w, h, mask, None)
}

pub fn gated_matvec_tracked(
    w: &BlockMatrix,
    h: &Tensor,
    mask: &GateMask,
    access: Option<&BlockAccess>,
) -> Result<(Tensor, ComputeLedger)> {
    let geom = w.geometry();
    if h.len() != geom.cols || mask.values.len() != geom.gates() {
        return Err(Error::shape(
            "gated_matvec",
            format!(
                "h of length {} and {} gates for geometry {:?}",
                h.len(),
                mask.values.len(),
                geom
            ),
        ));
    }
    let mut y = vec![0.0; geom.rows];
    let opened = forward_kernel(
        &geom,
        w.storage().data(),
        h.data(),
        1,
        &mask.values,
        &mut y,
        access,
    );
    let mut ledger = ComputeLedger::default();
    ledger.record_product(&geom, 1, opened);
    Ok((Tensor::from_vec(y), ledger))
}

struct GatedMatmulOp {
    geometry: BlockGeometry,
    batch: usize,
    access: Option<Arc<BlockAccess>>,
}

impl CustomOp for GatedMatmulOp {
    fn name(&self) -> &'static str {
        "gated_matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (x, blocks, mask) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let mut dx = ctx.needs_grad[0].then(|| vec![0.0; x.len()]);
        let mut dblocks = ctx.needs_grad[1].then(|| vec![0.0; blocks.len()]);
        let mut dmask = ctx.needs_grad[2].then(|| vec![0.0; mask.len()]);
        backward_kernel(
            &self.geometry,
            blocks.data(),
            x.data(),
            self.batch,
            mask.data(),
            ctx.grad.data(),
            BackwardOut {
                dblocks: dblocks.as_deref_mut(),
                dmask: dmask.as_deref_mut(),
                dx: dx.as_deref_mut(),
            },
            self.access.as_deref(),
        );
        let wrap = |d: Option<Vec<f64>>, like: &Tensor| {
            d.map(|d| Tensor::new(like.shape().to_vec(), d)).transpose()
        };
        Ok(vec![
            wrap(dx, x)?,
            wrap(dblocks, blocks)?,
            wrap(dmask, mask)?,
        ])
    }
}

/// Records the gated product on the tape: `x: [B×n]` (or `[n]`), `blocks` in
/// block-contiguous storage, `mask: [B×r·c]` (or `[r·c]`). Returns the output
/// var and the number of (row, block) pairs computed.
pub fn gated_matmul(
    tape: &Tape,
    x: Var,
    blocks: Var,
    mask: Var,
    geometry: BlockGeometry,
    access: Option<Arc<BlockAccess>>,
) -> Result<(Var, u64)> {
    let (value, batch, opened) = {
        let (xt, bt, mt) = (tape.value(x), tape.value(blocks), tape.value(mask));
        let (batch, n) = xt.as_matrix_dims();
        let (mrows, gates) = mt.as_matrix_dims();
        if n != geometry.cols
            || bt.shape() != geometry.storage_shape()
            || gates != geometry.gates()
            || mrows != batch
            || xt.ndim() != mt.ndim()
        {
            return Err(Error::shape(
                "gated_matmul",
                format!(
                    "x {:?}, blocks {:?}, mask {:?} for {:?}",
                    xt.shape(),
                    bt.shape(),
                    mt.shape(),
                    geometry
                ),
            ));
        }
        let mut y = vec![0.0; batch * geometry.rows];
        let opened = forward_kernel(
            &geometry,
            bt.data(),
            xt.data(),
            batch,
            mt.data(),
            &mut y,
            access.as_deref(),
        );
        let shape = if xt.ndim() == 1 {
            vec![geometry.rows]
        } else {
            vec![batch, geometry.rows]
        };
        (Tensor::new(shape, y)?, batch, opened)
    };
    let op = GatedMatmulOp {
        geometry,
        batch,
        access,
    };
    let y = tape.custom(&[x, blocks, mask], value, Box::new(op))?;
    Ok((y, opened))
}

/// How gating parameters are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateInit {
    /// Uniform `±1/√key_size` weights with the default positive bias.
    Random,
    /// Zero weights and a constant positive bias (all scores equal).
    Constant(f64),
}

/// Linear layer `y = (G(h) ⊙ W)·h + b` with a trainable top-k block gate.
#[derive(Clone, Debug)]
pub struct DynamicLinear {
    name: String,
    geometry: BlockGeometry,
    cfg: SparsenessConfig,
    weight: ParamId,
    bias: Option<ParamId>,
    gate: Option<(ParamId, ParamId)>,
    access: Option<Arc<BlockAccess>>,
}

/// Construction options for [`DynamicLinear`].
#[derive(Clone, Copy, Debug)]
pub struct DynamicLinearSpec {
    pub geometry: BlockGeometry,
    pub key_size: usize,
    pub sparsity: f64,
    pub bias: bool,
    pub weight_init: Init,
    pub gate_init: GateInit,
    /// Whether the layer owns a gating network. Layers without one must be
    /// driven through [`DynamicLinear::apply`] with an external mask.
    pub own_gate: bool,
    pub shortfall: Shortfall,
}

impl DynamicLinear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: DynamicLinearSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let geometry = spec.geometry;
        if spec.key_size > geometry.cols {
            return Err(Error::Parameter(format!(
                "{name}: key size {} exceeds input size {}",
                spec.key_size, geometry.cols
            )));
        }
        let cfg = SparsenessConfig::new(
            spec.sparsity,
            geometry.grid_rows,
            geometry.grid_cols,
            spec.key_size,
        )?
        .with_shortfall(spec.shortfall);
        // Initialize as a logical m×n matrix so the result does not depend on
        // the block layout.
        let dense = spec
            .weight_init
            .sample(&[geometry.rows, geometry.cols], rng);
        let blocks = BlockMatrix::from_dense(&dense, geometry.grid_rows, geometry.grid_cols)?;
        let weight = store.add(format!("{name}.weight"), blocks.into_storage())?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[geometry.rows]))?)
        } else {
            None
        };
        let gate = if spec.own_gate {
            let net = match spec.gate_init {
                GateInit::Random => GatingNetwork::new(geometry.gates(), spec.key_size, rng),
                GateInit::Constant(b) => {
                    GatingNetwork::constant(geometry.gates(), spec.key_size, b)
                }
            };
            Some((
                store.add(format!("{name}.gate.weight"), net.weight)?,
                store.add(format!("{name}.gate.bias"), net.bias)?,
            ))
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            geometry,
            cfg,
            weight,
            bias,
            gate,
            access: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.geometry
    }

    pub fn config(&self) -> &SparsenessConfig {
        &self.cfg
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn gate_params(&self) -> Option<(ParamId, ParamId)> {
        self.gate
    }

    pub fn gating_network(&self, store: &ParamStore) -> Option<GatingNetwork> {
        self.gate.map(|(w, b)| GatingNetwork {
            weight: store.get(w).clone(),
            bias: store.get(b).clone(),
        })
    }

    pub fn block_matrix(&self, store: &ParamStore) -> BlockMatrix {
        BlockMatrix::from_blocks(self.geometry, store.get(self.weight).clone())
            .expect("registered shape")
    }

    pub fn set_sparsity(&mut self, sparsity: f64) -> Result<()> {
        self.cfg = self.cfg.with_sparsity(sparsity)?;
        Ok(())
    }

    /// Attaches block read counters to every subsequent forward/backward.
    pub fn instrument(&mut self) -> Arc<BlockAccess> {
        let a = Arc::new(BlockAccess::new(self.geometry.gates()));
        self.access = Some(a.clone());
        a
    }

    /// Extra parameters spent on gating: `key_size·r·c + r·c`, or zero
    /// for a layer driven by an external mask.
    pub fn gating_param_count(&self) -> usize {
        match self.gate {
            Some(_) => self.cfg.key_size() * self.geometry.gates() + self.geometry.gates(),
            None => 0,
        }
    }

    /// The first `key_size` components of the input.
    pub fn key(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let n = *g.tape.shape(x).last().unwrap_or(&0);
        if self.cfg.key_size() == n {
            Ok(x)
        } else {
            g.tape.slice_cols(x, 0, self.cfg.key_size())
        }
    }

    /// Computes the gate mask from `key` and accounts its cost.
    pub fn gate(&self, g: &Graph<'_>, s: &mut Session<'_>, key: Var) -> Result<Var> {
        let (w, b) = self.gate.ok_or_else(|| {
            Error::Parameter(format!("{} has no gating network of its own", self.name))
        })?;
        let (w, b) = (g.param(w)?, g.param(b)?);
        let scores = gating::gate_scores(&g.tape, key, w, b)?;
        let out =
            gating::topk_gate_with(&g.tape, scores, self.cfg.open_count(), self.cfg.shortfall())?;
        let rows = g.tape.value(out.mask).as_matrix_dims().0 as u64;
        s.ledger(&self.name).record_gating(
            self.cfg.key_size(),
            self.geometry.gates(),
            self.cfg.open_count(),
            rows,
            out.fallback_rows as u64,
        );
        s.ledger(&self.name).short_rows += out.short_rows as u64;
        if s.trace.is_some() {
            let v = g.tape.value(out.mask).data().to_vec();
            s.record_gates(&self.name, self.geometry.gates(), &v);
        }
        Ok(out.mask)
    }

    /// Gated product with a precomputed mask, plus the dense bias.
    pub fn apply(&self, g: &Graph<'_>, s: &mut Session<'_>, x: Var, mask: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let (y, opened) = gated_matmul(&g.tape, x, w, mask, self.geometry, self.access.clone())?;
        let rows = g.tape.value(x).as_matrix_dims().0 as u64;
        s.ledger(&self.name)
            .record_product(&self.geometry, rows, opened);
        match self.bias {
            Some(b) => g.tape.add_bias(y, g.param(b)?),
            None => Ok(y),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let key = self.key(g, x)?;
        self.forward_with_key(g, s, x, key)
    }

    /// Forward pass where the gate reads a separately supplied key.
    pub fn forward_with_key(
        &self,
        g: &Graph<'_>,
        s: &mut Session<'_>,
        x: Var,
        key: Var,
    ) -> Result<Var> {
        let mask = self.gate(g, s, key)?;
        self.apply(g, s, x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SeededRng;
    use crate::testing::{check_gradients, dense_masked_matvec, expand_mask};
    use rand::SeedableRng;

    #[test]
    fn geometry_rejects_indivisible_grids() {
        assert!(BlockGeometry::new(10, 8, 3, 2).is_err());
        assert!(BlockGeometry::new(9, 8, 3, 2).is_ok());
        assert!(BlockGeometry::with_block(1536, 1536, 128).is_ok());
        assert!(BlockGeometry::with_block(1536, 1000, 128).is_err());
    }

    #[test]
    fn block_storage_round_trips_bit_exactly() {
        let mut rng = SeededRng::seed_from_u64(1);
        let dense = Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng);
        let bm = BlockMatrix::from_dense(&dense, 3, 2).unwrap();
        assert_eq!(bm.assemble(), dense);
        // block (1, 1) starts at logical row 2, column 4
        assert_eq!(bm.block(1, 1)[0], dense.data()[2 * 8 + 4]);
    }

    #[test]
    fn all_open_matches_dense() {
        let mut rng = SeededRng::seed_from_u64(2);
        let dense = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let bm = BlockMatrix::from_dense(&dense, 2, 2).unwrap();
        let h = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let (y, ledger) = gated_matvec(&bm, &h, &GateMask::all_open(4)).unwrap();
        let tape = Tape::new();
        let w = tape.constant(dense).unwrap();
        let hv = tape.constant(h).unwrap();
        let yd = tape.matvec(w, hv).unwrap();
        assert!(y.max_abs_diff(&tape.value(yd)) < 1e-12);
        assert_eq!(ledger.fraction(), 1.0);
    }

    #[test]
    fn single_open_block_touches_one_row_slice() {
        let mut rng = SeededRng::seed_from_u64(3);
        let dense = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let bm = BlockMatrix::from_dense(&dense, 3, 2).unwrap();
        let h = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let mut values = vec![0.0; 6];
        values[3] = 2.5; // block (1, 1)
        let mask = GateMask {
            values: values.clone(),
            open_count: 1,
            fallback: false,
        };
        let access = BlockAccess::new(6);
        let (y, _) = gated_matvec_tracked(&bm, &h, &mask, Some(&access)).unwrap();
        let oracle = expand_mask(&values, &bm.geometry());
        for r in 0..6 {
            let expect: f64 = (0..4)
                .map(|c| oracle.data()[r * 4 + c] * dense.data()[r * 4 + c] * h.data()[c])
                .sum();
            assert!((y.data()[r] - expect).abs() < 1e-12);
            if !(2..4).contains(&r) {
                assert_eq!(y.data()[r], 0.0);
            }
        }
        assert_eq!(access.forward_reads(), vec![0, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn ledger_counts_open_blocks_and_gating() {
        let mut l = ComputeLedger::default();
        let g = BlockGeometry::with_block(1536, 1536, 128).unwrap();
        l.record_product(&g, 1, 72);
        l.record_gating(384, 144, 72, 1, 0);
        assert_eq!(l.actual_madds, 72 * 128 * 128 + 384 * 144);
        assert_eq!(l.matvec_fraction(), 0.5);
        assert!(l.gating_fraction() < 0.05);
    }

    #[test]
    fn gated_product_matches_dense_masked_oracle() {
        let mut rng = SeededRng::seed_from_u64(4);
        let shapes = [
            (8, 8, 2, 2),
            (6, 12, 3, 4),
            (16, 8, 4, 1),
            (4, 4, 1, 1),
            (10, 6, 5, 3),
        ];
        for case in 0..1200 {
            let (m, n, r, c) = shapes[case % shapes.len()];
            let geom = BlockGeometry::new(m, n, r, c).unwrap();
            let dense = Tensor::uniform(&[m, n], -1.0, 1.0, &mut rng);
            let bm = BlockMatrix::from_dense(&dense, r, c).unwrap();
            let h = Tensor::uniform(&[n], -2.0, 2.0, &mut rng);
            let scores: Vec<f64> = (0..r * c)
                .map(|_| rng.random_range(-0.5..1.0f64).max(0.0))
                .collect();
            let k = rng.random_range(1..=r * c);
            let mask = GateMask::from_scores(&scores, k);
            let (y, ledger) = gated_matvec(&bm, &h, &mask).unwrap();
            let expect = dense_masked_matvec(&dense, &expand_mask(&mask.values, &geom), h.data());
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            }
            let opened = mask.nonzero() as u64;
            assert_eq!(ledger.actual_madds, opened * geom.block_len() as u64);
        }
    }

    #[test]
    fn closed_blocks_are_never_read() {
        let mut rng = SeededRng::seed_from_u64(5);
        let geom = BlockGeometry::new(8, 12, 2, 3).unwrap();
        let batch = 5;
        let x = Tensor::uniform(&[batch, 12], -1.0, 1.0, &mut rng);
        let blocks = Tensor::uniform(&geom.storage_shape(), -1.0, 1.0, &mut rng);
        let mut mask = vec![0.0; batch * 6];
        let mut expect = vec![0u64; 6];
        for b in 0..batch {
            for g in 0..6 {
                if rng.random_bool(0.4) {
                    mask[b * 6 + g] = rng.random_range(0.5..2.0);
                    expect[g] += 1;
                }
            }
        }
        // keep block 4 closed for every input
        for b in 0..batch {
            if mask[b * 6 + 4] != 0.0 {
                mask[b * 6 + 4] = 0.0;
                expect[4] -= 1;
            }
        }
        let access = Arc::new(BlockAccess::new(6));
        let tape = Tape::new();
        let xv = tape.param(x).unwrap();
        let wv = tape.param(blocks).unwrap();
        let mv = tape
            .param(Tensor::new(vec![batch, 6], mask).unwrap())
            .unwrap();
        let (y, opened) = gated_matmul(&tape, xv, wv, mv, geom, Some(access.clone())).unwrap();
        assert_eq!(opened, expect.iter().sum::<u64>());
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(access.forward_reads(), expect);
        assert_eq!(access.backward_reads(), expect);
        assert_eq!(access.forward_reads()[4], 0);
        let dw = grads.get(wv).unwrap();
        assert!(dw.data()[4 * geom.block_len()..5 * geom.block_len()]
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn gated_matmul_gradients_match_finite_differences() {
        let mut rng = SeededRng::seed_from_u64(6);
        let geom = BlockGeometry::new(6, 4, 3, 2).unwrap();
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let blocks = Tensor::uniform(&geom.storage_shape(), -1.0, 1.0, &mut rng);
        let mask = Tensor::uniform(&[3, 6], 0.2, 2.0, &mut rng);
        // Closed entries are structural zeros: their gradient is defined as
        // zero, so route the mask through a fixed 0/1 pattern.
        let mut pattern = Tensor::ones(&[3, 6]);
        for i in [1, 5, 8, 13, 14] {
            pattern.data_mut()[i] = 0.0;
        }
        let err = check_gradients(&[x, blocks, mask], |t, v| {
            let p = t.constant(pattern.clone())?;
            let m = t.mul(v[2], p)?;
            let (y, _) = gated_matmul(t, v[0], v[1], m, geom, None)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn full_layer_gradients_match_finite_differences() {
        let mut rng = SeededRng::seed_from_u64(7);
        let geom = BlockGeometry::new(8, 8, 2, 2).unwrap();
        let key = 4;
        let x = Tensor::uniform(&[2, 8], -1.0, 1.0, &mut rng);
        let blocks = Tensor::uniform(&geom.storage_shape(), -1.0, 1.0, &mut rng);
        let bias = Tensor::uniform(&[8], -0.5, 0.5, &mut rng);
        let gw = Tensor::uniform(&[4, key], -1.0, 1.0, &mut rng);
        let gb = Tensor::full(&[4], 1.0);
        let err = check_gradients(&[x, blocks, bias, gw, gb], |t, v| {
            let k = t.slice_cols(v[0], 0, key)?;
            let scores = gating::gate_scores(t, k, v[3], v[4])?;
            let mask = gating::topk_gate(t, scores, 2)?.mask;
            let (y, _) = gated_matmul(t, v[0], v[1], mask, geom, None)?;
            let y = t.add_bias(y, v[2])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn dynamic_linear_accounts_gating_and_products() {
        let mut rng = SeededRng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let spec = DynamicLinearSpec {
            geometry: BlockGeometry::with_block(1536, 1536, 128).unwrap(),
            key_size: 384,
            sparsity: 0.5,
            bias: true,
            weight_init: Init::Uniform(0.05),
            gate_init: GateInit::Random,
            own_gate: true,
            shortfall: Shortfall::Dense,
        };
        let layer = DynamicLinear::new(&mut store, "l", spec, &mut rng).unwrap();
        assert_eq!(layer.config().open_count(), 72);
        let x = Tensor::uniform(&[3, 1536], -1.0, 1.0, &mut rng);
        let g = Graph::new(&store);
        let mut srng = SeededRng::seed_from_u64(0);
        let mut s = Session::new(false, &mut srng);
        let xv = g.tape.constant(x).unwrap();
        layer.forward(&g, &mut s, xv).unwrap();
        let l = s.ledgers["l"];
        let opened = l.open_blocks;
        let fallbacks = l.fallbacks;
        assert_eq!(opened, 3 * 72 + fallbacks * 72);
        assert_eq!(l.gating_madds, 3 * 384 * 144);
        assert_eq!(l.actual_madds, opened * 128 * 128 + l.gating_madds);
        assert_eq!(l.dense_madds, 3 * 1536 * 1536);
        assert!(l.gating_fraction() < 0.05);
    }

    #[test]
    fn all_equal_scores_at_zero_sparsity_is_dense() {
        let mut rng = SeededRng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let spec = DynamicLinearSpec {
            geometry: BlockGeometry::new(8, 6, 4, 3).unwrap(),
            key_size: 6,
            sparsity: 0.0,
            bias: true,
            weight_init: Init::He { fan_in: 6 },
            gate_init: GateInit::Constant(0.3),
            own_gate: true,
            shortfall: Shortfall::Dense,
        };
        let layer = DynamicLinear::new(&mut store, "d", spec, &mut rng).unwrap();
        let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let dense = layer.block_matrix(&store).assemble();
        let g = Graph::new(&store);
        let mut srng = SeededRng::seed_from_u64(0);
        let mut s = Session::new(false, &mut srng);
        let xv = g.tape.constant(x.clone()).unwrap();
        let y = layer.forward(&g, &mut s, xv).unwrap();
        let w = g.tape.constant(dense).unwrap();
        let yd = g.tape.linear(xv, w).unwrap();
        assert!(g.tape.value(y).max_abs_diff(&g.tape.value(yd)) < 1e-12);
    }

    #[test]
    fn mismatched_inputs_are_shape_errors() {
        let bm = BlockMatrix::zeros(BlockGeometry::new(4, 4, 2, 2).unwrap());
        let h = Tensor::zeros(&[3]);
        assert!(matches!(
            gated_matvec(&bm, &h, &GateMask::all_open(4)),
            Err(Error::Shape { .. })
        ));
        let h = Tensor::zeros(&[4]);
        assert!(matches!(
            gated_matvec(&bm, &h, &GateMask::all_open(3)),
            Err(Error::Shape { .. })
        ));
    }
}
