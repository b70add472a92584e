//! Gate behavior: on/off/input-dependent categories and per-class block
//! usage heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::hard_threshold;
use crate::io::atomic_write;
use crate::io::mnist::MnistData;
use crate::models::Mlp;
use crate::params::{LayerTrace, ParamStore};
use crate::sparse_linear::BlockGeometry;
use crate::training::eval_mlp_traced;

pub const CATEGORY_THRESHOLD: f64 = 0.95;

/// Fraction of instances on which each gate of one layer was open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub open_frequency: Vec<f64>,
    pub instance_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateUsageStats {
    pub layers: Vec<LayerUsage>,
}

/// Open frequencies from recorded masks; "open" means strictly positive.
/// `grids` maps layer name to its gate grid.
pub fn gate_usage(
    traces: &BTreeMap<String, LayerTrace>,
    grids: &BTreeMap<String, (usize, usize)>,
) -> Result<GateUsageStats> {
    let mut layers = Vec::new();
    for (name, &(gr, gc)) in grids {
        let t = traces
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("no gate trace for layer {name}")))?;
        if t.gates != gr * gc || t.instances() == 0 {
            return Err(Error::Parameter(format!(
                "trace for {name} holds {} instances of {} gates, expected {gr}x{gc}",
                t.instances(),
                t.gates
            )));
        }
        let mut counts = vec![0usize; t.gates];
        for row in t.rows() {
            for (c, open) in counts.iter_mut().zip(hard_threshold(row, 0.0)) {
                *c += open as usize;
            }
        }
        let n = t.instances();
        layers.push(LayerUsage {
            layer: name.clone(),
            grid_rows: gr,
            grid_cols: gc,
            open_frequency: counts.iter().map(|&c| c as f64 / n as f64).collect(),
            instance_count: n,
        });
    }
    Ok(GateUsageStats { layers })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCategories {
    pub layer: String,
    pub always_on: usize,
    pub always_off: usize,
    pub input_dependent: usize,
}

impl GateCategories {
    pub fn total(&self) -> usize {
        self.always_on + self.always_off + self.input_dependent
    }

    pub fn input_dependent_fraction(&self) -> f64 {
        self.input_dependent as f64 / self.total().max(1) as f64
    }
}

/// On: frequency above `threshold`; off: below `1 − threshold`; the rest is
/// input-dependent.
pub fn categorize_gates(stats: &GateUsageStats, threshold: f64) -> Vec<GateCategories> {
    stats
        .layers
        .iter()
        .map(|l| {
            let mut c = GateCategories {
                layer: l.layer.clone(),
                always_on: 0,
                always_off: 0,
                input_dependent: 0,
            };
            for &f in &l.open_frequency {
                if f > threshold {
                    c.always_on += 1;
                } else if f < 1.0 - threshold {
                    c.always_off += 1;
                } else {
                    c.input_dependent += 1;
                }
            }
            c
        })
        .collect()
}

/// Mean normalized gate value per block position, per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHeatmap {
    pub layer: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// class → (instance count, row-major grid of means)
    pub classes: BTreeMap<usize, (usize, Vec<f64>)>,
}

impl ClassHeatmap {
    pub fn from_trace(
        layer: &str,
        trace: &LayerTrace,
        labels: &[usize],
        grid: (usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        if trace.gates != grid.0 * grid.1 || trace.instances() != labels.len() {
            return Err(Error::Parameter(format!(
                "trace of {} x {} gates does not match {} labels on a {}x{} grid",
                trace.instances(),
                trace.gates,
                labels.len(),
                grid.0,
                grid.1
            )));
        }
        let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
        for (row, &y) in trace.rows().zip(labels) {
            let e = sums.entry(y).or_insert_with(|| (0, vec![0.0; trace.gates]));
            e.0 += 1;
            for (s, v) in e.1.iter_mut().zip(row) {
                *s += v;
            }
        }
        for (n, m) in sums.values_mut() {
            for v in m.iter_mut() {
                *v /= *n as f64;
            }
        }
        for c in (0..num_classes).filter(|c| !sums.contains_key(c)) {
            log::warn!("class {c} has no instances; omitted from heatmap of {layer}");
        }
        Ok(Self {
            layer: layer.to_string(),
            grid_rows: grid.0,
            grid_cols: grid.1,
            classes: sums,
        })
    }

    /// CSV with one line per block row.
    pub fn to_csv(&self, class: usize) -> Option<String> {
        let (_, m) = self.classes.get(&class)?;
        let mut s = String::new();
        for r in m.chunks(self.grid_cols) {
            let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        Some(s)
    }

    /// Writes `<run>/<layer>/<class>.csv` for every class present.
    pub fn write_csvs(&self, run_dir: &Path) -> Result<()> {
        let dir = run_dir.join(&self.layer);
        std::fs::create_dir_all(&dir)?;
        for &c in self.classes.keys() {
            let csv = self.to_csv(c).expect("class present");
            atomic_write(&dir.join(format!("{c}.csv")), csv.as_bytes())?;
        }
        Ok(())
    }
}

/// Gate masks of one layer for every instance of `data`, with the heatmap.
pub struct LayerMasks {
    pub trace: LayerTrace,
    pub labels: Vec<usize>,
    pub heatmap: ClassHeatmap,
}

/// Runs `data` through the classifier and collects the masks of its
/// `layer_index`-th gated layer.
pub fn class_heatmap(
    mlp: &Mlp,
    store: &ParamStore,
    data: &MnistData,
    layer_index: usize,
    batch: usize,
) -> Result<LayerMasks> {
    let layers = mlp.dynamic_layers();
    let layer = layers.get(layer_index).ok_or_else(|| {
        Error::Parameter(format!(
            "layer index {layer_index} out of range for {} gated layers",
            layers.len()
        ))
    })?;
    let (_, mut traces) = eval_mlp_traced(mlp, store, data, batch, 0, "heatmap", true)?;
    let trace = traces
        .remove(layer.name())
        .ok_or_else(|| Error::Parameter(format!("layer {} recorded no gates", layer.name())))?;
    let geom = layer.geometry();
    let labels = data
        .labels()
        .iter()
        .map(|&l| l as usize)
        .collect::<Vec<_>>();
    let heatmap = ClassHeatmap::from_trace(
        layer.name(),
        &trace,
        &labels,
        (geom.grid_rows, geom.grid_cols),
        mlp.config().num_classes,
    )?;
    Ok(LayerMasks {
        trace,
        labels,
        heatmap,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSimilarity {
    /// Mean cosine similarity over unordered pairs of the same class.
    pub within: f64,
    /// Mean cosine similarity over unordered pairs of different classes.
    pub between: f64,
}

/// Mean pairwise cosine similarities in O(N·d): for unit vectors the sum over
/// pairs of a set is `(|Σu|² − n)/2`.
pub fn class_similarity(trace: &LayerTrace, labels: &[usize]) -> Result<ClassSimilarity> {
    let d = trace.gates;
    if trace.instances() != labels.len() || labels.len() < 2 {
        return Err(Error::Parameter(
            "need matching masks and labels, at least two".into(),
        ));
    }
    let mut per_class: BTreeMap<usize, (usize, f64, Vec<f64>)> = BTreeMap::new();
    let mut all = vec![0.0; d];
    let mut all_sq = 0.0;
    for (row, &y) in trace.rows().zip(labels) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = per_class.entry(y).or_insert_with(|| (0, 0.0, vec![0.0; d]));
        e.0 += 1;
        if norm > 0.0 {
            e.1 += 1.0;
            all_sq += 1.0;
            for ((s, a), v) in e.2.iter_mut().zip(all.iter_mut()).zip(row) {
                *s += v / norm;
                *a += v / norm;
            }
        }
    }
    let pair_sum = |sum: &[f64], sq: f64| (sum.iter().map(|v| v * v).sum::<f64>() - sq) / 2.0;
    let pairs = |n: usize| (n * n.saturating_sub(1) / 2) as f64;
    let (mut w_sum, mut w_pairs) = (0.0, 0.0);
    for (n, sq, s) in per_class.values() {
        w_sum += pair_sum(s, *sq);
        w_pairs += pairs(*n);
    }
    let b_sum = pair_sum(&all, all_sq) - w_sum;
    let b_pairs = pairs(labels.len()) - w_pairs;
    if w_pairs == 0.0 || b_pairs == 0.0 {
        return Err(Error::Parameter(
            "need two instances of some class and two distinct classes".into(),
        ));
    }
    Ok(ClassSimilarity {
        within: w_sum / w_pairs,
        between: b_sum / b_pairs,
    })
}

/// JSON summary written next to the heatmap CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub layer: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub class_counts: BTreeMap<usize, usize>,
    pub similarity: ClassSimilarity,
}

pub fn write_heatmap_run(masks: &LayerMasks, run_dir: &Path) -> Result<HeatmapSummary> {
    masks.heatmap.write_csvs(run_dir)?;
    let h = &masks.heatmap;
    let summary = HeatmapSummary {
        layer: h.layer.clone(),
        grid_rows: h.grid_rows,
        grid_cols: h.grid_cols,
        class_counts: h.classes.iter().map(|(&c, (n, _))| (c, *n)).collect(),
        similarity: class_similarity(&masks.trace, &masks.labels)?,
    };
    let json = serde_json::to_vec_pretty(&summary)?;
    atomic_write(&run_dir.join(&h.layer).join("summary.json"), &json)?;
    Ok(summary)
}

/// Grid shape of every gated layer, keyed by the name its trace uses.
pub fn layer_grids<'a>(
    layers: impl IntoIterator<Item = &'a crate::sparse_linear::DynamicLinear>,
) -> BTreeMap<String, (usize, usize)> {
    layers
        .into_iter()
        .filter(|l| l.gate_params().is_some())
        .map(|l| {
            let g: BlockGeometry = l.geometry();
            (l.name().to_string(), (g.grid_rows, g.grid_cols))
        })
        .collect()
}
