//! Command-line front end for the `dynsparse` library.
//!
//! ```text
//! dynsparse <command> [--config FILE] [--key value ...]
//! ```
//!
//! Commands: `train`, `eval`, `analyze-gates`, `heatmap`, `bench-flops`,
//! `prune-baseline`. Any [`RunConfig`] key is accepted as a flag and wins
//! over the config file.

use std::io::Write;
use std::path::{Path, PathBuf};

use dynsparse::analysis::{
    categorize_gates, class_heatmap, gate_usage, layer_grids, write_heatmap_run, GateCategories,
    CATEGORY_THRESHOLD,
};
use dynsparse::io::checkpoint::Checkpoint;
use dynsparse::io::config::{RunConfig, RunMode, Task};
use dynsparse::io::corpus::Corpus;
use dynsparse::io::metrics::MetricsWriter;
use dynsparse::models::{LstmLm, Mlp};
use dynsparse::params::LayerTrace;
use dynsparse::pruning::{small_dense_config, StaticMask};
use dynsparse::training::{
    batchify, build_lm, build_mlp, eval_lm_traced, eval_mlp_traced, final_sparsity,
    load_mnist_data, run_lm, run_mnist, Built, EpochReport,
};
use dynsparse::{
    BlockGeometry, ComputeLedger, DynamicLinear, Error, Graph, ParamStore, Result, SeededRng,
    Session, Tensor,
};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub const USAGE: &str = "usage: dynsparse <train|eval|analyze-gates|heatmap|bench-flops|prune-baseline> [--config FILE] [--key value ...]";

pub const CHECKPOINT_FILE: &str = "checkpoint.bdsp";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Runs one command and returns the process exit code: 0 on success, 2 for
/// usage and configuration errors, 1 for everything else.
pub fn run(args: Vec<String>) -> i32 {
    let mut out = std::io::stdout().lock();
    match dispatch(&args, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("{USAGE}");
                2
            } else {
                1
            }
        }
    }
}

/// [`run`] with output captured in `out`.
pub fn dispatch(args: &[String], out: &mut dyn Write) -> Result<()> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| Error::Config("missing command".into()))?;
    let flags = Flags::parse(rest)?;
    match cmd.as_str() {
        "train" => train(flags, out),
        "eval" => eval(flags, out),
        "analyze-gates" => analyze_gates(flags, out),
        "heatmap" => heatmap(flags, out),
        "bench-flops" => bench_flops(flags, out),
        "prune-baseline" => prune_baseline(flags, out),
        "help" | "--help" | "-h" => {
            writeln!(out, "{USAGE}")?;
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

/// `--key value` pairs in command-line order.
struct Flags(Vec<(String, String)>);

impl Flags {
    fn parse(args: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut it = args.iter().peekable();
        while let Some(a) = it.next() {
            let key = a
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("unexpected argument {a}")))?;
            let (k, v) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                // a bare `--flag` is a switch
                None => match it.next_if(|v| !v.starts_with("--")) {
                    Some(v) => (key.to_string(), v.clone()),
                    None => (key.to_string(), "true".to_string()),
                },
            };
            pairs.push((k.replace('-', "_"), v));
        }
        Ok(Self(pairs))
    }

    /// Removes and returns the last value given for `key`.
    fn take(&mut self, key: &str) -> Option<String> {
        let v = self
            .0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone());
        self.0.retain(|(k, _)| k != key);
        v
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.take(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for --{key}")))
            })
            .transpose()
    }

    /// Everything left is a config key.
    fn config(mut self) -> Result<RunConfig> {
        let file = self.take("config").map(PathBuf::from);
        RunConfig::load(file.as_deref(), self.0)
    }

    fn expect_empty(&self, cmd: &str) -> Result<()> {
        match self.0.first() {
            Some((k, _)) => Err(Error::Config(format!("unknown flag --{k} for {cmd}"))),
            None => Ok(()),
        }
    }
}

/// Configuration snapshot stored inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub run: RunConfig,
    /// Vocabulary size for language models.
    pub vocab_size: Option<usize>,
    pub input_dim: Option<usize>,
}

pub enum Model {
    Mlp(Built<Mlp>),
    Lm(Built<LstmLm>),
}

impl Model {
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Mlp(b) => &b.store,
            Model::Lm(b) => &b.store,
        }
    }

    pub fn dynamic_layers(&self) -> Vec<&DynamicLinear> {
        match self {
            Model::Mlp(b) => b.model.dynamic_layers(),
            Model::Lm(b) => b.model.dynamic_layers(),
        }
    }
}

fn write_metric(metrics: &mut MetricsWriter, out: &mut dyn Write, r: &EpochReport) -> Result<()> {
    metrics.write(r)?;
    writeln!(out, "{}", r.to_json_line())?;
    Ok(())
}

/// Trains per `cfg`, writing `metrics.jsonl` and `checkpoint.bdsp` into
/// `cfg.out_dir`. Language models also get a final test-split line.
pub fn train_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<Model> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    dynsparse::io::atomic_write(&cfg.out_dir.join("config.txt"), cfg.to_kv().as_bytes())?;
    let mut metrics = MetricsWriter::create(&cfg.out_dir.join(METRICS_FILE))?;
    let (model, snapshot) = match cfg.task {
        Task::Mnist => {
            let (train, test) = load_mnist_data(cfg)?;
            log::info!("mnist: {} train, {} test images", train.len(), test.len());
            let built = run_mnist(cfg, &train, &test, &mut |r| {
                write_metric(&mut metrics, out, r)
            })?;
            let snap = Snapshot {
                run: cfg.clone(),
                vocab_size: None,
                input_dim: Some(train.dim()),
            };
            (Model::Mlp(built), snap)
        }
        Task::Lm => {
            let corpus = Corpus::load(&cfg.data_dir)?;
            log::info!(
                "corpus: {} train tokens, vocab {}",
                corpus.train.len(),
                corpus.vocab.len()
            );
            let built = run_lm(cfg, &corpus, &mut |r| write_metric(&mut metrics, out, r))?;
            let test = batchify(&corpus.test, cfg.eval_batch_size)?;
            let (r, _) = eval_lm_traced(
                &built.model,
                &built.store,
                &test,
                cfg.bptt,
                cfg.epochs,
                "test",
                false,
            )?;
            write_metric(&mut metrics, out, &r)?;
            let snap = Snapshot {
                run: cfg.clone(),
                vocab_size: Some(corpus.vocab.len()),
                input_dim: None,
            };
            (Model::Lm(built), snap)
        }
    };
    Checkpoint::from_store(model.store(), serde_json::to_value(&snapshot)?)
        .save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    Ok(model)
}

fn train(flags: Flags, out: &mut dyn Write) -> Result<()> {
    let cfg = flags.config()?;
    train_run(&cfg, out)?;
    Ok(())
}

/// Rebuilds the model stored in a checkpoint, at its final sparseness level.
pub fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let snap: Snapshot = serde_json::from_value(ckpt.config.clone())?;
    let cfg = snap.run;
    let sparsity = final_sparsity(&cfg)?;
    let missing = |what: &str| Error::Checkpoint(format!("snapshot lacks {what}"));
    let mut model = match cfg.task {
        Task::Mnist => {
            let mut b = build_mlp(&cfg, snap.input_dim.ok_or_else(|| missing("input_dim"))?)?;
            if cfg.mode == RunMode::Dynamic {
                b.model.set_sparsity(sparsity)?;
            }
            Model::Mlp(b)
        }
        Task::Lm => {
            let mut b = build_lm(&cfg, snap.vocab_size.ok_or_else(|| missing("vocab_size"))?)?;
            if cfg.mode == RunMode::Dynamic {
                b.model.set_sparsity(sparsity)?;
            }
            Model::Lm(b)
        }
    };
    match &mut model {
        Model::Mlp(b) => ckpt.restore(&mut b.store)?,
        Model::Lm(b) => {
            ckpt.restore(&mut b.store)?;
            let masks: Vec<_> = b
                .model
                .static_weights()
                .into_iter()
                .map(|id| (id, StaticMask::nonzero(b.store.get(id))))
                .collect();
            if !masks.is_empty() {
                b.model.set_static_masks(&mut b.store, masks)?;
            }
        }
    }
    Ok((model, cfg))
}

/// Evaluates `model` on the held-out split of its task, optionally recording
/// every gate mask.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    split: &str,
    trace: bool,
) -> Result<(EpochReport, std::collections::BTreeMap<String, LayerTrace>)> {
    match model {
        Model::Mlp(b) => {
            let (train, test) = load_mnist_data(cfg)?;
            let data = match split {
                "train" => train,
                "test" => test,
                other => return Err(Error::Config(format!("mnist has no split {other}"))),
            };
            eval_mlp_traced(
                &b.model,
                &b.store,
                &data,
                cfg.eval_batch_size,
                cfg.epochs,
                split,
                trace,
            )
        }
        Model::Lm(b) => {
            let corpus = Corpus::load(&cfg.data_dir)?;
            let tokens = match split {
                "train" => &corpus.train,
                "valid" => &corpus.valid,
                "test" => &corpus.test,
                other => return Err(Error::Config(format!("corpus has no split {other}"))),
            };
            let data = batchify(tokens, cfg.eval_batch_size)?;
            eval_lm_traced(
                &b.model, &b.store, &data, cfg.bptt, cfg.epochs, split, trace,
            )
        }
    }
}

fn checkpoint_flag(flags: &mut Flags) -> Result<PathBuf> {
    flags
        .take("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn eval(mut flags: Flags, out: &mut dyn Write) -> Result<()> {
    let path = checkpoint_flag(&mut flags)?;
    let split = flags.take("split").unwrap_or_else(|| "test".into());
    flags.expect_empty("eval")?;
    let (model, cfg) = load_model(&path)?;
    let (r, _) = evaluate(&model, &cfg, &split, false)?;
    writeln!(out, "{}", r.to_json_line())?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateReport {
    pub layers: Vec<GateCategories>,
    pub instances: usize,
    pub input_dependent_fraction: f64,
}

/// Category counts for every gated layer of `model` over `split`.
pub fn gate_report(
    model: &Model,
    cfg: &RunConfig,
    split: &str,
    threshold: f64,
) -> Result<GateReport> {
    let (_, traces) = evaluate(model, cfg, split, true)?;
    let grids = layer_grids(model.dynamic_layers());
    let stats = gate_usage(&traces, &grids)?;
    let layers = categorize_gates(&stats, threshold);
    let dep: usize = layers.iter().map(|c| c.input_dependent).sum();
    let all: usize = layers.iter().map(|c| c.total()).sum();
    Ok(GateReport {
        instances: stats.layers.first().map_or(0, |l| l.instance_count),
        input_dependent_fraction: dep as f64 / all.max(1) as f64,
        layers,
    })
}

fn analyze_gates(mut flags: Flags, out: &mut dyn Write) -> Result<()> {
    let path = checkpoint_flag(&mut flags)?;
    let split = flags.take("split").unwrap_or_else(|| "test".into());
    let threshold = flags
        .take_parsed("threshold")?
        .unwrap_or(CATEGORY_THRESHOLD);
    flags.expect_empty("analyze-gates")?;
    let (model, cfg) = load_model(&path)?;
    let report = gate_report(&model, &cfg, &split, threshold)?;
    for c in &report.layers {
        writeln!(
            out,
            "{:<16} on {:>5}  off {:>5}  input-dependent {:>5}  ({:.3})",
            c.layer,
            c.always_on,
            c.always_off,
            c.input_dependent,
            c.input_dependent_fraction()
        )?;
    }
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn heatmap(mut flags: Flags, out: &mut dyn Write) -> Result<()> {
    let path = checkpoint_flag(&mut flags)?;
    let layer: Option<usize> = flags.take_parsed("layer")?;
    let dir = flags.take("out").map(PathBuf::from);
    flags.expect_empty("heatmap")?;
    let (model, cfg) = load_model(&path)?;
    let Model::Mlp(b) = &model else {
        return Err(Error::Config(
            "heatmap needs a classifier checkpoint".into(),
        ));
    };
    let layers = b.model.dynamic_layers().len();
    if layers == 0 {
        return Err(Error::Config("model has no gated layers".into()));
    }
    let (_, test) = load_mnist_data(&cfg)?;
    let masks = class_heatmap(
        &b.model,
        &b.store,
        &test,
        layer.unwrap_or(layers - 1),
        cfg.eval_batch_size,
    )?;
    let dir = dir.unwrap_or_else(|| cfg.out_dir.join("heatmaps"));
    let summary = write_heatmap_run(&masks, &dir)?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

/// One row of the compute table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub sparsity: f64,
    pub open_gates: usize,
    pub gates: usize,
    pub matvec_fraction: f64,
    pub gating_fraction: f64,
    pub total_fraction: f64,
}

/// Measures the ledger of one gated `hidden×hidden` layer on random input at
/// each sparseness level. The gate key defaults to a quarter of the input.
pub fn flops_table(
    hidden: usize,
    block: usize,
    key_size: usize,
    sparsities: &[f64],
    seed: u64,
) -> Result<Vec<FlopsRow>> {
    use dynsparse::gating::Shortfall;
    use dynsparse::params::Init;
    use dynsparse::sparse_linear::{DynamicLinearSpec, GateInit};
    let geometry = BlockGeometry::with_block(hidden, hidden, block)?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &s in sparsities {
        let mut store = ParamStore::new();
        let spec = DynamicLinearSpec {
            geometry,
            key_size,
            sparsity: s,
            bias: false,
            weight_init: Init::He { fan_in: hidden },
            gate_init: GateInit::Random,
            own_gate: true,
            shortfall: Shortfall::Dense,
        };
        let layer = DynamicLinear::new(&mut store, "layer", spec, &mut rng)?;
        let x = Tensor::uniform(&[hidden], -1.0, 1.0, &mut rng);
        let g = Graph::new(&store);
        let mut srng = SeededRng::seed_from_u64(0);
        let mut sess = Session::new(false, &mut srng);
        let xv = g.tape.constant(x)?;
        layer.forward(&g, &mut sess, xv)?;
        let l: ComputeLedger = sess.total_ledger();
        rows.push(FlopsRow {
            sparsity: s,
            open_gates: layer.config().open_count(),
            gates: geometry.gates(),
            matvec_fraction: l.matvec_fraction(),
            gating_fraction: l.gating_fraction(),
            total_fraction: l.fraction(),
        });
    }
    Ok(rows)
}

fn bench_flops(mut flags: Flags, out: &mut dyn Write) -> Result<()> {
    let hidden = flags.take_parsed("hidden")?.unwrap_or(1536usize);
    let block = flags.take_parsed("block")?.unwrap_or(128usize);
    let key = flags.take_parsed("key_size")?.unwrap_or(hidden / 4);
    let seed = flags.take_parsed("seed")?.unwrap_or(1u64);
    let sparsities = match flags.take("sparsity") {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("invalid sparsity {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![0.5, 0.6, 0.8, 0.9],
    };
    let json = flags.take_parsed("json")?.unwrap_or(false);
    flags.expect_empty("bench-flops")?;
    let rows = flops_table(hidden, block, key, &sparsities, seed).map_err(|e| match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    })?;
    if json {
        writeln!(out, "{}", serde_json::to_string(&rows)?)?;
        return Ok(());
    }
    writeln!(out, "layer {hidden}x{hidden}, block {block}, key {key}")?;
    writeln!(out, "sparsity  open/gates  matvec  gating  total")?;
    for r in &rows {
        writeln!(
            out,
            "{:>8.2}  {:>4}/{:<5}  {:>6.4}  {:>6.4}  {:>5.4}",
            r.sparsity,
            r.open_gates,
            r.gates,
            r.matvec_fraction,
            r.gating_fraction,
            r.total_fraction
        )?;
    }
    Ok(())
}

/// Static baselines: trains the AGP-pruned model (default) or the
/// compute-matched small dense one (`--mode small_dense`).
fn prune_baseline(mut flags: Flags, out: &mut dyn Write) -> Result<()> {
    let mode = flags.take("mode").unwrap_or_else(|| "static_agp".into());
    flags.0.push(("mode".into(), mode));
    if !flags.0.iter().any(|(k, _)| k == "task") {
        flags.0.insert(0, ("task".into(), "lm".into()));
    }
    let cfg = flags.config()?;
    if !matches!(cfg.mode, RunMode::StaticAgp | RunMode::SmallDense) {
        return Err(Error::Config(format!(
            "prune-baseline runs static_agp or small_dense, not {}",
            cfg.mode
        )));
    }
    if cfg.mode == RunMode::SmallDense {
        writeln!(
            out,
            "small dense hidden size {} for fraction {}",
            small_dense_config(cfg.hidden, 1.0 - cfg.sparsity)?,
            1.0 - cfg.sparsity
        )?;
    }
    train_run(&cfg, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_parse_both_spellings() {
        let mut f = Flags::parse(&args("--a 1 --b-c=2 --a 3")).unwrap();
        assert_eq!(f.take("a").as_deref(), Some("3"));
        assert_eq!(f.take("b_c").as_deref(), Some("2"));
        assert!(f.0.is_empty());
        let mut f = Flags::parse(&args("--json --lr -0.5")).unwrap();
        assert_eq!(f.take("json").as_deref(), Some("true"));
        assert_eq!(f.take("lr").as_deref(), Some("-0.5"));
        assert!(Flags::parse(&args("a 1")).is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(vec![]), 2);
        assert_eq!(run(args("frobnicate")), 2);
        assert_eq!(run(args("bench-flops --bogus 1")), 2);
        assert_eq!(run(args("train --no_such_key 1")), 2);
        assert_eq!(run(args("bench-flops --hidden 100 --block 128")), 2);
    }

    #[test]
    fn flops_table_tracks_sparsity() {
        let rows = flops_table(256, 32, 64, &[0.5, 0.75], 3).unwrap();
        assert_eq!(rows[0].open_gates, 32);
        assert!((rows[0].matvec_fraction - 0.5).abs() < 1e-12);
        assert!((rows[1].matvec_fraction - 0.25).abs() < 1e-12);
        // key 64 over 64 gates against 256² dense madds
        assert!((rows[0].gating_fraction - 64.0 * 64.0 / 65536.0).abs() < 1e-12);
    }
}
