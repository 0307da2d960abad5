use std::collections::BTreeMap;
use std::io::Write;

use figlut_core::engines::{
    relative_error, run_dataflow, trace_dataflow, EngineConfig, EngineKind, Weights,
};
use figlut_core::numerics::{gen_matrix, Dist, FpFormat, Matrix, Rng};
use figlut_core::perf::{metrics_for_ops, CostModel, EventTrace, GemmDims, PePowerModel};
use rayon::prelude::*;

use super::gemm::quantize;
use crate::config::{LayerSpec, QuantMethod, QuantSpec, RunConfig, SweepSpec};
use crate::error::{CliError, Result};
use crate::{Common, SweepArgs};

pub const COLUMNS: [&str; 13] = [
    "engine",
    "q",
    "mu",
    "k",
    "cycles",
    "energy",
    "ops",
    "tops",
    "tops_per_w",
    "tops_per_mm2",
    "p_pe",
    "p_rac",
    "max_rel_error",
];

const DEFAULT_LAYER: (usize, usize) = (128, 128);

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub engine: EngineKind,
    /// Bits per weight, averaged over layers when some have a fixed width.
    pub q: f64,
    pub mu: u32,
    pub k: u32,
    pub cycles: u64,
    pub energy: f64,
    pub ops: u64,
    pub tops: f64,
    pub tops_per_w: f64,
    pub tops_per_mm2: f64,
    /// LUT engines only.
    pub power: Option<(f64, f64)>,
    pub max_rel_error: Option<f64>,
}

impl SweepRow {
    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.engine.to_string(),
            self.q.to_string(),
            self.mu.to_string(),
            self.k.to_string(),
            self.cycles.to_string(),
            self.energy.to_string(),
            self.ops.to_string(),
            self.tops.to_string(),
            self.tops_per_w.to_string(),
            self.tops_per_mm2.to_string(),
            opt(self.power.map(|p| p.0)),
            opt(self.power.map(|p| p.1)),
            opt(self.max_rel_error),
        ]
    }
}

/// Fully resolved sweep: sorted, de-duplicated axes.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub base: EngineConfig,
    pub engines: Vec<EngineKind>,
    pub q: Vec<u32>,
    pub mu: Vec<u32>,
    pub k: Vec<u32>,
    pub layers: Vec<LayerSpec>,
    pub batch: usize,
    pub error_check: bool,
    pub quant: QuantSpec,
    pub seed: u64,
}

fn axis<T: Ord + Copy>(
    name: &str,
    flag: &[T],
    config: Option<&Vec<T>>,
    default: T,
) -> Result<Vec<T>> {
    let mut values = if !flag.is_empty() {
        flag.to_vec()
    } else {
        config.cloned().unwrap_or_else(|| vec![default])
    };
    values.sort_unstable();
    values.dedup();
    if values.is_empty() {
        return Err(CliError::validation(format!(
            "empty sweep: no values for `{name}`"
        )));
    }
    Ok(values)
}

impl SweepPlan {
    pub fn resolve(common: &Common, args: &SweepArgs) -> Result<(SweepPlan, RunConfig)> {
        let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
        common.apply_scalars(&mut cfg);
        let spec = cfg.sweep.clone().unwrap_or_default();
        let SweepSpec {
            engines,
            q,
            mu,
            k,
            mut layers,
            batch,
            error_check,
        } = spec;
        let mut engines = if common.engine.is_empty() {
            engines
        } else {
            common.engine.clone()
        };
        engines.sort_unstable();
        engines.dedup();
        if engines.is_empty() {
            return Err(CliError::validation(
                "empty sweep: no engines (set sweep.engines or pass --engine)",
            ));
        }
        if layers.is_empty() {
            layers.push(LayerSpec {
                name: "layer0".into(),
                rows: DEFAULT_LAYER.0,
                cols: DEFAULT_LAYER.1,
                q: None,
            });
        }
        let batch = args.batch.unwrap_or(batch);
        if batch == 0 {
            return Err(CliError::validation("sweep batch must be at least 1"));
        }
        if layers.iter().any(|l| l.rows == 0 || l.cols == 0) {
            return Err(CliError::validation(
                "sweep layers must have non-zero shapes",
            ));
        }
        if cfg.quant.method == QuantMethod::Alternating && engines.contains(&EngineKind::Figna) {
            return Err(CliError::validation(
                "engine figna needs uniform weights; use quant.method = rtn",
            ));
        }
        let plan = SweepPlan {
            base: cfg.engine.clone(),
            engines,
            q: axis("q", &common.q, q.as_ref(), cfg.quant.q)?,
            mu: axis("mu", &common.mu, mu.as_ref(), cfg.engine.mu)?,
            k: axis("k", &common.k, k.as_ref(), cfg.engine.k)?,
            layers,
            batch,
            error_check,
            quant: cfg.quant,
            seed: cfg.seed,
        };
        Ok((plan, cfg))
    }

    /// Points in output order: engine, q, mu, k.
    pub fn points(&self) -> Vec<(EngineKind, u32, u32, u32)> {
        let mut pts = Vec::new();
        for &e in &self.engines {
            for &q in &self.q {
                for &mu in &self.mu {
                    for &k in &self.k {
                        pts.push((e, q, mu, k));
                    }
                }
            }
        }
        pts
    }

    fn config(&self, engine: EngineKind, mu: u32, k: u32) -> Result<EngineConfig> {
        let mut cfg = self.base.with_kind(engine);
        cfg.mu = mu;
        cfg.k = k;
        cfg.validate()?;
        Ok(cfg)
    }

    fn layer_q(&self, layer: &LayerSpec, q: u32) -> u32 {
        layer.q.unwrap_or(q)
    }

    fn scalars_per_row(&self, q: u32) -> usize {
        match self.quant.method {
            QuantMethod::Rtn => 2,
            QuantMethod::Alternating => q as usize + 1,
        }
    }

    /// Weighted mean bit-width over all layers.
    fn effective_q(&self, q: u32) -> f64 {
        if self.layers.iter().all(|l| l.q.is_none()) {
            return q as f64;
        }
        let (bits, elems) = self.layers.iter().fold((0u128, 0u128), |(b, e), l| {
            let n = (l.rows * l.cols) as u128;
            (b + n * self.layer_q(l, q) as u128, e + n)
        });
        bits as f64 / elems as f64
    }
}

struct LayerData {
    weights: Weights,
    x: Matrix,
    reference: Matrix,
}

/// Quantized weights, activations and fp64 outputs per (layer, bit-width).
fn layer_data(plan: &SweepPlan) -> Result<BTreeMap<(usize, u32), LayerData>> {
    let mut keys = Vec::new();
    for (i, layer) in plan.layers.iter().enumerate() {
        for &q in &plan.q {
            keys.push((i, plan.layer_q(layer, q)));
        }
    }
    keys.sort_unstable();
    keys.dedup();
    let normal = Dist::Normal {
        mean: 0.0,
        std: 1.0,
    };
    keys.into_par_iter()
        .map(|(i, q)| {
            let layer = &plan.layers[i];
            let root = Rng::new(plan.seed).fork(i as u64);
            let w = gen_matrix(
                &mut root.fork(0),
                layer.rows,
                layer.cols,
                FpFormat::Fp32,
                normal,
            )?;
            let x = gen_matrix(
                &mut root.fork(1),
                layer.cols,
                plan.batch,
                plan.base.act_format,
                normal,
            )?;
            let weights = quantize(&w, &QuantSpec { q, ..plan.quant })?;
            let reference =
                run_dataflow(&plan.base.with_kind(EngineKind::Reference), &weights, &x)?.y;
            Ok((
                (i, q),
                LayerData {
                    weights,
                    x,
                    reference,
                },
            ))
        })
        .collect()
}

/// Numerics depend on the engine, bit-width and `μ` (through the column tiling), not on `k`.
fn errors(
    plan: &SweepPlan,
    data: &BTreeMap<(usize, u32), LayerData>,
) -> Result<BTreeMap<(EngineKind, u32, u32), f64>> {
    let mut keys = plan.points();
    keys.sort_unstable_by_key(|&(e, q, mu, _)| (e, q, mu));
    keys.dedup_by_key(|&mut (e, q, mu, _)| (e, q, mu));
    keys.into_par_iter()
        .map(|(e, q, mu, k)| {
            let cfg = plan.config(e, mu, k)?;
            let mut worst = 0.0f64;
            for (i, layer) in plan.layers.iter().enumerate() {
                let d = &data[&(i, plan.layer_q(layer, q))];
                let y = run_dataflow(&cfg, &d.weights, &d.x)?.y;
                worst = worst.max(relative_error(&y, &d.reference));
            }
            Ok(((e, q, mu), worst))
        })
        .collect()
}

pub fn evaluate(plan: &SweepPlan, cost_model: &CostModel) -> Result<Vec<SweepRow>> {
    let errs = if plan.error_check {
        Some(errors(plan, &layer_data(plan)?)?)
    } else {
        None
    };
    plan.points()
        .into_par_iter()
        .map(|(engine, q, mu, k)| {
            let cfg = plan.config(engine, mu, k)?;
            let mut trace = EventTrace::default();
            let mut ops = 0;
            for layer in &plan.layers {
                let lq = plan.layer_q(layer, q);
                let dims = GemmDims::new(layer.rows, layer.cols, plan.batch, lq as usize);
                trace += trace_dataflow(&cfg, dims, plan.scalars_per_row(lq));
                ops += dims.ops();
            }
            let (cycles, energy, tops, tops_per_w, tops_per_mm2) =
                if engine == EngineKind::Reference {
                    (0, 0.0, 0.0, 0.0, 0.0)
                } else {
                    let m = metrics_for_ops(&trace, &cfg, cost_model, ops)?;
                    (m.cycles, m.energy, m.tops, m.tops_per_w, m.tops_per_mm2)
                };
            let power = if engine.uses_lut() {
                let pm = PePowerModel::from_cost_model(cost_model, mu)?;
                Some((pm.p_pe(k), pm.p_rac(k)))
            } else {
                None
            };
            Ok(SweepRow {
                engine,
                q: plan.effective_q(q),
                mu,
                k,
                cycles,
                energy,
                ops,
                tops,
                tops_per_w,
                tops_per_mm2,
                power,
                max_rel_error: errs.as_ref().map(|m| m[&(engine, q, mu)]),
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(common: &Common, args: &SweepArgs) -> Result<()> {
    let (plan, cfg) = SweepPlan::resolve(common, args)?;
    let cost_model = cfg.cost_model()?;
    let rows = evaluate(&plan, &cost_model)?;
    match &cfg.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| CliError::at(path, e))?;
            write_csv(&rows, file).map_err(|e| CliError::at(path, e))
        }
        None => {
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            super::emit(buf)
        }
    }
}
