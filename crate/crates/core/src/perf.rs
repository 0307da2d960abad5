//! Event accounting and the analytical cost model.
//!
//! Engines emit an [`EventTrace`]; a [`CostModel`] turns it into relative
//! energy, and together with the engine configuration into throughput and
//! efficiency figures. All absolute units are relative (an fp16 add costs 1.0
//! in the shipped sample model), so only ratios between runs are meaningful.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::{EngineConfig, EngineKind};
use crate::lut::{count_generator_adds, GeneratorKind};
use crate::numerics::FpFormat;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("cost model has no energy entry for counter `{0}`")]
    MissingCost(String),
    #[error("unknown counter `{0}` in cost model")]
    UnknownCounter(String),
    #[error("unknown resource `{0}` in cost model")]
    UnknownResource(String),
    #[error("missing area entry for resource `{0}`")]
    MissingResource(String),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("bank {bank} out of range for {num_banks} banks")]
    BankOutOfRange { bank: usize, num_banks: usize },
    #[error("thread {thread} out of range for {num_threads} threads")]
    ThreadOutOfRange { thread: usize, num_threads: usize },
    #[error("thread {0} issued more than one access in a cycle")]
    DuplicateThread(usize),
    #[error("invalid bank configuration: {0}")]
    InvalidBankSpec(String),
    #[error("trace has zero cycles")]
    ZeroCycles,
    #[error("invalid power model: {0}")]
    InvalidPowerModel(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PerfError> = std::result::Result<T, E>;

/// Counters produced by one dataflow run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTrace {
    pub lut_builds: u64,
    pub lut_gen_adds: u64,
    pub rac_reads: u64,
    pub fp_adds: u64,
    pub fp_muls: u64,
    pub int_adds: u64,
    pub int_muls: u64,
    pub dequant_ops: u64,
    pub align_ops: u64,
    pub weight_dram_bytes: u64,
    pub act_sram_reads: u64,
    pub psum_sram_accesses: u64,
    pub cycles: u64,
}

pub const COUNTER_NAMES: [&str; 13] = [
    "lut_builds",
    "lut_gen_adds",
    "rac_reads",
    "fp_adds",
    "fp_muls",
    "int_adds",
    "int_muls",
    "dequant_ops",
    "align_ops",
    "weight_dram_bytes",
    "act_sram_reads",
    "psum_sram_accesses",
    "cycles",
];

impl EventTrace {
    pub fn counters(&self) -> [(&'static str, u64); 13] {
        [
            ("lut_builds", self.lut_builds),
            ("lut_gen_adds", self.lut_gen_adds),
            ("rac_reads", self.rac_reads),
            ("fp_adds", self.fp_adds),
            ("fp_muls", self.fp_muls),
            ("int_adds", self.int_adds),
            ("int_muls", self.int_muls),
            ("dequant_ops", self.dequant_ops),
            ("align_ops", self.align_ops),
            ("weight_dram_bytes", self.weight_dram_bytes),
            ("act_sram_reads", self.act_sram_reads),
            ("psum_sram_accesses", self.psum_sram_accesses),
            ("cycles", self.cycles),
        ]
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.counters()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v)
    }

    /// Flat `{"counter": value}` JSON object.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain counters always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl AddAssign for EventTrace {
    fn add_assign(&mut self, o: Self) {
        self.lut_builds += o.lut_builds;
        self.lut_gen_adds += o.lut_gen_adds;
        self.rac_reads += o.rac_reads;
        self.fp_adds += o.fp_adds;
        self.fp_muls += o.fp_muls;
        self.int_adds += o.int_adds;
        self.int_muls += o.int_muls;
        self.dequant_ops += o.dequant_ops;
        self.align_ops += o.align_ops;
        self.weight_dram_bytes += o.weight_dram_bytes;
        self.act_sram_reads += o.act_sram_reads;
        self.psum_sram_accesses += o.psum_sram_accesses;
        self.cycles += o.cycles;
    }
}

impl Add for EventTrace {
    type Output = EventTrace;

    fn add(mut self, o: Self) -> EventTrace {
        self += o;
        self
    }
}

pub const RESOURCE_NAMES: [&str; 7] = [
    "fp_adder",
    "fp_mul",
    "int_adder",
    "int_mul",
    "lut_bit",
    "rac",
    "generator_adder",
];

/// Per-event energy and per-resource area constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub energy_per_event: BTreeMap<String, f64>,
    pub area_per_resource: BTreeMap<String, f64>,
    /// Fan-out penalty coefficient of a shared LUT.
    pub beta: f64,
    pub frequency_hz: f64,
}

const SAMPLE_COST_MODEL: &str = include_str!("../data/sample_cost_model.json");

impl CostModel {
    /// The shipped sample model (relative units, fp16 add = 1.0).
    pub fn sample() -> CostModel {
        CostModel::from_json(SAMPLE_COST_MODEL).expect("bundled sample cost model is valid")
    }

    pub fn sample_json() -> &'static str {
        SAMPLE_COST_MODEL
    }

    pub fn from_json(s: &str) -> Result<CostModel> {
        let cm: CostModel = serde_json::from_str(s)?;
        cm.validate()?;
        Ok(cm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CostModel> {
        CostModel::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let counters: HashSet<&str> = COUNTER_NAMES.into_iter().collect();
        for (name, &v) in &self.energy_per_event {
            if !counters.contains(name.as_str()) {
                return Err(PerfError::UnknownCounter(name.clone()));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidCostModel(format!(
                    "energy of `{name}` is {v}"
                )));
            }
        }
        let resources: HashSet<&str> = RESOURCE_NAMES.into_iter().collect();
        for (name, &v) in &self.area_per_resource {
            if !resources.contains(name.as_str()) {
                return Err(PerfError::UnknownResource(name.clone()));
            }
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidCostModel(format!(
                    "area of `{name}` is {v}"
                )));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(PerfError::InvalidCostModel(format!("beta = {}", self.beta)));
        }
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return Err(PerfError::InvalidCostModel(format!(
                "frequency_hz = {}",
                self.frequency_hz
            )));
        }
        Ok(())
    }

    pub fn energy_of(&self, counter: &str) -> Result<f64> {
        self.energy_per_event
            .get(counter)
            .copied()
            .ok_or_else(|| PerfError::MissingCost(counter.to_string()))
    }

    pub fn area_of(&self, resource: &str) -> Result<f64> {
        self.area_per_resource
            .get(resource)
            .copied()
            .ok_or_else(|| PerfError::MissingResource(resource.to_string()))
    }
}

/// `Σ counter × unit cost`; every counter must have a cost entry.
pub fn energy(trace: &EventTrace, cm: &CostModel) -> Result<f64> {
    trace
        .counters()
        .into_iter()
        .map(|(name, count)| Ok(count as f64 * cm.energy_of(name)?))
        .sum()
}

/// Problem shape of one GEMM: `m×n` weights at `q` bits against `n×batch` activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub batch: usize,
    pub q: usize,
}

impl GemmDims {
    pub fn new(m: usize, n: usize, batch: usize, q: usize) -> Self {
        Self { m, n, batch, q }
    }

    /// MAC-equivalent operation count used to normalise every engine.
    pub fn ops(&self) -> u64 {
        2 * self.m as u64 * self.n as u64 * self.batch as u64
    }
}

/// Closed-form cycle count of the weight-stationary schedule.
///
/// Every (row tile, column tile, pass, batch tile) visit costs its batch
/// columns plus one pipeline fill of `pe_rows + pe_cols − 1`. Bit-serial
/// engines make one pass per bit plane; fixed-precision engines make one.
pub fn cycles(cfg: &EngineConfig, m: usize, n: usize, batch: usize, q: usize) -> u64 {
    if cfg.kind == EngineKind::Reference {
        return 0;
    }
    let passes = if cfg.kind.is_bit_serial() { q } else { 1 } as u64;
    let row_tiles = m.div_ceil(cfg.tile_m()) as u64;
    let col_tiles = n.div_ceil(cfg.tile_n()) as u64;
    let batch_tiles = batch.div_ceil(cfg.tile_b(batch)) as u64;
    row_tiles * col_tiles * passes * (batch as u64 + batch_tiles * cfg.fill() as u64)
}

/// Weight bytes of an unquantized `m×n` matrix in `format`.
pub fn dense_weight_bytes(m: usize, n: usize, format: FpFormat) -> u64 {
    (m * n * format.bytes()) as u64
}

/// Power of one processing element holding a shared LUT and `k` RACs.
///
/// The LUT's power grows with its fan-out as `P_lut0·(1 + β·(k−1)²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PePowerModel {
    pub mu: u32,
    pub p_lut0: f64,
    pub p_rac0: f64,
    pub beta: f64,
}

pub const MAX_K: u32 = 256;

impl PePowerModel {
    pub fn new(mu: u32, p_lut0: f64, p_rac0: f64, beta: f64) -> Result<Self> {
        if ![p_lut0, p_rac0, beta]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(PerfError::InvalidPowerModel(format!(
                "p_lut0={p_lut0}, p_rac0={p_rac0}, beta={beta} must be finite and non-negative"
            )));
        }
        Ok(Self {
            mu,
            p_lut0,
            p_rac0,
            beta,
        })
    }

    /// LUT power is the per-cycle cost of one table build; RAC power the cost of one read.
    pub fn from_cost_model(cm: &CostModel, mu: u32) -> Result<Self> {
        let gen = count_generator_adds(mu, GeneratorKind::Tree) as f64;
        let p_lut0 = cm.energy_of("lut_builds")? + gen * cm.energy_of("lut_gen_adds")?;
        let p_rac0 = cm.energy_of("rac_reads")?;
        PePowerModel::new(mu, p_lut0, p_rac0, cm.beta)
    }

    pub fn p_lut(&self, k: u32) -> f64 {
        let fanout = (k as f64 - 1.0).max(0.0);
        self.p_lut0 * (1.0 + self.beta * fanout * fanout)
    }

    pub fn p_pe(&self, k: u32) -> f64 {
        self.p_lut(k) + k as f64 * self.p_rac0
    }

    pub fn p_rac(&self, k: u32) -> f64 {
        self.p_pe(k) / k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub k: u32,
    pub p_pe: f64,
    pub p_rac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurve {
    pub points: Vec<PowerPoint>,
    /// Smallest `k` attaining the minimum per-RAC power.
    pub argmin_k: u32,
}

/// Evaluates the PE power curve over `ks` (clipped to `[1, 256]`).
pub fn pe_power_curve(pm: &PePowerModel, ks: impl IntoIterator<Item = u32>) -> Result<PowerCurve> {
    let points: Vec<PowerPoint> = ks
        .into_iter()
        .filter(|k| (1..=MAX_K).contains(k))
        .map(|k| PowerPoint {
            k,
            p_pe: pm.p_pe(k),
            p_rac: pm.p_rac(k),
        })
        .collect();
    let best = points
        .iter()
        .min_by(|a, b| a.p_rac.total_cmp(&b.p_rac).then(a.k.cmp(&b.k)))
        .ok_or_else(|| PerfError::InvalidPowerModel("empty k range".into()))?;
    Ok(PowerCurve {
        argmin_k: best.k,
        points,
    })
}

/// RACs needed to cover `rows × cols` weights per cycle; independent of `k`.
pub fn required_racs(rows: usize, cols: usize, mu: u32) -> u64 {
    rows as u64 * cols.div_ceil(mu as usize) as u64
}

/// LUTs needed when each LUT is shared by `k` RACs.
pub fn lut_count_scaling(k: u32, total_racs: u64) -> u64 {
    total_racs.div_ceil(k.max(1) as u64)
}

/// Bank organisation of a register-file or shared-memory LUT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankSpec {
    pub num_banks: usize,
    pub num_threads: usize,
}

impl BankSpec {
    pub fn new(num_banks: usize, num_threads: usize) -> Result<Self> {
        if num_banks == 0 || num_threads == 0 {
            return Err(PerfError::InvalidBankSpec(format!(
                "{num_banks} banks, {num_threads} threads"
            )));
        }
        Ok(Self {
            num_banks,
            num_threads,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankAccess {
    pub thread: usize,
    pub bank: usize,
    pub address: u64,
}

/// Serialised cycles for a sequence of issue cycles.
///
/// Distinct addresses in one bank serialise; identical addresses are
/// broadcast in a single access. An issue cycle with no accesses costs nothing.
pub fn bank_conflict_sim(cycles: &[Vec<BankAccess>], spec: &BankSpec) -> Result<u64> {
    let mut total = 0;
    for accesses in cycles {
        let mut per_bank: BTreeMap<usize, HashSet<u64>> = BTreeMap::new();
        let mut seen = HashSet::new();
        for a in accesses {
            if a.bank >= spec.num_banks {
                return Err(PerfError::BankOutOfRange {
                    bank: a.bank,
                    num_banks: spec.num_banks,
                });
            }
            if a.thread >= spec.num_threads {
                return Err(PerfError::ThreadOutOfRange {
                    thread: a.thread,
                    num_threads: spec.num_threads,
                });
            }
            if !seen.insert(a.thread) {
                return Err(PerfError::DuplicateThread(a.thread));
            }
            per_bank.entry(a.bank).or_default().insert(a.address);
        }
        total += per_bank.values().map(|s| s.len() as u64).max().unwrap_or(0);
    }
    Ok(total)
}

/// Accesses of one cycle in which thread `t` reads LUT entry `keys[t]` from a
/// table whose consecutive entries are interleaved across banks.
pub fn lut_read_accesses(keys: &[u32], spec: &BankSpec) -> Vec<BankAccess> {
    keys.iter()
        .enumerate()
        .map(|(thread, &key)| BankAccess {
            thread,
            bank: key as usize % spec.num_banks,
            address: key as u64,
        })
        .collect()
}

/// Resource counts of one engine's PE array.
pub fn resource_counts(cfg: &EngineConfig) -> BTreeMap<&'static str, u64> {
    let pes = (cfg.pe_rows * cfg.pe_cols) as u64;
    let k = cfg.k as u64;
    let mu = cfg.mu as u64;
    let lanes = pes * k * mu;
    let mut counts = BTreeMap::new();
    match cfg.kind {
        EngineKind::Reference => {}
        EngineKind::Fpe => {
            counts.insert("fp_mul", lanes);
            counts.insert("fp_adder", lanes);
        }
        EngineKind::Figna => {
            counts.insert("int_mul", lanes);
            counts.insert("int_adder", lanes);
        }
        EngineKind::Ifpu => {
            counts.insert("int_adder", lanes);
        }
        EngineKind::FiglutF | EngineKind::FiglutI => {
            let entry_bits = match cfg.kind {
                EngineKind::FiglutF => cfg.lut_format().total_bits() as u64,
                _ => cfg.align_width as u64 + mu,
            };
            counts.insert("lut_bit", pes * (1u64 << (mu - 1)) * entry_bits);
            counts.insert("rac", pes * k);
            let adder = if cfg.kind == EngineKind::FiglutF {
                "fp_adder"
            } else {
                "int_adder"
            };
            counts.insert(adder, pes * k);
            counts.insert(
                "generator_adder",
                pes * count_generator_adds(cfg.mu, GeneratorKind::Tree),
            );
        }
    }
    counts
}

/// Σ resource count × unit area.
pub fn area(cfg: &EngineConfig, cm: &CostModel) -> Result<f64> {
    resource_counts(cfg)
        .into_iter()
        .map(|(name, count)| Ok(count as f64 * cm.area_of(name)?))
        .sum()
}

/// Throughput and efficiency of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ops: u64,
    pub cycles: u64,
    pub energy: f64,
    pub area: f64,
    pub tops: f64,
    pub tops_per_w: f64,
    pub tops_per_mm2: f64,
}

/// Derived metrics of a trace. Energy is in picojoule-scale units, so
/// `tops_per_w = ops / energy`.
pub fn metrics(
    trace: &EventTrace,
    cfg: &EngineConfig,
    cm: &CostModel,
    dims: GemmDims,
) -> Result<Metrics> {
    metrics_for_ops(trace, cfg, cm, dims.ops())
}

/// [`metrics`] for a trace covering `ops` operations, e.g. several layers summed.
pub fn metrics_for_ops(
    trace: &EventTrace,
    cfg: &EngineConfig,
    cm: &CostModel,
    ops: u64,
) -> Result<Metrics> {
    if trace.cycles == 0 {
        return Err(PerfError::ZeroCycles);
    }
    let seconds = trace.cycles as f64 / cm.frequency_hz;
    let tops = ops as f64 / seconds / 1e12;
    let e = energy(trace, cm)?;
    let a = area(cfg, cm)?;
    Ok(Metrics {
        ops,
        cycles: trace.cycles,
        energy: e,
        area: a,
        tops,
        tops_per_w: if e > 0.0 {
            ops as f64 / e
        } else {
            f64::INFINITY
        },
        tops_per_mm2: if a > 0.0 { tops / a } else { f64::INFINITY },
    })
}

/// Metrics divided by a baseline run's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMetrics {
    pub cycles: f64,
    pub energy: f64,
    pub tops: f64,
    pub tops_per_w: f64,
    pub tops_per_mm2: f64,
}

impl Metrics {
    pub fn relative_to(&self, base: &Metrics) -> RelativeMetrics {
        RelativeMetrics {
            cycles: self.cycles as f64 / base.cycles as f64,
            energy: self.energy / base.energy,
            tops: self.tops / base.tops,
            tops_per_w: self.tops_per_w / base.tops_per_w,
            tops_per_mm2: self.tops_per_mm2 / base.tops_per_mm2,
        }
    }
}
