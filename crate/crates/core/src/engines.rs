//! GEMM engines over quantized weights and the weight-stationary dataflow
//! that drives them.
//!
//! | engine      | weights      | inner product                                        |
//! |-------------|--------------|------------------------------------------------------|
//! | `reference` | any          | fp64 dense GEMM on dequantized weights               |
//! | `fpe`       | any          | dequantize to the activation format, FP MAC          |
//! | `ifpu`      | BCQ/uniform  | pre-aligned mantissas, per-plane integer add/sub     |
//! | `figna`     | uniform only | pre-aligned mantissas × integer codes                |
//! | `figlut_f`  | BCQ/uniform  | FP half-table per μ-chunk, read-accumulate per plane |
//! | `figlut_i`  | BCQ/uniform  | integer half-table over pre-aligned mantissas        |
//!
//! Uniform weights reach the BCQ engines through the exact uniform-to-BCQ
//! embedding. Every output element has a fixed reduction order, so results
//! do not depend on how rows are spread across threads.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bcq::{uniform_to_bcq, BcqMatrix, UniformQuant};
use crate::lut::{self, count_generator_adds, GeneratorKind, HalfFflut};
use crate::numerics::{exponent_of, pow2, FpFormat, Matrix};
use crate::perf::{EventTrace, GemmDims};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(
        "dimension mismatch: weights have {weight_cols} columns, activations have {act_rows} rows"
    )]
    Dimension { weight_cols: usize, act_rows: usize },
    #[error("engine {engine} does not accept {weights} weights")]
    IncompatibleWeights {
        engine: EngineKind,
        weights: &'static str,
    },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("non-finite activation {0}")]
    NonFinite(f64),
    #[error("empty activation block")]
    EmptyBlock,
    #[error("activation block exponent {0} is outside the alignable range")]
    AlignmentRange(i32),
    #[error("64-bit integer accumulator overflow")]
    AccumulatorOverflow,
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Reference,
    Fpe,
    Ifpu,
    Figna,
    FiglutF,
    FiglutI,
}

impl EngineKind {
    pub const ALL: [EngineKind; 6] = [
        EngineKind::Reference,
        EngineKind::Fpe,
        EngineKind::Ifpu,
        EngineKind::Figna,
        EngineKind::FiglutF,
        EngineKind::FiglutI,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            EngineKind::Reference => "reference",
            EngineKind::Fpe => "fpe",
            EngineKind::Ifpu => "ifpu",
            EngineKind::Figna => "figna",
            EngineKind::FiglutF => "figlut_f",
            EngineKind::FiglutI => "figlut_i",
        }
    }

    /// Processes one weight bit plane per pass.
    pub const fn is_bit_serial(self) -> bool {
        matches!(
            self,
            EngineKind::Ifpu | EngineKind::FiglutF | EngineKind::FiglutI
        )
    }

    pub const fn uses_lut(self) -> bool {
        matches!(self, EngineKind::FiglutF | EngineKind::FiglutI)
    }

    pub const fn accepts_bcq(self) -> bool {
        !matches!(self, EngineKind::Figna)
    }

    pub const fn uses_alignment(self) -> bool {
        matches!(
            self,
            EngineKind::Ifpu | EngineKind::Figna | EngineKind::FiglutI
        )
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown engine `{s}`"))
    }
}

fn default_mu() -> u32 {
    4
}
fn default_k() -> u32 {
    32
}
fn default_pe_rows() -> usize {
    8
}
fn default_pe_cols() -> usize {
    4
}
fn default_act() -> FpFormat {
    FpFormat::Fp16
}
fn default_accum() -> FpFormat {
    FpFormat::Fp32
}
fn default_align_width() -> u32 {
    24
}
fn default_kind() -> EngineKind {
    EngineKind::FiglutI
}

/// Engine selection plus the array, format and tiling parameters.
///
/// Tile sizes default to what the PE array consumes per cycle:
/// `tile_m = pe_rows·k` output rows and `tile_n = pe_cols·μ` input columns,
/// with the whole batch streamed per visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_kind")]
    pub kind: EngineKind,
    #[serde(default = "default_mu")]
    pub mu: u32,
    #[serde(default = "default_k")]
    pub k: u32,
    #[serde(default = "default_pe_rows")]
    pub pe_rows: usize,
    #[serde(default = "default_pe_cols")]
    pub pe_cols: usize,
    #[serde(default = "default_act")]
    pub act_format: FpFormat,
    #[serde(default = "default_accum")]
    pub accum_format: FpFormat,
    /// Storage format of FP LUT entries; `None` uses `accum_format`.
    #[serde(default)]
    pub lut_format: Option<FpFormat>,
    #[serde(default = "default_align_width")]
    pub align_width: u32,
    #[serde(default)]
    pub tile_m: Option<usize>,
    #[serde(default)]
    pub tile_n: Option<usize>,
    #[serde(default)]
    pub tile_b: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig::new(default_kind())
    }
}

impl EngineConfig {
    pub fn new(kind: EngineKind) -> Self {
        Self {
            kind,
            mu: default_mu(),
            k: default_k(),
            pe_rows: default_pe_rows(),
            pe_cols: default_pe_cols(),
            act_format: default_act(),
            accum_format: default_accum(),
            lut_format: None,
            align_width: default_align_width(),
            tile_m: None,
            tile_n: None,
            tile_b: None,
        }
    }

    pub fn with_kind(&self, kind: EngineKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    pub fn tile_m(&self) -> usize {
        self.tile_m.unwrap_or(self.pe_rows * self.k as usize)
    }

    pub fn tile_n(&self) -> usize {
        self.tile_n.unwrap_or(self.pe_cols * self.mu as usize)
    }

    pub fn tile_b(&self, batch: usize) -> usize {
        self.tile_b.unwrap_or(batch).max(1)
    }

    /// Pipeline fill/drain depth of the PE array.
    pub fn fill(&self) -> usize {
        self.pe_rows + self.pe_cols - 1
    }

    pub fn lut_format(&self) -> FpFormat {
        self.lut_format.unwrap_or(self.accum_format)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EngineError::Config(msg));
        if !(lut::MIN_MU..=lut::MAX_MU).contains(&self.mu) {
            return bad(format!("mu = {} outside [2, 8]", self.mu));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.pe_rows == 0 || self.pe_cols == 0 {
            return bad("PE array must be non-empty".into());
        }
        if !(8..=63).contains(&self.align_width) {
            return bad(format!(
                "align_width = {} outside [8, 63]",
                self.align_width
            ));
        }
        if self.kind == EngineKind::FiglutI {
            let limit = 62 - (self.mu as f64).log2().ceil() as u32;
            if self.align_width > limit {
                return bad(format!(
                    "align_width = {} exceeds {limit}, integer LUT entries would not fit in 64 bits",
                    self.align_width
                ));
            }
        }
        for (name, t) in [
            ("tile_m", self.tile_m),
            ("tile_n", self.tile_n),
            ("tile_b", self.tile_b),
        ] {
            if t == Some(0) {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.kind.uses_lut() && !self.tile_n().is_multiple_of(self.mu as usize) {
            return bad(format!(
                "tile_n = {} must be a multiple of mu = {}",
                self.tile_n(),
                self.mu
            ));
        }
        Ok(())
    }
}

/// Quantized weights in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Bcq(BcqMatrix),
    Uniform(UniformQuant),
}

impl Weights {
    pub fn rows(&self) -> usize {
        match self {
            Weights::Bcq(b) => b.rows(),
            Weights::Uniform(u) => u.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Weights::Bcq(b) => b.cols(),
            Weights::Uniform(u) => u.cols(),
        }
    }

    pub fn q(&self) -> usize {
        match self {
            Weights::Bcq(b) => b.q(),
            Weights::Uniform(u) => u.q() as usize,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Weights::Bcq(_) => "BCQ",
            Weights::Uniform(_) => "uniform",
        }
    }

    /// Per-row scalars fetched with the weights: `q` scales and an offset for
    /// BCQ, a scale and a zero-point for uniform weights.
    pub fn scalars_per_row(&self) -> usize {
        match self {
            Weights::Bcq(b) => b.q() + 1,
            Weights::Uniform(_) => 2,
        }
    }

    #[inline]
    pub fn value(&self, r: usize, c: usize) -> f64 {
        match self {
            Weights::Bcq(b) => b.value(r, c),
            Weights::Uniform(u) => u.value(r, c),
        }
    }

    pub fn as_bcq(&self) -> Cow<'_, BcqMatrix> {
        match self {
            Weights::Bcq(b) => Cow::Borrowed(b),
            Weights::Uniform(u) => Cow::Owned(uniform_to_bcq(u)),
        }
    }

    pub fn dims(&self, batch: usize) -> GemmDims {
        GemmDims::new(self.rows(), self.cols(), batch, self.q())
    }
}

impl From<BcqMatrix> for Weights {
    fn from(b: BcqMatrix) -> Self {
        Weights::Bcq(b)
    }
}

impl From<UniformQuant> for Weights {
    fn from(u: UniformQuant) -> Self {
        Weights::Uniform(u)
    }
}

/// Activations sharing one exponent, held as signed integer mantissas.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBlock {
    pub shared_exponent: i32,
    pub width: u32,
    pub mantissas: Vec<i64>,
    /// Value of one mantissa LSB: `2^(shared_exponent − (width − 1))`.
    pub scale: f64,
}

impl AlignedBlock {
    pub fn reconstruct(&self, j: usize) -> f64 {
        self.mantissas[j] as f64 * self.scale
    }
}

/// Aligns a block to its largest exponent with `width`-bit mantissas,
/// rounding shifted-out bits to nearest even.
pub fn pre_align(block: &[f64], width: u32) -> Result<AlignedBlock> {
    if block.is_empty() {
        return Err(EngineError::EmptyBlock);
    }
    if let Some(&bad) = block.iter().find(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite(bad));
    }
    if !(2..=63).contains(&width) {
        return Err(EngineError::Config(format!(
            "alignment width {width} outside [2, 63]"
        )));
    }
    let max_abs = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(AlignedBlock {
            shared_exponent: 0,
            width,
            mantissas: vec![0; block.len()],
            scale: pow2(1 - width as i32),
        });
    }
    let mut e_max = exponent_of(max_abs);
    let limit = (1u64 << width) as f64;
    loop {
        let lsb_exp = e_max - (width as i32 - 1);
        if lsb_exp < -1074 {
            return Err(EngineError::AlignmentRange(e_max));
        }
        let scale = pow2(lsb_exp);
        let scaled: Vec<f64> = block
            .iter()
            .map(|&x| (x / scale).round_ties_even())
            .collect();
        // rounding can carry the largest element up to 2^width; realign one exponent higher
        if scaled.iter().any(|m| m.abs() >= limit) {
            e_max += 1;
            continue;
        }
        return Ok(AlignedBlock {
            shared_exponent: e_max,
            width,
            mantissas: scaled.into_iter().map(|m| m as i64).collect(),
            scale,
        });
    }
}

/// Output of one engine run.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmResult {
    /// `m × batch`, in the accumulation format (fp64 for the reference engine).
    pub y: Matrix,
    pub trace: EventTrace,
}

impl GemmResult {
    pub fn narrowed(&self, format: FpFormat) -> Matrix {
        self.y.to_format(format)
    }
}

/// One step of the weight-stationary schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileVisit {
    pub row0: usize,
    pub rows: usize,
    pub col_tile: usize,
    pub col0: usize,
    pub cols: usize,
    /// Bit plane for bit-serial engines, always 0 otherwise.
    pub pass: usize,
    pub batch0: usize,
    pub batch_cols: usize,
}

/// Visits in execution order: row tile, column tile, pass (bit plane), batch tile.
///
/// A weight tile stays resident while each of its planes is loaded in turn and
/// every batch tile of activations is streamed past it.
pub fn schedule(cfg: &EngineConfig, dims: GemmDims) -> impl Iterator<Item = TileVisit> + '_ {
    let passes = if cfg.kind.is_bit_serial() { dims.q } else { 1 };
    let (tm, tn, tb) = (cfg.tile_m(), cfg.tile_n(), cfg.tile_b(dims.batch));
    (0..dims.m).step_by(tm).flat_map(move |row0| {
        (0..dims.n)
            .step_by(tn)
            .enumerate()
            .flat_map(move |(col_tile, col0)| {
                (0..passes).flat_map(move |pass| {
                    (0..dims.batch).step_by(tb).map(move |batch0| TileVisit {
                        row0,
                        rows: tm.min(dims.m - row0),
                        col_tile,
                        col0,
                        cols: tn.min(dims.n - col0),
                        pass,
                        batch0,
                        batch_cols: tb.min(dims.batch - batch0),
                    })
                })
            })
    })
}

/// Event counts of running `cfg` on a problem of shape `dims`.
///
/// `scalars_per_row` is the number of per-row weight scalars fetched with the
/// first plane of each row tile (see [`Weights::scalars_per_row`]).
pub fn trace_dataflow(cfg: &EngineConfig, dims: GemmDims, scalars_per_row: usize) -> EventTrace {
    let mut t = EventTrace::default();
    if cfg.kind == EngineKind::Reference {
        return t;
    }
    let mu = cfg.mu as usize;
    let k = cfg.k as usize;
    let bits_per_pass = if cfg.kind.is_bit_serial() { 1 } else { dims.q } as u64;
    let gen_adds = count_generator_adds(cfg.mu, GeneratorKind::Tree);
    let act_bytes = cfg.act_format.bytes() as u64;
    let fill = cfg.fill() as u64;

    for v in schedule(cfg, dims) {
        let (tm, tn, bc) = (v.rows as u64, v.cols as u64, v.batch_cols as u64);
        t.cycles += bc + fill;
        t.act_sram_reads += tn * bc;
        t.psum_sram_accesses += 2 * tm * bc;
        if v.batch0 == 0 {
            t.weight_dram_bytes += (tm * tn * bits_per_pass).div_ceil(8);
            if v.col_tile == 0 && v.pass == 0 {
                t.weight_dram_bytes += tm * scalars_per_row as u64 * act_bytes;
            }
            if cfg.kind == EngineKind::Fpe {
                t.dequant_ops += tm * tn;
            }
        }
        if cfg.kind.uses_alignment() && v.pass == 0 {
            t.align_ops += tn * bc;
        }
        let chunks = v.cols.div_ceil(mu) as u64;
        match cfg.kind {
            EngineKind::Reference => {}
            EngineKind::Fpe => {
                t.fp_muls += tm * tn * bc;
                t.fp_adds += tm * tn * bc;
            }
            EngineKind::Figna => {
                t.int_muls += tm * tn * bc;
                t.int_adds += tm * tn * bc;
            }
            EngineKind::Ifpu => {
                t.int_adds += tm * tn * bc;
            }
            EngineKind::FiglutF | EngineKind::FiglutI => {
                let builds = bc * chunks * v.rows.div_ceil(k) as u64;
                t.lut_builds += builds;
                t.lut_gen_adds += builds * gen_adds;
                t.rac_reads += tm * chunks * bc;
                if cfg.kind == EngineKind::FiglutF {
                    t.fp_adds += tm * chunks * bc;
                } else {
                    t.int_adds += tm * chunks * bc;
                }
            }
        }
    }

    // epilogue: per-output rescaling and offset
    let (m, n, b, q) = (
        dims.m as u64,
        dims.n as u64,
        dims.batch as u64,
        dims.q as u64,
    );
    let col_tiles = dims.n.div_ceil(cfg.tile_n()) as u64;
    match cfg.kind {
        EngineKind::Reference | EngineKind::Fpe => {}
        EngineKind::Figna => {
            t.fp_muls += m * b * col_tiles;
            t.fp_adds += m * b * col_tiles;
        }
        EngineKind::Ifpu | EngineKind::FiglutF | EngineKind::FiglutI => {
            if cfg.kind != EngineKind::FiglutF {
                // integer plane sums converted and chained across column tiles
                t.fp_adds += m * b * q * col_tiles;
            }
            t.fp_muls += m * b * (q + 1);
            t.fp_adds += m * b * (q + 1) + n * b;
        }
    }
    t
}

/// Runs `cfg.kind` on `weights × x` under the weight-stationary dataflow.
pub fn run_dataflow(cfg: &EngineConfig, weights: &Weights, x: &Matrix) -> Result<GemmResult> {
    cfg.validate()?;
    if weights.cols() != x.rows() {
        return Err(EngineError::Dimension {
            weight_cols: weights.cols(),
            act_rows: x.rows(),
        });
    }
    if !cfg.kind.accepts_bcq() && matches!(weights, Weights::Bcq(_)) {
        return Err(EngineError::IncompatibleWeights {
            engine: cfg.kind,
            weights: weights.kind_name(),
        });
    }
    if let Some(&bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite(bad));
    }
    let dims = weights.dims(x.cols());
    let trace = trace_dataflow(cfg, dims, weights.scalars_per_row());

    let (y, format) = match cfg.kind {
        EngineKind::Reference => (reference_gemm(weights, x), FpFormat::Fp64),
        kind => {
            let xa = x.to_format(cfg.act_format);
            let y = match kind {
                EngineKind::Fpe => fpe_gemm(cfg, weights, &xa),
                EngineKind::Ifpu => aligned_bitserial_gemm(cfg, &weights.as_bcq(), &xa, false)?,
                EngineKind::FiglutI => aligned_bitserial_gemm(cfg, &weights.as_bcq(), &xa, true)?,
                EngineKind::FiglutF => figlut_f_gemm(cfg, &weights.as_bcq(), &xa),
                EngineKind::Figna => match weights {
                    Weights::Uniform(u) => figna_gemm(cfg, u, &xa)?,
                    Weights::Bcq(_) => unreachable!("rejected above"),
                },
                EngineKind::Reference => unreachable!(),
            };
            (y, cfg.accum_format)
        }
    };
    let y = Matrix::new(dims.m, dims.batch, format, y)
        .expect("engine outputs are rounded to their format");
    Ok(GemmResult { y, trace })
}

/// Alias of [`run_dataflow`].
pub fn gemm(cfg: &EngineConfig, weights: &Weights, x: &Matrix) -> Result<GemmResult> {
    run_dataflow(cfg, weights, x)
}

/// Row-major `m × batch` output built row by row in parallel.
fn par_rows(m: usize, batch: usize, row: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let mut y = vec![0.0; m * batch];
    y.par_chunks_mut(batch)
        .enumerate()
        .for_each(|(r, out)| row(r, out));
    y
}

fn par_rows_fallible(
    m: usize,
    batch: usize,
    row: impl Fn(usize, &mut [f64]) -> Result<()> + Sync,
) -> Result<Vec<f64>> {
    let mut y = vec![0.0; m * batch];
    y.par_chunks_mut(batch)
        .enumerate()
        .try_for_each(|(r, out)| row(r, out))?;
    Ok(y)
}

fn columns(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.cols()).map(|b| x.column(b)).collect()
}

/// Dense fp64 GEMM on the dequantized weights.
pub fn reference_gemm(weights: &Weights, x: &Matrix) -> Vec<f64> {
    let cols = columns(x);
    par_rows(weights.rows(), x.cols(), |r, out| {
        for (b, xb) in cols.iter().enumerate() {
            out[b] = xb
                .iter()
                .enumerate()
                .map(|(c, &xv)| weights.value(r, c) * xv)
                .sum();
        }
    })
}

/// Sequential `Σ x` in `format`.
fn column_sum(xs: &[f64], format: FpFormat) -> f64 {
    xs.iter().fold(0.0, |acc, &v| format.add(acc, v))
}

/// `Σ_i α_i·acc_i + z·Σx`, chained in `accum`.
fn scale_planes(bq: &BcqMatrix, r: usize, plane_sums: &[f64], sum_x: f64, accum: FpFormat) -> f64 {
    let mut out = 0.0;
    for (i, &acc) in plane_sums.iter().enumerate() {
        out = accum.add(out, accum.mul(accum.round(bq.alpha(i, r)), acc));
    }
    accum.add(out, accum.mul(accum.round(bq.offset()[r]), sum_x))
}

fn fpe_gemm(cfg: &EngineConfig, weights: &Weights, xa: &Matrix) -> Vec<f64> {
    let (act, accum) = (cfg.act_format, cfg.accum_format);
    let cols = columns(xa);
    par_rows(weights.rows(), xa.cols(), |r, out| {
        let w: Vec<f64> = (0..weights.cols())
            .map(|c| act.round(weights.value(r, c)))
            .collect();
        for (b, xb) in cols.iter().enumerate() {
            out[b] = w
                .iter()
                .zip(xb)
                .fold(0.0, |acc, (&wv, &xv)| accum.add(acc, accum.mul(wv, xv)));
        }
    })
}

/// Column tiles of one activation column, each aligned to its own exponent.
fn align_tiles(xb: &[f64], tile_n: usize, width: u32) -> Result<Vec<AlignedBlock>> {
    xb.chunks(tile_n).map(|blk| pre_align(blk, width)).collect()
}

/// `ifpu` (`use_lut = false`) and `figlut_i` (`use_lut = true`).
///
/// Both produce the same integer plane sums per column tile; they differ in
/// whether the sum is gathered by per-element add/sub or by half-table reads.
fn aligned_bitserial_gemm(
    cfg: &EngineConfig,
    bq: &BcqMatrix,
    xa: &Matrix,
    use_lut: bool,
) -> Result<Vec<f64>> {
    let accum = cfg.accum_format;
    let mu = cfg.mu as usize;
    let tile_n = cfg.tile_n();
    let q = bq.q();
    let cols = columns(xa);
    let aligned: Vec<Vec<AlignedBlock>> = cols
        .iter()
        .map(|xb| align_tiles(xb, tile_n, cfg.align_width))
        .collect::<Result<_>>()?;
    let sums: Vec<f64> = cols.iter().map(|xb| column_sum(xb, accum)).collect();
    // integer half tables per (batch column, global chunk); tile_n is a multiple of mu
    let tables: Vec<Vec<lut::IntHalfFflut>> = if use_lut {
        aligned
            .iter()
            .map(|tiles| {
                tiles
                    .iter()
                    .flat_map(|blk| blk.mantissas.chunks(mu))
                    .map(|chunk| {
                        let mut padded = chunk.to_vec();
                        padded.resize(mu, 0);
                        lut::build_int_hfflut(&padded).expect("mu validated").0
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    par_rows_fallible(bq.rows(), xa.cols(), |r, out| {
        let keys: Vec<Vec<u32>> = if use_lut {
            row_keys(bq, r, mu)
        } else {
            Vec::new()
        };
        for (b, tiles) in aligned.iter().enumerate() {
            let mut plane_sums = vec![0.0; q];
            for (t, blk) in tiles.iter().enumerate() {
                let col0 = t * tile_n;
                for (i, ps) in plane_sums.iter_mut().enumerate() {
                    let acc = if use_lut {
                        let chunk0 = col0 / mu;
                        let n_chunks = blk.mantissas.len().div_ceil(mu);
                        (chunk0..chunk0 + n_chunks).try_fold(0i64, |acc, g| {
                            acc.checked_add(tables[b][g].read(keys[i][g]))
                        })
                    } else {
                        let plane = bq.plane(i).row(r);
                        blk.mantissas
                            .iter()
                            .enumerate()
                            .try_fold(0i64, |acc, (j, &m)| {
                                if plane[col0 + j] {
                                    acc.checked_add(m)
                                } else {
                                    acc.checked_sub(m)
                                }
                            })
                    }
                    .ok_or(EngineError::AccumulatorOverflow)?;
                    *ps = accum.add(*ps, accum.round(acc as f64 * blk.scale));
                }
            }
            out[b] = scale_planes(bq, r, &plane_sums, sums[b], accum);
        }
        Ok(())
    })
}

/// `keys[plane][chunk]` for row `r`; padding columns past `n` read as `+1`.
fn row_keys(bq: &BcqMatrix, r: usize, mu: usize) -> Vec<Vec<u32>> {
    let n = bq.cols();
    bq.planes()
        .iter()
        .map(|p| {
            let row = p.row(r);
            (0..n.div_ceil(mu))
                .map(|g| {
                    (0..mu).fold(0u32, |key, j| {
                        let c = g * mu + j;
                        (key << 1) | (c >= n || row[c]) as u32
                    })
                })
                .collect()
        })
        .collect()
}

fn figlut_f_gemm(cfg: &EngineConfig, bq: &BcqMatrix, xa: &Matrix) -> Vec<f64> {
    let accum = cfg.accum_format;
    let lut_format = cfg.lut_format();
    let mu = cfg.mu as usize;
    let cols = columns(xa);
    let sums: Vec<f64> = cols.iter().map(|xb| column_sum(xb, accum)).collect();
    let tables: Vec<Vec<HalfFflut>> = cols
        .iter()
        .map(|xb| {
            xb.chunks(mu)
                .map(|chunk| {
                    let mut padded = chunk.to_vec();
                    padded.resize(mu, 0.0);
                    lut::build_hfflut_generator(&padded, lut_format)
                        .expect("mu validated")
                        .0
                })
                .collect()
        })
        .collect();
    par_rows(bq.rows(), xa.cols(), |r, out| {
        let keys = row_keys(bq, r, mu);
        for (b, tabs) in tables.iter().enumerate() {
            let plane_sums: Vec<f64> = keys
                .iter()
                .map(|plane_keys| {
                    plane_keys.iter().zip(tabs).fold(0.0, |acc, (&key, tab)| {
                        accum.add(acc, lut::read_half_unchecked(tab, key))
                    })
                })
                .collect();
            out[b] = scale_planes(bq, r, &plane_sums, sums[b], accum);
        }
    })
}

fn figna_gemm(cfg: &EngineConfig, u: &UniformQuant, xa: &Matrix) -> Result<Vec<f64>> {
    let accum = cfg.accum_format;
    let tile_n = cfg.tile_n();
    let aligned: Vec<Vec<AlignedBlock>> = columns(xa)
        .iter()
        .map(|xb| align_tiles(xb, tile_n, cfg.align_width))
        .collect::<Result<_>>()?;
    par_rows_fallible(u.rows(), xa.cols(), |r, out| {
        let (delta, zero) = (u.scale()[r], u.zero()[r]);
        for (b, tiles) in aligned.iter().enumerate() {
            let mut acc = 0.0;
            for (t, blk) in tiles.iter().enumerate() {
                let col0 = t * tile_n;
                let mut dot = 0i64;
                let mut msum = 0i64;
                for (j, &m) in blk.mantissas.iter().enumerate() {
                    let code = u.code(r, col0 + j) as i64;
                    dot = m
                        .checked_mul(code)
                        .and_then(|p| dot.checked_add(p))
                        .ok_or(EngineError::AccumulatorOverflow)?;
                    msum = msum
                        .checked_add(m)
                        .ok_or(EngineError::AccumulatorOverflow)?;
                }
                // Σ m·(c − zero) with the fractional zero-point folded into one rescale
                let centered = dot as f64 - zero * msum as f64;
                acc = accum.add(acc, accum.round(centered * (delta * blk.scale)));
            }
            out[b] = acc;
        }
        Ok(())
    })
}

/// Grouped-accumulation oracle for `figlut_f`.
///
/// Per plane, each row's signed activation sums are formed directly from the
/// weight signs in consecutive groups of `μ` (zero-padded at the tail), each
/// group rounded into `lut_format` with the pairing `(±x1 ± x2) + (±x3 ± x4)`
/// for `μ = 4` and left to right otherwise. Group sums are accumulated in
/// order in `accum_format`, then scaled and offset. No table or key is used.
pub fn grouped_reference(
    bq: &BcqMatrix,
    x: &Matrix,
    mu: usize,
    act_format: FpFormat,
    lut_format: FpFormat,
    accum_format: FpFormat,
) -> Result<Matrix> {
    if bq.cols() != x.rows() {
        return Err(EngineError::Dimension {
            weight_cols: bq.cols(),
            act_rows: x.rows(),
        });
    }
    if !(lut::MIN_MU as usize..=lut::MAX_MU as usize).contains(&mu) {
        return Err(EngineError::Config(format!("mu = {mu} outside [2, 8]")));
    }
    let n = bq.cols();
    let padded_n = n.div_ceil(mu) * mu;
    let mut data = Vec::with_capacity(bq.rows() * x.cols());
    for r in 0..bq.rows() {
        for b in 0..x.cols() {
            let xs: Vec<f64> = (0..padded_n)
                .map(|c| {
                    if c < n {
                        act_format.round(x.get(c, b))
                    } else {
                        0.0
                    }
                })
                .collect();
            let signed = |plane: usize, c: usize| {
                let v = lut_format.round(xs[c]);
                if c >= n || bq.plane(plane).get(r, c) {
                    v
                } else {
                    -v
                }
            };
            let mut out = 0.0;
            for i in 0..bq.q() {
                let mut acc = 0.0;
                for g in (0..padded_n).step_by(mu) {
                    let group = if mu == 4 {
                        let hi = lut_format.add(signed(i, g), signed(i, g + 1));
                        let lo = lut_format.add(signed(i, g + 2), signed(i, g + 3));
                        lut_format.add(hi, lo)
                    } else {
                        (g + 1..g + mu).fold(signed(i, g), |s, c| lut_format.add(s, signed(i, c)))
                    };
                    acc = accum_format.add(acc, group);
                }
                out = accum_format.add(
                    out,
                    accum_format.mul(accum_format.round(bq.alpha(i, r)), acc),
                );
            }
            let sum_x = xs[..n].iter().fold(0.0, |s, &v| accum_format.add(s, v));
            out = accum_format.add(
                out,
                accum_format.mul(accum_format.round(bq.offset()[r]), sum_x),
            );
            data.push(out);
        }
    }
    Ok(Matrix::new(bq.rows(), x.cols(), accum_format, data)
        .expect("values rounded into accum_format"))
}

/// `max |y − reference| / max |reference|`; zero when both are zero.
pub fn relative_error(y: &Matrix, reference: &Matrix) -> f64 {
    let num = y
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let den = reference.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}
