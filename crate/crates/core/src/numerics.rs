//! Floating-point format emulation, dense matrices, seeded data generation and
//! the `FGLT` binary matrix file format.
//!
//! Every value is carried as an `f64`; narrower formats are emulated by
//! rounding at format boundaries with [`round_to_format`].

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("matrix must have at least one row and one column (got {rows}x{cols})")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("element {index} ({value}) is not representable in {format}")]
    NotRepresentable {
        index: usize,
        value: f64,
        format: FpFormat,
    },
    #[error("bad magic {0:?}, expected \"FGLT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown format code {0}")]
    UnknownFormatCode(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// IEEE-754 style binary interchange formats emulated by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpFormat {
    Fp16,
    Bf16,
    Fp32,
    Fp64,
}

impl FpFormat {
    pub const ALL: [FpFormat; 4] = [
        FpFormat::Fp16,
        FpFormat::Bf16,
        FpFormat::Fp32,
        FpFormat::Fp64,
    ];

    pub const fn exponent_bits(self) -> u32 {
        match self {
            FpFormat::Fp16 => 5,
            FpFormat::Bf16 | FpFormat::Fp32 => 8,
            FpFormat::Fp64 => 11,
        }
    }

    /// Explicit fraction bits (the hidden bit is not counted).
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            FpFormat::Fp16 => 10,
            FpFormat::Bf16 => 7,
            FpFormat::Fp32 => 23,
            FpFormat::Fp64 => 52,
        }
    }

    pub const fn total_bits(self) -> u32 {
        1 + self.exponent_bits() + self.mantissa_bits()
    }

    pub const fn bytes(self) -> usize {
        (self.total_bits() / 8) as usize
    }

    pub const fn bias(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    /// Exponent of the smallest normal number.
    pub const fn min_exponent(self) -> i32 {
        1 - self.bias()
    }

    /// Exponent of the largest finite number.
    pub const fn max_exponent(self) -> i32 {
        self.bias()
    }

    pub fn max_finite(self) -> f64 {
        let m = self.mantissa_bits() as i32;
        (2.0 - pow2(-m)) * pow2(self.max_exponent())
    }

    /// Code used by the `FGLT` file header.
    pub const fn code(self) -> u8 {
        match self {
            FpFormat::Fp16 => 0,
            FpFormat::Bf16 => 1,
            FpFormat::Fp32 => 2,
            FpFormat::Fp64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FpFormat::Fp16),
            1 => Some(FpFormat::Bf16),
            2 => Some(FpFormat::Fp32),
            3 => Some(FpFormat::Fp64),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            FpFormat::Fp16 => "fp16",
            FpFormat::Bf16 => "bf16",
            FpFormat::Fp32 => "fp32",
            FpFormat::Fp64 => "fp64",
        }
    }

    /// Round `value` into this format (round-to-nearest-even).
    #[inline]
    pub fn round(self, value: f64) -> f64 {
        round_to_format(value, self)
    }

    /// Sum of two values rounded into this format.
    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        round_to_format(a + b, self)
    }

    /// Product of two values rounded into this format.
    ///
    /// The fp64 product is itself rounded, so for fp64 operands this is a
    /// single IEEE multiply. For narrower formats the double rounding is
    /// harmless: products of two values with at most 24 significant bits
    /// are exact in fp64.
    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        round_to_format(a * b, self)
    }

    pub fn is_representable(self, value: f64) -> bool {
        value.is_nan() || round_to_format(value, self).to_bits() == value.to_bits()
    }

    /// Unit in the last place of `value` in this format.
    pub fn ulp(self, value: f64) -> f64 {
        let m = self.mantissa_bits() as i32;
        let a = value.abs();
        if a == 0.0 || !a.is_finite() {
            return pow2(self.min_exponent() - m);
        }
        let e = exponent_of(a).max(self.min_exponent());
        pow2(e - m)
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FpFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "f16" | "half" => Ok(FpFormat::Fp16),
            "bf16" => Ok(FpFormat::Bf16),
            "fp32" | "f32" => Ok(FpFormat::Fp32),
            "fp64" | "f64" => Ok(FpFormat::Fp64),
            other => Err(format!("unknown floating-point format `{other}`")),
        }
    }
}

/// Exact power of two for any exponent reachable from the emulated formats.
#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        // fp64 subnormal range
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// floor(log2(|a|)) for finite non-zero `a`, including fp64 subnormals.
#[inline]
pub(crate) fn exponent_of(a: f64) -> i32 {
    let bits = a.abs().to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let frac = bits & ((1u64 << 52) - 1);
        -1074 + (63 - frac.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

/// Round `value` to the nearest value representable in `format`, ties to even.
///
/// Overflow saturates to infinity, subnormals are kept and NaN propagates.
pub fn round_to_format(value: f64, format: FpFormat) -> f64 {
    if format == FpFormat::Fp64 || value == 0.0 || !value.is_finite() {
        return value;
    }
    let m = format.mantissa_bits() as i32;
    let a = value.abs();
    let e = exponent_of(a).max(format.min_exponent());
    let quantum = pow2(e - m);
    // a / quantum is exact: both are binary and the quotient has < 2^(m+2) magnitude
    // or lies below the quantum for values far under the subnormal range.
    let scaled = a / quantum;
    let rounded = scaled.round_ties_even() * quantum;
    let out = if rounded > format.max_finite() {
        f64::INFINITY
    } else {
        rounded
    };
    out.copysign(value)
}

/// Raw bit encoding of a value already representable in `format`.
pub fn encode_bits(value: f64, format: FpFormat) -> u64 {
    match format {
        FpFormat::Fp64 => return value.to_bits(),
        FpFormat::Fp32 => return (value as f32).to_bits() as u64,
        _ => {}
    }
    let value = round_to_format(value, format);
    let eb = format.exponent_bits();
    let mb = format.mantissa_bits();
    let sign = (value.is_sign_negative() as u64) << (eb + mb);
    let exp_mask = (1u64 << eb) - 1;
    if value.is_nan() {
        return sign | (exp_mask << mb) | (1u64 << (mb - 1));
    }
    let a = value.abs();
    if a.is_infinite() {
        return sign | (exp_mask << mb);
    }
    if a == 0.0 {
        return sign;
    }
    let e = exponent_of(a);
    if e < format.min_exponent() {
        let frac = (a / pow2(format.min_exponent() - mb as i32)) as u64;
        sign | frac
    } else {
        let biased = (e + format.bias()) as u64;
        let frac = (a / pow2(e - mb as i32)) as u64 - (1u64 << mb);
        sign | (biased << mb) | frac
    }
}

/// Inverse of [`encode_bits`].
pub fn decode_bits(bits: u64, format: FpFormat) -> f64 {
    match format {
        FpFormat::Fp64 => return f64::from_bits(bits),
        FpFormat::Fp32 => return f32::from_bits(bits as u32) as f64,
        _ => {}
    }
    let eb = format.exponent_bits();
    let mb = format.mantissa_bits();
    let negative = (bits >> (eb + mb)) & 1 == 1;
    let biased = ((bits >> mb) & ((1u64 << eb) - 1)) as i32;
    let frac = bits & ((1u64 << mb) - 1);
    let mag = if biased == 0 {
        frac as f64 * pow2(format.min_exponent() - mb as i32)
    } else if biased == (1 << eb) - 1 {
        if frac == 0 {
            f64::INFINITY
        } else {
            f64::NAN
        }
    } else {
        ((1u64 << mb) | frac) as f64 * pow2(biased - format.bias() - mb as i32)
    };
    if negative {
        -mag
    } else {
        mag
    }
}

/// Row-major dense matrix whose elements are representable in `format`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    format: FpFormat,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting elements that are not exactly representable.
    pub fn new(rows: usize, cols: usize, format: FpFormat, data: Vec<f64>) -> Result<Self> {
        check_shape(rows, cols, data.len())?;
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !format.is_representable(**v))
        {
            return Err(NumericsError::NotRepresentable {
                index,
                value,
                format,
            });
        }
        Ok(Self {
            rows,
            cols,
            format,
            data,
        })
    }

    /// Builds a matrix, rounding each element into `format`.
    pub fn from_rounded(
        rows: usize,
        cols: usize,
        format: FpFormat,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        check_shape(rows, cols, data.len())?;
        for v in &mut data {
            *v = round_to_format(*v, format);
        }
        Ok(Self {
            rows,
            cols,
            format,
            data,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        format: FpFormat,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_rounded(rows, cols, format, data)
    }

    pub fn zeros(rows: usize, cols: usize, format: FpFormat) -> Result<Self> {
        Self::new(rows, cols, format, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> FpFormat {
        self.format
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Re-rounds every element into `format`.
    pub fn to_format(&self, format: FpFormat) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            format,
            data: self
                .data
                .iter()
                .map(|&v| round_to_format(v, format))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            format: self.format,
            data,
        }
    }
}

fn check_shape(rows: usize, cols: usize, len: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(NumericsError::EmptyShape { rows, cols });
    }
    if rows.checked_mul(cols) != Some(len) {
        return Err(NumericsError::LengthMismatch { rows, cols, len });
    }
    Ok(())
}

/// Seeded random stream.
///
/// Backed by ChaCha8, a counter-based generator with a fixed, documented
/// output stream: the same seed yields the same words on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        self.inner.random_range(0..bound)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random()
    }

    pub fn sample(&mut self, dist: Dist) -> Result<f64> {
        let mut sampler = Sampler::new(dist)?;
        Ok(sampler.draw(self))
    }

    /// Derives an independent stream, e.g. one per matrix in a run.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = self.inner.clone();
        inner.set_stream(stream);
        inner.set_word_pos(0);
        Rng {
            seed: self.seed,
            inner,
        }
    }
}

/// Element distribution for [`gen_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

enum Sampler {
    Constant(f64),
    Uniform(Uniform<f64>),
    Normal(Normal<f64>),
}

impl Sampler {
    fn new(dist: Dist) -> Result<Self> {
        match dist {
            Dist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(NumericsError::InvalidDistribution(format!(
                        "uniform range [{lo}, {hi}) must be finite with lo <= hi"
                    )));
                }
                if lo == hi {
                    return Ok(Sampler::Constant(lo));
                }
                Uniform::new(lo, hi)
                    .map(Sampler::Uniform)
                    .map_err(|e| NumericsError::InvalidDistribution(e.to_string()))
            }
            Dist::Normal { mean, std } => {
                if !(mean.is_finite() && std.is_finite()) || std <= 0.0 {
                    return Err(NumericsError::InvalidDistribution(format!(
                        "normal(mean={mean}, std={std}) requires finite mean and std > 0"
                    )));
                }
                Normal::new(mean, std)
                    .map(Sampler::Normal)
                    .map_err(|e| NumericsError::InvalidDistribution(e.to_string()))
            }
        }
    }

    fn draw(&mut self, rng: &mut Rng) -> f64 {
        match self {
            Sampler::Constant(v) => *v,
            Sampler::Uniform(u) => u.sample(&mut rng.inner),
            Sampler::Normal(n) => n.sample(&mut rng.inner),
        }
    }
}

/// Random matrix with elements drawn from `dist` and rounded into `format`.
pub fn gen_matrix(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    format: FpFormat,
    dist: Dist,
) -> Result<Matrix> {
    check_shape(rows, cols, rows.wrapping_mul(cols))?;
    let mut sampler = Sampler::new(dist)?;
    let data = (0..rows * cols).map(|_| sampler.draw(rng)).collect();
    Matrix::from_rounded(rows, cols, format, data)
}

pub const FGLT_MAGIC: &[u8; 4] = b"FGLT";
pub const FGLT_VERSION: u8 = 1;
const FGLT_HEADER_LEN: usize = 4 + 1 + 1 + 8 + 8;

/// Serializes `m` in the `FGLT` layout.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let width = m.format.bytes();
    let mut out = Vec::with_capacity(FGLT_HEADER_LEN + m.data.len() * width);
    out.extend_from_slice(FGLT_MAGIC);
    out.push(FGLT_VERSION);
    out.push(m.format.code());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for &v in &m.data {
        let bits = encode_bits(v, m.format);
        out.extend_from_slice(&bits.to_le_bytes()[..width]);
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(NumericsError::Truncated {
            expected: FGLT_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != FGLT_MAGIC {
        return Err(NumericsError::BadMagic(magic));
    }
    if bytes.len() < FGLT_HEADER_LEN {
        return Err(NumericsError::Truncated {
            expected: FGLT_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FGLT_VERSION {
        return Err(NumericsError::UnsupportedVersion(bytes[4]));
    }
    let format = FpFormat::from_code(bytes[5]).ok_or(NumericsError::UnknownFormatCode(bytes[5]))?;
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
    let width = format.bytes();
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_add(FGLT_HEADER_LEN))
        .ok_or(NumericsError::LengthMismatch { rows, cols, len: 0 })?;
    if bytes.len() < expected {
        return Err(NumericsError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(NumericsError::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[FGLT_HEADER_LEN..]
        .chunks_exact(width)
        .map(|chunk| {
            let mut raw = [0u8; 8];
            raw[..width].copy_from_slice(chunk);
            decode_bits(u64::from_le_bytes(raw), format)
        })
        .collect();
    Matrix::new(rows, cols, format, data)
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_matrix(m))?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}
