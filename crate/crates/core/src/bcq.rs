//! Binary-coding quantization with an offset term.
//!
//! A `q`-bit weight row is represented as `w = z + Σ_i α_i · b_i` with
//! `b_i ∈ {-1, +1}^n`, one positive scale `α_i` per bit plane and row, and a
//! per-row offset `z`. Uniform (RTN) quantization embeds exactly into this
//! form, which is what lets the bit-serial and LUT engines accept both.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::{round_to_format, FpFormat, Matrix};

/// Smallest scale a plane may carry: the fp32 minimum normal, so that a floored
/// scale survives the fp32 narrowing of the `FGBQ` format.
pub const ALPHA_FLOOR: f64 = 1.1754943508222875e-38;

/// Tikhonov damping added to the normal equations of the scale refit.
pub const LS_DAMPING: f64 = 1e-12;

pub const MAX_RTN_BITS: u32 = 8;
pub const MAX_ALTERNATING_BITS: u32 = 4;

#[derive(Debug, Error)]
pub enum BcqError {
    #[error("bit-width {q} outside supported range [{min}, {max}]")]
    BitWidth { q: u32, min: u32, max: u32 },
    #[error("non-finite weight at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid BCQ matrix: {0}")]
    Invalid(String),
    #[error("bad magic {0:?}, expected \"FGBQ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported file version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = BcqError> = std::result::Result<T, E>;

/// One binary matrix of a BCQ weight. `true` stores `b = +1`, `false` stores `b = -1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitPlane {
    pub fn filled(rows: usize, cols: usize, positive: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![positive; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    /// Builds a plane from `±1` entries; zero is treated as `+1`.
    pub fn from_signs(rows: usize, cols: usize, signs: &[i8]) -> Result<Self> {
        if signs.len() != rows * cols {
            return Err(BcqError::Dimension {
                expected: rows * cols,
                found: signs.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            bits: signs.iter().map(|&s| s >= 0).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> f64 {
        if self.get(r, c) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn set(&mut self, r: usize, c: usize, positive: bool) {
        self.bits[r * self.cols + c] = positive;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }
}

/// Bit-plane weights with per-row scales and offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct BcqMatrix {
    rows: usize,
    cols: usize,
    planes: Vec<BitPlane>,
    /// `alphas[i][r]`: scale of plane `i` on row `r`.
    alphas: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl BcqMatrix {
    pub fn new(planes: Vec<BitPlane>, alphas: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let q = planes.len();
        if q == 0 {
            return Err(BcqError::Invalid(
                "at least one bit plane is required".into(),
            ));
        }
        if alphas.len() != q {
            return Err(BcqError::Invalid(format!(
                "{} planes but {} scale vectors",
                q,
                alphas.len()
            )));
        }
        let (rows, cols) = (planes[0].rows, planes[0].cols);
        if rows == 0 || cols == 0 {
            return Err(BcqError::Invalid("empty weight matrix".into()));
        }
        if planes.iter().any(|p| p.rows != rows || p.cols != cols) {
            return Err(BcqError::Invalid("bit planes differ in shape".into()));
        }
        if offset.len() != rows {
            return Err(BcqError::Dimension {
                expected: rows,
                found: offset.len(),
            });
        }
        for a in &alphas {
            if a.len() != rows {
                return Err(BcqError::Dimension {
                    expected: rows,
                    found: a.len(),
                });
            }
            if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(BcqError::Invalid(format!(
                    "scale {bad} is not strictly positive and finite"
                )));
            }
        }
        if let Some(bad) = offset.iter().find(|v| !v.is_finite()) {
            return Err(BcqError::Invalid(format!("offset {bad} is not finite")));
        }
        Ok(Self {
            rows,
            cols,
            planes,
            alphas,
            offset,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn q(&self) -> usize {
        self.planes.len()
    }

    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    pub fn plane(&self, i: usize) -> &BitPlane {
        &self.planes[i]
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    #[inline]
    pub fn alpha(&self, plane: usize, row: usize) -> f64 {
        self.alphas[plane][row]
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Same weights with the offset dropped (conventional BCQ).
    pub fn without_offset(&self) -> BcqMatrix {
        BcqMatrix {
            offset: vec![0.0; self.rows],
            ..self.clone()
        }
    }

    /// Replaces the offset vector.
    pub fn with_offset(&self, offset: Vec<f64>) -> Result<BcqMatrix> {
        BcqMatrix::new(self.planes.clone(), self.alphas.clone(), offset)
    }

    /// Dequantized value of one element in fp64.
    #[inline]
    ///
    /// Summed with Neumaier compensation, so the offset and scale terms may
    /// cancel without losing the small result.
    pub fn value(&self, r: usize, c: usize) -> f64 {
        let mut sum = self.offset[r];
        let mut comp = 0.0;
        for (plane, alphas) in self.planes.iter().zip(&self.alphas) {
            let term = alphas[r] * plane.sign(r, c);
            let (s, e) = two_sum(sum, term);
            sum = s;
            comp += e;
        }
        sum + comp
    }

    /// The scales and offsets rounded as they are stored in an `FGBQ` file.
    pub fn to_storage_precision(&self) -> BcqMatrix {
        let narrow = |v: f64| round_to_format(v, FpFormat::Fp32);
        BcqMatrix {
            alphas: self
                .alphas
                .iter()
                .map(|a| a.iter().map(|&v| narrow(v).max(ALPHA_FLOOR)).collect())
                .collect(),
            offset: self.offset.iter().map(|&v| narrow(v)).collect(),
            ..self.clone()
        }
    }

    /// Recovers the uniform representation when the scales of every row form
    /// the exact power-of-two ladder `α_i = α_1 · 2^(i-1)`.
    pub fn to_uniform(&self) -> Option<UniformQuant> {
        let q = self.q() as u32;
        if q > MAX_RTN_BITS {
            return None;
        }
        let levels = ((1u64 << q) - 1) as f64;
        let mut scale = Vec::with_capacity(self.rows);
        let mut zero = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let a1 = self.alphas[0][r];
            if (1..self.q()).any(|i| self.alphas[i][r] != a1 * (1u64 << i) as f64) {
                return None;
            }
            let delta = 2.0 * a1;
            scale.push(delta);
            zero.push(levels / 2.0 - self.offset[r] / delta);
        }
        let mut codes = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let code = self
                    .planes
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.get(r, c))
                    .fold(0u32, |acc, (i, _)| acc | (1 << i));
                codes.push(code);
            }
        }
        UniformQuant::new(self.rows, self.cols, q, codes, scale, zero).ok()
    }
}

/// Per-row asymmetric uniform quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformQuant {
    rows: usize,
    cols: usize,
    q: u32,
    codes: Vec<u32>,
    scale: Vec<f64>,
    zero: Vec<f64>,
}

impl UniformQuant {
    pub fn new(
        rows: usize,
        cols: usize,
        q: u32,
        codes: Vec<u32>,
        scale: Vec<f64>,
        zero: Vec<f64>,
    ) -> Result<Self> {
        if !(1..=MAX_RTN_BITS).contains(&q) {
            return Err(BcqError::BitWidth {
                q,
                min: 1,
                max: MAX_RTN_BITS,
            });
        }
        if rows == 0 || cols == 0 {
            return Err(BcqError::Invalid("empty weight matrix".into()));
        }
        if codes.len() != rows * cols {
            return Err(BcqError::Dimension {
                expected: rows * cols,
                found: codes.len(),
            });
        }
        if scale.len() != rows || zero.len() != rows {
            return Err(BcqError::Dimension {
                expected: rows,
                found: scale.len().min(zero.len()),
            });
        }
        let max_code = (1u32 << q) - 1;
        if let Some(c) = codes.iter().find(|&&c| c > max_code) {
            return Err(BcqError::Invalid(format!("code {c} exceeds {max_code}")));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(BcqError::Invalid(format!(
                "scale {s} is not strictly positive and finite"
            )));
        }
        if let Some(z) = zero.iter().find(|z| !z.is_finite()) {
            return Err(BcqError::Invalid(format!("zero-point {z} is not finite")));
        }
        Ok(Self {
            rows,
            cols,
            q,
            codes,
            scale,
            zero,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn q(&self) -> u32 {
        self.q
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> u32 {
        self.codes[r * self.cols + c]
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn zero(&self) -> &[f64] {
        &self.zero
    }

    /// `Δ · (c − zero)` in fp64.
    #[inline]
    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.scale[r] * (self.code(r, c) as f64 - self.zero[r])
    }

    pub fn dequantize(&self) -> Matrix {
        let data = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.value(r, c))
            .collect();
        Matrix::new(self.rows, self.cols, FpFormat::Fp64, data)
            .expect("shape checked at construction")
    }
}

fn check_finite(w: &Matrix) -> Result<()> {
    for r in 0..w.rows() {
        if let Some(c) = w.row(r).iter().position(|v| !v.is_finite()) {
            return Err(BcqError::NonFinite { row: r, col: c });
        }
    }
    Ok(())
}

/// Round-to-nearest uniform quantization with one (Δ, zero) pair per row.
///
/// Rounding ties go away from zero.
pub fn quantize_rtn(w: &Matrix, q: u32) -> Result<UniformQuant> {
    if !(2..=MAX_RTN_BITS).contains(&q) {
        return Err(BcqError::BitWidth {
            q,
            min: 2,
            max: MAX_RTN_BITS,
        });
    }
    check_finite(w)?;
    let max_code = ((1u32 << q) - 1) as f64;
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut scale = Vec::with_capacity(w.rows());
    let mut zero = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let row = w.row(r);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let delta = if hi > lo { (hi - lo) / max_code } else { 1.0 };
        let z = -lo / delta;
        for &v in row {
            codes.push((v / delta + z).round().clamp(0.0, max_code) as u32);
        }
        scale.push(delta);
        zero.push(z);
    }
    UniformQuant::new(w.rows(), w.cols(), q, codes, scale, zero)
}

/// Exact embedding of uniform codes into BCQ with offset.
///
/// Code bit `i-1` selects `b_i = +1`; then `α_i = Δ·2^(i-1)/2` and
/// `z = Δ·((2^q − 1)/2 − zero)`, so `z + Σ α_i b_i = Δ·(c − zero)`.
pub fn uniform_to_bcq(u: &UniformQuant) -> BcqMatrix {
    let q = u.q as usize;
    let planes = (0..q)
        .map(|i| BitPlane::from_fn(u.rows, u.cols, |r, c| (u.code(r, c) >> i) & 1 == 1))
        .collect();
    let alphas = (0..q)
        .map(|i| {
            u.scale
                .iter()
                .map(|&d| d * (1u64 << i) as f64 / 2.0)
                .collect()
        })
        .collect();
    let half_levels = ((1u64 << q) - 1) as f64 / 2.0;
    let offset = u
        .scale
        .iter()
        .zip(&u.zero)
        .map(|(&d, &z)| scaled_difference(d, half_levels, z))
        .collect();
    BcqMatrix::new(planes, alphas, offset).expect("embedding of a valid UniformQuant is valid")
}

/// `a + b` as a rounded sum and its exact rounding error.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `d·(a − b)` rounded once from a double-length intermediate.
fn scaled_difference(d: f64, a: f64, b: f64) -> f64 {
    let (s, e) = two_sum(a, -b);
    let p = d * s;
    let p_err = d.mul_add(s, -p);
    p + (p_err + d * e)
}

/// Options for [`quantize_bcq_alternating`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternatingOptions {
    pub q: u32,
    pub iters: usize,
    /// Fit the per-row offset `z`; when false `z` is held at zero.
    pub offset: bool,
}

impl AlternatingOptions {
    pub fn new(q: u32, iters: usize) -> Self {
        Self {
            q,
            iters,
            offset: true,
        }
    }

    pub fn without_offset(mut self) -> Self {
        self.offset = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct AlternatingFit {
    pub bcq: BcqMatrix,
    /// `row_errors[r][k]`: squared error of row `r` after `k` refinement rounds.
    pub row_errors: Vec<Vec<f64>>,
}

impl AlternatingFit {
    /// Total squared error after each round (index 0 is the greedy init).
    pub fn error_history(&self) -> Vec<f64> {
        let rounds = self.row_errors.first().map_or(0, Vec::len);
        (0..rounds)
            .map(|k| self.row_errors.iter().map(|e| e[k]).sum())
            .collect()
    }

    pub fn final_error(&self) -> f64 {
        self.error_history().last().copied().unwrap_or(0.0)
    }
}

/// Fits BCQ weights row by row: greedy residual initialisation followed by
/// `iters` rounds of scale refit / pattern search / offset update.
pub fn quantize_bcq_alternating(w: &Matrix, opts: AlternatingOptions) -> Result<AlternatingFit> {
    if !(1..=MAX_ALTERNATING_BITS).contains(&opts.q) {
        return Err(BcqError::BitWidth {
            q: opts.q,
            min: 1,
            max: MAX_ALTERNATING_BITS,
        });
    }
    check_finite(w)?;
    let q = opts.q as usize;
    let fits: Vec<RowFit> = (0..w.rows())
        .into_par_iter()
        .map(|r| RowFit::fit(w.row(r), q, opts.iters, opts.offset))
        .collect();

    let (rows, cols) = (w.rows(), w.cols());
    let planes = (0..q)
        .map(|i| BitPlane::from_fn(rows, cols, |r, c| fits[r].signs[i][c]))
        .collect();
    let alphas = (0..q)
        .map(|i| fits.iter().map(|f| f.alphas[i]).collect())
        .collect();
    let offset = fits.iter().map(|f| f.offset).collect();
    let row_errors = fits.into_iter().map(|f| f.errors).collect();
    Ok(AlternatingFit {
        bcq: BcqMatrix::new(planes, alphas, offset)?,
        row_errors,
    })
}

#[derive(Debug, Clone)]
struct RowFit {
    alphas: Vec<f64>,
    /// `signs[i][c]`, `true` for `+1`.
    signs: Vec<Vec<bool>>,
    offset: f64,
    errors: Vec<f64>,
}

impl RowFit {
    fn fit(w: &[f64], q: usize, iters: usize, with_offset: bool) -> RowFit {
        let n = w.len();
        let mut residual = w.to_vec();
        let mut alphas = Vec::with_capacity(q);
        let mut signs = Vec::with_capacity(q);
        for _ in 0..q {
            let mean_abs = residual.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
            let alpha = if mean_abs > 0.0 {
                mean_abs.max(ALPHA_FLOOR)
            } else {
                ALPHA_FLOOR
            };
            let s: Vec<bool> = residual.iter().map(|&v| v >= 0.0).collect();
            for (v, &pos) in residual.iter_mut().zip(&s) {
                *v -= if pos { alpha } else { -alpha };
            }
            alphas.push(alpha);
            signs.push(s);
        }
        let mut fit = RowFit {
            alphas,
            signs,
            offset: 0.0,
            errors: Vec::with_capacity(iters + 1),
        };
        if with_offset {
            fit.offset = fit.best_offset(w);
        }
        let mut err = fit.error(w);
        fit.errors.push(err);

        for _ in 0..iters {
            // (a) refit scales with patterns fixed
            let saved = (fit.alphas.clone(), fit.signs.clone());
            fit.refit_alphas(w);
            if fit.error(w) > err {
                (fit.alphas, fit.signs) = saved;
            }
            // (b) exhaustive per-column pattern search with scales fixed
            fit.search_patterns(w);
            err = fit.error(w);
            // (c) offset
            if with_offset {
                let old = fit.offset;
                fit.offset = fit.best_offset(w);
                let e = fit.error(w);
                if e > err {
                    fit.offset = old;
                } else {
                    err = e;
                }
            }
            fit.errors.push(err);
        }
        fit
    }

    #[inline]
    fn approx(&self, c: usize) -> f64 {
        self.alphas
            .iter()
            .zip(&self.signs)
            .map(|(&a, s)| if s[c] { a } else { -a })
            .sum()
    }

    fn error(&self, w: &[f64]) -> f64 {
        w.iter()
            .enumerate()
            .map(|(c, &v)| {
                let d = v - self.offset - self.approx(c);
                d * d
            })
            .sum()
    }

    fn best_offset(&self, w: &[f64]) -> f64 {
        w.iter()
            .enumerate()
            .map(|(c, &v)| v - self.approx(c))
            .sum::<f64>()
            / w.len() as f64
    }

    fn refit_alphas(&mut self, w: &[f64]) {
        let q = self.alphas.len();
        let mut gram = vec![vec![0.0; q]; q];
        let mut rhs = vec![0.0; q];
        for (c, &v) in w.iter().enumerate() {
            let t = v - self.offset;
            let s: Vec<f64> = self
                .signs
                .iter()
                .map(|p| if p[c] { 1.0 } else { -1.0 })
                .collect();
            for ((row, r), &si) in gram.iter_mut().zip(rhs.iter_mut()).zip(&s) {
                *r += si * t;
                for (g, &sj) in row.iter_mut().zip(&s) {
                    *g += si * sj;
                }
            }
        }
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] += LS_DAMPING;
        }
        let Some(solution) = solve_dense(gram, rhs) else {
            return;
        };
        for (i, a) in solution.into_iter().enumerate() {
            if !a.is_finite() {
                continue;
            }
            if a < 0.0 {
                // α·b = (−α)·(−b): flip the plane instead of losing the fit
                self.alphas[i] = (-a).max(ALPHA_FLOOR);
                for s in &mut self.signs[i] {
                    *s = !*s;
                }
            } else {
                self.alphas[i] = a.max(ALPHA_FLOOR);
            }
        }
    }

    fn search_patterns(&mut self, w: &[f64]) {
        let q = self.alphas.len();
        // candidate values of Σ α_i b_i for every sign pattern
        let candidates: Vec<f64> = (0..1usize << q)
            .map(|p| {
                (0..q)
                    .map(|i| {
                        if (p >> i) & 1 == 1 {
                            self.alphas[i]
                        } else {
                            -self.alphas[i]
                        }
                    })
                    .sum()
            })
            .collect();
        for (c, &v) in w.iter().enumerate() {
            let t = v - self.offset;
            let current: usize = (0..q).filter(|&i| self.signs[i][c]).map(|i| 1 << i).sum();
            let mut best = current;
            let mut best_err = (t - candidates[current]).powi(2);
            for (p, &cand) in candidates.iter().enumerate() {
                let e = (t - cand).powi(2);
                if e < best_err {
                    best = p;
                    best_err = e;
                }
            }
            for i in 0..q {
                self.signs[i][c] = (best >> i) & 1 == 1;
            }
        }
    }
}

/// Gaussian elimination with partial pivoting for the tiny normal-equation systems.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (top, below) = a.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for (i, row) in below.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (v, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *v -= f * p;
            }
            b[col + 1 + i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// `z[r] + Σ_i α_i[r]·b_i[r, c]` for every element, in fp64.
pub fn dequantize(bq: &BcqMatrix) -> Matrix {
    let data = (0..bq.rows)
        .flat_map(|r| (0..bq.cols).map(move |c| (r, c)))
        .map(|(r, c)| bq.value(r, c))
        .collect();
    Matrix::new(bq.rows, bq.cols, FpFormat::Fp64, data).expect("shape checked at construction")
}

/// `y = Σ_i α_i ∘ (B_i·x) + z·Σ_j x_j`, all in fp64.
pub fn bcq_gemv_reference(bq: &BcqMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != bq.cols {
        return Err(BcqError::Dimension {
            expected: bq.cols,
            found: x.len(),
        });
    }
    let sum_x: f64 = x.iter().sum();
    Ok((0..bq.rows)
        .map(|r| {
            let planes: f64 = bq
                .planes
                .iter()
                .zip(&bq.alphas)
                .map(|(plane, alphas)| {
                    let dot: f64 = plane
                        .row(r)
                        .iter()
                        .zip(x)
                        .map(|(&pos, &xv)| if pos { xv } else { -xv })
                        .sum();
                    alphas[r] * dot
                })
                .sum();
            planes + bq.offset[r] * sum_x
        })
        .collect())
}

pub const FGBQ_MAGIC: &[u8; 4] = b"FGBQ";
pub const FGBQ_VERSION: u8 = 1;
const FGBQ_HEADER_LEN: usize = 4 + 1 + 3 * 8;

fn bytes_per_plane_row(cols: usize) -> usize {
    cols.div_ceil(8)
}

/// Serializes `bq` in the `FGBQ` layout. Scales and offsets are narrowed to fp32.
pub fn encode_bcq(bq: &BcqMatrix) -> Vec<u8> {
    let stored = bq.to_storage_precision();
    let row_bytes = bytes_per_plane_row(bq.cols);
    let mut out = Vec::with_capacity(
        FGBQ_HEADER_LEN + bq.q() * bq.rows * row_bytes + 4 * (bq.q() + 1) * bq.rows,
    );
    out.extend_from_slice(FGBQ_MAGIC);
    out.push(FGBQ_VERSION);
    for v in [bq.rows, bq.cols, bq.q()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for plane in &bq.planes {
        for r in 0..bq.rows {
            let mut packed = vec![0u8; row_bytes];
            for (c, &pos) in plane.row(r).iter().enumerate() {
                if pos {
                    packed[c / 8] |= 1 << (c % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
    }
    for a in &stored.alphas {
        for &v in a {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &v in &stored.offset {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_bcq(bytes: &[u8]) -> Result<BcqMatrix> {
    if bytes.len() < 4 {
        return Err(BcqError::Truncated {
            expected: FGBQ_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != FGBQ_MAGIC {
        return Err(BcqError::BadMagic(magic));
    }
    if bytes.len() < FGBQ_HEADER_LEN {
        return Err(BcqError::Truncated {
            expected: FGBQ_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FGBQ_VERSION {
        return Err(BcqError::UnsupportedVersion(bytes[4]));
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (rows, cols, q) = (read_u64(5), read_u64(13), read_u64(21));
    let row_bytes = bytes_per_plane_row(cols);
    let expected = q
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(row_bytes + 4))
        .and_then(|n| n.checked_add(4 * rows))
        .and_then(|n| n.checked_add(FGBQ_HEADER_LEN))
        .ok_or_else(|| BcqError::Invalid("header dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(BcqError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(BcqError::Invalid(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut at = FGBQ_HEADER_LEN;
    let mut planes = Vec::with_capacity(q);
    for _ in 0..q {
        let plane = BitPlane::from_fn(rows, cols, |r, c| {
            bytes[at + r * row_bytes + c / 8] >> (c % 8) & 1 == 1
        });
        at += rows * row_bytes;
        planes.push(plane);
    }
    let mut read_f32s = |count: usize| -> Vec<f64> {
        let v = bytes[at..at + 4 * count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        at += 4 * count;
        v
    };
    let alphas = (0..q).map(|_| read_f32s(rows)).collect();
    let offset = read_f32s(rows);
    BcqMatrix::new(planes, alphas, offset)
}

pub fn save_bcq(bq: &BcqMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_bcq(bq))?;
    Ok(())
}

pub fn load_bcq(path: impl AsRef<Path>) -> Result<BcqMatrix> {
    decode_bcq(&fs::read(path)?)
}
