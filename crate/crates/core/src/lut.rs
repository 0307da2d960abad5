//! Conflict-free look-up tables of signed activation sums.
//!
//! A table built from a chunk `(x_1, …, x_μ)` stores, for every `μ`-bit key,
//! `Σ_j s_j·x_j` with `s_j = +1` where the key bit of `x_j` is set and `-1`
//! otherwise. Key bit `μ-1` (the MSB) belongs to `x_1`.
//!
//! Tables are immutable once built, so any number of readers may share one;
//! this is the software counterpart of a flip-flop table read through
//! independent multiplexers.

use thiserror::Error;

use crate::numerics::FpFormat;

pub const MIN_MU: u32 = 2;
pub const MAX_MU: u32 = 8;

/// Chunk width the adder-tree generator is specified for.
pub const TREE_MU: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LutError {
    #[error("mu = {0} outside supported range [2, 8]")]
    Mu(u32),
    #[error("key {bits:#b} does not fit in {mu} bits")]
    KeyRange { mu: u32, bits: u32 },
    #[error("key width {key} does not match table width {table}")]
    MuMismatch { key: u32, table: u32 },
    #[error("chunk has {found} values, expected {expected}")]
    ChunkLength { expected: usize, found: usize },
}

pub type Result<T, E = LutError> = std::result::Result<T, E>;

fn check_mu(mu: u32) -> Result<()> {
    if (MIN_MU..=MAX_MU).contains(&mu) {
        Ok(())
    } else {
        Err(LutError::Mu(mu))
    }
}

/// A `μ`-bit table key. Bit `μ-1` selects the sign of `x_1`, bit 0 the sign of `x_μ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LutKey {
    mu: u32,
    bits: u32,
}

impl LutKey {
    pub fn new(mu: u32, bits: u32) -> Result<Self> {
        check_mu(mu)?;
        if bits >= 1 << mu {
            return Err(LutError::KeyRange { mu, bits });
        }
        Ok(Self { mu, bits })
    }

    /// Key for a weight pattern given as `+1 ↔ true`, first weight first.
    pub fn from_signs(signs: &[bool]) -> Result<Self> {
        let mu = signs.len() as u32;
        check_mu(mu)?;
        let bits = signs.iter().fold(0u32, |acc, &s| (acc << 1) | s as u32);
        Ok(Self { mu, bits })
    }

    pub fn mu(self) -> u32 {
        self.mu
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn msb(self) -> bool {
        self.bits >> (self.mu - 1) == 1
    }

    /// The low `μ-1` bits.
    pub fn low(self) -> u32 {
        self.bits & low_mask(self.mu)
    }

    pub fn complement(self) -> LutKey {
        LutKey {
            mu: self.mu,
            bits: !self.bits & ((1 << self.mu) - 1),
        }
    }

    /// Sign of `x_{j+1}` selected by this key.
    pub fn sign_of(self, j: usize) -> bool {
        (self.bits >> (self.mu as usize - 1 - j)) & 1 == 1
    }
}

#[inline]
fn low_mask(mu: u32) -> u32 {
    (1 << (mu - 1)) - 1
}

/// Which construction produced a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builder {
    /// Every entry of the full table evaluated independently.
    NaiveFull,
    /// Every entry of the MSB = 0 half evaluated independently.
    NaiveHalf,
    /// The two-step adder tree for `μ = 4`.
    Tree,
    /// Tree requested for `μ ≠ 4`; the naive half construction was used.
    TreeFallback,
}

/// Number of two-operand additions spent building a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddCount {
    pub additions: u64,
    pub builder: Builder,
}

/// Analytical construction cost of the generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    NaiveFull,
    NaiveHalf,
    Tree,
}

/// Additions the corresponding builder performs for one table.
pub fn count_generator_adds(mu: u32, kind: GeneratorKind) -> u64 {
    let mu64 = mu as u64;
    match kind {
        GeneratorKind::NaiveFull => (1u64 << mu) * (mu64 - 1),
        GeneratorKind::NaiveHalf => (1u64 << (mu - 1)) * (mu64 - 1),
        GeneratorKind::Tree if mu == TREE_MU => 2 + 4 + 8,
        GeneratorKind::Tree => count_generator_adds(mu, GeneratorKind::NaiveHalf),
    }
}

/// Whether one generated half table shared by `k` readers costs fewer
/// additions than `k` direct `μ`-input adders (`μ-1` additions each).
pub fn generator_saves_additions(mu: u32, k: u64) -> bool {
    count_generator_adds(mu, GeneratorKind::Tree) < k * (mu as u64 - 1)
}

/// Arithmetic used while building a table.
pub(crate) trait TableArith {
    type Value: Copy;
    fn add(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn neg(&self, a: Self::Value) -> Self::Value;
}

impl TableArith for FpFormat {
    type Value = f64;

    #[inline]
    fn add(&self, a: f64, b: f64) -> f64 {
        FpFormat::add(*self, a, b)
    }

    #[inline]
    fn neg(&self, a: f64) -> f64 {
        -a
    }
}

/// Exact integer arithmetic on pre-aligned mantissas.
pub(crate) struct IntArith;

impl TableArith for IntArith {
    type Value = i64;

    #[inline]
    fn add(&self, a: i64, b: i64) -> i64 {
        a + b
    }

    #[inline]
    fn neg(&self, a: i64) -> i64 {
        -a
    }
}

/// `entries[key] = ((±x_1 ± x_2) ± x_3) …` for `key < count`, left to right.
fn naive_entries<A: TableArith>(
    arith: &A,
    chunk: &[A::Value],
    count: usize,
) -> (Vec<A::Value>, u64) {
    let mu = chunk.len();
    let signed = |key: usize, j: usize| {
        if (key >> (mu - 1 - j)) & 1 == 1 {
            chunk[j]
        } else {
            arith.neg(chunk[j])
        }
    };
    let entries = (0..count)
        .map(|key| (1..mu).fold(signed(key, 0), |acc, j| arith.add(acc, signed(key, j))))
        .collect();
    (entries, (count * (mu - 1)) as u64)
}

/// Two-step adder tree for the MSB = 0 half of a `μ = 4` table.
///
/// Step 1 forms the two upper-pair sums `-x_1 ∓ x_2` and the four lower-pair
/// sums `±x_3 ± x_4`; step 2 adds every upper sum to every lower sum.
fn tree_entries<A: TableArith>(arith: &A, chunk: &[A::Value]) -> (Vec<A::Value>, u64) {
    debug_assert_eq!(chunk.len(), TREE_MU as usize);
    let sign = |v: A::Value, positive: bool| if positive { v } else { arith.neg(v) };
    let mut adds = 0;
    let upper: Vec<_> = (0..2)
        .map(|hi| {
            adds += 1;
            arith.add(arith.neg(chunk[0]), sign(chunk[1], hi == 1))
        })
        .collect();
    let lower: Vec<_> = (0..4)
        .map(|lo| {
            adds += 1;
            arith.add(sign(chunk[2], lo & 2 != 0), sign(chunk[3], lo & 1 != 0))
        })
        .collect();
    let mut entries = Vec::with_capacity(8);
    for &u in &upper {
        for &l in &lower {
            adds += 1;
            entries.push(arith.add(u, l));
        }
    }
    (entries, adds)
}

/// Half table built with the tree for `μ = 4` and the naive schedule otherwise.
pub(crate) fn half_entries<A: TableArith>(
    arith: &A,
    chunk: &[A::Value],
) -> (Vec<A::Value>, AddCount) {
    if chunk.len() == TREE_MU as usize {
        let (entries, additions) = tree_entries(arith, chunk);
        (
            entries,
            AddCount {
                additions,
                builder: Builder::Tree,
            },
        )
    } else {
        let (entries, additions) = naive_entries(arith, chunk, 1 << (chunk.len() - 1));
        (
            entries,
            AddCount {
                additions,
                builder: Builder::TreeFallback,
            },
        )
    }
}

/// Full `2^μ`-entry table.
#[derive(Debug, Clone, PartialEq)]
pub struct Fflut {
    mu: u32,
    entries: Vec<f64>,
    format: FpFormat,
}

impl Fflut {
    pub fn mu(&self) -> u32 {
        self.mu
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn format(&self) -> FpFormat {
        self.format
    }
}

/// Half-size table holding the entries whose key MSB is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfFflut {
    mu: u32,
    entries: Vec<f64>,
    format: FpFormat,
}

impl HalfFflut {
    /// Keeps the MSB = 0 half of a full table.
    pub fn from_full(full: &Fflut) -> HalfFflut {
        HalfFflut {
            mu: full.mu,
            entries: full.entries[..full.entries.len() / 2].to_vec(),
            format: full.format,
        }
    }

    pub fn mu(&self) -> u32 {
        self.mu
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn format(&self) -> FpFormat {
        self.format
    }

    /// Test hook: negates one stored entry so verification suites can
    /// demonstrate that they catch a broken table.
    pub fn inject_sign_fault(&mut self, index: usize) {
        let i = index % self.entries.len();
        self.entries[i] = -self.entries[i];
        if self.entries[i] == 0.0 {
            // -0 compares equal to +0; make the fault observable
            self.entries[i] = 1.0;
        }
    }
}

/// Integer half table over pre-aligned mantissas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntHalfFflut {
    mu: u32,
    entries: Vec<i64>,
}

impl IntHalfFflut {
    pub fn mu(&self) -> u32 {
        self.mu
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    /// Decodes a full key exactly like [`read_half`].
    #[inline]
    pub fn read(&self, key_bits: u32) -> i64 {
        let msb = key_bits >> (self.mu - 1);
        let low = key_bits & low_mask(self.mu);
        if msb == 0 {
            self.entries[low as usize]
        } else {
            -self.entries[(!low & low_mask(self.mu)) as usize]
        }
    }
}

fn check_chunk<T>(chunk: &[T]) -> Result<u32> {
    let mu = chunk.len() as u32;
    check_mu(mu)?;
    Ok(mu)
}

/// Evaluates all `2^μ` entries independently, rounding into `format` after each addition.
pub fn build_fflut_naive(chunk: &[f64], format: FpFormat) -> Result<(Fflut, AddCount)> {
    let mu = check_chunk(chunk)?;
    let chunk: Vec<f64> = chunk.iter().map(|&x| format.round(x)).collect();
    let (entries, additions) = naive_entries(&format, &chunk, 1 << mu);
    Ok((
        Fflut {
            mu,
            entries,
            format,
        },
        AddCount {
            additions,
            builder: Builder::NaiveFull,
        },
    ))
}

/// Evaluates the MSB = 0 half independently (no adder sharing).
pub fn build_hfflut_naive(chunk: &[f64], format: FpFormat) -> Result<(HalfFflut, AddCount)> {
    let mu = check_chunk(chunk)?;
    let chunk: Vec<f64> = chunk.iter().map(|&x| format.round(x)).collect();
    let (entries, additions) = naive_entries(&format, &chunk, 1 << (mu - 1));
    Ok((
        HalfFflut {
            mu,
            entries,
            format,
        },
        AddCount {
            additions,
            builder: Builder::NaiveHalf,
        },
    ))
}

/// Builds the half table with the shared adder tree (`μ = 4`, 14 additions).
///
/// Other widths fall back to [`build_hfflut_naive`]'s schedule and report
/// [`Builder::TreeFallback`].
pub fn build_hfflut_generator(chunk: &[f64], format: FpFormat) -> Result<(HalfFflut, AddCount)> {
    let mu = check_chunk(chunk)?;
    let chunk: Vec<f64> = chunk.iter().map(|&x| format.round(x)).collect();
    let (entries, count) = half_entries(&format, &chunk);
    Ok((
        HalfFflut {
            mu,
            entries,
            format,
        },
        count,
    ))
}

/// Integer half table; same schedule as [`build_hfflut_generator`].
pub fn build_int_hfflut(chunk: &[i64]) -> Result<(IntHalfFflut, AddCount)> {
    let mu = check_chunk(chunk)?;
    let (entries, count) = half_entries(&IntArith, chunk);
    Ok((IntHalfFflut { mu, entries }, count))
}

pub fn read_full(lut: &Fflut, key: LutKey) -> Result<f64> {
    if key.mu != lut.mu {
        return Err(LutError::MuMismatch {
            key: key.mu,
            table: lut.mu,
        });
    }
    Ok(lut.entries[key.bits as usize])
}

/// MSB selects between the stored entry at the low bits and the negated entry
/// at their complement.
pub fn read_half(h: &HalfFflut, key: LutKey) -> Result<f64> {
    if key.mu != h.mu {
        return Err(LutError::MuMismatch {
            key: key.mu,
            table: h.mu,
        });
    }
    Ok(read_half_unchecked(h, key.bits))
}

#[inline]
pub(crate) fn read_half_unchecked(h: &HalfFflut, key_bits: u32) -> f64 {
    let mask = low_mask(h.mu);
    let low = key_bits & mask;
    if key_bits >> (h.mu - 1) == 0 {
        h.entries[low as usize]
    } else {
        -h.entries[(!low & mask) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Direct signed sum, the oracle for every table entry.
    fn signed_sum(chunk: &[f64], key: u32) -> f64 {
        let mu = chunk.len();
        chunk
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                if (key >> (mu - 1 - j)) & 1 == 1 {
                    x
                } else {
                    -x
                }
            })
            .sum()
    }

    #[test]
    fn mu3_table_matches_hand_rows() {
        let (x1, x2, x3) = (1.0, 10.0, 100.0);
        let (t, adds) = build_fflut_naive(&[x1, x2, x3], FpFormat::Fp64).unwrap();
        assert_eq!(t.entries()[0], -x1 - x2 - x3);
        assert_eq!(t.entries()[5], x1 - x2 + x3);
        assert_eq!(
            read_full(&t, LutKey::new(3, 0b110).unwrap()).unwrap(),
            x1 + x2 - x3
        );
        assert_eq!(
            read_full(&t, LutKey::new(3, 0b111).unwrap()).unwrap(),
            x1 + x2 + x3
        );
        for key in 0..8 {
            assert_eq!(t.entries()[key as usize], signed_sum(&[x1, x2, x3], key));
        }
        assert_eq!(adds.additions, 16);
    }

    #[test]
    fn add_counts() {
        let (t, adds) = build_fflut_naive(&[0.0, 0.0], FpFormat::Fp16).unwrap();
        assert!(t.entries().iter().all(|&v| v == 0.0));
        assert_eq!(adds.additions, 4);
        let (_, adds) = build_fflut_naive(&[1.0; 4], FpFormat::Fp32).unwrap();
        assert_eq!(adds.additions, 48);
        let (_, adds) = build_hfflut_generator(&[1.0; 4], FpFormat::Fp32).unwrap();
        assert_eq!(
            adds,
            AddCount {
                additions: 14,
                builder: Builder::Tree
            }
        );
        let (_, adds) = build_hfflut_generator(&[1.0; 3], FpFormat::Fp32).unwrap();
        assert_eq!(
            adds,
            AddCount {
                additions: 8,
                builder: Builder::TreeFallback
            }
        );

        assert_eq!(count_generator_adds(4, GeneratorKind::Tree), 14);
        assert_eq!(count_generator_adds(4, GeneratorKind::NaiveHalf), 24);
        assert_eq!(count_generator_adds(3, GeneratorKind::NaiveFull), 16);
        assert_eq!(count_generator_adds(5, GeneratorKind::Tree), 64);
    }

    #[test]
    fn generator_entry_hand_value() {
        let (h, _) = build_hfflut_generator(&[1.0, 1.0, 1.0, 1.0], FpFormat::Fp16).unwrap();
        assert_eq!(h.entries()[0b111], 2.0);
        assert_eq!(read_half(&h, LutKey::new(4, 0b0111).unwrap()).unwrap(), 2.0);
    }

    #[test]
    fn half_decoder_examples() {
        let chunk = [1.0, 10.0, 100.0];
        let (full, _) = build_fflut_naive(&chunk, FpFormat::Fp64).unwrap();
        let half = HalfFflut::from_full(&full);
        // stored entry for b'01 is -x1-x2+x3, negated gives +x1+x2-x3
        assert_eq!(half.entries()[0b01], -1.0 - 10.0 + 100.0);
        assert_eq!(
            read_half(&half, LutKey::new(3, 0b110).unwrap()).unwrap(),
            1.0 + 10.0 - 100.0
        );
        assert_eq!(
            read_half(&half, LutKey::new(3, 0b010).unwrap()).unwrap(),
            -1.0 + 10.0 - 100.0
        );
    }

    #[test]
    fn half_equals_full_exhaustively() {
        let mut rng = Rng::new(17);
        for mu in 2..=8u32 {
            for fmt in FpFormat::ALL {
                for _ in 0..50 {
                    let chunk: Vec<f64> = (0..mu).map(|_| rng.next_f64() * 8.0 - 4.0).collect();
                    let (full, _) = build_fflut_naive(&chunk, fmt).unwrap();
                    let (half, _) = build_hfflut_naive(&chunk, fmt).unwrap();
                    assert_eq!(half, HalfFflut::from_full(&full));
                    for bits in 0..(1 << mu) {
                        let key = LutKey::new(mu, bits).unwrap();
                        let f = read_full(&full, key).unwrap();
                        let h = read_half(&half, key).unwrap();
                        // exact cancellations may come back as -0 through the sign flip
                        assert!(f == h && (f == 0.0 || f.to_bits() == h.to_bits()));
                        assert_eq!(f, -read_full(&full, key.complement()).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn tree_matches_naive_for_exact_sums() {
        // sums of four fp16 values are exact in fp64, so association cannot matter
        let mut rng = Rng::new(23);
        for _ in 0..500 {
            let chunk: Vec<f64> = (0..4)
                .map(|_| {
                    FpFormat::Fp16
                        .round((rng.next_f64() - 0.5) * 2f64.powi(rng.below(30) as i32 - 15))
                })
                .collect();
            let (tree, _) = build_hfflut_generator(&chunk, FpFormat::Fp64).unwrap();
            let (naive, _) = build_hfflut_naive(&chunk, FpFormat::Fp64).unwrap();
            assert_eq!(tree, naive);
            for key in 0..8 {
                assert_eq!(tree.entries()[key as usize], signed_sum(&chunk, key));
            }
        }
    }

    #[test]
    fn integer_table_is_exact() {
        let mut rng = Rng::new(5);
        for mu in 2..=8u32 {
            let chunk: Vec<i64> = (0..mu)
                .map(|_| rng.below(1 << 40) as i64 - (1 << 39))
                .collect();
            let (t, _) = build_int_hfflut(&chunk).unwrap();
            for key in 0..(1u32 << mu) {
                let expect: i64 = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| {
                        if (key >> (mu as usize - 1 - j)) & 1 == 1 {
                            m
                        } else {
                            -m
                        }
                    })
                    .sum();
                assert_eq!(t.read(key), expect);
            }
        }
    }

    #[test]
    fn break_even_above_four_readers() {
        assert!(!generator_saves_additions(4, 4));
        assert!((5..=256).all(|k| generator_saves_additions(4, k)));
    }

    #[test]
    fn key_validation() {
        assert_eq!(LutKey::new(1, 0), Err(LutError::Mu(1)));
        assert_eq!(LutKey::new(9, 0), Err(LutError::Mu(9)));
        assert!(matches!(LutKey::new(3, 8), Err(LutError::KeyRange { .. })));
        let key = LutKey::from_signs(&[true, false, false]).unwrap();
        assert_eq!(key.bits(), 0b100);
        assert!(key.msb() && key.sign_of(0) && !key.sign_of(2));
        let (t, _) = build_fflut_naive(&[1.0, 2.0], FpFormat::Fp32).unwrap();
        assert!(matches!(
            read_full(&t, key),
            Err(LutError::MuMismatch { key: 3, table: 2 })
        ));
        let h = HalfFflut::from_full(&t);
        assert!(read_half(&h, key).is_err());
        assert!(build_fflut_naive(&[1.0], FpFormat::Fp32).is_err());
    }

    #[test]
    fn injected_fault_is_observable() {
        let (full, _) = build_fflut_naive(&[0.0, 0.0, 0.0], FpFormat::Fp32).unwrap();
        let mut half = HalfFflut::from_full(&full);
        half.inject_sign_fault(2);
        let key = LutKey::new(3, 2).unwrap();
        assert_ne!(
            read_half(&half, key).unwrap(),
            read_full(&full, key).unwrap()
        );
    }
}
