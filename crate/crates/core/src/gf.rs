//! GF(2^8) arithmetic and the linear-algebra kernel used by all coding and
//! decoding paths.
//!
//! The field is GF(2^8) with reduction polynomial x^8 + x^4 + x^3 + x + 1
//! (0x11B). Addition and subtraction coincide (XOR); multiplication runs on
//! log/antilog tables built at compile time. Codes whose coefficients are all
//! 0/1 degenerate to pure XOR, so GF(2) constructions cost nothing extra.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use thiserror::Error;

/// Reduction polynomial for the field, x^8 + x^4 + x^3 + x + 1.
pub const POLY: u16 = 0x11B;

const fn xtime(a: u8) -> u8 {
    let w = (a as u16) << 1;
    if w & 0x100 != 0 {
        (w ^ POLY) as u8
    } else {
        w as u8
    }
}

// exp table over the generator 0x03, duplicated so `log(a) + log(b)` never
// needs a modular reduction.
const fn build_exp() -> [u8; 510] {
    let mut t = [0u8; 510];
    let mut x: u8 = 1;
    let mut i = 0;
    while i < 255 {
        t[i] = x;
        t[i + 255] = x;
        // multiply by the generator 3 = x + 1
        x = x ^ xtime(x);
        i += 1;
    }
    t
}

const fn build_log() -> [u8; 256] {
    let exp = build_exp();
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 255 {
        t[exp[i] as usize] = i as u8;
        i += 1;
    }
    t
}

const EXP: [u8; 510] = build_exp();
const LOG: [u8; 256] = build_log();

/// Errors from field arithmetic and the linear solver.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GfError {
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("insufficient rank: have {rank}, need {needed}")]
    InsufficientRank { rank: usize, needed: usize },
    #[error("inconsistent rows: identical coefficients with different symbols")]
    InconsistentSystem,
}

/// One element of GF(2^8).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct Gf256(pub u8);

impl Gf256 {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(1);

    #[inline]
    pub const fn new(value: u8) -> Self {
        Self(value)
    }

    #[inline]
    pub const fn value(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Multiplicative inverse; zero is a domain error.
    #[inline]
    pub fn inv(self) -> Result<Self, GfError> {
        if self.0 == 0 {
            return Err(GfError::ZeroInverse);
        }
        Ok(Self(EXP[255 - LOG[self.0 as usize] as usize]))
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Add for Gf256 {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self(self.0 ^ rhs.0)
    }
}

// Subtraction equals addition in characteristic 2.
#[allow(clippy::suspicious_arithmetic_impl)]
impl Sub for Gf256 {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 ^ rhs.0)
    }
}

impl Mul for Gf256 {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        if self.0 == 0 || rhs.0 == 0 {
            return Self::ZERO;
        }
        Self(EXP[LOG[self.0 as usize] as usize + LOG[rhs.0 as usize] as usize])
    }
}

impl fmt::Display for Gf256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02x}", self.0)
    }
}

#[inline]
fn mul_byte(c: u8, b: u8) -> u8 {
    if c == 0 || b == 0 {
        0
    } else {
        EXP[LOG[c as usize] as usize + LOG[b as usize] as usize]
    }
}

/// A packet's coefficient vector over its batch's originals. A basis vector
/// e_i marks an uncoded original at generation position i.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoeffVector(Vec<Gf256>);

impl CoeffVector {
    pub fn new(coeffs: Vec<Gf256>) -> Self {
        Self(coeffs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(bytes.iter().map(|&b| Gf256(b)).collect())
    }

    /// Standard basis vector e_index of length `gen_size`.
    pub fn basis(gen_size: usize, index: usize) -> Self {
        let mut v = vec![Gf256::ZERO; gen_size];
        v[index] = Gf256::ONE;
        Self(v)
    }

    /// All-ones row, the parity row of the diversity code.
    pub fn ones(gen_size: usize) -> Self {
        Self(vec![Gf256::ONE; gen_size])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| c.is_zero())
    }

    /// Some(i) iff this vector is exactly e_i.
    pub fn basis_index(&self) -> Option<usize> {
        let mut idx = None;
        for (i, c) in self.0.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            if *c != Gf256::ONE || idx.is_some() {
                return None;
            }
            idx = Some(i);
        }
        idx
    }

    pub fn coeffs(&self) -> &[Gf256] {
        &self.0
    }

    pub fn as_bytes(&self) -> Vec<u8> {
        self.0.iter().map(|c| c.0).collect()
    }
}

/// One packet payload treated as a vector over GF(2^8). All symbols combined
/// or solved together must share one length; shorter payloads are zero-padded
/// by the caller and true lengths travel in packet headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolBuffer(Vec<u8>);

impl SymbolBuffer {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn zeroed(len: usize) -> Self {
        Self(vec![0u8; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    /// Copy zero-padded to `len` bytes. `len` must be >= the current length.
    pub fn padded_to(&self, len: usize) -> Self {
        debug_assert!(len >= self.0.len());
        let mut v = self.0.clone();
        v.resize(len, 0);
        Self(v)
    }
}

/// Byte-wise linear combination `sum coeffs[i] * symbols[i]` over GF(2^8).
pub fn combine(coeffs: &CoeffVector, symbols: &[SymbolBuffer]) -> Result<SymbolBuffer, GfError> {
    if coeffs.len() != symbols.len() {
        return Err(GfError::ShapeMismatch {
            expected: coeffs.len(),
            got: symbols.len(),
        });
    }
    let len = symbols.first().map(|s| s.len()).unwrap_or(0);
    if coeffs.is_empty() {
        return Err(GfError::ShapeMismatch {
            expected: 1,
            got: 0,
        });
    }
    for s in symbols {
        if s.len() != len {
            return Err(GfError::ShapeMismatch {
                expected: len,
                got: s.len(),
            });
        }
    }
    let mut acc = vec![0u8; len];
    for (c, s) in coeffs.coeffs().iter().zip(symbols) {
        match c.value() {
            0 => {}
            1 => {
                for (a, b) in acc.iter_mut().zip(s.as_bytes()) {
                    *a ^= b;
                }
            }
            cv => {
                for (a, b) in acc.iter_mut().zip(s.as_bytes()) {
                    *a ^= mul_byte(cv, *b);
                }
            }
        }
    }
    Ok(SymbolBuffer(acc))
}

/// Rank over GF(2^8) of the given coefficient vectors.
#[allow(clippy::needless_range_loop)]
pub fn rank(vectors: &[CoeffVector]) -> usize {
    let Some(first) = vectors.first() else {
        return 0;
    };
    let width = first.len();
    let mut rows: Vec<Vec<Gf256>> = vectors.iter().map(|v| v.coeffs().to_vec()).collect();
    let mut r = 0;
    for col in 0..width {
        let Some(p) = (r..rows.len()).find(|&i| !rows[i][col].is_zero()) else {
            continue;
        };
        rows.swap(r, p);
        let pivot_inv = rows[r][col].inv().expect("pivot is nonzero");
        for c in col..width {
            rows[r][c] = rows[r][c] * pivot_inv;
        }
        for i in 0..rows.len() {
            if i != r && !rows[i][col].is_zero() {
                let f = rows[i][col];
                for c in col..width {
                    let sub = f * rows[r][c];
                    rows[i][c] = rows[i][c] - sub;
                }
            }
        }
        r += 1;
        if r == rows.len() {
            break;
        }
    }
    r
}

/// Recovers the `k` original symbols, ordered by generation position, from
/// coded rows via Gaussian elimination.
///
/// Rows whose coefficients eliminate to zero but whose symbols do not are a
/// hard integrity failure, never silently ignored.
#[allow(clippy::needless_range_loop)]
pub fn solve(
    received: &[(CoeffVector, SymbolBuffer)],
    k: usize,
) -> Result<Vec<SymbolBuffer>, GfError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let sym_len = received.first().map(|(_, s)| s.len()).unwrap_or(0);
    for (c, s) in received {
        if c.len() != k {
            return Err(GfError::ShapeMismatch {
                expected: k,
                got: c.len(),
            });
        }
        if s.len() != sym_len {
            return Err(GfError::ShapeMismatch {
                expected: sym_len,
                got: s.len(),
            });
        }
    }

    let mut coeffs: Vec<Vec<Gf256>> = received.iter().map(|(c, _)| c.coeffs().to_vec()).collect();
    let mut data: Vec<Vec<u8>> = received.iter().map(|(_, s)| s.as_bytes().to_vec()).collect();
    let n = coeffs.len();

    let mut rank_rows = 0;
    for col in 0..k {
        let Some(p) = (rank_rows..n).find(|&i| !coeffs[i][col].is_zero()) else {
            continue;
        };
        coeffs.swap(rank_rows, p);
        data.swap(rank_rows, p);
        let pivot_inv = coeffs[rank_rows][col].inv().expect("pivot is nonzero");
        if pivot_inv != Gf256::ONE {
            for c in col..k {
                coeffs[rank_rows][c] = coeffs[rank_rows][c] * pivot_inv;
            }
            let pv = pivot_inv.value();
            for b in data[rank_rows].iter_mut() {
                *b = mul_byte(pv, *b);
            }
        }
        for i in 0..n {
            if i == rank_rows || coeffs[i][col].is_zero() {
                continue;
            }
            let f = coeffs[i][col];
            for c in col..k {
                let sub = f * coeffs[rank_rows][c];
                coeffs[i][c] = coeffs[i][c] - sub;
            }
            let fv = f.value();
            let (head, tail) = data.split_at_mut(rank_rows.max(i));
            let (row_i, row_r) = if i < rank_rows {
                (&mut head[i], &tail[0])
            } else {
                (&mut tail[0], &head[rank_rows])
            };
            for (a, b) in row_i.iter_mut().zip(row_r.iter()) {
                *a ^= mul_byte(fv, *b);
            }
        }
        rank_rows += 1;
        if rank_rows == n {
            break;
        }
    }

    // Any zeroed-out coefficient row must have a zeroed symbol as well,
    // otherwise two received rows disagreed about the same combination.
    for i in 0..n {
        if coeffs[i].iter().all(|c| c.is_zero()) && data[i].iter().any(|&b| b != 0) {
            return Err(GfError::InconsistentSystem);
        }
    }
    if rank_rows < k {
        return Err(GfError::InsufficientRank {
            rank: rank_rows,
            needed: k,
        });
    }

    // Full rank: the first k rows are in reduced echelon form with pivot i in
    // column i, i.e. row i holds original symbol i.
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        debug_assert_eq!(coeffs[i][i], Gf256::ONE);
        out.push(SymbolBuffer(std::mem::take(&mut data[i])));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent shift-and-reduce oracle: carry-less product reduced mod
    /// 0x11B, bit by bit. Never touches the log/exp tables.
    fn mul_oracle(a: u8, b: u8) -> u8 {
        let mut a = a as u16;
        let mut b = b as u16;
        let mut acc = 0u16;
        while b != 0 {
            if b & 1 != 0 {
                acc ^= a;
            }
            a <<= 1;
            if a & 0x100 != 0 {
                a ^= 0x11B;
            }
            b >>= 1;
        }
        acc as u8
    }

    fn sm64(state: &mut u64) -> u64 {
        *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    #[test]
    fn add_is_xor() {
        assert_eq!(Gf256(0x57) + Gf256(0x57), Gf256(0x00));
        assert_eq!(Gf256(0xAB) + Gf256(0x00), Gf256(0xAB));
        assert_eq!(Gf256(0x57) + Gf256(0x83), Gf256(0xD4));
        // sub is the identical operation
        assert_eq!(Gf256(0x57) - Gf256(0x83), Gf256(0x57) + Gf256(0x83));
    }

    #[test]
    fn mul_identities() {
        assert_eq!(Gf256(0x01) * Gf256(0x9C), Gf256(0x9C));
        assert_eq!(Gf256(0x00) * Gf256(0x9C), Gf256(0x00));
        assert_eq!(Gf256(0x02) * Gf256(0x80), Gf256(0x1B));
    }

    #[test]
    fn mul_matches_shift_and_reduce_oracle_exhaustively() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(
                    (Gf256(a) * Gf256(b)).value(),
                    mul_oracle(a, b),
                    "mismatch at {a:#x} * {b:#x}"
                );
            }
        }
    }

    #[test]
    fn inverse_by_exhaustive_search() {
        assert_eq!(Gf256(0x01).inv(), Ok(Gf256(0x01)));
        assert_eq!(Gf256(0x00).inv(), Err(GfError::ZeroInverse));
        // exhaustive-search oracle over 255 candidates
        let mut expected = None;
        for b in 1..=255u8 {
            if mul_oracle(0x02, b) == 1 {
                expected = Some(b);
            }
        }
        assert_eq!(expected, Some(0x8D));
        assert_eq!(Gf256(0x02).inv(), Ok(Gf256(0x8D)));
        for a in 1..=255u8 {
            let inv = Gf256(a).inv().unwrap();
            assert_eq!(Gf256(a) * inv, Gf256::ONE);
        }
    }

    #[test]
    fn field_axioms_hold_for_random_triples() {
        let mut s = 0x1234_5678_9abc_def0u64;
        for _ in 0..10_000 {
            let r = sm64(&mut s);
            let a = Gf256(r as u8);
            let b = Gf256((r >> 8) as u8);
            let c = Gf256((r >> 16) as u8);
            assert_eq!(a + b, b + a);
            assert_eq!(a * b, b * a);
            assert_eq!((a + b) + c, a + (b + c));
            assert_eq!((a * b) * c, a * (b * c));
            assert_eq!(a * (b + c), a * b + a * c);
            assert_eq!(a + Gf256::ZERO, a);
            assert_eq!(a * Gf256::ONE, a);
            assert_eq!(a + a, Gf256::ZERO);
            if !a.is_zero() {
                assert_eq!(a * a.inv().unwrap(), Gf256::ONE);
            }
            // add is an involution in each argument
            assert_eq!((a + b) + b, a);
        }
    }

    #[test]
    fn combine_parity_and_projection() {
        let a = SymbolBuffer::new(vec![1, 2, 3, 4]);
        let b = SymbolBuffer::new(vec![10, 20, 30, 40]);
        let parity = combine(&CoeffVector::ones(2), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(parity.as_bytes(), &[1 ^ 10, 2 ^ 20, 3 ^ 30, 4 ^ 40]);
        let proj = combine(
            &CoeffVector::from_bytes(&[1, 0]),
            &[a.clone(), b.clone()],
        )
        .unwrap();
        assert_eq!(proj, a);
    }

    #[test]
    fn combine_matches_per_byte_scalar_oracle() {
        let mut s = 42u64;
        let a: Vec<u8> = (0..8).map(|_| sm64(&mut s) as u8).collect();
        let b: Vec<u8> = (0..8).map(|_| sm64(&mut s) as u8).collect();
        let coeffs = CoeffVector::from_bytes(&[3, 5]);
        let got = combine(
            &coeffs,
            &[SymbolBuffer::new(a.clone()), SymbolBuffer::new(b.clone())],
        )
        .unwrap();
        for i in 0..8 {
            let want = mul_oracle(3, a[i]) ^ mul_oracle(5, b[i]);
            assert_eq!(got.as_bytes()[i], want);
        }
    }

    #[test]
    fn combine_shape_errors() {
        let a = SymbolBuffer::new(vec![1, 2]);
        let b = SymbolBuffer::new(vec![1, 2, 3]);
        assert!(matches!(
            combine(&CoeffVector::ones(2), std::slice::from_ref(&a)),
            Err(GfError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            combine(&CoeffVector::ones(2), &[a, b]),
            Err(GfError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn solve_identity_rows() {
        let a = SymbolBuffer::new(vec![9, 9, 9]);
        let b = SymbolBuffer::new(vec![7, 7, 7]);
        let rows = vec![
            (CoeffVector::basis(2, 0), a.clone()),
            (CoeffVector::basis(2, 1), b.clone()),
        ];
        assert_eq!(solve(&rows, 2).unwrap(), vec![a, b]);
    }

    #[test]
    fn solve_diversity_rows() {
        let a = SymbolBuffer::new(vec![0x12, 0x34]);
        let b = SymbolBuffer::new(vec![0x56, 0x78]);
        let parity = combine(&CoeffVector::ones(2), &[a.clone(), b.clone()]).unwrap();
        let rows = vec![(CoeffVector::basis(2, 0), a.clone()), (CoeffVector::ones(2), parity)];
        assert_eq!(solve(&rows, 2).unwrap(), vec![a, b]);
    }

    #[test]
    fn solve_insufficient_rank() {
        let a = SymbolBuffer::new(vec![1]);
        let rows = vec![
            (CoeffVector::ones(2), a.clone()),
            (CoeffVector::ones(2), a),
        ];
        assert_eq!(
            solve(&rows, 2),
            Err(GfError::InsufficientRank { rank: 1, needed: 2 })
        );
    }

    #[test]
    fn solve_flags_inconsistent_duplicates() {
        let rows = vec![
            (CoeffVector::basis(2, 0), SymbolBuffer::new(vec![1])),
            (CoeffVector::basis(2, 0), SymbolBuffer::new(vec![2])),
            (CoeffVector::basis(2, 1), SymbolBuffer::new(vec![3])),
        ];
        assert_eq!(solve(&rows, 2), Err(GfError::InconsistentSystem));
    }

    #[test]
    fn solve_random_full_rank_systems() {
        let mut s = 0xfeed_beefu64;
        for _ in 0..50 {
            let k = 4;
            let originals: Vec<SymbolBuffer> = (0..k)
                .map(|_| SymbolBuffer::new((0..16).map(|_| sm64(&mut s) as u8).collect()))
                .collect();
            // draw random rows until the matrix has full rank
            let mut rows = Vec::new();
            let mut vectors = Vec::new();
            while rank(&vectors) < k {
                let v = CoeffVector::from_bytes(
                    &(0..k).map(|_| sm64(&mut s) as u8).collect::<Vec<_>>(),
                );
                if v.is_zero() {
                    continue;
                }
                let sym = combine(&v, &originals).unwrap();
                vectors.push(v.clone());
                rows.push((v, sym));
            }
            assert_eq!(solve(&rows, k).unwrap(), originals);
        }
    }

    #[test]
    fn rank_examples() {
        let e1 = CoeffVector::from_bytes(&[1, 0]);
        let e2 = CoeffVector::from_bytes(&[0, 1]);
        let ones = CoeffVector::from_bytes(&[1, 1]);
        assert_eq!(rank(&[e1.clone(), e2.clone()]), 2);
        assert_eq!(rank(&[ones.clone(), ones.clone()]), 1);
        assert_eq!(rank(&[e1, ones, e2]), 2);
        assert_eq!(rank(&[]), 0);
    }

    proptest! {
        #[test]
        fn encode_then_solve_round_trips(
            k in 1usize..=16,
            seed in any::<u64>(),
            sym_len in 1usize..32,
        ) {
            let mut s = seed;
            let originals: Vec<SymbolBuffer> = (0..k)
                .map(|_| SymbolBuffer::new((0..sym_len).map(|_| sm64(&mut s) as u8).collect()))
                .collect();
            let mut rows = Vec::new();
            let mut vectors = Vec::new();
            let mut guard = 0;
            while rank(&vectors) < k {
                guard += 1;
                prop_assert!(guard < 10_000);
                let v = CoeffVector::from_bytes(
                    &(0..k).map(|_| sm64(&mut s) as u8).collect::<Vec<_>>(),
                );
                if v.is_zero() {
                    continue;
                }
                let sym = combine(&v, &originals).unwrap();
                vectors.push(v.clone());
                rows.push((v, sym));
            }
            prop_assert_eq!(solve(&rows, k).unwrap(), originals);
        }

        #[test]
        fn combine_with_basis_projects(
            k in 1usize..=8,
            idx in 0usize..8,
            seed in any::<u64>(),
        ) {
            let idx = idx % k;
            let mut s = seed;
            let symbols: Vec<SymbolBuffer> = (0..k)
                .map(|_| SymbolBuffer::new((0..8).map(|_| sm64(&mut s) as u8).collect()))
                .collect();
            let got = combine(&CoeffVector::basis(k, idx), &symbols).unwrap();
            prop_assert_eq!(got, symbols[idx].clone());
        }

        #[test]
        fn rank_bounds_and_permutation_invariance(
            rows in prop::collection::vec(prop::collection::vec(any::<u8>(), 3), 0..6),
            swap in any::<(usize, usize)>(),
        ) {
            let vectors: Vec<CoeffVector> =
                rows.iter().map(|r| CoeffVector::from_bytes(r)).collect();
            let r = rank(&vectors);
            prop_assert!(r <= vectors.len().min(3));
            let mut permuted = vectors.clone();
            if !permuted.is_empty() {
                let (i, j) = (swap.0 % permuted.len(), swap.1 % permuted.len());
                permuted.swap(i, j);
            }
            prop_assert_eq!(rank(&permuted), r);
        }
    }
}
