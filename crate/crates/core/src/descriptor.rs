//! Bit-packed binary descriptors, real-valued vectors, and the distance
//! kernels everything else is built on.
//!
//! A descriptor of `D` bits occupies `ceil(D / 64)` little-endian `u64`
//! words. Bit `d` lives in word `d / 64` at position `d % 64`; the padding
//! bits past `D` in the last word are always zero, so word-level popcounts
//! never need masking.

use std::fmt;
use std::ops::Deref;

use crate::error::{check_dim, Error, Result};

pub const WORD_BITS: usize = 64;

#[inline]
pub const fn words_for(dim_bits: usize) -> usize {
    dim_bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `dim_bits` descriptor.
#[inline]
pub(crate) fn tail_mask(dim_bits: usize) -> u64 {
    match dim_bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Borrowed view of one packed descriptor.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DescriptorRef<'a> {
    dim_bits: usize,
    words: &'a [u64],
}

impl<'a> DescriptorRef<'a> {
    /// Wraps raw words. Fails if the word count does not match `dim_bits` or
    /// padding bits are set.
    pub fn new(dim_bits: usize, words: &'a [u64]) -> Result<Self> {
        check_dim(words_for(dim_bits), words.len())?;
        if let Some(last) = words.last() {
            if last & !tail_mask(dim_bits) != 0 {
                return Err(Error::invalid("words", "padding bits must be zero"));
            }
        }
        Ok(DescriptorRef { dim_bits, words })
    }

    #[inline]
    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    #[inline]
    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    #[inline]
    pub fn bit(&self, d: usize) -> bool {
        debug_assert!(d < self.dim_bits);
        (self.words[d / WORD_BITS] >> (d % WORD_BITS)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Indices of the set bits in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + 'a {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rest = w;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let tz = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(wi * WORD_BITS + tz)
            })
        })
    }

    pub fn to_owned(&self) -> BinaryDescriptor {
        BinaryDescriptor {
            dim_bits: self.dim_bits,
            words: self.words.to_vec(),
        }
    }
}

impl fmt::Debug for DescriptorRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = (0..self.dim_bits)
            .map(|d| if self.bit(d) { '1' } else { '0' })
            .collect();
        write!(f, "Descriptor({bits})")
    }
}

/// An owned packed descriptor.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor {
    dim_bits: usize,
    words: Vec<u64>,
}

impl BinaryDescriptor {
    pub fn zeros(dim_bits: usize) -> Self {
        BinaryDescriptor {
            dim_bits,
            words: vec![0; words_for(dim_bits)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut out = Self::zeros(bits.len());
        for (d, &b) in bits.iter().enumerate() {
            out.set(d, b);
        }
        out
    }

    /// Parses a string of `0`/`1` characters, bit 0 first.
    pub fn parse_bits(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid("bits", format!("unexpected character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bits(&bits))
    }

    pub fn from_words(dim_bits: usize, words: Vec<u64>) -> Result<Self> {
        DescriptorRef::new(dim_bits, &words)?;
        Ok(BinaryDescriptor { dim_bits, words })
    }

    #[inline]
    pub fn set(&mut self, d: usize, value: bool) {
        assert!(d < self.dim_bits, "bit {d} out of range for {} bits", self.dim_bits);
        let mask = 1u64 << (d % WORD_BITS);
        if value {
            self.words[d / WORD_BITS] |= mask;
        } else {
            self.words[d / WORD_BITS] &= !mask;
        }
    }

    #[inline]
    pub fn as_ref(&self) -> DescriptorRef<'_> {
        DescriptorRef {
            dim_bits: self.dim_bits,
            words: &self.words,
        }
    }

    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.as_ref().fmt(f)
    }
}

/// All descriptors extracted from one image, stored row-major in one
/// contiguous word buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedDescriptorSet {
    image_id: String,
    dim_bits: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl PackedDescriptorSet {
    pub fn new(image_id: impl Into<String>, dim_bits: usize) -> Result<Self> {
        if dim_bits == 0 {
            return Err(Error::invalid("dim_bits", "must be positive"));
        }
        Ok(PackedDescriptorSet {
            image_id: image_id.into(),
            dim_bits,
            words_per_row: words_for(dim_bits),
            data: Vec::new(),
        })
    }

    /// Builds a set from a flat word buffer holding whole rows.
    pub fn from_words(image_id: impl Into<String>, dim_bits: usize, data: Vec<u64>) -> Result<Self> {
        let mut set = Self::new(image_id, dim_bits)?;
        if !data.len().is_multiple_of(set.words_per_row) {
            return Err(Error::invalid(
                "data",
                format!("{} words is not a whole number of {}-word rows", data.len(), set.words_per_row),
            ));
        }
        let mask = !tail_mask(dim_bits);
        if data.chunks_exact(set.words_per_row).any(|row| row[row.len() - 1] & mask != 0) {
            return Err(Error::invalid("data", "padding bits must be zero"));
        }
        set.data = data;
        Ok(set)
    }

    pub fn from_descriptors<'a>(
        image_id: impl Into<String>,
        dim_bits: usize,
        rows: impl IntoIterator<Item = DescriptorRef<'a>>,
    ) -> Result<Self> {
        let mut set = Self::new(image_id, dim_bits)?;
        for row in rows {
            set.push(row)?;
        }
        Ok(set)
    }

    /// Concatenates the descriptors of several images into one pool.
    pub fn pool<'a>(image_id: impl Into<String>, sets: impl IntoIterator<Item = &'a PackedDescriptorSet>) -> Result<Self> {
        let mut iter = sets.into_iter().peekable();
        let dim_bits = iter
            .peek()
            .map(|s| s.dim_bits)
            .ok_or(Error::InsufficientSample { needed: 1, got: 0 })?;
        let mut out = Self::new(image_id, dim_bits)?;
        for s in iter {
            check_dim(dim_bits, s.dim_bits)?;
            out.data.extend_from_slice(&s.data);
        }
        Ok(out)
    }

    pub fn push(&mut self, d: DescriptorRef<'_>) -> Result<()> {
        check_dim(self.dim_bits, d.dim_bits)?;
        self.data.extend_from_slice(d.words);
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn set_image_id(&mut self, id: impl Into<String>) {
        self.image_id = id.into();
    }

    #[inline]
    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.words_per_row
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> DescriptorRef<'_> {
        let start = i * self.words_per_row;
        DescriptorRef {
            dim_bits: self.dim_bits,
            words: &self.data[start..start + self.words_per_row],
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = DescriptorRef<'_>> + '_ {
        self.data.chunks_exact(self.words_per_row).map(move |words| DescriptorRef {
            dim_bits: self.dim_bits,
            words,
        })
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.data
    }

    /// Copy of the rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = PackedDescriptorSet {
            image_id: self.image_id.clone(),
            dim_bits: self.dim_bits,
            words_per_row: self.words_per_row,
            data: Vec::with_capacity(indices.len() * self.words_per_row),
        };
        for &i in indices {
            out.data.extend_from_slice(self.row(i).words);
        }
        out
    }
}

/// Hamming distance between two descriptors of equal length.
pub fn hamming(a: DescriptorRef<'_>, b: DescriptorRef<'_>) -> Result<u32> {
    check_dim(a.dim_bits, b.dim_bits)?;
    Ok(hamming_words(a.words, b.words))
}

/// Popcount of `a XOR b` over equally long word slices.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the popcnt feature was detected at runtime.
            return unsafe { hamming_words_popcnt(a, b) };
        }
    }
    hamming_words_portable(a, b)
}

#[inline]
fn hamming_words_portable(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn hamming_words_popcnt(a: &[u64], b: &[u64]) -> u32 {
    // 256-bit descriptors dominate, so unroll by four words.
    let mut acc = [0u32; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += (x[0] ^ y[0]).count_ones();
        acc[1] += (x[1] ^ y[1]).count_ones();
        acc[2] += (x[2] ^ y[2]).count_ones();
        acc[3] += (x[3] ^ y[3]).count_ones();
    }
    let tail: u32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    acc.iter().sum::<u32>() + tail
}

/// Distances from `x` to each row of `rows` (row-major, `x.len()` words per
/// row), written to `out`. Feature detection happens once per call, so
/// scanning a database this way is much faster than calling
/// [`hamming_words`] per pair.
pub fn hamming_many(x: &[u64], rows: &[u64], out: &mut [u32]) {
    let w = x.len();
    assert!(w > 0 && rows.len() == w * out.len(), "row buffer does not match the output length");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the popcnt feature was detected at runtime.
            unsafe { hamming_many_popcnt(x, rows, out) };
            return;
        }
    }
    hamming_many_generic(x, rows, out);
}

#[inline(always)]
fn hamming_many_generic(x: &[u64], rows: &[u64], out: &mut [u32]) {
    if let Ok(q) = <&[u64; 4]>::try_from(x) {
        for (o, r) in out.iter_mut().zip(rows.chunks_exact(4)) {
            *o = (q[0] ^ r[0]).count_ones() + (q[1] ^ r[1]).count_ones() + (q[2] ^ r[2]).count_ones() + (q[3] ^ r[3]).count_ones();
        }
    } else {
        for (o, r) in out.iter_mut().zip(rows.chunks_exact(x.len())) {
            *o = hamming_words_portable(x, r);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn hamming_many_popcnt(x: &[u64], rows: &[u64], out: &mut [u32]) {
    hamming_many_generic(x, rows, out)
}

/// A finite real-valued vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("component {i} is not finite")));
        }
        Ok(RealVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        RealVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RealVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

/// Row-major matrix of real samples sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMatrix {
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(cols: usize) -> Self {
        RealMatrix { cols, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or(Error::InsufficientSample { needed: 1, got: 0 })?;
        let mut m = RealMatrix::new(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    /// Unpacks every descriptor of `set` into a 0.0/1.0 row.
    pub fn from_packed(set: &PackedDescriptorSet) -> Self {
        let cols = set.dim_bits();
        let mut data = vec![0.0; cols * set.len()];
        for (row, d) in data.chunks_exact_mut(cols.max(1)).zip(set.iter()) {
            unpack_into(d, row);
        }
        RealMatrix { cols, data }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        check_dim(self.cols, row.len())?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn squared_euclidean_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(squared_euclidean_unchecked(a, b).sqrt())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Expands a descriptor into a vector of 0.0/1.0 components.
pub fn unpack_to_real(d: DescriptorRef<'_>) -> RealVector {
    let mut out = vec![0.0; d.dim_bits()];
    unpack_into(d, &mut out);
    RealVector(out)
}

#[inline]
pub fn unpack_into(d: DescriptorRef<'_>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), d.dim_bits());
    out.fill(0.0);
    for i in d.ones() {
        out[i] = 1.0;
    }
}
