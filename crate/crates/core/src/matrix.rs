//! Packed dense binary matrices and Boolean matrix algebra.
//!
//! Rows are stored as runs of `u64` words so that Boolean products, Hamming
//! distances and row comparisons operate a word at a time.

use std::fmt;

use crate::error::{Error, Result};

const WORD: usize = 64;

#[inline]
fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD)
}

/// Immutable dense 0/1 matrix. Build one with [`BinaryMatrixBuilder`] or the
/// `from_*` constructors; empty shapes are rejected.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    bits: Vec<u64>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        BinaryMatrixBuilder::new(rows, cols).map(BinaryMatrixBuilder::build)
    }

    pub fn ones(rows: usize, cols: usize) -> Result<Self> {
        let mut b = BinaryMatrixBuilder::new(rows, cols)?;
        for i in 0..rows {
            for j in 0..cols {
                b.set(i, j, true);
            }
        }
        Ok(b.build())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut b = BinaryMatrixBuilder::new(n, n)?;
        for i in 0..n {
            b.set(i, i, true);
        }
        Ok(b.build())
    }

    /// Build from nested rows of 0/1 values. Any other value is an error.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut b = BinaryMatrixBuilder::new(n, d)?;
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::RaggedRows {
                    row: i,
                    expected: d,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => b.set(i, j, true),
                    other => return Err(Error::NotBinary { row: i, col: j, value: other }),
                }
            }
        }
        Ok(b.build())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut b = BinaryMatrixBuilder::new(rows, cols)?;
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    b.set(i, j, true);
                }
            }
        }
        Ok(b.build())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.rows && j < self.cols);
        (self.bits[i * self.stride + j / WORD] >> (j % WORD)) & 1 == 1
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.stride..(i + 1) * self.stride]
    }

    /// Column indices of the ones in row `i`, ascending.
    pub fn row_ones(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(i).iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(w * WORD + bit)
            })
        })
    }

    pub fn row_to_vec(&self, i: usize) -> Vec<u8> {
        (0..self.cols).map(|j| self.get(i, j) as u8).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|i| self.row_to_vec(i)).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn row_count_ones(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut b = BinaryMatrixBuilder::new(self.cols, self.rows).expect("nonempty");
        for i in 0..self.rows {
            for j in self.row_ones(i) {
                b.set(j, i, true);
            }
        }
        b.build()
    }

    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        let tail = self.cols % WORD;
        let tail_mask = if tail == 0 { u64::MAX } else { (1u64 << tail) - 1 };
        for i in 0..self.rows {
            for w in 0..self.stride {
                let idx = i * self.stride + w;
                out.bits[idx] = !out.bits[idx];
                if w == self.stride - 1 {
                    out.bits[idx] &= tail_mask;
                }
            }
        }
        out
    }

    /// Hamming distance between row `i` of `self` and row `j` of `other`.
    pub fn row_distance(&self, i: usize, other: &BinaryMatrix, j: usize) -> usize {
        debug_assert_eq!(self.cols, other.cols);
        self.row_words(i)
            .iter()
            .zip(other.row_words(j))
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// New matrix made of the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyMatrix { rows: 0, cols: self.cols });
        }
        let mut bits = Vec::with_capacity(idx.len() * self.stride);
        for &i in idx {
            bits.extend_from_slice(self.row_words(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            stride: self.stride,
            bits,
        })
    }

    pub fn to_builder(&self) -> BinaryMatrixBuilder {
        BinaryMatrixBuilder { inner: self.clone() }
    }
}

impl fmt::Debug for BinaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: String = (0..self.cols).map(|j| if self.get(i, j) { '1' } else { '0' }).collect();
            writeln!(f, "  {line}")?;
        }
        write!(f, "]")
    }
}

/// Mutable staging area for a [`BinaryMatrix`].
#[derive(Clone, Debug)]
pub struct BinaryMatrixBuilder {
    inner: BinaryMatrix,
}

impl BinaryMatrixBuilder {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        let stride = words_for(cols);
        Ok(Self {
            inner: BinaryMatrix {
                rows,
                cols,
                stride,
                bits: vec![0; rows * stride],
            },
        })
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        assert!(i < self.inner.rows && j < self.inner.cols, "index ({i},{j}) out of bounds");
        let m = &mut self.inner;
        let idx = i * m.stride + j / WORD;
        let mask = 1u64 << (j % WORD);
        if value {
            m.bits[idx] |= mask;
        } else {
            m.bits[idx] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.inner.get(i, j)
    }

    pub fn flip(&mut self, i: usize, j: usize) {
        let v = self.get(i, j);
        self.set(i, j, !v);
    }

    /// OR the words of `src` row `k` into row `i`.
    fn or_row_from(&mut self, i: usize, src: &BinaryMatrix, k: usize) {
        let stride = self.inner.stride;
        let dst = &mut self.inner.bits[i * stride..(i + 1) * stride];
        for (d, s) in dst.iter_mut().zip(src.row_words(k)) {
            *d |= s;
        }
    }

    pub fn build(self) -> BinaryMatrix {
        self.inner
    }
}

/// Boolean matrix product: `out[i][d] = OR_k (a[i][k] AND b[k][d])`.
pub fn bool_mat_prod(a: &BinaryMatrix, b: &BinaryMatrix) -> Result<BinaryMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "bool_mat_prod",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = BinaryMatrixBuilder::new(a.rows(), b.cols())?;
    for i in 0..a.rows() {
        for k in a.row_ones(i) {
            out.or_row_from(i, b, k);
        }
    }
    Ok(out.build())
}

/// Flatten a two-level hierarchy: `U = V ∘ Y`.
pub fn collapse_hierarchy(v: &BinaryMatrix, y: &BinaryMatrix) -> Result<BinaryMatrix> {
    if v.cols() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "collapse_hierarchy",
            left: v.shape(),
            right: y.shape(),
        });
    }
    bool_mat_prod(v, y)
}

pub fn hamming(a: &BinaryMatrix, b: &BinaryMatrix) -> Result<usize> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "hamming",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.bits.iter().zip(&b.bits).map(|(x, y)| (x ^ y).count_ones() as usize).sum())
}
