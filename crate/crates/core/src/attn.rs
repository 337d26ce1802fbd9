//! Masked attention: a high-precision dense oracle, a blocked
//! online-softmax executor that skips empty blocks, recall profiling, and a
//! FLOP model.
//!
//! The oracle computes `softmax(Q K^T / sqrt(d) + M) V` row by row in `f64`
//! regardless of the input element type; masked logits receive an additive
//! `-1e30`, which underflows to exactly zero after max-subtracted
//! exponentiation. The executor streams key blocks from the
//! [`BlockMap`] schedule in its working precision, never touching empty
//! blocks and applying the per-token predicate only inside mixed blocks.

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::SeqIndex;
use crate::masks::{BlockMap, BlockType, CompiledMask, SeqMask};

/// Additive logit bias for masked entries.
pub const MASKED_LOGIT_BIAS: f64 = -1e30;

/// Element types the attention kernels run in.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// One attention head's worth of rows: a row-major `(rows, cols)` matrix.
/// For Q/K/V this is `(sequence length N, head dim d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> HeadTensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        HeadTensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                what: "tensor data length",
                expected_rows: rows,
                expected_cols: cols,
                rows: data.len(),
                cols: 1,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "tensor data",
            });
        }
        Ok(HeadTensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        HeadTensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn cast<U: Scalar>(&self) -> HeadTensor<U> {
        HeadTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute entrywise difference, compared in `f64`.
    pub fn max_abs_diff<U: Scalar>(&self, other: &HeadTensor<U>) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn check_same_shape<U: Scalar>(
        &self,
        other: &HeadTensor<U>,
        what: &'static str,
    ) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                what,
                expected_rows: self.rows,
                expected_cols: self.cols,
                rows: other.rows,
                cols: other.cols,
            });
        }
        Ok(())
    }

    /// Scatters rows: `out[perm[i]] = self[i]`. With the grid's tile
    /// permutation this reorders zigzag rows into tile order.
    pub fn scatter_rows(&self, perm: &[usize]) -> HeadTensor<T> {
        assert_eq!(perm.len(), self.rows, "permutation length");
        let mut out = HeadTensor::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(self.row(i));
        }
        out
    }

    /// Gathers rows: `out[i] = self[perm[i]]`. Inverse of
    /// [`HeadTensor::scatter_rows`] for the same permutation.
    pub fn gather_rows(&self, perm: &[usize]) -> HeadTensor<T> {
        assert_eq!(perm.len(), self.rows, "permutation length");
        let mut out = HeadTensor::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }
}

/// Per-head attention shape parameters; `scale = 1/sqrt(head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

impl AttnConfig {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        AttnConfig {
            heads,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }
}

#[inline]
fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn check_qkv<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
) -> Result<()> {
    q.check_same_shape(k, "query/key")?;
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            what: "key/value rows",
            expected_rows: k.rows(),
            expected_cols: k.cols(),
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    Ok(())
}

/// Dense masked attention in `f64`, materializing one logit row at a time.
///
/// The mask is a predicate over sequence indices: `true` keeps the pair.
/// A row with no attended key is an error naming the row.
pub fn dense_attention_oracle<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    mask: impl Fn(SeqIndex, SeqIndex) -> bool + Sync,
) -> Result<HeadTensor<f64>> {
    check_qkv(q, k, v)?;
    let n = q.rows();
    let d_out = v.cols();
    let scale = 1.0 / (q.cols() as f64).sqrt();

    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            let mut logits = Vec::with_capacity(n);
            let mut any = false;
            for j in 0..n {
                let keep = mask(SeqIndex(i), SeqIndex(j));
                any |= keep;
                let mut s = dot_f64(qi, k.row(j)) * scale;
                if !keep {
                    s += MASKED_LOGIT_BIAS;
                }
                logits.push(s);
            }
            if !any {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                denom += *l;
            }
            let mut out = vec![0.0f64; d_out];
            for (j, p) in logits.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                let vr = v.row(j);
                for (o, x) in out.iter_mut().zip(vr) {
                    *o += p * x.as_f64();
                }
            }
            for o in out.iter_mut() {
                *o /= denom;
            }
            Ok(out)
        })
        .collect();

    let mut out = HeadTensor::zeros(n, d_out);
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row?);
    }
    Ok(out)
}

/// Dense masked attention oracle driven by a [`SeqMask`].
pub fn dense_attention_oracle_spec<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    mask: &SeqMask,
) -> Result<HeadTensor<f64>> {
    dense_attention_oracle(q, k, v, |a, b| mask.eval(a, b))
}

/// Blocked online-softmax attention over the non-empty key blocks of a
/// [`BlockMap`].
///
/// Inputs must already be in the map's token ordering (for tile-order maps
/// the caller applies [`crate::grid::VideoGrid::tile_permutation`]); the
/// output is returned in the same ordering. Key blocks are consumed in
/// ascending index order, so results are deterministic regardless of worker
/// count.
pub fn block_sparse_attention<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    map: &BlockMap,
) -> Result<HeadTensor<T>> {
    block_sparse_attention_with_order(q, k, v, map, |_, schedule| schedule)
}

/// Same as [`block_sparse_attention`] but with a caller-controlled key-block
/// visit order per query block. Online softmax makes the result insensitive
/// to the order up to rounding; this hook exists so tests can check that.
pub fn block_sparse_attention_with_order<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    map: &BlockMap,
    reorder: impl Fn(usize, Vec<usize>) -> Vec<usize> + Sync,
) -> Result<HeadTensor<T>> {
    check_qkv(q, k, v)?;
    let n = map.grid().num_tokens();
    if q.rows() != n {
        return Err(Error::ShapeMismatch {
            what: "query rows vs grid tokens",
            expected_rows: n,
            expected_cols: q.cols(),
            rows: q.rows(),
            cols: q.cols(),
        });
    }
    let b = map.grid().block_size();
    let nb = map.num_blocks();
    let d_out = v.cols();
    let scale = T::of_f64(1.0 / (q.cols() as f64).sqrt());
    let compiled = CompiledMask::build(map.spec(), map.grid())?;
    let coords = map.grid().coord_table(map.ordering());

    let mut out = HeadTensor::zeros(n, d_out);
    out.data
        .par_chunks_mut(b * d_out)
        .enumerate()
        .try_for_each(|(qb, out_chunk)| -> Result<()> {
            let schedule = reorder(
                qb,
                (0..nb)
                    .filter(|&kb| map.block_type(qb, kb) != BlockType::Empty)
                    .collect(),
            );
            for (local, out_row) in out_chunk.chunks_mut(d_out).enumerate() {
                let i = qb * b + local;
                let qi = q.row(i);
                let mut m = T::neg_infinity();
                let mut denom = T::zero();
                let mut acc = vec![T::zero(); d_out];
                let mut attended = 0usize;
                for &kb in &schedule {
                    let mixed = map.block_type(qb, kb) == BlockType::Mixed;
                    for j in kb * b..(kb + 1) * b {
                        if mixed && !compiled.eval(coords[i], coords[j]) {
                            continue;
                        }
                        attended += 1;
                        let s = dot(qi, k.row(j)) * scale;
                        if s > m {
                            let corr = (m - s).exp();
                            denom = denom * corr;
                            for a in acc.iter_mut() {
                                *a = *a * corr;
                            }
                            m = s;
                        }
                        let p = (s - m).exp();
                        denom = denom + p;
                        for (a, x) in acc.iter_mut().zip(v.row(j)) {
                            *a = *a + p * *x;
                        }
                    }
                }
                if attended == 0 {
                    return Err(Error::FullyMaskedRow { row: i });
                }
                for (o, a) in out_row.iter_mut().zip(acc) {
                    *o = a / denom;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Mean over queries of the softmax mass falling inside each query's
/// clamped local window, under full attention.
///
/// Rows are taken to be in zigzag order over `grid.dims()`; the window is
/// token-level, odd per axis, and at most the grid extent.
pub fn attention_recall<T: Scalar>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    grid: &crate::grid::VideoGrid,
    window: crate::grid::Dims3,
) -> Result<f64> {
    q.check_same_shape(k, "query/key")?;
    let n = grid.num_tokens();
    if q.rows() != n {
        return Err(Error::ShapeMismatch {
            what: "query rows vs grid tokens",
            expected_rows: n,
            expected_cols: q.cols(),
            rows: q.rows(),
            cols: q.cols(),
        });
    }
    let spec = MaskSpec::Natten { window };
    spec.validate(grid)?;
    let compiled = CompiledMask::build(&spec, grid)?;
    let coords = grid.coord_table(crate::grid::TokenOrder::Zigzag);
    let scale = 1.0 / (q.cols() as f64).sqrt();

    let recalls: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            let mut logits: Vec<f64> = (0..n)
                .map(|j| dot_f64(qi, k.row(j)) * scale)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                denom += *l;
            }
            let mut inside = 0.0;
            for (j, p) in logits.iter().enumerate() {
                if compiled.eval(coords[i], coords[j]) {
                    inside += p;
                }
            }
            inside / denom
        })
        .collect();

    Ok(recalls.iter().sum::<f64>() / n as f64)
}

use crate::masks::MaskSpec;

/// FLOP count of the two attention matmuls at a given sparsity:
/// `4 * N^2 * d * heads * (1 - sparsity)`; softmax cost is excluded.
pub fn flops_estimate(n_tokens: usize, head_dim: usize, heads: usize, sparsity: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&sparsity));
    let dense = 4u128 * (n_tokens as u128) * (n_tokens as u128) * (head_dim as u128)
        * (heads as u128);
    dense as f64 * (1.0 - sparsity)
}
