//! Dense numeric primitives.
//!
//! Every dot product accumulates in `f32`, left to right. Results are
//! therefore reproducible bit-for-bit across runs and thread counts, which
//! the acceptance suite relies on.
//!
//! Rotary embeddings use the half-split pairing: dimension `i` is rotated
//! together with dimension `i + head_dim / 2`, with angle
//! `position * theta_base^(-2i / head_dim)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RoPE frequency base.
pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

/// Row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row slices, all of which must share a length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Appends one row. Used by the host tier when decoding grows the sequence.
    pub(crate) fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Dimension(format!(
                "appended row has length {}, expected {}",
                row.len(),
                self.cols
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("appended row".into()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }
}

/// Sequential left-to-right `f32` dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Max over the rows of `qblock` of `row · key`.
pub fn block_scores(qblock: &DenseMatrix, key: &[f32]) -> Result<f32> {
    if qblock.cols() != key.len() {
        return Err(Error::Dimension(format!(
            "query block has {} columns, key has length {}",
            qblock.cols(),
            key.len()
        )));
    }
    if qblock.rows() == 0 {
        return Err(Error::Dimension("query block has no rows".into()));
    }
    Ok(qblock
        .iter_rows()
        .map(|q| dot(q, key))
        .fold(f32::NEG_INFINITY, f32::max))
}

/// Precomputed cosine and sine tables for rotary position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    max_position: usize,
    head_dim: usize,
    theta_base: f64,
    cos: DenseMatrix,
    sin: DenseMatrix,
}

/// Builds the table for positions `0..max_position`.
pub fn build_rope_table(max_position: usize, head_dim: usize, theta_base: f64) -> Result<RopeTable> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "rope head_dim must be even and positive, got {head_dim}"
        )));
    }
    if max_position == 0 {
        return Err(Error::Range("rope table needs at least one position".into()));
    }
    if !(theta_base.is_finite() && theta_base > 0.0) {
        return Err(Error::Config(format!("theta_base must be positive, got {theta_base}")));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| theta_base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(max_position * half);
    let mut sin = Vec::with_capacity(max_position * half);
    for p in 0..max_position {
        for f in &inv_freq {
            let angle = p as f64 * f;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    Ok(RopeTable {
        max_position,
        head_dim,
        theta_base,
        cos: DenseMatrix::new(max_position, half, cos)?,
        sin: DenseMatrix::new(max_position, half, sin)?,
    })
}

impl RopeTable {
    pub fn max_position(&self) -> usize {
        self.max_position
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn cos(&self) -> &DenseMatrix {
        &self.cos
    }

    pub fn sin(&self) -> &DenseMatrix {
        &self.sin
    }

    /// Rotates `vec` to `position`, writing into `out`.
    pub fn rotate_into(&self, vec: &[f32], position: usize, out: &mut [f32]) -> Result<()> {
        if vec.len() != self.head_dim || out.len() != self.head_dim {
            return Err(Error::Dimension(format!(
                "rope expects vectors of length {}, got {}",
                self.head_dim,
                vec.len()
            )));
        }
        if position >= self.max_position {
            return Err(Error::Range(format!(
                "position {position} outside rope table of {} positions",
                self.max_position
            )));
        }
        let half = self.head_dim / 2;
        let cos = self.cos.row(position);
        let sin = self.sin.row(position);
        for i in 0..half {
            let (x, y) = (vec[i], vec[i + half]);
            out[i] = x * cos[i] - y * sin[i];
            out[i + half] = x * sin[i] + y * cos[i];
        }
        Ok(())
    }
}

/// Applies the rotary embedding for `position` to `vec`.
pub fn apply_rope(vec: &[f32], position: usize, table: &RopeTable) -> Result<Vec<f32>> {
    let mut out = vec![0.0; vec.len()];
    table.rotate_into(vec, position, &mut out)?;
    Ok(out)
}

/// Numerically stable in-place softmax (row-max subtraction, sequential sum).
pub fn softmax_in_place(logits: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0f32;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}
