//! Block-sparse attention and the measurements used to judge it: dense
//! causal attention, exact top-k, attention-mass recall and chunk sparsity.
//!
//! Logits are `q . k` with RoPE applied; any softmax temperature is assumed
//! folded into the queries. Softmax subtracts the row max and sums in
//! ascending key order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{KeySource, SparseBlockMask};
use crate::rope_policy::{PolicyId, RopePolicySet};
use crate::tensor::{dot, softmax_in_place, DenseMatrix, RopeTable};
use crate::workload::AttentionWorkload;

/// Key and value rows addressable by token index.
pub trait KvSource: KeySource {
    fn value(&self, head: usize, index: usize) -> &[f32];

    /// Errors with the offending indices when some cannot be resolved.
    fn check_resolvable(&self, indices: &[usize]) -> Result<()> {
        let missing: Vec<usize> = indices.iter().copied().filter(|&i| i >= self.len()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingPage { indices: missing })
        }
    }
}

/// Borrowed per-head key and value matrices of one layer, limited to the
/// first `len` rows.
#[derive(Debug, Clone, Copy)]
pub struct LayerKv<'a> {
    pub keys: &'a [DenseMatrix],
    pub values: &'a [DenseMatrix],
    pub len: usize,
}

impl<'a> LayerKv<'a> {
    pub fn of(workload: &'a AttentionWorkload, layer: usize) -> Self {
        Self::truncated(workload, layer, workload.seq_len_kv())
    }

    pub fn truncated(workload: &'a AttentionWorkload, layer: usize, len: usize) -> Self {
        Self {
            keys: workload.layer_keys(layer),
            values: workload.layer_values(layer),
            len: len.min(workload.seq_len_kv()),
        }
    }
}

impl KeySource for LayerKv<'_> {
    fn num_heads(&self) -> usize {
        self.keys.len()
    }

    fn head_dim(&self) -> usize {
        self.keys.head_dim()
    }

    fn len(&self) -> usize {
        self.len
    }

    fn key(&self, head: usize, index: usize) -> &[f32] {
        self.keys[head].row(index)
    }
}

impl KvSource for LayerKv<'_> {
    fn value(&self, head: usize, index: usize) -> &[f32] {
        self.values[head].row(index)
    }
}

/// Per-head attention output, `T_q x d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub heads: Vec<DenseMatrix>,
}

impl AttentionOutput {
    pub fn max_abs_diff(&self, other: &AttentionOutput) -> f32 {
        self.heads
            .iter()
            .zip(&other.heads)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }

    /// CRC-32 of the little-endian output bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for m in &self.heads {
            for v in m.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Softmax weights for one query row, keyed by token index.
#[derive(Debug, Clone, PartialEq)]
pub struct RowWeights {
    pub head: usize,
    pub row: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
}

/// Sparse attention output plus what it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttention {
    pub output: AttentionOutput,
    /// Distinct token indices whose K/V rows were read, ascending.
    pub accessed: Vec<usize>,
    /// Filled only when requested.
    pub weights: Vec<RowWeights>,
}

fn attend_row<K: KvSource + ?Sized>(
    q: &[f32],
    q_pos: usize,
    selected: &[usize],
    positions: &[usize],
    kv: &K,
    head: usize,
    rope: &RopeTable,
    out: &mut [f32],
) -> Result<Vec<f32>> {
    let d = q.len();
    let mut qrot = vec![0.0f32; d];
    rope.rotate_into(q, q_pos, &mut qrot)?;
    let mut krot = vec![0.0f32; d];
    let mut logits = Vec::with_capacity(selected.len());
    for (&j, &p) in selected.iter().zip(positions) {
        rope.rotate_into(kv.key(head, j), p, &mut krot)?;
        logits.push(dot(&qrot, &krot));
    }
    softmax_in_place(&mut logits);
    out.fill(0.0);
    for (&j, &w) in selected.iter().zip(&logits) {
        for (o, v) in out.iter_mut().zip(kv.value(head, j)) {
            *o += w * v;
        }
    }
    Ok(logits)
}

/// Exact causal attention with every vector at its original position.
pub fn dense_attention(workload: &AttentionWorkload, layer: usize, rope: &RopeTable) -> Result<AttentionOutput> {
    dense_attention_rows(workload.layer_queries(layer), workload.query_offset(), &LayerKv::of(workload, layer), rope)
}

pub fn dense_attention_rows<K: KvSource + ?Sized>(
    queries: &[DenseMatrix],
    query_offset: usize,
    kv: &K,
    rope: &RopeTable,
) -> Result<AttentionOutput> {
    let d = kv.head_dim();
    let t_q = queries.first().map_or(0, DenseMatrix::rows);
    if query_offset + t_q > kv.len() {
        return Err(Error::Dimension(format!(
            "queries end at {} beyond {} keys",
            query_offset + t_q,
            kv.len()
        )));
    }
    let heads = queries
        .iter()
        .enumerate()
        .map(|(head, qm)| {
            let kv_end = query_offset + t_q;
            // rotate each key once
            let mut krot = DenseMatrix::zeros(kv_end, d);
            for j in 0..kv_end {
                rope.rotate_into(kv.key(head, j), j, krot.row_mut(j))?;
            }
            let rows: Vec<Vec<f32>> = (0..t_q)
                .into_par_iter()
                .map(|t| {
                    let i = query_offset + t;
                    let mut qrot = vec![0.0f32; d];
                    rope.rotate_into(qm.row(t), i, &mut qrot)?;
                    let mut logits: Vec<f32> = (0..=i).map(|j| dot(&qrot, krot.row(j))).collect();
                    softmax_in_place(&mut logits);
                    let mut out = vec![0.0f32; d];
                    for (j, w) in logits.iter().enumerate() {
                        for (o, v) in out.iter_mut().zip(kv.value(head, j)) {
                            *o += w * v;
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            DenseMatrix::from_rows(&rows).or_else(|_| Ok(DenseMatrix::zeros(0, d)))
        })
        .collect::<Result<_>>()?;
    Ok(AttentionOutput { heads })
}

/// Block-sparse attention of one workload layer through `kv`.
pub fn block_sparse_attention<K: KvSource + ?Sized>(
    workload: &AttentionWorkload,
    layer: usize,
    mask: &SparseBlockMask,
    policy: &RopePolicySet,
    rope: &RopeTable,
    kv: &K,
) -> Result<SparseAttention> {
    sparse_attention_rows(workload.layer_queries(layer), mask, policy, rope, kv, false)
}

/// Block-sparse attention for query rows described by `mask`.
///
/// Row `t` of block `m` attends to `mask.attended(m)` restricted to indices
/// `<= query_offset + t`. Set `record_weights` to keep every row's softmax
/// weights (intended for small instances).
pub fn sparse_attention_rows<K: KvSource + ?Sized>(
    queries: &[DenseMatrix],
    mask: &SparseBlockMask,
    policy: &RopePolicySet,
    rope: &RopeTable,
    kv: &K,
    record_weights: bool,
) -> Result<SparseAttention> {
    let t_q = queries.first().map_or(0, DenseMatrix::rows);
    if t_q != mask.seq_len_q || mask.block_size == 0 || mask.num_blocks() != t_q.div_ceil(mask.block_size) {
        return Err(Error::Dimension(format!(
            "mask covers {} rows in {} blocks of {}, queries have {t_q} rows",
            mask.seq_len_q,
            mask.num_blocks(),
            mask.block_size
        )));
    }
    let d = kv.head_dim();
    let block_sets: Vec<Vec<usize>> = (0..mask.num_blocks()).map(|m| mask.attended(m)).collect();
    let mut accessed: Vec<usize> = block_sets.iter().flatten().copied().collect();
    accessed.sort_unstable();
    accessed.dedup();
    kv.check_resolvable(&accessed)?;

    // Built-in policies give each row a prefix of its block's positions.
    let prefix_stable = !policy.extension_enabled || policy.bsa_policy == PolicyId::Streaming;
    let block_positions: Vec<Vec<usize>> = block_sets
        .iter()
        .enumerate()
        .map(|(m, set)| policy.attention_positions(set, mask.block_end(m) - 1))
        .collect::<Result<_>>()?;

    let per_head: Vec<(DenseMatrix, Vec<RowWeights>)> = queries
        .par_iter()
        .enumerate()
        .map(|(head, qm)| {
            let rows: Vec<(Vec<f32>, Option<RowWeights>)> = (0..t_q)
                .into_par_iter()
                .map(|t| {
                    let i = mask.query_offset + t;
                    let m = t / mask.block_size;
                    let set = &block_sets[m];
                    let n = set.partition_point(|&j| j <= i);
                    let selected = &set[..n];
                    let positions = if prefix_stable {
                        block_positions[m][..n].to_vec()
                    } else {
                        policy.attention_positions(selected, i)?
                    };
                    let q_pos = policy.attention_query_position(selected, i);
                    let mut out = vec![0.0f32; d];
                    let w = attend_row(qm.row(t), q_pos, selected, &positions, kv, head, rope, &mut out)?;
                    let rec = record_weights.then(|| RowWeights {
                        head,
                        row: t,
                        indices: selected.to_vec(),
                        weights: w,
                    });
                    Ok((out, rec))
                })
                .collect::<Result<_>>()?;
            let mut data = Vec::with_capacity(t_q * d);
            let mut weights = Vec::new();
            for (out, rec) in rows {
                data.extend(out);
                weights.extend(rec);
            }
            Ok((DenseMatrix::new(t_q, d, data)?, weights))
        })
        .collect::<Result<_>>()?;

    let mut heads = Vec::with_capacity(per_head.len());
    let mut weights = Vec::new();
    for (m, w) in per_head {
        heads.push(m);
        weights.extend(w);
    }
    Ok(SparseAttention {
        output: AttentionOutput { heads },
        accessed,
        weights,
    })
}

/// Raw logits `q . k_j` for every key row.
pub fn logits(query: &[f32], keys: &DenseMatrix) -> Vec<f32> {
    keys.iter_rows().map(|k| dot(query, k)).collect()
}

/// Indices of the `k` largest logits, best first, ties to the lower index.
pub fn exact_topk(query: &[f32], keys: &DenseMatrix, k: usize) -> Vec<usize> {
    let scores = logits(query, keys);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

/// Softmax mass of `q . K` captured by `selected`.
pub fn attention_recall(selected: &[usize], query: &[f32], keys: &DenseMatrix) -> f64 {
    recall_from_logits(selected, &logits(query, keys))
}

/// Softmax mass of `scores` captured by `selected`; out-of-range and
/// repeated indices are ignored.
pub fn recall_from_logits(selected: &[usize], scores: &[f32]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut seen = vec![false; weights.len()];
    let mut mass = 0.0;
    for &j in selected {
        if j < weights.len() && !seen[j] {
            seen[j] = true;
            mass += weights[j];
        }
    }
    (mass / total).clamp(0.0, 1.0)
}

/// Recall of one selection, with the budget it was allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub block: usize,
    pub head: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub entries: Vec<RecallEntry>,
    pub mean_recall: f64,
    pub budget: usize,
}

impl RecallReport {
    pub fn from_entries(entries: Vec<RecallEntry>, budget: usize) -> Self {
        let mean_recall = if entries.is_empty() {
            0.0
        } else {
            entries.iter().map(|e| e.recall).sum::<f64>() / entries.len() as f64
        };
        Self { entries, mean_recall, budget }
    }
}

/// Chunk occupancy bins: empty, then up to 12.5%, 25%, 50% and 100%.
pub const SHARE_BIN_EDGES: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

/// Distribution of exact top-k tokens over fixed-size chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityHistogram {
    pub chunk_size: usize,
    pub k: usize,
    pub num_chunks: usize,
    /// Top-k tokens per chunk.
    pub counts: Vec<usize>,
    /// Chunk counts per occupancy bin: `[empty, (0,12.5%], (12.5,25%], (25,50%], (50,100%]]`.
    pub share_bins: [usize; 5],
    pub empty_fraction: f64,
    pub chunks_with_topk: usize,
}

pub fn chunk_sparsity_histogram(query: &[f32], keys: &DenseMatrix, k: usize, chunk_size: usize) -> Result<SparsityHistogram> {
    if chunk_size == 0 || chunk_size > keys.rows() {
        return Err(Error::Range(format!(
            "chunk size {chunk_size} must be in 1..={}",
            keys.rows()
        )));
    }
    let num_chunks = keys.rows().div_ceil(chunk_size);
    let mut counts = vec![0usize; num_chunks];
    for j in exact_topk(query, keys, k.min(keys.rows())) {
        counts[j / chunk_size] += 1;
    }
    let mut share_bins = [0usize; 5];
    for (c, &n) in counts.iter().enumerate() {
        let len = chunk_size.min(keys.rows() - c * chunk_size);
        let share = n as f64 / len as f64;
        let bin = if n == 0 {
            0
        } else {
            1 + SHARE_BIN_EDGES.iter().position(|&e| share <= e).unwrap_or(3)
        };
        share_bins[bin] += 1;
    }
    let empty = share_bins[0];
    Ok(SparsityHistogram {
        chunk_size,
        k,
        num_chunks,
        counts,
        share_bins,
        empty_fraction: empty as f64 / num_chunks as f64,
        chunks_with_topk: num_chunks - empty,
    })
}

/// Rotates every key row of `keys` to its own index.
pub fn rotate_keys(keys: &DenseMatrix, rope: &RopeTable) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(keys.rows(), keys.cols());
    for j in 0..keys.rows() {
        rope.rotate_into(keys.row(j), j, out.row_mut(j))?;
    }
    Ok(out)
}
