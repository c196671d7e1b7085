//! Multi-stage hierarchical context pruning.
//!
//! A pruning stage splits its candidate key list into chunks, picks one
//! representative key per chunk and head with a hierarchical top-1 search,
//! scores each chunk by the best representative logit over heads and query
//! rows, and keeps the `k / l_c` best chunks. Stages run back to back, each
//! narrowing the previous stage's output, and produce a [`SparseBlockMask`].
//!
//! Determinism rules:
//! * midpoints of the top-1 search round half up;
//! * a tie between the two branches goes to the left one;
//! * a tie between chunk scores goes to the lower chunk index;
//! * a trailing chunk shorter than `l_c` is scored on its actual length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope_policy::{Branch, PositionContext, RopePolicySet};
use crate::tensor::{dot, DenseMatrix, RopeTable};
use crate::workload::AttentionWorkload;

/// One pruning stage: query block size, chunk size, tokens kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub query_block: usize,
    pub chunk_size: usize,
    pub keep: usize,
}

impl StageConfig {
    pub fn new(query_block: usize, chunk_size: usize, keep: usize) -> Self {
        Self { query_block, chunk_size, keep }
    }

    /// Number of chunks retained, `keep / chunk_size`.
    pub fn chunks_kept(&self) -> usize {
        self.keep / self.chunk_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_block == 0 || self.chunk_size == 0 {
            return Err(Error::Config(format!(
                "stage needs positive query block and chunk size, got {self:?}"
            )));
        }
        if self.keep == 0 || !self.keep.is_multiple_of(self.chunk_size) {
            return Err(Error::Config(format!(
                "stage keep {} must be a positive multiple of chunk size {}",
                self.keep, self.chunk_size
            )));
        }
        Ok(())
    }
}

/// Ordered stages plus the always-attended sink and streaming windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub stages: Vec<StageConfig>,
    pub n_sink: usize,
    pub n_stream: usize,
    /// Decode steps between recomputations, one per stage.
    pub refresh_intervals: Vec<usize>,
    /// Replacement `keep` for the final stage in early layers.
    #[serde(default)]
    pub early_final_keep: Option<usize>,
}

impl PruningPlan {
    fn window_3k(final_keep_early: Option<usize>, refresh: [usize; 3]) -> Self {
        Self {
            stages: vec![
                StageConfig::new(64, 256, 32 * 1024),
                StageConfig::new(64, 32, 8 * 1024),
                StageConfig::new(64, 8, 2048),
            ],
            n_sink: 256,
            n_stream: 1024,
            refresh_intervals: refresh.to_vec(),
            early_final_keep: final_keep_early,
        }
    }

    /// The default "3K window" setting.
    pub fn preset_3k() -> Self {
        Self::window_3k(Some(4096), [16, 8, 4])
    }

    /// The "5K window" setting.
    pub fn preset_5k() -> Self {
        Self {
            stages: vec![
                StageConfig::new(64, 64, 32 * 1024),
                StageConfig::new(64, 32, 16 * 1024),
                StageConfig::new(64, 16, 4096),
            ],
            early_final_keep: None,
            ..Self::preset_3k()
        }
    }

    /// 3K window with refresh intervals (32, 16, 8).
    pub fn preset_fast() -> Self {
        Self::window_3k(Some(4096), [32, 16, 8])
    }

    /// 3K window with refresh intervals (96, 24, 8).
    pub fn preset_flash() -> Self {
        Self::window_3k(Some(4096), [96, 24, 8])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "3k" => Ok(Self::preset_3k()),
            "5k" => Ok(Self::preset_5k()),
            "fast" => Ok(Self::preset_fast()),
            "flash" => Ok(Self::preset_flash()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 3k, 5k, fast or flash)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("plan needs at least one stage".into()));
        }
        if self.refresh_intervals.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "{} refresh intervals for {} stages",
                self.refresh_intervals.len(),
                self.stages.len()
            )));
        }
        if self.refresh_intervals.contains(&0) {
            return Err(Error::Config("refresh intervals must be positive".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        for pair in self.stages.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b.query_block > a.query_block || a.query_block % b.query_block != 0 {
                return Err(Error::Config(format!(
                    "query block {} does not tile into {}",
                    a.query_block, b.query_block
                )));
            }
            if b.keep > a.keep {
                return Err(Error::Config(format!(
                    "stage keep must not increase ({} then {})",
                    a.keep, b.keep
                )));
            }
        }
        if let Some(k) = self.early_final_keep {
            let n = self.stages.len();
            let mut last = self.stages[n - 1];
            last.keep = k;
            last.validate()?;
            if n > 1 && k > self.stages[n - 2].keep {
                return Err(Error::Config(format!(
                    "early final keep {k} exceeds the previous stage's keep {}",
                    self.stages[n - 2].keep
                )));
            }
        }
        Ok(())
    }

    /// Stage `i` as it applies to a layer (early layers may keep more).
    pub fn stage_for(&self, i: usize, early_layer: bool) -> StageConfig {
        let mut s = self.stages[i];
        if early_layer && i + 1 == self.stages.len() {
            if let Some(k) = self.early_final_keep {
                s.keep = k;
            }
        }
        s
    }

    pub fn final_block_size(&self) -> usize {
        self.stages.last().map_or(1, |s| s.query_block)
    }

    /// Largest final-stage budget over all layers.
    pub fn max_final_keep(&self) -> usize {
        let base = self.stages.last().map_or(0, |s| s.keep);
        base.max(self.early_final_keep.unwrap_or(0))
    }

    /// Middle region of a query block ending (exclusively) at `block_end`.
    pub fn middle_region(&self, block_end: usize) -> std::ops::Range<usize> {
        let end = block_end.saturating_sub(self.n_stream);
        if end <= self.n_sink {
            self.n_sink..self.n_sink
        } else {
            self.n_sink..end
        }
    }

    /// Number of rope positions needed to prune and attend over `kv_len`
    /// tokens under `policy`.
    pub fn rope_positions_needed(&self, kv_len: usize, policy: &RopePolicySet) -> usize {
        if !policy.extension_enabled {
            return kv_len.max(1);
        }
        let max_chunks = self
            .stages
            .iter()
            .map(|s| kv_len.div_ceil(s.chunk_size))
            .max()
            .unwrap_or(0);
        let attended = self.n_sink + self.max_final_keep() + self.n_stream;
        (self.n_stream + 2)
            .max(max_chunks + self.n_stream + 1)
            .max(attended)
            // plug-in policies may fall back to original positions
            .max(if policy.has_plugins() { kv_len } else { 0 })
            .max(1)
    }
}

/// Read access to per-head key rows.
pub trait KeySource: Sync {
    fn num_heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    /// Number of key rows available.
    fn len(&self) -> usize;
    fn key(&self, head: usize, index: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl KeySource for [DenseMatrix] {
    fn num_heads(&self) -> usize {
        <[DenseMatrix]>::len(self)
    }

    fn head_dim(&self) -> usize {
        self.first().map_or(0, DenseMatrix::cols)
    }

    fn len(&self) -> usize {
        self.first().map_or(0, DenseMatrix::rows)
    }

    fn key(&self, head: usize, index: usize) -> &[f32] {
        self[head].row(index)
    }
}

/// Contiguous chunks of a candidate list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition<'a> {
    pub chunks: Vec<&'a [usize]>,
}

/// Splits `indices` into runs of `chunk_size`; the last run may be shorter.
pub fn partition_chunks(indices: &[usize], chunk_size: usize) -> ChunkPartition<'_> {
    assert!(chunk_size > 0, "chunk size must be positive");
    ChunkPartition {
        chunks: indices.chunks(chunk_size).collect(),
    }
}

/// Query rows of one block, per head, with their original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBlock {
    pub heads: Vec<DenseMatrix>,
    pub positions: Vec<usize>,
}

impl QueryBlock {
    /// Rows `start..end` of every head's query matrix at `layer`.
    pub fn from_workload(workload: &AttentionWorkload, layer: usize, start: usize, end: usize) -> Result<Self> {
        let queries = workload.layer_queries(layer);
        Self::from_rows(queries, workload.query_offset(), start, end)
    }

    pub fn from_rows(queries: &[DenseMatrix], query_offset: usize, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > queries.first().map_or(0, DenseMatrix::rows) {
            return Err(Error::Range(format!("query rows {start}..{end} out of range")));
        }
        let heads = queries
            .iter()
            .map(|q| {
                let d = q.cols();
                DenseMatrix::new(end - start, d, q.data()[start * d..end * d].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            positions: (query_offset + start..query_offset + end).collect(),
        })
    }

    /// A single decode query per head at `position`.
    pub fn single(rows: &[Vec<f32>], position: usize) -> Result<Self> {
        Ok(Self {
            heads: rows
                .iter()
                .map(|r| DenseMatrix::from_rows(std::slice::from_ref(r)))
                .collect::<Result<_>>()?,
            positions: vec![position],
        })
    }

    /// Exclusive causal end of the block.
    pub fn end(&self) -> usize {
        self.positions.last().map_or(0, |p| p + 1)
    }
}

/// Shared inputs for position assignment inside a stage.
#[derive(Debug, Clone, Copy)]
pub struct PruneEnv<'a> {
    pub policy: &'a RopePolicySet,
    pub rope: &'a RopeTable,
    pub n_stream: usize,
    pub layer: usize,
}

impl PruneEnv<'_> {
    fn ctx(&self, query_orig: usize, key_orig: usize, chunk_index: usize, branch: Branch, chunk_count: usize) -> PositionContext {
        PositionContext {
            query_orig,
            key_orig,
            chunk_index,
            branch,
            n_stream: self.n_stream,
            chunk_count,
        }
    }

    /// Rotates one head's query rows for a stage with `chunk_count` chunks.
    pub fn rotate_queries(&self, rows: &DenseMatrix, positions: &[usize], chunk_count: usize) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(rows.rows(), rows.cols());
        for (t, &orig) in positions.iter().enumerate() {
            let ctx = self.ctx(orig, orig, 0, Branch::Right, chunk_count);
            let pos = self.policy.query_position(self.layer, &ctx);
            self.rope.rotate_into(rows.row(t), pos, out.row_mut(t))?;
        }
        Ok(out)
    }

    fn key_position(&self, key_orig: usize, chunk_index: usize, branch: Branch, chunk_count: usize) -> usize {
        // query_orig is not consulted for key placement
        let ctx = self.ctx(0, key_orig, chunk_index, branch, chunk_count);
        self.policy.key_position(self.layer, &ctx)
    }
}

/// Where a key sits for scoring: its chunk and how many chunks the stage has.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSite {
    pub chunk_index: usize,
    pub chunk_count: usize,
}

/// One iteration of the hierarchical top-1 search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepStep {
    /// Offsets within the chunk of the two probed keys.
    pub left: usize,
    pub right: usize,
    pub left_score: f32,
    pub right_score: f32,
    pub chosen: Branch,
}

/// Result of [`select_rep`].
#[derive(Debug, Clone, PartialEq)]
pub struct RepSelection {
    /// Selected key index (an element of the chunk).
    pub index: usize,
    pub steps: Vec<RepStep>,
    /// Distinct key indices read, in first-read order.
    pub reads: Vec<usize>,
}

fn rotated_score<K: KeySource + ?Sized>(
    qrot: &DenseMatrix,
    keys: &K,
    head: usize,
    index: usize,
    position: usize,
    rope: &RopeTable,
    scratch: &mut [f32],
) -> Result<f32> {
    rope.rotate_into(keys.key(head, index), position, scratch)?;
    Ok(qrot.iter_rows().map(|q| dot(q, scratch)).fold(f32::NEG_INFINITY, f32::max))
}

/// Hierarchical top-1 search for the representative key of `chunk`.
///
/// `qrot` is the head's query block already rotated for this stage. Runs at
/// most `ceil(log2 |chunk|)` iterations, each probing the first key of both
/// halves of the current range, and reads at most `2 * ceil(log2 |chunk|)`
/// distinct keys.
pub fn select_rep<K: KeySource + ?Sized>(
    qrot: &DenseMatrix,
    chunk: &[usize],
    site: ChunkSite,
    keys: &K,
    head: usize,
    env: &PruneEnv<'_>,
) -> Result<RepSelection> {
    if chunk.is_empty() {
        return Err(Error::Contract("select_rep called with an empty chunk".into()));
    }
    if let Some(&bad) = chunk.iter().find(|&&i| i >= keys.len()) {
        return Err(Error::Contract(format!(
            "chunk index {bad} outside {} keys",
            keys.len()
        )));
    }
    let iterations = chunk.len().next_power_of_two().trailing_zeros() as usize;
    let mut scratch = vec![0.0f32; keys.head_dim()];
    let mut steps = Vec::with_capacity(iterations);
    let mut reads: Vec<usize> = Vec::with_capacity(2 * iterations);
    let (mut lo, mut hi) = (0usize, chunk.len() - 1);
    for _ in 0..iterations {
        if lo == hi {
            break;
        }
        let mid = (lo + hi).div_ceil(2);
        let mut probe = |offset: usize, branch: Branch| -> Result<f32> {
            let index = chunk[offset];
            if !reads.contains(&index) {
                reads.push(index);
            }
            let pos = env.key_position(index, site.chunk_index, branch, site.chunk_count);
            rotated_score(qrot, keys, head, index, pos, env.rope, &mut scratch)
        };
        let left_score = probe(lo, Branch::Left)?;
        let right_score = probe(mid, Branch::Right)?;
        let chosen = if left_score >= right_score { Branch::Left } else { Branch::Right };
        steps.push(RepStep { left: lo, right: mid, left_score, right_score, chosen });
        match chosen {
            Branch::Left => hi = mid - 1,
            Branch::Right => lo = mid,
        }
    }
    Ok(RepSelection { index: chunk[lo], steps, reads })
}

/// Output of one stage for one query block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub indices: Vec<usize>,
    /// Distinct key indices read, ascending.
    pub reads: Vec<usize>,
    /// Estimated score of every chunk, empty when the stage was skipped.
    pub chunk_scores: Vec<f32>,
}

fn check_sorted_unique(indices: &[usize]) -> Result<()> {
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Contract(format!(
            "stage input must be sorted and duplicate-free, found {} before {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Runs one pruning stage on the candidate list `indices`.
///
/// Returns the input unchanged when it already fits the stage budget.
pub fn run_pruning_stage<K: KeySource + ?Sized>(
    stage: &StageConfig,
    indices: &[usize],
    query: &QueryBlock,
    keys: &K,
    env: &PruneEnv<'_>,
) -> Result<StageOutput> {
    check_sorted_unique(indices)?;
    if indices.len() <= stage.keep {
        return Ok(StageOutput {
            indices: indices.to_vec(),
            reads: Vec::new(),
            chunk_scores: Vec::new(),
        });
    }
    if query.heads.len() != keys.num_heads() {
        return Err(Error::Dimension(format!(
            "query block has {} heads, keys have {}",
            query.heads.len(),
            keys.num_heads()
        )));
    }
    let partition = partition_chunks(indices, stage.chunk_size);
    let chunk_count = partition.chunks.len();
    let rotated: Vec<DenseMatrix> = query
        .heads
        .iter()
        .map(|q| env.rotate_queries(q, &query.positions, chunk_count))
        .collect::<Result<_>>()?;

    let scored: Vec<(f32, Vec<usize>)> = partition
        .chunks
        .par_iter()
        .enumerate()
        .map(|(j, chunk)| {
            let site = ChunkSite { chunk_index: j, chunk_count };
            let mut best = f32::NEG_INFINITY;
            let mut reads = Vec::new();
            let mut scratch = vec![0.0f32; keys.head_dim()];
            for (head, qrot) in rotated.iter().enumerate() {
                let rep = select_rep(qrot, chunk, site, keys, head, env)?;
                let pos = env.key_position(rep.index, j, Branch::Right, chunk_count);
                let s = rotated_score(qrot, keys, head, rep.index, pos, env.rope, &mut scratch)?;
                best = best.max(s);
                reads.extend(rep.reads);
                if !reads.contains(&rep.index) {
                    reads.push(rep.index);
                }
            }
            Ok((best, reads))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..chunk_count).collect();
    // stable: equal scores keep ascending chunk order
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut kept: Vec<usize> = order.into_iter().take(stage.chunks_kept()).collect();
    kept.sort_unstable();

    let out: Vec<usize> = kept.iter().flat_map(|&j| partition.chunks[j].iter().copied()).collect();
    let mut reads: Vec<usize> = scored.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    reads.sort_unstable();
    reads.dedup();
    Ok(StageOutput {
        indices: out,
        reads,
        chunk_scores: scored.into_iter().map(|(s, _)| s).collect(),
    })
}

/// Per-query-block sparse key indices, excluding sink and streaming tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseBlockMask {
    pub block_size: usize,
    /// Absolute position of query row 0.
    pub query_offset: usize,
    pub seq_len_q: usize,
    pub n_sink: usize,
    pub n_stream: usize,
    pub indices: Vec<Vec<usize>>,
}

impl SparseBlockMask {
    pub fn num_blocks(&self) -> usize {
        self.indices.len()
    }

    /// Exclusive causal end of block `m`.
    pub fn block_end(&self, m: usize) -> usize {
        (self.query_offset + (m + 1) * self.block_size).min(self.query_offset + self.seq_len_q)
    }

    /// Sink tokens, middle selection and streaming window for block `m`,
    /// sorted and duplicate-free.
    pub fn attended(&self, m: usize) -> Vec<usize> {
        let end = self.block_end(m);
        let sink_end = self.n_sink.min(end);
        let stream_start = end.saturating_sub(self.n_stream).max(sink_end);
        let mut out: Vec<usize> = (0..sink_end).collect();
        out.extend(self.indices[m].iter().copied().filter(|&i| i >= sink_end && i < stream_start));
        out.extend(stream_start..end);
        out
    }

    /// Checks sortedness, causality and sink/stream exclusion.
    pub fn validate(&self) -> Result<()> {
        for (m, list) in self.indices.iter().enumerate() {
            check_sorted_unique(list)?;
            let end = self.block_end(m);
            let stream_start = end.saturating_sub(self.n_stream);
            if let Some(&bad) = list.iter().find(|&&i| i < self.n_sink || i >= stream_start) {
                return Err(Error::Contract(format!(
                    "block {m} selects {bad}, outside its middle region {}..{stream_start}",
                    self.n_sink
                )));
            }
        }
        Ok(())
    }
}

/// A mask together with the keys each stage read while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBuild {
    pub mask: SparseBlockMask,
    /// Distinct key indices read by each stage, across all blocks.
    pub stage_reads: Vec<Vec<usize>>,
    /// Each stage's output for the last query block.
    pub last_block_stages: Vec<Vec<usize>>,
}

/// Builds the sparse mask for one layer of a workload.
pub fn build_mask(
    plan: &PruningPlan,
    workload: &AttentionWorkload,
    layer: usize,
    policy: &RopePolicySet,
    rope: &RopeTable,
) -> Result<SparseBlockMask> {
    if layer >= workload.num_layers() {
        return Err(Error::Dimension(format!(
            "layer {layer} outside {} layers",
            workload.num_layers()
        )));
    }
    build_mask_from(
        plan,
        workload.layer_queries(layer),
        workload.query_offset(),
        workload.layer_keys(layer),
        layer,
        policy,
        rope,
    )
    .map(|b| b.mask)
}

/// Builds a mask from raw per-head query rows and any key source.
pub fn build_mask_from<K: KeySource + ?Sized>(
    plan: &PruningPlan,
    queries: &[DenseMatrix],
    query_offset: usize,
    keys: &K,
    layer: usize,
    policy: &RopePolicySet,
    rope: &RopeTable,
) -> Result<MaskBuild> {
    plan.validate()?;
    let seq_len_q = queries.first().map_or(0, DenseMatrix::rows);
    if queries.len() != keys.num_heads() {
        return Err(Error::Dimension(format!(
            "{} query heads but {} key heads",
            queries.len(),
            keys.num_heads()
        )));
    }
    if query_offset + seq_len_q > keys.len() {
        return Err(Error::Dimension(format!(
            "queries end at {} but only {} keys exist",
            query_offset + seq_len_q,
            keys.len()
        )));
    }
    if queries.iter().any(|q| q.cols() != keys.head_dim()) {
        return Err(Error::Dimension("query and key head_dim differ".into()));
    }
    let env = PruneEnv { policy, rope, n_stream: plan.n_stream, layer };
    let early = policy.is_early_layer(layer);
    let block_end = |m: usize, b: usize| (query_offset + (m + 1) * b).min(query_offset + seq_len_q);

    let mut current: Vec<Vec<usize>> = Vec::new();
    let mut prev_block = 0usize;
    let mut stage_reads = Vec::with_capacity(plan.stages.len());
    let mut last_block_stages = Vec::with_capacity(plan.stages.len());
    for (i, _) in plan.stages.iter().enumerate() {
        let stage = plan.stage_for(i, early);
        let b = stage.query_block;
        let blocks = seq_len_q.div_ceil(b);
        let inputs: Vec<Vec<usize>> = (0..blocks)
            .map(|m| {
                let middle = plan.middle_region(block_end(m, b));
                if i == 0 {
                    middle.collect()
                } else {
                    // a finer block inherits its parent's list, clipped to its own middle region
                    let parent = m * b / prev_block;
                    current[parent].iter().copied().filter(|x| middle.contains(x)).collect()
                }
            })
            .collect();
        let outputs: Vec<StageOutput> = inputs
            .par_iter()
            .enumerate()
            .map(|(m, input)| {
                let start = m * b;
                let end = (start + b).min(seq_len_q);
                let block = QueryBlock::from_rows(queries, query_offset, start, end)?;
                run_pruning_stage(&stage, input, &block, keys, &env)
            })
            .collect::<Result<_>>()?;
        let mut reads: Vec<usize> = outputs.iter().flat_map(|o| o.reads.iter().copied()).collect();
        reads.sort_unstable();
        reads.dedup();
        stage_reads.push(reads);
        current = outputs.into_iter().map(|o| o.indices).collect();
        last_block_stages.push(current.last().cloned().unwrap_or_default());
        prev_block = b;
    }
    Ok(MaskBuild {
        mask: SparseBlockMask {
            block_size: prev_block,
            query_offset,
            seq_len_q,
            n_sink: plan.n_sink,
            n_stream: plan.n_stream,
            indices: current,
        },
        stage_reads,
        last_block_stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::build_rope_table;

    fn relative_env<'a>(policy: &'a RopePolicySet, rope: &'a RopeTable) -> PruneEnv<'a> {
        PruneEnv { policy, rope, n_stream: 4, layer: 5 }
    }

    fn keys_from(rows: &[Vec<f32>]) -> Vec<DenseMatrix> {
        vec![DenseMatrix::from_rows(rows).unwrap()]
    }

    #[test]
    fn partition_examples() {
        let idx: Vec<usize> = (0..8).collect();
        let p = partition_chunks(&idx, 4);
        assert_eq!(p.chunks, vec![&idx[0..4], &idx[4..8]]);
        let idx: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = partition_chunks(&idx, 4).chunks.iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![4, 4, 1]);
        assert!(partition_chunks(&[], 4).chunks.is_empty());
    }

    #[test]
    fn stage_config_validation() {
        assert!(StageConfig::new(64, 8, 2048).validate().is_ok());
        assert!(StageConfig::new(64, 8, 2047).validate().is_err());
        assert!(StageConfig::new(0, 8, 16).validate().is_err());
        assert!(StageConfig::new(4, 0, 16).validate().is_err());
    }

    #[test]
    fn plan_validation() {
        for p in ["3k", "5k", "fast", "flash"] {
            PruningPlan::preset(p).unwrap().validate().unwrap();
        }
        assert!(PruningPlan::preset("9k").is_err());
        let mut p = PruningPlan::preset_3k();
        p.stages[1].query_block = 48;
        assert!(p.validate().is_err());
        let mut p = PruningPlan::preset_3k();
        p.stages[2].keep = 16 * 1024;
        assert!(p.validate().is_err());
        let mut p = PruningPlan::preset_3k();
        p.refresh_intervals.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn presets_have_expected_settings() {
        let p = PruningPlan::preset_3k();
        assert_eq!((p.n_sink, p.n_stream), (256, 1024));
        let chunks: Vec<usize> = p.stages.iter().map(|s| s.chunk_size).collect();
        assert_eq!(chunks, vec![256, 32, 8]);
        assert_eq!(p.stage_for(2, false).keep, 2048);
        assert_eq!(p.stage_for(2, true).keep, 4096);
        assert_eq!(p.refresh_intervals, vec![16, 8, 4]);
        assert_eq!(PruningPlan::preset_flash().refresh_intervals, vec![96, 24, 8]);
        assert_eq!(PruningPlan::preset_fast().refresh_intervals, vec![32, 16, 8]);
        let chunks: Vec<usize> = PruningPlan::preset_5k().stages.iter().map(|s| s.chunk_size).collect();
        assert_eq!(chunks, vec![64, 32, 16]);
    }

    #[test]
    fn select_rep_single_key_reads_nothing() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(16, 2, 10_000.0).unwrap();
        let keys = keys_from(&[vec![1.0, 0.0]]);
        let q = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let site = ChunkSite { chunk_index: 0, chunk_count: 1 };
        let r = select_rep(&q, &[0], site, keys.as_slice(), 0, &relative_env(&policy, &rope)).unwrap();
        assert_eq!(r.index, 0);
        assert!(r.steps.is_empty() && r.reads.is_empty());
    }

    fn chunk_indexed_env<'a>(policy: &'a RopePolicySet, rope: &'a RopeTable) -> PruneEnv<'a> {
        // early layer: every key of chunk 0 sits at position 0
        PruneEnv { policy, rope, n_stream: 4, layer: 0 }
    }

    #[test]
    fn select_rep_increasing_scores_picks_last() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(16, 2, 10_000.0).unwrap();
        let keys = keys_from(&(0..5).map(|i| vec![i as f32, 0.0]).collect::<Vec<_>>());
        let q = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let site = ChunkSite { chunk_index: 0, chunk_count: 1 };
        let r = select_rep(&q, &[1, 2, 3, 4], site, keys.as_slice(), 0, &chunk_indexed_env(&policy, &rope)).unwrap();
        assert_eq!(r.index, 4);
        assert_eq!(r.steps.len(), 2);
        assert_eq!((r.steps[0].left, r.steps[0].right), (0, 2));
        assert_eq!((r.steps[1].left, r.steps[1].right), (2, 3));
    }

    #[test]
    fn select_rep_ties_go_left() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(64, 2, 10_000.0).unwrap();
        let keys = keys_from(&vec![vec![0.5, 0.5]; 40]);
        let q = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        for len in 1..=33 {
            let chunk: Vec<usize> = (3..3 + len).collect();
            let site = ChunkSite { chunk_index: 0, chunk_count: 1 };
            let r = select_rep(&q, &chunk, site, keys.as_slice(), 0, &chunk_indexed_env(&policy, &rope)).unwrap();
            assert_eq!(r.index, 3, "len {len}");
        }
    }

    #[test]
    fn select_rep_rejects_empty_chunk() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(16, 2, 10_000.0).unwrap();
        let keys = keys_from(&[vec![1.0, 0.0]]);
        let q = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let site = ChunkSite { chunk_index: 0, chunk_count: 1 };
        let err = select_rep(&q, &[], site, keys.as_slice(), 0, &relative_env(&policy, &rope));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn single_query(row: &[f32], pos: usize) -> QueryBlock {
        QueryBlock::single(&[row.to_vec()], pos).unwrap()
    }

    #[test]
    fn stage_is_identity_within_budget() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(64, 2, 10_000.0).unwrap();
        let keys = keys_from(&vec![vec![1.0, 0.0]; 16]);
        let idx: Vec<usize> = (0..8).collect();
        let out = run_pruning_stage(
            &StageConfig::new(1, 4, 8),
            &idx,
            &single_query(&[1.0, 0.0], 15),
            keys.as_slice(),
            &relative_env(&policy, &rope),
        )
        .unwrap();
        assert_eq!(out.indices, idx);
        assert!(out.reads.is_empty());
    }

    #[test]
    fn constant_keys_keep_lowest_chunks() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(64, 2, 10_000.0).unwrap();
        let keys = keys_from(&vec![vec![0.3, -0.7]; 16]);
        let idx: Vec<usize> = (0..16).collect();
        let out = run_pruning_stage(
            &StageConfig::new(1, 4, 8),
            &idx,
            &single_query(&[1.0, 1.0], 15),
            keys.as_slice(),
            &relative_env(&policy, &rope),
        )
        .unwrap();
        assert_eq!(out.indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let policy = RopePolicySet::default();
        let rope = build_rope_table(64, 2, 10_000.0).unwrap();
        let keys = keys_from(&vec![vec![1.0, 0.0]; 16]);
        let env = relative_env(&policy, &rope);
        let q = single_query(&[1.0, 0.0], 15);
        for bad in [vec![3, 2, 5], vec![1, 1, 2]] {
            let r = run_pruning_stage(&StageConfig::new(1, 1, 1), &bad, &q, keys.as_slice(), &env);
            assert!(matches!(r, Err(Error::Contract(_))));
        }
    }

    #[test]
    fn middle_region_clamps() {
        let p = PruningPlan {
            stages: vec![StageConfig::new(4, 2, 4)],
            n_sink: 3,
            n_stream: 5,
            refresh_intervals: vec![1],
            early_final_keep: None,
        };
        assert_eq!(p.middle_region(8), 3..3);
        assert_eq!(p.middle_region(2), 3..3);
        assert_eq!(p.middle_region(20), 3..15);
    }

    #[test]
    fn attended_merges_sink_middle_stream() {
        let mask = SparseBlockMask {
            block_size: 4,
            query_offset: 16,
            seq_len_q: 8,
            n_sink: 2,
            n_stream: 3,
            indices: vec![vec![5, 9], vec![4, 12, 22]],
        };
        assert_eq!(mask.block_end(0), 20);
        assert_eq!(mask.attended(0), vec![0, 1, 5, 9, 17, 18, 19]);
        assert_eq!(mask.attended(1), vec![0, 1, 4, 12, 21, 22, 23]);
        // index 22 lies in block 1's streaming window
        assert!(mask.validate().is_err());
    }
}
