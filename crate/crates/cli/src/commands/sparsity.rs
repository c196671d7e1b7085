use hipprune::sparse_attention::{chunk_sparsity_histogram, rotate_keys, SparsityHistogram};
use hipprune::tensor::apply_rope;
use hipprune::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rope_for;
use crate::config::{OutputPaths, RunConfig};
use crate::report::{ensure_dir, write_csv, write_json, CheckRecord, ReportHeader};

/// Chunk statistics for one chunk size, pooled over layers and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub chunk_size: usize,
    pub k: usize,
    pub num_chunks: usize,
    pub mean_empty_fraction: f64,
    pub mean_chunks_with_topk: f64,
    pub max_chunks_with_topk: usize,
    /// Chunks by top-k occupancy: empty, <=12.5%, <=25%, <=50%, <=100%.
    pub share_bin_empty: usize,
    pub share_bin_12_5: usize,
    pub share_bin_25: usize,
    pub share_bin_50: usize,
    pub share_bin_100: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub header: ReportHeader,
    pub rows: Vec<SparsityRow>,
    pub checks: Vec<CheckRecord>,
}

fn pool(chunk_size: usize, k: usize, hists: &[SparsityHistogram]) -> SparsityRow {
    let n = hists.len().max(1) as f64;
    let mut bins = [0usize; 5];
    for h in hists {
        for (b, v) in bins.iter_mut().zip(h.share_bins) {
            *b += v;
        }
    }
    SparsityRow {
        chunk_size,
        k,
        num_chunks: hists.first().map_or(0, |h| h.num_chunks),
        mean_empty_fraction: hists.iter().map(|h| h.empty_fraction).sum::<f64>() / n,
        mean_chunks_with_topk: hists.iter().map(|h| h.chunks_with_topk as f64).sum::<f64>() / n,
        max_chunks_with_topk: hists.iter().map(|h| h.chunks_with_topk).max().unwrap_or(0),
        share_bin_empty: bins[0],
        share_bin_12_5: bins[1],
        share_bin_25: bins[2],
        share_bin_50: bins[3],
        share_bin_100: bins[4],
    }
}

/// Where the final query's exact top-k keys fall across fixed-size chunks,
/// for every configured chunk size. Logits use RoPE at original positions.
pub fn cmd_sparsity_report(config: &RunConfig, out: &OutputPaths) -> Result<SparsityReport> {
    config.validate()?;
    ensure_dir(&out.dir)?;
    let w = config.workload(config.seed)?;
    let t_kv = w.seq_len_kv();
    if let Some(&c) = config.chunk_sizes.iter().find(|&&c| c > t_kv) {
        return Err(Error::Config(format!("chunk size {c} exceeds sequence length {t_kv}")));
    }
    let rope = rope_for(config, t_kv)?;
    let last = w.seq_len_q() - 1;
    let q_pos = w.query_offset() + last;
    let slots: Vec<(usize, usize)> = (0..w.num_layers()).flat_map(|l| (0..w.num_heads()).map(move |h| (l, h))).collect();
    let per_slot: Vec<Vec<SparsityHistogram>> = slots
        .par_iter()
        .map(|&(l, h)| {
            let keys = rotate_keys(w.keys(l, h), &rope)?;
            let q = apply_rope(w.queries(l, h).row(last), q_pos, &rope)?;
            config
                .chunk_sizes
                .iter()
                .map(|&c| chunk_sparsity_histogram(&q, &keys, config.topk, c))
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SparsityRow> = config
        .chunk_sizes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let hists: Vec<SparsityHistogram> = per_slot.iter().map(|s| s[i].clone()).collect();
            pool(c, config.topk, &hists)
        })
        .collect();
    let k_eff = config.topk.min(t_kv);
    let bound_ok = rows.iter().all(|r| r.max_chunks_with_topk <= k_eff);
    let checks = vec![
        CheckRecord::new(
            "chunks_with_topk_at_most_k",
            bound_ok,
            format!("k = {k_eff}"),
        ),
        CheckRecord::new(
            "one_row_per_chunk_size",
            rows.len() == config.chunk_sizes.len(),
            format!("{} rows", rows.len()),
        ),
    ];
    let report = SparsityReport {
        header: ReportHeader::new("sparsity-report", config),
        rows,
        checks,
    };
    write_json(&out.file("sparsity.json"), &report)?;
    write_csv(&out.file("sparsity.csv"), &report.rows)?;
    Ok(report)
}
