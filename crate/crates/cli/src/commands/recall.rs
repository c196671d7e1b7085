use hipprune::pruning::{build_mask_from, PruningPlan};
use hipprune::rope_policy::RopePolicySet;
use hipprune::sparse_attention::{recall_from_logits, rotate_keys};
use hipprune::tensor::{apply_rope, dot, RopeTable};
use hipprune::workload::AttentionWorkload;
use hipprune::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rope_for;
use crate::config::{OutputPaths, RunConfig};
use crate::report::{ensure_dir, write_csv, write_json, CheckRecord, ReportHeader};

/// Mean recalls of one layer of one workload, averaged over query rows and heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRecall {
    pub mask: f64,
    pub random: f64,
    pub topk: f64,
    /// Mean number of attended keys per row.
    pub budget: f64,
    /// Largest attended set of any block.
    pub max_attended: usize,
}

fn softmax_topk_recall(logits: &[f32], budget: usize) -> f64 {
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let max = sorted.first().copied().unwrap_or(0.0) as f64;
    let total: f64 = sorted.iter().map(|&s| (s as f64 - max).exp()).sum();
    let top: f64 = sorted.iter().take(budget).map(|&s| (s as f64 - max).exp()).sum();
    (top / total).clamp(0.0, 1.0)
}

/// Attention-mass recall of the plan's mask, of a random set with the same
/// budget (same sink and streaming tokens, middle drawn uniformly), and of
/// the exact top-k of that size. Truth is softmax over RoPE logits at
/// original positions.
pub fn layer_recall(
    plan: &PruningPlan,
    policy: &RopePolicySet,
    rope: &RopeTable,
    w: &AttentionWorkload,
    layer: usize,
    rng_seed: u64,
) -> Result<LayerRecall> {
    let build = build_mask_from(
        plan,
        w.layer_queries(layer),
        w.query_offset(),
        w.layer_keys(layer),
        layer,
        policy,
        rope,
    )?;
    let mask = build.mask;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut random_sets = Vec::with_capacity(mask.num_blocks());
    for m in 0..mask.num_blocks() {
        let end = mask.block_end(m);
        let middle: Vec<usize> = plan.middle_region(end).collect();
        let take = mask.indices[m].len().min(middle.len());
        let mut set: Vec<usize> = (0..plan.n_sink.min(end)).collect();
        let mut picked: Vec<usize> = sample(&mut rng, middle.len(), take).into_iter().map(|i| middle[i]).collect();
        picked.sort_unstable();
        set.extend(picked);
        set.extend(end.saturating_sub(plan.n_stream).max(plan.n_sink.min(end))..end);
        random_sets.push(set);
    }
    let attended: Vec<Vec<usize>> = (0..mask.num_blocks()).map(|m| mask.attended(m)).collect();
    let max_attended = attended.iter().map(Vec::len).max().unwrap_or(0);

    let per_head: Vec<[f64; 4]> = (0..w.num_heads())
        .into_par_iter()
        .map(|h| {
            let keys = rotate_keys(w.keys(layer, h), rope)?;
            let mut acc = [0.0f64; 4];
            for t in 0..w.seq_len_q() {
                let i = w.query_offset() + t;
                let m = t / mask.block_size;
                let q = apply_rope(w.queries(layer, h).row(t), i, rope)?;
                let logits: Vec<f32> = (0..=i).map(|j| dot(&q, keys.row(j))).collect();
                let a = &attended[m][..attended[m].partition_point(|&j| j <= i)];
                let r = &random_sets[m][..random_sets[m].partition_point(|&j| j <= i)];
                acc[0] += recall_from_logits(a, &logits);
                acc[1] += recall_from_logits(r, &logits);
                acc[2] += softmax_topk_recall(&logits, a.len());
                acc[3] += a.len() as f64;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let n = (w.num_heads() * w.seq_len_q()) as f64;
    let sum = |k: usize| per_head.iter().map(|a| a[k]).sum::<f64>() / n;
    Ok(LayerRecall {
        mask: sum(0),
        random: sum(1),
        topk: sum(2),
        budget: sum(3),
        max_attended,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub layer: usize,
    pub pruning_policy: String,
    pub mask_mean: f64,
    pub mask_std: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub topk_mean: f64,
    pub topk_std: f64,
    pub mean_budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub header: ReportHeader,
    pub seeds: Vec<u64>,
    pub rows: Vec<RecallRow>,
    pub mean_mask_recall: f64,
    pub mean_random_recall: f64,
    pub mean_topk_recall: f64,
    pub checks: Vec<CheckRecord>,
}

/// Recall of the configured plan per layer, mean and population standard
/// deviation over `seeds` consecutive workload seeds.
pub fn cmd_recall_report(config: &RunConfig, out: &OutputPaths) -> Result<RecallReport> {
    config.validate()?;
    ensure_dir(&out.dir)?;
    let plan = config.plan()?;
    let policy = config.policy();
    let seeds: Vec<u64> = (0..config.seeds as u64).map(|s| config.seed + s).collect();
    let mut per_seed: Vec<Vec<LayerRecall>> = Vec::with_capacity(seeds.len());
    let mut budget_ok = true;
    let mut range_ok = true;
    for &seed in &seeds {
        let w = config.workload(seed)?;
        let rope = rope_for(config, w.seq_len_kv())?;
        let layers: Vec<LayerRecall> = (0..w.num_layers())
            .map(|l| layer_recall(&plan, &policy, &rope, &w, l, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ l as u64))
            .collect::<Result<_>>()?;
        for (l, r) in layers.iter().enumerate() {
            let keep = plan.stage_for(plan.stages.len() - 1, policy.is_early_layer(l)).keep;
            budget_ok &= r.max_attended <= plan.n_sink + keep + plan.n_stream;
            range_ok &= [r.mask, r.random, r.topk].iter().all(|x| (0.0..=1.0).contains(x));
        }
        per_seed.push(layers);
    }
    let num_layers = per_seed.first().map_or(0, Vec::len);
    let rows: Vec<RecallRow> = (0..num_layers)
        .map(|l| {
            let col = |f: fn(&LayerRecall) -> f64| -> Vec<f64> { per_seed.iter().map(|s| f(&s[l])).collect() };
            let (mask_mean, mask_std) = mean_std(&col(|r| r.mask));
            let (random_mean, random_std) = mean_std(&col(|r| r.random));
            let (topk_mean, topk_std) = mean_std(&col(|r| r.topk));
            let (mean_budget, _) = mean_std(&col(|r| r.budget));
            RecallRow {
                layer: l,
                pruning_policy: policy.pruning_policy(l).to_string(),
                mask_mean,
                mask_std,
                random_mean,
                random_std,
                topk_mean,
                topk_std,
                mean_budget,
            }
        })
        .collect();
    let avg = |f: fn(&RecallRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let report = RecallReport {
        header: ReportHeader::new("recall-report", config),
        seeds,
        mean_mask_recall: avg(|r| r.mask_mean),
        mean_random_recall: avg(|r| r.random_mean),
        mean_topk_recall: avg(|r| r.topk_mean),
        rows,
        checks: vec![
            CheckRecord::new("recall_in_unit_interval", range_ok, ""),
            CheckRecord::new("attended_within_budget", budget_ok, "n_sink + k + n_stream"),
        ],
    };
    write_json(&out.file("recall.json"), &report)?;
    write_csv(&out.file("recall.csv"), &report.rows)?;
    Ok(report)
}
