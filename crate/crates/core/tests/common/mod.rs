#![allow(dead_code)]

use hipprune::pruning::{PruningPlan, StageConfig};
use hipprune::{generate_synthetic, AttentionWorkload, DenseMatrix, SyntheticConfig};

pub fn workload(seed: u64, heads: usize, layers: usize, t_kv: usize, t_q: usize, d: usize) -> AttentionWorkload {
    generate_synthetic(&SyntheticConfig {
        num_heads: heads,
        num_layers: layers,
        seq_len_q: t_q,
        seq_len_kv: t_kv,
        head_dim: d,
        locality_scale: 8.0,
        needles: vec![],
        seed,
    })
    .unwrap()
}

/// A three-stage plan small enough that every stage prunes at a few
/// hundred tokens.
pub fn tiny_plan(refresh: [usize; 3]) -> PruningPlan {
    PruningPlan {
        stages: vec![
            StageConfig::new(8, 16, 256),
            StageConfig::new(8, 8, 96),
            StageConfig::new(8, 4, 32),
        ],
        n_sink: 8,
        n_stream: 32,
        refresh_intervals: refresh.to_vec(),
        early_final_keep: Some(48),
    }
}

pub fn rows(m: &DenseMatrix) -> Vec<Vec<f32>> {
    m.iter_rows().map(<[f32]>::to_vec).collect()
}
