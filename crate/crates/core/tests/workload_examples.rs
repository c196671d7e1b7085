use hipprune::sparse_attention::chunk_sparsity_histogram;
use hipprune::{exact_topk, generate_synthetic, SyntheticConfig};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn nearby_keys_are_more_similar_than_distant_ones() {
    let cfg = SyntheticConfig {
        num_heads: 2,
        num_layers: 1,
        seq_len_q: 8,
        seq_len_kv: 1024,
        head_dim: 32,
        locality_scale: 64.0,
        needles: vec![],
        seed: 0,
    };
    let w = generate_synthetic(&cfg).unwrap();
    for h in 0..2 {
        let k = w.keys(0, h);
        let mean_at = |gap: usize| {
            let n = 1024 - gap;
            (0..n).map(|i| cosine(k.row(i), k.row(i + gap))).sum::<f64>() / n as f64
        };
        assert!(mean_at(1) > mean_at(512));
    }
}

#[test]
fn planted_needle_is_the_top_key() {
    let cfg = SyntheticConfig {
        num_heads: 4,
        num_layers: 2,
        seq_len_q: 16,
        seq_len_kv: 8192,
        head_dim: 64,
        locality_scale: 32.0,
        needles: vec![(4096, 100.0)],
        seed: 9,
    };
    let w = generate_synthetic(&cfg).unwrap();
    for l in 0..2 {
        for h in 0..4 {
            assert_eq!(exact_topk(w.queries(l, h).row(15), w.keys(l, h), 1), vec![4096]);
        }
    }
}

#[test]
fn top_k_keys_cluster_into_few_chunks() {
    let cfg = SyntheticConfig {
        num_heads: 2,
        num_layers: 1,
        seq_len_q: 1,
        seq_len_kv: 8192,
        head_dim: 64,
        locality_scale: 32.0,
        needles: vec![],
        seed: 1,
    };
    let w = generate_synthetic(&cfg).unwrap();
    for h in 0..2 {
        let hist = chunk_sparsity_histogram(w.queries(0, h).row(0), w.keys(0, h), 128, 64).unwrap();
        assert!(hist.empty_fraction > 0.5, "empty fraction {}", hist.empty_fraction);
        assert!(hist.chunks_with_topk <= 128);
    }
}
