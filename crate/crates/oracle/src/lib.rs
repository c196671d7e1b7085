//! Brute-force references for testing. Everything here is written
//! independently of the engine: plain `Vec` rows, f64 accumulation,
//! quadratic-or-worse loops.

use std::collections::VecDeque;

/// Tolerances used when comparing engine output against these references.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSuite {
    pub attention_max_abs: f64,
}

impl Default for OracleSuite {
    fn default() -> Self {
        Self { attention_max_abs: 1e-4 }
    }
}

/// Rotates `v` to `position` with half-split pairs `(i, i + d/2)`.
pub fn rope(v: &[f32], position: usize, theta_base: f64) -> Vec<f32> {
    let d = v.len();
    let half = d / 2;
    let mut out = vec![0.0f32; d];
    for i in 0..half {
        let freq = 1.0 / theta_base.powf(2.0 * i as f64 / d as f64);
        let angle = position as f64 * freq;
        let (s, c) = (angle.sin() as f32, angle.cos() as f32);
        let (a, b) = (v[i], v[i + half]);
        out[i] = a * c - b * s;
        out[i + half] = a * s + b * c;
    }
    out
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Softmax-weighted value sum over `attended`, with logits computed from
/// keys rotated to `positions` and the query rotated to `query_position`.
/// `rope_base` of `None` means no rotation.
pub fn attend(
    query: &[f32],
    query_position: usize,
    keys: &[Vec<f32>],
    values: &[Vec<f32>],
    attended: &[usize],
    positions: &[usize],
    rope_base: Option<f64>,
) -> Vec<f64> {
    let q = match rope_base {
        Some(b) => rope(query, query_position, b),
        None => query.to_vec(),
    };
    let logits: Vec<f64> = attended
        .iter()
        .zip(positions)
        .map(|(&j, &p)| {
            let k = match rope_base {
                Some(b) => rope(&keys[j], p, b),
                None => keys[j].clone(),
            };
            dot64(&q, &k)
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0f64; values.first().map_or(0, Vec::len)];
    for (&j, w) in attended.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(&values[j]) {
            *o += w / total * *v as f64;
        }
    }
    out
}

/// Exact causal attention: query row `t` sits at `query_offset + t` and
/// attends to every key at or before it, all at original positions.
pub fn naive_attention(
    queries: &[Vec<f32>],
    keys: &[Vec<f32>],
    values: &[Vec<f32>],
    query_offset: usize,
    rope_base: Option<f64>,
) -> Vec<Vec<f64>> {
    queries
        .iter()
        .enumerate()
        .map(|(t, q)| {
            let i = query_offset + t;
            let all: Vec<usize> = (0..=i).collect();
            attend(q, i, keys, values, &all, &all, rope_base)
        })
        .collect()
}

/// Exact attention restricted to a per-row key set, original positions.
pub fn naive_masked_attention(
    queries: &[Vec<f32>],
    keys: &[Vec<f32>],
    values: &[Vec<f32>],
    query_offset: usize,
    row_sets: &[Vec<usize>],
    rope_base: Option<f64>,
) -> Vec<Vec<f64>> {
    queries
        .iter()
        .zip(row_sets)
        .enumerate()
        .map(|(t, (q, set))| attend(q, query_offset + t, keys, values, set, set, rope_base))
        .collect()
}

/// Indices of the `k` largest `q . k_j`, best first, ties to the lower index.
/// Selection by repeated linear scan.
pub fn exhaustive_topk(query: &[f32], keys: &[Vec<f32>], k: usize) -> Vec<usize> {
    let scores: Vec<f64> = keys.iter().map(|kj| dot64(query, kj)).collect();
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for j in 0..scores.len() {
            if taken[j] {
                continue;
            }
            if best.is_none_or(|b| scores[j] > scores[b]) {
                best = Some(j);
            }
        }
        let b = best.expect("k bounded by len");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Softmax mass of `q . K` on `selected` (duplicates counted once).
pub fn brute_recall(selected: &[usize], query: &[f32], keys: &[Vec<f32>]) -> f64 {
    let scores: Vec<f64> = keys.iter().map(|kj| dot64(query, kj)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut picked = selected.to_vec();
    picked.sort_unstable();
    picked.dedup();
    picked.iter().map(|&j| (scores[j] - max).exp()).sum::<f64>() / total
}

/// Highest recall achievable by any subset of exactly `size` keys, by
/// enumerating all subsets. Only for tiny inputs.
pub fn best_subset_recall(query: &[f32], keys: &[Vec<f32>], size: usize) -> f64 {
    let n = keys.len();
    assert!(n <= 20, "exhaustive search is limited to 20 keys");
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != size {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        best = best.max(brute_recall(&subset, query, keys));
    }
    best
}

/// True argmax over `chunk` of `max_t q_t . rope(k_j, positions[j])`, with
/// `queries` already rotated. Ties go to the earliest chunk element.
pub fn brute_chunk_top(
    queries: &[Vec<f32>],
    chunk: &[usize],
    keys: &[Vec<f32>],
    positions: &[usize],
    rope_base: f64,
) -> usize {
    let mut best = (f64::NEG_INFINITY, chunk[0]);
    for (&j, &p) in chunk.iter().zip(positions) {
        let k = rope(&keys[j], p, rope_base);
        let s = queries.iter().map(|q| dot64(q, &k)).fold(f64::NEG_INFINITY, f64::max);
        if s > best.0 {
            best = (s, j);
        }
    }
    best.1
}

/// One iteration of the step executor, offsets 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecStep {
    pub left: usize,
    pub right: usize,
    pub left_score: f32,
    pub right_score: f32,
    pub took_left: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecTrace {
    /// 0-based offset of the selected element.
    pub offset: usize,
    pub steps: Vec<ExecStep>,
}

/// Direct step-by-step execution of hierarchical top-1 selection on a
/// chunk of `len` elements, written with 1-based ranges.
///
/// `score(offset, left_branch)` scores the element at 0-based `offset`.
/// Each iteration splits `[first, last]` at `m = round_half_up((first +
/// last) / 2)` into `[first, m-1]` and `[m, last]`, scores the first element
/// of each and keeps the higher one (the left on ties). A single-element
/// range ends the search early.
pub fn select_rep_executor(len: usize, mut score: impl FnMut(usize, bool) -> f32) -> ExecTrace {
    assert!(len > 0);
    let mut n_iter = 0;
    while (1usize << n_iter) < len {
        n_iter += 1;
    }
    let (mut first, mut last) = (1usize, len);
    let mut steps = Vec::new();
    for _ in 0..n_iter {
        if first == last {
            break;
        }
        let m = (first + last).div_ceil(2);
        let s1 = score(first - 1, true);
        let s2 = score(m - 1, false);
        let took_left = s1 >= s2;
        steps.push(ExecStep {
            left: first - 1,
            right: m - 1,
            left_score: s1,
            right_score: s2,
            took_left,
        });
        if took_left {
            last = m - 1;
        } else {
            first = m;
        }
    }
    ExecTrace { offset: first - 1, steps }
}

/// Resident sets (most recent last) after each access of a textbook LRU,
/// with per-access hit flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LruHistory {
    pub resident: Vec<Vec<u64>>,
    pub hits: Vec<bool>,
}

impl LruHistory {
    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|&&h| h).count()
    }
}

pub fn reference_lru(trace: &[u64], capacity: usize) -> LruHistory {
    let mut queue: VecDeque<u64> = VecDeque::new();
    let mut resident = Vec::with_capacity(trace.len());
    let mut hits = Vec::with_capacity(trace.len());
    for &page in trace {
        let pos = queue.iter().position(|&p| p == page);
        hits.push(pos.is_some());
        if let Some(i) = pos {
            queue.remove(i);
        }
        if capacity > 0 {
            queue.push_back(page);
            if queue.len() > capacity {
                queue.pop_front();
            }
        }
        resident.push(queue.iter().copied().collect());
    }
    LruHistory { resident, hits }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_examples() {
        let h = reference_lru(&[0, 1, 0], 1);
        assert_eq!(h.resident, vec![vec![0], vec![1], vec![0]]);
        let h = reference_lru(&[0, 1, 0, 2, 1], 3);
        assert_eq!(h.hits, vec![false, false, true, false, true]);
    }

    #[test]
    fn naive_single_token_and_uniform() {
        let out = naive_attention(&[vec![1.0, 2.0]], &[vec![3.0, 4.0]], &[vec![5.0, 6.0]], 0, Some(10_000.0));
        assert_eq!(out[0], vec![5.0, 6.0]);
        let out = naive_attention(
            &[vec![0.0, 0.0]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![1.0, 0.0], vec![3.0, 2.0]],
            1,
            None,
        );
        assert_eq!(out[0], vec![2.0, 1.0]);
    }

    #[test]
    fn chunk_top_ties_and_monotone() {
        let keys: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32, 0.0]).collect();
        let q = vec![vec![1.0, 0.0]];
        let chunk: Vec<usize> = (0..8).collect();
        let pos = vec![0; 8];
        assert_eq!(brute_chunk_top(&q, &chunk, &keys, &pos, 10_000.0), 7);
        let flat = vec![vec![1.0, 0.0]; 8];
        assert_eq!(brute_chunk_top(&q, &chunk, &flat, &pos, 10_000.0), 0);
    }

    #[test]
    fn executor_reads_at_most_two_per_iteration() {
        let t = select_rep_executor(8, |o, _| o as f32);
        assert_eq!(t.offset, 7);
        assert_eq!(t.steps.len(), 3);
        let t = select_rep_executor(1, |_, _| 0.0);
        assert_eq!((t.offset, t.steps.len()), (0, 0));
    }

    #[test]
    fn topk_and_best_subset() {
        let keys = vec![vec![0.0, 1.0], vec![3.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(exhaustive_topk(&[1.0, 0.0], &keys, 2), vec![1, 2]);
        let best = best_subset_recall(&[1.0, 0.0], &keys, 2);
        assert!((best - brute_recall(&[1, 2], &[1.0, 0.0], &keys)).abs() < 1e-15);
    }
}
