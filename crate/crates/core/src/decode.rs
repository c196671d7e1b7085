//! Stage-cached decoding.
//!
//! Each pruning stage keeps a per-layer cached index list and a modular
//! counter; a stage re-runs only when its counter is zero, otherwise the
//! cached list feeds the next stage. Misses from every phase of a step are
//! committed to the banks once, at the end of the step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{AccessOutcome, BankId, CostModel, PageId, StoreConfig, TieredKvStore};
use crate::pruning::{build_mask_from, run_pruning_stage, PruneEnv, PruningPlan, QueryBlock, SparseBlockMask};
use crate::rope_policy::RopePolicySet;
use crate::sparse_attention::{sparse_attention_rows, AttentionOutput, KvSource, LayerKv};
use crate::tensor::{build_rope_table, DenseMatrix, RopeTable, DEFAULT_THETA_BASE};
use crate::workload::AttentionWorkload;

/// One new token's per-head q/k/v rows for a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenQkv {
    pub q: Vec<Vec<f32>>,
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Input of one decode step, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub layers: Vec<TokenQkv>,
}

impl StepInput {
    /// Query row `q_row` of `workload` with the key/value rows at its position.
    pub fn from_workload(workload: &AttentionWorkload, q_row: usize) -> Result<Self> {
        if q_row >= workload.seq_len_q() {
            return Err(Error::Range(format!(
                "query row {q_row} outside {} rows",
                workload.seq_len_q()
            )));
        }
        let pos = workload.query_offset() + q_row;
        let layers = (0..workload.num_layers())
            .map(|l| {
                let heads = 0..workload.num_heads();
                TokenQkv {
                    q: heads.clone().map(|h| workload.queries(l, h).row(q_row).to_vec()).collect(),
                    k: heads.clone().map(|h| workload.keys(l, h).row(pos).to_vec()).collect(),
                    v: heads.map(|h| workload.values(l, h).row(pos).to_vec()).collect(),
                }
            })
            .collect();
        Ok(Self { layers })
    }
}

/// Flag `i` is true iff stage `i`'s counter is zero.
pub fn refresh_due(counters: &[usize], plan: &PruningPlan) -> Vec<bool> {
    counters
        .iter()
        .zip(&plan.refresh_intervals)
        .map(|(&c, _)| c == 0)
        .collect()
}

/// Number of leading stages that were served from cache, when the rest all
/// refreshed. Mixed patterns give `None`.
pub fn cached_prefix(refreshed: &[bool]) -> Option<usize> {
    let lead = refreshed.iter().take_while(|&&r| !r).count();
    refreshed[lead..].iter().all(|&r| r).then_some(lead)
}

/// Label for a cached-stage count: "none", "S1", "S1&2", ..., "all".
pub fn scenario_label(cached: usize, num_stages: usize) -> String {
    match cached {
        0 => "none".to_string(),
        c if c == num_stages => "all".to_string(),
        c => {
            let parts: Vec<String> = (1..=c).map(|i| i.to_string()).collect();
            format!("S{}", parts.join("&"))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub refreshed: Vec<bool>,
    pub cached_stages: Option<usize>,
    /// Modeled latency per stage, summed over layers.
    pub stage_latency: Vec<f64>,
    pub stage_page_accesses: Vec<usize>,
    pub bsa_latency: f64,
    pub bsa_page_accesses: usize,
    pub mask_hits: usize,
    pub mask_misses: usize,
    pub sa_hits: usize,
    pub sa_misses: usize,
    pub mask_hit_ratio: Option<f64>,
    pub sa_hit_ratio: Option<f64>,
    /// Final-stage index list length per layer.
    pub mask_sizes: Vec<usize>,
    pub mask_evictions: usize,
    pub sa_evictions: usize,
    pub uncached_pages: usize,
    /// Distinct pages each bank was asked for during the step.
    #[serde(skip)]
    pub mask_pages: Vec<PageId>,
    #[serde(skip)]
    pub sa_pages: Vec<PageId>,
}

impl StepTelemetry {
    pub fn total_latency(&self) -> f64 {
        self.stage_latency.iter().sum::<f64>() + self.bsa_latency
    }
}

fn ratio(hits: usize, misses: usize) -> Option<f64> {
    let total = hits + misses;
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Attention output of one step: `[layer][head]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub rows: Vec<Vec<Vec<f32>>>,
}

impl StepOutput {
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.rows.iter().flatten().flatten() {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub output: StepOutput,
    pub telemetry: StepTelemetry,
}

/// A failed step. When the failure happened at the commit point the output
/// and telemetry are complete and the engine remains usable.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("decode step failed: {error}")]
pub struct StepError {
    pub error: Error,
    pub output: Option<StepOutput>,
    pub telemetry: Option<StepTelemetry>,
}

impl From<Error> for StepError {
    fn from(error: Error) -> Self {
        Self { error, output: None, telemetry: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutput {
    pub outputs: Vec<AttentionOutput>,
    pub masks: Vec<SparseBlockMask>,
}

#[derive(Debug, Clone)]
pub struct DecodeEngine {
    plan: PruningPlan,
    policy: RopePolicySet,
    cost: CostModel,
    store_config: StoreConfig,
    theta_base: f64,
    store: Option<TieredKvStore>,
    rope: Option<RopeTable>,
    // [layer][stage]
    caches: Vec<Vec<Option<Vec<usize>>>>,
    cache_steps: Vec<Vec<usize>>,
    counters: Vec<usize>,
    step: usize,
    appended: usize,
}

impl DecodeEngine {
    pub fn new(plan: PruningPlan, policy: RopePolicySet, store_config: StoreConfig, cost: CostModel) -> Result<Self> {
        plan.validate()?;
        policy.validate()?;
        cost.validate()?;
        let stages = plan.stages.len();
        Ok(Self {
            plan,
            policy,
            cost,
            store_config,
            theta_base: DEFAULT_THETA_BASE,
            store: None,
            rope: None,
            caches: Vec::new(),
            cache_steps: Vec::new(),
            counters: vec![0; stages],
            step: 0,
            appended: 0,
        })
    }

    pub fn with_theta_base(mut self, theta_base: f64) -> Self {
        self.theta_base = theta_base;
        self
    }

    pub fn plan(&self) -> &PruningPlan {
        &self.plan
    }

    pub fn counters(&self) -> &[usize] {
        &self.counters
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn store(&self) -> Option<&TieredKvStore> {
        self.store.as_ref()
    }

    /// Cached list of `stage` at `layer`, with the step that produced it.
    /// Lists copied from prefill report step 0.
    pub fn cached(&self, layer: usize, stage: usize) -> Option<(&[usize], usize)> {
        let list = self.caches.get(layer)?.get(stage)?.as_deref()?;
        Some((list, self.cache_steps[layer][stage]))
    }

    fn ensure_rope(&mut self, kv_len: usize, head_dim: usize) -> Result<()> {
        let needed = self.plan.rope_positions_needed(kv_len, &self.policy);
        let have = self.rope.as_ref().map_or(0, RopeTable::max_position);
        if needed > have {
            // grow geometrically; entries depend only on the position
            let size = needed.max(have * 2);
            self.rope = Some(build_rope_table(size, head_dim, self.theta_base)?);
        }
        Ok(())
    }

    /// Prunes and attends every query block of `workload`, loads the host
    /// tier, warms both banks from the final block and seeds stage caches.
    pub fn prefill(&mut self, workload: &AttentionWorkload) -> Result<PrefillOutput> {
        if self.store.is_some() {
            return Err(Error::Contract("engine already prefilled".into()));
        }
        let t_kv = workload.seq_len_kv();
        self.ensure_rope(t_kv, workload.head_dim())?;
        let rope = self.rope.as_ref().expect("rope table built above");
        let mut store = TieredKvStore::from_workload(self.store_config, workload, t_kv)?;
        let mut outputs = Vec::with_capacity(workload.num_layers());
        let mut masks = Vec::with_capacity(workload.num_layers());
        let mut caches = Vec::with_capacity(workload.num_layers());
        let mut mask_pages: Vec<PageId> = Vec::new();
        let mut sa_pages: Vec<PageId> = Vec::new();
        for layer in 0..workload.num_layers() {
            let kv = LayerKv::of(workload, layer);
            let queries = workload.layer_queries(layer);
            let build = build_mask_from(&self.plan, queries, workload.query_offset(), &kv, layer, &self.policy, rope)?;
            let attn = sparse_attention_rows(queries, &build.mask, &self.policy, rope, &kv, false)?;
            for reads in build.stage_reads.iter().rev() {
                mask_pages.extend(store.pages_for(layer, reads)?);
            }
            if build.mask.num_blocks() > 0 {
                let last = build.mask.attended(build.mask.num_blocks() - 1);
                sa_pages.extend(store.pages_for(layer, &last)?);
            }
            caches.push(build.last_block_stages.into_iter().map(Some).collect::<Vec<_>>());
            outputs.push(attn.output);
            masks.push(build.mask);
        }
        // warming is best effort: pages beyond capacity simply stay on the host
        for (bank, pages) in [(BankId::Mask, mask_pages), (BankId::Sa, sa_pages)] {
            match store.commit(bank, &pages) {
                Ok(_) | Err(Error::PartialCommit { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        store.reset_counters();
        self.cache_steps = vec![vec![0; self.plan.stages.len()]; workload.num_layers()];
        self.caches = caches;
        self.store = Some(store);
        Ok(PrefillOutput { outputs, masks })
    }

    /// Appends one token to every layer and attends it.
    pub fn step(&mut self, input: &StepInput) -> std::result::Result<StepResult, StepError> {
        let (num_layers, num_heads, head_dim) = match &self.store {
            Some(s) => (s.num_layers(), s.num_heads(), s.head_dim()),
            None => return Err(Error::Contract("step before prefill".into()).into()),
        };
        if input.layers.len() != num_layers {
            return Err(Error::Dimension(format!(
                "step input has {} layers, engine has {num_layers}",
                input.layers.len()
            ))
            .into());
        }
        for t in &input.layers {
            if t.q.len() != num_heads || t.q.iter().any(|r| r.len() != head_dim) {
                return Err(Error::Dimension(format!("queries must be {num_heads} rows of {head_dim}")).into());
            }
        }
        let n_stages = self.plan.stages.len();
        let due = refresh_due(&self.counters, &self.plan);
        {
            let store = self.store.as_mut().expect("checked above");
            for (layer, t) in input.layers.iter().enumerate() {
                store.append(layer, &t.k, &t.v)?;
            }
        }
        let kv_len = self.store.as_ref().expect("checked above").len(0);
        self.ensure_rope(kv_len, head_dim)?;

        let mut tel = StepTelemetry {
            step: self.step,
            refreshed: due.clone(),
            cached_stages: cached_prefix(&due),
            stage_latency: vec![0.0; n_stages],
            stage_page_accesses: vec![0; n_stages],
            ..StepTelemetry::default()
        };
        let mut mask_missing: Vec<Vec<PageId>> = vec![Vec::new(); n_stages];
        let mut sa_missing: Vec<PageId> = Vec::new();
        let mut rows = Vec::with_capacity(num_layers);
        let position = kv_len - 1;

        for (layer, token) in input.layers.iter().enumerate() {
            let query = QueryBlock::single(&token.q, position)?;
            let early = self.policy.is_early_layer(layer);
            let mut current: Vec<usize> = self.plan.middle_region(kv_len).collect();
            for s in 0..n_stages {
                let cached = self.caches[layer][s].is_some();
                if due[s] || !cached {
                    let mut cfg = self.plan.stage_for(s, early);
                    cfg.query_block = 1;
                    let store = self.store.as_ref().expect("checked above");
                    let rope = self.rope.as_ref().expect("built above");
                    let env = PruneEnv { policy: &self.policy, rope, n_stream: self.plan.n_stream, layer };
                    let view = store.view(BankId::Mask, layer);
                    let out = run_pruning_stage(&cfg, &current, &query, &view, &env)?;
                    let outcome = self.store.as_mut().expect("checked above").access(BankId::Mask, layer, &out.reads)?;
                    self.record_mask(&mut tel, s, &outcome);
                    tel.mask_pages.extend(outcome.resident.iter().chain(&outcome.missing).copied());
                    mask_missing[s].extend(outcome.missing);
                    self.caches[layer][s] = Some(out.indices);
                    self.cache_steps[layer][s] = self.step;
                }
                current = self.caches[layer][s].clone().expect("filled above");
            }
            tel.mask_sizes.push(current.len());

            let mask = SparseBlockMask {
                block_size: 1,
                query_offset: position,
                seq_len_q: 1,
                n_sink: self.plan.n_sink,
                n_stream: self.plan.n_stream,
                indices: vec![current],
            };
            let qmats: Vec<DenseMatrix> = token
                .q
                .iter()
                .map(|r| DenseMatrix::from_rows(std::slice::from_ref(r)))
                .collect::<Result<_>>()?;
            let store = self.store.as_ref().expect("checked above");
            let rope = self.rope.as_ref().expect("built above");
            let attn = sparse_attention_rows(&qmats, &mask, &self.policy, rope, &store.view(BankId::Sa, layer), false)?;
            let outcome = self.store.as_mut().expect("checked above").access(BankId::Sa, layer, &attn.accessed)?;
            tel.bsa_latency += self.cost.outcome_latency(&outcome);
            tel.bsa_page_accesses += outcome.total();
            tel.sa_hits += outcome.resident.len();
            tel.sa_misses += outcome.missing.len();
            tel.sa_pages.extend(outcome.resident.iter().chain(&outcome.missing).copied());
            sa_missing.extend(outcome.missing);
            rows.push(attn.output.heads.iter().map(|m| m.row(0).to_vec()).collect());
        }

        // later stages first, so a short bank keeps the most selective pages
        let mask_order: Vec<PageId> = mask_missing.into_iter().rev().flatten().collect();
        let store = self.store.as_mut().expect("checked above");
        let mut uncached = Vec::new();
        for (bank, pages) in [(BankId::Mask, mask_order), (BankId::Sa, sa_missing)] {
            match store.commit(bank, &pages) {
                Ok(evicted) => match bank {
                    BankId::Mask => tel.mask_evictions += evicted.len(),
                    BankId::Sa => tel.sa_evictions += evicted.len(),
                },
                Err(Error::PartialCommit { uncached: u }) => uncached.extend(u),
                Err(e) => return Err(e.into()),
            }
        }
        tel.uncached_pages = uncached.len();
        for pages in [&mut tel.mask_pages, &mut tel.sa_pages] {
            pages.sort_unstable();
            pages.dedup();
        }
        tel.mask_hit_ratio = ratio(tel.mask_hits, tel.mask_misses);
        tel.sa_hit_ratio = ratio(tel.sa_hits, tel.sa_misses);

        for (c, &n) in self.counters.iter_mut().zip(&self.plan.refresh_intervals) {
            *c = (*c + 1) % n;
        }
        self.step += 1;
        self.appended += 1;
        let output = StepOutput { rows };
        if uncached.is_empty() {
            Ok(StepResult { output, telemetry: tel })
        } else {
            Err(StepError {
                error: Error::PartialCommit { uncached },
                output: Some(output),
                telemetry: Some(tel),
            })
        }
    }

    fn record_mask(&self, tel: &mut StepTelemetry, stage: usize, outcome: &AccessOutcome) {
        tel.stage_latency[stage] += self.cost.outcome_latency(outcome);
        tel.stage_page_accesses[stage] += outcome.total();
        tel.mask_hits += outcome.resident.len();
        tel.mask_misses += outcome.missing.len();
    }
}

/// Prunes and attends a single decode query from scratch: every stage runs
/// on the current query, starting from the middle region.
///
/// Returns the per-head output rows and the final index list.
pub fn stateless_decode_step<K: KvSource + ?Sized>(
    plan: &PruningPlan,
    policy: &RopePolicySet,
    rope: &RopeTable,
    kv: &K,
    queries: &[Vec<f32>],
    layer: usize,
) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let kv_len = kv.len();
    if kv_len == 0 {
        return Err(Error::Range("no keys to attend".into()));
    }
    let position = kv_len - 1;
    let query = QueryBlock::single(queries, position)?;
    let env = PruneEnv { policy, rope, n_stream: plan.n_stream, layer };
    let early = policy.is_early_layer(layer);
    let mut current: Vec<usize> = plan.middle_region(kv_len).collect();
    for s in 0..plan.stages.len() {
        let mut cfg = plan.stage_for(s, early);
        cfg.query_block = 1;
        current = run_pruning_stage(&cfg, &current, &query, kv, &env)?.indices;
    }
    let mask = SparseBlockMask {
        block_size: 1,
        query_offset: position,
        seq_len_q: 1,
        n_sink: plan.n_sink,
        n_stream: plan.n_stream,
        indices: vec![current.clone()],
    };
    let qmats: Vec<DenseMatrix> = queries
        .iter()
        .map(|r| DenseMatrix::from_rows(std::slice::from_ref(r)))
        .collect::<Result<_>>()?;
    let attn = sparse_attention_rows(&qmats, &mask, policy, rope, kv, false)?;
    Ok((attn.output.heads.iter().map(|m| m.row(0).to_vec()).collect(), current))
}

/// Runs `steps` stateless decode steps over query rows `first_row..` of
/// `workload`, each seeing keys up to its own position.
pub fn stateless_decode(
    plan: &PruningPlan,
    policy: &RopePolicySet,
    workload: &AttentionWorkload,
    first_row: usize,
    steps: usize,
) -> Result<Vec<StepOutput>> {
    let rope = build_rope_table(
        plan.rope_positions_needed(workload.seq_len_kv(), policy),
        workload.head_dim(),
        DEFAULT_THETA_BASE,
    )?;
    (first_row..first_row + steps)
        .map(|row| {
            let input = StepInput::from_workload(workload, row)?;
            let kv_len = workload.query_offset() + row + 1;
            let rows = input
                .layers
                .iter()
                .enumerate()
                .map(|(layer, t)| {
                    let kv = LayerKv::truncated(workload, layer, kv_len);
                    stateless_decode_step(plan, policy, &rope, &kv, &t.q, layer).map(|(r, _)| r)
                })
                .collect::<Result<_>>()?;
            Ok(StepOutput { rows })
        })
        .collect()
}
