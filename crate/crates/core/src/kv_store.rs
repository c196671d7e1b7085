//! Simulated two-tier paged KV cache.
//!
//! The host tier holds every token. Two device banks (one for mask
//! selection, keys only; one for sparse attention, keys and values) cache
//! pages under LRU. Reads never touch bank contents: `access` classifies
//! pages and updates recency, `commit` inserts misses and evicts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::KeySource;
use crate::sparse_attention::KvSource;
use crate::tensor::DenseMatrix;
use crate::workload::AttentionWorkload;

pub const DEFAULT_PAGE_SIZE: usize = 64;

/// Host-over-device latency ratio per page.
pub const DEFAULT_HOST_COST_RATIO: f64 = 31.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PageId {
    pub layer: usize,
    pub page: usize,
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}:P{}", self.layer, self.page)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankId {
    Mask,
    Sa,
}

impl BankId {
    fn slot(self) -> usize {
        match self {
            BankId::Mask => 0,
            BankId::Sa => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub device_access_cost: f64,
    pub host_access_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            device_access_cost: 1.0,
            host_access_cost: DEFAULT_HOST_COST_RATIO,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.device_access_cost.is_finite()
            && self.host_access_cost.is_finite()
            && self.device_access_cost > 0.0
            && self.host_access_cost >= self.device_access_cost;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "cost model needs host >= device > 0, got host={} device={}",
                self.host_access_cost, self.device_access_cost
            )))
        }
    }

    /// `accesses * (h * device + (1 - h) * host)`.
    pub fn latency(&self, hit_ratio: f64, accesses: usize) -> f64 {
        accesses as f64 * (hit_ratio * self.device_access_cost + (1.0 - hit_ratio) * self.host_access_cost)
    }

    /// Cost of one access outcome: resident pages at device cost, missing at host cost.
    pub fn outcome_latency(&self, outcome: &AccessOutcome) -> f64 {
        outcome.resident.len() as f64 * self.device_access_cost + outcome.missing.len() as f64 * self.host_access_cost
    }
}

/// Modeled latency of `page_accesses` at the bank's observed hit ratio.
/// An absent ratio (no accesses yet) is treated as all-miss.
pub fn modeled_latency(stats: &BankStats, cost: &CostModel, page_accesses: usize) -> f64 {
    cost.latency(stats.hit_ratio.unwrap_or(0.0), page_accesses)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessOutcome {
    pub resident: Vec<PageId>,
    pub missing: Vec<PageId>,
}

impl AccessOutcome {
    pub fn total(&self) -> usize {
        self.resident.len() + self.missing.len()
    }

    pub fn merge(&mut self, other: AccessOutcome) {
        self.resident.extend(other.resident);
        self.missing.extend(other.missing);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub capacity: usize,
    pub resident: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub hit_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub mask: BankStats,
    pub sa: BankStats,
}

/// One device bank: slots, page table and recency order.
#[derive(Debug, Clone)]
pub struct Bank {
    capacity: usize,
    slots: Vec<Option<PageId>>,
    slot_tick: Vec<u64>,
    page_table: HashMap<PageId, usize>,
    // tick -> slot, oldest first
    recency: BTreeMap<u64, usize>,
    free: Vec<usize>,
    tick: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl Bank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: vec![None; capacity],
            slot_tick: vec![0; capacity],
            page_table: HashMap::with_capacity(capacity),
            recency: BTreeMap::new(),
            free: (0..capacity).rev().collect(),
            tick: 0,
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_resident(&self, page: PageId) -> bool {
        self.page_table.contains_key(&page)
    }

    /// Resident pages from least to most recently used.
    pub fn lru_order(&self) -> Vec<PageId> {
        self.recency.values().map(|&s| self.slots[s].expect("recency points at an occupied slot")).collect()
    }

    fn touch(&mut self, slot: usize) {
        self.recency.remove(&self.slot_tick[slot]);
        self.tick += 1;
        self.slot_tick[slot] = self.tick;
        self.recency.insert(self.tick, slot);
    }

    /// Classifies `pages` (deduplicated, in the given order) and refreshes
    /// the recency of resident ones.
    pub fn access(&mut self, pages: &[PageId]) -> AccessOutcome {
        let mut out = AccessOutcome::default();
        let mut seen = std::collections::HashSet::with_capacity(pages.len());
        for &p in pages {
            if !seen.insert(p) {
                continue;
            }
            match self.page_table.get(&p) {
                Some(&slot) => {
                    self.touch(slot);
                    self.hits += 1;
                    out.resident.push(p);
                }
                None => {
                    self.misses += 1;
                    out.missing.push(p);
                }
            }
        }
        out
    }

    /// Inserts `pages` as most recently used, evicting LRU pages as needed.
    /// Already-resident pages are refreshed instead. When more pages arrive
    /// than the bank can hold, the first `capacity` are cached and the rest
    /// are reported in a partial-commit error.
    pub fn commit(&mut self, pages: &[PageId]) -> Result<Vec<PageId>> {
        let mut fresh = Vec::with_capacity(pages.len());
        let mut seen = std::collections::HashSet::with_capacity(pages.len());
        for &p in pages {
            if !seen.insert(p) {
                continue;
            }
            match self.page_table.get(&p) {
                Some(&slot) => self.touch(slot),
                None => fresh.push(p),
            }
        }
        let keep = fresh.len().min(self.capacity);
        let uncached = fresh.split_off(keep);
        let mut evicted = Vec::new();
        for p in fresh {
            let slot = match self.free.pop() {
                Some(s) => s,
                None => {
                    let (_, s) = self.recency.pop_first().expect("full bank has a recency entry");
                    let old = self.slots[s].take().expect("evicted slot was occupied");
                    self.page_table.remove(&old);
                    self.evictions += 1;
                    evicted.push(old);
                    s
                }
            };
            self.slots[slot] = Some(p);
            self.page_table.insert(p, slot);
            self.tick += 1;
            self.slot_tick[slot] = self.tick;
            self.recency.insert(self.tick, slot);
        }
        if uncached.is_empty() {
            Ok(evicted)
        } else {
            Err(Error::PartialCommit { uncached })
        }
    }

    pub fn stats(&self) -> BankStats {
        let total = self.hits + self.misses;
        BankStats {
            capacity: self.capacity,
            resident: self.page_table.len(),
            hits: self.hits,
            misses: self.misses,
            evictions: self.evictions,
            hit_ratio: (total > 0).then(|| self.hits as f64 / total as f64),
        }
    }

    pub fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
        self.evictions = 0;
    }

    /// Checks the page-table/slot bijection and recency bookkeeping.
    pub fn check_consistency(&self) -> Result<()> {
        let occupied = self.slots.iter().filter(|s| s.is_some()).count();
        if occupied != self.page_table.len() || occupied != self.recency.len() {
            return Err(Error::Contract(format!(
                "{occupied} occupied slots, {} table entries, {} recency entries",
                self.page_table.len(),
                self.recency.len()
            )));
        }
        if occupied + self.free.len() != self.capacity {
            return Err(Error::Contract("free list and occupied slots do not cover the bank".into()));
        }
        for (&p, &s) in &self.page_table {
            if self.slots[s] != Some(p) || self.recency.get(&self.slot_tick[s]) != Some(&s) {
                return Err(Error::Contract(format!("page {p} and slot {s} disagree")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub page_size: usize,
    pub mask_capacity: usize,
    pub sa_capacity: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            mask_capacity: 256,
            sa_capacity: 256,
        }
    }
}

/// Host tier plus the two device banks.
#[derive(Debug, Clone)]
pub struct TieredKvStore {
    page_size: usize,
    banks: [Bank; 2],
    num_heads: usize,
    head_dim: usize,
    // [layer][head]
    keys: Vec<Vec<DenseMatrix>>,
    values: Vec<Vec<DenseMatrix>>,
}

impl TieredKvStore {
    /// Empty host tier for `num_layers x num_heads` with `head_dim` columns.
    pub fn new(config: StoreConfig, num_layers: usize, num_heads: usize, head_dim: usize) -> Result<Self> {
        if config.page_size == 0 {
            return Err(Error::Config("page_size must be positive".into()));
        }
        if num_layers == 0 || num_heads == 0 || head_dim == 0 {
            return Err(Error::Config("store needs layers, heads and head_dim".into()));
        }
        let empty = || (0..num_heads).map(|_| DenseMatrix::zeros(0, head_dim)).collect::<Vec<_>>();
        Ok(Self {
            page_size: config.page_size,
            banks: [Bank::new(config.mask_capacity), Bank::new(config.sa_capacity)],
            num_heads,
            head_dim,
            keys: (0..num_layers).map(|_| empty()).collect(),
            values: (0..num_layers).map(|_| empty()).collect(),
        })
    }

    /// Host tier holding the first `kv_len` tokens of every layer.
    pub fn from_workload(config: StoreConfig, workload: &AttentionWorkload, kv_len: usize) -> Result<Self> {
        if kv_len > workload.seq_len_kv() {
            return Err(Error::Range(format!(
                "kv_len {kv_len} exceeds workload length {}",
                workload.seq_len_kv()
            )));
        }
        let mut store = Self::new(config, workload.num_layers(), workload.num_heads(), workload.head_dim())?;
        for layer in 0..workload.num_layers() {
            for head in 0..workload.num_heads() {
                let k = workload.keys(layer, head);
                let v = workload.values(layer, head);
                let d = k.cols();
                store.keys[layer][head] = DenseMatrix::new(kv_len, d, k.data()[..kv_len * d].to_vec())?;
                store.values[layer][head] = DenseMatrix::new(kv_len, d, v.data()[..kv_len * d].to_vec())?;
            }
        }
        Ok(store)
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Tokens held by the host tier for `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer][0].rows()
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn bank(&self, bank: BankId) -> &Bank {
        &self.banks[bank.slot()]
    }

    pub fn bank_mut(&mut self, bank: BankId) -> &mut Bank {
        &mut self.banks[bank.slot()]
    }

    /// Appends one token's per-head key and value rows to `layer`.
    pub fn append(&mut self, layer: usize, keys: &[Vec<f32>], values: &[Vec<f32>]) -> Result<()> {
        if layer >= self.keys.len() {
            return Err(Error::Range(format!("layer {layer} outside {} layers", self.keys.len())));
        }
        if keys.len() != self.num_heads || values.len() != self.num_heads {
            return Err(Error::Dimension(format!(
                "expected {} heads, got {} keys and {} values",
                self.num_heads,
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(values).any(|r| r.len() != self.head_dim) {
            return Err(Error::Dimension(format!("rows must have {} columns", self.head_dim)));
        }
        for head in 0..self.num_heads {
            self.keys[layer][head].push_row(&keys[head])?;
            self.values[layer][head].push_row(&values[head])?;
        }
        Ok(())
    }

    /// Sorted distinct pages covering `token_indices` of `layer`.
    pub fn pages_for(&self, layer: usize, token_indices: &[usize]) -> Result<Vec<PageId>> {
        let len = self.len(layer);
        if let Some(&bad) = token_indices.iter().find(|&&i| i >= len) {
            return Err(Error::Range(format!("token {bad} outside {len} tokens of layer {layer}")));
        }
        let mut pages: Vec<usize> = token_indices.iter().map(|&i| i / self.page_size).collect();
        pages.sort_unstable();
        pages.dedup();
        Ok(pages.into_iter().map(|page| PageId { layer, page }).collect())
    }

    /// Partitions the pages covering `token_indices` into resident and missing.
    pub fn access(&mut self, bank: BankId, layer: usize, token_indices: &[usize]) -> Result<AccessOutcome> {
        let pages = self.pages_for(layer, token_indices)?;
        Ok(self.bank_mut(bank).access(&pages))
    }

    pub fn commit(&mut self, bank: BankId, pages: &[PageId]) -> Result<Vec<PageId>> {
        self.bank_mut(bank).commit(pages)
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            mask: self.bank(BankId::Mask).stats(),
            sa: self.bank(BankId::Sa).stats(),
        }
    }

    pub fn reset_counters(&mut self) {
        for b in &mut self.banks {
            b.reset_counters();
        }
    }

    pub fn view(&self, bank: BankId, layer: usize) -> KvView<'_> {
        KvView { store: self, bank, layer }
    }

    pub fn layer_keys(&self, layer: usize) -> &[DenseMatrix] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[DenseMatrix] {
        &self.values[layer]
    }
}

/// Read handle resolving token indices of one layer through the host tier.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a> {
    store: &'a TieredKvStore,
    bank: BankId,
    layer: usize,
}

impl KvView<'_> {
    pub fn bank(&self) -> BankId {
        self.bank
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Pages this view would touch for `indices`.
    pub fn pages_for(&self, indices: &[usize]) -> Result<Vec<PageId>> {
        self.store.pages_for(self.layer, indices)
    }
}

impl KeySource for KvView<'_> {
    fn num_heads(&self) -> usize {
        self.store.num_heads
    }

    fn head_dim(&self) -> usize {
        self.store.head_dim
    }

    fn len(&self) -> usize {
        self.store.len(self.layer)
    }

    fn key(&self, head: usize, index: usize) -> &[f32] {
        self.store.keys[self.layer][head].row(index)
    }
}

impl KvSource for KvView<'_> {
    fn value(&self, head: usize, index: usize) -> &[f32] {
        self.store.values[self.layer][head].row(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(page: usize) -> PageId {
        PageId { layer: 0, page }
    }

    fn store(page_size: usize, cap: usize, tokens: usize) -> TieredKvStore {
        let mut s = TieredKvStore::new(
            StoreConfig { page_size, mask_capacity: cap, sa_capacity: cap },
            1,
            1,
            2,
        )
        .unwrap();
        for t in 0..tokens {
            s.append(0, &[vec![t as f32, 0.0]], &[vec![0.0, t as f32]]).unwrap();
        }
        s
    }

    #[test]
    fn cold_then_warm() {
        let mut s = store(4, 8, 32);
        let out = s.access(BankId::Sa, 0, &[0, 1, 7]).unwrap();
        assert_eq!(out.missing, vec![p(0), p(1)]);
        assert!(out.resident.is_empty());
        s.commit(BankId::Sa, &out.missing).unwrap();
        let out = s.access(BankId::Sa, 0, &[0, 1, 7]).unwrap();
        assert_eq!(out.resident, vec![p(0), p(1)]);
        assert!(out.missing.is_empty());
        assert_eq!(s.stats().sa.hit_ratio, Some(0.5));
        assert_eq!(s.stats().mask.hit_ratio, None);
    }

    #[test]
    fn lru_eviction_order() {
        let mut b = Bank::new(2);
        b.commit(&[p(0), p(1)]).unwrap();
        b.access(&[p(2)]);
        assert_eq!(b.commit(&[p(2)]).unwrap(), vec![p(0)]);

        let mut b = Bank::new(2);
        b.commit(&[p(0), p(1)]).unwrap();
        b.access(&[p(0)]);
        assert_eq!(b.commit(&[p(2)]).unwrap(), vec![p(1)]);
        b.check_consistency().unwrap();
    }

    #[test]
    fn partial_commit_lists_uncached() {
        let mut b = Bank::new(2);
        let err = b.commit(&[p(0), p(1), p(2)]).unwrap_err();
        assert_eq!(err, Error::PartialCommit { uncached: vec![p(2)] });
        assert!(b.is_resident(p(0)) && b.is_resident(p(1)));
        b.check_consistency().unwrap();
    }

    #[test]
    fn hit_ratio_arithmetic() {
        let mut b = Bank::new(4);
        b.commit(&[p(0)]).unwrap();
        for _ in 0..3 {
            b.access(&[p(0)]);
        }
        b.access(&[p(1)]);
        assert_eq!(b.stats().hit_ratio, Some(0.75));
    }

    #[test]
    fn latency_examples() {
        let c = CostModel::default();
        assert_eq!(c.latency(1.0, 100), 100.0);
        assert_eq!(c.latency(0.0, 100), 3150.0);
        assert_eq!(c.latency(0.5, 100), 1625.0);
        assert!(CostModel { device_access_cost: 2.0, host_access_cost: 1.0 }.validate().is_err());
    }

    #[test]
    fn view_reads_host_rows() {
        let s = store(4, 2, 10);
        let v = s.view(BankId::Sa, 0);
        assert_eq!(v.key(0, 7), &[7.0, 0.0]);
        assert_eq!(v.value(0, 9), &[0.0, 9.0]);
        assert!(s.pages_for(0, &[10]).is_err());
    }
}
