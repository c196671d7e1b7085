//! Run configuration: a flat TOML document plus command-line overrides.

use std::path::{Path, PathBuf};

use hipprune::kv_store::{CostModel, StoreConfig};
use hipprune::pruning::PruningPlan;
use hipprune::rope_policy::RopePolicySet;
use hipprune::workload::{generate_synthetic, load_dump, AttentionWorkload, SyntheticConfig};
use hipprune::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every key is optional in the file; missing keys take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pruning preset: "3k", "5k", "fast" or "flash".
    pub preset: String,
    pub seed: u64,
    pub heads: usize,
    pub layers: usize,
    /// Prefill key length.
    pub seq_len: usize,
    /// Prefill query rows (a suffix of the sequence).
    pub query_len: usize,
    pub head_dim: usize,
    pub locality_scale: f64,
    /// "POS:STRENGTH" entries.
    pub needles: Vec<String>,
    /// HIPW dump to use instead of a synthetic workload; empty means none.
    pub dump: String,
    pub rope_extension: bool,
    pub early_layer_cutoff: usize,
    pub theta_base: f64,
    /// Overrides the preset's refresh intervals when non-empty.
    pub refresh: Vec<usize>,
    pub page_size: usize,
    pub mask_capacity: usize,
    pub sa_capacity: usize,
    pub device_cost: f64,
    pub host_cost: f64,
    /// Decode steps for decode-sim and offload-report.
    pub steps: usize,
    /// Seeds averaged by recall-report.
    pub seeds: usize,
    /// Top-k size for sparsity-report.
    pub topk: usize,
    pub chunk_sizes: Vec<usize>,
    /// Bank capacities (pages) swept by offload-report.
    pub capacity_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let store = StoreConfig::default();
        let cost = CostModel::default();
        Self {
            preset: "3k".into(),
            seed: 0,
            heads: 4,
            layers: 4,
            seq_len: 8192,
            query_len: 64,
            head_dim: 64,
            locality_scale: 32.0,
            needles: Vec::new(),
            dump: String::new(),
            rope_extension: true,
            early_layer_cutoff: 3,
            theta_base: hipprune::tensor::DEFAULT_THETA_BASE,
            refresh: Vec::new(),
            page_size: store.page_size,
            mask_capacity: store.mask_capacity,
            sa_capacity: store.sa_capacity,
            device_cost: cost.device_access_cost,
            host_cost: cost.host_access_cost,
            steps: 48,
            seeds: 20,
            topk: 2048,
            chunk_sizes: vec![8, 16, 32, 64, 128, 256],
            capacity_sweep: vec![64, 128, 256, 512, 1024, 2048],
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub needles: Vec<String>,
    pub capacity_sweep: Option<Vec<usize>>,
}

pub fn parse_needle(spec: &str) -> Result<(usize, f32)> {
    let bad = || Error::Config(format!("needle '{spec}' must look like POS:STRENGTH"));
    let (pos, strength) = spec.split_once(':').ok_or_else(bad)?;
    let pos = pos.trim().parse().map_err(|_| bad())?;
    let strength: f32 = strength.trim().parse().map_err(|_| bad())?;
    Ok((pos, strength))
}

pub fn parse_capacity_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("capacity '{s}' is not a page count")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.preset {
            self.preset = p.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.steps {
            self.steps = s;
        }
        if !o.needles.is_empty() {
            self.needles = o.needles.clone();
        }
        if let Some(c) = &o.capacity_sweep {
            self.capacity_sweep = c.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.layers == 0 || self.seq_len == 0 || self.query_len == 0 || self.head_dim == 0 {
            return Err(Error::Config("heads, layers, seq_len, query_len and head_dim must be positive".into()));
        }
        if self.query_len > self.seq_len {
            return Err(Error::Config(format!(
                "query_len {} exceeds seq_len {}",
                self.query_len, self.seq_len
            )));
        }
        if self.chunk_sizes.contains(&0) {
            return Err(Error::Config("chunk sizes must be positive".into()));
        }
        if !self.dump.is_empty() && !Path::new(&self.dump).exists() {
            return Err(Error::Config(format!("dump '{}' does not exist", self.dump)));
        }
        for n in &self.needles {
            parse_needle(n)?;
        }
        self.plan()?.validate()?;
        self.policy().validate()?;
        self.cost().validate()?;
        if self.page_size == 0 {
            return Err(Error::Config("page_size must be positive".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<PruningPlan> {
        let mut plan = PruningPlan::preset(&self.preset)?;
        if !self.refresh.is_empty() {
            plan.refresh_intervals = self.refresh.clone();
        }
        Ok(plan)
    }

    pub fn policy(&self) -> RopePolicySet {
        let mut policy = RopePolicySet::default();
        policy.extension_enabled = self.rope_extension;
        policy.early_layer_cutoff = self.early_layer_cutoff;
        policy
    }

    pub fn cost(&self) -> CostModel {
        CostModel {
            device_access_cost: self.device_cost,
            host_access_cost: self.host_cost,
        }
    }

    pub fn store(&self) -> StoreConfig {
        StoreConfig {
            page_size: self.page_size,
            mask_capacity: self.mask_capacity,
            sa_capacity: self.sa_capacity,
        }
    }

    pub fn synthetic(&self, seed: u64, seq_len_kv: usize, seq_len_q: usize) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            num_heads: self.heads,
            num_layers: self.layers,
            seq_len_q,
            seq_len_kv,
            head_dim: self.head_dim,
            locality_scale: self.locality_scale,
            needles: self.needles.iter().map(|n| parse_needle(n)).collect::<Result<_>>()?,
            seed,
        })
    }

    /// The prefill workload: the dump if configured, else synthetic with
    /// `seq_len` keys and `query_len` queries.
    pub fn workload(&self, seed: u64) -> Result<AttentionWorkload> {
        self.workload_with_tail(seed, 0)
    }

    /// A workload with `extra` tokens beyond the prefill, each carrying its
    /// own query row. A dump is used as-is and must already contain them.
    pub fn workload_with_tail(&self, seed: u64, extra: usize) -> Result<AttentionWorkload> {
        if self.dump.is_empty() {
            generate_synthetic(&self.synthetic(seed, self.seq_len + extra, self.query_len + extra)?)
        } else {
            let w = load_dump(Path::new(&self.dump))?;
            if w.seq_len_q() <= extra {
                return Err(Error::Config(format!(
                    "dump has {} query rows, need more than {extra}",
                    w.seq_len_q()
                )));
            }
            Ok(w)
        }
    }

    /// Hex SHA-256 of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Where reports go.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}
