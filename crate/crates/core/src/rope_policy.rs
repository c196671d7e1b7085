//! Position assignment for the pruning and sparse-attention phases.
//!
//! Layers are indexed from 0. The first `early_layer_cutoff` layers
//! (indices `0..cutoff`) use the early pruning policy, every later layer the
//! late one. With the default cutoff of 3 this is the "first three layers use
//! chunk-indexed RoPE" rule.
//!
//! * Chunk-indexed: every key in chunk `c` sits at position `c`; the query
//!   sits at `min(i_orig, chunk_count + n_stream)`.
//! * Relative: the query sits at `n_stream + 1`, a branch-`j` key at `j - 1`.
//!   The representative key scored for a whole chunk uses branch 2.
//! * Streaming: the attended keys get consecutive positions ending at the
//!   query's position.
//!
//! With extension disabled every vector keeps its original position.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in policy identifiers plus named plug-ins.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyId {
    ChunkIndexed,
    Relative,
    Streaming,
    PlugIn(String),
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyId::ChunkIndexed => f.write_str("chunk-indexed"),
            PolicyId::Relative => f.write_str("relative"),
            PolicyId::Streaming => f.write_str("streaming"),
            PolicyId::PlugIn(name) => write!(f, "plugin:{name}"),
        }
    }
}

impl std::str::FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunk-indexed" | "chunk_indexed" => Ok(PolicyId::ChunkIndexed),
            "relative" => Ok(PolicyId::Relative),
            "streaming" => Ok(PolicyId::Streaming),
            other => match other.strip_prefix("plugin:") {
                Some(name) if !name.is_empty() => Ok(PolicyId::PlugIn(name.to_string())),
                _ => Err(Error::Config(format!("unknown rope policy '{other}'"))),
            },
        }
    }
}

/// Which of the two hierarchical-search branches a key belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Left,
    Right,
}

impl Branch {
    /// 1 for the left branch, 2 for the right.
    pub fn number(self) -> usize {
        match self {
            Branch::Left => 1,
            Branch::Right => 2,
        }
    }
}

/// Everything a policy may look at when placing a query or key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionContext {
    /// Original position of the query.
    pub query_orig: usize,
    /// Original position of the key.
    pub key_orig: usize,
    /// Index of the chunk the key comes from, within the current stage.
    pub chunk_index: usize,
    pub branch: Branch,
    pub n_stream: usize,
    /// Number of chunks in the current stage's partition.
    pub chunk_count: usize,
}

/// Hook for position policies defined outside this crate.
pub trait PositionPolicy: Send + Sync + fmt::Debug {
    fn query_position(&self, ctx: &PositionContext) -> usize;
    fn key_position(&self, ctx: &PositionContext) -> usize;
    /// Positions for the keys attended by a query at `query_orig`.
    fn attention_positions(&self, selected: &[usize], query_orig: usize) -> Result<Vec<usize>>;
}

/// Policy choice for each phase, plus registered plug-ins.
#[derive(Clone)]
pub struct RopePolicySet {
    pub pruning_policy_early: PolicyId,
    pub pruning_policy_late: PolicyId,
    pub early_layer_cutoff: usize,
    pub bsa_policy: PolicyId,
    pub extension_enabled: bool,
    plugins: BTreeMap<String, Arc<dyn PositionPolicy>>,
}

impl fmt::Debug for RopePolicySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RopePolicySet")
            .field("pruning_policy_early", &self.pruning_policy_early)
            .field("pruning_policy_late", &self.pruning_policy_late)
            .field("early_layer_cutoff", &self.early_layer_cutoff)
            .field("bsa_policy", &self.bsa_policy)
            .field("extension_enabled", &self.extension_enabled)
            .field("plugins", &self.plugins.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Default for RopePolicySet {
    fn default() -> Self {
        Self {
            pruning_policy_early: PolicyId::ChunkIndexed,
            pruning_policy_late: PolicyId::Relative,
            early_layer_cutoff: 3,
            bsa_policy: PolicyId::Streaming,
            extension_enabled: true,
            plugins: BTreeMap::new(),
        }
    }
}

impl RopePolicySet {
    /// Default policies with repositioning switched off.
    pub fn original_positions() -> Self {
        Self {
            extension_enabled: false,
            ..Self::default()
        }
    }

    pub fn register_plugin(&mut self, name: impl Into<String>, policy: Arc<dyn PositionPolicy>) {
        self.plugins.insert(name.into(), policy);
    }

    pub fn validate(&self) -> Result<()> {
        for (phase, id) in [
            ("early pruning", &self.pruning_policy_early),
            ("late pruning", &self.pruning_policy_late),
        ] {
            if *id == PolicyId::Streaming {
                return Err(Error::Config(format!(
                    "{phase} policy cannot be streaming; it only applies to sparse attention"
                )));
            }
            self.check_plugin(id)?;
        }
        if matches!(self.bsa_policy, PolicyId::ChunkIndexed | PolicyId::Relative) {
            return Err(Error::Config(format!(
                "sparse attention policy must be streaming or a plug-in, got {}",
                self.bsa_policy
            )));
        }
        self.check_plugin(&self.bsa_policy)
    }

    fn check_plugin(&self, id: &PolicyId) -> Result<()> {
        match id {
            PolicyId::PlugIn(name) if !self.plugins.contains_key(name) => Err(Error::Config(
                format!("rope plug-in '{name}' is not registered"),
            )),
            _ => Ok(()),
        }
    }

    pub fn has_plugins(&self) -> bool {
        !self.plugins.is_empty()
    }

    pub fn is_early_layer(&self, layer: usize) -> bool {
        layer < self.early_layer_cutoff
    }

    /// Policy used by the pruning stages at `layer`.
    pub fn pruning_policy(&self, layer: usize) -> &PolicyId {
        if self.is_early_layer(layer) {
            &self.pruning_policy_early
        } else {
            &self.pruning_policy_late
        }
    }

    fn plugin(&self, name: &str) -> &dyn PositionPolicy {
        self.plugins
            .get(name)
            .map(|p| p.as_ref())
            .unwrap_or_else(|| panic!("rope plug-in '{name}' is not registered"))
    }

    /// Position of a query during pruning.
    pub fn query_position(&self, layer: usize, ctx: &PositionContext) -> usize {
        if !self.extension_enabled {
            return ctx.query_orig;
        }
        match self.pruning_policy(layer) {
            PolicyId::Relative => ctx.n_stream + 1,
            PolicyId::ChunkIndexed => ctx.query_orig.min(ctx.chunk_count + ctx.n_stream),
            PolicyId::Streaming => ctx.query_orig,
            PolicyId::PlugIn(name) => self.plugin(name).query_position(ctx),
        }
    }

    /// Position of a key during pruning.
    pub fn key_position(&self, layer: usize, ctx: &PositionContext) -> usize {
        if !self.extension_enabled {
            return ctx.key_orig;
        }
        match self.pruning_policy(layer) {
            PolicyId::Relative => ctx.branch.number() - 1,
            PolicyId::ChunkIndexed => ctx.chunk_index,
            PolicyId::Streaming => ctx.key_orig,
            PolicyId::PlugIn(name) => self.plugin(name).key_position(ctx),
        }
    }

    /// Key positions used by sparse attention for a query at `query_orig`
    /// attending to `selected` (sorted original indices).
    pub fn attention_positions(&self, selected: &[usize], query_orig: usize) -> Result<Vec<usize>> {
        if !self.extension_enabled {
            return Ok(selected.to_vec());
        }
        match &self.bsa_policy {
            PolicyId::PlugIn(name) => self.plugin(name).attention_positions(selected, query_orig),
            // the query shares the position of the most recent selected key
            _ => streaming_positions(selected, selected.len().saturating_sub(1)),
        }
    }

    /// Query position used by sparse attention, matching `attention_positions`.
    pub fn attention_query_position(&self, selected: &[usize], query_orig: usize) -> usize {
        if !self.extension_enabled {
            return query_orig;
        }
        match &self.bsa_policy {
            PolicyId::PlugIn(name) => self.plugin(name).query_position(&PositionContext {
                query_orig,
                key_orig: query_orig,
                chunk_index: 0,
                branch: Branch::Right,
                n_stream: 0,
                chunk_count: selected.len(),
            }),
            _ => selected.len().saturating_sub(1),
        }
    }
}

/// Free-function form of [`RopePolicySet::query_position`].
pub fn query_position(policy: &RopePolicySet, layer: usize, ctx: &PositionContext) -> usize {
    policy.query_position(layer, ctx)
}

/// Free-function form of [`RopePolicySet::key_position`].
pub fn key_position(policy: &RopePolicySet, layer: usize, ctx: &PositionContext) -> usize {
    policy.key_position(layer, ctx)
}

/// Consecutive positions for `selected`, the last one equal to `query_pos`.
pub fn streaming_positions(selected: &[usize], query_pos: usize) -> Result<Vec<usize>> {
    let len = selected.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    if len > query_pos + 1 {
        return Err(Error::Contract(format!(
            "{len} keys cannot end at position {query_pos} without negative positions"
        )));
    }
    let first = query_pos + 1 - len;
    Ok((first..=query_pos).collect())
}
