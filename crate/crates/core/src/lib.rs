//! Hierarchical context pruning for long-context attention.
//!
//! A pruning plan narrows each query block's candidate keys in stages; the
//! final index list drives block-sparse attention. The decode engine caches
//! stage outputs between refreshes and models KV traffic through a two-bank
//! paged cache.

pub mod decode;
pub mod error;
pub mod kv_store;
pub mod pruning;
pub mod rope_policy;
pub mod sparse_attention;
pub mod tensor;
pub mod workload;

pub use decode::{DecodeEngine, StepInput, StepTelemetry};
pub use error::{Error, Result};
pub use kv_store::{BankId, CostModel, PageId, StoreConfig, TieredKvStore};
pub use pruning::{build_mask, PruningPlan, SparseBlockMask, StageConfig};
pub use rope_policy::{PolicyId, RopePolicySet};
pub use sparse_attention::{attention_recall, block_sparse_attention, dense_attention, exact_topk};
pub use tensor::{apply_rope, build_rope_table, DenseMatrix, RopeTable};
pub use workload::{generate_synthetic, AttentionWorkload, SyntheticConfig};
