//! One module per subcommand. Each returns its report and writes JSON and
//! CSV files into the output directory.

mod decode_sim;
mod generate;
mod offload;
mod recall;
mod sparsity;

pub use decode_sim::{cmd_decode_sim, run_decode, DecodeReport, DecodeRun, ScenarioSummary};
pub use generate::{cmd_generate, GenerateReport};
pub use offload::{cmd_offload_report, replay, OffloadReport, OffloadRow};
pub use recall::{cmd_recall_report, layer_recall, LayerRecall, RecallReport, RecallRow};
pub use sparsity::{cmd_sparsity_report, SparsityReport, SparsityRow};

use hipprune::tensor::{build_rope_table, RopeTable};
use hipprune::Result;

use crate::config::RunConfig;

/// Table covering original positions `0..len` and whatever the plan needs.
pub(crate) fn rope_for(config: &RunConfig, len: usize) -> Result<RopeTable> {
    let plan = config.plan()?;
    let n = plan.rope_positions_needed(len, &config.policy()).max(len);
    build_rope_table(n, config.head_dim, config.theta_base)
}
