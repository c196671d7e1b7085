use hipprune::workload::{load_dump, save_dump};
use hipprune::Result;
use serde::{Deserialize, Serialize};

use crate::config::{OutputPaths, RunConfig};
use crate::report::{ensure_dir, write_json, CheckRecord, ReportHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub header: ReportHeader,
    pub path: String,
    pub checksum: String,
    pub checks: Vec<CheckRecord>,
}

/// Writes the configured workload as `workload.hipw`.
pub fn cmd_generate(config: &RunConfig, out: &OutputPaths) -> Result<GenerateReport> {
    config.validate()?;
    ensure_dir(&out.dir)?;
    let workload = config.workload(config.seed)?;
    let path = out.file("workload.hipw");
    let crc = save_dump(&workload, &path)?;
    let round_trip = load_dump(&path).is_ok_and(|w| w == workload);
    let report = GenerateReport {
        header: ReportHeader::new("generate", config),
        path: path.display().to_string(),
        checksum: format!("{crc:08x}"),
        checks: vec![CheckRecord::new("dump_round_trips", round_trip, "")],
    };
    write_json(&out.file("generate.json"), &report)?;
    Ok(report)
}
