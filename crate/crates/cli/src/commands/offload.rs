use std::collections::BTreeSet;

use hipprune::kv_store::{Bank, BankId, PageId};
use hipprune::{Error, Result};
use serde::{Deserialize, Serialize};

use super::decode_sim::run_decode;
use crate::config::{OutputPaths, RunConfig};
use crate::report::{ensure_dir, write_csv, write_json, CheckRecord, ReportHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRow {
    pub bank: BankId,
    pub capacity: usize,
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub hit_ratio: Option<f64>,
    pub modeled_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadReport {
    pub header: ReportHeader,
    pub host_device_cost_ratio: f64,
    pub mask_distinct_pages: usize,
    pub sa_distinct_pages: usize,
    pub rows: Vec<OffloadRow>,
    pub checks: Vec<CheckRecord>,
}

/// Replays per-step page sets through a cold bank: each step accesses its
/// pages, then commits the misses.
pub fn replay(trace: &[Vec<PageId>], capacity: usize) -> Result<Bank> {
    let mut bank = Bank::new(capacity);
    for pages in trace {
        let outcome = bank.access(pages);
        match bank.commit(&outcome.missing) {
            Ok(_) | Err(Error::PartialCommit { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(bank)
}

/// Sweeps bank capacities over the page trace of one decode simulation.
pub fn cmd_offload_report(config: &RunConfig, out: &OutputPaths) -> Result<OffloadReport> {
    ensure_dir(&out.dir)?;
    if config.capacity_sweep.is_empty() {
        return Err(Error::Config("capacity_sweep is empty".into()));
    }
    let run = run_decode(config)?;
    let cost = config.cost();
    let traces = [
        (BankId::Mask, run.telemetry.iter().map(|t| t.mask_pages.clone()).collect::<Vec<_>>()),
        (BankId::Sa, run.telemetry.iter().map(|t| t.sa_pages.clone()).collect::<Vec<_>>()),
    ];
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut distinct_counts = Vec::new();
    for (bank_id, trace) in &traces {
        let distinct: BTreeSet<PageId> = trace.iter().flatten().copied().collect();
        let accesses: usize = trace.iter().map(Vec::len).sum();
        distinct_counts.push(distinct.len());
        let mut bank_rows = Vec::new();
        for &capacity in &config.capacity_sweep {
            let stats = replay(trace, capacity)?.stats();
            let hit_ratio = stats.hit_ratio;
            bank_rows.push(OffloadRow {
                bank: *bank_id,
                capacity,
                accesses: stats.hits + stats.misses,
                hits: stats.hits,
                misses: stats.misses,
                evictions: stats.evictions,
                hit_ratio,
                modeled_latency: cost.latency(hit_ratio.unwrap_or(0.0), accesses),
            });
        }
        let mut sorted: Vec<&OffloadRow> = bank_rows.iter().collect();
        sorted.sort_by_key(|r| r.capacity);
        let monotone = sorted.windows(2).all(|w| w[0].hits <= w[1].hits);
        checks.push(CheckRecord::new(
            &format!("{bank_id:?}_hits_monotone_in_capacity").to_lowercase(),
            monotone,
            "",
        ));
        let ws_ok = bank_rows.iter().filter(|r| r.capacity >= distinct.len()).all(|r| {
            r.misses as usize == distinct.len() && r.hits as usize == accesses - distinct.len()
        });
        checks.push(CheckRecord::new(
            &format!("{bank_id:?}_working_set_formula").to_lowercase(),
            ws_ok,
            format!("{accesses} accesses over {} distinct pages", distinct.len()),
        ));
        rows.extend(bank_rows);
    }
    let report = OffloadReport {
        header: ReportHeader::new("offload-report", config),
        host_device_cost_ratio: cost.host_access_cost / cost.device_access_cost,
        mask_distinct_pages: distinct_counts[0],
        sa_distinct_pages: distinct_counts[1],
        rows,
        checks,
    };
    write_json(&out.file("offload.json"), &report)?;
    write_csv(&out.file("offload.csv"), &report.rows)?;
    Ok(report)
}
