use std::collections::BTreeMap;

use hipprune::decode::{scenario_label, DecodeEngine, StepError, StepInput, StepTelemetry};
use hipprune::kv_store::BankId;
use hipprune::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{OutputPaths, RunConfig};
use crate::report::{ensure_dir, write_csv, write_json, write_jsonl, CheckRecord, ReportHeader};

/// Averages over the steps that cached the same leading stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    /// Leading stages served from cache; absent for mixed patterns.
    pub cached_stages: Option<usize>,
    pub steps: usize,
    pub mean_latency: f64,
    pub mean_stage_latency: Vec<f64>,
    pub mean_bsa_latency: f64,
    /// Pooled over the scenario's steps; absent when no page was requested.
    pub mask_hit_ratio: Option<f64>,
    pub sa_hit_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub header: ReportHeader,
    pub steps: usize,
    pub refresh_intervals: Vec<usize>,
    pub refresh_counts: Vec<usize>,
    pub partial_commit_steps: usize,
    pub total_stage_latency: f64,
    pub total_bsa_latency: f64,
    pub mask_hit_ratio: Option<f64>,
    pub sa_hit_ratio: Option<f64>,
    /// SHA-256 over the per-step output checksums.
    pub output_checksum: String,
    pub summary: Vec<ScenarioSummary>,
    pub checks: Vec<CheckRecord>,
}

/// Everything a decode simulation produced, before serialization.
#[derive(Debug, Clone)]
pub struct DecodeRun {
    pub telemetry: Vec<StepTelemetry>,
    pub checksums: Vec<u32>,
    pub partial_commit_steps: usize,
    pub checks: Vec<CheckRecord>,
}

/// Prefills on all but the last `steps` tokens, then decodes them one by one.
pub fn run_decode(config: &RunConfig) -> Result<DecodeRun> {
    config.validate()?;
    let steps = config.steps;
    let full = config.workload_with_tail(config.seed, steps)?;
    let (t_kv, t_q) = (full.seq_len_kv(), full.seq_len_q());
    let prefill = full.prefix(t_kv - steps, t_q - steps)?;
    let plan = config.plan()?;
    let policy = config.policy();
    let mut engine =
        DecodeEngine::new(plan.clone(), policy.clone(), config.store(), config.cost())?.with_theta_base(config.theta_base);
    engine.prefill(&prefill)?;

    let mut telemetry = Vec::with_capacity(steps);
    let mut checksums = Vec::with_capacity(steps);
    let mut partial = 0;
    let mut budget_ok = true;
    let mut stale_ok = true;
    for s in 0..steps {
        let input = StepInput::from_workload(&full, t_q - steps + s)?;
        let (output, tel) = match engine.step(&input) {
            Ok(r) => (r.output, r.telemetry),
            Err(StepError {
                error: Error::PartialCommit { .. },
                output: Some(o),
                telemetry: Some(t),
            }) => {
                partial += 1;
                (o, t)
            }
            Err(e) => return Err(e.error),
        };
        for (layer, &size) in tel.mask_sizes.iter().enumerate() {
            let keep = plan.stage_for(plan.stages.len() - 1, policy.is_early_layer(layer)).keep;
            budget_ok &= size <= keep;
            for (i, &n) in plan.refresh_intervals.iter().enumerate() {
                if let Some((_, at)) = engine.cached(layer, i) {
                    stale_ok &= s - at < n;
                }
            }
        }
        checksums.push(output.checksum());
        telemetry.push(tel);
    }
    let counters_ok = engine
        .counters()
        .iter()
        .zip(&plan.refresh_intervals)
        .all(|(&c, &n)| c == steps % n);
    let store = engine.store().expect("prefilled");
    let banks_ok = [BankId::Mask, BankId::Sa].iter().all(|&b| store.bank(b).check_consistency().is_ok());
    let checks = vec![
        CheckRecord::new("final_mask_within_budget", budget_ok, ""),
        CheckRecord::new("cached_lists_fresh_within_interval", stale_ok, ""),
        CheckRecord::new("counters_equal_steps_mod_interval", counters_ok, format!("{:?}", engine.counters())),
        CheckRecord::new("bank_tables_consistent", banks_ok, ""),
    ];
    Ok(DecodeRun {
        telemetry,
        checksums,
        partial_commit_steps: partial,
        checks,
    })
}

fn pooled(hits: usize, misses: usize) -> Option<f64> {
    let t = hits + misses;
    (t > 0).then(|| hits as f64 / t as f64)
}

fn summarize(telemetry: &[StepTelemetry], n_stages: usize) -> Vec<ScenarioSummary> {
    // key: cached stage count, mixed patterns last
    let mut groups: BTreeMap<usize, Vec<&StepTelemetry>> = BTreeMap::new();
    for t in telemetry {
        groups.entry(t.cached_stages.unwrap_or(usize::MAX)).or_default().push(t);
    }
    groups
        .into_iter()
        .map(|(key, steps)| {
            let n = steps.len() as f64;
            let cached = (key != usize::MAX).then_some(key);
            let sum_hits = |f: fn(&StepTelemetry) -> usize| steps.iter().map(|t| f(t)).sum::<usize>();
            ScenarioSummary {
                scenario: cached.map_or_else(|| "mixed".to_string(), |c| scenario_label(c, n_stages)),
                cached_stages: cached,
                steps: steps.len(),
                mean_latency: steps.iter().map(|t| t.total_latency()).sum::<f64>() / n,
                mean_stage_latency: (0..n_stages)
                    .map(|i| steps.iter().map(|t| t.stage_latency[i]).sum::<f64>() / n)
                    .collect(),
                mean_bsa_latency: steps.iter().map(|t| t.bsa_latency).sum::<f64>() / n,
                mask_hit_ratio: pooled(sum_hits(|t| t.mask_hits), sum_hits(|t| t.mask_misses)),
                sa_hit_ratio: pooled(sum_hits(|t| t.sa_hits), sum_hits(|t| t.sa_misses)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct SummaryCsvRow<'a> {
    scenario: &'a str,
    steps: usize,
    mean_latency: f64,
    mean_bsa_latency: f64,
    mean_stage_latency: String,
    mask_hit_ratio: Option<f64>,
    sa_hit_ratio: Option<f64>,
}

/// Runs the decode simulation and writes `decode_sim.json` (report),
/// `telemetry.jsonl` (one record per step) and `decode_summary.csv`.
pub fn cmd_decode_sim(config: &RunConfig, out: &OutputPaths) -> Result<DecodeReport> {
    ensure_dir(&out.dir)?;
    let run = run_decode(config)?;
    let plan = config.plan()?;
    let n_stages = plan.stages.len();
    let mut hasher = Sha256::new();
    for c in &run.checksums {
        hasher.update(c.to_le_bytes());
    }
    let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let t = &run.telemetry;
    let report = DecodeReport {
        header: ReportHeader::new("decode-sim", config),
        steps: t.len(),
        refresh_intervals: plan.refresh_intervals.clone(),
        refresh_counts: (0..n_stages).map(|i| t.iter().filter(|s| s.refreshed[i]).count()).collect(),
        partial_commit_steps: run.partial_commit_steps,
        total_stage_latency: t.iter().map(|s| s.stage_latency.iter().sum::<f64>()).sum(),
        total_bsa_latency: t.iter().map(|s| s.bsa_latency).sum(),
        mask_hit_ratio: pooled(t.iter().map(|s| s.mask_hits).sum(), t.iter().map(|s| s.mask_misses).sum()),
        sa_hit_ratio: pooled(t.iter().map(|s| s.sa_hits).sum(), t.iter().map(|s| s.sa_misses).sum()),
        output_checksum: digest,
        summary: summarize(t, n_stages),
        checks: run.checks,
    };
    write_json(&out.file("decode_sim.json"), &report)?;
    write_jsonl(&out.file("telemetry.jsonl"), t)?;
    let rows: Vec<SummaryCsvRow> = report
        .summary
        .iter()
        .map(|s| SummaryCsvRow {
            scenario: &s.scenario,
            steps: s.steps,
            mean_latency: s.mean_latency,
            mean_bsa_latency: s.mean_bsa_latency,
            mean_stage_latency: s.mean_stage_latency.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
            mask_hit_ratio: s.mask_hit_ratio,
            sa_hit_ratio: s.sa_hit_ratio,
        })
        .collect();
    write_csv(&out.file("decode_summary.csv"), &rows)?;
    Ok(report)
}
