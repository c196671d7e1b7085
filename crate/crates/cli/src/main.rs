use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hipprune_cli::commands::{cmd_decode_sim, cmd_generate, cmd_offload_report, cmd_recall_report, cmd_sparsity_report};
use hipprune_cli::config::{parse_capacity_list, OutputPaths, Overrides, RunConfig};
use hipprune_cli::report::{all_passed, CheckRecord};

#[derive(Parser)]
#[command(name = "hipprune", version, about = "Hierarchical context pruning reports and simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pruning preset: 3k, 5k, fast or flash.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Decode steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Needle as POS:STRENGTH; repeatable.
    #[arg(long = "needle")]
    needles: Vec<String>,
    /// Comma-separated bank capacities in pages.
    #[arg(long)]
    capacity_sweep: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured workload as a HIPW dump.
    Generate(Common),
    /// Top-k chunk sparsity for several chunk sizes.
    SparsityReport(Common),
    /// Attention-mass recall of the pruning mask against baselines.
    RecallReport(Common),
    /// Stage-cached decoding with KV bank telemetry.
    DecodeSim(Common),
    /// Bank hit ratios and modeled latency across capacities.
    OffloadReport(Common),
}

fn load(common: &Common) -> hipprune::Result<(RunConfig, OutputPaths)> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        preset: common.preset.clone(),
        seed: common.seed,
        steps: common.steps,
        needles: common.needles.clone(),
        capacity_sweep: common.capacity_sweep.as_deref().map(parse_capacity_list).transpose()?,
    };
    config.apply(&overrides);
    config.validate()?;
    Ok((config, OutputPaths::new(&common.out)))
}

fn run(command: &Command) -> hipprune::Result<(String, Vec<CheckRecord>)> {
    Ok(match command {
        Command::Generate(c) => {
            let (cfg, out) = load(c)?;
            let r = cmd_generate(&cfg, &out)?;
            (format!("wrote {} (crc32 {})", r.path, r.checksum), r.checks)
        }
        Command::SparsityReport(c) => {
            let (cfg, out) = load(c)?;
            let r = cmd_sparsity_report(&cfg, &out)?;
            (format!("{} chunk sizes -> {}", r.rows.len(), out.dir.display()), r.checks)
        }
        Command::RecallReport(c) => {
            let (cfg, out) = load(c)?;
            let r = cmd_recall_report(&cfg, &out)?;
            (
                format!(
                    "mask recall {:.4}, random {:.4}, top-k {:.4}",
                    r.mean_mask_recall, r.mean_random_recall, r.mean_topk_recall
                ),
                r.checks,
            )
        }
        Command::DecodeSim(c) => {
            let (cfg, out) = load(c)?;
            let r = cmd_decode_sim(&cfg, &out)?;
            (format!("{} steps, output {}", r.steps, &r.output_checksum[..16]), r.checks)
        }
        Command::OffloadReport(c) => {
            let (cfg, out) = load(c)?;
            let r = cmd_offload_report(&cfg, &out)?;
            (format!("{} rows, host/device cost {}", r.rows.len(), r.host_device_cost_ratio), r.checks)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("HIPPRUNE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(&cli.command) {
        Ok((summary, checks)) => {
            println!("{summary}");
            if all_passed(&checks) {
                ExitCode::SUCCESS
            } else {
                let failed: Vec<&CheckRecord> = checks.iter().filter(|c| !c.passed).collect();
                eprintln!("{}", serde_json::json!({ "status": "invariant_failure", "failed": failed }));
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "status": "error", "error": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
