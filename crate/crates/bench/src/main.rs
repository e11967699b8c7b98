use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hpcledger_bench::experiments::{self, is_nondecreasing};
use hpcledger_bench::output::{self, MetricsRow};
use hpcledger_bench::scenario::parse_fault_list;
use hpcledger_bench::{Overrides, Scenario, ScenarioFile, PRESETS};

#[derive(Parser)]
#[command(name = "hpcledger", about = "Run ledger consensus scenarios on a simulated HPC cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its expectations.
    Run(ScenarioArgs),
    /// Paired normal and forced-storage-validation runs.
    Overhead(ScenarioArgs),
    /// Block latency overhead as 0..=max-failed nodes are switched off.
    FailureSweep {
        #[command(flatten)]
        args: ScenarioArgs,
        #[arg(long, default_value_t = 10)]
        max_failed: u32,
    },
    /// List built-in scenarios.
    Presets,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "duration-s", conflicts_with = "total_txns")]
    duration_s: Option<f64>,
    #[arg(long)]
    total_txns: Option<u64>,
    #[arg(long)]
    txn_rate: Option<u32>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    compute_difficulty_bits: Option<u32>,
    #[arg(long)]
    storage_difficulty_bits: Option<u32>,
    /// `<node>@<time_us>,...`
    #[arg(long)]
    kill: Option<String>,
    #[arg(long, value_name = "TIME_US")]
    fail_storage_at: Option<u64>,
    #[arg(long, value_name = "TIME_US")]
    recover_storage_at: Option<u64>,
    #[arg(long)]
    force_storage_validation: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> anyhow::Result<Scenario> {
        let mut file = match (&self.scenario, &self.preset) {
            (Some(p), _) => ScenarioFile::load(p)?,
            (None, Some(name)) => ScenarioFile::preset(name)?,
            (None, None) => ScenarioFile { name: "adhoc".into(), ..ScenarioFile::default() },
        };
        file.apply(&Overrides {
            nodes: self.nodes,
            seed: self.seed,
            duration_s: self.duration_s,
            total_txns: self.total_txns,
            txn_rate: self.txn_rate,
            block_size: self.block_size,
            compute_difficulty_bits: self.compute_difficulty_bits,
            storage_difficulty_bits: self.storage_difficulty_bits,
            kills: self.kill.as_deref().map(parse_fault_list),
            fail_storage_at_us: self.fail_storage_at,
            recover_storage_at_us: self.recover_storage_at,
            force_storage_validation: self.force_storage_validation,
        });
        Ok(file.resolve()?)
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn cmd_run(args: &ScenarioArgs) -> anyhow::Result<bool> {
    let scenario = args.load()?;
    let out = args.out_dir()?;
    let results = experiments::run_scenario(&scenario)?;
    let rows: Vec<MetricsRow<'_>> = results
        .iter()
        .enumerate()
        .map(|(i, r)| MetricsRow { scenario: &scenario.name, run: i, seed: r.config.seed, report: &r.output.report, wall_clock_s: r.wall_clock_s })
        .collect();
    output::write_metrics(&out.join("metrics.csv"), &rows)?;
    let series: Vec<_> = results.iter().enumerate().map(|(i, r)| (scenario.name.as_str(), i, &r.output.report)).collect();
    output::write_timeseries(&out.join("timeseries.csv"), &series)?;
    if let Some(last) = results.last() {
        output::write_events(&out.join("events.ndjson"), &last.output.log)?;
        output::write_ledger(&out.join("ledger.ndjson"), &last.output.storage_ledger)?;
    }
    let mut ok = true;
    for (i, r) in results.iter().enumerate() {
        let rep = &r.output.report;
        println!(
            "{} run {i}: nodes={} blocks={}/{} storage_committed={} failed={} tps={:.1} validity={:.1}% stop={:?}",
            scenario.name,
            rep.nodes,
            rep.blocks_committed + rep.blocks_storage_committed,
            rep.blocks_proposed,
            rep.blocks_storage_committed,
            rep.blocks_failed,
            rep.throughput_tps,
            rep.ledger_validity_pct,
            r.output.stop
        );
        for f in &r.failures {
            eprintln!("  FAILED {f}");
            ok = false;
        }
    }
    Ok(ok)
}

fn cmd_overhead(args: &ScenarioArgs) -> anyhow::Result<bool> {
    let scenario = args.load()?;
    let out = args.out_dir()?;
    let o = experiments::overhead(&scenario)?;
    output::write_overhead(&out.join("overhead.csv"), &o.rows)?;
    let rows = [
        MetricsRow { scenario: "normal", run: 0, seed: scenario.cluster.seed, report: &o.normal.report, wall_clock_s: 0.0 },
        MetricsRow { scenario: "forced", run: 1, seed: scenario.cluster.seed, report: &o.forced.report, wall_clock_s: 0.0 },
    ];
    output::write_metrics(&out.join("metrics.csv"), &rows)?;
    let ratio = o.block_latency_ratio();
    println!("block latency forced/normal = {ratio:.3} ({:+.1}%)", (ratio - 1.0) * 100.0);
    Ok(ratio.is_finite())
}

fn cmd_sweep(args: &ScenarioArgs, max_failed: u32) -> anyhow::Result<bool> {
    let scenario = args.load()?;
    let out = args.out_dir()?;
    let points = experiments::failure_sweep(&scenario, max_failed)?;
    output::write_sweep(&out.join("failure_sweep.csv"), &points)?;
    for p in &points {
        println!("failed={:2} p50={:.6}s overhead={:+.2}%", p.failed, p.block_latency_p50_s, p.overhead_pct);
    }
    let ok = is_nondecreasing(&points);
    if !ok {
        eprintln!("FAILED overhead_monotone: curve decreases");
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Overhead(a) => cmd_overhead(a),
        Command::FailureSweep { args, max_failed } => cmd_sweep(args, *max_failed),
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
