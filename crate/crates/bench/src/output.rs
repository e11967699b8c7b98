//! CSV and newline-delimited JSON exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use hpcledger_core::metrics::{MetricsReport, OverheadRow};
use hpcledger_core::sim::EventLog;
use hpcledger_core::{Block, Ledger};
use serde::Serialize;

/// One `metrics.csv` row. The wall-clock column is informational only.
#[derive(Clone, Debug)]
pub struct MetricsRow<'a> {
    pub scenario: &'a str,
    pub run: usize,
    pub seed: u64,
    pub report: &'a MetricsReport,
    pub wall_clock_s: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow<'_>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let mut header = vec!["scenario".to_owned(), "run".into(), "nodes".into(), "live_nodes".into(), "seed".into()];
    header.extend(first.report.scalars().iter().map(|(k, _)| (*k).to_owned()));
    header.push("wall_clock_s".into());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.scenario.to_owned(), row.run.to_string(), row.report.nodes.to_string(), row.report.live_nodes.to_string(), row.seed.to_string()];
        rec.extend(row.report.scalars().iter().map(|(_, v)| v.to_string()));
        rec.push(format!("{:.3}", row.wall_clock_s));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Committed transactions per bucket, one row per bucket per run.
pub fn write_timeseries(path: &Path, runs: &[(&str, usize, &MetricsReport)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "run", "bucket", "start_s", "committed_txns", "tps"])?;
    for (name, run, r) in runs {
        let width = r.bucket.as_secs_f64();
        for (i, &v) in r.timeseries.iter().enumerate() {
            w.write_record([
                (*name).to_owned(),
                run.to_string(),
                i.to_string(),
                format!("{}", i as f64 * width),
                v.to_string(),
                format!("{}", v as f64 / width),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EventRecord<'a> {
    time_ns: u64,
    kind: String,
    from: String,
    to: String,
    digest: &'a str,
}

pub fn write_events(path: &Path, log: &EventLog) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in log.iter() {
        let digest = format!("{:016x}", e.digest);
        let rec = EventRecord { time_ns: e.time.as_nanos(), kind: e.kind.to_string(), from: e.from.to_string(), to: e.to.to_string(), digest: &digest };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TxnRecord {
    txn_id: u64,
    sender: u32,
    receiver: u32,
    creation_time_us: u64,
    amount: u64,
}

#[derive(Serialize)]
struct BlockRecord {
    block_id: u64,
    hash: String,
    parent: String,
    creation_time_us: u64,
    puzzle_difficulty: u32,
    nonce: u64,
    txns: Vec<TxnRecord>,
}

fn block_record(b: &Block) -> BlockRecord {
    BlockRecord {
        block_id: b.block_id,
        hash: b.hash().map(|h| hex::encode(h.as_bytes())).unwrap_or_default(),
        parent: hex::encode(b.parent_block_hash.as_bytes()),
        creation_time_us: b.creation_time,
        puzzle_difficulty: b.puzzle_difficulty,
        nonce: b.mined_nonce,
        txns: b
            .txn_list
            .iter()
            .map(|t| TxnRecord { txn_id: t.txn_id, sender: t.sender_id, receiver: t.receiver_id, creation_time_us: t.creation_time, amount: t.txn_amount })
            .collect(),
    }
}

pub fn write_ledger(path: &Path, ledger: &Ledger) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for b in ledger.blocks() {
        serde_json::to_writer(&mut w, &block_record(b))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_overhead(path: &Path, rows: &[OverheadRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "baseline", "candidate", "ratio"])?;
    for r in rows {
        w.write_record([r.metric.to_owned(), r.baseline.to_string(), r.candidate.to_string(), r.ratio.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub failed: u32,
    pub block_latency_p50_s: f64,
    pub overhead_pct: f64,
    pub storage_lookups: u64,
}

pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
