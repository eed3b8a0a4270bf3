//! Run-directory writer. Every file is written to a temporary sibling and
//! renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ScenarioRun, SlotReport, Timings};
use crate::ledger::{write_chain, write_chain_index};

pub const SLOTS_CSV: &str = "slots.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const CHAIN_BIN: &str = "chain.bin";
pub const CHAIN_IDX: &str = "chain.idx";
pub const WORLD_CSV: &str = "world.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const CONFIG_TOML: &str = "config.toml";

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn slots_csv(reports: &[SlotReport]) -> String {
    let mut s = String::from(
        "slot,outcome,block_seq,block_hash,flagged_devices,excluded_orgs,max_residual_ratio,devices,malicious,\
detected,false_alarms,post_filter_fault_ratio,peers,byzantine_peers,active_peers,byzantine_active,\
byzantine_active_ratio,equivocations,txs,valid,invalid_endorsement,rejected,consensus_ticks,slot_ticks\n",
    );
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.slot,
            r.outcome.as_str(),
            r.block_seq,
            r.block_hash,
            join(&r.flagged_devices),
            join(&r.excluded_orgs),
            r.max_residual_ratio,
            r.devices,
            r.malicious,
            r.detected,
            r.false_alarms,
            r.post_filter_fault_ratio(),
            r.peers,
            r.byzantine_peers,
            r.active_peers,
            r.byzantine_active,
            r.byzantine_active_ratio(),
            r.equivocations,
            r.txs,
            r.valid,
            r.invalid_endorsement,
            r.rejected,
            r.consensus_ticks,
            r.slot_ticks
        )
        .expect("writing to a String");
    }
    s
}

pub fn timings_csv(first_slot: u64, timings: &[Timings]) -> String {
    let mut s = String::from("slot,outlier_detection_s,model_update_s,dataset_update_s,state_update_s,consensus_s\n");
    for (i, t) in timings.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            first_slot + i as u64,
            t.outlier_detection,
            t.model_update,
            t.dataset_update,
            t.state_update,
            t.consensus
        )
        .expect("writing to a String");
    }
    s
}

/// Writes the run under `root/<confighash16>-<seed>/` and returns that path.
pub fn write_run(root: &Path, run: &ScenarioRun) -> std::io::Result<PathBuf> {
    let dir = root.join(run.config.run_dir_name());
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(CONFIG_TOML), run.config.to_toml().as_bytes())?;
    write_atomic(&dir.join(SLOTS_CSV), slots_csv(&run.reports).as_bytes())?;
    let mut summary = serde_json::to_vec_pretty(&run.summary).map_err(std::io::Error::other)?;
    summary.push(b'\n');
    write_atomic(&dir.join(SUMMARY_JSON), &summary)?;
    let first = run.reports.first().map_or(0, |r| r.slot);
    write_atomic(&dir.join(TIMINGS_CSV), timings_csv(first, &run.timings).as_bytes())?;
    let mut trace = Vec::new();
    for rec in &run.trace {
        serde_json::to_writer(&mut trace, rec).map_err(std::io::Error::other)?;
        trace.push(b'\n');
    }
    write_atomic(&dir.join(TRACE_JSONL), &trace)?;
    let mut chain = Vec::new();
    write_chain(&mut chain, &run.chain).map_err(std::io::Error::other)?;
    write_atomic(&dir.join(CHAIN_BIN), &chain)?;
    let mut idx = Vec::new();
    write_chain_index(&mut idx, &run.chain)?;
    write_atomic(&dir.join(CHAIN_IDX), &idx)?;
    write_atomic(&dir.join(WORLD_CSV), &run.world_csv)?;
    Ok(dir)
}
