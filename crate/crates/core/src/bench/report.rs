//! CSV and JSON output of run metrics.

use std::io::Write;

use serde::Serialize;

use super::{Metrics, OpKind};
use crate::workload::Profile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?}"))),
        }
    }
}

/// One CSV row: a run and one operation kind.
#[derive(Debug, Serialize)]
struct Row<'a> {
    index: &'a str,
    workload: String,
    dataset: &'a str,
    block_size: usize,
    buffer_capacity: usize,
    hybrid: bool,
    seed: u64,
    op: &'a str,
    count: u64,
    misses: u64,
    avg_blocks_read: f64,
    avg_blocks_written: f64,
    inner_blocks_read: u64,
    p50_blocks_read: u64,
    p99_blocks_read: u64,
    max_blocks_read: u64,
    p99_cost: u64,
    cost_std: f64,
    p99_latency_us: f64,
    latency_std_us: f64,
    search_writes: f64,
    insert_writes: f64,
    smo_writes: f64,
    maintenance_writes: f64,
    storage_bytes: u64,
    pinned_bytes: u64,
    smo_count: u64,
    height: u32,
    items: u64,
    ops_per_sec: f64,
}

/// Column names of the CSV output, in order.
pub const CSV_COLUMNS: [&str; 30] = [
    "index",
    "workload",
    "dataset",
    "block_size",
    "buffer_capacity",
    "hybrid",
    "seed",
    "op",
    "count",
    "misses",
    "avg_blocks_read",
    "avg_blocks_written",
    "inner_blocks_read",
    "p50_blocks_read",
    "p99_blocks_read",
    "max_blocks_read",
    "p99_cost",
    "cost_std",
    "p99_latency_us",
    "latency_std_us",
    "search_writes",
    "insert_writes",
    "smo_writes",
    "maintenance_writes",
    "storage_bytes",
    "pinned_bytes",
    "smo_count",
    "height",
    "items",
    "ops_per_sec",
];

fn rows(m: &Metrics) -> Vec<Row<'_>> {
    let phase = |name: &str| m.phases.iter().find(|p| p.phase == name).map_or(0.0, |p| p.avg_blocks_written);
    OpKind::ALL
        .iter()
        .filter_map(|k| m.ops.get(k.name()).map(|o| (k.name(), o)))
        .map(|(op, o)| {
            let ins = op == OpKind::Insert.name();
            Row {
                index: m.index.name(),
                workload: m.workload.to_string(),
                dataset: &m.dataset,
                block_size: m.block_size,
                buffer_capacity: m.buffer_capacity,
                hybrid: m.hybrid,
                seed: m.seed,
                op,
                count: o.count,
                misses: o.misses,
                avg_blocks_read: o.avg_blocks_read,
                avg_blocks_written: o.avg_blocks_written,
                inner_blocks_read: o.inner_blocks_read,
                p50_blocks_read: o.p50_blocks_read,
                p99_blocks_read: o.p99_blocks_read,
                max_blocks_read: o.max_blocks_read,
                p99_cost: o.p99_cost,
                cost_std: o.cost_std,
                p99_latency_us: o.p99_latency_us,
                latency_std_us: o.latency_std_us,
                search_writes: if ins { phase("search") } else { 0.0 },
                insert_writes: if ins { phase("insert") } else { 0.0 },
                smo_writes: if ins { phase("smo") } else { 0.0 },
                maintenance_writes: if ins { phase("maintenance") } else { 0.0 },
                storage_bytes: m.storage_bytes,
                pinned_bytes: m.pinned_bytes,
                smo_count: m.smo_count,
                height: m.height,
                items: m.items,
                ops_per_sec: m.ops_per_sec,
            }
        })
        .collect()
}

/// Writes one row per (run, operation kind). The header is written even
/// when there are no rows.
pub fn write_csv<W: Write>(out: W, runs: &[Metrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for m in runs {
        for r in rows(m) {
            w.serialize(r).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_json<W: Write>(out: W, runs: &[Metrics]) -> Result<()> {
    serde_json::to_writer_pretty(out, runs).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_json(bytes: &[u8]) -> Result<Vec<Metrics>> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write<W: Write>(out: W, runs: &[Metrics], format: Format) -> Result<()> {
    match format {
        Format::Csv => write_csv(out, runs),
        Format::Json => write_json(out, runs),
    }
}

/// Profile output. CSV has one row per error bound.
pub fn write_profile<W: Write>(out: W, p: &Profile, format: Format) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(out, p).map_err(|e| Error::Format(e.to_string())),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(["dataset", "keys", "epsilon", "segments", "conflict_degree", "bptree_leaves"])
                .map_err(csv_err)?;
            for &(eps, segs) in &p.segments {
                let row = [
                    p.dataset.clone(),
                    p.keys.to_string(),
                    eps.to_string(),
                    segs.to_string(),
                    p.conflict_degree.to_string(),
                    p.bptree_leaves.to_string(),
                ];
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run, RunConfig};
    use crate::workload::{gen_synthetic, Distribution, WorkloadKind};
    use crate::IndexKind;

    fn sample() -> Metrics {
        let ds = gen_synthetic(Distribution::Uniform, 10_000, 9);
        let cfg = RunConfig { scale: 0.0005, ..RunConfig::new(IndexKind::Pgm, WorkloadKind::Balanced) };
        run(&cfg, &ds, tempfile::tempdir().unwrap().path()).unwrap()
    }

    #[test]
    fn empty_csv_has_header() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.trim_end(), CSV_COLUMNS.join(","));
    }

    #[test]
    fn csv_row_per_op_kind() {
        let m = sample();
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&m)).unwrap();
        let mut r = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
        let recs: Vec<_> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(&recs[0][7], "lookup");
        assert_eq!(&recs[1][7], "insert");
        assert_eq!(&recs[1][0], "pgm");
        assert_eq!(&recs[1][1], "balanced");
    }

    #[test]
    fn json_round_trip() {
        let m = sample();
        let mut buf = Vec::new();
        write(&mut buf, std::slice::from_ref(&m), Format::Json).unwrap();
        assert_eq!(read_json(&buf).unwrap(), vec![m]);
    }

    #[test]
    fn profile_csv_row_per_epsilon() {
        let ds = gen_synthetic(Distribution::Uniform, 5_000, 3);
        let p = crate::workload::profile(&ds, &[16, 64], 4096).unwrap();
        let mut buf = Vec::new();
        write_profile(&mut buf, &p, Format::Csv).unwrap();
        let recs: Vec<_> = csv::Reader::from_reader(buf.as_slice()).records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(&recs[1][2], "64");
    }

    #[test]
    fn format_parse() {
        assert_eq!("CSV".parse::<Format>().unwrap(), Format::Csv);
        assert!("xml".parse::<Format>().is_err());
    }
}
