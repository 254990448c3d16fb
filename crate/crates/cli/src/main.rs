//! `bench`: runs index × workload matrices and reports block counts.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diskidx::bench::report::{self, Format};
use diskidx::bench::{self, IndexParams, RunConfig};
use diskidx::workload::{load_dataset, profile, Dataset, WorkloadKind};
use diskidx::{AlexLayout, IndexKind};

#[derive(Parser)]
#[command(name = "bench", version, about = "Block-count benchmarks for disk-resident indexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, replay a workload and report metrics for every config in the matrix.
    Run(RunArgs),
    /// Segment counts, conflict degree and B+-tree leaf count of a dataset.
    Profile(ProfileArgs),
    /// Replay workloads and check every operation against its I/O bound.
    VerifyBounds(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated index kinds.
    #[arg(long, value_delimiter = ',', required = true)]
    index: Vec<IndexKind>,
    /// Comma-separated workloads.
    #[arg(long, value_delimiter = ',', required = true)]
    workload: Vec<WorkloadKind>,
    /// SOSD file path or synthetic:KIND:N (uniform, lognormal, bursty, segmented).
    #[arg(long)]
    dataset: String,
    /// Comma-separated block sizes in bytes (k suffix allowed).
    #[arg(long, value_delimiter = ',', default_value = "4096", value_parser = parse_size)]
    block_size: Vec<usize>,
    /// Comma-separated LRU capacities in blocks.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    buffer: Vec<usize>,
    /// Keep inner structure in memory and count only leaf-side I/O.
    #[arg(long)]
    hybrid: bool,
    /// Fraction of the full-size operation counts.
    #[arg(long, default_value_t = 0.01)]
    scale: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Bulk fill factor of B+-tree nodes.
    #[arg(long, default_value_t = 0.8)]
    fill: f64,
    /// Error bound of FITing-tree and PGM leaf segments.
    #[arg(long, default_value_t = 64)]
    epsilon: u64,
    /// FITing-tree per-segment buffer size.
    #[arg(long, default_value_t = 256)]
    fiting_buffer: usize,
    #[arg(long, default_value = "separate")]
    alex_layout: AlexLayout,
    /// LIPP rebuild threshold as a multiple of a node's build size.
    #[arg(long, default_value_t = 1.0)]
    lipp_rebuild_ratio: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Directory for index files (default: a fresh directory under the system temp dir).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    dataset: String,
    /// Comma-separated error bounds.
    #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
    errors: Vec<u64>,
    #[arg(long, default_value = "4096", value_parser = parse_size)]
    block_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
}

fn parse_size(s: &str) -> Result<usize, String> {
    let t = s.trim().to_ascii_lowercase();
    let (num, mul) = match t.strip_suffix('k') {
        Some(n) => (n, 1024),
        None => (t.as_str(), 1),
    };
    num.parse::<usize>().map(|v| v * mul).map_err(|e| format!("{s:?}: {e}"))
}

impl RunArgs {
    fn configs(&self) -> Vec<RunConfig> {
        let params = IndexParams {
            fill: self.fill,
            epsilon: self.epsilon,
            fiting_buffer: self.fiting_buffer,
            alex_layout: self.alex_layout,
            lipp_rebuild_ratio: self.lipp_rebuild_ratio,
            ..IndexParams::default()
        };
        let mut out = Vec::new();
        for &index in &self.index {
            for &workload in &self.workload {
                for &block_size in &self.block_size {
                    for &buffer_capacity in &self.buffer {
                        out.push(RunConfig {
                            index,
                            workload,
                            block_size,
                            buffer_capacity,
                            hybrid: self.hybrid,
                            scale: self.scale,
                            seed: self.seed,
                            params: params.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

/// A scratch directory removed on drop, unless the user supplied it.
struct WorkDir {
    path: PathBuf,
    owned: bool,
}

impl WorkDir {
    fn new(given: Option<&Path>) -> io::Result<Self> {
        let (path, owned) = match given {
            Some(p) => (p.to_path_buf(), false),
            None => (std::env::temp_dir().join(format!("diskidx-bench-{}", std::process::id())), true),
        };
        fs::create_dir_all(&path)?;
        Ok(WorkDir { path, owned })
    }

    /// A fresh subdirectory for one run.
    fn run_dir(&self, i: usize) -> io::Result<PathBuf> {
        let d = self.path.join(format!("run-{i}"));
        if d.exists() {
            fs::remove_dir_all(&d)?;
        }
        fs::create_dir_all(&d)?;
        Ok(d)
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        if self.owned {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

fn output(out: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load(source: &str, seed: u64) -> AnyResult<Dataset> {
    load_dataset(source, seed).map_err(|e| format!("dataset {source}: {e}").into())
}

fn cmd_run(a: &RunArgs) -> AnyResult<()> {
    let configs = a.configs();
    for c in &configs {
        c.validate()?;
    }
    let ds = load(&a.dataset, a.seed)?;
    let work = WorkDir::new(a.work_dir.as_deref())?;
    let mut runs = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let dir = work.run_dir(i)?;
        let m = bench::run(cfg, &ds, &dir)?;
        eprintln!(
            "{} {} bs={} buf={}: {} ops, {:.0} ops/s",
            cfg.index, cfg.workload, cfg.block_size, cfg.buffer_capacity, m.op_count, m.ops_per_sec
        );
        fs::remove_dir_all(&dir)?;
        runs.push(m);
    }
    let mut w = output(a.out.as_deref())?;
    report::write(&mut w, &runs, a.format)?;
    if a.format == Format::Json {
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns whether every operation was within its bound.
fn cmd_verify(a: &RunArgs) -> AnyResult<bool> {
    let configs = a.configs();
    for c in &configs {
        c.validate()?;
    }
    let ds = load(&a.dataset, a.seed)?;
    let work = WorkDir::new(a.work_dir.as_deref())?;
    let mut w = output(a.out.as_deref())?;
    let mut all_ok = true;
    for (i, cfg) in configs.iter().enumerate() {
        let dir = work.run_dir(i)?;
        let r = bench::verify_bounds(cfg, &ds, &dir)?;
        fs::remove_dir_all(&dir)?;
        all_ok &= r.passed();
        writeln!(
            w,
            "{} {} bs={} buf={}: {} checked, worst margin {:+}, {} violations",
            cfg.index,
            cfg.workload,
            cfg.block_size,
            cfg.buffer_capacity,
            r.checked,
            r.worst_margin,
            r.violations.len()
        )?;
        for v in r.violations.iter().take(5) {
            writeln!(w, "  op {} {} key {}: read {} > bound {}", v.op_index, v.op, v.key, v.blocks_read, v.bound)?;
        }
    }
    w.flush()?;
    Ok(all_ok)
}

fn cmd_profile(a: &ProfileArgs) -> AnyResult<()> {
    let ds = load(&a.dataset, a.seed)?;
    let p = profile(&ds, &a.errors, a.block_size)?;
    let mut w = output(a.out.as_deref())?;
    report::write_profile(&mut w, &p, a.format)?;
    if a.format == Format::Json {
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Profile(a) => cmd_profile(a).map(|_| true),
        Command::VerifyBounds(a) => cmd_verify(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
