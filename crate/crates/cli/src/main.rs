use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use loadbench::bench::{
    analyze, read_rows, render_bands_svg, render_markdown, render_speed_svg, run_replicated, sweep,
    timing_bands, tune_for_speed, write_csv, write_json, SweepGrid, TuneSpace,
};
use loadbench::dataset::generate_random_dataset;
use loadbench::storage::{
    CacheConfig, LatencyModel, LocalBackend, ObjectServer, ServerConfig, ENDPOINT_ENV,
};
use loadbench::{BackendKind, BenchConfig, Cutoff, DatasetSpec, RunResult, SamplerKind};

#[derive(Parser)]
#[command(name = "loadbench", version, about = "Data-loading pipeline benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random image dataset as shards plus manifests.
    Generate(GenerateArgs),
    /// Serve a directory over HTTP with optional injected latency.
    Serve(ServeArgs),
    /// Run the measurement loop for one configuration.
    Bench(Box<BenchArgs>),
    /// Run every point of a grid and write CSV and JSON results.
    Sweep(SweepArgs),
    /// Search loader settings for the highest speed.
    Tune(TuneArgs),
    /// Print correlation, slowdown and max-speed tables for result files.
    Analyze(AnalyzeArgs),
    /// Write a Markdown summary and optional SVG charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset spec as JSON; defaults to the small preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use the full-size preset instead of the small one.
    #[arg(long, conflicts_with = "spec")]
    full: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Records per shard file.
    #[arg(long, default_value_t = 1000)]
    shard_capacity: usize,
}

#[derive(Args)]
struct LatencyArgs {
    /// Mean latency; alone it gives a constant delay.
    #[arg(long)]
    latency_mean_ms: Option<f64>,
    /// Standard deviation for a lognormal delay.
    #[arg(long, requires = "latency_mean_ms")]
    latency_std_ms: Option<f64>,
    /// Lower clamp for lognormal delays.
    #[arg(long, requires = "latency_std_ms")]
    latency_min_ms: Option<f64>,
    #[arg(long, default_value_t = 0)]
    latency_seed: u64,
}

impl LatencyArgs {
    fn model(&self) -> Option<LatencyModel> {
        let mean = self.latency_mean_ms?;
        Some(match self.latency_std_ms {
            Some(std) => LatencyModel::lognormal(mean, std, self.latency_min_ms.unwrap_or(0.0)),
            None => LatencyModel::constant(mean),
        })
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "data")]
    dir: PathBuf,
    #[arg(long, default_value_t = 9000)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Requests handled concurrently.
    #[arg(long, default_value_t = 16)]
    threads: usize,
    #[command(flatten)]
    latency: LatencyArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Local,
    Memory,
    Remote,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench config as JSON; flags override its fields.
    config: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["cutoff_seconds", "full_epoch"])]
    cutoff_batches: Option<u64>,
    #[arg(long, conflicts_with = "full_epoch")]
    cutoff_seconds: Option<f64>,
    /// Run every epoch to completion.
    #[arg(long)]
    full_epoch: bool,
    #[arg(long)]
    run_model: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    prefetch_depth: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Dataset directory for the local and memory backends.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    /// Comma-separated class ids to keep.
    #[arg(long, value_delimiter = ',')]
    filter_classes: Option<Vec<u32>>,
    /// Filter by reading every record instead of using the class index.
    #[arg(long, requires = "filter_classes")]
    naive_filter: bool,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    consumer_delay_ms: Option<f64>,
    /// Seed for shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Client-side latency injected in front of every read.
    #[command(flatten)]
    latency: LatencyArgs,
    #[arg(long)]
    cache_bytes: Option<u64>,
    /// Write full results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl BenchArgs {
    fn resolve(&self) -> Result<BenchConfig> {
        let mut c: BenchConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => BenchConfig::default(),
        };
        if let Some(k) = self.cutoff_batches {
            c.cutoff = Some(Cutoff::Batches(k));
        }
        if let Some(s) = self.cutoff_seconds {
            c.cutoff = Some(Cutoff::Seconds(s));
        }
        if self.full_epoch {
            c.cutoff = None;
        }
        c.run_model |= self.run_model;
        if let Some(w) = self.workers {
            c.loader.num_workers = w;
        }
        if let Some(b) = self.batch_size {
            c.loader.batch_size = b;
        }
        if self.prefetch_depth.is_some() {
            c.loader.prefetch_depth = self.prefetch_depth;
        }
        if let Some(b) = self.backend {
            c.backend.kind = match b {
                Backend::Local => BackendKind::Local,
                Backend::Memory => BackendKind::Memory,
                Backend::Remote => BackendKind::Remote,
            };
        }
        if let Some(d) = &self.dir {
            c.backend.dir = Some(d.clone());
        }
        if let Some(e) = &self.endpoint {
            c.backend.endpoint = Some(e.clone());
        }
        if c.backend.kind != BackendKind::Remote && c.backend.dir.is_none() {
            c.backend.dir = Some(PathBuf::from("data"));
        }
        if let Some(classes) = &self.filter_classes {
            c.loader.sampler.kind = if self.naive_filter {
                SamplerKind::FilterNaive
            } else {
                SamplerKind::FilterIndexed
            };
            c.loader.sampler.classes = Some(classes.clone());
            c.loader.sampler.scan_storage = self.naive_filter;
        }
        if let Some(r) = self.replicas {
            c.replicas = r;
        }
        if let Some(w) = self.warmup {
            c.warmup_batches = w;
        }
        if let Some(r) = self.repetitions {
            c.repetitions = r;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(d) = self.consumer_delay_ms {
            c.consumer_delay_ms = d;
        }
        if let Some(s) = self.seed {
            c.loader.sampler.seed = s;
            c.loader.transform.seed = s;
        }
        if let Some(m) = self.latency.model() {
            c.backend.latency = Some(m);
            c.backend.latency_seed = self.latency.latency_seed;
        }
        if let Some(b) = self.cache_bytes {
            c.backend.cache = Some(CacheConfig { capacity_bytes: b });
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep grid as JSON.
    grid: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Search space as JSON.
    space: PathBuf,
    /// Base bench config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of candidates evaluated.
    #[arg(long, default_value_t = 8)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the best config and the trial trace as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Result files (.csv or .json).
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Backend label to compute slowdowns against.
    #[arg(long)]
    baseline: Option<String>,
    /// Print the analysis as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Also write SVG bar charts.
    #[arg(long)]
    svg: bool,
    /// Bench output JSON files to draw per-batch timing bands from.
    #[arg(long)]
    runs: Vec<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(io::BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json_file<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut spec = match (&args.spec, args.full) {
        (Some(p), _) => read_json(p)?,
        (None, true) => DatasetSpec::random(7),
        (None, false) => DatasetSpec::random_small(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    fs::create_dir_all(&args.out)?;
    let out = LocalBackend::new(&args.out)?;
    for m in generate_random_dataset(&spec, args.shard_capacity, &out)? {
        println!("{}: {} records", m.split.as_str(), m.len());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ServerConfig {
        addr: SocketAddr::new(args.host, args.port),
        latency: args.latency.model(),
        latency_seed: args.latency.latency_seed,
        threads: args.threads,
    };
    let server = ObjectServer::serve_dir(&args.dir, config)?;
    println!("serving {} at {}", args.dir.display(), server.endpoint());
    io::stdout().flush()?;
    server.wait();
    Ok(())
}

fn print_run(r: &RunResult) {
    println!(
        "rep {}: m = {:.1} samples/s over {} samples, t_f = {:.3}s, init = {:.3}s, first batch = {:.3}s",
        r.repetition,
        r.m,
        r.n,
        r.t_f,
        r.total_init_seconds(),
        r.first_batch_seconds().unwrap_or(0.0)
    );
}

fn bench(args: BenchArgs) -> Result<()> {
    let config = args.resolve()?;
    println!("config {}", config.fingerprint());
    let backend = config.backend.build()?;
    let mut runs = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        if config.replicas > 1 {
            let r = run_replicated(&config, config.replicas, Arc::clone(&backend), rep)?;
            println!(
                "rep {rep}: {} replicas, aggregate m = {:.1} samples/s, wall {:.3}s",
                config.replicas, r.aggregate_m, r.wall_seconds
            );
            runs.extend(r.replicas);
        } else {
            let r = loadbench::bench::run_loop_with(&config, Arc::clone(&backend), rep)?;
            print_run(&r);
            runs.push(r);
        }
    }
    if let Some(out) = &args.out {
        write_json_file(out, &runs)?;
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let grid: SweepGrid = read_json(&args.grid)?;
    let rows = sweep(&grid)?;
    fs::create_dir_all(&args.out)?;
    write_csv(&rows, &args.out.join("results.csv"))?;
    write_json(&rows, &args.out.join("results.json"))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} runs ({failed} failed) written to {}",
        rows.len(),
        args.out.display()
    );
    if failed == rows.len() {
        bail!("every run failed");
    }
    Ok(())
}

fn tune(args: TuneArgs) -> Result<()> {
    let space: TuneSpace = read_json(&args.space)?;
    let base: BenchConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    let result = tune_for_speed(&base, &space, args.budget, args.seed)?;
    for t in &result.trace {
        let outcome = match (&t.m, &t.error) {
            (Some(m), _) => format!("{m:.1} samples/s"),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "no result".into(),
        };
        println!(
            "batch={} workers={} prefetch={:?}: {outcome}",
            t.loader.batch_size, t.loader.num_workers, t.loader.prefetch_depth
        );
    }
    println!(
        "best: batch={} workers={} prefetch={:?} at {:.1} samples/s",
        result.best.batch_size, result.best.num_workers, result.best.prefetch_depth, result.best_m
    );
    if let Some(out) = &args.out {
        write_json_file(out, &result)?;
    }
    Ok(())
}

fn load_rows(paths: &[PathBuf]) -> Result<Vec<loadbench::bench::SweepRow>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_rows(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(rows)
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let rows = load_rows(&args.results)?;
    let analysis = analyze(&rows, args.baseline.as_deref());
    if args.json {
        println!("{}", serde_json::to_string_pretty(&analysis)?);
    } else {
        print!("{}", render_markdown(&rows, &analysis));
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let rows = load_rows(&args.results)?;
    let analysis = analyze(&rows, args.baseline.as_deref());
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("report.md"),
        render_markdown(&rows, &analysis),
    )?;
    if args.svg {
        fs::write(
            args.out.join("max_speed.svg"),
            render_speed_svg(&analysis.max_speed),
        )?;
        let mut bands = Vec::new();
        for p in &args.runs {
            let runs: Vec<RunResult> = read_json(p)?;
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            bands.extend(
                runs.iter()
                    .map(|r| (format!("{stem} rep {}", r.repetition), timing_bands(r))),
            );
        }
        if !bands.is_empty() {
            fs::write(args.out.join("timing_bands.svg"), render_bands_svg(&bands))?;
        }
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(*a),
        Command::Sweep(a) => run_sweep(a),
        Command::Tune(a) => tune(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Report(a) => report(a),
    }
}
