//! `diffsim`: run serving scenarios, generate traces and probe the models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffsim::merge::bench_merge;
use diffsim::scenario::{write_sweep_files, ReportFormat, RunOptions, Scenario};
use diffsim::store::SweepPoint;
use diffsim::workload::{self, calibrate_zipf, top_count, zipf_weights, TraceSpec};
use diffsim::{Error, Result};

#[derive(Parser)]
#[command(
    name = "diffsim",
    version,
    about = "Diffusion serving simulator with ControlNet and LoRA add-ons"
)]
struct Cli {
    /// Overrides the seed of generated traces.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for written outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Output format for reports and printed results.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run every policy of a scenario file and write the reports.
    Run { scenario: PathBuf },
    /// Generate a trace from a preset (service-a, service-b) or a JSON spec file.
    GenTrace {
        spec: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        max_requests: Option<usize>,
        #[arg(long)]
        duration_ms: Option<f64>,
    },
    /// Find the Zipf exponent at which the top fraction of items carries the target mass.
    CalibrateZipf {
        #[arg(long)]
        items: usize,
        #[arg(long)]
        top: f64,
        #[arg(long)]
        mass: f64,
    },
    /// Hit rates of the scenario's add-on accesses across cache capacities.
    SweepCache {
        scenario: PathBuf,
        /// Capacities in MiB, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        capacities: Vec<f64>,
    },
    /// Time in-place merging against create-and-replace on random matrices.
    BenchMerge {
        #[arg(long, default_value_t = 2048)]
        h1: usize,
        #[arg(long, default_value_t = 2048)]
        h2: usize,
        #[arg(long, default_value_t = 64)]
        rank: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { scenario } => run(cli, scenario),
        Command::GenTrace {
            spec,
            output,
            max_requests,
            duration_ms,
        } => gen_trace(cli, spec, output, *max_requests, *duration_ms),
        Command::CalibrateZipf { items, top, mass } => calibrate(cli, *items, *top, *mass),
        Command::SweepCache {
            scenario,
            capacities,
        } => sweep(cli, scenario, capacities),
        Command::BenchMerge { h1, h2, rank, reps } => bench(cli, *h1, *h2, *rank, *reps),
    }
}

fn run(cli: &Cli, path: &Path) -> Result<()> {
    let scenario = Scenario::load(path)?;
    let opts = RunOptions {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        formats: cli.format.map(|f| match f {
            Format::Json => vec![ReportFormat::Json],
            Format::Csv => vec![ReportFormat::Csv],
        }),
        dry_run: false,
    };
    let run = scenario.run(&opts)?;
    println!(
        "{} requests, seed {}, baseline {}",
        run.trace.len(),
        run.report.metadata.seed,
        run.report.baseline
    );
    println!(
        "{:<34} {:>12} {:>12} {:>12} {:>10} {:>8}",
        "policy", "mean_ms", "p95_ms", "img/gpu-min", "speedup", "cn_hit"
    );
    for p in &run.report.policies {
        println!(
            "{:<34} {:>12.1} {:>12.1} {:>12.3} {:>10.3} {:>8.3}",
            p.policy,
            p.mean_latency_ms,
            p.p95_latency_ms,
            p.throughput,
            p.speedup_vs_baseline,
            p.caches.controlnet.hit_rate()
        );
    }
    for w in &run.written {
        println!("wrote {}", w.display());
    }
    Ok(())
}

fn load_spec(spec: &str) -> Result<TraceSpec> {
    if let Some(s) = TraceSpec::preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::config(
            "spec",
            format!("`{spec}` is neither a preset (service-a, service-b) nor a file"),
        ));
    }
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&content)?)
}

fn gen_trace(
    cli: &Cli,
    spec: &str,
    output: &Path,
    max_requests: Option<usize>,
    duration_ms: Option<f64>,
) -> Result<()> {
    let mut spec = load_spec(spec)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(n) = max_requests {
        spec.max_requests = Some(n);
    }
    if let Some(d) = duration_ms {
        spec.duration_ms = d;
    }
    let output = match &cli.out_dir {
        Some(dir) if output.is_relative() => dir.join(output),
        _ => output.to_path_buf(),
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let trace = workload::generate(&spec)?;
    workload::export_file(&trace, &output)?;
    println!(
        "wrote {} requests to {} (spec {}, seed {})",
        trace.len(),
        output.display(),
        spec.hash(),
        spec.seed
    );
    Ok(())
}

fn calibrate(cli: &Cli, items: usize, top: f64, mass: f64) -> Result<()> {
    let exponent = calibrate_zipf(items, top, mass)?;
    let k = top_count(items, top);
    let achieved: f64 = zipf_weights(items, exponent)[..k].iter().sum();
    match cli.format {
        Some(Format::Json) => println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "items": items, "top_count": k, "target_mass": mass,
                "exponent": exponent, "achieved_mass": achieved,
            }))?
        ),
        Some(Format::Csv) => {
            println!("items,top_count,target_mass,exponent,achieved_mass");
            println!("{items},{k},{mass},{exponent},{achieved}");
        }
        None => println!(
            "exponent {exponent:.6}: top {k} of {items} items carry {achieved:.6} of requests"
        ),
    }
    Ok(())
}

fn print_sweep(name: &str, points: &[SweepPoint]) {
    println!("{name}");
    println!(
        "{:>14} {:>10} {:>10} {:>9} {:>10}",
        "capacity_mib", "accesses", "hits", "hit_rate", "evictions"
    );
    for p in points {
        println!(
            "{:>14} {:>10} {:>10} {:>9.4} {:>10}",
            p.capacity_mib,
            p.stats.accesses,
            p.stats.hits,
            p.stats.hit_rate(),
            p.stats.evictions
        );
    }
}

fn sweep(cli: &Cli, path: &Path, capacities: &[f64]) -> Result<()> {
    let scenario = Scenario::load(path)?;
    let (trace, result) = scenario.sweep(capacities, cli.seed)?;
    if cli.format == Some(Format::Json) {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("{} requests", trace.len());
        print_sweep("controlnet", &result.controlnet);
        print_sweep("lora", &result.lora);
    }
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    for w in write_sweep_files(&result, &dir)? {
        eprintln!("wrote {}", w.display());
    }
    Ok(())
}

fn bench(cli: &Cli, h1: usize, h2: usize, rank: usize, reps: usize) -> Result<()> {
    let b = bench_merge(h1, h2, rank, reps, cli.seed.unwrap_or(0))?;
    match cli.format {
        Some(Format::Json) => println!("{}", serde_json::to_string_pretty(&b)?),
        Some(Format::Csv) => {
            println!(
                "h1,h2,rank,in_place_ms,create_replace_ms,in_place_bytes,create_replace_bytes"
            );
            println!(
                "{},{},{},{},{},{},{}",
                b.h1,
                b.h2,
                b.rank,
                b.in_place_ms,
                b.create_replace_ms,
                b.in_place_bytes,
                b.create_replace_bytes
            );
        }
        None => println!(
            "{h1}x{h2} rank {rank}: in-place {:.3} ms ({} B), create-and-replace {:.3} ms ({} B)",
            b.in_place_ms, b.in_place_bytes, b.create_replace_ms, b.create_replace_bytes
        ),
    }
    Ok(())
}
