//! Scenario files: a profile, a cluster, a trace and the policies to compare.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{calibrate_encoder_fraction, Report, ReportMetadata};
use crate::engine::write_event_log;
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, LatencyProfile, DEFAULT_STEPS};
use crate::orchestrator::{Policy, SimOptions, SimOutput, Simulator};
use crate::store::{cache_sweep, AddonCatalog, SweepPoint, CONTROLNET_SIZE_MIB};
use crate::workload::{self, Trace, TraceSpec};

/// Exactly one of the three sources must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<TraceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
    pub event_log: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![ReportFormat::Json, ReportFormat::Csv],
            event_log: false,
        }
    }
}

/// Retunes the encoder share of the UNet so that the serial fraction at
/// `n_controlnets` equals `serial_fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub n_controlnets: usize,
    pub serial_fraction: f64,
    #[serde(default = "default_steps")]
    pub steps: u32,
}

fn default_steps() -> u32 {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSweepSpec {
    pub capacities_mib: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub profile: LatencyProfile,
    #[serde(default)]
    pub cluster: ClusterSpec,
    pub trace: TraceSource,
    pub policies: Vec<Policy>,
    /// Defaults to the first policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Policy>,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<Calibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_sweep: Option<CacheSweepSpec>,
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub formats: Option<Vec<ReportFormat>>,
    /// Skip writing files entirely.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub controlnet: Vec<SweepPoint>,
    pub lora: Vec<SweepPoint>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub report: Report,
    pub trace: Trace,
    /// Sorted by policy label.
    pub runs: Vec<(Policy, SimOutput)>,
    pub sweep: Option<SweepResult>,
    pub written: Vec<PathBuf>,
}

impl Scenario {
    /// Parses JSON, reporting the key path of the first offending field.
    pub fn from_json(content: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(content);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        s.validate()?;
        Ok(s)
    }

    /// Loads a scenario; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::from_json(&content)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(f) = &mut s.trace.file {
            if f.is_relative() {
                *f = base.join(&*f);
            }
            if !f.exists() {
                return Err(Error::config(
                    "trace.file",
                    format!("{} does not exist", f.display()),
                ));
            }
        }
        if let Some(d) = &mut s.outputs.dir {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::config("policies", "at least one policy is required"));
        }
        let set = [
            self.trace.preset.is_some(),
            self.trace.spec.is_some(),
            self.trace.file.is_some(),
        ];
        if set.iter().filter(|x| **x).count() != 1 {
            return Err(Error::config(
                "trace",
                "set exactly one of `preset`, `spec`, `file`",
            ));
        }
        if let Some(p) = &self.trace.preset {
            if TraceSpec::preset(p).is_none() {
                return Err(Error::config(
                    "trace.preset",
                    format!("unknown preset `{p}`"),
                ));
            }
        }
        if let Some(b) = &self.baseline {
            if !self.policies.contains(b) {
                return Err(Error::config(
                    "baseline",
                    format!("`{b}` is not among the policies"),
                ));
            }
        }
        if let Some(sw) = &self.cache_sweep {
            if sw.capacities_mib.iter().any(|c| !(*c >= 0.0)) {
                return Err(Error::config(
                    "cache_sweep.capacities_mib",
                    "capacities must be >= 0",
                ));
            }
        }
        self.profile.validate()?;
        self.cluster.validate()?;
        Ok(())
    }

    pub fn baseline_policy(&self) -> Policy {
        self.baseline.unwrap_or(self.policies[0])
    }

    fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(&Sha256::digest(&json)[..8]))
    }

    fn resolve_trace(&self, seed: Option<u64>) -> Result<(Trace, AddonCatalog, u64)> {
        if let Some(path) = &self.trace.file {
            let trace = workload::ingest(path)?;
            let catalog = trace.implied_catalog(CONTROLNET_SIZE_MIB);
            return Ok((trace, catalog, seed.unwrap_or(0)));
        }
        let mut spec = match (&self.trace.preset, &self.trace.spec) {
            (Some(p), _) => TraceSpec::preset(p).expect("validated"),
            (_, Some(s)) => s.clone(),
            _ => unreachable!("validated"),
        };
        if let Some(s) = seed {
            spec.seed = s;
        }
        let trace = workload::generate(&spec)?;
        let catalog = spec.catalog()?;
        Ok((trace, catalog, spec.seed))
    }

    /// Generates or ingests the trace, runs every policy on it concurrently
    /// and assembles the report.
    pub fn run(&self, opts: &RunOptions) -> Result<ScenarioRun> {
        let mut scenario = self.clone();
        if let Some(s) = opts.seed {
            scenario.seed = Some(s);
        }
        if let Some(c) = &scenario.calibrate {
            scenario.profile = calibrate_encoder_fraction(
                &scenario.profile,
                c.n_controlnets,
                c.steps,
                c.serial_fraction,
            )?;
        }
        let (trace, catalog, seed) = scenario.resolve_trace(scenario.seed)?;
        trace.validate(&catalog)?;

        let options = SimOptions {
            record_timeline: false,
            record_log: scenario.outputs.event_log,
            ..SimOptions::default()
        };
        let mut policies = scenario.policies.clone();
        policies.sort_by_key(|p| p.to_string());
        policies.dedup();
        let results: Vec<Result<SimOutput>> = std::thread::scope(|scope| {
            let handles: Vec<_> = policies
                .iter()
                .map(|p| {
                    let (sc, cat, tr) = (&scenario, &catalog, &trace);
                    scope.spawn(move || {
                        Simulator::new(&sc.profile, &sc.cluster, cat)?
                            .with_options(options)
                            .run(&tr.requests, *p)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked"))
                .collect()
        });
        let runs = policies
            .into_iter()
            .zip(results)
            .map(|(p, r)| r.map(|out| (p, out)))
            .collect::<Result<Vec<_>>>()?;

        let trace_hash = match &trace.provenance {
            workload::Provenance::Generated { spec_hash, .. } => spec_hash.clone(),
            workload::Provenance::Ingested { .. } => trace_content_hash(&trace)?,
        };
        let metadata = ReportMetadata::new(scenario.hash()?, trace_hash, seed);
        let report = Report::build(&runs, &scenario.baseline_policy(), metadata)?;

        let sweep = match &scenario.cache_sweep {
            Some(sw) => Some(sweep_trace(&trace, &catalog, &sw.capacities_mib)?),
            None => None,
        };

        let mut run = ScenarioRun {
            report,
            trace,
            runs,
            sweep,
            written: Vec::new(),
        };
        if !opts.dry_run {
            let dir = opts
                .out_dir
                .clone()
                .or_else(|| scenario.outputs.dir.clone())
                .unwrap_or_else(|| PathBuf::from("."));
            let formats = opts
                .formats
                .clone()
                .unwrap_or_else(|| scenario.outputs.formats.clone());
            run.written = write_outputs(&run, &dir, &formats, scenario.outputs.event_log)?;
        }
        Ok(run)
    }

    /// Replays the scenario's add-on accesses through LRU caches of each
    /// capacity without simulating any policy.
    pub fn sweep(&self, capacities_mib: &[f64], seed: Option<u64>) -> Result<(Trace, SweepResult)> {
        let (trace, catalog, _) = self.resolve_trace(seed.or(self.seed))?;
        trace.validate(&catalog)?;
        let sweep = sweep_trace(&trace, &catalog, capacities_mib)?;
        Ok((trace, sweep))
    }
}

fn sweep_trace(
    trace: &Trace,
    catalog: &AddonCatalog,
    capacities_mib: &[f64],
) -> Result<SweepResult> {
    if capacities_mib.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::config(
            "cache_sweep.capacities_mib",
            "capacities must be >= 0",
        ));
    }
    let mut caps = capacities_mib.to_vec();
    caps.sort_by(f64::total_cmp);
    Ok(SweepResult {
        controlnet: cache_sweep(&trace.controlnet_accesses(catalog), &caps)?,
        lora: cache_sweep(&trace.lora_accesses(), &caps)?,
    })
}

/// Writes `cache_sweep_controlnet.csv` and `cache_sweep_lora.csv` into `dir`.
pub fn write_sweep_files(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, points) in [("controlnet", &sweep.controlnet), ("lora", &sweep.lora)] {
        let path = dir.join(format!("cache_sweep_{name}.csv"));
        write_sweep_csv(points, create(&path)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn trace_content_hash(trace: &Trace) -> Result<String> {
    let mut buf = Vec::new();
    workload::export(trace, &mut buf).map_err(|e| Error::io("<trace>", e))?;
    Ok(hex::encode(&Sha256::digest(&buf)[..8]))
}

/// File-name-safe form of a policy label.
pub fn policy_slug(p: &Policy) -> String {
    p.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_outputs(
    run: &ScenarioRun,
    dir: &Path,
    formats: &[ReportFormat],
    event_log: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&ReportFormat::Json) {
        let path = dir.join("report.json");
        run.report.write_json(create(&path)?)?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Csv) {
        let path = dir.join("report.csv");
        run.report.write_csv(create(&path)?)?;
        written.push(path);
        let path = dir.join("report_long.csv");
        run.report.write_long_csv(create(&path)?)?;
        written.push(path);
    }
    if event_log {
        for (p, out) in &run.runs {
            let path = dir.join(format!("events_{}.ndjson", policy_slug(p)));
            let mut w = create(&path)?;
            write_event_log(&out.event_log, &mut w).map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    if let Some(sw) = &run.sweep {
        written.extend(write_sweep_files(sw, dir)?);
    }
    Ok(written)
}

/// Columns: `capacity_mib,accesses,hits,hit_rate,evictions,bytes_fetched_mib`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "capacity_mib,accesses,hits,hit_rate,evictions,bytes_fetched_mib"
    )?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.capacity_mib,
            p.stats.accesses,
            p.stats.hits,
            p.stats.hit_rate(),
            p.stats.evictions,
            p.stats.bytes_fetched_mib
        )?;
    }
    out.flush()
}

/// Loads and runs a scenario file with its own output settings.
pub fn run_scenario(path: &Path) -> Result<Report> {
    Ok(Scenario::load(path)?.run(&RunOptions::default())?.report)
}
