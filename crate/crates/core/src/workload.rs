//! Trace schema, synthetic generation calibrated to production add-on
//! statistics, Zipf calibration, and CSV trace ingestion/export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, LineError, Result};
use crate::model::{ControlNetId, LoraId, LoraRef, Request, DEFAULT_STEPS};
use crate::store::{AddonCatalog, CONTROLNET_SIZE_MIB};

/// Exact header of the trace CSV format.
pub const TRACE_HEADER: &str = "request_id,arrival_ms,controlnet_ids,lora_ids,lora_sizes_mib";

const ZIPF_MAX_EXPONENT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson {
        rate_per_s: f64,
    },
    FixedInterval {
        interval_ms: f64,
    },
    /// Arrival times come from an ingested trace file.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Popularity {
    Zipf {
        exponent: f64,
    },
    /// Solve for the exponent at which the top `top_fraction` of ids carry `target_mass`.
    ZipfCalibrated {
        top_fraction: f64,
        target_mass: f64,
    },
    /// Explicit per-id weights, id order.
    Weights {
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SizeDist {
    Uniform { min_mib: f64, max_mib: f64 },
    Fixed { mib: f64 },
    Choice { values_mib: Vec<f64> },
}

/// LoRA sizes quoted for the SDXL microbenchmarks.
pub const LORA_FIXTURES_MIB: [f64; 3] = [341.0, 384.0, 456.0];

/// Statistical description of a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub duration_ms: f64,
    pub max_requests: Option<usize>,
    pub arrival: ArrivalProcess,
    /// Minimum spacing between consecutive requests landing on the same
    /// worker under round-robin over `workers`, so LoRAs can be patched off.
    pub patch_off_gap_ms: f64,
    pub workers: usize,
    pub controlnet_count_dist: BTreeMap<usize, f64>,
    pub lora_count_dist: BTreeMap<usize, f64>,
    pub n_controlnets: usize,
    pub n_loras: usize,
    pub controlnet_popularity: Popularity,
    pub lora_popularity: Popularity,
    pub lora_size_dist: SizeDist,
    pub controlnet_size_mib: f64,
    pub steps: u32,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self::service_a()
    }
}

impl TraceSpec {
    /// Service A: 46 ControlNets (11% carry 98% of invocations), about 7k LoRAs.
    pub fn service_a() -> Self {
        Self {
            duration_ms: 600_000.0,
            max_requests: None,
            arrival: ArrivalProcess::FixedInterval {
                interval_ms: 1000.0,
            },
            patch_off_gap_ms: 1000.0,
            workers: 1,
            controlnet_count_dist: BTreeMap::from([(1, 0.305), (2, 0.695)]),
            lora_count_dist: BTreeMap::from([(0, 0.002), (1, 0.088), (2, 0.91)]),
            n_controlnets: 46,
            n_loras: 7000,
            controlnet_popularity: Popularity::ZipfCalibrated {
                top_fraction: 0.11,
                target_mass: 0.98,
            },
            lora_popularity: Popularity::Zipf { exponent: 0.6 },
            lora_size_dist: SizeDist::Uniform {
                min_mib: 100.0,
                max_mib: 500.0,
            },
            controlnet_size_mib: CONTROLNET_SIZE_MIB,
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }

    /// Service B: 94 ControlNets (9% carry 95% of invocations), about 7.5k LoRAs.
    pub fn service_b() -> Self {
        Self {
            controlnet_count_dist: BTreeMap::from([(0, 0.019), (1, 0.251), (2, 0.699), (3, 0.031)]),
            lora_count_dist: BTreeMap::from([(0, 0.072), (1, 0.736), (2, 0.192)]),
            n_controlnets: 94,
            n_loras: 7500,
            controlnet_popularity: Popularity::ZipfCalibrated {
                top_fraction: 0.09,
                target_mass: 0.95,
            },
            ..Self::service_a()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "service-a" => Some(Self::service_a()),
            "service-b" => Some(Self::service_b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, dist, n) in [
            (
                "controlnet_count_dist",
                &self.controlnet_count_dist,
                self.n_controlnets,
            ),
            ("lora_count_dist", &self.lora_count_dist, self.n_loras),
        ] {
            let sum: f64 = dist.values().sum();
            if (sum - 1.0).abs() > 1e-9 || dist.values().any(|p| !(*p >= 0.0)) {
                return Err(Error::config(
                    format!("trace.{key}"),
                    format!("probabilities must be >= 0 and sum to 1 (got {sum})"),
                ));
            }
            if let Some((count, _)) = dist.iter().rev().find(|(c, p)| **p > 0.0 && **c > n) {
                return Err(Error::validation(format!(
                    "{key}: count {count} exceeds the {n} distinct ids available"
                )));
            }
        }
        match self.arrival {
            ArrivalProcess::Poisson { rate_per_s } if !(rate_per_s > 0.0) => {
                return Err(Error::config("trace.arrival.rate_per_s", "must be > 0"));
            }
            ArrivalProcess::FixedInterval { interval_ms } if !(interval_ms > 0.0) => {
                return Err(Error::config("trace.arrival.interval_ms", "must be > 0"));
            }
            _ => {}
        }
        if self.workers < 1 {
            return Err(Error::config("trace.workers", "must be >= 1"));
        }
        if self.steps < 1 {
            return Err(Error::config("trace.steps", "must be >= 1"));
        }
        if !(self.controlnet_size_mib > 0.0) {
            return Err(Error::config("trace.controlnet_size_mib", "must be > 0"));
        }
        Ok(())
    }

    /// Short content hash identifying this spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// The ids this spec can draw, with sizes. Deterministic in the seed.
    pub fn catalog(&self) -> Result<AddonCatalog> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_5123);
        let controlnets = (0..self.n_controlnets as u32)
            .map(|i| (ControlNetId(i), self.controlnet_size_mib))
            .collect();
        let mut loras = BTreeMap::new();
        for i in 0..self.n_loras as u32 {
            loras.insert(LoraId(i), draw_size(&self.lora_size_dist, &mut rng)?);
        }
        Ok(AddonCatalog { controlnets, loras })
    }
}

fn draw_size(dist: &SizeDist, rng: &mut impl Rng) -> Result<f64> {
    let v = match dist {
        SizeDist::Fixed { mib } => *mib,
        SizeDist::Uniform { min_mib, max_mib } => {
            if !(min_mib <= max_mib) {
                return Err(Error::config("trace.lora_size_dist", "min must be <= max"));
            }
            rng.random_range(*min_mib..=*max_mib)
        }
        SizeDist::Choice { values_mib } => {
            if values_mib.is_empty() {
                return Err(Error::config("trace.lora_size_dist", "empty choice list"));
            }
            values_mib[rng.random_range(0..values_mib.len())]
        }
    };
    if !(v > 0.0) {
        return Err(Error::config(
            "trace.lora_size_dist",
            format!("size {v} must be > 0"),
        ));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Generated { spec_hash: String, seed: u64 },
    Ingested { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub requests: Vec<Request>,
    pub provenance: Provenance,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Checks arrival order and that every referenced add-on is in `catalog`.
    pub fn validate(&self, catalog: &AddonCatalog) -> Result<()> {
        if let Some(w) = self
            .requests
            .windows(2)
            .find(|w| w[1].arrival_ms < w[0].arrival_ms)
        {
            return Err(Error::validation(format!(
                "request {} arrives before request {}",
                w[1].id, w[0].id
            )));
        }
        for r in &self.requests {
            if let Some(c) = r
                .controlnets
                .iter()
                .find(|c| catalog.controlnet_size(**c).is_none())
            {
                return Err(Error::NotFound {
                    request_id: r.id,
                    what: c.to_string(),
                });
            }
            if let Some(l) = r.loras.iter().find(|l| catalog.lora_size(l.id).is_none()) {
                return Err(Error::NotFound {
                    request_id: r.id,
                    what: l.id.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Smallest gap between consecutive requests on the same worker when
    /// requests are dealt round-robin over `workers`.
    pub fn min_worker_gap(&self, workers: usize) -> Option<f64> {
        let w = workers.max(1);
        (w..self.requests.len())
            .map(|i| self.requests[i].arrival_ms - self.requests[i - w].arrival_ms)
            .min_by(f64::total_cmp)
    }

    /// Catalog built from what the trace references; ControlNets get `controlnet_size_mib`.
    pub fn implied_catalog(&self, controlnet_size_mib: f64) -> AddonCatalog {
        let mut cat = AddonCatalog::default();
        for r in &self.requests {
            for c in &r.controlnets {
                cat.controlnets.insert(*c, controlnet_size_mib);
            }
            for l in &r.loras {
                cat.loras.insert(l.id, l.size_mib);
            }
        }
        cat
    }

    /// ControlNet accesses in trace order.
    pub fn controlnet_accesses(&self, catalog: &AddonCatalog) -> Vec<(ControlNetId, f64)> {
        self.requests
            .iter()
            .flat_map(|r| r.controlnets.iter())
            .map(|c| {
                (
                    *c,
                    catalog.controlnet_size(*c).unwrap_or(CONTROLNET_SIZE_MIB),
                )
            })
            .collect()
    }

    pub fn lora_accesses(&self) -> Vec<(LoraId, f64)> {
        self.requests
            .iter()
            .flat_map(|r| r.loras.iter())
            .map(|l| (l.id, l.size_mib))
            .collect()
    }
}

/// Normalised Zipf weights over ranks `1..=n`.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn top_mass(n: usize, k: usize, exponent: f64) -> f64 {
    let w: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-exponent)).collect();
    w[..k].iter().sum::<f64>() / w.iter().sum::<f64>()
}

/// Number of ids counted as the "top" fraction: nearest integer, at least one.
pub fn top_count(n_items: usize, top_fraction: f64) -> usize {
    ((top_fraction * n_items as f64).round() as usize).clamp(1, n_items)
}

/// Finds the Zipf exponent at which the top `top_fraction` of `n_items`
/// carry `target_mass` of the probability, to within 1e-6.
pub fn calibrate_zipf(n_items: usize, top_fraction: f64, target_mass: f64) -> Result<f64> {
    if n_items < 10 {
        return Err(Error::validation("calibrate_zipf needs at least 10 items"));
    }
    if !(top_fraction > 0.0 && top_fraction < 1.0) || !(target_mass > 0.0 && target_mass < 1.0) {
        return Err(Error::validation(
            "top_fraction and target_mass must lie strictly between 0 and 1",
        ));
    }
    let k = top_count(n_items, top_fraction);
    let (mut lo, mut hi) = (0.0, ZIPF_MAX_EXPONENT);
    let (m_lo, m_hi) = (top_mass(n_items, k, lo), top_mass(n_items, k, hi));
    if (m_lo - target_mass).abs() <= 1e-6 {
        return Ok(0.0);
    }
    if target_mass < m_lo || target_mass > m_hi {
        return Err(Error::Infeasible {
            lo,
            hi,
            target: target_mass,
            min_mass: m_lo,
            max_mass: m_hi,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = top_mass(n_items, k, mid);
        if (m - target_mass).abs() <= 1e-12 {
            return Ok(mid);
        }
        if m < target_mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn popularity_weights(pop: &Popularity, n: usize, key: &str) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    match pop {
        Popularity::Zipf { exponent } => Ok(zipf_weights(n, *exponent)),
        Popularity::ZipfCalibrated {
            top_fraction,
            target_mass,
        } => Ok(zipf_weights(
            n,
            calibrate_zipf(n, *top_fraction, *target_mass)?,
        )),
        Popularity::Weights { weights } => {
            if weights.len() != n || weights.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::config(
                    format!("trace.{key}"),
                    format!("need {n} positive weights"),
                ));
            }
            Ok(weights.clone())
        }
    }
}

struct CountSampler {
    counts: Vec<usize>,
    index: WeightedIndex<f64>,
}

impl CountSampler {
    fn new(dist: &BTreeMap<usize, f64>, key: &str) -> Result<Self> {
        let counts = dist.keys().copied().collect();
        let index = WeightedIndex::new(dist.values().copied())
            .map_err(|e| Error::config(format!("trace.{key}"), e.to_string()))?;
        Ok(Self { counts, index })
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        self.counts[self.index.sample(rng)]
    }
}

/// `k` distinct ids drawn by popularity (rejection on repeats).
fn draw_distinct(index: &WeightedIndex<f64>, k: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(k);
    while out.len() < k {
        let id = index.sample(rng) as u32;
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

/// Draws a concrete trace. Same spec and seed, same trace.
pub fn generate(spec: &TraceSpec) -> Result<Trace> {
    spec.validate()?;
    let catalog = spec.catalog()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let cn_counts = CountSampler::new(&spec.controlnet_count_dist, "controlnet_count_dist")?;
    let lora_counts = CountSampler::new(&spec.lora_count_dist, "lora_count_dist")?;
    let cn_w = popularity_weights(
        &spec.controlnet_popularity,
        spec.n_controlnets,
        "controlnet_popularity",
    )?;
    let lora_w = popularity_weights(&spec.lora_popularity, spec.n_loras, "lora_popularity")?;
    let cn_index = (!cn_w.is_empty())
        .then(|| WeightedIndex::new(&cn_w))
        .transpose()
        .map_err(|e| Error::config("trace.controlnet_popularity", e.to_string()))?;
    let lora_index = (!lora_w.is_empty())
        .then(|| WeightedIndex::new(&lora_w))
        .transpose()
        .map_err(|e| Error::config("trace.lora_popularity", e.to_string()))?;

    let gap: Box<dyn Fn(&mut ChaCha8Rng) -> f64> = match spec.arrival {
        ArrivalProcess::FixedInterval { interval_ms } => Box::new(move |_| interval_ms),
        ArrivalProcess::Poisson { rate_per_s } => {
            let exp = Exp::new(rate_per_s / 1000.0)
                .map_err(|e| Error::config("trace.arrival.rate_per_s", e.to_string()))?;
            Box::new(move |r| exp.sample(r))
        }
        ArrivalProcess::Replay => {
            return Err(Error::config(
                "trace.arrival",
                "replay arrivals need an ingested trace file",
            ))
        }
    };

    let limit = spec.max_requests.unwrap_or(usize::MAX);
    let mut requests: Vec<Request> = Vec::new();
    let mut t = 0.0;
    while requests.len() < limit {
        if let Some(prev) = requests.last() {
            t = prev.arrival_ms + gap(&mut rng);
            let w = spec.workers;
            if requests.len() >= w {
                t = t.max(requests[requests.len() - w].arrival_ms + spec.patch_off_gap_ms);
            }
        }
        if t >= spec.duration_ms {
            break;
        }
        let n_cn = cn_counts.sample(&mut rng);
        let n_lora = lora_counts.sample(&mut rng);
        let controlnets = match &cn_index {
            Some(ix) => draw_distinct(ix, n_cn, &mut rng),
            None => Vec::new(),
        };
        let loras = match &lora_index {
            Some(ix) => draw_distinct(ix, n_lora, &mut rng),
            None => Vec::new(),
        };
        let id = requests.len() as u64;
        requests.push(Request {
            id,
            arrival_ms: t,
            controlnets: controlnets.into_iter().map(ControlNetId).collect(),
            loras: loras
                .into_iter()
                .map(|i| LoraRef {
                    id: LoraId(i),
                    size_mib: catalog.loras[&LoraId(i)],
                })
                .collect(),
            steps: spec.steps,
            policy_override: None,
        });
    }
    Ok(Trace {
        requests,
        provenance: Provenance::Generated {
            spec_hash: spec.hash(),
            seed: spec.seed,
        },
    })
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes the trace CSV: fixed header, `;`-separated lists, LF endings.
pub fn export<W: Write>(trace: &Trace, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in &trace.requests {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.id,
            r.arrival_ms,
            join(r.controlnets.iter().map(|c| c.0)),
            join(r.loras.iter().map(|l| l.id.0)),
            join(r.loras.iter().map(|l| l.size_mib)),
        )?;
    }
    Ok(())
}

pub fn export_file(trace: &Trace, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    export(trace, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_list<T: std::str::FromStr>(field: &str) -> std::result::Result<Vec<T>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| format!("bad list element `{x}`"))
        })
        .collect()
}

/// Parses trace CSV text. Every offending line is reported.
pub fn ingest_str(content: &str, origin: &str) -> Result<Trace> {
    let path = std::path::PathBuf::from(origin);
    let fail = |errors: Vec<LineError>| Error::TraceParse {
        path: path.clone(),
        errors,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(content.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| {
            fail(vec![LineError {
                line: 1,
                message: e.to_string(),
            }])
        })?
        .clone();
    let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected && !(got.is_empty() && content.trim().is_empty()) {
        let unknown: Vec<_> = got.iter().filter(|h| !expected.contains(h)).collect();
        let message = if unknown.is_empty() {
            format!("header must be `{TRACE_HEADER}`")
        } else {
            format!("unknown column(s) {unknown:?}; header must be `{TRACE_HEADER}`")
        };
        return Err(fail(vec![LineError { line: 1, message }]));
    }

    let mut errors = Vec::new();
    let mut requests: Vec<Request> = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                errors.push(LineError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut err = |message: String| errors.push(LineError { line, message });
        if rec.len() != expected.len() {
            err(format!(
                "expected {} fields, found {}",
                expected.len(),
                rec.len()
            ));
            continue;
        }
        let id = match rec[0].trim().parse::<u64>() {
            Ok(v) => v,
            Err(_) => {
                err(format!("bad request_id `{}`", &rec[0]));
                continue;
            }
        };
        let arrival = match rec[1].trim().parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => v,
            _ => {
                err(format!("bad arrival_ms `{}`", &rec[1]));
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<_, String> {
            let cns: Vec<u32> = parse_list(&rec[2])?;
            let ids: Vec<u32> = parse_list(&rec[3])?;
            let sizes: Vec<f64> = parse_list(&rec[4])?;
            if ids.len() != sizes.len() {
                return Err(format!("{} lora ids but {} sizes", ids.len(), sizes.len()));
            }
            if let Some(s) = sizes.iter().find(|s| !(**s > 0.0)) {
                return Err(format!("lora size {s} must be > 0"));
            }
            Ok((cns, ids, sizes))
        })();
        let (cns, ids, sizes) = match parsed {
            Ok(v) => v,
            Err(m) => {
                err(m);
                continue;
            }
        };
        if !seen_ids.insert(id) {
            err(format!("duplicate request_id {id}"));
            continue;
        }
        if let Some(prev) = requests.last() {
            if arrival < prev.arrival_ms {
                err(format!(
                    "arrival {arrival} is earlier than previous arrival {}",
                    prev.arrival_ms
                ));
                continue;
            }
        }
        requests.push(Request {
            id,
            arrival_ms: arrival,
            controlnets: cns.into_iter().map(ControlNetId).collect(),
            loras: ids
                .into_iter()
                .zip(sizes)
                .map(|(i, size_mib)| LoraRef {
                    id: LoraId(i),
                    size_mib,
                })
                .collect(),
            steps: DEFAULT_STEPS,
            policy_override: None,
        });
    }
    if !errors.is_empty() {
        return Err(fail(errors));
    }
    Ok(Trace {
        requests,
        provenance: Provenance::Ingested {
            path: origin.to_string(),
        },
    })
}

pub fn ingest(path: &Path) -> Result<Trace> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&content, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardCounts {
    pub requests: usize,
    pub unique_loras: usize,
    pub unique_controlnets: usize,
}

/// Deals requests round-robin over `worker_shards` and counts distinct add-ons per shard.
pub fn unique_addons_per_volume(trace: &Trace, worker_shards: usize) -> Vec<ShardCounts> {
    let shards = worker_shards.max(1);
    let mut loras = vec![BTreeSet::new(); shards];
    let mut cns = vec![BTreeSet::new(); shards];
    let mut counts = vec![0usize; shards];
    for (i, r) in trace.requests.iter().enumerate() {
        let s = i % shards;
        counts[s] += 1;
        loras[s].extend(r.loras.iter().map(|l| l.id));
        cns[s].extend(r.controlnets.iter().copied());
    }
    (0..shards)
        .map(|s| ShardCounts {
            requests: counts[s],
            unique_loras: loras[s].len(),
            unique_controlnets: cns[s].len(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation oracle, written independently of `top_mass`.
    fn oracle_mass(n: usize, k: usize, a: f64) -> f64 {
        let mut top = 0.0;
        let mut all = 0.0;
        for rank in 1..=n {
            let w = 1.0 / (rank as f64).powf(a);
            all += w;
            if rank <= k {
                top += w;
            }
        }
        top / all
    }

    #[test]
    fn calibrate_service_b() {
        let a = calibrate_zipf(94, 0.09, 0.95).unwrap();
        assert_eq!(top_count(94, 0.09), 8);
        assert!((oracle_mass(94, 8, a) - 0.95).abs() <= 1e-6, "a={a}");
    }

    #[test]
    fn calibrate_service_a() {
        let a = calibrate_zipf(46, 0.11, 0.98).unwrap();
        assert_eq!(top_count(46, 0.11), 5);
        assert!((oracle_mass(46, 5, a) - 0.98).abs() <= 1e-6, "a={a}");
    }

    #[test]
    fn calibrate_uniform_is_zero() {
        assert_eq!(calibrate_zipf(100, 0.1, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn calibrate_rejects_bad_inputs() {
        assert!(calibrate_zipf(5, 0.1, 0.5).is_err());
        assert!(matches!(
            calibrate_zipf(100, 0.1, 0.05),
            Err(Error::Infeasible { .. })
        ));
        assert!(calibrate_zipf(100, 1.0, 0.5).is_err());
    }

    #[test]
    fn fixed_interval_arrivals() {
        let spec = TraceSpec {
            duration_ms: 10_000.0,
            ..TraceSpec::service_a()
        };
        let t = generate(&spec).unwrap();
        let arrivals: Vec<f64> = t.requests.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(
            arrivals,
            (0..10).map(|i| f64::from(i) * 1000.0).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_count_dist_gives_no_addons() {
        let spec = TraceSpec {
            controlnet_count_dist: BTreeMap::from([(0, 1.0)]),
            lora_count_dist: BTreeMap::from([(0, 1.0)]),
            duration_ms: 50_000.0,
            ..TraceSpec::service_b()
        };
        let t = generate(&spec).unwrap();
        assert_eq!(t.len(), 50);
        assert!(t
            .requests
            .iter()
            .all(|r| r.controlnets.is_empty() && r.loras.is_empty()));
    }

    #[test]
    fn count_beyond_distinct_ids_is_rejected() {
        let spec = TraceSpec {
            n_controlnets: 1,
            controlnet_popularity: Popularity::Zipf { exponent: 1.0 },
            ..TraceSpec::service_a()
        };
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn generation_is_deterministic_and_distinct_within_request() {
        let spec = TraceSpec {
            duration_ms: 200_000.0,
            seed: 42,
            ..TraceSpec::service_b()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        for r in &a.requests {
            let mut c = r.controlnets.clone();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), r.controlnets.len());
            if r.loras.len() == 2 {
                assert_ne!(r.loras[0].id, r.loras[1].id);
            }
        }
        let c = generate(&TraceSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.requests, c.requests);
    }

    #[test]
    fn poisson_respects_worker_gap() {
        let spec = TraceSpec {
            arrival: ArrivalProcess::Poisson { rate_per_s: 5.0 },
            workers: 4,
            duration_ms: 100_000.0,
            seed: 3,
            ..TraceSpec::service_a()
        };
        let t = generate(&spec).unwrap();
        assert!(t.len() > 50);
        assert!(t.min_worker_gap(4).unwrap() >= 1000.0 - 1e-9);
        assert!(t
            .requests
            .windows(2)
            .all(|w| w[0].arrival_ms <= w[1].arrival_ms));
    }

    #[test]
    fn csv_round_trip() {
        let spec = TraceSpec {
            duration_ms: 30_000.0,
            seed: 9,
            ..TraceSpec::service_b()
        };
        let t = generate(&spec).unwrap();
        let mut buf = Vec::new();
        export(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("{TRACE_HEADER}\n")));
        assert!(!text.contains('\r'));
        let back = ingest_str(&text, "mem").unwrap();
        assert_eq!(back.requests, t.requests);
    }

    #[test]
    fn csv_bit_exact_rows() {
        let t = Trace {
            requests: vec![
                Request::new(0, 0.0),
                Request::new(1, 1500.5)
                    .with_controlnets([3, 17])
                    .with_loras([(5, 341.0), (9, 456.0)]),
            ],
            provenance: Provenance::Ingested { path: "x".into() },
        };
        let mut buf = Vec::new();
        export(&t, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "request_id,arrival_ms,controlnet_ids,lora_ids,lora_sizes_mib\n0,0,,,\n1,1500.5,3;17,5;9,341;456\n"
        );
    }

    #[test]
    fn ingest_edge_cases() {
        let empty = ingest_str(&format!("{TRACE_HEADER}\n"), "e").unwrap();
        assert!(empty.is_empty());

        let bad = format!("{TRACE_HEADER}\n0,100,,,\n1,50,,,\n2,200,,,\n");
        match ingest_str(&bad, "b") {
            Err(Error::TraceParse { errors, .. }) => {
                assert_eq!(errors.len(), 1);
                assert_eq!(errors[0].line, 3);
            }
            other => panic!("{other:?}"),
        }

        let extra = "request_id,arrival_ms,controlnet_ids,lora_ids,lora_sizes_mib,prompt\n";
        assert!(matches!(
            ingest_str(extra, "x"),
            Err(Error::TraceParse { .. })
        ));

        let malformed = format!("{TRACE_HEADER}\nzero,0,,,\n1,0,1;x,,\n2,0,,1,\n");
        match ingest_str(&malformed, "m") {
            Err(Error::TraceParse { errors, .. }) => {
                assert_eq!(
                    errors.iter().map(|e| e.line).collect::<Vec<_>>(),
                    vec![2, 3, 4]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unique_addons_single_shard_counts_everything() {
        let t = Trace {
            requests: vec![
                Request::new(0, 0.0)
                    .with_controlnets([1])
                    .with_loras([(1, 1.0)]),
                Request::new(1, 1.0)
                    .with_controlnets([1, 2])
                    .with_loras([(2, 1.0)]),
            ],
            provenance: Provenance::Ingested { path: "x".into() },
        };
        assert_eq!(
            unique_addons_per_volume(&t, 1),
            vec![ShardCounts {
                requests: 2,
                unique_loras: 2,
                unique_controlnets: 2
            }]
        );
    }

    #[test]
    fn lora_diversity_grows_with_volume_controlnets_saturate() {
        let spec = TraceSpec {
            max_requests: Some(8000),
            duration_ms: f64::MAX,
            seed: 11,
            ..TraceSpec::service_b()
        };
        let t = generate(&spec).unwrap();
        let whole = unique_addons_per_volume(&t, 1)[0];
        let halves = unique_addons_per_volume(&t, 2);
        for h in &halves {
            assert!(whole.unique_loras > h.unique_loras);
            assert!(h.unique_controlnets <= 94);
        }
        // ControlNet diversity grows far less than proportionally
        let cn_growth = whole.unique_controlnets as f64 / halves[0].unique_controlnets as f64;
        let lora_growth = whole.unique_loras as f64 / halves[0].unique_loras as f64;
        assert!(whole.unique_controlnets <= 94);
        assert!(cn_growth < lora_growth, "cn {cn_growth} lora {lora_growth}");
    }

    #[test]
    fn count_distribution_converges() {
        let err_at = |n: usize| {
            let spec = TraceSpec {
                max_requests: Some(n),
                duration_ms: f64::MAX,
                seed: 5,
                ..TraceSpec::service_a()
            };
            let t = generate(&spec).unwrap();
            let mut freq: BTreeMap<usize, f64> = BTreeMap::new();
            for r in &t.requests {
                *freq.entry(r.loras.len()).or_default() += 1.0 / n as f64;
            }
            spec.lora_count_dist
                .iter()
                .map(|(k, p)| (freq.get(k).copied().unwrap_or(0.0) - p).abs())
                .fold(0.0, f64::max)
        };
        assert!(err_at(100_000) < err_at(1_000));
    }
}
