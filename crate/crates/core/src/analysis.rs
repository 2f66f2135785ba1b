//! Speedup bounds and report aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LatencyProfile, Stage};
use crate::orchestrator::{parallel_step_latency, throughput, CacheSummary, Policy, SimOutput};
use crate::scalar::Scalar;

pub const SCHEMA_VERSION: u32 = 1;

/// Scaled speedup `s + p * n`.
pub fn gustafson<T: Scalar>(s: T, p: T, n: usize) -> Result<T> {
    let tol = T::of(1e-9).max(T::epsilon() * T::of(4.0));
    if !((s + p - T::one()).abs() <= tol) || s < T::zero() || p < T::zero() {
        return Err(Error::validation(format!(
            "fractions must sum to 1, got {s} + {p}"
        )));
    }
    if n < 1 {
        return Err(Error::validation("processor count must be >= 1"));
    }
    Ok(s + p * T::from_count(n))
}

/// Serial and parallel fractions of a ControlNet request executed with one
/// service GPU per ControlNet. The serial part is text encoding, VAE and the
/// decoder half of every step; both are measured against the parallel-mode
/// total, which makes `gustafson(s, p, n + 1)` an upper bound on the
/// serial-over-parallel speedup.
pub fn fractions_from_profile(
    profile: &LatencyProfile,
    n_controlnets: usize,
    steps: u32,
) -> Result<(f64, f64)> {
    if n_controlnets < 1 {
        return Err(Error::validation("need at least one ControlNet"));
    }
    let st = profile.step_stages(false);
    let serial = profile.text_encoder_ms + profile.vae_decode_ms + f64::from(steps) * st.decoder_ms;
    let step = parallel_step_latency(n_controlnets, profile, n_controlnets)?;
    let total = profile.text_encoder_ms + profile.vae_decode_ms + f64::from(steps) * step;
    if !(total > 0.0) {
        return Err(Error::validation("profile has zero total latency"));
    }
    let s = serial / total;
    Ok((s, 1.0 - s))
}

/// Bisects `encoder_mid_fraction` so that the serial fraction hits `target_s`.
pub fn calibrate_encoder_fraction(
    profile: &LatencyProfile,
    n_controlnets: usize,
    steps: u32,
    target_s: f64,
) -> Result<LatencyProfile> {
    let at = |f: f64| -> Result<f64> {
        let mut p = profile.clone();
        p.encoder_mid_fraction = f;
        Ok(fractions_from_profile(&p, n_controlnets, steps)?.0)
    };
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
    let (s_lo, s_hi) = (at(lo)?, at(hi)?);
    if !(target_s <= s_lo && target_s >= s_hi) {
        return Err(Error::validation(format!(
            "serial fraction {target_s} outside reachable range [{s_hi:.4}, {s_lo:.4}]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? > target_s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut p = profile.clone();
    p.encoder_mid_fraction = 0.5 * (lo + hi);
    p.validate()?;
    Ok(p)
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Mean computed over sorted values so input order does not matter.
fn sorted_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub requests: usize,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub breakdown_mean_ms: BTreeMap<Stage, f64>,
    pub gpu_ms_total: f64,
    /// Images per GPU-minute.
    pub throughput: f64,
    pub speedup_vs_baseline: f64,
    pub caches: CacheSummary,
    /// First fully patched step -> request count.
    pub patch_step_histogram: BTreeMap<u32, usize>,
}

impl PolicyReport {
    pub fn from_run(policy: &Policy, out: &SimOutput) -> Result<Self> {
        let n = out.outcomes.len();
        let mut lat: Vec<f64> = out.outcomes.iter().map(|o| o.latency_ms()).collect();
        let mean = sorted_mean(&mut lat);
        let mut breakdown_mean_ms = BTreeMap::new();
        for stage in Stage::ALL {
            let mut v: Vec<f64> = out
                .outcomes
                .iter()
                .map(|o| o.breakdown.stage(stage))
                .collect();
            breakdown_mean_ms.insert(stage, sorted_mean(&mut v));
        }
        let mut gpu: Vec<f64> = out
            .outcomes
            .iter()
            .map(|o| o.breakdown.gpu_ms_total())
            .collect();
        gpu.sort_by(f64::total_cmp);
        let window = out
            .outcomes
            .iter()
            .map(|o| o.completion_ms)
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let throughput = if n == 0 {
            0.0
        } else {
            throughput(&out.outcomes, window)?
        };
        let mut patch_step_histogram = BTreeMap::new();
        for o in &out.outcomes {
            if let Some(k) = o.breakdown.first_patched_step {
                *patch_step_histogram.entry(k).or_insert(0) += 1;
            }
        }
        Ok(Self {
            policy: policy.to_string(),
            requests: n,
            mean_latency_ms: mean,
            median_latency_ms: percentile(&lat, 0.5),
            p95_latency_ms: percentile(&lat, 0.95),
            breakdown_mean_ms,
            gpu_ms_total: gpu.iter().sum(),
            throughput,
            speedup_vs_baseline: 1.0,
            caches: out.caches,
            patch_step_histogram,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub trace_hash: String,
    pub seed: u64,
    pub version: String,
    /// Excluded from `Report::content_hash`.
    pub generated_at: String,
}

impl ReportMetadata {
    pub fn new(scenario_hash: impl Into<String>, trace_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario_hash: scenario_hash.into(),
            trace_hash: trace_hash.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at: unix_timestamp(),
        }
    }
}

fn unix_timestamp() -> String {
    let d = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    format!("{}", d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub baseline: String,
    /// Sorted by policy label.
    pub policies: Vec<PolicyReport>,
}

impl Report {
    pub fn build(
        runs: &[(Policy, SimOutput)],
        baseline: &Policy,
        metadata: ReportMetadata,
    ) -> Result<Self> {
        let mut policies = runs
            .iter()
            .map(|(p, out)| PolicyReport::from_run(p, out))
            .collect::<Result<Vec<_>>>()?;
        policies.sort_by(|a, b| a.policy.cmp(&b.policy));
        let baseline = baseline.to_string();
        let base_mean = policies
            .iter()
            .find(|p| p.policy == baseline)
            .ok_or_else(|| Error::config("baseline", format!("baseline `{baseline}` was not run")))?
            .mean_latency_ms;
        for p in &mut policies {
            p.speedup_vs_baseline = if p.policy == baseline {
                1.0
            } else {
                base_mean / p.mean_latency_ms
            };
        }
        Ok(Self {
            metadata,
            baseline,
            policies,
        })
    }

    pub fn policy(&self, label: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == label)
    }

    /// JSON with the timestamp blanked out.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.metadata.generated_at = String::new();
        Ok(serde_json::to_string_pretty(&c)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(
            self.canonical_json()?.as_bytes(),
        )))
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out).map_err(|e| Error::io("<report>", e))
    }

    /// One row per policy.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "policy".to_string(),
            "requests".into(),
            "mean_latency_ms".into(),
            "median_latency_ms".into(),
            "p95_latency_ms".into(),
            "throughput".into(),
            "speedup_vs_baseline".into(),
            "gpu_ms_total".into(),
            "controlnet_hit_rate".into(),
            "lora_hit_rate".into(),
        ];
        header.extend(Stage::ALL.iter().map(|s| format!("mean_{}_ms", s.as_str())));
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.policies {
            let mut row = vec![
                p.policy.clone(),
                p.requests.to_string(),
                p.mean_latency_ms.to_string(),
                p.median_latency_ms.to_string(),
                p.p95_latency_ms.to_string(),
                p.throughput.to_string(),
                p.speedup_vs_baseline.to_string(),
                p.gpu_ms_total.to_string(),
                p.caches.controlnet.hit_rate().to_string(),
                p.caches.lora.hit_rate().to_string(),
            ];
            row.extend(
                Stage::ALL
                    .iter()
                    .map(|s| p.breakdown_mean_ms[s].to_string()),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))
    }

    /// Long format: `policy,metric,value`, ready for grouped bar charts.
    pub fn write_long_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["policy", "metric", "value"])
            .map_err(csv_err)?;
        for p in &self.policies {
            let mut rows: Vec<(String, f64)> = vec![
                ("mean_latency_ms".into(), p.mean_latency_ms),
                ("median_latency_ms".into(), p.median_latency_ms),
                ("p95_latency_ms".into(), p.p95_latency_ms),
                ("throughput".into(), p.throughput),
                ("speedup_vs_baseline".into(), p.speedup_vs_baseline),
            ];
            rows.extend(
                Stage::ALL
                    .iter()
                    .map(|s| (format!("stage_{}_ms", s.as_str()), p.breakdown_mean_ms[s])),
            );
            for (metric, value) in rows {
                w.write_record([
                    p.policy.as_str(),
                    metric.as_str(),
                    value.to_string().as_str(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub speedup: f64,
    /// `b - a` mean per stage.
    pub stage_deltas_ms: BTreeMap<Stage, f64>,
}

/// Mean latency of `a` over mean latency of `b`.
pub fn compare(report: &Report, a: &str, b: &str) -> Result<Comparison> {
    let find = |label: &str| {
        report
            .policy(label)
            .ok_or_else(|| Error::validation(format!("policy `{label}` not in report")))
    };
    let (pa, pb) = (find(a)?, find(b)?);
    let speedup = if a == b {
        1.0
    } else {
        pa.mean_latency_ms / pb.mean_latency_ms
    };
    let stage_deltas_ms = Stage::ALL
        .iter()
        .map(|s| (*s, pb.breakdown_mean_ms[s] - pa.breakdown_mean_ms[s]))
        .collect();
    Ok(Comparison {
        speedup,
        stage_deltas_ms,
    })
}
