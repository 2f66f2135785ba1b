//! Domain types shared across the simulator and the per-step stage
//! durations derived from a calibrated latency profile.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the built-in profile every default in [`LatencyProfile`] belongs to.
pub const BUILTIN_PROFILE: &str = "paper-h800-sdxl";

pub const DEFAULT_STEPS: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlNetId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoraId(pub u32);

impl fmt::Display for ControlNetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "controlnet#{}", self.0)
    }
}

impl fmt::Display for LoraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lora#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraRef {
    pub id: LoraId,
    pub size_mib: f64,
}

/// Upper bounds on add-ons per request. Defaults are the largest counts
/// observed in production traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AddonLimits {
    pub max_controlnets: usize,
    pub max_loras: usize,
}

impl Default for AddonLimits {
    fn default() -> Self {
        Self {
            max_controlnets: 3,
            max_loras: 2,
        }
    }
}

/// One image-generation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_ms: f64,
    #[serde(default)]
    pub controlnets: Vec<ControlNetId>,
    #[serde(default)]
    pub loras: Vec<LoraRef>,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_override: Option<String>,
}

fn default_steps() -> u32 {
    DEFAULT_STEPS
}

impl Request {
    pub fn new(id: u64, arrival_ms: f64) -> Self {
        Self {
            id,
            arrival_ms,
            controlnets: Vec::new(),
            loras: Vec::new(),
            steps: DEFAULT_STEPS,
            policy_override: None,
        }
    }

    pub fn with_controlnets(mut self, ids: impl IntoIterator<Item = u32>) -> Self {
        self.controlnets = ids.into_iter().map(ControlNetId).collect();
        self
    }

    pub fn with_loras(mut self, loras: impl IntoIterator<Item = (u32, f64)>) -> Self {
        self.loras = loras
            .into_iter()
            .map(|(id, size_mib)| LoraRef {
                id: LoraId(id),
                size_mib,
            })
            .collect();
        self
    }

    pub fn with_steps(mut self, steps: u32) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self, limits: &AddonLimits) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("request {}: {msg}", self.id)));
        if self.controlnets.len() > limits.max_controlnets {
            return fail(format!(
                "{} controlnets exceeds cap {}",
                self.controlnets.len(),
                limits.max_controlnets
            ));
        }
        if self.loras.len() > limits.max_loras {
            return fail(format!(
                "{} loras exceeds cap {}",
                self.loras.len(),
                limits.max_loras
            ));
        }
        if self.steps < 1 {
            return fail("steps must be >= 1".into());
        }
        if !(self.arrival_ms >= 0.0) || !self.arrival_ms.is_finite() {
            return fail(format!(
                "arrival {} must be finite and >= 0",
                self.arrival_ms
            ));
        }
        if let Some(l) = self.loras.iter().find(|l| !(l.size_mib > 0.0)) {
            return fail(format!("{} has non-positive size {}", l.id, l.size_mib));
        }
        Ok(())
    }
}

/// Calibrated stage durations and bandwidths. Every field defaults to the
/// `paper-h800-sdxl` built-in value (SDXL on an H800-class GPU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyProfile {
    pub name: String,
    /// Total UNet denoising time measured at `steps_reference` steps (2.67 s).
    pub unet_total_ms: f64,
    pub steps_reference: u32,
    /// Share of one step spent in the UNet encoder and middle blocks.
    pub encoder_mid_fraction: f64,
    /// ControlNet compute relative to encoder+middle (1.1, extra zero convolutions).
    pub controlnet_factor: f64,
    /// Placeholder; the residual of the 2.9 s base latency over the UNet time
    /// is split between text encoding and VAE decoding.
    pub text_encoder_ms: f64,
    pub vae_decode_ms: f64,
    /// Per-step ControlNet to UNet transfer (108 MiB for SDXL).
    pub comm_payload_mib: f64,
    pub link_gibps: f64,
    pub link_latency_ms: f64,
    /// 384 MiB in 490 ms with a 10 ms fixed cost is exactly 0.78125 GiB/s.
    pub remote_fetch_gibps: f64,
    pub remote_fetch_latency_ms: f64,
    /// Host memory to GPU (PCIe class).
    pub host_fetch_gibps: f64,
    pub host_fetch_latency_ms: f64,
    pub patch_inplace_ms: f64,
    /// Create-and-replace cost; 2 s for a 384 MiB adapter.
    pub patch_create_replace_ms_per_100mib: f64,
    /// Extra merge launch cost paid per additional group in pipelined loading.
    pub pipeline_merge_overhead_ms: f64,
    /// Fractional gains of the backbone optimizations (CUDA graphs, GEGLU, GroupNorm+SiLU).
    pub unet_opt_gains: Vec<f64>,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            name: BUILTIN_PROFILE.to_string(),
            unet_total_ms: 2670.0,
            steps_reference: 50,
            encoder_mid_fraction: 0.4,
            controlnet_factor: 1.1,
            text_encoder_ms: 10.0,
            vae_decode_ms: 120.0,
            comm_payload_mib: 108.0,
            link_gibps: 200.0,
            link_latency_ms: 0.3,
            remote_fetch_gibps: 0.78125,
            remote_fetch_latency_ms: 10.0,
            host_fetch_gibps: 24.0,
            host_fetch_latency_ms: 1.0,
            patch_inplace_ms: 100.0,
            patch_create_replace_ms_per_100mib: 2000.0 / 3.84,
            pipeline_merge_overhead_ms: 25.0,
            unet_opt_gains: vec![0.064, 0.06, 0.072],
        }
    }
}

/// Encoder+middle and decoder share of one denoising step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSplit {
    pub encoder_mid_ms: f64,
    pub decoder_ms: f64,
}

impl LatencyProfile {
    pub fn builtin(name: &str) -> Option<Self> {
        (name == BUILTIN_PROFILE).then(Self::default)
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("unet_total_ms", self.unet_total_ms),
            ("text_encoder_ms", self.text_encoder_ms),
            ("vae_decode_ms", self.vae_decode_ms),
            ("comm_payload_mib", self.comm_payload_mib),
            ("link_latency_ms", self.link_latency_ms),
            ("remote_fetch_latency_ms", self.remote_fetch_latency_ms),
            ("host_fetch_latency_ms", self.host_fetch_latency_ms),
            ("patch_inplace_ms", self.patch_inplace_ms),
            (
                "patch_create_replace_ms_per_100mib",
                self.patch_create_replace_ms_per_100mib,
            ),
            (
                "pipeline_merge_overhead_ms",
                self.pipeline_merge_overhead_ms,
            ),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(
                    format!("profile.{key}"),
                    format!("{v} must be >= 0"),
                ));
            }
        }
        for (key, v) in [
            ("link_gibps", self.link_gibps),
            ("remote_fetch_gibps", self.remote_fetch_gibps),
            ("host_fetch_gibps", self.host_fetch_gibps),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(
                    format!("profile.{key}"),
                    format!("{v} must be > 0"),
                ));
            }
        }
        if !(self.encoder_mid_fraction > 0.0 && self.encoder_mid_fraction < 1.0) {
            return Err(Error::config(
                "profile.encoder_mid_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.controlnet_factor >= 1.0) {
            return Err(Error::config("profile.controlnet_factor", "must be >= 1"));
        }
        if self.steps_reference < 1 {
            return Err(Error::config("profile.steps_reference", "must be >= 1"));
        }
        if self.unet_opt_gains.iter().any(|g| !(*g > -1.0)) {
            return Err(Error::config(
                "profile.unet_opt_gains",
                "each gain must be > -1",
            ));
        }
        Ok(())
    }

    /// Combined backbone speedup, the product of `1 + gain` over all gains.
    pub fn unet_opt_speedup(&self) -> f64 {
        self.unet_opt_gains.iter().map(|g| 1.0 + g).product()
    }

    /// Duration multiplier applied to encoder and decoder when the backbone
    /// optimizations are enabled.
    pub fn unet_opt_multiplier(&self) -> f64 {
        1.0 / self.unet_opt_speedup()
    }

    pub fn split(&self) -> StageSplit {
        let d = self.unet_total_ms / f64::from(self.steps_reference);
        let encoder_mid_ms = d * self.encoder_mid_fraction;
        StageSplit {
            encoder_mid_ms,
            decoder_ms: d - encoder_mid_ms,
        }
    }

    /// Stage durations for one denoising step, optionally with the UNet
    /// optimizations applied to encoder and decoder (never to ControlNets).
    pub fn step_stages(&self, unet_optimized: bool) -> StepStages {
        let split = self.split();
        let m = if unet_optimized {
            self.unet_opt_multiplier()
        } else {
            1.0
        };
        StepStages {
            encoder_mid_ms: split.encoder_mid_ms * m,
            decoder_ms: split.decoder_ms * m,
            controlnet_ms: controlnet_step_duration(self),
            comm_ms: transfer_ms(self.comm_payload_mib, self.link_gibps, self.link_latency_ms),
        }
    }
}

/// Everything a policy needs to lay out one denoising step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStages {
    pub encoder_mid_ms: f64,
    pub decoder_ms: f64,
    pub controlnet_ms: f64,
    pub comm_ms: f64,
}

/// Time to move `size_mib` over a link of `gibps` with a fixed setup cost.
pub fn transfer_ms(size_mib: f64, gibps: f64, latency_ms: f64) -> f64 {
    latency_ms + size_mib / (gibps * 1024.0) * 1000.0
}

/// Per-step UNet duration. `steps` is only validated: the per-step cost is
/// fixed by the profile regardless of how many steps a request runs.
pub fn step_duration(profile: &LatencyProfile, steps: u32) -> Result<f64> {
    if steps < 1 {
        return Err(Error::validation("steps must be >= 1"));
    }
    if profile.steps_reference < 1 {
        return Err(Error::config("profile.steps_reference", "must be >= 1"));
    }
    Ok(profile.unet_total_ms / f64::from(profile.steps_reference))
}

pub fn controlnet_step_duration(profile: &LatencyProfile) -> f64 {
    profile.controlnet_factor * profile.split().encoder_mid_ms
}

/// One ControlNet to UNet transfer over the interconnect.
pub fn comm_duration(profile: &LatencyProfile) -> Result<f64> {
    if !(profile.link_gibps > 0.0) {
        return Err(Error::validation(format!(
            "link bandwidth {} GiB/s must be > 0",
            profile.link_gibps
        )));
    }
    Ok(transfer_ms(
        profile.comm_payload_mib,
        profile.link_gibps,
        profile.link_latency_ms,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub gibps: f64,
    pub latency_ms: f64,
}

impl TierSpec {
    pub fn fetch_ms(&self, size_mib: f64) -> f64 {
        transfer_ms(size_mib, self.gibps, self.latency_ms)
    }
}

pub const TIER_HOST: &str = "host";
pub const TIER_REMOTE: &str = "remote";

/// Simulated hardware and placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub base_workers: usize,
    pub controlnet_gpus: usize,
    /// Long-running ControlNet services: id to replica count. Replicas are
    /// pinned on service GPUs and never evicted.
    pub controlnet_replicas: BTreeMap<ControlNetId, u32>,
    /// ControlNets preloaded into every base worker's GPU cache at start.
    pub warm_controlnets: Vec<ControlNetId>,
    pub gpu_cache_mib: f64,
    /// Per-worker host-memory LoRA cache.
    pub host_cache_mib: f64,
    /// Overrides or additions to the `host` and `remote` tiers from the profile.
    pub tier_bandwidths: BTreeMap<String, TierSpec>,
    pub loader_channels: usize,
    pub controlnet_miss_tier: String,
    pub lora_tier: String,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            base_workers: 1,
            controlnet_gpus: 3,
            controlnet_replicas: BTreeMap::new(),
            warm_controlnets: Vec::new(),
            gpu_cache_mib: 4.0 * 3072.0,
            host_cache_mib: 0.0,
            tier_bandwidths: BTreeMap::new(),
            loader_channels: 2,
            controlnet_miss_tier: TIER_HOST.to_string(),
            lora_tier: TIER_REMOTE.to_string(),
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_workers < 1 {
            return Err(Error::config(
                "cluster.base_workers",
                "at least one base worker",
            ));
        }
        if self.loader_channels < 1 {
            return Err(Error::config("cluster.loader_channels", "must be >= 1"));
        }
        if !(self.gpu_cache_mib >= 0.0) || !(self.host_cache_mib >= 0.0) {
            return Err(Error::config("cluster", "cache capacities must be >= 0"));
        }
        for (name, t) in &self.tier_bandwidths {
            if !(t.gibps > 0.0) || !(t.latency_ms >= 0.0) {
                return Err(Error::config(
                    format!("cluster.tier_bandwidths.{name}"),
                    "bandwidth must be > 0 and latency >= 0",
                ));
            }
        }
        Ok(())
    }

    /// Resolves a storage tier, falling back to the profile for `host` and `remote`.
    pub fn tier(&self, name: &str, profile: &LatencyProfile) -> Result<TierSpec> {
        if let Some(t) = self.tier_bandwidths.get(name) {
            return Ok(*t);
        }
        match name {
            TIER_REMOTE => Ok(TierSpec {
                gibps: profile.remote_fetch_gibps,
                latency_ms: profile.remote_fetch_latency_ms,
            }),
            TIER_HOST => Ok(TierSpec {
                gibps: profile.host_fetch_gibps,
                latency_ms: profile.host_fetch_latency_ms,
            }),
            other => Err(Error::config(
                "cluster.tier_bandwidths",
                format!("unknown tier `{other}`"),
            )),
        }
    }
}

/// Where a request's latency went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    QueueWait,
    TextEncode,
    DenoiseCompute,
    ControlnetWait,
    LoraLoadExposed,
    LoraPatch,
    CacheFetch,
    Comm,
    VaeDecode,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::QueueWait,
        Stage::TextEncode,
        Stage::DenoiseCompute,
        Stage::ControlnetWait,
        Stage::LoraLoadExposed,
        Stage::LoraPatch,
        Stage::CacheFetch,
        Stage::Comm,
        Stage::VaeDecode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::QueueWait => "queue_wait",
            Stage::TextEncode => "text_encode",
            Stage::DenoiseCompute => "denoise_compute",
            Stage::ControlnetWait => "controlnet_wait",
            Stage::LoraLoadExposed => "lora_load_exposed",
            Stage::LoraPatch => "lora_patch",
            Stage::CacheFetch => "cache_fetch",
            Stage::Comm => "comm",
            Stage::VaeDecode => "vae_decode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub total_ms: f64,
    pub stages: BTreeMap<Stage, f64>,
    pub first_patched_step: Option<u32>,
    pub gpu_ms_consumed: BTreeMap<String, f64>,
}

impl Default for LatencyBreakdown {
    fn default() -> Self {
        Self {
            total_ms: 0.0,
            stages: Stage::ALL.iter().map(|s| (*s, 0.0)).collect(),
            first_patched_step: None,
            gpu_ms_consumed: BTreeMap::new(),
        }
    }
}

impl LatencyBreakdown {
    pub fn stage(&self, stage: Stage) -> f64 {
        self.stages.get(&stage).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, stage: Stage, ms: f64) {
        *self.stages.entry(stage).or_insert(0.0) += ms;
    }

    pub fn stage_sum(&self) -> f64 {
        self.stages.values().sum()
    }

    /// Stage sum minus total; should be within 1e-6 ms of zero.
    pub fn conservation_error(&self) -> f64 {
        (self.stage_sum() - self.total_ms).abs()
    }

    pub fn gpu_ms_total(&self) -> f64 {
        self.gpu_ms_consumed.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn step_duration_examples() {
        let p = LatencyProfile::default();
        assert!(close(step_duration(&p, 50).unwrap(), 53.4, 1e-12));
        // independent of the requested step count
        assert_eq!(
            step_duration(&p, 7).unwrap(),
            step_duration(&p, 50).unwrap()
        );

        let zero = LatencyProfile {
            unet_total_ms: 0.0,
            ..LatencyProfile::default()
        };
        assert_eq!(step_duration(&zero, 50).unwrap(), 0.0);

        assert!(matches!(step_duration(&p, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn stage_split_example() {
        let p = LatencyProfile::default();
        let s = p.split();
        assert!(close(s.encoder_mid_ms, 21.36, 1e-9));
        assert!(close(s.decoder_ms, 32.04, 1e-9));
        assert!(close(s.encoder_mid_ms + s.decoder_ms, 53.4, 1e-9));
    }

    #[test]
    fn controlnet_duration_examples() {
        let p = LatencyProfile::default();
        assert!(close(controlnet_step_duration(&p), 23.496, 1e-9));
        let unit = LatencyProfile {
            controlnet_factor: 1.0,
            ..p.clone()
        };
        assert_eq!(controlnet_step_duration(&unit), unit.split().encoder_mid_ms);
        // encoder+middle = 20 ms
        let twenty = LatencyProfile {
            unet_total_ms: 2500.0,
            ..p
        };
        assert!(close(controlnet_step_duration(&twenty), 22.0, 1e-9));
    }

    #[test]
    fn comm_duration_examples() {
        let p = LatencyProfile::default();
        let c = comm_duration(&p).unwrap();
        // 0.3 + 108 / 204800 * 1000
        assert!(close(c, 0.82734375, 1e-12));
        assert!(c < 1.0);

        let empty = LatencyProfile {
            comm_payload_mib: 0.0,
            ..p.clone()
        };
        assert_eq!(comm_duration(&empty).unwrap(), 0.3);

        let pcie = LatencyProfile {
            link_gibps: 1.0,
            link_latency_ms: 0.0,
            ..p.clone()
        };
        assert!(close(comm_duration(&pcie).unwrap(), 105.46875, 1e-9));

        let broken = LatencyProfile {
            link_gibps: 0.0,
            ..p
        };
        assert!(comm_duration(&broken).is_err());
    }

    #[test]
    fn unet_optimization_composes_to_about_1_2x() {
        let p = LatencyProfile::default();
        let s = p.unet_opt_speedup();
        assert!(close(s, 1.064 * 1.06 * 1.072, 1e-12));
        assert!(close(s, 1.2, 0.01), "composed speedup {s}");
    }

    #[test]
    fn remote_default_reproduces_490ms_fetch() {
        let c = ClusterSpec::default();
        let t = c.tier(TIER_REMOTE, &LatencyProfile::default()).unwrap();
        assert!(close(t.fetch_ms(384.0), 490.0, 1e-9));
        assert!(c.tier("nvme", &LatencyProfile::default()).is_err());
    }

    #[test]
    fn create_replace_default_is_two_seconds_for_384mib() {
        let p = LatencyProfile::default();
        assert!(close(
            p.patch_create_replace_ms_per_100mib * 3.84,
            2000.0,
            1e-9
        ));
    }

    #[test]
    fn request_validation() {
        let lim = AddonLimits::default();
        assert!(Request::new(1, 0.0).validate(&lim).is_ok());
        assert!(Request::new(1, 0.0)
            .with_controlnets([1, 2, 3, 4])
            .validate(&lim)
            .is_err());
        assert!(Request::new(1, 0.0)
            .with_loras([(1, 10.0), (2, 10.0), (3, 10.0)])
            .validate(&lim)
            .is_err());
        assert!(Request::new(1, 0.0).with_steps(0).validate(&lim).is_err());
        assert!(Request::new(1, -1.0).validate(&lim).is_err());
        assert!(Request::new(1, 0.0)
            .with_loras([(1, 0.0)])
            .validate(&lim)
            .is_err());
    }

    #[test]
    fn profile_validation_rejects_bad_fraction() {
        let p = LatencyProfile {
            encoder_mid_fraction: 1.0,
            ..LatencyProfile::default()
        };
        assert!(p.validate().is_err());
        assert!(LatencyProfile::default().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_conserves_step(total in 0.0f64..1e5, frac in 0.01f64..0.99) {
                let p = LatencyProfile { unet_total_ms: total, encoder_mid_fraction: frac, ..LatencyProfile::default() };
                let s = p.split();
                let d = step_duration(&p, 50).unwrap();
                prop_assert!((s.encoder_mid_ms + s.decoder_ms - d).abs() <= 1e-9);
            }

            #[test]
            fn monotone_in_total_and_bandwidth(total in 1.0f64..1e5, bump in 1.0f64..100.0, bw in 0.1f64..500.0) {
                let p = LatencyProfile { unet_total_ms: total, ..LatencyProfile::default() };
                let q = LatencyProfile { unet_total_ms: total + bump, ..p.clone() };
                prop_assert!(step_duration(&q, 50).unwrap() > step_duration(&p, 50).unwrap());
                let a = LatencyProfile { link_gibps: bw, ..p.clone() };
                let b = LatencyProfile { link_gibps: bw * 2.0, ..p };
                prop_assert!(comm_duration(&b).unwrap() < comm_duration(&a).unwrap());
            }
        }
    }
}
