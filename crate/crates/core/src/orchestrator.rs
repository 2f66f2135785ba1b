//! Serving policies as schedulers over the event kernel.
//!
//! Each policy composes text encoding, a per-step schedule and VAE decoding
//! on a base worker GPU. ControlNets either run in line on the worker
//! (serial, colocated) or as services on dedicated GPUs that are invoked at
//! encoder start and joined before the decoder. LoRAs are either fetched and
//! patched before denoising (create-and-replace) or fetched concurrently
//! and merged in place at a step boundary once loaded.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::{Engine, EventKind, LogRecord, ResourceId, ResourceKind};
use crate::error::{Error, Result};
use crate::model::{
    AddonLimits, ClusterSpec, ControlNetId, LatencyBreakdown, LatencyProfile, LoraId, Request,
    Stage, StepStages, TierSpec,
};
use crate::store::{earliest, AddonCatalog, CacheStats, LruCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    /// ControlNets and UNet on one GPU, LoRAs fetched and create-and-replaced up front.
    SerialColocated,
    /// ControlNets as services; LoRAs handled as in `SerialColocated`.
    CaaS,
    CaaSAsyncLora,
    /// Async LoRA loading with each adapter split into `groups` pipelined chunks.
    CaaSPipelineLora {
        groups: u32,
    },
    /// Serial execution starting from a cached latent, skipping `skip` steps.
    StepSkip {
        skip: u32,
    },
    /// Base model only; add-ons in the request are ignored.
    NoAddon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Policy {
    pub kind: PolicyKind,
    pub unet_optimized: bool,
}

const OPT_SUFFIX: &str = "+UNetOpt";

impl Policy {
    pub const fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            unet_optimized: false,
        }
    }

    pub const fn optimized(mut self) -> Self {
        self.unet_optimized = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let PolicyKind::CaaSPipelineLora { groups: 0 } = self.kind {
            return Err(Error::validation("pipeline group count must be >= 1"));
        }
        Ok(())
    }

    fn controlnet_mode(&self) -> ControlNetMode {
        match self.kind {
            PolicyKind::SerialColocated | PolicyKind::StepSkip { .. } => ControlNetMode::Colocated,
            PolicyKind::CaaS | PolicyKind::CaaSAsyncLora | PolicyKind::CaaSPipelineLora { .. } => {
                ControlNetMode::Service
            }
            PolicyKind::NoAddon => ControlNetMode::Ignored,
        }
    }

    fn lora_mode(&self) -> LoraMode {
        match self.kind {
            PolicyKind::SerialColocated | PolicyKind::CaaS | PolicyKind::StepSkip { .. } => {
                LoraMode::Blocking
            }
            PolicyKind::CaaSAsyncLora => LoraMode::Async { groups: 1 },
            PolicyKind::CaaSPipelineLora { groups } => LoraMode::Async { groups },
            PolicyKind::NoAddon => LoraMode::Ignored,
        }
    }

    fn skipped_steps(&self) -> u32 {
        match self.kind {
            PolicyKind::StepSkip { skip } => skip,
            _ => 0,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::SerialColocated => f.write_str("SerialColocated")?,
            PolicyKind::CaaS => f.write_str("CaaS")?,
            PolicyKind::CaaSAsyncLora => f.write_str("CaaS+AsyncLoRA")?,
            PolicyKind::CaaSPipelineLora { groups } => write!(f, "CaaS+PipelineLoRA({groups})")?,
            PolicyKind::StepSkip { skip } => write!(f, "StepSkip({skip})")?,
            PolicyKind::NoAddon => f.write_str("NoAddon")?,
        }
        if self.unet_optimized {
            f.write_str(OPT_SUFFIX)?;
        }
        Ok(())
    }
}

fn parse_param(s: &str, prefix: &str) -> Option<std::result::Result<u32, Error>> {
    let inner = s
        .strip_prefix(prefix)?
        .strip_prefix('(')?
        .strip_suffix(')')?;
    Some(
        inner
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("bad parameter in `{s}`"))),
    )
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (base, unet_optimized) = match s.strip_suffix(OPT_SUFFIX) {
            Some(b) => (b, true),
            None => (s, false),
        };
        let kind = match base {
            "SerialColocated" => PolicyKind::SerialColocated,
            "CaaS" => PolicyKind::CaaS,
            "CaaS+AsyncLoRA" => PolicyKind::CaaSAsyncLora,
            "NoAddon" => PolicyKind::NoAddon,
            _ => {
                if let Some(g) = parse_param(base, "CaaS+PipelineLoRA") {
                    PolicyKind::CaaSPipelineLora { groups: g? }
                } else if let Some(k) = parse_param(base, "StepSkip") {
                    PolicyKind::StepSkip { skip: k? }
                } else {
                    return Err(Error::validation(format!("unknown policy `{s}`")));
                }
            }
        };
        let p = Policy {
            kind,
            unet_optimized,
        };
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for Policy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ControlNetMode {
    Colocated,
    Service,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LoraMode {
    Blocking,
    Async { groups: u32 },
    Ignored,
}

/// One pipelined group's patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPatch {
    pub group_index: u32,
    pub load_complete_ms: f64,
    pub boundary_step: u32,
    pub patch_ms: f64,
}

/// Where an asynchronously loaded LoRA gets merged. Times are relative to
/// the start of denoising; boundary `k` lies after `k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub load_complete_ms: f64,
    pub patch_boundary_step: u32,
    /// `steps + 1` when the adapter never takes effect.
    pub first_patched_step: u32,
    pub inserted_delay_ms: f64,
    pub groups: Vec<GroupPatch>,
}

impl PatchPlan {
    pub fn unpatched_steps(&self) -> u32 {
        self.first_patched_step - 1
    }

    /// Patch cost to insert at each boundary.
    pub fn delays_by_boundary(&self) -> BTreeMap<u32, f64> {
        let mut m = BTreeMap::new();
        for g in &self.groups {
            *m.entry(g.boundary_step).or_insert(0.0) += g.patch_ms;
        }
        m
    }
}

/// Smallest `k >= 0` with `k * step_dur >= t`.
fn first_boundary_at_or_after(t: f64, step_dur: f64) -> u32 {
    if t <= 0.0 {
        return 0;
    }
    let mut k = (t / step_dur).ceil().max(0.0) as u32;
    while k > 0 && f64::from(k - 1) * step_dur >= t {
        k -= 1;
    }
    while f64::from(k) * step_dur < t {
        k += 1;
    }
    k
}

/// Plans a single merge at the first step boundary at or after the load completes.
pub fn plan_lora_patch(
    load_complete: f64,
    step_dur: f64,
    patch_ms: f64,
    steps: u32,
) -> Result<PatchPlan> {
    plan_pipeline_patch(&[load_complete], step_dur, patch_ms, steps)
}

/// Plans pipelined merges: group `m` is patched at the first boundary at
/// or after both its load and the end of group `m - 1`'s patch.
pub fn plan_pipeline_patch(
    group_loads: &[f64],
    step_dur: f64,
    per_group_patch_ms: f64,
    steps: u32,
) -> Result<PatchPlan> {
    if group_loads.is_empty() {
        return Err(Error::validation("pipeline needs at least one group"));
    }
    if !(step_dur > 0.0) {
        return Err(Error::validation(format!(
            "step duration {step_dur} must be > 0"
        )));
    }
    if group_loads.windows(2).any(|w| w[1] < w[0]) || group_loads.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::validation(
            "group load times must be >= 0 and non-decreasing",
        ));
    }
    if !(per_group_patch_ms >= 0.0) {
        return Err(Error::validation("patch cost must be >= 0"));
    }
    let mut groups = Vec::with_capacity(group_loads.len());
    let mut prev_end = 0.0f64;
    for (m, &load) in group_loads.iter().enumerate() {
        let k = first_boundary_at_or_after(load.max(prev_end), step_dur);
        if k >= steps {
            break;
        }
        groups.push(GroupPatch {
            group_index: m as u32,
            load_complete_ms: load,
            boundary_step: k,
            patch_ms: per_group_patch_ms,
        });
        prev_end = f64::from(k) * step_dur + per_group_patch_ms;
    }
    let complete = groups.len() == group_loads.len();
    let last_boundary = groups.last().map(|g| g.boundary_step);
    Ok(PatchPlan {
        load_complete_ms: *group_loads.last().expect("non-empty"),
        patch_boundary_step: match (complete, last_boundary) {
            (true, Some(k)) => k,
            _ => steps,
        },
        first_patched_step: match (complete, last_boundary) {
            (true, Some(k)) => k + 1,
            _ => steps + 1,
        },
        inserted_delay_ms: groups.iter().map(|g| g.patch_ms).sum(),
        groups,
    })
}

/// Per-step latency with `n` ControlNets run back to back on the UNet's GPU.
pub fn serial_step_latency(n_controlnets: usize, profile: &LatencyProfile) -> f64 {
    serial_step_with(n_controlnets, &profile.step_stages(false))
}

fn serial_step_with(n: usize, s: &StepStages) -> f64 {
    n as f64 * s.controlnet_ms + s.encoder_mid_ms + s.decoder_ms
}

/// Per-step latency with ControlNets on `controlnet_gpus` service GPUs.
/// When there are fewer GPUs than ControlNets the busiest GPU runs its
/// branches back to back.
pub fn parallel_step_latency(
    n_controlnets: usize,
    profile: &LatencyProfile,
    controlnet_gpus: usize,
) -> Result<f64> {
    if n_controlnets < 1 {
        return Err(Error::validation(
            "parallel execution needs at least one ControlNet",
        ));
    }
    if controlnet_gpus < 1 {
        return Err(Error::validation("no ControlNet service GPUs"));
    }
    Ok(parallel_step_with(
        n_controlnets,
        controlnet_gpus,
        &profile.step_stages(false),
    ))
}

fn parallel_step_with(n: usize, gpus: usize, s: &StepStages) -> f64 {
    if n == 0 {
        return s.encoder_mid_ms + s.decoder_ms;
    }
    let per_gpu = n.div_ceil(gpus.max(1));
    s.encoder_mid_ms
        .max(per_gpu as f64 * s.controlnet_ms + s.comm_ms)
        + s.decoder_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivityKind {
    TextEncode,
    EncoderMid,
    Decoder,
    ControlNet,
    Comm,
    CacheFetch,
    LoraFetch,
    LoraPatch,
    VaeDecode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub kind: ActivityKind,
    pub step: Option<u32>,
    pub resource: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    pub policy: Policy,
    pub worker: String,
    pub arrival_ms: f64,
    pub start_ms: f64,
    pub completion_ms: f64,
    pub breakdown: LatencyBreakdown,
    pub patch_plan: Option<PatchPlan>,
    pub timeline: Vec<Activity>,
}

impl RequestOutcome {
    pub fn latency_ms(&self) -> f64 {
        self.breakdown.total_ms
    }
}

/// For every step, the decoder starts no earlier than the encoder end and
/// the last ControlNet output arrival of that step.
pub fn check_dependencies(timeline: &[Activity]) -> bool {
    let mut ready: BTreeMap<u32, f64> = BTreeMap::new();
    for a in timeline {
        if let (Some(step), ActivityKind::EncoderMid | ActivityKind::Comm) = (a.step, a.kind) {
            let e = ready.entry(step).or_insert(f64::NEG_INFINITY);
            *e = e.max(a.end);
        }
    }
    timeline
        .iter()
        .filter(|a| a.kind == ActivityKind::Decoder)
        .all(|a| {
            a.start
                >= ready
                    .get(&a.step.unwrap_or(0))
                    .copied()
                    .unwrap_or(f64::NEG_INFINITY)
        })
}

/// Images per minute of GPU time, counting every GPU that did work
/// (ControlNet service GPUs included).
pub fn throughput(outcomes: &[RequestOutcome], window_ms: f64) -> Result<f64> {
    if !(window_ms > 0.0) {
        return Err(Error::validation("throughput window must be > 0"));
    }
    if let Some(o) = outcomes.iter().find(|o| o.completion_ms > window_ms) {
        return Err(Error::validation(format!(
            "request {} completes at {} beyond the {window_ms} ms window",
            o.request_id, o.completion_ms
        )));
    }
    let mut per_request: Vec<f64> = outcomes
        .iter()
        .map(|o| o.breakdown.gpu_ms_total())
        .collect();
    per_request.sort_by(f64::total_cmp);
    let gpu_ms: f64 = per_request.iter().sum();
    if !(gpu_ms > 0.0) {
        return Err(Error::validation(
            "no GPU time consumed; throughput undefined",
        ));
    }
    Ok(outcomes.len() as f64 / (gpu_ms / 60_000.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheSummary {
    pub controlnet: CacheStats,
    pub lora: CacheStats,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub outcomes: Vec<RequestOutcome>,
    pub event_log: Vec<LogRecord>,
    pub caches: CacheSummary,
    pub final_clock: f64,
    /// Every GPU's activity intervals are pairwise disjoint.
    pub gpus_exclusive: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub record_timeline: bool,
    pub record_log: bool,
    pub watchdog: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record_timeline: true,
            record_log: true,
            watchdog: crate::engine::DEFAULT_WATCHDOG,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Arrive,
    Begin,
    Step(u32),
    Sync(u32),
    StepDone(u32),
    PatchDone(u32),
    Fetched,
    Done,
}

struct Worker {
    name: String,
    gpu: ResourceId,
    channels: Vec<ResourceId>,
    cn_cache: LruCache<ControlNetId>,
    lora_cache: LruCache<LoraId>,
    queue: VecDeque<usize>,
    busy: bool,
    outstanding: usize,
}

struct ServiceGpu {
    name: String,
    gpu: ResourceId,
    link: ResourceId,
    cache: LruCache<ControlNetId>,
    pinned: BTreeSet<ControlNetId>,
}

struct Branch {
    service: usize,
    pending_fetch_ms: f64,
}

struct ReqState {
    req: Request,
    policy: Policy,
    stages: StepStages,
    steps_to_run: u32,
    worker: usize,
    cursor: f64,
    start: f64,
    breakdown: LatencyBreakdown,
    timeline: Vec<Activity>,
    /// Absolute completion per pipeline group, max over the request's LoRAs.
    group_loads: Vec<f64>,
    plan: Option<PatchPlan>,
    patches: BTreeMap<u32, f64>,
    branches: Vec<Branch>,
    enc_end: f64,
    step_fetch_ms: f64,
    service_ms: BTreeMap<String, f64>,
    completion: Option<f64>,
}

impl ReqState {
    /// Attributes the critical path from the cursor up to `to`.
    fn advance(&mut self, stage: Stage, to: f64) {
        debug_assert!(to >= self.cursor - 1e-9, "{to} < {}", self.cursor);
        if to > self.cursor {
            self.breakdown.add(stage, to - self.cursor);
            self.cursor = to;
        }
    }
}

/// One simulation instance: a cluster, its caches and a request stream.
pub struct Simulator<'a> {
    profile: &'a LatencyProfile,
    cluster: &'a ClusterSpec,
    catalog: &'a AddonCatalog,
    limits: AddonLimits,
    options: SimOptions,
    workers: Vec<Worker>,
    services: Vec<ServiceGpu>,
    reqs: Vec<ReqState>,
    record_timeline: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(
        profile: &'a LatencyProfile,
        cluster: &'a ClusterSpec,
        catalog: &'a AddonCatalog,
    ) -> Result<Self> {
        profile.validate()?;
        cluster.validate()?;
        catalog.validate()?;
        Ok(Self {
            profile,
            cluster,
            catalog,
            limits: AddonLimits::default(),
            options: SimOptions::default(),
            workers: Vec::new(),
            services: Vec::new(),
            reqs: Vec::new(),
            record_timeline: true,
        })
    }

    pub fn with_limits(mut self, limits: AddonLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_options(mut self, options: SimOptions) -> Self {
        self.options = options;
        self
    }

    fn build(&mut self, engine: &mut Engine<(usize, Phase)>) -> Result<()> {
        let c = self.cluster;
        for i in 0..c.base_workers {
            let name = format!("worker-{i}");
            let gpu = engine.add_resource(ResourceKind::GpuCompute, name.clone());
            let channels = (0..c.loader_channels)
                .map(|ch| {
                    engine.add_resource(ResourceKind::LoaderChannel, format!("{name}/loader-{ch}"))
                })
                .collect();
            let mut cn_cache = LruCache::new(c.gpu_cache_mib);
            for id in &c.warm_controlnets {
                let size = self.catalog.controlnet_size(*id).ok_or_else(|| {
                    Error::config("cluster.warm_controlnets", format!("{id} not in catalog"))
                })?;
                cn_cache.warm(id, size);
            }
            self.workers.push(Worker {
                name,
                gpu,
                channels,
                cn_cache,
                lora_cache: LruCache::new(c.host_cache_mib),
                queue: VecDeque::new(),
                busy: false,
                outstanding: 0,
            });
        }
        for j in 0..c.controlnet_gpus {
            let name = format!("cn-service-{j}");
            let gpu = engine.add_resource(ResourceKind::GpuCompute, name.clone());
            let link = engine.add_resource(ResourceKind::Link, format!("{name}/link"));
            self.services.push(ServiceGpu {
                name,
                gpu,
                link,
                cache: LruCache::new(c.gpu_cache_mib),
                pinned: BTreeSet::new(),
            });
        }
        let total_replicas: u32 = c.controlnet_replicas.values().sum();
        if total_replicas > 0 && self.services.is_empty() {
            return Err(Error::config(
                "cluster.controlnet_replicas",
                "replicas configured but no ControlNet service GPUs",
            ));
        }
        let mut slot = 0;
        for (id, replicas) in &c.controlnet_replicas {
            if self.catalog.controlnet_size(*id).is_none() {
                return Err(Error::config(
                    "cluster.controlnet_replicas",
                    format!("{id} not in catalog"),
                ));
            }
            for _ in 0..*replicas {
                let n = self.services.len();
                self.services[slot % n].pinned.insert(*id);
                slot += 1;
            }
        }
        Ok(())
    }

    /// Runs `requests` to completion; `default_policy` applies unless a
    /// request carries an override.
    pub fn run(mut self, requests: &[Request], default_policy: Policy) -> Result<SimOutput> {
        default_policy.validate()?;
        let mut engine = Engine::new()
            .with_watchdog(self.options.watchdog)
            .with_log(self.options.record_log);
        self.record_timeline = self.options.record_timeline;
        self.build(&mut engine)?;

        for r in requests {
            r.validate(&self.limits)?;
            for c in &r.controlnets {
                if self.catalog.controlnet_size(*c).is_none() {
                    return Err(Error::NotFound {
                        request_id: r.id,
                        what: c.to_string(),
                    });
                }
            }
            for l in &r.loras {
                if self.catalog.lora_size(l.id).is_none() {
                    return Err(Error::NotFound {
                        request_id: r.id,
                        what: l.id.to_string(),
                    });
                }
            }
            let policy = match &r.policy_override {
                Some(p) => p.parse()?,
                None => default_policy,
            };
            let skip = policy.skipped_steps();
            if skip >= r.steps {
                return Err(Error::validation(format!(
                    "request {}: cannot skip {skip} of {} steps",
                    r.id, r.steps
                )));
            }
            if policy.controlnet_mode() == ControlNetMode::Service
                && !r.controlnets.is_empty()
                && self.services.is_empty()
            {
                return Err(Error::config(
                    "cluster.controlnet_gpus",
                    format!("policy {policy} needs at least one ControlNet service GPU"),
                ));
            }
            let idx = self.reqs.len();
            self.reqs.push(ReqState {
                req: r.clone(),
                policy,
                stages: self.profile.step_stages(policy.unet_optimized),
                steps_to_run: r.steps - skip,
                worker: 0,
                cursor: r.arrival_ms,
                start: r.arrival_ms,
                breakdown: LatencyBreakdown::default(),
                timeline: Vec::new(),
                group_loads: Vec::new(),
                plan: None,
                patches: BTreeMap::new(),
                branches: Vec::new(),
                enc_end: 0.0,
                step_fetch_ms: 0.0,
                service_ms: BTreeMap::new(),
                completion: None,
            });
            engine.schedule(
                r.arrival_ms,
                EventKind::RequestArrival,
                Some(r.id),
                None,
                (idx, Phase::Arrive),
            )?;
        }

        let final_clock = engine.run_until_idle(|eng, ev| {
            let (idx, phase) = ev.payload;
            self.handle(eng, idx, phase)
        })?;

        let gpus_exclusive = engine
            .resources()
            .iter()
            .filter(|r| r.kind == ResourceKind::GpuCompute)
            .all(|r| r.is_exclusive());
        let mut caches = CacheSummary::default();
        for w in &self.workers {
            caches.controlnet.merge(w.cn_cache.stats());
            caches.lora.merge(w.lora_cache.stats());
        }
        for s in &self.services {
            caches.controlnet.merge(s.cache.stats());
        }
        let workers = &self.workers;
        let outcomes = self
            .reqs
            .into_iter()
            .map(|st| {
                let completion = st.completion.expect("every request completes");
                RequestOutcome {
                    request_id: st.req.id,
                    policy: st.policy,
                    worker: workers[st.worker].name.clone(),
                    arrival_ms: st.req.arrival_ms,
                    start_ms: st.start,
                    completion_ms: completion,
                    breakdown: st.breakdown,
                    patch_plan: st.plan,
                    timeline: st.timeline,
                }
            })
            .collect();
        Ok(SimOutput {
            outcomes,
            event_log: engine.log().to_vec(),
            caches,
            final_clock,
            gpus_exclusive,
        })
    }

    fn record(
        &mut self,
        idx: usize,
        kind: ActivityKind,
        step: Option<u32>,
        resource: ResourceId,
        span: (f64, f64),
        eng: &Engine<(usize, Phase)>,
    ) {
        if self.record_timeline {
            self.reqs[idx].timeline.push(Activity {
                kind,
                step,
                resource: eng.resource(resource).name.clone(),
                start: span.0,
                end: span.1,
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn occupy(
        &mut self,
        eng: &mut Engine<(usize, Phase)>,
        idx: usize,
        resource: ResourceId,
        ready: f64,
        duration: f64,
        kind: ActivityKind,
        step: Option<u32>,
    ) -> Result<(f64, f64)> {
        let rid = self.reqs[idx].req.id;
        let span = eng.acquire_at(resource, ready, duration, Some(rid))?;
        self.record(idx, kind, step, resource, span, eng);
        Ok(span)
    }

    fn lora_tier(&mut self, worker: usize, id: LoraId, size: f64) -> Result<TierSpec> {
        let hit = self.workers[worker].lora_cache.touch(&id, size);
        let name = if hit {
            crate::model::TIER_HOST
        } else {
            self.cluster.lora_tier.as_str()
        };
        self.cluster.tier(name, self.profile)
    }

    fn pick_channel(&self, eng: &Engine<(usize, Phase)>, worker: usize) -> ResourceId {
        let chans = &self.workers[worker].channels;
        let free: Vec<f64> = chans.iter().map(|c| eng.resource(*c).busy_until).collect();
        chans[earliest(&free)]
    }

    fn handle(&mut self, eng: &mut Engine<(usize, Phase)>, idx: usize, phase: Phase) -> Result<()> {
        let now = eng.clock();
        let rid = Some(self.reqs[idx].req.id);
        match phase {
            Phase::Arrive => self.on_arrive(eng, idx, now)?,
            Phase::Begin => self.on_begin(eng, idx, now)?,
            Phase::Step(k) => self.on_step(eng, idx, k, now)?,
            Phase::Sync(k) => self.on_sync(eng, idx, k, now)?,
            Phase::StepDone(k) => self.on_step_done(eng, idx, k, now)?,
            Phase::PatchDone(k) => {
                eng.schedule(
                    now,
                    EventKind::StageStart,
                    rid,
                    None,
                    (idx, Phase::Step(k + 1)),
                )?;
            }
            Phase::Fetched => {}
            Phase::Done => self.on_done(eng, idx, now)?,
        }
        Ok(())
    }

    fn on_arrive(&mut self, eng: &mut Engine<(usize, Phase)>, idx: usize, now: f64) -> Result<()> {
        let w = (0..self.workers.len())
            .min_by_key(|i| (self.workers[*i].outstanding, *i))
            .expect("at least one worker");
        self.workers[w].outstanding += 1;
        self.reqs[idx].worker = w;
        let rid = Some(self.reqs[idx].req.id);

        if let LoraMode::Async { groups } = self.reqs[idx].policy.lora_mode() {
            let loras = self.reqs[idx].req.loras.clone();
            let m = groups.max(1) as usize;
            let mut group_loads = vec![f64::NEG_INFINITY; if loras.is_empty() { 0 } else { m }];
            for l in &loras {
                let tier = self.lora_tier(w, l.id, l.size_mib)?;
                let ch = self.pick_channel(eng, w);
                let total = tier.fetch_ms(l.size_mib);
                let (start, end) =
                    self.occupy(eng, idx, ch, now, total, ActivityKind::LoraFetch, None)?;
                let per_group = (end - start - tier.latency_ms) / m as f64;
                for (g, slot) in group_loads.iter_mut().enumerate() {
                    let done = if g + 1 == m {
                        end
                    } else {
                        start + tier.latency_ms + per_group * (g + 1) as f64
                    };
                    *slot = slot.max(done);
                }
                eng.schedule(
                    end,
                    EventKind::FetchComplete,
                    rid,
                    Some(ch),
                    (idx, Phase::Fetched),
                )?;
            }
            self.reqs[idx].group_loads = group_loads;
        }

        if self.workers[w].busy {
            self.workers[w].queue.push_back(idx);
        } else {
            self.workers[w].busy = true;
            eng.schedule(
                now,
                EventKind::StageStart,
                rid,
                Some(self.workers[w].gpu),
                (idx, Phase::Begin),
            )?;
        }
        Ok(())
    }

    fn on_begin(&mut self, eng: &mut Engine<(usize, Phase)>, idx: usize, now: f64) -> Result<()> {
        let w = self.reqs[idx].worker;
        let gpu = self.workers[w].gpu;
        let rid = Some(self.reqs[idx].req.id);
        {
            let st = &mut self.reqs[idx];
            st.start = now;
            st.advance(Stage::QueueWait, now);
        }
        let policy = self.reqs[idx].policy;

        if policy.lora_mode() == LoraMode::Blocking {
            let loras = self.reqs[idx].req.loras.clone();
            let mut ready = now;
            for l in &loras {
                let tier = self.lora_tier(w, l.id, l.size_mib)?;
                let ch = self.pick_channel(eng, w);
                ready = self
                    .occupy(
                        eng,
                        idx,
                        ch,
                        ready,
                        tier.fetch_ms(l.size_mib),
                        ActivityKind::LoraFetch,
                        None,
                    )?
                    .1;
            }
            self.reqs[idx].advance(Stage::LoraLoadExposed, ready);
            for l in &loras {
                let cost = l.size_mib / 100.0 * self.profile.patch_create_replace_ms_per_100mib;
                let cursor = self.reqs[idx].cursor;
                let (_, end) =
                    self.occupy(eng, idx, gpu, cursor, cost, ActivityKind::LoraPatch, None)?;
                self.reqs[idx].advance(Stage::LoraPatch, end);
            }
        }

        let cursor = self.reqs[idx].cursor;
        let (_, end) = self.occupy(
            eng,
            idx,
            gpu,
            cursor,
            self.profile.text_encoder_ms,
            ActivityKind::TextEncode,
            None,
        )?;
        self.reqs[idx].advance(Stage::TextEncode, end);

        let cns = self.reqs[idx].req.controlnets.clone();
        match policy.controlnet_mode() {
            ControlNetMode::Colocated => {
                let tier = self
                    .cluster
                    .tier(&self.cluster.controlnet_miss_tier, self.profile)?;
                for c in &cns {
                    let size = self.catalog.controlnet_size(*c).expect("validated");
                    let out = self.workers[w].cn_cache.access(c, size, &tier);
                    if !out.hit {
                        let cursor = self.reqs[idx].cursor;
                        let (_, end) = self.occupy(
                            eng,
                            idx,
                            gpu,
                            cursor,
                            out.fetch_ms,
                            ActivityKind::CacheFetch,
                            None,
                        )?;
                        self.reqs[idx].advance(Stage::CacheFetch, end);
                    }
                }
            }
            ControlNetMode::Service => self.assign_services(eng, idx, &cns)?,
            ControlNetMode::Ignored => {}
        }

        if let LoraMode::Async { groups } = policy.lora_mode() {
            if !self.reqs[idx].group_loads.is_empty() {
                self.plan_async_patch(idx, groups)?;
            }
        }

        let cursor = self.reqs[idx].cursor;
        if let Some(ms) = self.reqs[idx].patches.get(&0).copied() {
            let (_, end) =
                self.occupy(eng, idx, gpu, cursor, ms, ActivityKind::LoraPatch, Some(0))?;
            self.reqs[idx].advance(Stage::LoraPatch, end);
            eng.schedule(
                end,
                EventKind::PatchBoundary,
                rid,
                Some(gpu),
                (idx, Phase::PatchDone(0)),
            )?;
        } else {
            eng.schedule(
                cursor,
                EventKind::StageStart,
                rid,
                Some(gpu),
                (idx, Phase::Step(1)),
            )?;
        }
        Ok(())
    }

    fn assign_services(
        &mut self,
        eng: &Engine<(usize, Phase)>,
        idx: usize,
        cns: &[ControlNetId],
    ) -> Result<()> {
        let tier = self
            .cluster
            .tier(&self.cluster.controlnet_miss_tier, self.profile)?;
        let mut used: BTreeSet<usize> = BTreeSet::new();
        let mut branches = Vec::with_capacity(cns.len());
        for c in cns {
            let size = self.catalog.controlnet_size(*c).expect("validated");
            let busy = |j: usize| eng.resource(self.services[j].gpu).busy_until;
            let least_busy = |cands: &mut dyn Iterator<Item = usize>| {
                cands.min_by(|a, b| busy(*a).total_cmp(&busy(*b)).then(a.cmp(b)))
            };
            let n = self.services.len();
            let warm = least_busy(&mut (0..n).filter(|j| {
                !used.contains(j)
                    && (self.services[*j].pinned.contains(c) || self.services[*j].cache.contains(c))
            }));
            let j = warm
                .or_else(|| least_busy(&mut (0..n).filter(|j| !used.contains(j))))
                .or_else(|| least_busy(&mut (0..n)))
                .expect("at least one service GPU");
            used.insert(j);
            let svc = &mut self.services[j];
            let pending_fetch_ms = if svc.pinned.contains(c) {
                0.0
            } else {
                svc.cache.access(c, size, &tier).fetch_ms
            };
            branches.push(Branch {
                service: j,
                pending_fetch_ms,
            });
        }
        self.reqs[idx].branches = branches;
        Ok(())
    }

    /// Nominal per-step latency of the request's schedule, used as the
    /// boundary grid when planning patches.
    fn nominal_step(&self, idx: usize) -> f64 {
        let st = &self.reqs[idx];
        let n = st.req.controlnets.len();
        match st.policy.controlnet_mode() {
            ControlNetMode::Colocated => serial_step_with(n, &st.stages),
            ControlNetMode::Service => parallel_step_with(n, self.services.len(), &st.stages),
            ControlNetMode::Ignored => serial_step_with(0, &st.stages),
        }
    }

    fn plan_async_patch(&mut self, idx: usize, groups: u32) -> Result<()> {
        let step = self.nominal_step(idx);
        let st = &mut self.reqs[idx];
        let denoise_start = st.cursor;
        let n_loras = st.req.loras.len() as f64;
        let m = f64::from(groups.max(1));
        let rel: Vec<f64> = st
            .group_loads
            .iter()
            .map(|t| (t - denoise_start).max(0.0))
            .collect();
        let per_group = n_loras
            * (self.profile.patch_inplace_ms + self.profile.pipeline_merge_overhead_ms * (m - 1.0))
            / m;
        let plan = plan_pipeline_patch(&rel, step, per_group, st.steps_to_run)?;
        st.patches = plan.delays_by_boundary();
        st.breakdown.first_patched_step = Some(plan.first_patched_step);
        st.plan = Some(plan);
        Ok(())
    }

    fn on_step(
        &mut self,
        eng: &mut Engine<(usize, Phase)>,
        idx: usize,
        k: u32,
        now: f64,
    ) -> Result<()> {
        let w = self.reqs[idx].worker;
        let gpu = self.workers[w].gpu;
        let rid = Some(self.reqs[idx].req.id);
        let stages = self.reqs[idx].stages;
        let step = Some(k);
        let mode = self.reqs[idx].policy.controlnet_mode();
        let n_cn = self.reqs[idx].req.controlnets.len();

        if mode == ControlNetMode::Service && n_cn > 0 {
            let (_, enc_end) = self.occupy(
                eng,
                idx,
                gpu,
                now,
                stages.encoder_mid_ms,
                ActivityKind::EncoderMid,
                step,
            )?;
            let mut sync = enc_end;
            let mut fetch_span: f64 = 0.0;
            for b in 0..self.reqs[idx].branches.len() {
                let (j, fetch) = {
                    let br = &self.reqs[idx].branches[b];
                    (br.service, br.pending_fetch_ms)
                };
                let (svc_gpu, link, name) = {
                    let s = &self.services[j];
                    (s.gpu, s.link, s.name.clone())
                };
                let mut ready = now;
                if fetch > 0.0 {
                    let (fs, fe) = self.occupy(
                        eng,
                        idx,
                        svc_gpu,
                        now,
                        fetch,
                        ActivityKind::CacheFetch,
                        step,
                    )?;
                    *self.reqs[idx].service_ms.entry(name.clone()).or_insert(0.0) += fe - fs;
                    fetch_span = fetch_span.max(fe - now);
                    ready = fe;
                    self.reqs[idx].branches[b].pending_fetch_ms = 0.0;
                }
                let (cs, ce) = self.occupy(
                    eng,
                    idx,
                    svc_gpu,
                    ready,
                    stages.controlnet_ms,
                    ActivityKind::ControlNet,
                    step,
                )?;
                *self.reqs[idx].service_ms.entry(name).or_insert(0.0) += ce - cs;
                let (_, arrive) =
                    self.occupy(eng, idx, link, ce, stages.comm_ms, ActivityKind::Comm, step)?;
                sync = sync.max(arrive);
            }
            let st = &mut self.reqs[idx];
            st.enc_end = enc_end;
            st.step_fetch_ms = fetch_span;
            eng.schedule(
                sync,
                EventKind::SyncAcquire,
                rid,
                Some(gpu),
                (idx, Phase::Sync(k)),
            )?;
            return Ok(());
        }

        let mut t = now;
        if mode == ControlNetMode::Colocated {
            for _ in 0..n_cn {
                t = self
                    .occupy(
                        eng,
                        idx,
                        gpu,
                        t,
                        stages.controlnet_ms,
                        ActivityKind::ControlNet,
                        step,
                    )?
                    .1;
            }
            self.reqs[idx].advance(Stage::ControlnetWait, t);
        }
        let (_, enc_end) = self.occupy(
            eng,
            idx,
            gpu,
            t,
            stages.encoder_mid_ms,
            ActivityKind::EncoderMid,
            step,
        )?;
        let (_, dec_end) = self.occupy(
            eng,
            idx,
            gpu,
            enc_end,
            stages.decoder_ms,
            ActivityKind::Decoder,
            step,
        )?;
        self.reqs[idx].advance(Stage::DenoiseCompute, dec_end);
        eng.schedule(
            dec_end,
            EventKind::StageEnd,
            rid,
            Some(gpu),
            (idx, Phase::StepDone(k)),
        )?;
        Ok(())
    }

    fn on_sync(
        &mut self,
        eng: &mut Engine<(usize, Phase)>,
        idx: usize,
        k: u32,
        now: f64,
    ) -> Result<()> {
        let w = self.reqs[idx].worker;
        let gpu = self.workers[w].gpu;
        let rid = Some(self.reqs[idx].req.id);
        let stages = self.reqs[idx].stages;
        {
            let st = &mut self.reqs[idx];
            let enc_end = st.enc_end;
            st.advance(Stage::DenoiseCompute, enc_end);
            let wait = now - enc_end;
            let comm = wait.min(stages.comm_ms);
            let fetch = (wait - comm).min(st.step_fetch_ms).max(0.0);
            st.advance(Stage::Comm, enc_end + comm);
            st.advance(Stage::CacheFetch, enc_end + comm + fetch);
            st.advance(Stage::ControlnetWait, now);
            st.step_fetch_ms = 0.0;
        }
        let (_, dec_end) = self.occupy(
            eng,
            idx,
            gpu,
            now,
            stages.decoder_ms,
            ActivityKind::Decoder,
            Some(k),
        )?;
        self.reqs[idx].advance(Stage::DenoiseCompute, dec_end);
        eng.schedule(
            dec_end,
            EventKind::StageEnd,
            rid,
            Some(gpu),
            (idx, Phase::StepDone(k)),
        )?;
        Ok(())
    }

    fn on_step_done(
        &mut self,
        eng: &mut Engine<(usize, Phase)>,
        idx: usize,
        k: u32,
        now: f64,
    ) -> Result<()> {
        let w = self.reqs[idx].worker;
        let gpu = self.workers[w].gpu;
        let rid = Some(self.reqs[idx].req.id);
        if k == self.reqs[idx].steps_to_run {
            let (_, end) = self.occupy(
                eng,
                idx,
                gpu,
                now,
                self.profile.vae_decode_ms,
                ActivityKind::VaeDecode,
                None,
            )?;
            self.reqs[idx].advance(Stage::VaeDecode, end);
            eng.schedule(end, EventKind::StageEnd, rid, Some(gpu), (idx, Phase::Done))?;
        } else if let Some(ms) = self.reqs[idx].patches.get(&k).copied() {
            let (_, end) = self.occupy(eng, idx, gpu, now, ms, ActivityKind::LoraPatch, Some(k))?;
            self.reqs[idx].advance(Stage::LoraPatch, end);
            eng.schedule(
                end,
                EventKind::PatchBoundary,
                rid,
                Some(gpu),
                (idx, Phase::PatchDone(k)),
            )?;
        } else {
            eng.schedule(
                now,
                EventKind::StageStart,
                rid,
                Some(gpu),
                (idx, Phase::Step(k + 1)),
            )?;
        }
        Ok(())
    }

    fn on_done(&mut self, eng: &mut Engine<(usize, Phase)>, idx: usize, now: f64) -> Result<()> {
        let w = self.reqs[idx].worker;
        {
            let worker_name = self.workers[w].name.clone();
            let st = &mut self.reqs[idx];
            st.completion = Some(now);
            st.breakdown.total_ms = now - st.req.arrival_ms;
            st.breakdown
                .gpu_ms_consumed
                .insert(worker_name, now - st.start);
            for (name, ms) in std::mem::take(&mut st.service_ms) {
                st.breakdown.gpu_ms_consumed.insert(name, ms);
            }
        }
        let worker = &mut self.workers[w];
        worker.outstanding -= 1;
        worker.busy = false;
        if let Some(next) = worker.queue.pop_front() {
            worker.busy = true;
            let gpu = worker.gpu;
            let rid = Some(self.reqs[next].req.id);
            eng.schedule(
                now,
                EventKind::StageStart,
                rid,
                Some(gpu),
                (next, Phase::Begin),
            )?;
        }
        Ok(())
    }
}

/// Runs one request alone on a fresh cluster.
pub fn execute(
    request: &Request,
    policy: Policy,
    cluster: &ClusterSpec,
    profile: &LatencyProfile,
    catalog: &AddonCatalog,
) -> Result<(Vec<Activity>, LatencyBreakdown)> {
    let out =
        Simulator::new(profile, cluster, catalog)?.run(std::slice::from_ref(request), policy)?;
    let o = out.outcomes.into_iter().next().expect("one outcome");
    Ok((o.timeline, o.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::CONTROLNET_SIZE_MIB;
    use proptest::prelude::*;

    fn catalog(n_cn: u32, loras: &[(u32, f64)]) -> AddonCatalog {
        AddonCatalog {
            controlnets: (0..n_cn)
                .map(|i| (ControlNetId(i), CONTROLNET_SIZE_MIB))
                .collect(),
            loras: loras.iter().map(|(i, s)| (LoraId(*i), *s)).collect(),
        }
    }

    fn warm_cluster(n_cn: u32) -> ClusterSpec {
        ClusterSpec {
            controlnet_gpus: n_cn.max(1) as usize,
            controlnet_replicas: (0..n_cn).map(|i| (ControlNetId(i), 1)).collect(),
            warm_controlnets: (0..n_cn).map(ControlNetId).collect(),
            ..ClusterSpec::default()
        }
    }

    fn p(s: &str) -> Policy {
        s.parse().unwrap()
    }

    #[test]
    fn policy_labels_round_trip() {
        for s in [
            "SerialColocated",
            "CaaS",
            "CaaS+AsyncLoRA",
            "CaaS+PipelineLoRA(4)",
            "StepSkip(10)",
            "NoAddon",
            "CaaS+AsyncLoRA+UNetOpt",
        ] {
            assert_eq!(p(s).to_string(), s);
        }
        for bad in [
            "",
            "Caas",
            "StepSkip(x)",
            "CaaS+PipelineLoRA(0)",
            "StepSkip(3",
        ] {
            assert!(bad.parse::<Policy>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&p("StepSkip(5)+UNetOpt")).unwrap();
        assert_eq!(json, "\"StepSkip(5)+UNetOpt\"");
        assert_eq!(
            serde_json::from_str::<Policy>(&json).unwrap(),
            p("StepSkip(5)+UNetOpt")
        );
    }

    fn toy_profile() -> LatencyProfile {
        LatencyProfile {
            unet_total_ms: 2500.0,
            encoder_mid_fraction: 0.4,
            controlnet_factor: 1.1,
            comm_payload_mib: 0.0,
            link_latency_ms: 1.0,
            ..LatencyProfile::default()
        }
    }

    #[test]
    fn step_latency_examples() {
        let d = LatencyProfile::default();
        assert!((serial_step_latency(1, &d) - 76.896).abs() < 1e-9);
        let t = toy_profile();
        assert!((serial_step_latency(3, &t) - 116.0).abs() < 1e-9);
        assert!((parallel_step_latency(3, &t, 3).unwrap() - 53.0).abs() < 1e-9);
        assert!((parallel_step_latency(2, &t, 1).unwrap() - (45.0 + 30.0)).abs() < 1e-9);
        assert!(parallel_step_latency(0, &t, 3).is_err());
        assert!(parallel_step_latency(1, &t, 0).is_err());
    }

    #[test]
    fn patch_plan_examples() {
        let plan = plan_lora_patch(445.3, 53.4, 100.0, 50).unwrap();
        assert_eq!(plan.patch_boundary_step, 9);
        assert_eq!(plan.first_patched_step, 10);
        assert_eq!(plan.inserted_delay_ms, 100.0);

        let late = plan_lora_patch(1e6, 53.4, 100.0, 50).unwrap();
        assert_eq!(late.first_patched_step, 51);
        assert_eq!(late.inserted_delay_ms, 0.0);

        let early = plan_lora_patch(0.0, 53.4, 100.0, 50).unwrap();
        assert_eq!(
            (early.patch_boundary_step, early.first_patched_step),
            (0, 1)
        );

        let exact = plan_lora_patch(2.0 * 53.4, 53.4, 100.0, 50).unwrap();
        assert_eq!(exact.patch_boundary_step, 2);

        assert!(plan_lora_patch(1.0, 0.0, 100.0, 50).is_err());
    }

    #[test]
    fn pipeline_plan_example() {
        let plan = plan_pipeline_patch(&[200.0, 400.0], 53.4, 60.0, 50).unwrap();
        let ks: Vec<u32> = plan.groups.iter().map(|g| g.boundary_step).collect();
        assert_eq!(ks, vec![4, 8]);
        assert_eq!(plan.first_patched_step, 9);
        assert_eq!(plan.inserted_delay_ms, 120.0);
        assert!(plan_pipeline_patch(&[], 53.4, 60.0, 50).is_err());
        assert!(plan_pipeline_patch(&[400.0, 200.0], 53.4, 60.0, 50).is_err());
    }

    #[test]
    fn pipeline_group_waits_for_previous_patch() {
        // Group 1 is loaded by boundary 1 but group 0's patch runs past it.
        let plan = plan_pipeline_patch(&[10.0, 20.0], 50.0, 70.0, 50).unwrap();
        let ks: Vec<u32> = plan.groups.iter().map(|g| g.boundary_step).collect();
        assert_eq!(ks, vec![1, 3]);
    }

    #[test]
    fn no_addon_closed_form() {
        let prof = LatencyProfile::default();
        let req = Request::new(0, 0.0)
            .with_controlnets([0, 1])
            .with_loras([(0, 384.0)]);
        let (tl, b) = execute(
            &req,
            p("NoAddon"),
            &warm_cluster(2),
            &prof,
            &catalog(2, &[(0, 384.0)]),
        )
        .unwrap();
        assert!(
            (b.total_ms - (10.0 + 2670.0 + 120.0)).abs() < 1e-6,
            "{}",
            b.total_ms
        );
        assert!(b.conservation_error() < 1e-6);
        assert!(tl
            .iter()
            .all(|a| !matches!(a.kind, ActivityKind::ControlNet | ActivityKind::LoraFetch)));
    }

    #[test]
    fn serial_lora_cost_is_fetch_plus_create_replace() {
        let prof = LatencyProfile::default();
        let cat = catalog(0, &[(0, 384.0)]);
        let cluster = ClusterSpec::default();
        let with = Request::new(0, 0.0).with_loras([(0, 384.0)]);
        let (_, b) = execute(&with, p("SerialColocated"), &cluster, &prof, &cat).unwrap();
        let (_, base) = execute(
            &Request::new(0, 0.0),
            p("SerialColocated"),
            &cluster,
            &prof,
            &cat,
        )
        .unwrap();
        assert!((b.stage(Stage::LoraLoadExposed) - 490.0).abs() < 1e-9);
        assert!((b.stage(Stage::LoraPatch) - 2000.0).abs() < 1e-9);
        assert!((b.total_ms - base.total_ms - 2490.0).abs() < 1e-6);
    }

    #[test]
    fn async_lora_exposes_only_the_patch() {
        let prof = LatencyProfile::default();
        let mut cluster = ClusterSpec::default();
        cluster.tier_bandwidths.insert(
            "remote".into(),
            TierSpec {
                gibps: 1.0,
                latency_ms: 0.0,
            },
        );
        let cat = catalog(0, &[(0, 456.0)]);
        let req = Request::new(0, 0.0).with_loras([(0, 456.0)]);
        let out = Simulator::new(&prof, &cluster, &cat)
            .unwrap()
            .run(std::slice::from_ref(&req), p("CaaS+AsyncLoRA"))
            .unwrap();
        let o = &out.outcomes[0];
        let (_, none) = execute(&req, p("NoAddon"), &cluster, &prof, &cat).unwrap();
        assert!((o.breakdown.total_ms - none.total_ms - 100.0).abs() < 1e-6);
        // Loaded 445.3 ms after arrival; denoising starts after the 10 ms text encoder.
        let plan = o.patch_plan.as_ref().unwrap();
        assert!((plan.load_complete_ms - 435.3125).abs() < 1e-9);
        assert_eq!(plan.first_patched_step, 10);
        assert!(o.breakdown.stage(Stage::LoraLoadExposed) == 0.0);
    }

    #[test]
    fn caas_without_service_gpus_is_config_error() {
        let cluster = ClusterSpec {
            controlnet_gpus: 0,
            ..ClusterSpec::default()
        };
        let req = Request::new(0, 0.0).with_controlnets([0]);
        let err = execute(
            &req,
            p("CaaS"),
            &cluster,
            &LatencyProfile::default(),
            &catalog(1, &[]),
        )
        .unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Config);
    }

    #[test]
    fn unknown_addon_is_not_found() {
        let req = Request::new(4, 0.0).with_controlnets([9]);
        let err = execute(
            &req,
            p("SerialColocated"),
            &ClusterSpec::default(),
            &LatencyProfile::default(),
            &catalog(1, &[]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotFound { request_id: 4, .. }));
    }

    #[test]
    fn step_skip_saves_k_steps() {
        let prof = LatencyProfile::default();
        let cluster = warm_cluster(2);
        let cat = catalog(2, &[]);
        let req = Request::new(0, 0.0).with_controlnets([0, 1]);
        let (_, full) = execute(&req, p("SerialColocated"), &cluster, &prof, &cat).unwrap();
        let (_, skip) = execute(&req, p("StepSkip(10)"), &cluster, &prof, &cat).unwrap();
        let per_step = serial_step_latency(2, &prof);
        assert!((full.total_ms - skip.total_ms - 10.0 * per_step).abs() < 1e-6);
        assert!(execute(&req, p("StepSkip(50)"), &cluster, &prof, &cat).is_err());
    }

    #[test]
    fn fifo_queue_on_single_worker() {
        let prof = LatencyProfile::default();
        let cat = catalog(0, &[]);
        let reqs = [Request::new(0, 0.0), Request::new(1, 0.0)];
        let out = Simulator::new(&prof, &ClusterSpec::default(), &cat)
            .unwrap()
            .run(&reqs, p("NoAddon"))
            .unwrap();
        let (a, b) = (&out.outcomes[0], &out.outcomes[1]);
        assert!((b.breakdown.stage(Stage::QueueWait) - a.breakdown.total_ms).abs() < 1e-9);
        assert!(b.breakdown.conservation_error() < 1e-6);
        assert!(out.gpus_exclusive);
    }

    #[test]
    fn cold_service_controlnet_is_fetched_once() {
        let prof = LatencyProfile::default();
        let cluster = ClusterSpec {
            controlnet_gpus: 1,
            ..ClusterSpec::default()
        };
        let cat = catalog(1, &[]);
        let reqs = [
            Request::new(0, 0.0).with_controlnets([0]),
            Request::new(1, 10_000.0).with_controlnets([0]),
        ];
        let out = Simulator::new(&prof, &cluster, &cat)
            .unwrap()
            .run(&reqs, p("CaaS"))
            .unwrap();
        let fetch = cluster
            .tier("host", &prof)
            .unwrap()
            .fetch_ms(CONTROLNET_SIZE_MIB);
        let first = &out.outcomes[0].breakdown;
        let second = &out.outcomes[1].breakdown;
        assert!(first.stage(Stage::CacheFetch) > 0.0);
        assert_eq!(second.stage(Stage::CacheFetch), 0.0);
        assert!((first.total_ms - second.total_ms - fetch).abs() < 1e-6);
        assert_eq!(out.caches.controlnet.hits, 1);
        assert_eq!(out.caches.controlnet.misses, 1);
    }

    #[test]
    fn throughput_counts_every_gpu() {
        let prof = LatencyProfile::default();
        let cluster = warm_cluster(2);
        let cat = catalog(2, &[]);
        let req = Request::new(0, 0.0).with_controlnets([0, 1]);
        let out = Simulator::new(&prof, &cluster, &cat)
            .unwrap()
            .run(&[req], p("CaaS"))
            .unwrap();
        let o = &out.outcomes[0];
        assert_eq!(o.breakdown.gpu_ms_consumed.len(), 3);
        let tp = throughput(&out.outcomes, o.completion_ms).unwrap();
        assert!((tp - 60_000.0 / o.breakdown.gpu_ms_total()).abs() < 1e-9);
        assert!(throughput(&out.outcomes, 1.0).is_err());
        assert!(throughput(&out.outcomes, 0.0).is_err());
    }

    fn profile_strategy() -> impl Strategy<Value = LatencyProfile> {
        (
            1000.0f64..4000.0,
            0.1f64..0.9,
            1.0f64..3.0,
            0.0f64..50.0,
            0.0f64..300.0,
            0.0f64..400.0,
        )
            .prop_map(|(unet, f, factor, text, vae, payload)| LatencyProfile {
                unet_total_ms: unet,
                encoder_mid_fraction: f,
                controlnet_factor: factor,
                text_encoder_ms: text,
                vae_decode_ms: vae,
                comm_payload_mib: payload,
                ..LatencyProfile::default()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn single_plan_equals_one_group_pipeline(load in 0.0f64..5000.0, sd in 1.0f64..200.0, patch in 0.0f64..300.0, steps in 1u32..80) {
            let a = plan_lora_patch(load, sd, patch, steps).unwrap();
            prop_assert!(a.first_patched_step >= 1 && a.first_patched_step <= steps + 1);
            if a.first_patched_step <= steps {
                prop_assert!(f64::from(a.patch_boundary_step) * sd >= load);
                prop_assert!(a.patch_boundary_step == 0 || f64::from(a.patch_boundary_step - 1) * sd < load);
            }
        }

        #[test]
        fn schedules_respect_dependencies_and_conserve(prof in profile_strategy(), n in 1u32..4, with_lora in any::<bool>()) {
            let cat = catalog(3, &[(0, 341.0), (1, 456.0)]);
            let cluster = warm_cluster(3);
            let mut req = Request::new(0, 0.0).with_controlnets(0..n);
            if with_lora {
                req = req.with_loras([(0, 341.0), (1, 456.0)]);
            }
            let mut serial_total = 0.0;
            for label in ["SerialColocated", "CaaS", "CaaS+AsyncLoRA", "CaaS+PipelineLoRA(3)", "NoAddon"] {
                let (tl, b) = execute(&req, p(label), &cluster, &prof, &cat).unwrap();
                prop_assert!(check_dependencies(&tl), "{}", label);
                prop_assert!(b.conservation_error() < 1e-6, "{} {}", label, b.conservation_error());
                if label == "SerialColocated" {
                    serial_total = b.total_ms;
                }
                if label == "CaaS" {
                    prop_assert!(b.total_ms <= serial_total + 1e-6);
                }
            }
        }

        #[test]
        fn contention_keeps_gpus_exclusive(arrivals in proptest::collection::vec(0.0f64..3000.0, 1..8), workers in 1usize..3) {
            let prof = LatencyProfile::default();
            let cat = catalog(3, &[(0, 341.0), (1, 456.0)]);
            let cluster = ClusterSpec { base_workers: workers, controlnet_gpus: 2, ..ClusterSpec::default() };
            let mut sorted = arrivals.clone();
            sorted.sort_by(f64::total_cmp);
            let reqs: Vec<Request> = sorted
                .iter()
                .enumerate()
                .map(|(i, t)| Request::new(i as u64, *t).with_controlnets(0..(i as u32 % 3 + 1)).with_loras([(i as u32 % 2, if i % 2 == 0 { 341.0 } else { 456.0 })]))
                .collect();
            for label in ["SerialColocated", "CaaS+AsyncLoRA", "CaaS+PipelineLoRA(2)"] {
                let out = Simulator::new(&prof, &cluster, &cat).unwrap().run(&reqs, p(label)).unwrap();
                prop_assert!(out.gpus_exclusive);
                for o in &out.outcomes {
                    prop_assert!(o.breakdown.conservation_error() < 1e-6);
                    prop_assert!(check_dependencies(&o.timeline));
                }
            }
        }
    }
}
