//! Deterministic discrete-event kernel: a virtual millisecond clock, an
//! event queue totally ordered by `(time, seq)`, and exclusive FIFO
//! resources. The kernel knows nothing about what activities mean.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WATCHDOG: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResourceKind {
    GpuCompute,
    LoaderChannel,
    Link,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub request_id: Option<u64>,
}

/// An exclusive resource. Activities are granted in the order they are
/// requested; `busy_until` only ever moves forward.
#[derive(Debug, Clone)]
pub struct ResourceToken {
    pub id: ResourceId,
    pub kind: ResourceKind,
    pub name: String,
    pub busy_until: f64,
    pub intervals: Vec<Interval>,
}

impl ResourceToken {
    pub fn busy_ms(&self) -> f64 {
        self.intervals.iter().map(|i| i.end - i.start).sum()
    }

    /// True when no two recorded activities overlap in time.
    pub fn is_exclusive(&self) -> bool {
        let mut v: Vec<_> = self
            .intervals
            .iter()
            .filter(|i| i.end > i.start)
            .map(|i| (i.start, i.end))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.windows(2).all(|w| w[0].1 <= w[1].0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    RequestArrival,
    StageStart,
    StageEnd,
    FetchComplete,
    PatchBoundary,
    SyncAcquire,
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub request_id: Option<u64>,
    pub resource_id: Option<ResourceId>,
    pub payload: P,
}

/// One processed event, as written to the newline-delimited JSON log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub request_id: Option<u64>,
    pub resource_id: Option<ResourceId>,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .total_cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

pub struct Engine<P> {
    clock: f64,
    next_seq: u64,
    queue: BinaryHeap<Queued<P>>,
    resources: Vec<ResourceToken>,
    log: Vec<LogRecord>,
    record_log: bool,
    watchdog: u64,
    processed: u64,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Self {
            clock: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            resources: Vec::new(),
            log: Vec::new(),
            record_log: true,
            watchdog: DEFAULT_WATCHDOG,
            processed: 0,
        }
    }

    pub fn with_watchdog(mut self, max_events: u64) -> Self {
        self.watchdog = max_events;
        self
    }

    pub fn with_log(mut self, enabled: bool) -> Self {
        self.record_log = enabled;
        self
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn add_resource(&mut self, kind: ResourceKind, name: impl Into<String>) -> ResourceId {
        let id = ResourceId(self.resources.len());
        self.resources.push(ResourceToken {
            id,
            kind,
            name: name.into(),
            busy_until: 0.0,
            intervals: Vec::new(),
        });
        id
    }

    pub fn resource(&self, id: ResourceId) -> &ResourceToken {
        &self.resources[id.0]
    }

    pub fn resources(&self) -> &[ResourceToken] {
        &self.resources
    }

    /// Enqueues an event; returns its sequence number.
    pub fn schedule(
        &mut self,
        time: f64,
        kind: EventKind,
        request_id: Option<u64>,
        resource_id: Option<ResourceId>,
        payload: P,
    ) -> Result<u64> {
        if !(time >= self.clock) {
            return Err(Error::PastEvent {
                time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(Event {
            time,
            seq,
            kind,
            request_id,
            resource_id,
            payload,
        }));
        Ok(seq)
    }

    /// Occupies `id` for `duration` starting no earlier than the clock.
    pub fn acquire(&mut self, id: ResourceId, duration: f64) -> Result<(f64, f64)> {
        self.acquire_at(id, self.clock, duration, None)
    }

    /// Occupies `id` for `duration`, starting at `max(ready, clock, busy_until)`.
    pub fn acquire_at(
        &mut self,
        id: ResourceId,
        ready: f64,
        duration: f64,
        request_id: Option<u64>,
    ) -> Result<(f64, f64)> {
        if !(duration >= 0.0) {
            return Err(Error::validation(format!(
                "negative activity duration {duration} on {}",
                self.resources[id.0].name
            )));
        }
        let clock = self.clock;
        let r = &mut self.resources[id.0];
        let start = ready.max(clock).max(r.busy_until);
        let end = start + duration;
        r.busy_until = end;
        r.intervals.push(Interval {
            start,
            end,
            request_id,
        });
        Ok((start, end))
    }

    fn pop(&mut self) -> Option<Event<P>> {
        let Queued(ev) = self.queue.pop()?;
        debug_assert!(ev.time >= self.clock);
        self.clock = ev.time;
        self.processed += 1;
        if self.record_log {
            self.log.push(LogRecord {
                time: ev.time,
                seq: ev.seq,
                kind: ev.kind,
                request_id: ev.request_id,
                resource_id: ev.resource_id,
            });
        }
        Some(ev)
    }

    /// Processes events in `(time, seq)` order until the queue drains and
    /// returns the final clock.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> Result<f64>
    where
        F: FnMut(&mut Self, Event<P>) -> Result<()>,
    {
        while !self.queue.is_empty() {
            if self.processed >= self.watchdog {
                return Err(Error::Watchdog {
                    events: self.processed,
                    tail: self.log_tail(10),
                });
            }
            let ev = self.pop().expect("queue non-empty");
            handler(self, ev)?;
        }
        Ok(self.clock)
    }

    fn log_tail(&self, n: usize) -> String {
        let skip = self.log.len().saturating_sub(n);
        self.log[skip..]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap_or_default())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Writes records as newline-delimited JSON.
pub fn write_event_log<W: Write>(records: &[LogRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
