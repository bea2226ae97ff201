//! Run instrumentation and output rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::resource_manager::Dimension;
use crate::scenario::ScenarioConfig;
use crate::shaper::PipeKey;
use crate::simcluster::{Pipe, PipeId, StepReport};
use crate::time::SimTime;

/// A pipe counts as controlled once a sample is at most this multiple of its
/// class rate.
pub const CONTROL_THRESHOLD: f64 = 1.05;
/// Fraction of a pipe's lifetime, counted from the end, used for its
/// steady-state mean.
pub const STEADY_STATE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputSample {
    pub time: SimTime,
    /// Bytes per second over the preceding step.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeTrace {
    pub id: PipeId,
    pub key: PipeKey,
    pub container_id: String,
    pub block_id: String,
    pub dn_host: String,
    pub disk_id: String,
    pub opened: SimTime,
    pub closed: Option<SimTime>,
    pub class_rate: Option<u64>,
    pub first_tick: Option<SimTime>,
    pub detected: Option<SimTime>,
    pub written: Option<SimTime>,
    pub controlled: Option<SimTime>,
    pub bytes: f64,
    pub samples: Vec<ThroughputSample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub container_id: String,
    pub host: String,
    pub dimension: Dimension,
    pub at: SimTime,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContainerTrace {
    pub started: Option<SimTime>,
    pub finished: Option<SimTime>,
}

/// Uncontrolled-period breakdown for one shaped pipe. `total` is the exact
/// sum of the five components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimelineRecord {
    pub pipe: PipeKey,
    pub t1: SimTime,
    pub t2: SimTime,
    pub t3: SimTime,
    pub t4: SimTime,
    pub t5: SimTime,
    pub total: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeverControlled {
    pub pipe: PipeKey,
    pub reason: &'static str,
}

#[derive(Debug, Clone)]
pub struct Recorder {
    dt: SimTime,
    pub containers: BTreeMap<String, ContainerTrace>,
    pub pipes: BTreeMap<PipeId, PipeTrace>,
    by_key: BTreeMap<PipeKey, PipeId>,
    pub rejections: Vec<Rejection>,
    pub store_errors: u64,
}

impl Recorder {
    pub fn new(dt: SimTime) -> Self {
        Recorder {
            dt,
            containers: BTreeMap::new(),
            pipes: BTreeMap::new(),
            by_key: BTreeMap::new(),
            rejections: Vec::new(),
            store_errors: 0,
        }
    }

    pub fn dt(&self) -> SimTime {
        self.dt
    }

    pub fn trace(&self, key: &PipeKey) -> Option<&PipeTrace> {
        self.by_key.get(key).and_then(|id| self.pipes.get(id))
    }

    /// Traces in opening order.
    pub fn traces(&self) -> Vec<&PipeTrace> {
        let mut v: Vec<&PipeTrace> = self.pipes.values().collect();
        v.sort_by_key(|t| (t.opened, t.key.render()));
        v
    }

    pub(crate) fn container_started(&mut self, id: &str, now: SimTime) {
        self.containers.entry(id.to_string()).or_default().started = Some(now);
    }

    pub(crate) fn container_finished(&mut self, id: &str, now: SimTime) {
        self.containers.entry(id.to_string()).or_default().finished = Some(now);
    }

    pub(crate) fn pipe_opened(&mut self, pipe: &Pipe, class_rate: Option<u64>) {
        self.by_key.insert(pipe.key.clone(), pipe.id);
        self.pipes.insert(
            pipe.id,
            PipeTrace {
                id: pipe.id,
                key: pipe.key.clone(),
                container_id: pipe.container_id.clone(),
                block_id: pipe.block_id.clone(),
                dn_host: pipe.dn_host.clone(),
                disk_id: pipe.disk_id.clone(),
                opened: pipe.start_time,
                closed: None,
                class_rate,
                first_tick: None,
                detected: None,
                written: None,
                controlled: None,
                bytes: 0.0,
                samples: Vec::new(),
            },
        );
    }

    pub(crate) fn pipe_closed(&mut self, id: PipeId, now: SimTime) {
        if let Some(t) = self.pipes.get_mut(&id) {
            t.closed = Some(now);
        }
    }

    fn with_key(&mut self, key: &PipeKey, f: impl FnOnce(&mut PipeTrace)) {
        if let Some(t) = self.by_key.get(key).and_then(|id| self.pipes.get_mut(id)) {
            f(t)
        }
    }

    pub(crate) fn pipe_seen(&mut self, key: &PipeKey, now: SimTime) {
        self.with_key(key, |t| {
            t.first_tick.get_or_insert(now);
        });
    }

    pub(crate) fn pipe_detected(&mut self, key: &PipeKey, now: SimTime) {
        self.with_key(key, |t| {
            t.detected.get_or_insert(now);
        });
    }

    pub(crate) fn pipe_written(&mut self, key: &PipeKey, now: SimTime) {
        self.with_key(key, |t| {
            t.written.get_or_insert(now);
        });
    }

    pub(crate) fn pipe_controlled(&mut self, key: &PipeKey, now: SimTime) {
        self.with_key(key, |t| {
            t.controlled.get_or_insert(now);
        });
    }

    pub(crate) fn step(&mut self, report: &StepReport) {
        let secs = report.dt.as_secs_f64();
        for p in &report.pipes {
            if let Some(t) = self.pipes.get_mut(&p.pipe) {
                t.bytes += p.delivered;
                t.samples.push(ThroughputSample {
                    time: report.now,
                    rate: p.delivered / secs,
                });
            }
        }
    }

    /// Timeline of every pipe that belongs to a rate class, split into
    /// measured records and pipes that were never brought under control.
    pub fn timeline(&self) -> (Vec<TimelineRecord>, Vec<NeverControlled>) {
        let mut records = Vec::new();
        let mut missed = Vec::new();
        for t in self.traces() {
            let Some(rate) = t.class_rate else { continue };
            match measure(t, rate) {
                Ok(r) => records.push(r),
                Err(reason) => missed.push(NeverControlled {
                    pipe: t.key.clone(),
                    reason,
                }),
            }
        }
        records.sort_by_key(|r| r.pipe.render());
        missed.sort_by_key(|m| m.pipe.render());
        (records, missed)
    }

    /// `time,pipe,rate` rows ordered by time, then pipe.
    pub fn throughput_csv(&self) -> String {
        let mut rows: Vec<(SimTime, String, f64)> = self
            .pipes
            .values()
            .flat_map(|t| t.samples.iter().map(|s| (s.time, t.key.render(), s.rate)))
            .collect();
        rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        let mut out = String::from("time,pipe,rate\n");
        for (time, pipe, rate) in rows {
            writeln!(out, "{time},{pipe},{rate:.6}").expect("string write");
        }
        out
    }

    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("pipe,t1,t2,t3,t4,t5,T\n");
        for r in self.timeline().0 {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.pipe, r.t1, r.t2, r.t3, r.t4, r.t5, r.total
            )
            .expect("string write");
        }
        out
    }

    pub fn summary(&self, cfg: &ScenarioConfig, end: SimTime) -> String {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "scenario: {}", cfg.name).unwrap();
        writeln!(w, "shaping_enabled: {}", cfg.shaping_enabled).unwrap();
        writeln!(w, "seed: {}", cfg.parameters.seed).unwrap();
        writeln!(w, "duration: {end}").unwrap();
        writeln!(w, "dt: {}", self.dt).unwrap();
        for c in &cfg.container_requests {
            let trace = self.containers.get(&c.container_id);
            let fmt = |t: Option<SimTime>| t.map_or_else(|| "-".to_string(), |t| t.to_string());
            writeln!(
                w,
                "container {} class={} host={} started={} finished={}",
                c.container_id,
                c.class_name,
                c.host,
                fmt(trace.and_then(|t| t.started)),
                fmt(trace.and_then(|t| t.finished)),
            )
            .unwrap();
        }
        for r in &self.rejections {
            writeln!(
                w,
                "rejected {} host={} dimension={} at={}",
                r.container_id, r.host, r.dimension, r.at
            )
            .unwrap();
        }
        for t in self.traces() {
            let mean = steady_state_mean(&t.samples, t.opened, t.closed.unwrap_or(end));
            writeln!(
                w,
                "pipe {} container={} block={} opened={} closed={} bytes={:.0} class_rate={} steady_mean={}",
                t.key,
                t.container_id,
                t.block_id,
                t.opened,
                t.closed.map_or_else(|| "-".to_string(), |c| c.to_string()),
                t.bytes,
                t.class_rate.map_or_else(|| "-".to_string(), |r| r.to_string()),
                mean.map_or_else(|| "-".to_string(), |m| format!("{m:.6}")),
            )
            .unwrap();
        }
        if cfg.shaping_enabled {
            let (records, missed) = self.timeline();
            for r in &records {
                writeln!(w, "timeline {} T={}", r.pipe, r.total).unwrap();
            }
            for m in &missed {
                writeln!(w, "never_controlled {} reason={}", m.pipe, m.reason).unwrap();
            }
        } else {
            writeln!(w, "timeline: none (shaping disabled)").unwrap();
        }
        writeln!(w, "store_errors: {}", self.store_errors).unwrap();
        out
    }
}

fn measure(t: &PipeTrace, class_rate: u64) -> Result<TimelineRecord, &'static str> {
    let first_tick = t.first_tick.ok_or("never polled")?;
    let detected = t.detected.ok_or("never detected")?;
    let written = t.written.ok_or("never submitted")?;
    let controlled = t.controlled.ok_or("closed before rule applied")?;
    let threshold = CONTROL_THRESHOLD * class_rate as f64;
    let last_before = t.samples.iter().rev().find(|s| s.time <= controlled);
    let effect = match last_before {
        Some(s) if s.rate <= threshold => controlled,
        _ => t
            .samples
            .iter()
            .find(|s| s.time > controlled && s.rate <= threshold)
            .map(|s| s.time)
            .ok_or("rate never fell under the limit")?,
    };
    let t1 = first_tick - t.opened;
    let t2 = detected - first_tick;
    let t3 = written - detected;
    let t4 = controlled - written;
    let t5 = effect - controlled;
    Ok(TimelineRecord {
        pipe: t.key.clone(),
        t1,
        t2,
        t3,
        t4,
        t5,
        total: t1 + t2 + t3 + t4 + t5,
    })
}

/// Mean rate over samples in the final quarter of `[opened, end]`. Falls back
/// to the last sample when the window holds none.
pub fn steady_state_mean(
    samples: &[ThroughputSample],
    opened: SimTime,
    end: SimTime,
) -> Option<f64> {
    let span = end.saturating_sub(opened).as_micros() as f64;
    let from = opened.as_micros() as f64 + (1.0 - STEADY_STATE_FRACTION) * span;
    let window: Vec<f64> = samples
        .iter()
        .filter(|s| s.time.as_micros() as f64 > from && s.time <= end)
        .map(|s| s.rate)
        .collect();
    if window.is_empty() {
        return samples.last().map(|s| s.rate);
    }
    Some(window.iter().sum::<f64>() / window.len() as f64)
}

/// Mean of samples with `from < time <= to`.
pub fn window_mean(samples: &[ThroughputSample], from: SimTime, to: SimTime) -> Option<f64> {
    let w: Vec<f64> = samples
        .iter()
        .filter(|s| s.time > from && s.time <= to)
        .map(|s| s.rate)
        .collect();
    (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
}
