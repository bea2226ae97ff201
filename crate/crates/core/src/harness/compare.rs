//! Side-by-side comparison of an unshaped and a shaped run of one scenario.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::harness::record::{steady_state_mean, ThroughputSample};
use crate::harness::{HarnessError, SCENARIO_FILE, SUMMARY_FILE, THROUGHPUT_FILE};
use crate::scenario::ScenarioConfig;
use crate::time::SimTime;

/// Maximum relative deviation from the class rate for a shaped pipe to pass.
pub const SHAPED_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PipeSummary {
    pub pipe: String,
    pub container_id: String,
    pub block_id: String,
    pub opened: SimTime,
    pub closed: Option<SimTime>,
    pub class_rate: Option<u64>,
    pub samples: Vec<ThroughputSample>,
}

impl PipeSummary {
    pub fn steady_mean(&self, end: SimTime) -> Option<f64> {
        steady_state_mean(&self.samples, self.opened, self.closed.unwrap_or(end))
    }
}

/// The parts of a run directory needed for comparison.
#[derive(Debug, Clone)]
pub struct RunData {
    pub scenario: ScenarioConfig,
    pub duration: SimTime,
    /// In opening order.
    pub pipes: Vec<PipeSummary>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<RunData, HarnessError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| HarnessError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let scenario = ScenarioConfig::from_json(&read(SCENARIO_FILE)?)?;
        let summary = read(SUMMARY_FILE)?;
        let throughput = read(THROUGHPUT_FILE)?;
        let bad = |msg: String| HarnessError::Malformed(dir.display().to_string(), msg);

        let mut duration = None;
        let mut pipes = Vec::new();
        for line in summary.lines() {
            if let Some(d) = line.strip_prefix("duration: ") {
                duration = Some(parse_time(d).ok_or_else(|| bad(format!("bad duration {d:?}")))?);
            } else if let Some(rest) = line.strip_prefix("pipe ") {
                pipes.push(
                    parse_pipe_line(rest).ok_or_else(|| bad(format!("bad pipe line {line:?}")))?,
                );
            }
        }
        let duration = duration.ok_or_else(|| bad("summary lacks duration".into()))?;

        let mut samples: BTreeMap<String, Vec<ThroughputSample>> = BTreeMap::new();
        for (i, line) in throughput.lines().enumerate().skip(1) {
            let mut f = line.split(',');
            let (Some(time), Some(pipe), Some(rate), None) =
                (f.next(), f.next(), f.next(), f.next())
            else {
                return Err(bad(format!("throughput line {}", i + 1)));
            };
            let time = parse_time(time).ok_or_else(|| bad(format!("throughput line {}", i + 1)))?;
            let rate: f64 = rate
                .parse()
                .map_err(|_| bad(format!("throughput line {}", i + 1)))?;
            samples
                .entry(pipe.to_string())
                .or_default()
                .push(ThroughputSample { time, rate });
        }
        for p in &mut pipes {
            p.samples = samples.remove(&p.pipe).unwrap_or_default();
        }
        pipes.sort_by(|a, b| (a.opened, &a.pipe).cmp(&(b.opened, &b.pipe)));
        Ok(RunData {
            scenario,
            duration,
            pipes,
        })
    }
}

fn parse_time(s: &str) -> Option<SimTime> {
    let (whole, frac) = s.split_once('.')?;
    if frac.len() != 6 {
        return None;
    }
    let whole: u64 = whole.parse().ok()?;
    let frac: u64 = frac.parse().ok()?;
    Some(SimTime::from_micros(whole * 1_000_000 + frac))
}

fn parse_pipe_line(rest: &str) -> Option<PipeSummary> {
    let mut parts = rest.split(' ');
    let pipe = parts.next()?.to_string();
    let fields: BTreeMap<&str, &str> = parts.filter_map(|p| p.split_once('=')).collect();
    let opt = |v: &str| (v != "-").then(|| v.to_string());
    Some(PipeSummary {
        pipe,
        container_id: fields.get("container")?.to_string(),
        block_id: fields.get("block")?.to_string(),
        opened: parse_time(fields.get("opened")?)?,
        closed: match opt(fields.get("closed")?) {
            Some(c) => Some(parse_time(&c)?),
            None => None,
        },
        class_rate: match opt(fields.get("class_rate")?) {
            Some(r) => Some(r.parse().ok()?),
            None => None,
        },
        samples: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeComparison {
    pub container_id: String,
    pub block_id: String,
    pub baseline_pipe: Option<String>,
    pub shaped_pipe: Option<String>,
    pub baseline_mean: Option<f64>,
    pub shaped_mean: Option<f64>,
    pub class_rate: Option<u64>,
    /// `|shaped_mean - class_rate| / class_rate`.
    pub deviation: Option<f64>,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub pipes: Vec<PipeComparison>,
    /// Baseline steady-state mean of the oldest pipe over that of the second
    /// oldest.
    pub seniority_ratio: Option<f64>,
}

impl ComparisonReport {
    pub fn all_pass(&self) -> bool {
        self.pipes.iter().all(|p| p.pass != Some(false))
    }

    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        writeln!(out, "seniority_ratio: {}", fmt(self.seniority_ratio)).unwrap();
        for p in &self.pipes {
            writeln!(
                out,
                "pipe container={} block={} baseline={} shaped={} baseline_mean={} shaped_mean={} class_rate={} deviation={} {}",
                p.container_id,
                p.block_id,
                p.baseline_pipe.as_deref().unwrap_or("-"),
                p.shaped_pipe.as_deref().unwrap_or("-"),
                fmt(p.baseline_mean),
                fmt(p.shaped_mean),
                p.class_rate.map_or_else(|| "-".to_string(), |r| r.to_string()),
                fmt(p.deviation),
                match p.pass {
                    Some(true) => "PASS",
                    Some(false) => "FAIL",
                    None => "-",
                }
            )
            .unwrap();
        }
        writeln!(
            out,
            "result: {}",
            if self.all_pass() { "PASS" } else { "FAIL" }
        )
        .unwrap();
        out
    }
}

/// Names the first top-level scenario section that differs.
fn scenario_difference(a: &ScenarioConfig, b: &ScenarioConfig) -> Option<&'static str> {
    let (a, b) = (a.comparable_form(), b.comparable_form());
    if a.machines != b.machines {
        Some("machines")
    } else if a.files != b.files {
        Some("files")
    } else if a.container_classes != b.container_classes {
        Some("container_classes")
    } else if a.container_requests != b.container_requests {
        Some("container_requests")
    } else if a.parameters != b.parameters {
        Some("parameters")
    } else if a.name != b.name {
        Some("name")
    } else {
        None
    }
}

pub fn compare(baseline_dir: &Path, shaped_dir: &Path) -> Result<ComparisonReport, HarnessError> {
    let base = RunData::load(baseline_dir)?;
    let shaped = RunData::load(shaped_dir)?;
    compare_runs(&base, &shaped)
}

pub fn compare_runs(base: &RunData, shaped: &RunData) -> Result<ComparisonReport, HarnessError> {
    if let Some(section) = scenario_difference(&base.scenario, &shaped.scenario) {
        return Err(HarnessError::MismatchedScenarios(section.to_string()));
    }
    let key = |p: &PipeSummary| (p.container_id.clone(), p.block_id.clone());
    let mut rows: BTreeMap<(String, String), PipeComparison> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for p in &base.pipes {
        order.push(key(p));
        rows.insert(
            key(p),
            PipeComparison {
                container_id: p.container_id.clone(),
                block_id: p.block_id.clone(),
                baseline_pipe: Some(p.pipe.clone()),
                shaped_pipe: None,
                baseline_mean: p.steady_mean(base.duration),
                shaped_mean: None,
                class_rate: None,
                deviation: None,
                pass: None,
            },
        );
    }
    for p in &shaped.pipes {
        let row = rows.entry(key(p)).or_insert_with(|| {
            order.push(key(p));
            PipeComparison {
                container_id: p.container_id.clone(),
                block_id: p.block_id.clone(),
                baseline_pipe: None,
                shaped_pipe: None,
                baseline_mean: None,
                shaped_mean: None,
                class_rate: None,
                deviation: None,
                pass: None,
            }
        });
        row.shaped_pipe = Some(p.pipe.clone());
        row.shaped_mean = p.steady_mean(shaped.duration);
        row.class_rate = p.class_rate;
        if let (Some(mean), Some(rate)) = (row.shaped_mean, p.class_rate) {
            let dev = (mean - rate as f64).abs() / rate as f64;
            row.deviation = Some(dev);
            row.pass = Some(dev <= SHAPED_TOLERANCE);
        }
    }
    let seniority_ratio = match (base.pipes.first(), base.pipes.get(1)) {
        (Some(a), Some(b)) => match (a.steady_mean(base.duration), b.steady_mean(base.duration)) {
            (Some(x), Some(y)) if y > 0.0 => Some(x / y),
            (Some(x), Some(_)) if x > 0.0 => Some(f64::INFINITY),
            _ => None,
        },
        _ => None,
    };
    Ok(ComparisonReport {
        pipes: order.into_iter().filter_map(|k| rows.remove(&k)).collect(),
        seniority_ratio,
    })
}
