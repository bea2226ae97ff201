//! Scenario file schema and validation.
//!
//! Scenarios are JSON documents. Unknown fields are rejected so that typos
//! surface as errors instead of silently falling back to defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource_manager::ContainerClass;
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad override {0:?}: {1}")]
    Override(String, String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskConfig {
    pub disk_id: String,
    /// Sustained read throughput, bytes per second.
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub host: String,
    pub vcores: u32,
    pub memory: u64,
    #[serde(default)]
    pub disks: Vec<DiskConfig>,
    #[serde(default)]
    pub runs_datanode: bool,
    #[serde(default)]
    pub runs_nodemanager: bool,
    /// Egress cap for DataNode traffic leaving this host, bytes per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nic_capacity: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaConfig {
    pub host: String,
    pub disk_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub block_id: String,
    pub size: u64,
    pub replicas: Vec<ReplicaConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub name: String,
    pub blocks: Vec<BlockConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerRequest {
    pub container_id: String,
    pub class_name: String,
    pub host: String,
    /// Seconds.
    pub start_time: f64,
    pub file: String,
}

/// Simulation parameters. Durations are seconds; `aimd_increase` is bytes/s
/// gained per second of loss-free delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    pub dt: f64,
    pub poll_interval: f64,
    pub watch_latency: f64,
    pub aimd_increase: f64,
    pub aimd_beta: f64,
    pub sim_duration: f64,
    pub seed: u64,
    pub overhead_factor: f64,
}

impl Default for Parameters {
    fn default() -> Self {
        Parameters {
            dt: 0.1,
            poll_interval: 1.0,
            watch_latency: 0.01,
            aimd_increase: 5_000_000.0,
            aimd_beta: 0.5,
            sim_duration: 60.0,
            seed: 0,
            overhead_factor: 1.0,
        }
    }
}

impl Parameters {
    pub fn dt_time(&self) -> SimTime {
        SimTime::from_secs_f64(self.dt)
    }

    pub fn poll_time(&self) -> SimTime {
        SimTime::from_secs_f64(self.poll_interval)
    }

    pub fn watch_latency_time(&self) -> SimTime {
        SimTime::from_secs_f64(self.watch_latency)
    }

    pub fn duration_time(&self) -> SimTime {
        SimTime::from_secs_f64(self.sim_duration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub machines: Vec<MachineConfig>,
    pub files: Vec<FileConfig>,
    pub container_classes: Vec<ContainerClass>,
    pub container_requests: Vec<ContainerRequest>,
    pub shaping_enabled: bool,
    #[serde(default)]
    pub parameters: Parameters,
}

fn default_name() -> String {
    "scenario".to_string()
}

fn check_name(kind: &str, name: &str) -> Result<(), ScenarioError> {
    if name.is_empty()
        || name
            .chars()
            .any(|c| c.is_whitespace() || c == ':' || c == '/' || c.is_control())
    {
        return invalid(format!(
            "{kind} {name:?} must be non-empty without whitespace, ':' or '/'"
        ));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Applies `key=value` overrides to parameters or `shaping_enabled`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ScenarioError> {
        let bad = |msg: &str| ScenarioError::Override(assignment.to_string(), msg.to_string());
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| bad("expected key=value"))?;
        let key = key.trim();
        let value = value.trim();
        let float = || value.parse::<f64>().map_err(|_| bad("not a number"));
        let p = &mut self.parameters;
        match key {
            "dt" => p.dt = float()?,
            "poll_interval" => p.poll_interval = float()?,
            "watch_latency" => p.watch_latency = float()?,
            "aimd_increase" => p.aimd_increase = float()?,
            "aimd_beta" => p.aimd_beta = float()?,
            "sim_duration" => p.sim_duration = float()?,
            "overhead_factor" => p.overhead_factor = float()?,
            "seed" => p.seed = value.parse().map_err(|_| bad("not an integer"))?,
            "shaping_enabled" => {
                self.shaping_enabled = value.parse().map_err(|_| bad("not a boolean"))?
            }
            _ => return Err(bad("unknown key")),
        }
        Ok(())
    }

    /// Checks every cross-reference and numeric range; reports the first
    /// violation.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut hosts: BTreeMap<&str, &MachineConfig> = BTreeMap::new();
        for m in &self.machines {
            check_name("host", &m.host)?;
            if hosts.insert(&m.host, m).is_some() {
                return invalid(format!("duplicate host {:?}", m.host));
            }
            let mut disks = BTreeSet::new();
            for d in &m.disks {
                check_name("disk_id", &d.disk_id)?;
                if !disks.insert(&d.disk_id) {
                    return invalid(format!("duplicate disk {:?} on {:?}", d.disk_id, m.host));
                }
                if d.capacity == 0 {
                    return invalid(format!(
                        "disk {:?} on {:?} has zero capacity",
                        d.disk_id, m.host
                    ));
                }
            }
            if m.runs_datanode && m.disks.is_empty() {
                return invalid(format!("DataNode host {:?} has no disks", m.host));
            }
            if m.nic_capacity == Some(0) {
                return invalid(format!("host {:?} has zero nic_capacity", m.host));
            }
        }

        let mut files = BTreeSet::new();
        let mut blocks = BTreeSet::new();
        for f in &self.files {
            if f.name.is_empty() || f.name.chars().any(char::is_whitespace) {
                return invalid(format!("bad file name {:?}", f.name));
            }
            if !files.insert(&f.name) {
                return invalid(format!("duplicate file {:?}", f.name));
            }
            if f.blocks.is_empty() {
                return invalid(format!("file {:?} has no blocks", f.name));
            }
            for b in &f.blocks {
                check_name("block_id", &b.block_id)?;
                if !blocks.insert(&b.block_id) {
                    return invalid(format!("duplicate block {:?}", b.block_id));
                }
                if b.size == 0 {
                    return invalid(format!("block {:?} has zero size", b.block_id));
                }
                if b.replicas.is_empty() {
                    return invalid(format!("block {:?} has no replicas", b.block_id));
                }
                for r in &b.replicas {
                    let m = hosts.get(r.host.as_str()).ok_or_else(|| {
                        ScenarioError::Invalid(format!(
                            "replica of {:?} names unknown host {:?}",
                            b.block_id, r.host
                        ))
                    })?;
                    if !m.runs_datanode {
                        return invalid(format!(
                            "replica of {:?} on {:?} which runs no DataNode",
                            b.block_id, r.host
                        ));
                    }
                    if !m.disks.iter().any(|d| d.disk_id == r.disk_id) {
                        return invalid(format!(
                            "replica of {:?} names unknown disk {:?} on {:?}",
                            b.block_id, r.disk_id, r.host
                        ));
                    }
                }
            }
        }

        let mut classes = BTreeSet::new();
        for c in &self.container_classes {
            check_name("class_name", &c.class_name)?;
            if !classes.insert(&c.class_name) {
                return invalid(format!("duplicate container class {:?}", c.class_name));
            }
            if c.io_burst == Some(0) {
                return invalid(format!("class {:?} has zero io_burst", c.class_name));
            }
        }

        let mut containers = BTreeSet::new();
        let mut latest_start = 0.0f64;
        for r in &self.container_requests {
            check_name("container_id", &r.container_id)?;
            if !containers.insert(&r.container_id) {
                return invalid(format!("duplicate container {:?}", r.container_id));
            }
            if !classes.contains(&r.class_name) {
                return invalid(format!(
                    "container {:?} names unknown class {:?}",
                    r.container_id, r.class_name
                ));
            }
            match hosts.get(r.host.as_str()) {
                None => {
                    return invalid(format!(
                        "container {:?} names unknown host {:?}",
                        r.container_id, r.host
                    ))
                }
                Some(m) if !m.runs_nodemanager => {
                    return invalid(format!(
                        "container {:?} placed on {:?} which runs no NodeManager",
                        r.container_id, r.host
                    ))
                }
                Some(_) => {}
            }
            if !files.contains(&r.file) {
                return invalid(format!(
                    "container {:?} reads unknown file {:?}",
                    r.container_id, r.file
                ));
            }
            if !(r.start_time.is_finite() && r.start_time >= 0.0) {
                return invalid(format!(
                    "container {:?} has negative or non-finite start_time",
                    r.container_id
                ));
            }
            latest_start = latest_start.max(r.start_time);
        }

        let p = &self.parameters;
        let positive = |name: &str, v: f64| -> Result<(), ScenarioError> {
            if v.is_finite() && SimTime::from_secs_f64(v) > SimTime::ZERO {
                Ok(())
            } else {
                invalid(format!("parameter {name} must be at least one microsecond"))
            }
        };
        positive("dt", p.dt)?;
        positive("poll_interval", p.poll_interval)?;
        positive("sim_duration", p.sim_duration)?;
        if !(p.watch_latency.is_finite() && p.watch_latency >= 0.0) {
            return invalid("parameter watch_latency must be non-negative");
        }
        if !(p.aimd_increase.is_finite() && p.aimd_increase >= 0.0) {
            return invalid("parameter aimd_increase must be non-negative");
        }
        if !(p.aimd_beta > 0.0 && p.aimd_beta <= 1.0) {
            return invalid("parameter aimd_beta must lie in (0, 1]");
        }
        if !(p.overhead_factor.is_finite() && p.overhead_factor > 0.0) {
            return invalid("parameter overhead_factor must be positive");
        }
        if p.sim_duration <= latest_start {
            return invalid("parameter sim_duration must exceed the largest start_time");
        }
        Ok(())
    }

    /// The same scenario with `shaping_enabled` normalized, used to decide
    /// whether two runs are comparable.
    pub fn comparable_form(&self) -> ScenarioConfig {
        let mut c = self.clone();
        c.shaping_enabled = false;
        c
    }
}
