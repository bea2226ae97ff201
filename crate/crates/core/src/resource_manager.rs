//! Throughput-aware admission control and the container allocation registry.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RmError {
    #[error("no such container class {0:?}")]
    NoSuchClass(String),
    #[error("no such host {0:?}")]
    NoSuchHost(String),
    #[error("container {0:?} already allocated")]
    DuplicateContainer(String),
    #[error("container {id:?} is {actual:?}, expected {expected:?}")]
    InvalidState {
        id: String,
        expected: AllocationState,
        actual: Option<AllocationState>,
    },
}

/// Container resource demand. `io_rate` is bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub vcores: u32,
    pub memory: u64,
    pub io_rate: u64,
}

impl ResourceSpec {
    pub fn fits_within(&self, capacity: &ResourceSpec) -> Result<(), Dimension> {
        if self.vcores > capacity.vcores {
            Err(Dimension::Vcores)
        } else if self.memory > capacity.memory {
            Err(Dimension::Memory)
        } else if self.io_rate > capacity.io_rate {
            Err(Dimension::IoRate)
        } else {
            Ok(())
        }
    }

    pub fn checked_sub(&self, other: &ResourceSpec) -> Option<ResourceSpec> {
        Some(ResourceSpec {
            vcores: self.vcores.checked_sub(other.vcores)?,
            memory: self.memory.checked_sub(other.memory)?,
            io_rate: self.io_rate.checked_sub(other.io_rate)?,
        })
    }
}

impl Add for ResourceSpec {
    type Output = ResourceSpec;
    fn add(self, rhs: ResourceSpec) -> ResourceSpec {
        ResourceSpec {
            vcores: self.vcores + rhs.vcores,
            memory: self.memory + rhs.memory,
            io_rate: self.io_rate + rhs.io_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Vcores,
    Memory,
    IoRate,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Vcores => "vcores",
            Dimension::Memory => "memory",
            Dimension::IoRate => "io_rate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerClass {
    pub class_name: String,
    pub spec: ResourceSpec,
    /// Token bucket depth for this class's pipes. Defaults to 100 ms worth of
    /// `io_rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_burst: Option<u64>,
}

impl ContainerClass {
    pub fn burst(&self) -> u64 {
        self.io_burst
            .unwrap_or_else(|| (self.spec.io_rate / 10).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationState {
    Requested,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub container_id: String,
    pub host: String,
    pub class_name: String,
    pub state: AllocationState,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Accept(String),
    Reject(Dimension),
}

/// Rate class of a running container, as seen by the connection monitor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub class_name: String,
    pub io_rate: u64,
    pub io_burst: u64,
}

#[derive(Debug, Clone)]
pub struct ResourceManager {
    classes: BTreeMap<String, ContainerClass>,
    capacity: BTreeMap<String, ResourceSpec>,
    allocations: BTreeMap<String, Allocation>,
    next_id: u64,
}

impl ResourceManager {
    /// `hosts` maps each NodeManager host to its capacity, where the io_rate
    /// capacity is the sum of the host's disk throughputs.
    pub fn new(
        classes: impl IntoIterator<Item = ContainerClass>,
        hosts: impl IntoIterator<Item = (String, ResourceSpec)>,
    ) -> Self {
        ResourceManager {
            classes: classes
                .into_iter()
                .map(|c| (c.class_name.clone(), c))
                .collect(),
            capacity: hosts.into_iter().collect(),
            allocations: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn class(&self, name: &str) -> Option<&ContainerClass> {
        self.classes.get(name)
    }

    pub fn allocation(&self, container_id: &str) -> Option<&Allocation> {
        self.allocations.get(container_id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values()
    }

    pub fn capacity(&self, host: &str) -> Option<ResourceSpec> {
        self.capacity.get(host).copied()
    }

    pub fn hosts(&self) -> impl Iterator<Item = &str> {
        self.capacity.keys().map(String::as_str)
    }

    /// Sum of Requested and Running specs on `host`.
    pub fn used(&self, host: &str) -> ResourceSpec {
        self.allocations
            .values()
            .filter(|a| a.host == host && a.state != AllocationState::Finished)
            .map(|a| self.classes[&a.class_name].spec)
            .fold(ResourceSpec::default(), Add::add)
    }

    pub fn available(&self, host: &str) -> Option<ResourceSpec> {
        let cap = self.capacity.get(host)?;
        Some(
            cap.checked_sub(&self.used(host))
                .expect("allocations never exceed capacity"),
        )
    }

    /// Admits with a generated container id.
    pub fn admit(&mut self, class_name: &str, host: &str) -> Result<Admission, RmError> {
        let id = loop {
            let candidate = format!("container_{:06}", self.next_id);
            self.next_id += 1;
            if !self.allocations.contains_key(&candidate) {
                break candidate;
            }
        };
        self.admit_named(&id, class_name, host)
    }

    pub fn admit_named(
        &mut self,
        container_id: &str,
        class_name: &str,
        host: &str,
    ) -> Result<Admission, RmError> {
        let class = self
            .classes
            .get(class_name)
            .ok_or_else(|| RmError::NoSuchClass(class_name.to_string()))?;
        let cap = *self
            .capacity
            .get(host)
            .ok_or_else(|| RmError::NoSuchHost(host.to_string()))?;
        if self.allocations.contains_key(container_id) {
            return Err(RmError::DuplicateContainer(container_id.to_string()));
        }
        let wanted = self.used(host) + class.spec;
        if let Err(dim) = wanted.fits_within(&cap) {
            return Ok(Admission::Reject(dim));
        }
        self.allocations.insert(
            container_id.to_string(),
            Allocation {
                container_id: container_id.to_string(),
                host: host.to_string(),
                class_name: class_name.to_string(),
                state: AllocationState::Requested,
                started_at: None,
                finished_at: None,
            },
        );
        Ok(Admission::Accept(container_id.to_string()))
    }

    pub fn start_container(&mut self, container_id: &str, now: SimTime) -> Result<(), RmError> {
        let alloc = self.transition(container_id, AllocationState::Requested)?;
        alloc.state = AllocationState::Running;
        alloc.started_at = Some(now);
        Ok(())
    }

    pub fn finish_container(&mut self, container_id: &str, now: SimTime) -> Result<(), RmError> {
        let alloc = self.transition(container_id, AllocationState::Running)?;
        alloc.state = AllocationState::Finished;
        alloc.finished_at = Some(now);
        Ok(())
    }

    /// Rate class of a Running container.
    pub fn registry_lookup(&self, container_id: &str) -> Option<RegistryEntry> {
        let alloc = self.allocations.get(container_id)?;
        if alloc.state != AllocationState::Running {
            return None;
        }
        let class = &self.classes[&alloc.class_name];
        Some(RegistryEntry {
            class_name: class.class_name.clone(),
            io_rate: class.spec.io_rate,
            io_burst: class.burst(),
        })
    }

    fn transition(
        &mut self,
        container_id: &str,
        expected: AllocationState,
    ) -> Result<&mut Allocation, RmError> {
        match self.allocations.get_mut(container_id) {
            Some(a) if a.state == expected => Ok(a),
            other => Err(RmError::InvalidState {
                id: container_id.to_string(),
                expected,
                actual: other.map(|a| a.state),
            }),
        }
    }
}
