//! Data plane of the simulated cluster.
//!
//! Each container runs a sequential reader that streams the blocks of one file.
//! A block is carried by a [`Pipe`]: a TCP subpipe from the container to the
//! DataNode and a disk subpipe from the DataNode to the disk that holds the
//! chosen replica. [`Cluster::advance`] moves the data plane forward by one time
//! step:
//!
//! 1. every active pipe asks for `tcp_demand * dt` bytes, capped by what is
//!    left of its block;
//! 2. the DataNode's shaper trims the request of classified pipes;
//! 3. each disk serves its pipes oldest first, every pipe taking as much of
//!    the remaining capacity as it asks for;
//! 4. an optional per-host egress cap is applied the same way;
//! 5. TCP demand adapts: additive increase when the request was served in
//!    full, multiplicative decrease when the disk or NIC cut it short, and no
//!    change when only the shaper held it back.
//!
//! New pipes open at the full rate of their disk, since on a LAN slow start
//! completes well within one step.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scenario::{ScenarioConfig, ScenarioError};
use crate::shaper::{PipeKey, Shaper};
use crate::time::SimTime;

pub const DATANODE_PORT: u16 = 50010;
pub const FIRST_EPHEMERAL_PORT: u16 = 32768;

/// Remainders below this many bytes count as a fully delivered block.
const BYTE_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("no such file {0:?}")]
    NoSuchFile(String),
    #[error("no such block {0:?}")]
    NoSuchBlock(String),
    #[error("no such host {0:?}")]
    NoSuchHost(String),
    #[error("container {0:?} is not running")]
    ContainerNotRunning(String),
    #[error("container {0:?} is already running")]
    ContainerRunning(String),
    #[error("host {0:?} has no free ports")]
    PortsExhausted(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disk {
    pub disk_id: String,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub host: String,
    pub vcores: u32,
    pub memory: u64,
    pub disks: Vec<Disk>,
    pub runs_datanode: bool,
    pub runs_nodemanager: bool,
    pub nic_capacity: Option<f64>,
}

impl Machine {
    pub fn disk(&self, disk_id: &str) -> Option<&Disk> {
        self.disks.iter().find(|d| d.disk_id == disk_id)
    }

    pub fn io_capacity(&self) -> f64 {
        self.disks.iter().map(|d| d.capacity).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaLocation {
    pub host: String,
    pub disk_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub block_id: String,
    pub size: u64,
    pub replicas: Vec<ReplicaLocation>,
}

/// NameNode view: file to ordered blocks.
#[derive(Debug, Clone, Default)]
pub struct BlockMap {
    files: BTreeMap<String, Vec<BlockInfo>>,
    index: BTreeMap<String, (String, usize)>,
}

impl BlockMap {
    pub fn insert_file(&mut self, name: &str, blocks: Vec<BlockInfo>) {
        for (i, b) in blocks.iter().enumerate() {
            self.index.insert(b.block_id.clone(), (name.to_string(), i));
        }
        self.files.insert(name.to_string(), blocks);
    }

    pub fn locate_blocks(&self, file: &str) -> Result<&[BlockInfo], ClusterError> {
        self.files
            .get(file)
            .map(Vec::as_slice)
            .ok_or_else(|| ClusterError::NoSuchFile(file.to_string()))
    }

    pub fn block(&self, block_id: &str) -> Option<&BlockInfo> {
        let (file, i) = self.index.get(block_id)?;
        self.files.get(file).map(|bs| &bs[*i])
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PipeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipeState {
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipe {
    pub id: PipeId,
    pub key: PipeKey,
    pub container_id: String,
    pub block_id: String,
    pub dn_host: String,
    pub disk_id: String,
    pub start_time: SimTime,
    pub end_time: Option<SimTime>,
    pub state: PipeState,
    /// Current TCP sending rate, bytes per second.
    pub tcp_demand: f64,
    pub bytes_delivered: f64,
    pub block_size: u64,
}

impl Pipe {
    pub fn remaining(&self) -> f64 {
        (self.block_size as f64 - self.bytes_delivered).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionRecord {
    pub key: PipeKey,
    pub container_id: String,
    pub observed_since: SimTime,
}

#[derive(Debug, Clone)]
struct Reader {
    host: String,
    file: String,
    next_block: usize,
    pipe: Option<PipeId>,
    running: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AimdParams {
    pub increase: f64,
    pub beta: f64,
}

impl Default for AimdParams {
    fn default() -> Self {
        AimdParams {
            increase: 5_000_000.0,
            beta: 0.5,
        }
    }
}

/// Outcome of one pipe over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PipeStep {
    pub pipe: PipeId,
    pub key: PipeKey,
    pub dn_host: String,
    pub disk_id: String,
    pub requested: f64,
    pub shaped: f64,
    pub delivered: f64,
    pub classified: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub now: SimTime,
    pub dt: SimTime,
    /// Oldest pipe first.
    pub pipes: Vec<PipeStep>,
    pub closed: Vec<PipeId>,
    pub opened: Vec<PipeId>,
    /// Containers that delivered the last byte of their file this step.
    pub completed: Vec<String>,
    /// Bytes served per (host, disk) this step.
    pub disk_bytes: BTreeMap<(String, String), f64>,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    machines: BTreeMap<String, Machine>,
    blocks: BlockMap,
    readers: BTreeMap<String, Reader>,
    pipes: BTreeMap<PipeId, Pipe>,
    next_pipe: u64,
    next_port: BTreeMap<String, u32>,
    shapers: BTreeMap<String, Shaper>,
    aimd: AimdParams,
    now: SimTime,
}

impl Cluster {
    pub fn build(scenario: &ScenarioConfig) -> Result<Cluster, ScenarioError> {
        scenario.validate()?;
        let machines: BTreeMap<String, Machine> = scenario
            .machines
            .iter()
            .map(|m| {
                (
                    m.host.clone(),
                    Machine {
                        host: m.host.clone(),
                        vcores: m.vcores,
                        memory: m.memory,
                        disks: m
                            .disks
                            .iter()
                            .map(|d| Disk {
                                disk_id: d.disk_id.clone(),
                                capacity: d.capacity as f64,
                            })
                            .collect(),
                        runs_datanode: m.runs_datanode,
                        runs_nodemanager: m.runs_nodemanager,
                        nic_capacity: m.nic_capacity.map(|c| c as f64),
                    },
                )
            })
            .collect();
        let mut blocks = BlockMap::default();
        for f in &scenario.files {
            blocks.insert_file(
                &f.name,
                f.blocks
                    .iter()
                    .map(|b| BlockInfo {
                        block_id: b.block_id.clone(),
                        size: b.size,
                        replicas: b
                            .replicas
                            .iter()
                            .map(|r| ReplicaLocation {
                                host: r.host.clone(),
                                disk_id: r.disk_id.clone(),
                            })
                            .collect(),
                    })
                    .collect(),
            );
        }
        let shapers = machines
            .values()
            .filter(|m| m.runs_datanode)
            .map(|m| {
                (
                    m.host.clone(),
                    Shaper::new(scenario.parameters.overhead_factor),
                )
            })
            .collect();
        Ok(Cluster {
            machines,
            blocks,
            readers: BTreeMap::new(),
            pipes: BTreeMap::new(),
            next_pipe: 1,
            next_port: BTreeMap::new(),
            shapers,
            aimd: AimdParams {
                increase: scenario.parameters.aimd_increase,
                beta: scenario.parameters.aimd_beta,
            },
            now: SimTime::ZERO,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn machines(&self) -> impl Iterator<Item = &Machine> {
        self.machines.values()
    }

    pub fn machine(&self, host: &str) -> Option<&Machine> {
        self.machines.get(host)
    }

    pub fn block_map(&self) -> &BlockMap {
        &self.blocks
    }

    pub fn locate_blocks(&self, file: &str) -> Result<&[BlockInfo], ClusterError> {
        self.blocks.locate_blocks(file)
    }

    pub fn shaper(&self, dn_host: &str) -> Option<&Shaper> {
        self.shapers.get(dn_host)
    }

    pub fn shaper_mut(&mut self, dn_host: &str) -> Option<&mut Shaper> {
        self.shapers.get_mut(dn_host)
    }

    pub fn pipe(&self, id: PipeId) -> Option<&Pipe> {
        self.pipes.get(&id)
    }

    pub fn pipes(&self) -> impl Iterator<Item = &Pipe> {
        self.pipes.values()
    }

    pub fn active_pipes(&self) -> impl Iterator<Item = &Pipe> {
        self.pipes.values().filter(|p| p.state == PipeState::Active)
    }

    pub fn is_running(&self, container_id: &str) -> bool {
        self.readers.get(container_id).is_some_and(|r| r.running)
    }

    /// Starts the reader of `container_id` and opens the pipe for the first
    /// block of `file`.
    pub fn start_container(
        &mut self,
        container_id: &str,
        host: &str,
        file: &str,
        now: SimTime,
    ) -> Result<PipeId, ClusterError> {
        if !self.machines.contains_key(host) {
            return Err(ClusterError::NoSuchHost(host.to_string()));
        }
        let first = self
            .blocks
            .locate_blocks(file)?
            .first()
            .map(|b| b.block_id.clone())
            .ok_or_else(|| ClusterError::NoSuchFile(file.to_string()))?;
        if self.is_running(container_id) {
            return Err(ClusterError::ContainerRunning(container_id.to_string()));
        }
        self.readers.insert(
            container_id.to_string(),
            Reader {
                host: host.to_string(),
                file: file.to_string(),
                next_block: 1,
                pipe: None,
                running: true,
            },
        );
        let id = self.open_pipe(container_id, &first, now)?;
        Ok(id)
    }

    /// Stops the reader and closes its pipe, if any.
    pub fn stop_container(&mut self, container_id: &str, now: SimTime) -> Result<(), ClusterError> {
        let reader = self
            .readers
            .get_mut(container_id)
            .filter(|r| r.running)
            .ok_or_else(|| ClusterError::ContainerNotRunning(container_id.to_string()))?;
        reader.running = false;
        if let Some(id) = reader.pipe.take() {
            let pipe = self.pipes.get_mut(&id).expect("reader pipe exists");
            pipe.state = PipeState::Closed;
            pipe.end_time = Some(now);
        }
        Ok(())
    }

    /// Opens a pipe for `block_id` from a running container. The local replica
    /// is preferred, otherwise the first listed one.
    pub fn open_pipe(
        &mut self,
        container_id: &str,
        block_id: &str,
        now: SimTime,
    ) -> Result<PipeId, ClusterError> {
        let host = match self.readers.get(container_id) {
            Some(r) if r.running => r.host.clone(),
            _ => return Err(ClusterError::ContainerNotRunning(container_id.to_string())),
        };
        let block = self
            .blocks
            .block(block_id)
            .ok_or_else(|| ClusterError::NoSuchBlock(block_id.to_string()))?;
        let replica = block
            .replicas
            .iter()
            .find(|r| r.host == host)
            .or_else(|| block.replicas.first())
            .ok_or_else(|| ClusterError::NoSuchBlock(block_id.to_string()))?
            .clone();
        let block_size = block.size;

        let port = self
            .next_port
            .entry(host.clone())
            .or_insert(FIRST_EPHEMERAL_PORT as u32);
        if *port > u16::MAX as u32 {
            return Err(ClusterError::PortsExhausted(host));
        }
        let src_port = *port as u16;
        *port += 1;

        let dn = &self.machines[&replica.host];
        let disk_cap = dn.disk(&replica.disk_id).expect("validated").capacity;
        let initial = dn.nic_capacity.map_or(disk_cap, |nic| nic.min(disk_cap));

        let id = PipeId(self.next_pipe);
        self.next_pipe += 1;
        self.pipes.insert(
            id,
            Pipe {
                id,
                key: PipeKey::new(&host, src_port, &replica.host, DATANODE_PORT),
                container_id: container_id.to_string(),
                block_id: block_id.to_string(),
                dn_host: replica.host.clone(),
                disk_id: replica.disk_id.clone(),
                start_time: now,
                end_time: None,
                state: PipeState::Active,
                tcp_demand: initial,
                bytes_delivered: 0.0,
                block_size,
            },
        );
        self.readers.get_mut(container_id).expect("checked").pipe = Some(id);
        Ok(id)
    }

    /// Active pipes originating at `host`, sorted by key rendering.
    pub fn connection_table(&self, host: &str) -> Result<Vec<ConnectionRecord>, ClusterError> {
        if !self.machines.contains_key(host) {
            return Err(ClusterError::NoSuchHost(host.to_string()));
        }
        let mut out: Vec<ConnectionRecord> = self
            .active_pipes()
            .filter(|p| p.key.src_host == host)
            .map(|p| ConnectionRecord {
                key: p.key.clone(),
                container_id: p.container_id.clone(),
                observed_since: p.start_time,
            })
            .collect();
        out.sort_by_key(|r| r.key.render());
        Ok(out)
    }

    /// Active pipes in disk service order: start time, then key rendering.
    fn seniority_order(&self) -> Vec<PipeId> {
        let mut ids: Vec<(SimTime, String, PipeId)> = self
            .active_pipes()
            .map(|p| (p.start_time, p.key.render(), p.id))
            .collect();
        ids.sort();
        ids.into_iter().map(|(_, _, id)| id).collect()
    }

    /// Advances the data plane from `now - dt` to `now`.
    pub fn advance(&mut self, dt: SimTime, now: SimTime) -> StepReport {
        assert!(dt > SimTime::ZERO, "dt must be positive");
        let step_start = now.saturating_sub(dt);
        let order = self.seniority_order();
        let mut report = StepReport {
            now,
            dt,
            ..Default::default()
        };

        let mut disk_left: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut nic_left: BTreeMap<String, f64> = BTreeMap::new();
        for m in self.machines.values() {
            for d in &m.disks {
                disk_left.insert(
                    (m.host.clone(), d.disk_id.clone()),
                    d.capacity * dt.as_secs_f64(),
                );
            }
            if let Some(nic) = m.nic_capacity {
                nic_left.insert(m.host.clone(), nic * dt.as_secs_f64());
            }
        }

        for id in order {
            let pipe = self.pipes.get_mut(&id).expect("active pipe");
            let active_secs = (now - pipe.start_time.max(step_start)).as_secs_f64();
            let requested = (pipe.tcp_demand * active_secs).min(pipe.remaining());

            let shaper = self
                .shapers
                .get_mut(&pipe.dn_host)
                .expect("DataNode has a shaper");
            let (shaped, classified) = shaper.grant_pipe(&pipe.key, requested, now);

            let disk_key = (pipe.dn_host.clone(), pipe.disk_id.clone());
            let left = disk_left.get_mut(&disk_key).expect("validated disk");
            let mut delivered = shaped.min(*left);
            *left -= delivered;
            if let Some(nic) = nic_left.get_mut(&pipe.dn_host) {
                // Disk bytes that the NIC cannot carry stay unread.
                let carried = delivered.min(*nic);
                *left += delivered - carried;
                *nic -= carried;
                delivered = carried;
            }

            if delivered >= requested - BYTE_EPSILON {
                pipe.tcp_demand += self.aimd.increase * active_secs;
            } else if delivered < shaped - BYTE_EPSILON {
                pipe.tcp_demand *= self.aimd.beta;
            }

            pipe.bytes_delivered += delivered;
            *report.disk_bytes.entry(disk_key).or_insert(0.0) += delivered;
            if pipe.remaining() <= BYTE_EPSILON {
                pipe.bytes_delivered = pipe.block_size as f64;
                pipe.state = PipeState::Closed;
                pipe.end_time = Some(now);
                report.closed.push(id);
            }
            report.pipes.push(PipeStep {
                pipe: id,
                key: pipe.key.clone(),
                dn_host: pipe.dn_host.clone(),
                disk_id: pipe.disk_id.clone(),
                requested,
                shaped,
                delivered,
                classified,
            });
        }

        for id in report.closed.clone() {
            let container = self.pipes[&id].container_id.clone();
            let reader = self.readers.get_mut(&container).expect("pipe has a reader");
            reader.pipe = None;
            let file = reader.file.clone();
            let next = reader.next_block;
            let blocks = self.blocks.locate_blocks(&file).expect("validated file");
            match blocks.get(next).map(|b| b.block_id.clone()) {
                Some(block_id) => {
                    self.readers.get_mut(&container).expect("exists").next_block += 1;
                    let opened = self
                        .open_pipe(&container, &block_id, now)
                        .expect("reader is running");
                    report.opened.push(opened);
                }
                None => report.completed.push(container),
            }
        }
        self.now = now;
        report
    }
}
