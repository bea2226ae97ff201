//! Discrete-event driver that wires the data plane, the resource manager, the
//! coordination store and the control agents together.
//!
//! Events sharing a timestamp run in a fixed order: monitor ticks, then watch
//! deliveries, then the data-plane step, then container arrivals. A pipe
//! opened at time `t` is therefore first seen by the tick after `t`.

use std::collections::BTreeMap;

use log::{debug, warn};

use crate::control_agents::{Collector, ConnectionMonitor, Executor, Submitter};
use crate::coordstore::{SessionId, Store, WatchEvent};
use crate::harness::record::{Recorder, Rejection};
use crate::resource_manager::{Admission, ResourceManager, ResourceSpec};
use crate::scenario::{ScenarioConfig, ScenarioError};
use crate::simcluster::{Cluster, PipeId};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    MonitorTick(String),
    Watch(WatchEvent),
    Step,
    Arrival(usize),
}

impl Event {
    fn rank(&self) -> u8 {
        match self {
            Event::MonitorTick(_) => 0,
            Event::Watch(_) => 1,
            Event::Step => 2,
            Event::Arrival(_) => 3,
        }
    }
}

struct NodeManagerAgents {
    monitor: ConnectionMonitor,
    submitter: Submitter,
}

struct DataNodeAgents {
    collector: Collector,
    executor: Executor,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    cluster: Cluster,
    rm: ResourceManager,
    store: Store,
    nodemanagers: BTreeMap<String, NodeManagerAgents>,
    datanodes: BTreeMap<String, DataNodeAgents>,
    queue: BTreeMap<(SimTime, u8, u64), Event>,
    next_seq: u64,
    now: SimTime,
    end: SimTime,
    dt: SimTime,
    poll: SimTime,
    recorder: Recorder,
    last_connection_change: SimTime,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Simulation, ScenarioError> {
        let cluster = Cluster::build(&cfg)?;
        let hosts = cluster
            .machines()
            .filter(|m| m.runs_nodemanager)
            .map(|m| {
                (
                    m.host.clone(),
                    ResourceSpec {
                        vcores: m.vcores,
                        memory: m.memory,
                        io_rate: m.disks.iter().map(|d| d.capacity as u64).sum(),
                    },
                )
            })
            .collect::<Vec<_>>();
        let rm = ResourceManager::new(cfg.container_classes.iter().cloned(), hosts);
        let p = &cfg.parameters;
        let mut sim = Simulation {
            cluster,
            rm,
            store: Store::new(p.watch_latency_time()),
            nodemanagers: BTreeMap::new(),
            datanodes: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_seq: 0,
            now: SimTime::ZERO,
            end: p.duration_time(),
            dt: p.dt_time(),
            poll: p.poll_time(),
            recorder: Recorder::new(p.dt_time()),
            last_connection_change: SimTime::ZERO,
            cfg,
        };
        sim.bootstrap();
        Ok(sim)
    }

    fn bootstrap(&mut self) {
        if self.cfg.shaping_enabled {
            let dn_hosts: Vec<String> = self
                .cluster
                .machines()
                .filter(|m| m.runs_datanode)
                .map(|m| m.host.clone())
                .collect();
            for host in dn_hosts {
                let session = self.store.open_session();
                let mut collector = Collector::new(&host, session);
                let events = collector
                    .register(&mut self.store)
                    .expect("fresh store accepts registration");
                debug_assert!(events.is_empty());
                self.datanodes.insert(
                    host,
                    DataNodeAgents {
                        collector,
                        executor: Executor::new(),
                    },
                );
            }
            let nm_hosts: Vec<String> = self
                .cluster
                .machines()
                .filter(|m| m.runs_nodemanager)
                .map(|m| m.host.clone())
                .collect();
            for host in nm_hosts {
                let session = self.store.open_session();
                self.nodemanagers.insert(
                    host.clone(),
                    NodeManagerAgents {
                        monitor: ConnectionMonitor::new(&host),
                        submitter: Submitter::new(&host, session),
                    },
                );
                self.schedule(SimTime::ZERO, Event::MonitorTick(host));
            }
            self.flush_store_events();
        }
        for i in 0..self.cfg.container_requests.len() {
            let at = SimTime::from_secs_f64(self.cfg.container_requests[i].start_time);
            self.schedule(at, Event::Arrival(i));
        }
        let dt = self.dt;
        self.schedule(dt, Event::Step);
    }

    fn schedule(&mut self, at: SimTime, ev: Event) {
        if at > self.end {
            return;
        }
        self.queue.insert((at, ev.rank(), self.next_seq), ev);
        self.next_seq += 1;
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn resource_manager(&self) -> &ResourceManager {
        &self.rm
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn collector(&self, dn_host: &str) -> Option<&Collector> {
        self.datanodes.get(dn_host).map(|d| &d.collector)
    }

    pub fn executor(&self, dn_host: &str) -> Option<&Executor> {
        self.datanodes.get(dn_host).map(|d| &d.executor)
    }

    /// Time of the most recent pipe open or close.
    pub fn last_connection_change(&self) -> SimTime {
        self.last_connection_change
    }

    /// Simulates a NodeManager crash: its store session closes and the
    /// ephemeral documents it published disappear.
    pub fn crash_nodemanager_session(&mut self, host: &str) -> Option<SessionId> {
        let agents = self.nodemanagers.get(host)?;
        let session = agents.submitter.session();
        self.store.set_time(self.now);
        self.store.close_session(session).ok()?;
        self.flush_store_events();
        Some(session)
    }

    pub fn run(&mut self) {
        self.run_until(self.end);
    }

    /// Processes every event with timestamp `<= until`.
    pub fn run_until(&mut self, until: SimTime) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > until {
                break;
            }
            let ((at, _, _), ev) = entry.remove_entry();
            self.now = at;
            self.store.set_time(at);
            match ev {
                Event::MonitorTick(host) => self.on_monitor_tick(&host),
                Event::Watch(we) => self.on_watch(we),
                Event::Step => self.on_step(),
                Event::Arrival(i) => self.on_arrival(i),
            }
        }
        if until > self.now && until <= self.end {
            self.now = until;
        }
    }

    pub fn is_finished(&self) -> bool {
        self.queue.is_empty()
    }

    fn flush_store_events(&mut self) {
        for ev in self.store.drain_events() {
            let at = ev.delivery_time;
            self.schedule(at, Event::Watch(ev));
        }
    }

    fn on_arrival(&mut self, i: usize) {
        let req = self.cfg.container_requests[i].clone();
        match self
            .rm
            .admit_named(&req.container_id, &req.class_name, &req.host)
        {
            Ok(Admission::Accept(id)) => {
                self.rm
                    .start_container(&id, self.now)
                    .expect("just admitted");
                match self
                    .cluster
                    .start_container(&id, &req.host, &req.file, self.now)
                {
                    Ok(pipe) => {
                        self.recorder.container_started(&id, self.now);
                        self.record_open(pipe);
                    }
                    Err(e) => warn!("container {id} failed to start: {e}"),
                }
            }
            Ok(Admission::Reject(dim)) => {
                debug!("container {} rejected on {}", req.container_id, dim);
                self.recorder.rejections.push(Rejection {
                    container_id: req.container_id,
                    host: req.host,
                    dimension: dim,
                    at: self.now,
                });
            }
            Err(e) => warn!("admission error for {}: {e}", req.container_id),
        }
    }

    fn record_open(&mut self, id: PipeId) {
        let pipe = self.cluster.pipe(id).expect("opened").clone();
        let class_rate = self
            .rm
            .registry_lookup(&pipe.container_id)
            .map(|e| e.io_rate)
            .filter(|r| *r > 0);
        self.recorder.pipe_opened(&pipe, class_rate);
        self.last_connection_change = self.now;
    }

    fn on_step(&mut self) {
        let report = self.cluster.advance(self.dt, self.now);
        self.recorder.step(&report);
        for id in &report.closed {
            self.recorder.pipe_closed(*id, self.now);
            self.last_connection_change = self.now;
        }
        for id in report.opened.clone() {
            self.record_open(id);
        }
        for c in &report.completed {
            self.cluster
                .stop_container(c, self.now)
                .expect("completed reader is running");
            self.rm
                .finish_container(c, self.now)
                .expect("completed container is running");
            self.recorder.container_finished(c, self.now);
        }
        let next = self.now + self.dt;
        self.schedule(next, Event::Step);
    }

    fn on_monitor_tick(&mut self, host: &str) {
        let table = self
            .cluster
            .connection_table(host)
            .expect("NodeManager host exists");
        for rec in &table {
            self.recorder.pipe_seen(&rec.key, self.now);
        }
        let rm = &self.rm;
        let agents = self.nodemanagers.get_mut(host).expect("NodeManager agents");
        let docs = agents.monitor.tick(&table, |id| rm.registry_lookup(id));
        for doc in docs.values() {
            for s in doc.settings.iter() {
                self.recorder.pipe_detected(&s.key, self.now);
            }
        }
        match agents.submitter.submit(&mut self.store, docs.values()) {
            Ok(writes) => {
                for w in writes {
                    for s in docs[&w.dn_id].settings.iter() {
                        self.recorder.pipe_written(&s.key, self.now);
                    }
                }
            }
            Err(e) => {
                warn!("{host}: submit failed: {e}");
                self.recorder.store_errors += 1;
            }
        }
        self.flush_store_events();
        let next = self.now + self.poll;
        self.schedule(next, Event::MonitorTick(host.to_string()));
    }

    fn on_watch(&mut self, ev: WatchEvent) {
        let Some(dn) = self
            .datanodes
            .iter()
            .find(|(_, a)| a.collector.session() == ev.session)
            .map(|(h, _)| h.clone())
        else {
            return;
        };
        let agents = self.datanodes.get_mut(&dn).expect("found");
        match agents.collector.on_event(&mut self.store, &ev) {
            Ok(events) => {
                let shaper = self.cluster.shaper_mut(&dn).expect("DataNode shaper");
                let touched = agents.executor.execute(shaper, &events, self.now);
                for key in touched {
                    self.recorder.pipe_controlled(&key, self.now);
                }
            }
            Err(e) => {
                warn!("{dn}: collector failed: {e}");
                self.recorder.store_errors += 1;
            }
        }
        self.flush_store_events();
    }
}
