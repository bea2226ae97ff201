#![allow(dead_code)]

pub mod cases;
pub mod coord_model;

use std::collections::BTreeMap;
use std::path::PathBuf;

use piperate_core::harness::Simulation;
use piperate_core::resource_manager::{ContainerClass, ResourceSpec};
use piperate_core::scenario::{
    BlockConfig, ContainerRequest, DiskConfig, FileConfig, MachineConfig, Parameters,
    ReplicaConfig, ScenarioConfig,
};
use piperate_core::shaper::PipeKey;
use rand::Rng;

pub const MB: u64 = 1_000_000;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn s1(shaping: bool) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::load(&scenario_path("s1.json")).expect("s1 loads");
    cfg.shaping_enabled = shaping;
    cfg
}

/// Cumulative bytes a fluid token bucket (starting full) grants to a constant
/// demand of `demand` bytes/s by time `t`.
pub fn fluid_cumulative(rate: f64, burst: f64, demand: f64, t: f64) -> f64 {
    if demand <= rate {
        demand * t
    } else {
        (demand * t).min(burst + rate * t)
    }
}

/// Largest total granted inside any window `[times[i], times[j]]`, minus the
/// allowance `burst + rate * (times[j] - times[i])`. Non-positive means the
/// bound holds everywhere.
pub fn worst_window_excess(times: &[f64], grants: &[f64], rate: f64, burst: f64) -> f64 {
    let mut prefix = vec![0.0];
    for g in grants {
        prefix.push(prefix.last().unwrap() + g);
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..times.len() {
        for j in i..times.len() {
            let granted = prefix[j + 1] - prefix[i];
            worst = worst.max(granted - (burst + rate * (times[j] - times[i])));
        }
    }
    worst
}

/// Random cluster with at most two DataNodes and five containers. Some files
/// span several small blocks so pipes open and close during the run.
pub fn random_scenario(rng: &mut impl Rng) -> ScenarioConfig {
    let n_dn = rng.gen_range(1..=2);
    let n_nm_only = rng.gen_range(0..=2);
    let mut machines = Vec::new();
    for i in 0..n_dn {
        machines.push(MachineConfig {
            host: format!("dn{i}"),
            vcores: 8,
            memory: 16 << 30,
            disks: (0..rng.gen_range(1..=2))
                .map(|d| DiskConfig {
                    disk_id: format!("d{d}"),
                    capacity: rng.gen_range(50..=150) * MB,
                })
                .collect(),
            runs_datanode: true,
            runs_nodemanager: rng.gen_bool(0.6),
            nic_capacity: rng.gen_bool(0.3).then(|| rng.gen_range(60..=120) * MB),
        });
    }
    for i in 0..n_nm_only {
        machines.push(MachineConfig {
            host: format!("nm{i}"),
            vcores: 8,
            memory: 16 << 30,
            disks: vec![DiskConfig {
                disk_id: "d0".into(),
                capacity: 100 * MB,
            }],
            runs_datanode: false,
            runs_nodemanager: true,
            nic_capacity: None,
        });
    }
    if !machines.iter().any(|m| m.runs_nodemanager) {
        machines[0].runs_nodemanager = true;
    }
    let dn_disks: Vec<(String, String)> = machines
        .iter()
        .filter(|m| m.runs_datanode)
        .flat_map(|m| m.disks.iter().map(|d| (m.host.clone(), d.disk_id.clone())))
        .collect();
    let nm_hosts: Vec<String> = machines
        .iter()
        .filter(|m| m.runs_nodemanager)
        .map(|m| m.host.clone())
        .collect();

    let n_containers = rng.gen_range(1..=5);
    let mut files = Vec::new();
    let mut block_no = 0;
    for f in 0..n_containers {
        let blocks = (0..rng.gen_range(1..=3))
            .map(|_| {
                block_no += 1;
                let (host, disk_id) = dn_disks[rng.gen_range(0..dn_disks.len())].clone();
                BlockConfig {
                    block_id: format!("blk_{block_no}"),
                    size: rng.gen_range(20..=400) * MB,
                    replicas: vec![ReplicaConfig { host, disk_id }],
                }
            })
            .collect();
        files.push(FileConfig {
            name: format!("f{f}"),
            blocks,
        });
    }
    let container_classes = vec![
        class("gold", 40 * MB),
        class("silver", 20 * MB),
        class("free", 0),
    ];
    let names = ["gold", "silver", "free"];
    let container_requests = (0..n_containers)
        .map(|i| ContainerRequest {
            container_id: format!("c{i}"),
            class_name: names[rng.gen_range(0..names.len())].to_string(),
            host: nm_hosts[rng.gen_range(0..nm_hosts.len())].clone(),
            start_time: rng.gen_range(0..150) as f64 / 10.0,
            file: format!("f{i}"),
        })
        .collect();
    ScenarioConfig {
        name: "random".into(),
        machines,
        files,
        container_classes,
        container_requests,
        shaping_enabled: true,
        parameters: Parameters {
            sim_duration: 40.0,
            poll_interval: [0.5, 1.0][rng.gen_range(0..2)],
            ..Parameters::default()
        },
    }
}

fn class(name: &str, io_rate: u64) -> ContainerClass {
    ContainerClass {
        class_name: name.into(),
        spec: ResourceSpec {
            vcores: 1,
            memory: 1 << 30,
            io_rate,
        },
        io_burst: None,
    }
}

/// Per-pipe `(rate, burst)` the DataNode should enforce given the live pipes
/// and their containers' classes.
pub fn expected_rules(sim: &Simulation, dn: &str) -> BTreeMap<PipeKey, (u64, u64)> {
    sim.cluster()
        .active_pipes()
        .filter(|p| p.dn_host == dn)
        .filter_map(|p| {
            let e = sim.resource_manager().registry_lookup(&p.container_id)?;
            (e.io_rate > 0).then(|| (p.key.clone(), (e.io_rate, e.io_burst.max(1))))
        })
        .collect()
}

/// Per-pipe `(rate, burst)` actually programmed into the DataNode's shaper,
/// read back through its exact-match filters.
pub fn installed_rules(sim: &Simulation, dn: &str) -> BTreeMap<PipeKey, (u64, u64)> {
    let shaper = sim.cluster().shaper(dn).expect("DataNode has a shaper");
    shaper
        .filters()
        .iter()
        .map(|f| {
            let pat = &f.pattern;
            let key = PipeKey::new(
                pat.src_host.as_deref().expect("exact filter"),
                pat.src_port.expect("exact filter"),
                pat.dst_host.as_deref().expect("exact filter"),
                pat.dst_port.expect("exact filter"),
            );
            let bucket = shaper.class(f.class_id).expect("filter points at a class");
            (key, (bucket.rate() as u64, bucket.burst() as u64))
        })
        .collect()
}
