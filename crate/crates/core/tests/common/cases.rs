//! Seed-driven randomized checks shared by the property tests and the
//! acceptance run. Each returns `Err` with a description of the first
//! violated property.

use std::collections::BTreeMap;

use piperate_core::control_agents::{diff, RateSetting, SettingSet, TrafficEventKind};
use piperate_core::resource_manager::{Admission, ContainerClass, ResourceManager, ResourceSpec};
use piperate_core::shaper::{ClassId, PipeKey, TokenBucket};
use piperate_core::simcluster::Cluster;
use piperate_core::time::SimTime;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{fluid_cumulative, random_scenario, worst_window_excess};

/// Arbitrary request pattern at irregular times: no window of requests may
/// receive more than `burst + rate * W`.
pub fn bucket_window(rng: &mut impl Rng) -> Result<(), String> {
    let rate = 10f64.powf(rng.gen_range(3.0..9.0));
    let burst = rate * rng.gen_range(0.001..2.0);
    let mut bucket = TokenBucket::new(rate, burst, SimTime::ZERO).map_err(|e| e.to_string())?;
    let mut now = 0u64;
    let (mut times, mut grants) = (Vec::new(), Vec::new());
    for _ in 0..rng.gen_range(1..=60) {
        now += rng.gen_range(0..500_000);
        let t = SimTime::from_micros(now);
        let want = burst * rng.gen_range(0.0..3.0);
        let got = bucket.take(want, t, 1.0);
        if !(0.0..=want + 1e-9).contains(&got) {
            return Err(format!("granted {got} for request {want}"));
        }
        times.push(t.as_secs_f64());
        grants.push(got);
    }
    let excess = worst_window_excess(&times, &grants, rate, burst);
    let slack = 1e-9 * (burst + rate * times.last().unwrap());
    if excess > slack {
        return Err(format!(
            "window excess {excess} (rate {rate}, burst {burst})"
        ));
    }
    Ok(())
}

/// Constant demand sampled every `dt`: cumulative grants stay within one
/// step's worth of the continuous-time closed form.
pub fn bucket_fluid(rng: &mut impl Rng) -> Result<(), String> {
    let rate = 10f64.powf(rng.gen_range(4.0..9.0));
    let dt_us = [10_000u64, 50_000, 100_000][rng.gen_range(0..3)];
    let dt = dt_us as f64 / 1e6;
    // A bucket shallower than one step's refill cannot follow the fluid model.
    let burst = rate * rng.gen_range(dt..=1.0);
    let demand = if rng.gen_bool(0.3) {
        rate * 1e6
    } else {
        rate * rng.gen_range(0.1..4.0)
    };
    let mut bucket = TokenBucket::new(rate, burst, SimTime::ZERO).map_err(|e| e.to_string())?;
    let mut total = 0.0;
    for k in 1..=rng.gen_range(1..=400u64) {
        total += bucket.take(demand * dt, SimTime::from_micros(k * dt_us), 1.0);
        let t = (k * dt_us) as f64 / 1e6;
        // The first request lands at `dt`, so the sampled run has seen `k`
        // steps of demand where the fluid one has seen exactly `t` seconds.
        let oracle = fluid_cumulative(rate, burst, demand, t);
        if (total - oracle).abs() > rate * dt * (1.0 + 1e-9) + 1e-6 {
            return Err(format!(
                "step {k}: granted {total}, fluid {oracle}, rate {rate}, burst {burst}, demand {demand}, dt {dt}"
            ));
        }
    }
    Ok(())
}

fn random_settings(rng: &mut impl Rng) -> SettingSet {
    let mut set = SettingSet::new();
    for _ in 0..rng.gen_range(0..=8) {
        let key = PipeKey::new(
            ["nm1", "nm2", "dn1"][rng.gen_range(0..3)],
            rng.gen_range(32768..32774),
            "dn1",
            50010,
        );
        set.insert(RateSetting {
            container_id: format!("c{}", rng.gen_range(1..4)),
            key,
            rate: [10, 20, 40][rng.gen_range(0..3)] * 1_000_000,
            burst: [1, 2, 4][rng.gen_range(0..3)] * 1_000_000,
        });
    }
    set
}

/// Applying `diff(old, new)` to `old` yields `new`, and identical sets diff
/// to nothing. Documents also survive serialization.
pub fn diff_roundtrip(rng: &mut impl Rng) -> Result<(), String> {
    let old = random_settings(rng);
    let new = if rng.gen_bool(0.2) {
        old.clone()
    } else {
        random_settings(rng)
    };
    let events = diff(&old, &new);
    let mut applied = old.clone();
    for e in &events {
        match e.kind {
            TrafficEventKind::RemoveRule => {
                applied
                    .remove(&e.setting.key)
                    .ok_or_else(|| format!("remove of absent {}", e.setting.key))?;
            }
            TrafficEventKind::ModifyRule => {
                applied
                    .insert(e.setting.clone())
                    .ok_or_else(|| format!("modify of absent {}", e.setting.key))?;
            }
            TrafficEventKind::AddRule => {
                if applied.insert(e.setting.clone()).is_some() {
                    return Err(format!("add of present {}", e.setting.key));
                }
            }
        }
    }
    if applied != new {
        return Err(format!("apply(old, diff) = {applied:?}, want {new:?}"));
    }
    if !diff(&new, &new).is_empty() || !diff(&old, &old).is_empty() {
        return Err("diff of a set with itself is not empty".into());
    }
    for s in [&old, &new] {
        let back = SettingSet::parse(&s.serialize()).map_err(|e| e.to_string())?;
        if back != *s {
            return Err(format!("serialization roundtrip changed {s:?}"));
        }
    }
    Ok(())
}

fn spec(vcores: u32, memory: u64, io_rate: u64) -> ResourceSpec {
    ResourceSpec {
        vcores,
        memory,
        io_rate,
    }
}

/// Random admit/start/finish sequences: usage never exceeds capacity, and
/// every decision agrees with a running tally of committed resources.
pub fn admission_safety(rng: &mut impl Rng) -> Result<(), String> {
    let classes: Vec<ContainerClass> = (0..rng.gen_range(1..=4))
        .map(|i| ContainerClass {
            class_name: format!("k{i}"),
            spec: spec(
                rng.gen_range(0..=4),
                rng.gen_range(0..=4) << 30,
                rng.gen_range(0..=4) * 25_000_000,
            ),
            io_burst: None,
        })
        .collect();
    let hosts: Vec<(String, ResourceSpec)> = (0..rng.gen_range(1..=3))
        .map(|i| {
            (
                format!("h{i}"),
                spec(
                    rng.gen_range(0..=8),
                    rng.gen_range(0..=8) << 30,
                    rng.gen_range(0..=8) * 25_000_000,
                ),
            )
        })
        .collect();
    let mut rm = ResourceManager::new(classes.clone(), hosts.clone());
    let cap: BTreeMap<String, ResourceSpec> = hosts.iter().cloned().collect();
    let mut tally: BTreeMap<String, ResourceSpec> = hosts
        .iter()
        .map(|(h, _)| (h.clone(), ResourceSpec::default()))
        .collect();
    let mut requested: Vec<(String, String, ResourceSpec)> = Vec::new();
    let mut running: Vec<(String, String, ResourceSpec)> = Vec::new();

    for step in 0..rng.gen_range(1..=200) {
        let now = SimTime::from_micros(step);
        match rng.gen_range(0..10) {
            0..=5 => {
                let class = classes.choose(rng).unwrap();
                let (host, _) = hosts.choose(rng).unwrap();
                let fits = (tally[host] + class.spec).fits_within(&cap[host]).is_ok();
                match rm
                    .admit(&class.class_name, host)
                    .map_err(|e| e.to_string())?
                {
                    Admission::Accept(id) => {
                        if !fits {
                            return Err(format!(
                                "accepted {} on {host} beyond capacity",
                                class.class_name
                            ));
                        }
                        *tally.get_mut(host).unwrap() = tally[host] + class.spec;
                        requested.push((id, host.clone(), class.spec));
                    }
                    Admission::Reject(dim) => {
                        if fits {
                            return Err(format!(
                                "rejected {} on {host} ({dim}) though it fits",
                                class.class_name
                            ));
                        }
                    }
                }
            }
            6..=7 if !requested.is_empty() => {
                let c = requested.swap_remove(rng.gen_range(0..requested.len()));
                rm.start_container(&c.0, now).map_err(|e| e.to_string())?;
                running.push(c);
            }
            _ if !running.is_empty() => {
                let (id, host, s) = running.swap_remove(rng.gen_range(0..running.len()));
                rm.finish_container(&id, now).map_err(|e| e.to_string())?;
                let t = tally.get_mut(&host).unwrap();
                *t = t.checked_sub(&s).ok_or("tally underflow")?;
            }
            _ => {}
        }
        for (host, c) in &cap {
            let used = rm.used(host);
            if used.fits_within(c).is_err() {
                return Err(format!("{host} oversubscribed: {used:?} > {c:?}"));
            }
            if used != tally[host] {
                return Err(format!("{host} used {used:?}, tally {:?}", tally[host]));
            }
        }
    }
    Ok(())
}

/// A request exactly equal to the remaining capacity is accepted, and one
/// unit more on any dimension is rejected on that dimension.
pub fn admission_boundary(rng: &mut impl Rng) -> Result<(), String> {
    let unit = spec(
        rng.gen_range(1..=4),
        rng.gen_range(1..=4) << 30,
        rng.gen_range(1..=4) * 10_000_000,
    );
    let k = rng.gen_range(1..=4u32);
    let cap = spec(
        unit.vcores * k,
        unit.memory * k as u64,
        unit.io_rate * k as u64,
    );
    let class = |name: &str, s: ResourceSpec| ContainerClass {
        class_name: name.into(),
        spec: s,
        io_burst: None,
    };
    let mut rm = ResourceManager::new(
        [
            class("unit", unit),
            class("whole", cap),
            class("v+", spec(cap.vcores + 1, cap.memory, cap.io_rate)),
            class("m+", spec(cap.vcores, cap.memory + 1, cap.io_rate)),
            class("io+", spec(cap.vcores, cap.memory, cap.io_rate + 1)),
        ],
        [("h".to_string(), cap)],
    );
    for (name, dim) in [("v+", "vcores"), ("m+", "memory"), ("io+", "io_rate")] {
        match rm.admit(name, "h").map_err(|e| e.to_string())? {
            Admission::Reject(d) if d.to_string() == dim => {}
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    match rm.admit("whole", "h").map_err(|e| e.to_string())? {
        Admission::Accept(_) => {}
        other => return Err(format!("whole-host request: {other:?}")),
    }
    let mut rm = ResourceManager::new([class("unit", unit)], [("h".to_string(), cap)]);
    for i in 0..k {
        if !matches!(
            rm.admit("unit", "h").map_err(|e| e.to_string())?,
            Admission::Accept(_)
        ) {
            return Err(format!("unit {i} of {k} rejected"));
        }
    }
    if rm.available("h") != Some(ResourceSpec::default()) {
        return Err("capacity not exactly consumed".into());
    }
    if matches!(
        rm.admit("unit", "h").map_err(|e| e.to_string())?,
        Admission::Accept(_)
    ) {
        return Err("accepted beyond capacity".into());
    }
    Ok(())
}

/// Data-plane conservation: per step, each pipe gets no more than it asked
/// for or the shaper allowed, disks and NICs serve no more than capacity,
/// and no pipe reads past its block.
pub fn cluster_conservation(rng: &mut impl Rng) -> Result<(), String> {
    let cfg = random_scenario(rng);
    let mut cluster = Cluster::build(&cfg).map_err(|e| e.to_string())?;
    let dt = cfg.parameters.dt_time();
    let dt_s = dt.as_secs_f64();
    for r in &cfg.container_requests {
        cluster
            .start_container(&r.container_id, &r.host, &r.file, SimTime::ZERO)
            .map_err(|e| e.to_string())?;
    }
    let mut next_class = 1;
    let mut now = SimTime::ZERO;
    for _ in 0..rng.gen_range(10..=300) {
        now += dt;
        if rng.gen_bool(0.1) {
            let pipes: Vec<(String, PipeKey)> = cluster
                .active_pipes()
                .map(|p| (p.dn_host.clone(), p.key.clone()))
                .collect();
            if let Some((dn, key)) = pipes.choose(rng).cloned() {
                let sh = cluster.shaper_mut(&dn).unwrap();
                if matches!(
                    sh.classify(&key),
                    piperate_core::shaper::Classification::Unclassified
                ) {
                    let id = ClassId(next_class);
                    next_class += 1;
                    let rate = rng.gen_range(1..=60) as f64 * 1e6;
                    sh.configure_class(id, rate, rate / 10.0, now)
                        .map_err(|e| e.to_string())?;
                    sh.add_filter(key.exact(), id, 10)
                        .map_err(|e| e.to_string())?;
                }
            }
        }
        let report = cluster.advance(dt, now);
        for s in &report.pipes {
            let eps = 1e-6 * (1.0 + s.requested);
            if s.delivered < -eps || s.delivered > s.shaped + eps || s.shaped > s.requested + eps {
                return Err(format!(
                    "{}: requested {} shaped {} delivered {}",
                    s.key, s.requested, s.shaped, s.delivered
                ));
            }
        }
        for ((host, disk), bytes) in &report.disk_bytes {
            let capacity = cluster.machine(host).unwrap().disk(disk).unwrap().capacity;
            if *bytes > capacity * dt_s * (1.0 + 1e-9) {
                return Err(format!("{host}/{disk} served {bytes} in one step"));
            }
        }
        let mut egress: BTreeMap<&str, f64> = BTreeMap::new();
        for s in &report.pipes {
            *egress.entry(s.dn_host.as_str()).or_default() += s.delivered;
        }
        for (host, bytes) in egress {
            if let Some(nic) = cfg
                .machines
                .iter()
                .find(|m| m.host == host)
                .and_then(|m| m.nic_capacity)
            {
                if bytes > nic as f64 * dt_s * (1.0 + 1e-9) {
                    return Err(format!("{host} NIC sent {bytes} in one step"));
                }
            }
        }
        for p in cluster.pipes() {
            if p.bytes_delivered > p.block_size as f64 * (1.0 + 1e-12) {
                return Err(format!(
                    "{} read {} of a {}-byte block",
                    p.key, p.bytes_delivered, p.block_size
                ));
            }
        }
        for c in &report.completed {
            cluster.stop_container(c, now).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}
