//! Sequential reference model of the coordination store, plus a seeded
//! driver that replays random operation sequences against both.
//!
//! The model keeps flat string-keyed maps and scans them linearly; it shares
//! no code with the store beyond the public types used to compare results.

use std::collections::BTreeMap;

use piperate_core::coordstore::{CreateMode, SessionId, Store, StoreError, WatchKind, ZPath};
use piperate_core::time::SimTime;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MNode {
    pub data: Vec<u8>,
    pub version: u64,
    pub owner: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Table {
    Data,
    Child,
}

#[derive(Debug, Clone)]
struct MWatch {
    seq: u64,
    session: usize,
    table: Table,
    path: String,
}

/// Outcome of one operation, with sessions as model indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Unit,
    Version(u64),
    Data(Vec<u8>, u64),
    Exists(Option<u64>),
    Children(Vec<String>),
    Session(usize),
    Err(ErrKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ErrKind {
    NoSuchSession,
    NoParent,
    NodeExists,
    EphemeralParent,
    NoSuchNode,
    NotEmpty,
    RootNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MEvent {
    pub session: usize,
    pub kind: WatchKind,
    pub path: String,
    pub delivery_micros: u64,
}

fn parent_of(path: &str) -> Option<String> {
    if path == "/" {
        return None;
    }
    let cut = path.rfind('/').unwrap();
    Some(if cut == 0 {
        "/".to_string()
    } else {
        path[..cut].to_string()
    })
}

fn name_of(path: &str) -> &str {
    &path[path.rfind('/').unwrap() + 1..]
}

pub struct Model {
    pub nodes: BTreeMap<String, MNode>,
    pub live: Vec<bool>,
    watches: Vec<MWatch>,
    next_seq: u64,
    latency: u64,
    pub now: u64,
    pub events: Vec<MEvent>,
}

impl Model {
    pub fn new(latency_micros: u64) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "/".to_string(),
            MNode {
                data: Vec::new(),
                version: 0,
                owner: None,
            },
        );
        Model {
            nodes,
            live: Vec::new(),
            watches: Vec::new(),
            next_seq: 0,
            latency: latency_micros,
            now: 0,
            events: Vec::new(),
        }
    }

    fn children(&self, path: &str) -> Vec<String> {
        let mut out: Vec<String> = self
            .nodes
            .keys()
            .filter(|k| parent_of(k).as_deref() == Some(path))
            .map(|k| name_of(k).to_string())
            .collect();
        out.sort();
        out
    }

    fn arm(&mut self, session: usize, table: Table, path: &str) {
        let dup = self
            .watches
            .iter()
            .any(|w| w.session == session && w.table == table && w.path == path);
        if !dup {
            self.watches.push(MWatch {
                seq: self.next_seq,
                session,
                table,
                path: path.to_string(),
            });
            self.next_seq += 1;
        }
    }

    /// Removes the matching watches and returns them tagged with `kind`.
    fn fire(&mut self, table: Table, path: &str, kind: WatchKind) -> Vec<(u64, MEvent)> {
        let mut fired = Vec::new();
        let delivery = self.now + self.latency;
        self.watches.retain(|w| {
            if w.table == table && w.path == path {
                fired.push((
                    w.seq,
                    MEvent {
                        session: w.session,
                        kind,
                        path: path.to_string(),
                        delivery_micros: delivery,
                    },
                ));
                false
            } else {
                true
            }
        });
        fired
    }

    fn publish(&mut self, mut fired: Vec<(u64, MEvent)>) {
        fired.sort_by_key(|f| f.0);
        self.events.extend(fired.into_iter().map(|f| f.1));
    }

    fn live(&self, s: usize) -> bool {
        self.live.get(s).copied().unwrap_or(false)
    }

    pub fn open(&mut self) -> Outcome {
        self.live.push(true);
        Outcome::Session(self.live.len() - 1)
    }

    pub fn create(&mut self, s: usize, path: &str, data: &[u8], ephemeral: bool) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        if self.nodes.contains_key(path) {
            return Outcome::Err(ErrKind::NodeExists);
        }
        let parent = parent_of(path).unwrap();
        match self.nodes.get(&parent) {
            None => return Outcome::Err(ErrKind::NoParent),
            Some(p) if p.owner.is_some() => return Outcome::Err(ErrKind::EphemeralParent),
            Some(_) => {}
        }
        self.nodes.insert(
            path.to_string(),
            MNode {
                data: data.to_vec(),
                version: 0,
                owner: ephemeral.then_some(s),
            },
        );
        let mut fired = self.fire(Table::Data, path, WatchKind::NodeCreated);
        fired.extend(self.fire(Table::Child, &parent, WatchKind::ChildrenChanged));
        self.publish(fired);
        Outcome::Version(0)
    }

    pub fn set(&mut self, s: usize, path: &str, data: &[u8]) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        let Some(n) = self.nodes.get_mut(path) else {
            return Outcome::Err(ErrKind::NoSuchNode);
        };
        n.data = data.to_vec();
        n.version += 1;
        let v = n.version;
        let fired = self.fire(Table::Data, path, WatchKind::DataChanged);
        self.publish(fired);
        Outcome::Version(v)
    }

    pub fn get(&mut self, s: usize, path: &str, watch: bool) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        let Some(n) = self.nodes.get(path) else {
            return Outcome::Err(ErrKind::NoSuchNode);
        };
        let out = Outcome::Data(n.data.clone(), n.version);
        if watch {
            self.arm(s, Table::Data, path);
        }
        out
    }

    pub fn exists(&mut self, s: usize, path: &str, watch: bool) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        let out = Outcome::Exists(self.nodes.get(path).map(|n| n.version));
        if watch {
            self.arm(s, Table::Data, path);
        }
        out
    }

    pub fn children_of(&mut self, s: usize, path: &str, watch: bool) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        if !self.nodes.contains_key(path) {
            return Outcome::Err(ErrKind::NoSuchNode);
        }
        let out = Outcome::Children(self.children(path));
        if watch {
            self.arm(s, Table::Child, path);
        }
        out
    }

    fn remove(&mut self, path: &str) {
        self.nodes.remove(path);
        let parent = parent_of(path).unwrap();
        let mut fired = self.fire(Table::Data, path, WatchKind::NodeDeleted);
        fired.extend(self.fire(Table::Child, path, WatchKind::NodeDeleted));
        fired.extend(self.fire(Table::Child, &parent, WatchKind::ChildrenChanged));
        self.publish(fired);
    }

    pub fn delete(&mut self, s: usize, path: &str) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        if path == "/" {
            return Outcome::Err(ErrKind::RootNode);
        }
        if !self.nodes.contains_key(path) {
            return Outcome::Err(ErrKind::NoSuchNode);
        }
        if !self.children(path).is_empty() {
            return Outcome::Err(ErrKind::NotEmpty);
        }
        self.remove(path);
        Outcome::Unit
    }

    pub fn close(&mut self, s: usize) -> Outcome {
        if !self.live(s) {
            return Outcome::Err(ErrKind::NoSuchSession);
        }
        self.live[s] = false;
        self.watches.retain(|w| w.session != s);
        let owned: Vec<String> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.owner == Some(s))
            .map(|(k, _)| k.clone())
            .collect();
        // BTreeMap<String, _> keys are already in lexicographic order.
        for p in owned {
            self.remove(&p);
        }
        Outcome::Unit
    }
}

fn err_kind(e: StoreError) -> ErrKind {
    match e {
        StoreError::NoSuchSession(_) => ErrKind::NoSuchSession,
        StoreError::NoParent(_) => ErrKind::NoParent,
        StoreError::NodeExists(_) => ErrKind::NodeExists,
        StoreError::EphemeralParent(_) => ErrKind::EphemeralParent,
        StoreError::NoSuchNode(_) => ErrKind::NoSuchNode,
        StoreError::NotEmpty(_) => ErrKind::NotEmpty,
        StoreError::RootNode => ErrKind::RootNode,
    }
}

/// Fixed pool of paths over a small alphabet: the root plus up to 31 nodes
/// of depth at most three.
pub fn path_pool(max: usize) -> Vec<String> {
    let mut pool = vec!["/".to_string()];
    let names = ["a", "b", "c"];
    let mut frontier = vec![String::new()];
    'outer: for _ in 0..3 {
        let mut next = Vec::new();
        for prefix in &frontier {
            for n in names {
                let p = format!("{prefix}/{n}");
                pool.push(p.clone());
                next.push(p);
                if pool.len() >= max {
                    break 'outer;
                }
            }
        }
        frontier = next;
    }
    pool
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Stats {
    pub ops: usize,
    pub errors: usize,
    pub events: usize,
}

#[derive(Debug)]
pub struct Mismatch {
    pub seed: u64,
    pub step: usize,
    pub detail: String,
}

/// Replays one seeded sequence against both implementations and reports the
/// first divergence in return values, errors, delivered events or final
/// tree contents.
pub fn run_sequence(seed: u64, max_ops: usize) -> Result<Stats, Mismatch> {
    let mut rng = StdRng::seed_from_u64(seed);
    let latency = rng.gen_range(0..50_000u64);
    let mut store = Store::new(SimTime::from_micros(latency));
    let mut model = Model::new(latency);
    let pool = path_pool(32);
    let mut handles: Vec<SessionId> = Vec::new();
    let ops = rng.gen_range(1..=max_ops);
    let fail = |step: usize, detail: String| Mismatch { seed, step, detail };
    let mut stats = Stats {
        ops,
        ..Stats::default()
    };

    for step in 0..ops {
        model.now += rng.gen_range(0..200_000u64);
        store.set_time(SimTime::from_micros(model.now));
        let choice = rng.gen_range(0..100);
        let path = pool[rng.gen_range(0..pool.len())].clone();
        let zpath: ZPath = path.parse().unwrap();
        let data: Vec<u8> = (0..rng.gen_range(0..4)).map(|_| rng.gen()).collect();
        let watch = rng.gen_bool(0.5);
        let (want, got) = if handles.is_empty() || (choice < 4 && handles.len() < 8) {
            let want = model.open();
            handles.push(store.open_session());
            (want, Outcome::Session(handles.len() - 1))
        } else {
            let live: Vec<usize> = (0..handles.len()).filter(|i| model.live[*i]).collect();
            let s = if !live.is_empty() && rng.gen_bool(0.9) {
                live[rng.gen_range(0..live.len())]
            } else {
                rng.gen_range(0..handles.len())
            };
            let h = handles[s];
            match choice {
                0..=29 => {
                    let eph = rng.gen_bool(0.3);
                    let mode = if eph {
                        CreateMode::Ephemeral
                    } else {
                        CreateMode::Persistent
                    };
                    (
                        model.create(s, &path, &data, eph),
                        store
                            .create(h, &zpath, &data, mode)
                            .map(Outcome::Version)
                            .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                    )
                }
                30..=44 => (
                    model.set(s, &path, &data),
                    store
                        .set_data(h, &zpath, &data)
                        .map(Outcome::Version)
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
                45..=59 => (
                    model.get(s, &path, watch),
                    store
                        .get_data(h, &zpath, watch)
                        .map(|(d, v)| Outcome::Data(d, v))
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
                60..=69 => (
                    model.exists(s, &path, watch),
                    store
                        .exists(h, &zpath, watch)
                        .map(Outcome::Exists)
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
                70..=81 => (
                    model.children_of(s, &path, watch),
                    store
                        .get_children(h, &zpath, watch)
                        .map(Outcome::Children)
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
                c if c < 99 || rng.gen_bool(0.5) => (
                    model.delete(s, &path),
                    store
                        .delete(h, &zpath)
                        .map(|_| Outcome::Unit)
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
                _ => (
                    model.close(s),
                    store
                        .close_session(h)
                        .map(|_| Outcome::Unit)
                        .unwrap_or_else(|e| Outcome::Err(err_kind(e))),
                ),
            }
        };
        if want != got {
            return Err(fail(step, format!("model {want:?} store {got:?}")));
        }
        let got_events: Vec<MEvent> = store
            .drain_events()
            .into_iter()
            .map(|e| MEvent {
                session: handles
                    .iter()
                    .position(|h| *h == e.session)
                    .expect("known session"),
                kind: e.kind,
                path: e.path.to_string(),
                delivery_micros: e.delivery_time.as_micros(),
            })
            .collect();
        if matches!(want, Outcome::Err(_)) {
            stats.errors += 1;
        }
        stats.events += got_events.len();
        let want_events = std::mem::take(&mut model.events);
        if want_events != got_events {
            return Err(fail(
                step,
                format!("events: model {want_events:?} store {got_events:?}"),
            ));
        }
    }

    for path in &pool {
        let z: ZPath = path.parse().unwrap();
        let got = store.node(&z).map(|n| MNode {
            data: n.data.clone(),
            version: n.version,
            owner: n
                .owner
                .map(|o| handles.iter().position(|h| *h == o).unwrap()),
        });
        let want = model.nodes.get(path).cloned();
        if got != want {
            return Err(fail(
                ops,
                format!("final {path}: model {want:?} store {got:?}"),
            ));
        }
    }
    for (i, h) in handles.iter().enumerate() {
        if store.is_live(*h) != model.live[i] {
            return Err(fail(ops, format!("session {i} liveness differs")));
        }
    }
    Ok(stats)
}
