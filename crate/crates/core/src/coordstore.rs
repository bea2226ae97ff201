//! In-process hierarchical coordination store.
//!
//! Nodes are addressed by slash-separated paths and are either persistent or
//! ephemeral. Ephemeral nodes belong to the session that created them and are
//! removed when that session closes. Clients may arm one-time watches on a
//! node's data (via [`Store::get_data`] or [`Store::exists`]) or on its child
//! list (via [`Store::get_children`]).
//!
//! Watch notifications are never delivered from inside the mutating call.
//! Each mutation appends [`WatchEvent`]s to an outbox stamped with
//! `now + watch_latency`; the owner of the event loop drains the outbox with
//! [`Store::drain_events`] and schedules delivery.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("session {0} is not live")]
    NoSuchSession(SessionId),
    #[error("parent of {0} does not exist")]
    NoParent(ZPath),
    #[error("node {0} already exists")]
    NodeExists(ZPath),
    #[error("parent of {0} is ephemeral")]
    EphemeralParent(ZPath),
    #[error("node {0} does not exist")]
    NoSuchNode(ZPath),
    #[error("node {0} has children")]
    NotEmpty(ZPath),
    #[error("the root node cannot be deleted")]
    RootNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path must start with '/': {0:?}")]
    NotAbsolute(String),
    #[error("path has an empty segment: {0:?}")]
    EmptySegment(String),
}

/// Absolute node path. The root is the empty segment list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ZPath {
    segments: Vec<String>,
}

impl ZPath {
    pub fn root() -> Self {
        ZPath {
            segments: Vec::new(),
        }
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// Appends one segment. Panics if `name` is empty or contains `/`.
    pub fn child(&self, name: &str) -> ZPath {
        assert!(
            !name.is_empty() && !name.contains('/'),
            "invalid path segment {name:?}"
        );
        let mut segments = self.segments.clone();
        segments.push(name.to_string());
        ZPath { segments }
    }

    pub fn parent(&self) -> Option<ZPath> {
        if self.is_root() {
            return None;
        }
        let mut segments = self.segments.clone();
        segments.pop();
        Some(ZPath { segments })
    }

    pub fn name(&self) -> Option<&str> {
        self.segments.last().map(String::as_str)
    }
}

impl FromStr for ZPath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| PathError::NotAbsolute(s.to_string()))?;
        if rest.is_empty() {
            return Ok(ZPath::root());
        }
        let segments: Vec<String> = rest.split('/').map(str::to_string).collect();
        if segments.iter().any(String::is_empty) {
            return Err(PathError::EmptySegment(s.to_string()));
        }
        Ok(ZPath { segments })
    }
}

impl fmt::Display for ZPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("/");
        }
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(u64);

impl SessionId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CreateMode {
    Persistent,
    Ephemeral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WatchKind {
    DataChanged,
    NodeCreated,
    NodeDeleted,
    ChildrenChanged,
}

/// A fired watch, addressed to the session that armed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchEvent {
    pub session: SessionId,
    pub kind: WatchKind,
    pub path: ZPath,
    pub delivery_time: SimTime,
}

#[derive(Debug, Clone)]
pub struct ZNode {
    pub path: ZPath,
    pub data: Vec<u8>,
    pub mode: CreateMode,
    pub owner: Option<SessionId>,
    pub version: u64,
    children: BTreeSet<String>,
}

impl ZNode {
    pub fn children(&self) -> impl Iterator<Item = &str> {
        self.children.iter().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WatchTable {
    Data,
    Children,
}

#[derive(Debug, Clone)]
struct Registration {
    seq: u64,
    session: SessionId,
}

#[derive(Debug)]
pub struct Store {
    nodes: HashMap<ZPath, ZNode>,
    sessions: BTreeMap<SessionId, BTreeSet<ZPath>>,
    next_session: u64,
    next_watch_seq: u64,
    data_watches: HashMap<ZPath, Vec<Registration>>,
    child_watches: HashMap<ZPath, Vec<Registration>>,
    watch_latency: SimTime,
    now: SimTime,
    outbox: Vec<WatchEvent>,
}

impl Default for Store {
    fn default() -> Self {
        Store::new(SimTime::from_micros(10_000))
    }
}

impl Store {
    pub fn new(watch_latency: SimTime) -> Self {
        let root = ZNode {
            path: ZPath::root(),
            data: Vec::new(),
            mode: CreateMode::Persistent,
            owner: None,
            version: 0,
            children: BTreeSet::new(),
        };
        Store {
            nodes: HashMap::from([(ZPath::root(), root)]),
            sessions: BTreeMap::new(),
            next_session: 1,
            next_watch_seq: 0,
            data_watches: HashMap::new(),
            child_watches: HashMap::new(),
            watch_latency,
            now: SimTime::ZERO,
            outbox: Vec::new(),
        }
    }

    pub fn watch_latency(&self) -> SimTime {
        self.watch_latency
    }

    /// Sets the clock used to stamp delivery times of subsequently fired watches.
    pub fn set_time(&mut self, now: SimTime) {
        self.now = now;
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Takes all fired-but-undelivered events, in firing order.
    pub fn drain_events(&mut self) -> Vec<WatchEvent> {
        std::mem::take(&mut self.outbox)
    }

    pub fn is_live(&self, session: SessionId) -> bool {
        self.sessions.contains_key(&session)
    }

    pub fn node(&self, path: &ZPath) -> Option<&ZNode> {
        self.nodes.get(path)
    }

    pub fn ephemerals_of(&self, session: SessionId) -> Vec<ZPath> {
        self.sessions
            .get(&session)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn open_session(&mut self) -> SessionId {
        let id = SessionId(self.next_session);
        self.next_session += 1;
        self.sessions.insert(id, BTreeSet::new());
        id
    }

    pub fn close_session(&mut self, session: SessionId) -> Result<(), StoreError> {
        let owned = self
            .sessions
            .remove(&session)
            .ok_or(StoreError::NoSuchSession(session))?;
        for table in [&mut self.data_watches, &mut self.child_watches] {
            table.retain(|_, regs| {
                regs.retain(|r| r.session != session);
                !regs.is_empty()
            });
        }
        // BTreeSet iterates in path order; ephemerals are leaves so order only
        // matters for event determinism.
        let mut owned: Vec<ZPath> = owned.into_iter().collect();
        owned.sort_by_key(|p| p.to_string());
        for path in owned {
            self.remove_node(&path);
        }
        Ok(())
    }

    pub fn create(
        &mut self,
        session: SessionId,
        path: &ZPath,
        data: &[u8],
        mode: CreateMode,
    ) -> Result<u64, StoreError> {
        self.check_session(session)?;
        if self.nodes.contains_key(path) {
            return Err(StoreError::NodeExists(path.clone()));
        }
        let parent_path = path.parent().expect("root always exists");
        let parent = self
            .nodes
            .get_mut(&parent_path)
            .ok_or_else(|| StoreError::NoParent(path.clone()))?;
        if parent.mode == CreateMode::Ephemeral {
            return Err(StoreError::EphemeralParent(path.clone()));
        }
        parent
            .children
            .insert(path.name().expect("non-root").to_string());
        let owner = match mode {
            CreateMode::Persistent => None,
            CreateMode::Ephemeral => {
                self.sessions
                    .get_mut(&session)
                    .expect("checked")
                    .insert(path.clone());
                Some(session)
            }
        };
        self.nodes.insert(
            path.clone(),
            ZNode {
                path: path.clone(),
                data: data.to_vec(),
                mode,
                owner,
                version: 0,
                children: BTreeSet::new(),
            },
        );
        let mut fired = Vec::new();
        self.take_watches(WatchTable::Data, path, WatchKind::NodeCreated, &mut fired);
        self.take_watches(
            WatchTable::Children,
            &parent_path,
            WatchKind::ChildrenChanged,
            &mut fired,
        );
        self.emit(fired);
        Ok(0)
    }

    pub fn set_data(
        &mut self,
        session: SessionId,
        path: &ZPath,
        data: &[u8],
    ) -> Result<u64, StoreError> {
        self.check_session(session)?;
        let node = self
            .nodes
            .get_mut(path)
            .ok_or_else(|| StoreError::NoSuchNode(path.clone()))?;
        node.data = data.to_vec();
        node.version += 1;
        let version = node.version;
        let mut fired = Vec::new();
        self.take_watches(WatchTable::Data, path, WatchKind::DataChanged, &mut fired);
        self.emit(fired);
        Ok(version)
    }

    pub fn get_data(
        &mut self,
        session: SessionId,
        path: &ZPath,
        register_watch: bool,
    ) -> Result<(Vec<u8>, u64), StoreError> {
        self.check_session(session)?;
        let node = self
            .nodes
            .get(path)
            .ok_or_else(|| StoreError::NoSuchNode(path.clone()))?;
        let out = (node.data.clone(), node.version);
        if register_watch {
            self.arm(WatchTable::Data, path, session);
        }
        Ok(out)
    }

    /// Returns the node version if present. A watch armed here fires on
    /// creation, data change or deletion, whichever comes first.
    pub fn exists(
        &mut self,
        session: SessionId,
        path: &ZPath,
        register_watch: bool,
    ) -> Result<Option<u64>, StoreError> {
        self.check_session(session)?;
        let version = self.nodes.get(path).map(|n| n.version);
        if register_watch {
            self.arm(WatchTable::Data, path, session);
        }
        Ok(version)
    }

    pub fn get_children(
        &mut self,
        session: SessionId,
        path: &ZPath,
        register_watch: bool,
    ) -> Result<Vec<String>, StoreError> {
        self.check_session(session)?;
        let node = self
            .nodes
            .get(path)
            .ok_or_else(|| StoreError::NoSuchNode(path.clone()))?;
        let children = node.children.iter().cloned().collect();
        if register_watch {
            self.arm(WatchTable::Children, path, session);
        }
        Ok(children)
    }

    pub fn delete(&mut self, session: SessionId, path: &ZPath) -> Result<(), StoreError> {
        self.check_session(session)?;
        if path.is_root() {
            return Err(StoreError::RootNode);
        }
        let node = self
            .nodes
            .get(path)
            .ok_or_else(|| StoreError::NoSuchNode(path.clone()))?;
        if !node.children.is_empty() {
            return Err(StoreError::NotEmpty(path.clone()));
        }
        self.remove_node(path);
        Ok(())
    }

    fn check_session(&self, session: SessionId) -> Result<(), StoreError> {
        if self.sessions.contains_key(&session) {
            Ok(())
        } else {
            Err(StoreError::NoSuchSession(session))
        }
    }

    fn remove_node(&mut self, path: &ZPath) {
        let node = self.nodes.remove(path).expect("caller checked existence");
        if let Some(owner) = node.owner {
            if let Some(owned) = self.sessions.get_mut(&owner) {
                owned.remove(path);
            }
        }
        let parent_path = path.parent().expect("non-root");
        if let Some(parent) = self.nodes.get_mut(&parent_path) {
            parent.children.remove(path.name().expect("non-root"));
        }
        let mut fired = Vec::new();
        self.take_watches(WatchTable::Data, path, WatchKind::NodeDeleted, &mut fired);
        self.take_watches(
            WatchTable::Children,
            path,
            WatchKind::NodeDeleted,
            &mut fired,
        );
        self.take_watches(
            WatchTable::Children,
            &parent_path,
            WatchKind::ChildrenChanged,
            &mut fired,
        );
        self.emit(fired);
    }

    /// Arms a watch unless the session already holds one of the same kind on
    /// the same path; duplicates collapse into one notification.
    fn arm(&mut self, table: WatchTable, path: &ZPath, session: SessionId) {
        let regs = match table {
            WatchTable::Data => self.data_watches.entry(path.clone()).or_default(),
            WatchTable::Children => self.child_watches.entry(path.clone()).or_default(),
        };
        if regs.iter().any(|r| r.session == session) {
            return;
        }
        regs.push(Registration {
            seq: self.next_watch_seq,
            session,
        });
        self.next_watch_seq += 1;
    }

    fn take_watches(
        &mut self,
        table: WatchTable,
        path: &ZPath,
        kind: WatchKind,
        fired: &mut Vec<(u64, WatchEvent)>,
    ) {
        let regs = match table {
            WatchTable::Data => self.data_watches.remove(path),
            WatchTable::Children => self.child_watches.remove(path),
        };
        let delivery_time = self.now + self.watch_latency;
        for reg in regs.into_iter().flatten() {
            fired.push((
                reg.seq,
                WatchEvent {
                    session: reg.session,
                    kind,
                    path: path.clone(),
                    delivery_time,
                },
            ));
        }
    }

    /// Events from one mutation go out in watch registration order.
    fn emit(&mut self, mut fired: Vec<(u64, WatchEvent)>) {
        fired.sort_by_key(|(seq, _)| *seq);
        self.outbox.extend(fired.into_iter().map(|(_, e)| e));
    }
}
