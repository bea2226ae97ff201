//! Control-plane agents.
//!
//! On every NodeManager host a [`ConnectionMonitor`] turns the host's
//! connection table into per-DataNode [`SettingsDocument`]s and a [`Submitter`]
//! publishes them as ephemeral nodes under `/tcData/DN_<dn>/NM_<nm>`.
//!
//! On every DataNode host a [`Collector`] watches its `/tcData/DN_<dn>` node
//! and the children below it, diffs each new document against the previous one
//! and hands the resulting [`TrafficEvent`]s to an [`Executor`], which programs
//! the host's shaper.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::{debug, warn};
use thiserror::Error;

use crate::coordstore::{CreateMode, SessionId, Store, StoreError, WatchEvent, WatchKind, ZPath};
use crate::resource_manager::RegistryEntry;
use crate::shaper::{ClassId, PipeKey, Shaper};
use crate::simcluster::ConnectionRecord;
use crate::time::SimTime;

pub const ROOT_NODE: &str = "tcData";
pub const DATANODE_PREFIX: &str = "DN_";
pub const NODEMANAGER_PREFIX: &str = "NM_";
pub const FILTER_PRIORITY: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("DataNode {0:?} has not registered")]
    DataNodeUnregistered(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("document does not end with a newline")]
    MissingNewline,
    #[error("line {0}: expected 5 fields")]
    FieldCount(usize),
    #[error("line {0}: bad endpoint {1:?}")]
    Endpoint(usize, String),
    #[error("line {0}: bad integer {1:?}")]
    Integer(usize, String),
    #[error("line {0}: rate and burst must be positive")]
    NonPositive(usize),
    #[error("document is not in canonical form")]
    NonCanonical,
    #[error("document is not UTF-8")]
    Utf8,
}

pub fn tc_root() -> ZPath {
    ZPath::root().child(ROOT_NODE)
}

pub fn datanode_path(dn_id: &str) -> ZPath {
    tc_root().child(&format!("{DATANODE_PREFIX}{dn_id}"))
}

pub fn nodemanager_path(dn_id: &str, nm_id: &str) -> ZPath {
    datanode_path(dn_id).child(&format!("{NODEMANAGER_PREFIX}{nm_id}"))
}

/// Rate limit for one pipe. Rates are bytes per second, burst is bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RateSetting {
    pub container_id: String,
    pub key: PipeKey,
    pub rate: u64,
    pub burst: u64,
}

impl RateSetting {
    pub fn line(&self) -> String {
        format!(
            "{} {}:{} {}:{} {} {}",
            self.container_id,
            self.key.src_host,
            self.key.src_port,
            self.key.dst_host,
            self.key.dst_port,
            self.rate,
            self.burst
        )
    }
}

/// A set of settings with at most one entry per pipe.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SettingSet(BTreeMap<PipeKey, RateSetting>);

impl SettingSet {
    pub fn new() -> Self {
        SettingSet::default()
    }

    /// Inserts, replacing any previous setting for the same pipe.
    pub fn insert(&mut self, s: RateSetting) -> Option<RateSetting> {
        self.0.insert(s.key.clone(), s)
    }

    pub fn remove(&mut self, key: &PipeKey) -> Option<RateSetting> {
        self.0.remove(key)
    }

    pub fn get(&self, key: &PipeKey) -> Option<&RateSetting> {
        self.0.get(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RateSetting> {
        self.0.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &PipeKey> {
        self.0.keys()
    }

    /// Canonical wire form: one line per setting, lines sorted, each ending
    /// in `\n`. The empty set is the empty string.
    pub fn serialize(&self) -> Vec<u8> {
        let mut lines: Vec<String> = self.0.values().map(RateSetting::line).collect();
        lines.sort();
        let mut out = String::new();
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out.into_bytes()
    }

    /// Accepts only canonical documents, so `parse` then `serialize`
    /// reproduces the input bytes.
    pub fn parse(bytes: &[u8]) -> Result<SettingSet, ParseError> {
        let text = std::str::from_utf8(bytes).map_err(|_| ParseError::Utf8)?;
        if text.is_empty() {
            return Ok(SettingSet::new());
        }
        let body = text.strip_suffix('\n').ok_or(ParseError::MissingNewline)?;
        let mut set = SettingSet::new();
        for (i, line) in body.split('\n').enumerate() {
            let n = i + 1;
            let fields: Vec<&str> = line.split(' ').collect();
            let [container_id, src, dst, rate, burst] = fields[..] else {
                return Err(ParseError::FieldCount(n));
            };
            let (src_host, src_port) = endpoint(n, src)?;
            let (dst_host, dst_port) = endpoint(n, dst)?;
            let rate = integer(n, rate)?;
            let burst = integer(n, burst)?;
            if rate == 0 || burst == 0 {
                return Err(ParseError::NonPositive(n));
            }
            if container_id.is_empty() {
                return Err(ParseError::FieldCount(n));
            }
            let setting = RateSetting {
                container_id: container_id.to_string(),
                key: PipeKey::new(src_host, src_port as u16, dst_host, dst_port as u16),
                rate,
                burst,
            };
            if set.insert(setting).is_some() {
                return Err(ParseError::NonCanonical);
            }
        }
        if set.serialize() != bytes {
            return Err(ParseError::NonCanonical);
        }
        Ok(set)
    }
}

impl FromIterator<RateSetting> for SettingSet {
    fn from_iter<I: IntoIterator<Item = RateSetting>>(iter: I) -> Self {
        let mut s = SettingSet::new();
        for x in iter {
            s.insert(x);
        }
        s
    }
}

fn integer(line: usize, s: &str) -> Result<u64, ParseError> {
    let ok =
        !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'));
    if !ok {
        return Err(ParseError::Integer(line, s.to_string()));
    }
    s.parse()
        .map_err(|_| ParseError::Integer(line, s.to_string()))
}

fn endpoint(line: usize, s: &str) -> Result<(&str, u64), ParseError> {
    let (host, port) = s
        .rsplit_once(':')
        .ok_or_else(|| ParseError::Endpoint(line, s.to_string()))?;
    let port = integer(line, port)?;
    if host.is_empty() || host.contains(':') || port == 0 || port > u16::MAX as u64 {
        return Err(ParseError::Endpoint(line, s.to_string()));
    }
    Ok((host, port))
}

/// Settings one NodeManager publishes for one DataNode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettingsDocument {
    pub nm_id: String,
    pub dn_id: String,
    pub settings: SettingSet,
}

impl SettingsDocument {
    pub fn serialized(&self) -> Vec<u8> {
        self.settings.serialize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrafficEventKind {
    RemoveRule,
    ModifyRule,
    AddRule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficEvent {
    pub kind: TrafficEventKind,
    /// The new setting, or for `RemoveRule` the one being removed.
    pub setting: RateSetting,
}

impl fmt::Display for TrafficEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({})", self.kind, self.setting.line())
    }
}

/// Events turning `old` into `new`: removals, then modifications, then
/// additions, each group ordered by pipe rendering.
pub fn diff(old: &SettingSet, new: &SettingSet) -> Vec<TrafficEvent> {
    let mut out = Vec::new();
    for (key, prev) in &old.0 {
        match new.0.get(key) {
            None => out.push(TrafficEvent {
                kind: TrafficEventKind::RemoveRule,
                setting: prev.clone(),
            }),
            Some(next) if next != prev => out.push(TrafficEvent {
                kind: TrafficEventKind::ModifyRule,
                setting: next.clone(),
            }),
            Some(_) => {}
        }
    }
    for (key, next) in &new.0 {
        if !old.0.contains_key(key) {
            out.push(TrafficEvent {
                kind: TrafficEventKind::AddRule,
                setting: next.clone(),
            });
        }
    }
    out.sort_by_cached_key(|e| (e.kind, e.setting.key.render()));
    out
}

/// Watches the connection table of one NodeManager host.
#[derive(Debug, Clone)]
pub struct ConnectionMonitor {
    nm_id: String,
    reported: BTreeSet<String>,
}

impl ConnectionMonitor {
    pub fn new(nm_id: &str) -> Self {
        ConnectionMonitor {
            nm_id: nm_id.to_string(),
            reported: BTreeSet::new(),
        }
    }

    pub fn nm_id(&self) -> &str {
        &self.nm_id
    }

    /// Builds one document per destination DataNode. DataNodes that appeared
    /// in an earlier tick but have no pipes now get an empty document.
    /// Containers without a rate class contribute nothing.
    pub fn tick<F>(
        &mut self,
        connections: &[ConnectionRecord],
        lookup: F,
    ) -> BTreeMap<String, SettingsDocument>
    where
        F: Fn(&str) -> Option<RegistryEntry>,
    {
        let mut docs: BTreeMap<String, SettingsDocument> = self
            .reported
            .iter()
            .map(|dn| (dn.clone(), self.document(dn)))
            .collect();
        for rec in connections {
            let Some(entry) = lookup(&rec.container_id) else {
                continue;
            };
            if entry.io_rate == 0 {
                continue;
            }
            let dn = rec.key.dst_host.clone();
            let doc = docs.entry(dn.clone()).or_insert_with(|| self.document(&dn));
            doc.settings.insert(RateSetting {
                container_id: rec.container_id.clone(),
                key: rec.key.clone(),
                rate: entry.io_rate,
                burst: entry.io_burst.max(1),
            });
        }
        self.reported.extend(docs.keys().cloned());
        docs
    }

    fn document(&self, dn: &str) -> SettingsDocument {
        SettingsDocument {
            nm_id: self.nm_id.clone(),
            dn_id: dn.to_string(),
            settings: SettingSet::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    Created,
    Updated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteOutcome {
    pub dn_id: String,
    pub kind: WriteKind,
    pub version: u64,
}

/// Publishes a NodeManager's documents, skipping unchanged ones.
#[derive(Debug, Clone)]
pub struct Submitter {
    nm_id: String,
    session: SessionId,
    last_written: BTreeMap<String, Vec<u8>>,
}

impl Submitter {
    pub fn new(nm_id: &str, session: SessionId) -> Self {
        Submitter {
            nm_id: nm_id.to_string(),
            session,
            last_written: BTreeMap::new(),
        }
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn submit<'a>(
        &mut self,
        store: &mut Store,
        documents: impl IntoIterator<Item = &'a SettingsDocument>,
    ) -> Result<Vec<WriteOutcome>, AgentError> {
        let mut out = Vec::new();
        for doc in documents {
            let bytes = doc.serialized();
            if self.last_written.get(&doc.dn_id) == Some(&bytes) {
                continue;
            }
            if store
                .exists(self.session, &datanode_path(&doc.dn_id), false)?
                .is_none()
            {
                return Err(AgentError::DataNodeUnregistered(doc.dn_id.clone()));
            }
            let path = nodemanager_path(&doc.dn_id, &self.nm_id);
            let outcome = if self.last_written.contains_key(&doc.dn_id) {
                match store.set_data(self.session, &path, &bytes) {
                    Ok(version) => WriteOutcome {
                        dn_id: doc.dn_id.clone(),
                        kind: WriteKind::Updated,
                        version,
                    },
                    Err(StoreError::NoSuchNode(_)) => self.create(store, &path, doc, &bytes)?,
                    Err(e) => return Err(e.into()),
                }
            } else {
                self.create(store, &path, doc, &bytes)?
            };
            debug!("{} wrote {} ({:?})", self.nm_id, path, outcome.kind);
            self.last_written.insert(doc.dn_id.clone(), bytes);
            out.push(outcome);
        }
        Ok(out)
    }

    fn create(
        &self,
        store: &mut Store,
        path: &ZPath,
        doc: &SettingsDocument,
        bytes: &[u8],
    ) -> Result<WriteOutcome, AgentError> {
        match store.create(self.session, path, bytes, CreateMode::Ephemeral) {
            Ok(version) => Ok(WriteOutcome {
                dn_id: doc.dn_id.clone(),
                kind: WriteKind::Created,
                version,
            }),
            Err(StoreError::NodeExists(_)) => Ok(WriteOutcome {
                dn_id: doc.dn_id.clone(),
                kind: WriteKind::Updated,
                version: store.set_data(self.session, path, bytes)?,
            }),
            Err(e) => Err(e.into()),
        }
    }
}

/// Tracks the NodeManager documents below one DataNode node.
#[derive(Debug, Clone)]
pub struct Collector {
    dn_id: String,
    session: SessionId,
    current: BTreeMap<String, SettingSet>,
    parse_errors: u64,
}

impl Collector {
    pub fn new(dn_id: &str, session: SessionId) -> Self {
        Collector {
            dn_id: dn_id.to_string(),
            session,
            current: BTreeMap::new(),
            parse_errors: 0,
        }
    }

    pub fn dn_id(&self) -> &str {
        &self.dn_id
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn parse_errors(&self) -> u64 {
        self.parse_errors
    }

    /// Settings currently in force for this DataNode, across all NodeManagers.
    pub fn settings(&self) -> SettingSet {
        self.current
            .values()
            .flat_map(|s| s.iter().cloned())
            .collect()
    }

    /// Registers the DataNode (creating `/tcData` if needed), arms the
    /// children watch and picks up any documents already present.
    pub fn register(&mut self, store: &mut Store) -> Result<Vec<TrafficEvent>, AgentError> {
        for path in [tc_root(), datanode_path(&self.dn_id)] {
            match store.create(self.session, &path, b"", CreateMode::Persistent) {
                Ok(_) | Err(StoreError::NodeExists(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.sync_children(store)
    }

    /// Handles one delivered watch event. Every handler re-arms the watch it
    /// consumed and re-reads the node, so a change that lands between the
    /// notification and the re-arm is still observed.
    pub fn on_event(
        &mut self,
        store: &mut Store,
        event: &WatchEvent,
    ) -> Result<Vec<TrafficEvent>, AgentError> {
        let dn_path = datanode_path(&self.dn_id);
        if event.path == dn_path {
            return match event.kind {
                WatchKind::ChildrenChanged => self.sync_children(store),
                _ => Ok(Vec::new()),
            };
        }
        if event.path.parent().as_ref() != Some(&dn_path) {
            return Ok(Vec::new());
        }
        let Some(child) = event.path.name().map(str::to_string) else {
            return Ok(Vec::new());
        };
        match event.kind {
            WatchKind::NodeDeleted => Ok(self.forget(&child)),
            WatchKind::DataChanged | WatchKind::NodeCreated => self.read_child(store, &child),
            WatchKind::ChildrenChanged => Ok(Vec::new()),
        }
    }

    fn sync_children(&mut self, store: &mut Store) -> Result<Vec<TrafficEvent>, AgentError> {
        let dn_path = datanode_path(&self.dn_id);
        let children: BTreeSet<String> = store
            .get_children(self.session, &dn_path, true)?
            .into_iter()
            .filter(|c| c.starts_with(NODEMANAGER_PREFIX))
            .collect();
        let mut events = Vec::new();
        let gone: Vec<String> = self
            .current
            .keys()
            .filter(|c| !children.contains(*c))
            .cloned()
            .collect();
        for child in gone {
            events.extend(self.forget(&child));
        }
        for child in children {
            if !self.current.contains_key(&child) {
                events.extend(self.read_child(store, &child)?);
            }
        }
        Ok(events)
    }

    fn read_child(
        &mut self,
        store: &mut Store,
        child: &str,
    ) -> Result<Vec<TrafficEvent>, AgentError> {
        let path = datanode_path(&self.dn_id).child(child);
        let bytes = match store.get_data(self.session, &path, true) {
            Ok((bytes, _)) => bytes,
            Err(StoreError::NoSuchNode(_)) => return Ok(self.forget(child)),
            Err(e) => return Err(e.into()),
        };
        match SettingSet::parse(&bytes) {
            Ok(next) => {
                let prev = self.current.get(child).cloned().unwrap_or_default();
                let events = diff(&prev, &next);
                self.current.insert(child.to_string(), next);
                Ok(events)
            }
            Err(e) => {
                self.parse_errors += 1;
                warn!(
                    "{}: ignoring unparsable document {}: {}",
                    self.dn_id, path, e
                );
                // Keep the previous document but remember the child so that
                // a later deletion still clears its rules.
                self.current.entry(child.to_string()).or_default();
                Ok(Vec::new())
            }
        }
    }

    fn forget(&mut self, child: &str) -> Vec<TrafficEvent> {
        match self.current.remove(child) {
            Some(prev) => diff(&prev, &SettingSet::new()),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedRule {
    pub class_id: ClassId,
    pub setting: RateSetting,
}

/// Programs one DataNode's shaper with exact per-pipe rules.
#[derive(Debug, Clone, Default)]
pub struct Executor {
    rules: BTreeMap<PipeKey, AppliedRule>,
    next_class: u32,
    diagnostics: Vec<String>,
}

impl Executor {
    pub fn new() -> Self {
        Executor {
            rules: BTreeMap::new(),
            next_class: 1,
            diagnostics: Vec::new(),
        }
    }

    pub fn rules(&self) -> impl Iterator<Item = &AppliedRule> {
        self.rules.values()
    }

    pub fn rule(&self, key: &PipeKey) -> Option<&AppliedRule> {
        self.rules.get(key)
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Applies events in order. Inconsistent events are recorded in
    /// [`Executor::diagnostics`] and skipped. Returns the pipes whose rule
    /// was added or changed.
    pub fn execute(
        &mut self,
        shaper: &mut Shaper,
        events: &[TrafficEvent],
        now: SimTime,
    ) -> Vec<PipeKey> {
        let mut touched = Vec::new();
        for ev in events {
            let s = &ev.setting;
            let result = match ev.kind {
                TrafficEventKind::AddRule => match self.rules.get(&s.key) {
                    Some(r) if r.setting == *s => Ok(false),
                    Some(r) => {
                        let id = r.class_id;
                        self.reconfigure(shaper, id, s, now).map(|_| true)
                    }
                    None => self.add(shaper, s, now).map(|_| true),
                },
                TrafficEventKind::ModifyRule => match self.rules.get(&s.key) {
                    Some(r) => {
                        let id = r.class_id;
                        self.reconfigure(shaper, id, s, now).map(|_| true)
                    }
                    None => Err(format!("modify for unknown pipe {}", s.key)),
                },
                TrafficEventKind::RemoveRule => match self.rules.remove(&s.key) {
                    Some(r) => shaper
                        .remove_filter(&s.key.exact(), r.class_id)
                        .and_then(|_| shaper.remove_class(r.class_id))
                        .map(|_| false)
                        .map_err(|e| e.to_string()),
                    None => Err(format!("remove for unknown pipe {}", s.key)),
                },
            };
            match result {
                Ok(true) => touched.push(s.key.clone()),
                Ok(false) => {}
                Err(msg) => {
                    warn!("executor: {msg}");
                    self.diagnostics.push(msg);
                }
            }
        }
        touched
    }

    fn add(&mut self, shaper: &mut Shaper, s: &RateSetting, now: SimTime) -> Result<(), String> {
        let id = ClassId(self.next_class);
        self.next_class += 1;
        shaper
            .configure_class(id, s.rate as f64, s.burst as f64, now)
            .and_then(|_| shaper.add_filter(s.key.exact(), id, FILTER_PRIORITY))
            .map_err(|e| e.to_string())?;
        self.rules.insert(
            s.key.clone(),
            AppliedRule {
                class_id: id,
                setting: s.clone(),
            },
        );
        Ok(())
    }

    fn reconfigure(
        &mut self,
        shaper: &mut Shaper,
        id: ClassId,
        s: &RateSetting,
        now: SimTime,
    ) -> Result<(), String> {
        shaper
            .configure_class(id, s.rate as f64, s.burst as f64, now)
            .map_err(|e| e.to_string())?;
        self.rules.insert(
            s.key.clone(),
            AppliedRule {
                class_id: id,
                setting: s.clone(),
            },
        );
        Ok(())
    }
}
