//! Token-bucket traffic shaper.
//!
//! A [`Shaper`] holds a table of classes, each a fluid token bucket, and a
//! table of filters mapping pipe patterns to classes. Traffic that matches no
//! filter is not limited.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShaperError {
    #[error("rate and burst must be positive (rate {rate}, burst {burst})")]
    InvalidRate { rate: f64, burst: f64 },
    #[error("no such class {0}")]
    NoSuchClass(ClassId),
    #[error("no filter {0} -> {1}")]
    NoSuchFilter(PipePattern, ClassId),
    #[error("filter {0} -> {1} already present")]
    DuplicateFilter(PipePattern, ClassId),
}

/// Identity of one container-to-DataNode TCP subpipe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PipeKey {
    pub src_host: String,
    pub src_port: u16,
    pub dst_host: String,
    pub dst_port: u16,
}

impl PipeKey {
    pub fn new(src_host: &str, src_port: u16, dst_host: &str, dst_port: u16) -> Self {
        PipeKey {
            src_host: src_host.to_string(),
            src_port,
            dst_host: dst_host.to_string(),
            dst_port,
        }
    }

    /// `src:port->dst:port`, the order used wherever pipes are sorted.
    pub fn render(&self) -> String {
        self.to_string()
    }

    pub fn exact(&self) -> PipePattern {
        PipePattern {
            src_host: Some(self.src_host.clone()),
            src_port: Some(self.src_port),
            dst_host: Some(self.dst_host.clone()),
            dst_port: Some(self.dst_port),
        }
    }
}

impl fmt::Display for PipeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}",
            self.src_host, self.src_port, self.dst_host, self.dst_port
        )
    }
}

/// Filter match pattern. `None` fields are wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PipePattern {
    pub src_host: Option<String>,
    pub src_port: Option<u16>,
    pub dst_host: Option<String>,
    pub dst_port: Option<u16>,
}

impl PipePattern {
    pub fn matches(&self, key: &PipeKey) -> bool {
        self.src_host.as_ref().is_none_or(|h| *h == key.src_host)
            && self.src_port.is_none_or(|p| p == key.src_port)
            && self.dst_host.as_ref().is_none_or(|h| *h == key.dst_host)
            && self.dst_port.is_none_or(|p| p == key.dst_port)
    }

    pub fn exact_fields(&self) -> usize {
        [
            self.src_host.is_some(),
            self.src_port.is_some(),
            self.dst_host.is_some(),
            self.dst_port.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count()
    }
}

impl fmt::Display for PipePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn field<T: fmt::Display>(v: &Option<T>) -> String {
            v.as_ref()
                .map_or_else(|| "*".to_string(), |x| x.to_string())
        }
        write!(
            f,
            "{}:{}->{}:{}",
            field(&self.src_host),
            field(&self.src_port),
            field(&self.dst_host),
            field(&self.dst_port)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1:{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Class(ClassId),
    Unclassified,
}

/// Fluid token bucket. Tokens are bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last_refill: SimTime,
}

impl TokenBucket {
    /// New buckets start full.
    pub fn new(rate: f64, burst: f64, now: SimTime) -> Result<Self, ShaperError> {
        check_rate(rate, burst)?;
        Ok(TokenBucket {
            rate,
            burst,
            tokens: burst,
            last_refill: now,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn burst(&self) -> f64 {
        self.burst
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    pub fn last_refill(&self) -> SimTime {
        self.last_refill
    }

    pub fn reconfigure(&mut self, rate: f64, burst: f64) -> Result<(), ShaperError> {
        check_rate(rate, burst)?;
        self.rate = rate;
        self.burst = burst;
        self.tokens = self.tokens.min(burst);
        Ok(())
    }

    pub fn refill(&mut self, now: SimTime) {
        // A clock that appears to run backwards is treated as no elapsed time.
        let elapsed = now.saturating_sub(self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + self.rate * elapsed).min(self.burst);
        if now > self.last_refill {
            self.last_refill = now;
        }
    }

    /// Refills to `now`, then grants as much of `requested` as the tokens
    /// allow. `cost_per_byte` scales the token charge (header overhead).
    pub fn take(&mut self, requested: f64, now: SimTime, cost_per_byte: f64) -> f64 {
        self.refill(now);
        let requested = requested.max(0.0);
        let granted = requested.min(self.tokens / cost_per_byte);
        self.tokens = (self.tokens - granted * cost_per_byte).max(0.0);
        granted
    }
}

fn check_rate(rate: f64, burst: f64) -> Result<(), ShaperError> {
    if rate > 0.0 && burst > 0.0 && rate.is_finite() && burst.is_finite() {
        Ok(())
    } else {
        Err(ShaperError::InvalidRate { rate, burst })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filter {
    pub pattern: PipePattern,
    pub class_id: ClassId,
    pub priority: u32,
}

#[derive(Debug, Clone)]
pub struct Shaper {
    classes: BTreeMap<ClassId, TokenBucket>,
    filters: Vec<Filter>,
    overhead_factor: f64,
}

impl Default for Shaper {
    fn default() -> Self {
        Shaper::new(1.0)
    }
}

impl Shaper {
    /// `overhead_factor` is the token cost per payload byte; 1.0 charges the
    /// byte stream as-is.
    pub fn new(overhead_factor: f64) -> Self {
        assert!(overhead_factor > 0.0, "overhead factor must be positive");
        Shaper {
            classes: BTreeMap::new(),
            filters: Vec::new(),
            overhead_factor,
        }
    }

    pub fn class(&self, id: ClassId) -> Option<&TokenBucket> {
        self.classes.get(&id)
    }

    pub fn classes(&self) -> impl Iterator<Item = (ClassId, &TokenBucket)> {
        self.classes.iter().map(|(id, b)| (*id, b))
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn configure_class(
        &mut self,
        id: ClassId,
        rate: f64,
        burst: f64,
        now: SimTime,
    ) -> Result<(), ShaperError> {
        match self.classes.get_mut(&id) {
            Some(bucket) => {
                // Settle accrued tokens at the old rate before switching.
                check_rate(rate, burst)?;
                bucket.refill(now);
                bucket.reconfigure(rate, burst)
            }
            None => {
                self.classes.insert(id, TokenBucket::new(rate, burst, now)?);
                Ok(())
            }
        }
    }

    pub fn add_filter(
        &mut self,
        pattern: PipePattern,
        class_id: ClassId,
        priority: u32,
    ) -> Result<(), ShaperError> {
        if !self.classes.contains_key(&class_id) {
            return Err(ShaperError::NoSuchClass(class_id));
        }
        if self
            .filters
            .iter()
            .any(|f| f.pattern == pattern && f.class_id == class_id)
        {
            return Err(ShaperError::DuplicateFilter(pattern, class_id));
        }
        self.filters.push(Filter {
            pattern,
            class_id,
            priority,
        });
        Ok(())
    }

    pub fn remove_filter(
        &mut self,
        pattern: &PipePattern,
        class_id: ClassId,
    ) -> Result<(), ShaperError> {
        let idx = self
            .filters
            .iter()
            .position(|f| f.pattern == *pattern && f.class_id == class_id)
            .ok_or_else(|| ShaperError::NoSuchFilter(pattern.clone(), class_id))?;
        self.filters.remove(idx);
        Ok(())
    }

    pub fn remove_class(&mut self, id: ClassId) -> Result<(), ShaperError> {
        self.classes
            .remove(&id)
            .ok_or(ShaperError::NoSuchClass(id))?;
        self.filters.retain(|f| f.class_id != id);
        Ok(())
    }

    /// Lowest priority value wins, then the most exact fields, then the
    /// lexicographically smallest pattern rendering.
    pub fn classify(&self, key: &PipeKey) -> Classification {
        self.filters
            .iter()
            .filter(|f| f.pattern.matches(key))
            .min_by(|a, b| filter_precedence(a, b))
            .map_or(Classification::Unclassified, |f| {
                Classification::Class(f.class_id)
            })
    }

    pub fn grant(&mut self, id: ClassId, requested: f64, now: SimTime) -> Result<f64, ShaperError> {
        let cost = self.overhead_factor;
        let bucket = self
            .classes
            .get_mut(&id)
            .ok_or(ShaperError::NoSuchClass(id))?;
        Ok(bucket.take(requested, now, cost))
    }

    /// Classifies `key` and grants through its class; unclassified traffic
    /// is granted in full.
    pub fn grant_pipe(&mut self, key: &PipeKey, requested: f64, now: SimTime) -> (f64, bool) {
        match self.classify(key) {
            Classification::Class(id) => {
                let g = self
                    .grant(id, requested, now)
                    .expect("filter points at a live class");
                (g, true)
            }
            Classification::Unclassified => (requested.max(0.0), false),
        }
    }
}

fn filter_precedence(a: &Filter, b: &Filter) -> Ordering {
    a.priority
        .cmp(&b.priority)
        .then_with(|| b.pattern.exact_fields().cmp(&a.pattern.exact_fields()))
        .then_with(|| a.pattern.to_string().cmp(&b.pattern.to_string()))
}
