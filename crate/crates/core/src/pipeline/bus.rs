use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use super::TelemetryRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("ingest bus is closed")]
    BusClosed,
    #[error("topic name must not be empty")]
    EmptyTopicName,
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("max must be positive")]
    ZeroMax,
}

#[derive(Debug, Default)]
struct Inner {
    topics: BTreeMap<String, Vec<Arc<TelemetryRecord>>>,
    closed: bool,
}

/// Append-only, offset-addressed record log with one log per topic.
/// Publishers and consumers may share it across threads.
#[derive(Debug, Default)]
pub struct IngestBus {
    inner: RwLock<Inner>,
}

impl IngestBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `topic` if absent.
    pub fn ensure_topic(&self, topic: &str) -> Result<(), BusError> {
        if topic.is_empty() {
            return Err(BusError::EmptyTopicName);
        }
        self.inner
            .write()
            .expect("bus lock")
            .topics
            .entry(topic.to_string())
            .or_default();
        Ok(())
    }

    pub fn publish(&self, topic: &str, record: TelemetryRecord) -> Result<u64, BusError> {
        if topic.is_empty() {
            return Err(BusError::EmptyTopicName);
        }
        let mut inner = self.inner.write().expect("bus lock");
        if inner.closed {
            return Err(BusError::BusClosed);
        }
        let log = inner.topics.entry(topic.to_string()).or_default();
        log.push(Arc::new(record));
        Ok(log.len() as u64 - 1)
    }

    /// Reads up to `max` records starting at `from_offset`. Re-reading a
    /// range always yields the same records.
    pub fn consume(
        &self,
        topic: &str,
        from_offset: u64,
        max: usize,
    ) -> Result<(Vec<Arc<TelemetryRecord>>, u64), BusError> {
        if max == 0 {
            return Err(BusError::ZeroMax);
        }
        let inner = self.inner.read().expect("bus lock");
        let log = inner
            .topics
            .get(topic)
            .ok_or_else(|| BusError::UnknownTopic(topic.to_string()))?;
        let start = usize::try_from(from_offset).unwrap_or(usize::MAX).min(log.len());
        let end = start.saturating_add(max).min(log.len());
        let records = log[start..end].to_vec();
        let next = from_offset.max(start as u64) + records.len() as u64;
        Ok((records, next))
    }

    pub fn len(&self, topic: &str) -> Option<u64> {
        self.inner
            .read()
            .expect("bus lock")
            .topics
            .get(topic)
            .map(|l| l.len() as u64)
    }

    pub fn topics(&self) -> Vec<String> {
        self.inner.read().expect("bus lock").topics.keys().cloned().collect()
    }

    pub fn close(&self) {
        self.inner.write().expect("bus lock").closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.inner.read().expect("bus lock").closed
    }
}
