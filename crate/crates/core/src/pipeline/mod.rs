//! Filtering, normalization and publication of raw samples.

mod bus;
mod record;

pub use bus::{BusError, IngestBus};
pub use record::{
    decode, encode, filter_metrics, iso_millis, plugin_for, CodecError, EmptyAllowList,
    FilteredSample, Metric, MetricAllowList, TelemetryRecord, COLLECTD_TYPE, ENVELOPE_VERSION,
};

use crate::collector::{RawSample, Source};

/// Topic carrying records from the given source.
pub fn topic_for(src: Source) -> &'static str {
    src.as_str()
}

pub fn default_topics() -> Vec<String> {
    vec![Source::Collectd.to_string(), Source::Sdn.to_string()]
}

/// Filters, encodes and publishes one raw sample to its source topic.
pub fn ingest(
    bus: &IngestBus,
    sample: &RawSample,
    allow: &MetricAllowList,
) -> Result<u64, PipelineError> {
    let record = encode(&filter_metrics(&sample.into(), allow))?;
    Ok(bus.publish(topic_for(sample.src), record)?)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bus(#[from] BusError),
}
