use serde::{Deserialize, Serialize};

pub const MS_PER_HOUR: u64 = 3_600_000;
pub const MS_PER_DAY: u64 = 24 * MS_PER_HOUR;

/// Simulated time. All timestamps in the system come from here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualClock {
    now_ms: u64,
    /// Virtual seconds per wall second when free-running.
    acceleration: f64,
}

impl VirtualClock {
    pub fn new(epoch_ms: u64, acceleration: f64) -> Self {
        assert!(acceleration > 0.0, "acceleration must be positive");
        Self {
            now_ms: epoch_ms,
            acceleration,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn advance(&mut self, dt_ms: u64) {
        self.now_ms += dt_ms;
    }

    pub fn hour_of_day(&self) -> u8 {
        hour_of_day(self.now_ms)
    }
}

/// UTC hour of day for an epoch-millisecond instant.
pub fn hour_of_day(ts_ms: u64) -> u8 {
    ((ts_ms / MS_PER_HOUR) % 24) as u8
}
