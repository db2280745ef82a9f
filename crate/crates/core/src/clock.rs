//! Wall-clock helpers. `std::time::Instant` is unavailable on
//! `wasm32-unknown-unknown`, where every measurement reads as zero and
//! deadlines never expire.

use std::time::Duration;

#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed()
        }
        #[cfg(target_arch = "wasm32")]
        {
            Duration::ZERO
        }
    }
}

/// CPU time consumed by the calling thread. Deadlines measured this way do
/// not stretch when many solver threads share few cores.
#[derive(Debug, Clone, Copy)]
pub struct ThreadCpuClock {
    #[cfg(not(target_arch = "wasm32"))]
    start: Option<cpu_time::ThreadTime>,
}

impl ThreadCpuClock {
    pub fn start() -> Self {
        ThreadCpuClock {
            #[cfg(not(target_arch = "wasm32"))]
            start: cpu_time::ThreadTime::try_now().ok(),
        }
    }

    pub fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.map_or(Duration::ZERO, |t| t.elapsed())
        }
        #[cfg(target_arch = "wasm32")]
        {
            Duration::ZERO
        }
    }
}

/// Serialize durations as fractional seconds.
pub mod serde_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs < 0.0 {
            return Err(serde::de::Error::custom(
                "duration must be a nonnegative number",
            ));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}
