//! Time and identifier sources.
//!
//! Everything that stamps a session (timestamps, render durations, ids) goes
//! through these traits so that two front ends driving the same pipeline with
//! the same inputs can produce byte-identical session documents.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::RngCore;

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> DateTime<Utc>;

    /// Milliseconds elapsed since `started`, as recorded in results.
    fn elapsed_ms(&self, started: Instant) -> u64 {
        started.elapsed().as_millis() as u64
    }

    /// UTC RFC 3339 timestamp with millisecond precision.
    fn timestamp(&self) -> String {
        self.now().to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A frozen clock. Durations are always reported as zero.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    pub fn epoch() -> Self {
        FixedClock(DateTime::<Utc>::UNIX_EPOCH)
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }

    fn elapsed_ms(&self, _started: Instant) -> u64 {
        0
    }
}

pub trait IdSource: Send + Sync + fmt::Debug {
    /// A fresh 128-bit identifier as 32 lowercase hex characters.
    fn next_id(&self) -> String;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RandomIds;

impl IdSource for RandomIds {
    fn next_id(&self) -> String {
        let mut buf = [0u8; 16];
        rand::rng().fill_bytes(&mut buf);
        hex::encode(buf)
    }
}

/// Deterministic ids `000..001`, `000..002`, ... for reproducible runs.
#[derive(Debug, Default)]
pub struct SequentialIds {
    counter: AtomicU64,
}

impl SequentialIds {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues a sequence whose last issued value was `last`.
    pub fn starting_after(last: u64) -> Self {
        SequentialIds {
            counter: AtomicU64::new(last),
        }
    }
}

impl IdSource for SequentialIds {
    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
        format!("{n:032x}")
    }
}

/// True if `id` looks like an id produced by an [`IdSource`].
pub fn is_valid_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}
