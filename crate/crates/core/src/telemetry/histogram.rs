use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Upper edges of the regular buckets: 1, 2, 4, ... 65536 ms. A value lands in
/// the first bucket whose edge is ≥ the value; anything above the last edge
/// goes to the overflow bucket.
pub const BUCKET_BOUNDS_MS: [u64; 17] = [
    1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536,
];

const BUCKETS: usize = BUCKET_BOUNDS_MS.len() + 1;

pub fn bucket_index(latency_ms: u64) -> usize {
    BUCKET_BOUNDS_MS.partition_point(|&edge| edge < latency_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PercentileError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("percentile must lie in (0, 100]")]
    InvalidPercentile,
}

/// Point-in-time copy of a latency histogram.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    pub bucket_bounds_ms: Vec<u64>,
    /// One count per regular bucket followed by the overflow bucket.
    pub counts: Vec<u64>,
    pub total: u64,
    pub sum_ms: u64,
    pub max_ms: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            bucket_bounds_ms: BUCKET_BOUNDS_MS.to_vec(),
            counts: vec![0; BUCKETS],
            total: 0,
            sum_ms: 0,
            max_ms: 0,
        }
    }
}

impl LatencyHistogram {
    pub fn from_values(values: impl IntoIterator<Item = u64>) -> Self {
        let h = AtomicHistogram::default();
        for v in values {
            h.observe(v);
        }
        h.snapshot()
    }

    /// Nearest-rank percentile reported as the upper edge of the bucket that
    /// holds the ranked observation, so it never underestimates. Ranks that
    /// fall in the overflow bucket report the largest observation.
    pub fn percentile(&self, p: f64) -> Result<f64, PercentileError> {
        if !(p > 0.0 && p <= 100.0) {
            return Err(PercentileError::InvalidPercentile);
        }
        if self.total == 0 {
            return Err(PercentileError::EmptyHistogram);
        }
        let rank = ((p / 100.0) * self.total as f64).ceil().max(1.0) as u64;
        let mut seen = 0u64;
        for (i, &count) in self.counts.iter().enumerate() {
            seen += count;
            if seen >= rank {
                return Ok(match self.bucket_bounds_ms.get(i) {
                    Some(&edge) => edge as f64,
                    None => self.max_ms as f64,
                });
            }
        }
        Ok(self.max_ms as f64)
    }
}

/// Lock-free histogram the gateway records into concurrently.
#[derive(Debug)]
pub struct AtomicHistogram {
    counts: [AtomicU64; BUCKETS],
    total: AtomicU64,
    sum_ms: AtomicU64,
    max_ms: AtomicU64,
}

impl Default for AtomicHistogram {
    fn default() -> Self {
        Self {
            counts: std::array::from_fn(|_| AtomicU64::new(0)),
            total: AtomicU64::new(0),
            sum_ms: AtomicU64::new(0),
            max_ms: AtomicU64::new(0),
        }
    }
}

impl AtomicHistogram {
    pub fn observe(&self, latency_ms: u64) {
        self.counts[bucket_index(latency_ms)].fetch_add(1, Ordering::Relaxed);
        self.sum_ms.fetch_add(latency_ms, Ordering::Relaxed);
        self.max_ms.fetch_max(latency_ms, Ordering::Relaxed);
        self.total.fetch_add(1, Ordering::Release);
    }

    pub fn snapshot(&self) -> LatencyHistogram {
        let counts: Vec<u64> = self.counts.iter().map(|c| c.load(Ordering::Acquire)).collect();
        LatencyHistogram {
            bucket_bounds_ms: BUCKET_BOUNDS_MS.to_vec(),
            total: counts.iter().sum(),
            counts,
            sum_ms: self.sum_ms.load(Ordering::Acquire),
            max_ms: self.max_ms.load(Ordering::Acquire),
        }
    }
}
