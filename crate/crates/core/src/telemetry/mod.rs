//! Container-level telemetry: per-replica GPU utilization and memory
//! samples, per-model latency histograms, and the exported time series.

mod histogram;

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::runtime::{ContainerStats, ReplicaHandle, RuntimeManager};

pub use histogram::{bucket_index, AtomicHistogram, LatencyHistogram, PercentileError, BUCKET_BOUNDS_MS};

/// Samples kept per replica (one hour at the default 1 s cadence).
pub const DEFAULT_RING_CAPACITY: usize = 3600;

pub const SERIES_CSV_HEADER: [&str; 6] = ["ts_ms", "gpu_util_pct", "mem_bytes", "p50_ms", "p95_ms", "p99_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub ts_ms: i64,
    pub replica_id: String,
    pub gpu_util_pct: f64,
    pub mem_bytes: u64,
    /// The stats source was unreachable; values repeat the previous sample.
    pub stale: bool,
    pub gpu_absent: bool,
}

/// One sampling tick of a model, aggregated over its replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub ts_ms: i64,
    /// Mean over the replicas sampled at this tick.
    pub gpu_util_pct: f64,
    /// Sum over the replicas sampled at this tick.
    pub mem_bytes: u64,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub gpu_absent: bool,
}

#[derive(Debug)]
pub struct Telemetry {
    ring_capacity: usize,
    histograms: RwLock<HashMap<String, Arc<AtomicHistogram>>>,
    samples: Mutex<HashMap<String, VecDeque<TelemetrySample>>>,
    series: Mutex<HashMap<String, VecDeque<SeriesRow>>>,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self::new(DEFAULT_RING_CAPACITY)
    }
}

impl Telemetry {
    pub fn new(ring_capacity: usize) -> Self {
        Self {
            ring_capacity: ring_capacity.max(1),
            histograms: RwLock::new(HashMap::new()),
            samples: Mutex::new(HashMap::new()),
            series: Mutex::new(HashMap::new()),
        }
    }

    fn histogram_for(&self, model_id: &str) -> Arc<AtomicHistogram> {
        if let Some(h) = self.histograms.read().get(model_id) {
            return h.clone();
        }
        self.histograms
            .write()
            .entry(model_id.to_owned())
            .or_default()
            .clone()
    }

    pub fn observe_latency(&self, model_id: &str, latency_ms: u64) {
        self.histogram_for(model_id).observe(latency_ms);
    }

    pub fn histogram(&self, model_id: &str) -> LatencyHistogram {
        self.histograms
            .read()
            .get(model_id)
            .map(|h| h.snapshot())
            .unwrap_or_default()
    }

    /// Appends a sample built from a stats reading; `None` means the source
    /// was unreachable and the sample repeats the previous values as stale.
    pub fn record_sample(&self, replica_id: &str, stats: Option<ContainerStats>, ts_ms: i64) -> TelemetrySample {
        let mut rings = self.samples.lock();
        let ring = rings.entry(replica_id.to_owned()).or_default();
        let sample = match stats {
            Some(s) => TelemetrySample {
                ts_ms,
                replica_id: replica_id.to_owned(),
                gpu_util_pct: s.gpu_util_pct.unwrap_or(0.0).clamp(0.0, 100.0),
                mem_bytes: s.mem_bytes,
                stale: false,
                gpu_absent: s.gpu_util_pct.is_none(),
            },
            None => {
                let prev = ring.back();
                TelemetrySample {
                    ts_ms,
                    replica_id: replica_id.to_owned(),
                    gpu_util_pct: prev.map_or(0.0, |p| p.gpu_util_pct),
                    mem_bytes: prev.map_or(0, |p| p.mem_bytes),
                    stale: true,
                    gpu_absent: prev.is_none_or(|p| p.gpu_absent),
                }
            }
        };
        if ring.len() == self.ring_capacity {
            ring.pop_front();
        }
        ring.push_back(sample.clone());
        sample
    }

    /// Reads the replica's stats from the runtime and records one sample.
    pub async fn sample_replica(&self, replica: &ReplicaHandle, runtime: &RuntimeManager, ts_ms: i64) -> TelemetrySample {
        let stats = runtime.stats(replica).await.ok();
        self.record_sample(&replica.replica_id, stats, ts_ms)
    }

    pub fn samples(&self, replica_id: &str) -> Vec<TelemetrySample> {
        self.samples
            .lock()
            .get(replica_id)
            .map(|r| r.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Records one tick for a model from the samples just taken. A tick with
    /// no fresh sample is dropped.
    pub fn record_tick(&self, model_id: &str, ts_ms: i64, samples: &[TelemetrySample]) {
        let fresh: Vec<&TelemetrySample> = samples.iter().filter(|s| !s.stale).collect();
        if fresh.is_empty() {
            return;
        }
        let hist = self.histogram(model_id);
        let pct = |p: f64| hist.percentile(p).ok();
        let row = SeriesRow {
            ts_ms,
            gpu_util_pct: fresh.iter().map(|s| s.gpu_util_pct).sum::<f64>() / fresh.len() as f64,
            mem_bytes: fresh.iter().map(|s| s.mem_bytes).sum(),
            p50_ms: pct(50.0),
            p95_ms: pct(95.0),
            p99_ms: pct(99.0),
            gpu_absent: fresh.iter().all(|s| s.gpu_absent),
        };
        let mut series = self.series.lock();
        let ring = series.entry(model_id.to_owned()).or_default();
        if ring.len() == self.ring_capacity {
            ring.pop_front();
        }
        ring.push_back(row);
    }

    /// Samples every live replica once and records a tick per model.
    pub async fn sample_tick(&self, runtime: &RuntimeManager, ts_ms: i64) {
        let mut by_model: HashMap<String, Vec<TelemetrySample>> = HashMap::new();
        for replica in runtime.all_replicas() {
            let handle = replica.handle();
            let sample = self.sample_replica(&handle, runtime, ts_ms).await;
            by_model.entry(handle.model_id).or_default().push(sample);
        }
        for (model_id, samples) in by_model {
            self.record_tick(&model_id, ts_ms, &samples);
        }
    }

    /// Rows with `from_ms <= ts_ms <= to_ms`, oldest first.
    pub fn export_series(&self, model_id: &str, from_ms: i64, to_ms: i64) -> Vec<SeriesRow> {
        self.series
            .lock()
            .get(model_id)
            .map(|ring| {
                ring.iter()
                    .filter(|r| (from_ms..=to_ms).contains(&r.ts_ms))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// RFC-4180 rendering; empty percentile fields mean no latency observed yet.
pub fn series_csv(rows: &[SeriesRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SERIES_CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.ts_ms.to_string(),
            r.gpu_util_pct.to_string(),
            r.mem_bytes.to_string(),
            opt(r.p50_ms),
            opt(r.p95_ms),
            opt(r.p99_ms),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(gpu: f64, mem: u64) -> Option<ContainerStats> {
        Some(ContainerStats {
            gpu_util_pct: Some(gpu),
            mem_bytes: mem,
        })
    }

    #[test]
    fn pass_through_and_stale_carry() {
        let t = Telemetry::default();
        let s = t.record_sample("r1", stats(50.0, 1_073_741_824), 1000);
        assert_eq!((s.gpu_util_pct, s.mem_bytes, s.stale), (50.0, 1_073_741_824, false));
        let s = t.record_sample("r1", None, 2000);
        assert!(s.stale);
        assert_eq!((s.gpu_util_pct, s.mem_bytes), (50.0, 1_073_741_824));
    }

    #[test]
    fn ring_keeps_most_recent() {
        let t = Telemetry::new(100);
        for i in 0..200 {
            t.record_sample("r", stats(1.0, i), i as i64 * 1000);
        }
        let s = t.samples("r");
        assert_eq!(s.len(), 100);
        assert_eq!(s[0].mem_bytes, 100);
        assert_eq!(s[99].mem_bytes, 199);
    }

    #[test]
    fn observe_and_percentile() {
        let t = Telemetry::default();
        t.observe_latency("m", 3);
        t.observe_latency("m", 0);
        t.observe_latency("m", 1_000_000);
        let h = t.histogram("m");
        assert_eq!(h.counts[2], 1);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[17], 1);
        assert_eq!(h.sum_ms, 1_000_003);
        assert_eq!(t.histogram("other").percentile(50.0), Err(PercentileError::EmptyHistogram));
    }

    #[test]
    fn scripted_trace_minus_stale_ticks() {
        let t = Telemetry::default();
        t.observe_latency("m", 42);
        let trace = [stats(10.0, 100), None, stats(30.0, 300), None, stats(50.0, 500)];
        for (i, s) in trace.iter().enumerate() {
            let ts = 1000 * i as i64;
            let sample = t.record_sample("r1", *s, ts);
            t.record_tick("m", ts, &[sample]);
        }
        let rows = t.export_series("m", 0, i64::MAX);
        let got: Vec<(i64, f64, u64)> = rows.iter().map(|r| (r.ts_ms, r.gpu_util_pct, r.mem_bytes)).collect();
        assert_eq!(got, vec![(0, 10.0, 100), (2000, 30.0, 300), (4000, 50.0, 500)]);
        assert!(rows.iter().all(|r| r.p50_ms == Some(64.0)));
        let csv = series_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "ts_ms,gpu_util_pct,mem_bytes,p50_ms,p95_ms,p99_ms");
        assert_eq!(csv.lines().nth(1).unwrap(), "0,10,100,64,64,64");
        assert_eq!(series_csv(&t.export_series("m", 5000, 9000)).lines().count(), 1);
    }

    #[test]
    fn all_stale_window_is_header_only() {
        let t = Telemetry::default();
        for i in 0..3 {
            let s = t.record_sample("r1", None, i);
            t.record_tick("m", i, &[s]);
        }
        assert!(t.export_series("m", 0, 10).is_empty());
        assert_eq!(series_csv(&[]), "ts_ms,gpu_util_pct,mem_bytes,p50_ms,p95_ms,p99_ms\n");
    }
}
