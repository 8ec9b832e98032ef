//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Randomized checks use fixed seeds.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use modelhub_core::acquisition::{scan_local, verify_bundle, WeightBundle};
use modelhub_core::evaluation::{
    rubric_label, verify_audit, AuditKind, AuditLog, AuditVerdict, EvaluationError, EvaluationStore, ScoreDraft, RUBRIC,
};
use modelhub_core::gateway::{form_batches, replay_autoscale, BatchPolicy, GatewayConfig, ScalePolicy};
use modelhub_core::net::Egress;
use modelhub_core::registry::{load_registry, ModelSource, ModelStatus, Registry, RegistryError, RegistryPaths};
use modelhub_core::runtime::mock::MockRuntime;
use modelhub_core::runtime::stub::ENV_DELAY_MS;
use modelhub_core::telemetry::{bucket_index, LatencyHistogram, BUCKET_BOUNDS_MS};
use modelhub_core::testkit::{case_manifest, job, png_1x1, write_files, Rig};
use modelhub_service::{serve_with, RuntimeKind, Server, ServiceConfig};
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::multipart::{Form, Part};
use serde_json::{json, Value};

/// SHA-256 of empty input, from `sha256sum < /dev/null`.
const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

/// The clinician rubric as published, row by row.
const RUBRIC_ROWS: [(u8, &str); 5] = [
    (0, "No answer"),
    (1, "Wrong answer"),
    (2, "Partially correct answer"),
    (3, "Correct answer with wrong reasoning"),
    (4, "Correct answer with correct reasoning"),
];

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Every egress recorder and mock engine used by the run, checked by the
/// isolation criterion at the end.
#[derive(Default)]
struct Witness {
    egress: Mutex<Vec<Arc<Egress>>>,
    mocks: Mutex<Vec<MockRuntime>>,
}

impl Witness {
    fn rig(&self, config: GatewayConfig) -> Rig {
        let rig = Rig::new(config);
        self.egress.lock().push(rig.egress.clone());
        self.mocks.lock().push(rig.mock.clone());
        rig
    }

    async fn server(&self, dir: &Path, seed: bool) -> Server {
        let egress = Egress::new(false);
        let mock = MockRuntime::new();
        self.egress.lock().push(egress.clone());
        self.mocks.lock().push(mock.clone());
        let config = ServiceConfig {
            listen_addr: "127.0.0.1:0".into(),
            data_dir: dir.join("data"),
            blob_root: dir.join("blobs"),
            runtime: RuntimeKind::Mock,
            allow_outbound: false,
            seed_fixtures: seed,
            ..ServiceConfig::default()
        };
        serve_with(config, Arc::new(mock), egress).await.expect("service starts")
    }
}

async fn post_json(http: &reqwest::Client, url: String, body: &Value) -> (u16, Value) {
    let resp = http.post(url).json(body).send().await.expect("request");
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or(Value::Null))
}

async fn get_json(http: &reqwest::Client, url: String) -> Value {
    http.get(url).send().await.expect("request").json().await.expect("json body")
}

async fn ingest(http: &reqwest::Client, url: &str, dir: &Path, dataset: &str, n: usize) -> Result<(), String> {
    let manifest = case_manifest(dir, dataset, dataset, n);
    let (status, body) = post_json(
        http,
        format!("{url}/api/cases/ingest"),
        &json!({"manifest": manifest, "base_dir": dir}),
    )
    .await;
    ensure!(status == 201 && body["ingested"] == n, "ingest {dataset}: {status} {body}");
    Ok(())
}

/// Submits every `(case, model, version, score)` with bounded concurrency.
async fn submit_all(http: &reqwest::Client, url: &str, scores: Vec<(String, String, String, i64)>) -> Result<(), String> {
    use futures::StreamExt;
    let failures: Vec<String> = futures::stream::iter(scores)
        .map(|(case, model, version, score)| async move {
            let body = json!({"case_id": case, "model_id": model, "version": version, "score": score});
            let (status, resp) = post_json(http, format!("{url}/api/scores"), &body).await;
            (status != 201).then(|| format!("{status} {resp}"))
        })
        .buffer_unordered(16)
        .filter_map(|f| async move { f })
        .collect()
        .await;
    ensure!(failures.is_empty(), "{} score submissions failed, first: {}", failures.len(), failures[0]);
    Ok(())
}

fn csv_rows(doc: &str) -> Result<Vec<HashMap<String, String>>, String> {
    let mut reader = csv::Reader::from_reader(doc.as_bytes());
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| e.to_string())?;
            Ok(header.iter().map(str::to_owned).zip(r.iter().map(str::to_owned)).collect())
        })
        .collect()
}

async fn score_accounting(w: &Witness) -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = w.server(tmp.path(), true).await;
    let url = server.url();
    let http = reqwest::Client::new();
    let cases = tmp.path().join("cases");
    std::fs::create_dir_all(&cases).map_err(|e| e.to_string())?;
    ingest(&http, &url, &cases, "colon", 98).await?;
    ingest(&http, &url, &cases, "renal", 105).await?;
    let models = get_json(&http, format!("{url}/api/models")).await;
    let models: Vec<(String, String)> = models
        .as_array()
        .ok_or("model list")?
        .iter()
        .map(|m| (m["model_id"].as_str().unwrap().to_owned(), m["version"].as_str().unwrap().to_owned()))
        .collect();
    ensure!(models.len() == 5, "expected 5 registered stub models, found {}", models.len());

    let mut scores = Vec::new();
    for (dataset, n) in [("colon", 98), ("renal", 105)] {
        for i in 0..n {
            for (m, (id, ver)) in models.iter().enumerate() {
                scores.push((format!("{dataset}-{i:03}"), id.clone(), ver.clone(), ((i + m) % 5) as i64));
            }
        }
    }
    submit_all(&http, &url, scores).await?;

    let doc = http
        .get(format!("{url}/api/export/scores.csv"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .text()
        .await
        .map_err(|e| e.to_string())?;
    let rows = csv_rows(&doc)?;
    ensure!(rows.len() == 1015, "export has {} rows, expected 1015", rows.len());
    let mut totals = HashMap::new();
    for dataset in ["colon", "renal"] {
        let agg = get_json(&http, format!("{url}/api/scores/aggregate?dataset={dataset}")).await;
        totals.insert(dataset, agg["total"].as_u64().unwrap_or(0));
    }
    ensure!(
        totals["colon"] == 490 && totals["renal"] == 525,
        "aggregate totals colon={} renal={}",
        totals["colon"],
        totals["renal"]
    );
    server.shutdown().await.map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("1015 rows, colon 490, renal 525, {:.1}s", elapsed.as_secs_f64()))
}

async fn distribution_fixtures(w: &Witness) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = w.server(tmp.path(), false).await;
    let url = server.url();
    let http = reqwest::Client::new();
    let (status, rec) = post_json(
        &http,
        format!("{url}/api/models"),
        &json!({"repo_id": "org/fixture-vlm", "version": "1"}),
    )
    .await;
    ensure!(status == 201, "register: {status} {rec}");
    let id = rec["model_id"].as_str().unwrap().to_owned();
    let cases = tmp.path().join("cases");
    std::fs::create_dir_all(&cases).map_err(|e| e.to_string())?;
    ingest(&http, &url, &cases, "colon", 98).await?;
    ingest(&http, &url, &cases, "renal", 105).await?;
    let mut scores = Vec::new();
    for i in 0..98 {
        scores.push((format!("colon-{i:03}"), id.clone(), "1".into(), if i < 53 { 4 } else { 3 }));
    }
    for i in 0..105 {
        scores.push((format!("renal-{i:03}"), id.clone(), "1".into(), if i < 101 { 1 } else { 2 }));
    }
    submit_all(&http, &url, scores).await?;

    let colon = get_json(&http, format!("{url}/api/scores/aggregate?dataset=colon")).await;
    let renal = get_json(&http, format!("{url}/api/scores/aggregate?dataset=renal")).await;
    let colon_pct = colon["percentages"][4].as_f64().unwrap_or(-1.0);
    let renal_pct = renal["percentages"][1].as_f64().unwrap_or(-1.0);
    ensure!((colon_pct - 54.08).abs() <= 0.01, "colon s=4 at {colon_pct}%");
    ensure!((renal_pct - 96.19).abs() <= 0.01, "renal s=1 at {renal_pct}%");

    let doc = http
        .get(format!("{url}/api/export/scores.csv"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .text()
        .await
        .map_err(|e| e.to_string())?;
    let rows = csv_rows(&doc)?;
    let share = |dataset: &str, score: &str| {
        let of: Vec<_> = rows.iter().filter(|r| r["dataset"] == dataset).collect();
        of.iter().filter(|r| r["score"] == score).count() as f64 * 100.0 / of.len() as f64
    };
    let (csv_colon, csv_renal) = (share("colon", "4"), share("renal", "1"));
    ensure!((csv_colon - 54.08).abs() <= 0.01, "CSV colon s=4 at {csv_colon}%");
    ensure!((csv_renal - 96.19).abs() <= 0.01, "CSV renal s=1 at {csv_renal}%");
    server.shutdown().await.map_err(|e| e.to_string())?;
    Ok(format!("colon {colon_pct:.2}%, renal {renal_pct:.2}% (aggregate and CSV)"))
}

fn rubric_conformance() -> Outcome {
    ensure!(RUBRIC == RUBRIC_ROWS, "rubric table differs: {RUBRIC:?}");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut store = EvaluationStore::in_memory();
    store
        .ingest_cases(&case_manifest(tmp.path(), "colon", "c", 1), tmp.path())
        .map_err(|e| e.to_string())?;
    for s in -10i64..=10 {
        let valid = (0..=4).contains(&s);
        let label = rubric_label(s);
        ensure!(label.is_some() == valid, "label for {s}: {label:?}");
        if let Some(l) = label {
            ensure!(RUBRIC_ROWS[s as usize].1 == l, "label for {s} is {l}");
        }
        let result = store.submit_score(
            ScoreDraft {
                clinician_id: "dr".into(),
                case_id: "c-000".into(),
                model_id: "m".into(),
                version: "1".into(),
                score: s,
                comment: String::new(),
            },
            |_, _| true,
        );
        match (valid, result) {
            (true, Ok(e)) => ensure!(i64::from(e.score) == s, "stored {} for {s}", e.score),
            (false, Err(EvaluationError::ScoreOutOfRange(got))) => ensure!(got == s, "rejected {got} for {s}"),
            (_, other) => return Err(format!("score {s}: {other:?}")),
        }
    }
    Ok("5 rows verbatim; 21 scores in [-10, 10], exactly 0..=4 accepted".into())
}

async fn zero_loss_hot_swap(w: &Witness) -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5a9);
    for trial in 0..20 {
        let rig = w.rig(GatewayConfig::default());
        for v in ["1", "2"] {
            rig.runtime.set_replica_env("m", v, ENV_DELAY_MS, "15");
        }
        rig.deploy("m", "1", 2).await;
        let spec2 = rig.build("m", "2").await;
        let swapped_at: Arc<Mutex<Option<Instant>>> = Arc::default();
        let load: Vec<_> = (0..200)
            .map(|i| {
                let gw = rig.gateway.clone();
                let swapped_at = swapped_at.clone();
                let delay = rng.random_range(0..250u64);
                tokio::spawn(async move {
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                    let after_swap = swapped_at.lock().is_some();
                    (after_swap, gw.submit(job(format!("j{i}"), "m", "Describe")).await)
                })
            })
            .collect();
        tokio::time::sleep(Duration::from_millis(rng.random_range(0..150))).await;
        let report = rig
            .gateway
            .hot_swap("m", "2", spec2)
            .await
            .map_err(|e| format!("trial {trial}: swap failed: {e}"))?;
        *swapped_at.lock() = Some(Instant::now());
        ensure!(report.new_version == "2", "trial {trial}: report {report:?}");
        let mut ok = 0;
        for h in load {
            let (after_swap, result) = h.await.map_err(|e| e.to_string())?;
            let r = result.map_err(|e| format!("trial {trial}: job failed: {e}"))?;
            ensure!(!after_swap || r.version == "2", "trial {trial}: post-swap job served by {}", r.version);
            ok += 1;
        }
        let audited = rig.audit.count_kind(AuditKind::Inference);
        ensure!(ok == 200 && audited == 200, "trial {trial}: {ok} ok, {audited} audited");
    }
    Ok("20 trials x 200 jobs, 0 failures, post-swap jobs on new version".into())
}

fn batching_properties() -> Outcome {
    let policy = BatchPolicy { max_batch: 8, window_ms: 50 };
    let ten: Vec<(u64, usize)> = (0..10).map(|i| (0, i)).collect();
    let b = form_batches(&ten, &policy);
    let shape: Vec<(usize, u64)> = b.iter().map(|b| (b.jobs.len(), b.dispatch_ms)).collect();
    ensure!(shape == [(8, 0), (2, 50)], "[8,2] example gave {shape:?}");
    let spread: Vec<(u64, usize)> = (0..5).map(|i| (i * 10, i as usize)).collect();
    let b = form_batches(&spread, &BatchPolicy { max_batch: 1, window_ms: 50 });
    let shape: Vec<(usize, u64)> = b.iter().map(|b| (b.jobs.len(), b.dispatch_ms)).collect();
    ensure!(shape == [(1, 0), (1, 10), (1, 20), (1, 30), (1, 40)], "B=1 example gave {shape:?}");

    let mut rng = StdRng::seed_from_u64(0xba7c);
    for trace in 0..1000 {
        let policy = BatchPolicy {
            max_batch: rng.random_range(1..=16),
            window_ms: rng.random_range(0..=120),
        };
        let mut t = 0u64;
        let queue: Vec<(u64, usize)> = (0..rng.random_range(0..=300))
            .map(|i| {
                t += if rng.random_bool(0.3) { 0 } else { rng.random_range(0..40) };
                (t, i)
            })
            .collect();
        let batches = form_batches(&queue, &policy);
        let flat: Vec<usize> = batches.iter().flat_map(|b| b.jobs.iter().copied()).collect();
        ensure!(flat == (0..queue.len()).collect::<Vec<_>>(), "trace {trace}: conservation/FIFO violated");
        for b in &batches {
            ensure!(!b.jobs.is_empty() && b.jobs.len() <= policy.max_batch, "trace {trace}: batch of {}", b.jobs.len());
            let first = queue[b.jobs[0]].0;
            let last = queue[*b.jobs.last().unwrap()].0;
            ensure!(b.first_arrival_ms == first, "trace {trace}: first arrival mismatch");
            ensure!(
                last <= b.dispatch_ms && b.dispatch_ms <= first + policy.window_ms,
                "trace {trace}: dispatch {} outside [{last}, {}]",
                b.dispatch_ms,
                first + policy.window_ms
            );
        }
    }
    Ok("[8,2] and B=1 exact; 1000 random traces conserve, keep FIFO, size <= B, window".into())
}

fn autoscaler_determinism() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xa5ca1e);
    let mut decisions = 0usize;
    for trace in 0..100 {
        let min = rng.random_range(1..=3);
        let policy = ScalePolicy {
            min_replicas: min,
            max_replicas: rng.random_range(min..=6),
            q_hi: rng.random_range(2.0..8.0),
            q_lo: rng.random_range(0.0..1.5),
            sustain_ms: rng.random_range(0..5000),
            cooldown_ms: rng.random_range(0..12000),
        };
        let mut t = 0i64;
        let mut level: f64 = rng.random_range(0.0..10.0);
        let depths: Vec<(i64, f64)> = (0..rng.random_range(1..400))
            .map(|_| {
                t += rng.random_range(100..1500);
                if rng.random_bool(0.05) {
                    level = rng.random_range(0.0..20.0);
                }
                (t, (level + rng.random_range(-1.0..1.0)).max(0.0))
            })
            .collect();
        let start = rng.random_range(policy.min_replicas..=policy.max_replicas);
        let first = replay_autoscale(&depths, start, &policy);
        let second = replay_autoscale(&depths, start, &policy);
        ensure!(first == second, "trace {trace}: replays differ");
        ensure!(
            first.iter().all(|&r| (policy.min_replicas..=policy.max_replicas).contains(&r)),
            "trace {trace}: target left [{}, {}]",
            policy.min_replicas,
            policy.max_replicas
        );
        decisions += first.windows(2).filter(|w| w[0] != w[1]).count();
    }
    ensure!(decisions > 0, "no trace ever scaled");
    Ok(format!("100 traces replayed twice identically, {decisions} scale changes, all clamped"))
}

fn audit_chain() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xa0d17);
    let log = AuditLog::in_memory();
    let kinds = [AuditKind::Registration, AuditKind::Acquisition, AuditKind::Inference, AuditKind::Score, AuditKind::Swap, AuditKind::Export];
    for i in 0..1000 {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let payload = json!({"i": i, "model_id": format!("m-{}", rng.random_range(0..50)), "score": rng.random_range(0..5)});
        log.append_at(kind, payload, 1_700_000_000_000 + i * 37)
            .map_err(|e| e.to_string())?;
    }
    let bytes = log.to_bytes();
    ensure!(verify_audit(&bytes) == AuditVerdict::Ok { entries: 1000 }, "clean log: {}", verify_audit(&bytes));
    for trial in 0..100 {
        let pos = rng.random_range(0..bytes.len());
        let mut tampered = bytes.clone();
        tampered[pos] ^= rng.random_range(1..=255u8);
        let seq = bytes[..pos].iter().filter(|&&b| b == b'\n').count() as u64;
        match verify_audit(&tampered) {
            AuditVerdict::BrokenAt { seq: at } if at <= seq => {}
            other => return Err(format!("trial {trial}: byte {pos} (seq {seq}) gave {other}")),
        }
    }
    Ok("1000-entry log Ok; 100/100 single-byte mutations caught at or before their seq".into())
}

fn percentile_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x9e7c);
    let ps = [0.1, 1.0, 25.0, 50.0, 90.0, 95.0, 99.0, 99.9, 100.0];
    for set in 0..500 {
        let n = 10f64.powf(rng.random_range(0.0..=4.0)).round().clamp(1.0, 10_000.0) as usize;
        let scale = rng.random_range(0.0..18.5f64);
        let mut values: Vec<u64> = (0..n)
            .map(|_| 2f64.powf(rng.random_range(0.0..scale)).floor() as u64 - rng.random_range(0..=1))
            .collect();
        let hist = LatencyHistogram::from_values(values.iter().copied());
        values.sort_unstable();
        for p in ps {
            let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
            let exact = values[rank - 1];
            let reported = hist.percentile(p).map_err(|e| e.to_string())?;
            let ok = match BUCKET_BOUNDS_MS.get(bucket_index(exact)) {
                Some(&edge) => {
                    exact as f64 <= reported && reported <= edge as f64 && reported <= (2 * exact).max(1) as f64
                }
                None => reported == hist.max_ms as f64,
            };
            ensure!(ok, "set {set} (n={n}) p{p}: exact {exact}, reported {reported}, max {}", hist.max_ms);
        }
    }
    Ok("500 multisets (n 1..10000): exact <= reported <= max(2x exact, 1), overflow reports max".into())
}

fn registry_event_sourcing() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x2e9);
    let statuses = [
        ModelStatus::Acquiring,
        ModelStatus::Running,
        ModelStatus::Stopped,
        ModelStatus::Failed("boom".into()),
        ModelStatus::Registered,
    ];
    let mut ops_total = 0;
    for run in 0..100 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let paths = RegistryPaths::in_dir(tmp.path());
        let mut live = Registry::open(&paths).map_err(|e| e.to_string())?;
        for _ in 0..rng.random_range(1..=200) {
            ops_total += 1;
            let pick = |rng: &mut StdRng, live: &Registry| {
                let recs = live.records();
                (!recs.is_empty()).then(|| {
                    let r = &recs[rng.random_range(0..recs.len())];
                    (r.model_id.clone(), r.version.clone())
                })
            };
            let _ = match rng.random_range(0..4) {
                0 => live
                    .register_model(
                        ModelSource::hub(format!("org/m{}", rng.random_range(0..8))),
                        "M",
                        &format!("{}", rng.random_range(1..4)),
                        "op",
                    )
                    .map(drop),
                1 => match pick(&mut rng, &live) {
                    Some((id, v)) => {
                        let to = statuses[rng.random_range(0..statuses.len())].clone();
                        live.transition_status(&id, &v, to).map(drop)
                    }
                    None => Ok(()),
                },
                2 => match pick(&mut rng, &live) {
                    Some((id, v)) => {
                        let digest = modelhub_core::digest::sha256_hex(id.as_bytes());
                        live.mark_containerized(&id, &v, &digest, "modelhub/stub:x").map(drop)
                    }
                    None => Ok(()),
                },
                _ => match pick(&mut rng, &live) {
                    Some((id, v)) => live
                        .record_access(&id, &v, &format!("audit-{}", rng.random_range(0..999)), None)
                        .map(drop),
                    None => Ok(()),
                },
            };
        }
        let journal = std::fs::read(&paths.journal).map_err(|e| e.to_string())?;
        let replayed = load_registry(&journal).map_err(|e| format!("run {run}: {e}"))?;
        ensure!(replayed == live, "run {run}: replay differs from live registry");
        let reopened = Registry::open(&paths).map_err(|e| format!("run {run}: {e}"))?;
        ensure!(reopened == live, "run {run}: reopen differs from live registry");

        if journal.is_empty() {
            continue;
        }
        let cut = loop {
            let c = rng.random_range(1..journal.len());
            if journal[c - 1] != b'\n' {
                break c;
            }
        };
        let line_start = journal[..cut].iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) as u64;
        match load_registry(&journal[..cut]) {
            Err(RegistryError::CorruptJournal { offset, .. }) if offset == line_start => {}
            other => return Err(format!("run {run}: cut at {cut} gave {other:?}")),
        }
    }
    Ok(format!("100 random sequences ({ops_total} ops) replay identically; every mid-line truncation is CorruptJournal"))
}

async fn isolation_policy(w: &Witness) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = w.server(tmp.path(), false).await;
    let url = server.url();
    let http = reqwest::Client::new();
    let weights = tmp.path().join("weights");
    write_files(&weights, &[("model.safetensors", b"w"), ("config.json", b"{}")]);
    for v in ["1", "2"] {
        let (s, b) = post_json(&http, format!("{url}/api/models"), &json!({"local_path": weights, "version": v})).await;
        ensure!(s == 201, "register: {s} {b}");
    }
    let id = get_json(&http, format!("{url}/api/models")).await[0]["model_id"]
        .as_str()
        .unwrap()
        .to_owned();
    for step in ["1/acquire", "2/acquire", "1/start", "2/swap"] {
        let (s, b) = post_json(&http, format!("{url}/api/models/{id}/{step}"), &Value::Null).await;
        ensure!(s == 200, "{step}: {s} {b}");
    }
    let form = Form::new()
        .text("model_id", id.clone())
        .text("prompt", "Describe")
        .part("image", Part::bytes(png_1x1()).file_name("x.png"));
    let resp = http.post(format!("{url}/api/analyze")).multipart(form).send().await.map_err(|e| e.to_string())?;
    ensure!(resp.status() == 200, "analyze: {}", resp.status());
    let (s, _) = post_json(&http, format!("{url}/api/models"), &json!({"repo_id": "org/remote", "version": "1"})).await;
    ensure!(s == 201, "register remote: {s}");
    let remote = get_json(&http, format!("{url}/api/models")).await;
    let remote_id = remote
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["source"]["kind"] == "remote_hub")
        .ok_or("remote model listed")?["model_id"]
        .as_str()
        .unwrap()
        .to_owned();
    let (s, b) = post_json(&http, format!("{url}/api/models/{remote_id}/1/acquire"), &Value::Null).await;
    ensure!(s == 503 && b["error_code"] == "NetworkUnreachable", "remote acquire: {s} {b}");
    server.shutdown().await.map_err(|e| e.to_string())?;

    let egress = w.egress.lock();
    let observed: usize = egress.iter().map(|e| e.attempts().len()).sum();
    let external: usize = egress.iter().map(|e| e.external_attempts()).sum();
    ensure!(observed > 0, "recorders saw no traffic at all");
    ensure!(external == 0, "{external} non-loopback connection attempts");
    let mocks = w.mocks.lock();
    let creates: Vec<_> = mocks.iter().flat_map(|m| m.create_requests()).collect();
    ensure!(!creates.is_empty(), "no containers were created");
    let leaky = creates.iter().filter(|c| !c.is_isolated()).count();
    ensure!(leaky == 0, "{leaky} of {} create requests lack the no-egress network", creates.len());
    Ok(format!(
        "{observed} connections across {} recorders, 0 non-loopback; {} creates all on the internal network",
        egress.len(),
        creates.len()
    ))
}

fn digest_correctness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(0xd16e57);
    let weights: Vec<u8> = (0..4096).map(|_| rng.random()).collect();
    write_files(
        tmp.path(),
        &[("model.safetensors", &weights), ("config.json", b"{\"layers\":2}\n"), ("empty.bin", b"")],
    );
    let manifest = scan_local(tmp.path()).map_err(|e| e.to_string())?;
    let empty = manifest.files.iter().find(|e| e.path == "empty.bin").ok_or("empty entry")?;
    ensure!(empty.sha256 == EMPTY_SHA256 && empty.size_bytes == 0, "empty digest {}", empty.sha256);
    let bundle = WeightBundle {
        model_id: "m".into(),
        version: "1".into(),
        root_dir: tmp.path().to_owned(),
        total_bytes: manifest.files.iter().map(|e| e.size_bytes).sum(),
        manifest: manifest.files.clone(),
        sealed: true,
    };
    ensure!(verify_bundle(&bundle), "pristine bundle fails verification");
    let files: Vec<_> = manifest.files.iter().filter(|e| e.size_bytes > 0).collect();
    for trial in 0..100 {
        let entry = files[rng.random_range(0..files.len())];
        let path = tmp.path().join(&entry.path);
        let original = std::fs::read(&path).map_err(|e| e.to_string())?;
        let mut flipped = original.clone();
        let pos = rng.random_range(0..flipped.len());
        flipped[pos] ^= 1 << rng.random_range(0..8);
        std::fs::write(&path, &flipped).map_err(|e| e.to_string())?;
        ensure!(!verify_bundle(&bundle), "trial {trial}: flip in {} byte {pos} undetected", entry.path);
        std::fs::write(&path, &original).map_err(|e| e.to_string())?;
    }
    ensure!(verify_bundle(&bundle), "restored bundle fails verification");
    Ok("100/100 single-bit flips detected; empty-file digest e3b0c442...b855".into())
}

fn main() -> ExitCode {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let witness = Witness::default();
    let results: Vec<(&str, Outcome)> = vec![
        ("score_accounting", runtime.block_on(score_accounting(&witness))),
        ("score_distribution_fixtures", runtime.block_on(distribution_fixtures(&witness))),
        ("rubric_conformance", rubric_conformance()),
        ("zero_loss_hot_swap", runtime.block_on(zero_loss_hot_swap(&witness))),
        ("batching_properties", batching_properties()),
        ("autoscaler_determinism_and_clamping", autoscaler_determinism()),
        ("audit_chain_tamper_evidence", audit_chain()),
        ("percentile_oracle", percentile_oracle()),
        ("registry_event_sourcing", registry_event_sourcing()),
        ("isolation_policy", runtime.block_on(isolation_policy(&witness))),
        ("digest_correctness", digest_correctness()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name:<36} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<36} {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
