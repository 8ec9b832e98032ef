use std::sync::Arc;

use modelhub_client::{AggregateQuery, AnalyzeRequest, AuditVerdict, Client, ClientError, ScoreRequest, Source};
use modelhub_core::net::Egress;
use modelhub_core::runtime::mock::MockRuntime;
use modelhub_core::testkit::{case_manifest, png_1x1, write_files};
use modelhub_service::{serve_with, RuntimeKind, ServiceConfig};

#[tokio::test]
async fn full_workflow_through_the_client() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        listen_addr: "127.0.0.1:0".into(),
        data_dir: tmp.path().join("data"),
        blob_root: tmp.path().join("blobs"),
        runtime: RuntimeKind::Mock,
        ..ServiceConfig::default()
    };
    let server = serve_with(config, Arc::new(MockRuntime::new()), Egress::new(false))
        .await
        .unwrap();
    let client = Client::new(&format!("{}/", server.url()));
    assert_eq!(client.health().await.unwrap()["status"], "ok");
    assert!(client.list_models(None).await.unwrap().is_empty());

    let weights = tmp.path().join("w");
    write_files(&weights, &[("a.bin", b"a")]);
    let source = Source::Local(weights.to_string_lossy().into_owned());
    let rec = client.register(&source, Some("tiny"), "1").await.unwrap();
    let id = rec.model_id.clone();
    client.register(&source, Some("tiny"), "2").await.unwrap();
    for v in ["1", "2"] {
        client.acquire(&id, v).await.unwrap();
    }
    let started = client.start(&id, "1", Some(2)).await.unwrap();
    assert_eq!(started.status.name(), "Running");
    assert_eq!(client.model(&id, "1").await.unwrap().replicas, 2);

    let result = client
        .analyze(AnalyzeRequest {
            model_id: id.clone(),
            version: None,
            prompt: "Describe".into(),
            image: png_1x1(),
            file_name: "x.png".into(),
            deadline_ms: Some(10_000),
        })
        .await
        .unwrap();
    assert_eq!(result.version, "1");

    let report = client.swap(&id, "2").await.unwrap();
    assert_eq!(report.new_version, "2");
    assert_eq!(client.list_models(Some("Running")).await.unwrap()[0].record.version, "2");

    let cases = tmp.path().join("cases");
    std::fs::create_dir_all(&cases).unwrap();
    let summary = client
        .ingest_cases(&case_manifest(&cases, "colon", "colon", 2), &cases)
        .await
        .unwrap();
    assert_eq!(summary.case_ids, ["colon-000", "colon-001"]);
    let mut score = ScoreRequest {
        case_id: "colon-001".into(),
        model_id: id.clone(),
        version: "2".into(),
        score: 3,
        ..ScoreRequest::default()
    };
    let event = client.submit_score(&score).await.unwrap();
    assert_eq!(event.clinician_id, "clinician");
    score.score = 9;
    match client.submit_score(&score).await.unwrap_err() {
        ClientError::Api { status, error_code, .. } => assert_eq!((status, error_code.as_str()), (400, "ScoreOutOfRange")),
        other => panic!("{other:?}"),
    }
    let dist = client
        .aggregate(&AggregateQuery {
            dataset: Some("colon".into()),
            ..AggregateQuery::default()
        })
        .await
        .unwrap();
    assert_eq!(dist.counts, [0, 0, 0, 1, 0]);
    let csv = client.export_scores_csv().await.unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(client.telemetry(&id, None, None).await.is_ok());
    let n = server.hub().audit().len() as u64;
    assert_eq!(client.verify_audit().await.unwrap(), AuditVerdict::Ok { entries: n });

    let stopped = client.stop(&id, "2").await.unwrap();
    assert_eq!(stopped.status.name(), "Stopped");
    server.shutdown().await.unwrap();
    assert_eq!(client.health().await.unwrap_err().error_code(), "ServiceUnreachable");
}
