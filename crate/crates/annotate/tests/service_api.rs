use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cnseg_annotate::service::{human_majorities, Predictions};
use cnseg_annotate::store::{fold, read_log};
use cnseg_annotate::{router, AnnotateError, AnnotationService, AnnotationStore, LabelSubmission, NextTask};
use cnseg_core::{Label, LabelOntology, LabeledSentence};
use http_body_util::BodyExt;
use proptest::prelude::*;
use tower::ServiceExt;

const LABELS: [&str; 4] = ["SEX", "OTHER", "ALLERGIES", "SERVICE"];

fn corpus(n: usize) -> Vec<LabeledSentence> {
    (0..n)
        .map(|i| LabeledSentence {
            sentence_id: format!("s{i}"),
            note_id: format!("n{}", i / 5),
            position: i % 5,
            text: format!("sentence number {i}"),
            label: Label::canonical("OTHER"),
        })
        .collect()
}

fn service(dir: &std::path::Path, n: usize) -> AnnotationService {
    let store = AnnotationStore::open(dir.join("log.jsonl")).unwrap();
    AnnotationService::new(corpus(n), LabelOntology::default(), store)
}

fn submit(svc: &AnnotationService, sentence: &str, annotator: &str, label: &str) -> cnseg_annotate::Result<usize> {
    svc.submit(LabelSubmission {
        sentence_id: sentence.into(),
        annotator_id: annotator.into(),
        label: label.into(),
        timestamp: Some(0),
    })
    .map(|a| a.store_size)
}

fn next_id(svc: &AnnotationService, annotator: &str) -> Option<String> {
    match svc.next_task(annotator).unwrap() {
        NextTask::Sentence { sentence_id, .. } => Some(sentence_id),
        NextTask::Done { .. } => None,
    }
}

#[test]
fn two_annotators_interleaving_see_everything_once() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 10);
    let mut seen: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    // uneven interleaving: a labels twice for every label by b
    let schedule = ["a", "a", "b"];
    let mut step = 0;
    loop {
        let who = schedule[step % schedule.len()];
        step += 1;
        let other = if who == "a" { "b" } else { "a" };
        match next_id(&svc, who) {
            Some(id) => {
                submit(&svc, &id, who, LABELS[step % LABELS.len()]).unwrap();
                seen.entry(who).or_default().push(id);
            }
            None if next_id(&svc, other).is_none() => break,
            None => {}
        }
        assert!(step < 100);
    }
    let expected: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    assert_eq!(seen["a"], expected);
    assert_eq!(seen["b"], expected);
    assert_eq!(svc.export().len(), 20);
    assert_eq!(svc.store().index().len(), 20);
}

#[test]
fn fresh_and_finished_annotators() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 3);
    match svc.next_task("new").unwrap() {
        NextTask::Sentence {
            sentence_id, labels, ..
        } => {
            assert_eq!(sentence_id, "s0");
            assert!(labels.iter().any(|l| l.as_str() == "OTHER"));
        }
        NextTask::Done { .. } => panic!("fresh annotator is done"),
    }
    for i in 0..3 {
        submit(&svc, &format!("s{i}"), "x", "SEX").unwrap();
    }
    assert_eq!(svc.next_task("x").unwrap(), NextTask::Done { done: true });
}

#[test]
fn invalid_submissions() {
    let dir = tempfile::tempdir().unwrap();
    let svc = service(dir.path(), 3);
    assert!(matches!(
        submit(&svc, "s0", "a", "NOT_A_SECTION"),
        Err(AnnotateError::InvalidLabel(_))
    ));
    assert!(matches!(
        submit(&svc, "s99", "a", "SEX"),
        Err(AnnotateError::UnknownSentence(_))
    ));
    assert!(matches!(
        submit(&svc, "s0", " ", "SEX"),
        Err(AnnotateError::MissingAnnotator)
    ));
    assert_eq!(svc.export().len(), 0);
    assert_eq!(submit(&svc, "s0", "a", "sex").unwrap(), 1);
}

#[test]
fn per_system_overlap_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut preds = Predictions::new();
    // three systems predicting on 4, 7 and 10 sentences
    for (system, n) in [("small", 4), ("mid", 7), ("full", 10)] {
        preds.insert(
            system.into(),
            (0..n).map(|i| (format!("s{i}"), Label::canonical("OTHER"))).collect(),
        );
    }
    let svc = service(dir.path(), 10).with_predictions(preds).unwrap();
    for i in 0..10 {
        submit(&svc, &format!("s{i}"), "a", "OTHER").unwrap();
        submit(&svc, &format!("s{i}"), "b", if i % 2 == 0 { "OTHER" } else { "SEX" }).unwrap();
    }
    let ns: BTreeMap<String, usize> = svc.agreement_all().into_iter().map(|r| (r.system, r.n)).collect();
    assert_eq!(ns["small"], 4);
    assert_eq!(ns["mid"], 7);
    assert_eq!(ns["full"], 10);
    assert!(matches!(svc.agreement("nope"), Err(AnnotateError::UnknownSystem(_))));
}

#[test]
fn concurrent_submissions_are_all_stored() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(service(dir.path(), 25));
    let acks: usize = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let svc = Arc::clone(&svc);
                scope.spawn(move || {
                    (0..25)
                        .filter(|i| submit(&svc, &format!("s{i}"), &format!("ann{t}"), LABELS[i % 4]).is_ok())
                        .count()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert_eq!(acks, 200);
    assert_eq!(svc.export().len(), 200);
    let (records, _) = read_log(&dir.path().join("log.jsonl")).unwrap();
    assert_eq!(records.len(), 200);
    assert_eq!(fold(&records), svc.store().index());
}

#[derive(Clone, Debug)]
struct Op {
    sentence: usize,
    annotator: usize,
    label: usize,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        (0..6usize, 0..3usize, 0..4usize).prop_map(|(sentence, annotator, label)| Op {
            sentence,
            annotator,
            label,
        }),
        0..40,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Kill after any ack, optionally leaving a half-written line behind;
    /// reopening must rebuild exactly the acknowledged index.
    #[test]
    fn crash_replay_rebuilds_index(ops in ops(), cut in 0usize..40, torn in proptest::bool::ANY) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let cut = cut.min(ops.len());
        let before = {
            let svc = service(dir.path(), 6);
            for op in &ops[..cut] {
                submit(&svc, &format!("s{}", op.sentence), &format!("a{}", op.annotator), LABELS[op.label]).unwrap();
            }
            svc.store().index()
        };
        if torn {
            let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(br#"{"sentence_id":"s1","annotator_id":"a0","la"#).unwrap();
        }
        let reopened = AnnotationStore::open(&path).unwrap();
        prop_assert_eq!(reopened.index(), before);
        prop_assert_eq!(reopened.len(), cut);
        // the store keeps working after recovery
        drop(reopened);
        let svc = service(dir.path(), 6);
        for op in &ops[cut..] {
            submit(&svc, &format!("s{}", op.sentence), &format!("a{}", op.annotator), LABELS[op.label]).unwrap();
        }
        let (records, _) = read_log(&path).unwrap();
        prop_assert_eq!(records.len(), ops.len());
        prop_assert_eq!(fold(&records), svc.store().index());
    }

    #[test]
    fn agreement_is_pure(ops in ops()) {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), 6);
        for op in &ops {
            submit(&svc, &format!("s{}", op.sentence), &format!("a{}", op.annotator), LABELS[op.label]).unwrap();
        }
        let index = svc.store().index();
        prop_assert_eq!(human_majorities(&index), human_majorities(&index.clone()));
        prop_assert_eq!(svc.distribution("all").unwrap(), svc.distribution("all").unwrap());
    }
}

async fn request(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<serde_json::Value>,
) -> (StatusCode, serde_json::Value) {
    let mut builder = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            builder = builder.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let response = app.clone().oneshot(builder.body(body).unwrap()).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null),
    )
}

#[tokio::test]
async fn http_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut preds = Predictions::new();
    preds.insert(
        "sys".into(),
        (0..3).map(|i| (format!("s{i}"), Label::canonical("SEX"))).collect(),
    );
    let subsets = BTreeMap::from([("first".to_string(), vec!["s0".to_string(), "s1".to_string()])]);
    let svc = service(dir.path(), 3)
        .with_predictions(preds)
        .unwrap()
        .with_subsets(subsets)
        .unwrap();
    let app = router(Arc::new(svc));

    let (status, next) = request(&app, "GET", "/api/next?annotator=ann", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(next["sentence_id"], "s0");
    assert!(next["labels"].as_array().unwrap().iter().any(|l| l == "OTHER"));

    let (status, _) = request(&app, "GET", "/api/agreement?system=sys", None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    for i in 0..3 {
        let body = serde_json::json!({"sentence_id": format!("s{i}"), "annotator_id": "ann", "label": "SEX"});
        let (status, ack) = request(&app, "POST", "/api/label", Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ack["store_size"], i + 1);
    }
    let (_, next) = request(&app, "GET", "/api/next?annotator=ann", None).await;
    assert_eq!(next, serde_json::json!({"done": true}));

    let bad = serde_json::json!({"sentence_id": "s0", "annotator_id": "ann", "label": "NOT_A_SECTION"});
    let (status, err) = request(&app, "POST", "/api/label", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "InvalidLabel");
    let unknown = serde_json::json!({"sentence_id": "zz", "annotator_id": "ann", "label": "SEX"});
    let (status, err) = request(&app, "POST", "/api/label", Some(unknown)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "UnknownSentence");

    let (status, agreement) = request(&app, "GET", "/api/agreement?system=sys", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(agreement["n"], 3);
    assert_eq!(agreement["kappa"], 1.0);
    let (_, all) = request(&app, "GET", "/api/agreement", None).await;
    assert_eq!(all.as_array().unwrap().len(), 1);

    let (status, dist) = request(&app, "GET", "/api/distribution?subset=first", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dist["n_sentences"], 2);
    assert_eq!(dist["columns"], serde_json::json!(["human", "human_majority", "sys"]));
    let (status, _) = request(&app, "GET", "/api/distribution?subset=nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, export) = request(&app, "GET", "/api/export", None).await;
    assert_eq!(export.as_array().unwrap().len(), 3);
}
