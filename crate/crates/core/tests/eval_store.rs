mod common;

use std::collections::BTreeSet;

use dermlens_core::eval::{replay_summary, EvalError, EvalStore, NextCase, RatingInput};
use dermlens_core::pipeline::PredictionRecord;
use dermlens_core::{filter_cases, DatasetManifest, Split, Variant};

fn predictions(m: &DatasetManifest) -> Vec<PredictionRecord> {
    let cases = filter_cases(m, Split::Test, &BTreeSet::new());
    let (p, _) = common::pipeline(Variant::Full, "script.jsonl", 4);
    p.run_cases(m, &cases)
}

fn rating(case: &str, scores: [i64; 3], dx: &str) -> RatingInput {
    RatingInput {
        case_id: case.into(),
        clarity: scores[0],
        completeness: scores[1],
        trust: scores[2],
        rater_diagnosis: dx.into(),
    }
}

#[test]
fn sessions_are_seeded_panels() {
    let m = common::manifest();
    let preds = predictions(&m);
    let mut store = EvalStore::new(&preds, &m);
    let a = store.create_session("alice", 3, 7).unwrap();
    let b = store.create_session("bob", 3, 7).unwrap();
    assert_eq!(a.assigned_case_ids, b.assigned_case_ids);
    assert_eq!(a.session_id, "alice-1");
    assert_eq!(store.create_session("alice", 12, 1).unwrap().assigned_case_ids.len(), 12);
    assert!(matches!(
        store.create_session("carol", 200, 1),
        Err(EvalError::InsufficientCases { requested: 200, available: 12 })
    ));
    assert!(matches!(store.create_session("bad id", 1, 1), Err(EvalError::InvalidRater(_))));
}

#[test]
fn payload_matches_stored_prediction() {
    let m = common::manifest();
    let preds = predictions(&m);
    let mut store = EvalStore::new(&preds, &m);
    let s = store.create_session("alice", 12, 3).unwrap();
    for case_id in &s.assigned_case_ids {
        let NextCase::Case(payload) = store.next_case(&s.session_id).unwrap() else {
            panic!("expected a case");
        };
        assert_eq!(&payload.case_id, case_id);
        let record = preds.iter().find(|r| &r.case_id == case_id).unwrap();
        let result = record.diagnosis.result().unwrap();
        assert_eq!(payload.rationale, result.raw_rationale);
        assert_eq!(payload.rationale_steps, result.rationale);
        assert_eq!(payload.model_diagnosis_id, result.label);
        assert_eq!(payload.model_diagnosis, m.class(&result.label).unwrap().display_name);
        let image = store.case_image(case_id).unwrap();
        assert_eq!(image.media_type, "image/png");
        store.submit_rating(&s.session_id, &rating(case_id, [4, 4, 5], "melanoma")).unwrap();
    }
    assert!(matches!(store.next_case(&s.session_id).unwrap(), NextCase::Done(p) if p.rated == 12));
}

#[test]
fn rating_rules() {
    let m = common::manifest();
    let preds = predictions(&m);
    let mut store = EvalStore::new(&preds, &m);
    let s = store.create_session("alice", 3, 7).unwrap();
    let [c0, c1, _] = [0, 1, 2].map(|i| s.assigned_case_ids[i].clone());

    let err = store.submit_rating(&s.session_id, &rating(&c1, [4, 4, 4], "melanoma")).unwrap_err();
    assert!(matches!(err, EvalError::OutOfOrder { .. }));
    let err = store.submit_rating(&s.session_id, &rating(&c0, [6, 4, 4], "melanoma")).unwrap_err();
    assert!(matches!(err, EvalError::LikertOutOfRange { field: "clarity", value: 6 }));
    let err = store.submit_rating(&s.session_id, &rating(&c0, [4, 0, 4], "melanoma")).unwrap_err();
    assert!(matches!(err, EvalError::LikertOutOfRange { field: "completeness", .. }));
    let err = store.submit_rating(&s.session_id, &rating(&c0, [4, 4, 4], "psoriasis")).unwrap_err();
    assert!(matches!(err, EvalError::UnknownDiagnosis(_)));
    assert!(matches!(
        store.submit_rating("nobody-1", &rating(&c0, [4, 4, 4], "melanoma")),
        Err(EvalError::UnknownSession(_))
    ));

    let progress = store.submit_rating(&s.session_id, &rating(&c0, [4, 4, 5], "melanoma")).unwrap();
    assert_eq!(progress.rated, 1);
    let progress = store.submit_rating(&s.session_id, &rating(&c0, [4, 4, 3], "melanoma")).unwrap();
    assert_eq!(progress.rated, 1);
    let ratings: Vec<_> = store.ratings().collect();
    assert_eq!(ratings.len(), 1);
    assert_eq!(ratings[0].trust, 3);
}

#[test]
fn log_replay_reproduces_summary_and_cursors() {
    let m = common::manifest();
    let preds = predictions(&m);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let session_id;
    let live = {
        let mut store = EvalStore::open(&preds, &m, &log).unwrap();
        let s = store.create_session("alice", 3, 11).unwrap();
        session_id = s.session_id.clone();
        for (i, c) in s.assigned_case_ids.iter().take(2).enumerate() {
            store.submit_rating(&s.session_id, &rating(c, [3 + i as i64, 4, 5], "melanoma")).unwrap();
        }
        store.submit_rating(&s.session_id, &rating(&s.assigned_case_ids[0], [5, 5, 5], "basal_cell_carcinoma")).unwrap();
        store.summary().unwrap()
    };
    assert_eq!(replay_summary(&preds, &m, &log).unwrap(), live);

    let mut reopened = EvalStore::open(&preds, &m, &log).unwrap();
    assert_eq!(reopened.summary().unwrap(), live);
    assert_eq!(reopened.session(&session_id).unwrap().cursor, 2);
    assert_eq!(reopened.create_session("alice", 1, 1).unwrap().session_id, "alice-2");
}

#[test]
fn empty_store_has_no_summary() {
    let m = common::manifest();
    let store = EvalStore::new(&predictions(&m), &m);
    assert!(matches!(store.summary(), Err(EvalError::EmptyLog)));
}
