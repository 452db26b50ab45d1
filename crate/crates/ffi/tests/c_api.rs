use std::ffi::{CStr, CString};
use std::ptr;

use unhate_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = unhate_last_error();
    if p.is_null() {
        return String::new();
    }
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn index_top_k_rices_and_persistence() {
    unsafe {
        let mut idx = ptr::null_mut();
        assert_eq!(unhate_index_new(2, &mut idx), UnhateStatus::Ok);
        let entries: [(&str, [f32; 2], i32); 5] = [
            ("a", [1.0, 0.0], 1),
            ("b", [0.9, 0.1], 0),
            ("c", [0.0, 1.0], 1),
            ("d", [0.7, 0.7], 0),
            ("e", [-1.0, 0.0], 1),
        ];
        for (id, v, tag) in entries {
            assert_eq!(unhate_index_insert(idx, cstr(id).as_ptr(), v.as_ptr(), 2, tag), UnhateStatus::Ok);
        }
        assert_eq!(unhate_index_insert(idx, cstr("a").as_ptr(), [1.0f32, 0.0].as_ptr(), 2, 0), UnhateStatus::Duplicate);
        assert_eq!(unhate_index_insert(idx, cstr("z").as_ptr(), [1.0f32].as_ptr(), 1, 0), UnhateStatus::DimMismatch);
        assert_eq!(unhate_index_len(idx), 5);
        assert_eq!(unhate_index_dim(idx), 2);

        let q = [1.0f32, 0.0];
        let mut hits = ptr::null_mut();
        assert_eq!(unhate_index_top_k(idx, q.as_ptr(), 2, 3, &mut hits), UnhateStatus::Ok);
        let ids: Vec<String> = (0..unhate_hits_len(hits))
            .map(|i| CStr::from_ptr(unhate_hits_id(hits, i)).to_string_lossy().into_owned())
            .collect();
        assert_eq!(ids, ["a", "b", "d"]);
        assert_eq!(unhate_hits_similarity(hits, 0), 1.0);
        assert!(unhate_hits_id(hits, 3).is_null());
        assert!(unhate_hits_similarity(hits, 3).is_nan());
        unhate_hits_free(hits);

        let mut hits = ptr::null_mut();
        assert_eq!(unhate_index_rices(idx, q.as_ptr(), 2, 2, &mut hits), UnhateStatus::Ok);
        assert_eq!(unhate_hits_len(hits), 2);
        unhate_hits_free(hits);
        assert_eq!(unhate_index_rices(idx, q.as_ptr(), 2, 6, &mut hits), UnhateStatus::InsufficientExamples);
        assert!(!last_error().is_empty());
        assert_eq!(unhate_index_rices(idx, q.as_ptr(), 2, 3, &mut hits), UnhateStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("i.embx").to_str().unwrap());
        assert_eq!(unhate_index_save(idx, path.as_ptr()), UnhateStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(unhate_index_load(path.as_ptr(), &mut loaded), UnhateStatus::Ok);
        assert_eq!(unhate_index_len(loaded), 5);
        unhate_index_free(loaded);
        unhate_index_free(idx);

        std::fs::write(dir.path().join("bad.embx"), b"NOPE").unwrap();
        let bad = cstr(dir.path().join("bad.embx").to_str().unwrap());
        assert_eq!(unhate_index_load(bad.as_ptr(), &mut loaded), UnhateStatus::BadFormat);
        let missing = cstr(dir.path().join("none.embx").to_str().unwrap());
        assert_eq!(unhate_index_load(missing.as_ptr(), &mut loaded), UnhateStatus::Io);
    }
}

#[test]
fn auroc_and_parser() {
    unsafe {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0u8, 0, 1, 1];
        let mut a = 0.0;
        assert_eq!(unhate_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut a), UnhateStatus::Ok);
        assert_eq!(a, 0.75);
        assert_eq!(unhate_auroc(scores.as_ptr(), [1u8; 4].as_ptr(), 4, &mut a), UnhateStatus::SingleClass);
        assert_eq!(unhate_auroc(scores.as_ptr(), [2u8; 4].as_ptr(), 4, &mut a), UnhateStatus::InvalidArgument);

        let mut d = UnhateDetection::default();
        let raw = cstr("Explanation: ...\nClassification: hateful\nProbability of the meme being hateful (from 0 to 1): 0.7");
        assert_eq!(unhate_parse_detection(raw.as_ptr(), &mut d), UnhateStatus::Ok);
        assert_eq!((d.label, d.probability, d.probability_fallback), (1, 0.7, 0));
        assert_eq!(unhate_parse_detection(cstr("no idea").as_ptr(), &mut d), UnhateStatus::Parse);
    }
}

#[test]
fn majority_and_store_tiebreak() {
    unsafe {
        let mut m = 0;
        assert_eq!(unhate_majority([1u8, 0, 1].as_ptr(), 3, &mut m), UnhateStatus::Ok);
        assert_eq!(m, 1);
        assert_eq!(unhate_majority([1u8, 0, 1, 0].as_ptr(), 4, &mut m), UnhateStatus::Ok);
        assert_eq!(m, -1);
        assert_eq!(unhate_majority([1u8, 0].as_ptr(), 2, &mut m), UnhateStatus::Eval);

        let names: Vec<CString> = ["e1", "e2", "e3", "e4", "e5"].iter().map(|s| cstr(s)).collect();
        let ptrs: Vec<*const std::ffi::c_char> = names.iter().map(|c| c.as_ptr()).collect();
        let mut store = ptr::null_mut();
        assert_eq!(unhate_store_new(ptrs.as_ptr(), ptrs.len(), &mut store), UnhateStatus::Ok);
        let v = cstr("m1.text");
        assert_eq!(unhate_store_enqueue(store, v.as_ptr(), 3), UnhateStatus::Ok);
        assert_eq!(unhate_store_enqueue(store, v.as_ptr(), 9), UnhateStatus::InvalidArgument);

        let mut tb = ptr::null_mut();
        for (ev, q1) in [("e1", 1), ("e2", 0), ("e3", 1)] {
            assert_eq!(unhate_store_submit(store, v.as_ptr(), cstr(ev).as_ptr(), q1, 1, 0, &mut tb), UnhateStatus::Ok);
            assert!(tb.is_null());
        }
        assert_eq!(unhate_store_submit(store, v.as_ptr(), cstr("e1").as_ptr(), 1, 1, 0, &mut tb), UnhateStatus::Duplicate);
        assert_eq!(unhate_store_submit(store, v.as_ptr(), cstr("e5").as_ptr(), 1, 1, 0, &mut tb), UnhateStatus::NotAssigned);
        let mut st = std::mem::zeroed::<UnhateReviewStatus>();
        assert_eq!(unhate_store_status(store, v.as_ptr(), &mut st), UnhateStatus::Ok);
        assert_eq!((st.state, st.received, st.q1, st.q2, st.shareable), (UnhateReviewState::Decided, 3, 1, 1, 0));

        let w = cstr("m2.image");
        unhate_store_enqueue(store, w.as_ptr(), 1);
        let mut assigned = Vec::new();
        for ev in ["e1", "e2", "e3", "e4", "e5"] {
            if unhate_store_submit(store, w.as_ptr(), cstr(ev).as_ptr(), 0, 0, 0, ptr::null_mut()) == UnhateStatus::Ok {
                assigned.push(ev);
            }
        }
        assert_eq!(assigned.len(), 3);
        assert_eq!(unhate_store_status(store, cstr("nope").as_ptr(), &mut st), UnhateStatus::NotFound);

        let mut json = ptr::null_mut();
        assert_eq!(unhate_store_report_json(store, &mut json), UnhateStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["overall"]["total"], 2);
        unhate_string_free(json);
        unhate_store_free(store);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(unhate_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
