//! The shared fixture corpus and packing goldens, checked at the library
//! level.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use perfforge_core::corpus::{build_trajectories, reconstruct};
use perfforge_core::serialize::{pack, unpack, Mode, Strictness};
use perfforge_core::{jsonl, CategorizedStrategy, Origin, Submission};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn fixture_corpus_reconstruction() {
    let subs: Vec<Submission> = jsonl::read_jsonl(fixtures().join("corpus/submissions.jsonl")).unwrap();
    let corpus = build_trajectories(subs).unwrap();
    let pairs = reconstruct(&corpus, 1.1, 2.0).unwrap();
    assert_eq!(pairs.len(), 13);
    assert_eq!(pairs.iter().filter(|p| p.origin == Origin::CrossUser).count(), 7);

    let ids: BTreeSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
    assert_eq!(ids.len(), pairs.len());
    for p in &pairs {
        let (ts, tf) = (p.slow.runtime_seconds.unwrap(), p.fast.runtime_seconds.unwrap());
        assert!(ts / tf >= 1.1, "{} speedup {}", p.pair_id, ts / tf);
        assert_eq!(p.slow.problem_id, p.fast.problem_id);
    }

    // A larger replacement factor leaves fewer cross-user pairs.
    let strict = reconstruct(&corpus, 1.1, 1000.0).unwrap();
    assert_eq!(strict.len(), 13);
    assert!(strict.iter().filter(|p| p.origin == Origin::CrossUser).count() < 7);
}

#[derive(serde::Deserialize)]
struct PackCase {
    strategies: Vec<CategorizedStrategy>,
    fast_code: String,
}

#[test]
fn pack_goldens_and_round_trip() {
    for name in ["single", "multi", "unicode"] {
        let dir = fixtures().join("pack");
        let case: PackCase =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json"))).unwrap()).unwrap();
        let golden = std::fs::read_to_string(dir.join(format!("{name}.golden"))).unwrap();
        let packed = pack(&case.strategies, &case.fast_code).unwrap();
        assert_eq!(packed, golden, "{name}");

        let parsed = unpack(&packed, Mode::PlanAndCode, Strictness::Strict).unwrap();
        assert_eq!(parsed.strategies, case.strategies, "{name}");
        assert_eq!(parsed.code.as_deref(), Some(case.fast_code.as_str()), "{name}");
    }
}
