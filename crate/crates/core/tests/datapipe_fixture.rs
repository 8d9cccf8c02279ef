use std::collections::HashSet;

use pharmakit::datapipe::{dedup_exact, dedup_near, run_pipeline, NearDupParams, PiiRuleset, PipelineConfig};
use pharmakit::fixtures::datapipe_fixture;

#[test]
fn exact_dedup_removes_every_planted_copy() {
    let fx = datapipe_fixture(1);
    let out = dedup_exact(fx.docs.clone());
    let removed: HashSet<&str> = out.removed.iter().map(|(id, _)| id.as_str()).collect();
    for (copy, orig) in &fx.exact_copies {
        assert!(removed.contains(copy.as_str()), "{copy} survived");
        assert!(out.kept.iter().any(|d| &d.id == orig));
    }
    assert_eq!(removed.len(), fx.exact_copies.len());
}

#[test]
fn near_dedup_removes_edits_and_spares_unrelated_docs() {
    let fx = datapipe_fixture(1);
    let exact = dedup_exact(fx.docs.clone());
    let out = dedup_near(exact.kept, &NearDupParams { shingle_k: 5, jaccard_threshold: 0.8 }).unwrap();
    let removed: HashSet<&str> = out.removed.iter().map(|(id, _)| id.as_str()).collect();
    for (copy, _) in &fx.near_copies {
        assert!(removed.contains(copy.as_str()), "{copy} survived");
    }
    for id in &fx.originals {
        assert!(!removed.contains(id.as_str()), "original {id} removed");
    }
}

#[test]
fn pii_is_fully_redacted_and_idempotent() {
    let fx = datapipe_fixture(1);
    let rules = PiiRuleset::default_rules();
    assert!(!fx.pii.is_empty());
    for d in &fx.docs {
        let once = rules.redact(&d.text);
        for p in &fx.pii {
            assert!(!once.text.contains(p.as_str()), "{p} leaked from {}", d.id);
        }
        let twice = rules.redact(&once.text);
        assert_eq!(twice.text, once.text);
        assert_eq!(twice.total(), 0);
    }
}

#[test]
fn full_pipeline_on_fixture() {
    let fx = datapipe_fixture(1);
    let (kept, report) = run_pipeline(fx.docs.clone(), &PipelineConfig::default()).unwrap();
    assert_eq!(report.input, fx.docs.len());
    assert_eq!(report.exact_duplicates.len(), fx.exact_copies.len());
    assert_eq!(report.near_duplicates.len(), fx.near_copies.len());
    assert_eq!(kept.len(), fx.originals.len());
    assert_eq!(report.pii_matches.values().sum::<usize>(), fx.pii.len());
}
