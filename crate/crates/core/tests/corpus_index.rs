mod common;

use bti::corpus::{build_index, ingest, CorpusItem, SimilarityIndex};
use bti::encoder::paragraph_feature;
use bti::tokenizer::TokenizerOptions;
use bti::BtiError;
use common::*;

#[test]
fn fixture_corpus_ingests_in_order() {
    let items = corpus();
    assert_eq!(items.len(), 12);
    assert_eq!(items[0].id, "dress-001");
    assert_eq!(items[11].id, "pants-001");
}

#[test]
fn index_rows_match_standalone_features() {
    let v = vocab();
    let w = desk_weights(31);
    let items = corpus();
    let index = build_index(&items, &w, &v, TokenizerOptions::default()).unwrap();
    assert_eq!(index.features().shape(), [items.len(), 64]);
    for (k, item) in items.iter().enumerate() {
        let f = paragraph_feature(&tok(&item.description, &v, &w), &w).unwrap();
        assert_eq!(index.features().row(k), f.data());
    }
    let again = build_index(&items, &w, &v, TokenizerOptions::default()).unwrap();
    assert_eq!(again, index);
}

#[test]
fn nearest_properties() {
    let v = vocab();
    let w = desk_weights(32);
    let items = corpus();
    let index = build_index(&items, &w, &v, TokenizerOptions::default()).unwrap();
    for item in &items {
        let all = index.nearest(&item.id, items.len() - 1).unwrap();
        assert_eq!(all.len(), items.len() - 1);
        let mut ids: Vec<&str> = all.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), items.len() - 1);
        assert!(!ids.contains(&item.id.as_str()));
        assert!(all.windows(2).all(|p| p[0].1 >= p[1].1));
        assert!(all.iter().all(|(_, c)| (-1.0..=1.0).contains(c)));
        assert_eq!(index.nearest(&item.id, 1).unwrap()[0], all[0]);
    }
    assert!(matches!(index.nearest("nope", 3), Err(BtiError::UnknownId(_))));
}

#[test]
fn index_file_round_trip_and_fingerprint() {
    let v = vocab();
    let w = desk_weights(33);
    let items = corpus();
    let index = build_index(&items, &w, &v, TokenizerOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.btix");
    index.save(&path).unwrap();
    let back = SimilarityIndex::<f64>::load(&path).unwrap();
    assert_eq!(back.ids(), index.ids());
    assert_eq!(back.fingerprint(), w.fingerprint());
    for (a, b) in back.features().data().iter().zip(index.features().data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    back.check_weights(&w).unwrap();
    assert!(matches!(back.check_weights(&desk_weights(34)), Err(BtiError::FingerprintMismatch { .. })));
}

#[test]
fn item_failures_name_the_item() {
    let v = vocab();
    let w = desk_weights(35);
    let items = vec![
        CorpusItem {
            id: "ok".into(),
            title: String::new(),
            description: "red dress".into(),
        },
        CorpusItem {
            id: "bad".into(),
            title: String::new(),
            description: "\u{0}".into(),
        },
    ];
    let err = build_index(&items, &w, &v, TokenizerOptions::default()).unwrap_err();
    assert!(matches!(&err, BtiError::Item { id, .. } if id == "bad"), "{err}");
    assert!(matches!(build_index::<f64>(&[], &w, &v, TokenizerOptions::default()), Err(BtiError::EmptyCorpus)));
}

#[test]
fn ingest_reports_missing_file() {
    assert!(matches!(ingest("/nonexistent/corpus.jsonl"), Err(BtiError::Io(_))));
}
