mod common;

use assembly_core::corpus::{compute_stats, load_corpus, Category, CorpusError};
use assembly_core::partviz::{render_item_overview, DEFAULT_CELL_PX};
use assembly_core::retrieval::{load_embeddings, manifest_path_for, squared_l2, RetrievalScope, EMBEDDING_MAGIC};
use common::*;
use std::fs;

#[test]
fn fixture_loads_with_expected_counts() {
    let corpus = fixture_corpus();
    let got: Vec<(String, u32, usize)> =
        corpus.items().iter().map(|i| (i.id.clone(), i.part_count, i.ground_truth.len())).collect();
    let want: Vec<(String, u32, usize)> = FIXTURE_COUNTS.iter().map(|(id, p, c)| (id.to_string(), *p, *c)).collect();
    assert_eq!(got, want);
    for cat in Category::ALL {
        assert!(corpus.category_ids(cat).len() >= 2, "{cat} needs a same-category neighbor");
    }
    let lack = corpus.get("Table_lack").unwrap();
    assert_eq!(lack.assembly_steps.as_ref().map(Vec::len), Some(2));
    assert_eq!(lack.cover_page, lack.manual_pages[0]);
}

#[test]
fn every_referenced_file_exists() {
    for item in fixture_corpus().items() {
        assert!(item.overview_path().is_file(), "{}", item.id);
        for page in item.page_paths() {
            assert!(page.is_file(), "{}", page.display());
        }
        assert!(item.cover_path().is_file());
    }
}

#[test]
fn group_endpoints_expand_to_cross_pairs() {
    let corpus = fixture_corpus();
    let chair = corpus.get("Chair_applaro").unwrap();
    let pairs: Vec<(u32, u32)> = chair.ground_truth.iter().map(|c| (c.a(), c.b())).collect();
    assert_eq!(pairs, [(0, 1), (0, 2), (0, 3), (3, 4)]);
    let ingolf = corpus.get("Chair_ingolf").unwrap();
    assert!(ingolf.ground_truth.iter().all(|c| !(c.a() >= 1 && c.b() <= 4)), "no intra-group pairs");
}

#[test]
fn stored_overviews_match_a_fresh_render() {
    for item in fixture_corpus().items() {
        let fresh = render_item_overview(item, DEFAULT_CELL_PX).unwrap().to_png().unwrap();
        assert_eq!(fs::read(item.overview_path()).unwrap(), fresh, "{}", item.id);
    }
}

#[test]
fn embeddings_cover_every_item() {
    let corpus = fixture_corpus();
    let covers = load_embeddings(&covers()).unwrap();
    assert_eq!(covers.dim(), 512);
    let ids: Vec<&str> = corpus.items().iter().map(|i| i.id.as_str()).collect();
    assert_eq!(covers.ids().iter().map(String::as_str).collect::<Vec<_>>(), ids);
    let raw = fs::read(common::covers()).unwrap();
    assert_eq!(&raw[..8], EMBEDDING_MAGIC);
    assert_eq!(raw.len(), 16 + 13 * 512 * 4);
    assert!(manifest_path_for(&common::covers()).is_file());
    for i in 0..covers.len() {
        assert_eq!(squared_l2(covers.row(i), covers.row(i)), 0.0);
    }
    let queries = load_embeddings(&queries()).unwrap();
    for c in Category::ALL {
        assert!(queries.row_by_id(c.as_str()).is_some());
    }
}

#[test]
fn within_category_neighbors_come_first() {
    let corpus = fixture_corpus();
    let ctx = fixture_context(&corpus, RetrievalScope::CrossCategory);
    let hits = ctx.similar(corpus.get("Chair_applaro").unwrap(), 2, &corpus).unwrap();
    let ids: Vec<&str> = hits.ids().collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.iter().all(|id| id.starts_with("Chair_")), "{ids:?}");
}

#[test]
fn stats_on_fixture() {
    let stats = compute_stats(&fixture_corpus()).unwrap();
    assert_eq!((stats.item_count, stats.total_parts, stats.total_connections), (13, 101, 131));
    assert_eq!((stats.parts.min, stats.parts.max), (3.0, 21.0));
    let top = &stats.per_category[0];
    assert_eq!((top.category, top.count), (Category::Chair, 3));
    let text = stats.to_string();
    assert!(text.contains("total parts: 101"));
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("Chair_orphan")).unwrap();
    match load_corpus(dir.path()) {
        Err(CorpusError::MissingMetadata { id, .. }) => assert_eq!(id, "Chair_orphan"),
        other => panic!("expected missing metadata, got {other:?}"),
    }
}

#[test]
fn out_of_range_connection_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let item = dir.path().join("Chair_bad");
    fs::create_dir(&item).unwrap();
    fs::write(
        item.join("item.json"),
        r#"{"id": "Chair_bad", "category": "Chair", "name": "bad", "part_count": 3,
            "pages": ["p.png"], "parts_overview": "o.png", "connections": [[0, 1], [1, 3]]}"#,
    )
    .unwrap();
    let err = load_corpus(dir.path()).unwrap_err();
    assert!(matches!(err, CorpusError::ConnectionOutOfRange { a: 1, b: 3, part_count: 3, .. }), "{err}");
    assert!(err.to_string().contains("(1,3)"), "{err}");
}
