#![allow(dead_code)]

use assembly_core::corpus::{load_corpus, Category, ConnectionSet, Corpus, FurnitureItem};
use assembly_core::harness::ExperimentConfig;
use assembly_core::planner::{PredictionMethod, ProviderSpec};
use assembly_core::retrieval::{load_embeddings, RetrievalContext, RetrievalScope};
use std::path::{Path, PathBuf};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn corpus_dir() -> PathBuf {
    fixtures().join("corpus")
}

pub fn covers() -> PathBuf {
    fixtures().join("covers.bin")
}

pub fn queries() -> PathBuf {
    fixtures().join("queries.bin")
}

pub fn fixture_corpus() -> Corpus {
    load_corpus(&corpus_dir()).expect("fixture corpus loads")
}

pub fn fixture_context(corpus: &Corpus, scope: RetrievalScope) -> RetrievalContext {
    RetrievalContext::new(corpus)
        .with_embeddings(load_embeddings(&covers()).expect("covers"))
        .with_queries(load_embeddings(&queries()).expect("queries"))
        .with_scope(scope)
}

pub fn all_methods() -> Vec<PredictionMethod> {
    vec![
        PredictionMethod::Oracle,
        PredictionMethod::FullManual,
        PredictionMethod::RagImages { k: 3 },
        PredictionMethod::CoverPage,
        PredictionMethod::ZeroShot,
    ]
}

pub fn config(out: &Path, provider: ProviderSpec, methods: Vec<PredictionMethod>) -> ExperimentConfig {
    ExperimentConfig {
        corpus_root: corpus_dir(),
        methods,
        provider,
        embeddings_path: Some(covers()),
        queries_path: Some(queries()),
        k_values: vec![1, 3, 5],
        retrieval_scope: RetrievalScope::WithinCategory,
        seed: 0,
        output_dir: out.to_path_buf(),
        max_in_flight: 1,
    }
}

/// In-memory item with no files behind it.
pub fn bare_item(id: &str, category: Category, part_count: u32, gt: &[(u32, u32)]) -> FurnitureItem {
    FurnitureItem {
        id: id.to_string(),
        category,
        name: id.to_lowercase(),
        part_count,
        dir: PathBuf::from("/nonexistent").join(id),
        manual_pages: vec![PathBuf::from("pages/page_00.png")],
        cover_page: PathBuf::from("pages/page_00.png"),
        parts_overview: PathBuf::from("parts_overview.png"),
        ground_truth: ConnectionSet::from_pairs(gt.iter().copied()).expect("valid pairs"),
        assembly_steps: None,
    }
}

/// Part and connection counts of the fixture items, by id, as written in the
/// generator tables (group endpoints expanded by hand).
pub const FIXTURE_COUNTS: [(&str, u32, usize); 13] = [
    ("Bench_applaro", 4, 4),
    ("Bench_hemnes", 6, 6),
    ("Chair_applaro", 5, 4),
    ("Chair_applaro_3", 9, 11),
    ("Chair_ingolf", 6, 6),
    ("Desk_linnmon", 5, 4),
    ("Desk_micke", 12, 13),
    ("Misc_bekvam", 7, 8),
    ("Misc_frosta", 3, 3),
    ("Shelf_billy", 11, 21),
    ("Shelf_kallax", 21, 39),
    ("Table_lack", 5, 4),
    ("Table_lisabo", 7, 8),
];

/// Independent depth-first delivery order: each part after the first of its
/// component touches an earlier one.
pub fn dfs_order(gt: &ConnectionSet, n: u32) -> Vec<u32> {
    let mut seen = vec![false; n as usize];
    let mut order = Vec::new();
    for root in 0..n {
        if seen[root as usize] {
            continue;
        }
        let mut stack = vec![root];
        while let Some(p) = stack.pop() {
            if std::mem::replace(&mut seen[p as usize], true) {
                continue;
            }
            order.push(p);
            let mut next: Vec<u32> = gt
                .iter()
                .filter(|c| c.contains(p))
                .map(|c| if c.a() == p { c.b() } else { c.a() })
                .filter(|q| !seen[*q as usize])
                .collect();
            next.sort_unstable_by(|a, b| b.cmp(a));
            stack.extend(next);
        }
    }
    order
}

/// An order that delivers a part with no edge to the first part second,
/// when the first part's component has such a part.
pub fn violating_order(gt: &ConnectionSet, n: u32) -> Option<Vec<u32>> {
    let base = dfs_order(gt, n);
    let first = base[0];
    let component: Vec<u32> = {
        let mut comp = vec![first];
        let mut i = 0;
        while i < comp.len() {
            let p = comp[i];
            for c in gt.iter().filter(|c| c.contains(p)) {
                let q = if c.a() == p { c.b() } else { c.a() };
                if !comp.contains(&q) {
                    comp.push(q);
                }
            }
            i += 1;
        }
        comp
    };
    let stranger = component.into_iter().find(|&q| q != first && !gt.iter().any(|c| c.contains(first) && c.contains(q)))?;
    let mut order = vec![first, stranger];
    order.extend(base.into_iter().filter(|&p| p != first && p != stranger));
    Some(order)
}
