mod common;

use assembly_core::corpus::Category;
use assembly_core::harness::{
    evaluate, prediction_path, run_experiment, run_k_ablation, run_scope_ablation, EvaluationReport, PredictionRecord,
};
use assembly_core::planner::{PredictionMethod, ProviderSpec};
use assembly_core::retrieval::RetrievalScope;
use common::*;
use std::fs;
use std::path::Path;

fn noisy() -> ProviderSpec {
    ProviderSpec::NoisyMock { drop_rate: 0.5, add_rate: 0.0, seed: 1 }
}

fn read_record(path: &Path) -> PredictionRecord {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn report_json(r: &EvaluationReport) -> String {
    serde_json::to_string(r).unwrap()
}

#[test]
fn oracle_scores_perfectly_for_every_method() {
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&config(out.path(), ProviderSpec::OracleMock, all_methods())).unwrap();
    assert_eq!(report.methods.len(), 5);
    for m in &report.methods {
        assert_eq!(m.report.item_count, 13, "{}", m.method);
        assert_eq!(m.report.macro_f1, 1.0, "{}", m.method);
        assert_eq!(m.report.exact_match_rate, 1.0, "{}", m.method);
        assert_eq!(m.report.micro.tp_total, 131);
        assert_eq!(m.provider_failures, 0);
    }
    assert!(out.path().join("report.json").is_file());
    let text = fs::read_to_string(out.path().join("report.txt")).unwrap();
    assert!(text.contains(&PredictionMethod::Oracle.label()), "{text}");
}

#[test]
fn report_rows_follow_a_fixed_method_order() {
    let out = tempfile::tempdir().unwrap();
    let mut methods = all_methods();
    methods.reverse();
    let report = run_experiment(&config(out.path(), ProviderSpec::OracleMock, methods)).unwrap();
    let order: Vec<PredictionMethod> = report.methods.iter().map(|m| m.method).collect();
    assert_eq!(
        order,
        [
            PredictionMethod::ZeroShot,
            PredictionMethod::CoverPage,
            PredictionMethod::RagImages { k: 3 },
            PredictionMethod::FullManual,
            PredictionMethod::Oracle,
        ]
    );
}

#[test]
fn noisy_runs_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&config(a.path(), noisy(), all_methods())).unwrap();
    let rb = run_experiment(&config(b.path(), noisy(), all_methods())).unwrap();
    assert_eq!(report_json(&ra), report_json(&rb));
    let f1 = ra.get(PredictionMethod::FullManual).unwrap().macro_f1;
    assert!(f1 > 0.0 && f1 < 1.0, "dropping half the pairs should land strictly inside (0, 1): {f1}");
    // drop-only noise never invents pairs
    assert_eq!(ra.get(PredictionMethod::FullManual).unwrap().micro.fp_total, 0);
}

#[test]
fn concurrency_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let serial = run_experiment(&config(a.path(), noisy(), all_methods())).unwrap();
    let mut cfg = config(b.path(), noisy(), all_methods());
    cfg.max_in_flight = 4;
    let parallel = run_experiment(&cfg).unwrap();
    assert_eq!(report_json(&serial), report_json(&parallel));
}

#[test]
fn resume_skips_existing_and_fills_gaps() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config(out.path(), noisy(), all_methods());
    let first = run_experiment(&cfg).unwrap();
    let preds = out.path().join("predictions");

    // a kept file is not rewritten, a deleted one is regenerated identically
    let kept = prediction_path(&preds, PredictionMethod::ZeroShot, "Bench_applaro");
    let removed = prediction_path(&preds, PredictionMethod::CoverPage, "Shelf_kallax");
    let before = fs::read(&removed).unwrap();
    let mtime = fs::metadata(&kept).unwrap().modified().unwrap();
    fs::remove_file(&removed).unwrap();
    fs::remove_file(prediction_path(&preds, PredictionMethod::Oracle, "Desk_micke")).unwrap();

    let second = run_experiment(&cfg).unwrap();
    assert_eq!(report_json(&first), report_json(&second));
    assert_eq!(fs::read(&removed).unwrap(), before);
    assert_eq!(fs::metadata(&kept).unwrap().modified().unwrap(), mtime);
}

#[test]
fn evaluation_from_disk_matches_the_run() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config(out.path(), noisy(), all_methods());
    let report = run_experiment(&cfg).unwrap();
    let again = evaluate(&fixture_corpus(), &out.path().join("predictions")).unwrap();
    assert_eq!(report_json(&report), report_json(&again));
    let stored = fs::read_to_string(out.path().join("report.json")).unwrap();
    let parsed: EvaluationReport = serde_json::from_str(&stored).unwrap();
    assert_eq!(report_json(&parsed), report_json(&report));
}

#[test]
fn replay_cache_miss_is_a_scored_provider_failure() {
    let out = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let provider = ProviderSpec::Replay { cache_dir: cache.path().to_path_buf() };
    let report = run_experiment(&config(out.path(), provider, vec![PredictionMethod::ZeroShot])).unwrap();
    let m = &report.methods[0];
    assert_eq!(m.provider_failures, 13);
    assert_eq!(m.report.macro_f1, 0.0);
    assert_eq!(m.report.micro.pred_total, 0);
    let rec = read_record(&prediction_path(&out.path().join("predictions"), PredictionMethod::ZeroShot, "Table_lack"));
    assert!(rec.provider_error.unwrap().contains("cache"));
}

#[test]
fn retrieval_records_respect_scope() {
    let out = tempfile::tempdir().unwrap();
    let corpus = fixture_corpus();
    let method = PredictionMethod::RagImages { k: 3 };
    let mut cfg = config(out.path(), ProviderSpec::OracleMock, vec![method]);
    for scope in [RetrievalScope::WithinCategory, RetrievalScope::CrossCategory] {
        cfg.retrieval_scope = scope;
        cfg.output_dir = out.path().join(scope.slug());
        run_experiment(&cfg).unwrap();
        for item in corpus.items() {
            let rec = read_record(&prediction_path(&cfg.output_dir.join("predictions"), method, &item.id));
            assert!(!rec.retrieved.contains(&item.id), "{} retrieved itself", item.id);
            let same = corpus.category_ids(item.category).len() - 1;
            match scope {
                RetrievalScope::WithinCategory => {
                    assert_eq!(rec.retrieved.len(), same.min(3));
                    let cats: Vec<Category> = rec.retrieved.iter().map(|id| corpus.get(id).unwrap().category).collect();
                    assert!(cats.iter().all(|&c| c == item.category), "{}: {cats:?}", item.id);
                }
                RetrievalScope::CrossCategory => assert_eq!(rec.retrieved.len(), 3),
            }
        }
    }
}

#[test]
fn k_ablation_has_one_row_per_k() {
    let out = tempfile::tempdir().unwrap();
    let table = run_k_ablation(&config(out.path(), noisy(), vec![])).unwrap();
    let ks: Vec<usize> = table.rows.iter().map(|(k, _)| *k).collect();
    assert_eq!(ks, [1, 3, 5]);
    // the mock ignores the prompt, so only retrieval differs between rows
    let f1: Vec<f64> = table.rows.iter().map(|(_, r)| r.macro_f1).collect();
    assert!(f1.windows(2).all(|w| w[0] == w[1]), "{f1:?}");
    assert!(out.path().join("k_ablation/within_category/rag_images_k5").is_dir());
    let text = table.render_text();
    for k in ["k=1", "k=3", "k=5"] {
        assert!(text.contains(k), "{text}");
    }
}

#[test]
fn scope_ablation_reports_the_difference() {
    let out = tempfile::tempdir().unwrap();
    let table = run_scope_ablation(&config(out.path(), noisy(), vec![PredictionMethod::RagImages { k: 1 }])).unwrap();
    assert_eq!(table.k, 1);
    assert_eq!(table.difference.0, table.cross.macro_f1 - table.within.macro_f1);
    assert_eq!(table.difference.1, table.cross.exact_match_rate - table.within.exact_match_rate);
    let text = table.render_text();
    assert!(text.contains("Within-Category") && text.contains("Cross-Category") && text.contains("Difference"), "{text}");
}
