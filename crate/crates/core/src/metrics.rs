//! Set-based scoring of predicted connection graphs, with macro and micro
//! aggregation and the breakdown tables used in reports.

use crate::corpus::{Category, ConnectionSet, FurnitureItem};
use crate::planner::PredictionMethod;
use crate::retrieval::RetrievalScope;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact: bool,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores one prediction. An empty prediction against a non-empty ground
/// truth scores zero everywhere; two empty sets count as a perfect match.
pub fn score_item(pred: &ConnectionSet, gt: &ConnectionSet) -> ItemMetrics {
    let tp = pred.intersection_len(gt);
    let fp = pred.len() - tp;
    let fn_ = gt.len() - tp;
    if pred.is_empty() && gt.is_empty() {
        return ItemMetrics { precision: 1.0, recall: 1.0, f1: 1.0, exact: true, tp, fp, fn_ };
    }
    let precision = ratio(tp, pred.len());
    let recall = ratio(tp, gt.len());
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    ItemMetrics { precision, recall, f1, exact: fp == 0 && fn_ == 0, tp, fp, fn_ }
}

/// Corpus-level connection counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub gt_total: usize,
    pub pred_total: usize,
    pub tp_total: usize,
    pub fn_total: usize,
    pub fp_total: usize,
}

impl MicroCounts {
    /// Builds counts from the three primary totals, deriving misses and extras.
    pub fn from_totals(gt_total: usize, pred_total: usize, tp_total: usize) -> Option<Self> {
        (tp_total <= gt_total && tp_total <= pred_total).then(|| Self {
            gt_total,
            pred_total,
            tp_total,
            fn_total: gt_total - tp_total,
            fp_total: pred_total - tp_total,
        })
    }

    pub fn add(&mut self, m: &ItemMetrics) {
        self.gt_total += m.tp + m.fn_;
        self.pred_total += m.tp + m.fp;
        self.tp_total += m.tp;
        self.fn_total += m.fn_;
        self.fp_total += m.fp;
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp_total, self.gt_total)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp_total, self.pred_total)
    }

    /// Share of ground-truth connections that were missed.
    pub fn missing_share(&self) -> f64 {
        ratio(self.fn_total, self.gt_total)
    }

    /// Share of predicted connections that were wrong.
    pub fn extra_share(&self) -> f64 {
        ratio(self.fp_total, self.pred_total)
    }

    pub fn identities_hold(&self) -> bool {
        self.tp_total + self.fn_total == self.gt_total && self.tp_total + self.fp_total == self.pred_total
    }
}

/// Sums set cardinalities over `(pred, gt)` pairs.
pub fn error_breakdown<'a>(per_item: impl IntoIterator<Item = (&'a ConnectionSet, &'a ConnectionSet)>) -> MicroCounts {
    let mut counts = MicroCounts::default();
    for (pred, gt) in per_item {
        counts.add(&score_item(pred, gt));
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub id: String,
    pub category: Category,
    pub part_count: u32,
}

impl From<&FurnitureItem> for ItemInfo {
    fn from(item: &FurnitureItem) -> Self {
        Self { id: item.id.clone(), category: item.category, part_count: item.part_count }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartsBucket {
    #[serde(rename = "1-5")]
    UpTo5,
    #[serde(rename = "6-10")]
    From6To10,
    #[serde(rename = "11-15")]
    From11To15,
    #[serde(rename = "16+")]
    From16,
}

impl PartsBucket {
    pub const ALL: [PartsBucket; 4] =
        [PartsBucket::UpTo5, PartsBucket::From6To10, PartsBucket::From11To15, PartsBucket::From16];

    pub fn of(part_count: u32) -> Self {
        match part_count {
            0..=5 => PartsBucket::UpTo5,
            6..=10 => PartsBucket::From6To10,
            11..=15 => PartsBucket::From11To15,
            _ => PartsBucket::From16,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PartsBucket::UpTo5 => "1-5",
            PartsBucket::From6To10 => "6-10",
            PartsBucket::From11To15 => "11-15",
            PartsBucket::From16 => "16+",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub avg_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub item_count: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub exact_match_rate: f64,
    pub micro: MicroCounts,
    pub by_parts_bucket: BTreeMap<PartsBucket, GroupStats>,
    pub by_category: BTreeMap<Category, GroupStats>,
    /// `None` when either series is constant or fewer than two items exist.
    pub pearson_parts_f1: Option<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty list of items")]
    Empty,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Sample Pearson correlation; `None` for constant series or fewer than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mx = mean(xs.iter().copied());
    let my = mean(ys.iter().copied());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn group_stats<K: Ord>(entries: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, GroupStats> {
    let mut sums: BTreeMap<K, (usize, f64)> = BTreeMap::new();
    for (key, f1) in entries {
        let e = sums.entry(key).or_default();
        e.0 += 1;
        e.1 += f1;
    }
    sums.into_iter().map(|(k, (count, sum))| (k, GroupStats { count, avg_f1: sum / count as f64 })).collect()
}

pub fn aggregate(per_item: &[(ItemInfo, ItemMetrics)]) -> Result<AggregateReport, MetricsError> {
    if per_item.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut micro = MicroCounts::default();
    for (_, m) in per_item {
        micro.add(m);
    }
    let parts: Vec<f64> = per_item.iter().map(|(i, _)| i.part_count as f64).collect();
    let f1s: Vec<f64> = per_item.iter().map(|(_, m)| m.f1).collect();
    Ok(AggregateReport {
        item_count: per_item.len(),
        macro_precision: mean(per_item.iter().map(|(_, m)| m.precision)),
        macro_recall: mean(per_item.iter().map(|(_, m)| m.recall)),
        macro_f1: mean(f1s.iter().copied()),
        exact_match_rate: mean(per_item.iter().map(|(_, m)| if m.exact { 1.0 } else { 0.0 })),
        micro,
        by_parts_bucket: group_stats(per_item.iter().map(|(i, m)| (PartsBucket::of(i.part_count), m.f1))),
        by_category: group_stats(per_item.iter().map(|(i, m)| (i.category, m.f1))),
        pearson_parts_f1: pearson(&parts, &f1s),
    })
}

/// Plain-text table with the first column left-aligned and the rest right-aligned.
/// A row equal to `None` becomes a horizontal rule.
pub fn render_table(header: &[&str], rows: &[Option<Vec<String>>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows.iter().flatten() {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}");
            } else {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)) + "\n";
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push_str(&rule);
    for row in rows {
        match row {
            Some(cells) => out.push_str(&line(cells)),
            None => out.push_str(&rule),
        }
    }
    out
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn pct(v: f64) -> String {
    format!("{:.1}%", v * 100.0)
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn score_row(label: String, r: &AggregateReport) -> Option<Vec<String>> {
    Some(vec![label, f3(r.macro_f1), f3(r.macro_precision), f3(r.macro_recall), pct(r.exact_match_rate)])
}

/// Method comparison, rows in report order with Oracle set apart.
pub fn render_main_table(rows: &[(PredictionMethod, AggregateReport)]) -> String {
    let mut sorted: Vec<_> = rows.iter().collect();
    sorted.sort_by_key(|(m, _)| *m);
    let mut body = Vec::new();
    for (m, r) in sorted {
        if *m == PredictionMethod::Oracle && !body.is_empty() {
            body.push(None);
        }
        body.push(score_row(m.label(), r));
    }
    render_table(&["Method", "F1", "Prec.", "Recall", "Exact"], &body)
}

pub fn render_bucket_table(report: &AggregateReport) -> String {
    let body: Vec<_> = PartsBucket::ALL
        .iter()
        .map(|b| {
            let s = report.by_parts_bucket.get(b).copied().unwrap_or_default();
            let f1 = if s.count == 0 { "-".into() } else { f3(s.avg_f1) };
            Some(vec![b.label().to_string(), s.count.to_string(), f1])
        })
        .collect();
    let mut out = render_table(&["Parts", "Count", "Avg F1"], &body);
    match report.pearson_parts_f1 {
        Some(r) => {
            let _ = writeln!(out, "Pearson r (parts vs F1): {r:.3}");
        }
        None => out.push_str("Pearson r (parts vs F1): undefined (constant series)\n"),
    }
    out
}

/// Categories ordered by average F1, best first.
pub fn render_category_table(report: &AggregateReport) -> String {
    let mut cats: Vec<_> = report.by_category.iter().collect();
    cats.sort_by(|a, b| b.1.avg_f1.total_cmp(&a.1.avg_f1).then(a.0.cmp(b.0)));
    let body: Vec<_> =
        cats.into_iter().map(|(c, s)| Some(vec![c.to_string(), s.count.to_string(), f3(s.avg_f1)])).collect();
    render_table(&["Category", "Count", "Avg F1"], &body)
}

pub fn render_error_table(micro: &MicroCounts) -> String {
    let body = vec![
        Some(vec!["Ground Truth Connections".into(), thousands(micro.gt_total)]),
        Some(vec!["Predicted Connections".into(), thousands(micro.pred_total)]),
        Some(vec![
            "Correct (True Positives)".into(),
            format!("{} ({} recall)", thousands(micro.tp_total), pct(micro.recall())),
        ]),
        Some(vec![
            "Missing (False Negatives)".into(),
            format!("{} ({} of GT)", thousands(micro.fn_total), pct(micro.missing_share())),
        ]),
        Some(vec![
            "Extra (False Positives)".into(),
            format!("{} ({} of pred.)", thousands(micro.fp_total), pct(micro.extra_share())),
        ]),
    ];
    render_table(&["Metric", "Value"], &body)
}

pub fn render_k_table(rows: &[(usize, AggregateReport)]) -> String {
    let body: Vec<_> = rows.iter().map(|(k, r)| score_row(format!("k={k}"), r)).collect();
    render_table(&["k", "F1", "Prec.", "Recall", "Exact"], &body)
}

/// Difference between the two scopes, cross-category minus within-category.
pub fn scope_difference(within: &AggregateReport, cross: &AggregateReport) -> (f64, f64) {
    (cross.macro_f1 - within.macro_f1, cross.exact_match_rate - within.exact_match_rate)
}

pub fn render_scope_table(within: &AggregateReport, cross: &AggregateReport) -> String {
    let (df1, dexact) = scope_difference(within, cross);
    let row = |scope: RetrievalScope, r: &AggregateReport| {
        Some(vec![scope.label().to_string(), f3(r.macro_f1), pct(r.exact_match_rate)])
    };
    let body = vec![
        row(RetrievalScope::WithinCategory, within),
        row(RetrievalScope::CrossCategory, cross),
        None,
        Some(vec!["Difference".into(), format!("{df1:+.3}"), format!("{:+.1}%", dexact * 100.0)]),
    ];
    render_table(&["Strategy", "F1", "Exact"], &body)
}
