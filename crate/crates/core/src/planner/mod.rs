//! Prompt construction, completion providers and prediction parsing.

mod parse;
mod provider;
mod templates;

pub use parse::{
    extract_object, parse_prediction, ParseTier, PredictionOutcome, RawEntry, RejectReason, Rejected,
};
pub use provider::{
    bundle_digest, complete, format_connections, noisy_connections, HttpSpec, ProviderError, ProviderSpec,
    ReplayCache, ReplayRecord,
};
pub use templates::{fill, templates};
pub(crate) use parse::part_index;
pub(crate) use provider::item_rng;

use crate::corpus::{Corpus, FurnitureItem};
use crate::retrieval::RetrievalResult;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("{method} needs retrieval results")]
    MissingRetrieval { method: String },
    #[error("{method}: retrieval resolved {got:?}, expected target {expected}")]
    WrongTarget { method: String, expected: String, got: Option<String> },
    #[error("{method}: retrieved example {id} is the target itself")]
    Leakage { method: String, id: String },
    #[error("{method}: retrieved id {id} is not in the corpus")]
    UnknownItem { method: String, id: String },
    #[error("{method}: {got} examples retrieved, at most {k} allowed")]
    TooManyExamples { method: String, k: usize, got: usize },
}

pub const DEFAULT_RAG_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictionMethod {
    ZeroShot,
    CoverPage,
    FullManual,
    RagImages { k: usize },
    Oracle,
}

impl PredictionMethod {
    /// Row position in result tables.
    pub fn report_rank(self) -> (u8, usize) {
        match self {
            PredictionMethod::ZeroShot => (0, 0),
            PredictionMethod::CoverPage => (1, 0),
            PredictionMethod::RagImages { k } => (2, k),
            PredictionMethod::FullManual => (3, 0),
            PredictionMethod::Oracle => (4, 0),
        }
    }

    pub fn label(self) -> String {
        match self {
            PredictionMethod::ZeroShot => "Zero-Shot".into(),
            PredictionMethod::CoverPage => "Cover Page".into(),
            PredictionMethod::FullManual => "Full Manual".into(),
            PredictionMethod::RagImages { k } => format!("RAG Images (k={k})"),
            PredictionMethod::Oracle => "Oracle".into(),
        }
    }

    /// Filesystem-safe identifier.
    pub fn slug(self) -> String {
        match self {
            PredictionMethod::RagImages { k } => format!("rag_images_k{k}"),
            other => other.to_string(),
        }
    }
}

impl PartialOrd for PredictionMethod {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PredictionMethod {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.report_rank().cmp(&other.report_rank())
    }
}

impl fmt::Display for PredictionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionMethod::ZeroShot => f.write_str("zero_shot"),
            PredictionMethod::CoverPage => f.write_str("cover_page"),
            PredictionMethod::FullManual => f.write_str("full_manual"),
            PredictionMethod::RagImages { k } => write!(f, "rag_images:{k}"),
            PredictionMethod::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for PredictionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        let (head, k) = match s.split_once(':') {
            Some((h, k)) => (h.to_string(), Some(k.to_string())),
            None => (s.clone(), None),
        };
        let method = match head.as_str() {
            "zero_shot" | "zeroshot" => PredictionMethod::ZeroShot,
            "cover_page" | "coverpage" => PredictionMethod::CoverPage,
            "full_manual" | "fullmanual" => PredictionMethod::FullManual,
            "oracle" => PredictionMethod::Oracle,
            "rag_images" | "rag" => {
                let k = match k.as_deref() {
                    None => DEFAULT_RAG_K,
                    Some(k) => k.trim_start_matches("k=").parse().map_err(|_| format!("bad k in {s:?}"))?,
                };
                if k == 0 {
                    return Err("rag_images needs k >= 1".into());
                }
                return Ok(PredictionMethod::RagImages { k });
            }
            _ => return Err(format!("unknown prediction method {s:?}")),
        };
        if k.is_some() {
            return Err(format!("{head} takes no parameter"));
        }
        Ok(method)
    }
}

impl Serialize for PredictionMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PredictionMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 4096, top_p: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ImageSource {
    File { path: PathBuf },
    Inline { mime: String, #[serde(with = "base64_bytes")] data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub caption: String,
    pub source: ImageSource,
}

impl ImageAttachment {
    pub fn file(caption: String, path: PathBuf) -> Self {
        Self { caption, source: ImageSource::File { path } }
    }
}

/// A provider-neutral multimodal request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_sections: Vec<Section>,
    pub images: Vec<ImageAttachment>,
    pub decode_params: DecodeParams,
}

impl PromptBundle {
    pub fn section(&self, label: &str) -> Option<&str> {
        self.user_sections.iter().find(|s| s.label == label).map(|s| s.text.as_str())
    }

    pub fn text_len(&self) -> usize {
        self.system_text.len() + self.user_sections.iter().map(|s| s.text.len()).sum::<usize>()
    }
}

mod base64_bytes {
    use base64::{engine::general_purpose::STANDARD, Engine};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

fn item_vars(item: &FurnitureItem) -> Vec<(&'static str, String)> {
    vec![
        ("category", item.category.to_string()),
        ("name", item.name.clone()),
        ("part_count", item.part_count.to_string()),
        ("last", item.part_count.saturating_sub(1).to_string()),
        ("pages", item.manual_pages.len().to_string()),
    ]
}

fn with(mut vars: Vec<(&'static str, String)>, extra: &[(&'static str, String)]) -> Vec<(&'static str, String)> {
    vars.extend_from_slice(extra);
    vars
}

fn manual_images(item: &FurnitureItem, caption_template: &str, extra: &[(&'static str, String)]) -> Vec<ImageAttachment> {
    item.page_paths()
        .into_iter()
        .enumerate()
        .map(|(i, path)| {
            let vars = with(with(item_vars(item), extra), &[("page", (i + 1).to_string())]);
            ImageAttachment::file(fill(caption_template, &vars), path)
        })
        .collect()
}

fn require_target(
    method: PredictionMethod,
    item: &FurnitureItem,
    retrieved: Option<&RetrievalResult>,
) -> Result<(), PlannerError> {
    let retrieved = retrieved.ok_or_else(|| PlannerError::MissingRetrieval { method: method.label() })?;
    let top = retrieved.top().map(|s| s.id.clone());
    if top.as_deref() != Some(item.id.as_str()) {
        return Err(PlannerError::WrongTarget { method: method.label(), expected: item.id.clone(), got: top });
    }
    Ok(())
}

/// Assembles the request for one item under one prediction method.
///
/// Every bundle carries the baseline text and the parts overview as its first
/// image; retrieved material follows in retrieval order.
pub fn build_prompt(
    item: &FurnitureItem,
    method: PredictionMethod,
    retrieved: Option<&RetrievalResult>,
    corpus: &Corpus,
) -> Result<PromptBundle, PlannerError> {
    let t = &templates().prediction;
    let vars = item_vars(item);
    let mut sections = vec![Section { label: "baseline".into(), text: fill(&t.baseline, &vars) }];
    let mut images = vec![ImageAttachment::file(fill(&t.overview_caption, &vars), item.overview_path())];

    match method {
        PredictionMethod::ZeroShot => {}
        PredictionMethod::CoverPage => {
            require_target(method, item, retrieved)?;
            sections.push(Section { label: "retrieved".into(), text: fill(&t.cover_intro, &vars) });
            images.push(ImageAttachment::file(fill(&t.cover_caption, &vars), item.cover_path()));
        }
        PredictionMethod::FullManual => {
            require_target(method, item, retrieved)?;
            sections.push(Section { label: "retrieved".into(), text: fill(&t.manual_intro, &vars) });
            images.extend(manual_images(item, &t.manual_caption, &[]));
        }
        PredictionMethod::RagImages { k } => {
            let retrieved = retrieved.ok_or_else(|| PlannerError::MissingRetrieval { method: method.label() })?;
            if retrieved.len() > k {
                return Err(PlannerError::TooManyExamples { method: method.label(), k, got: retrieved.len() });
            }
            let mut text = fill(&t.examples_intro, &[("count", retrieved.len().to_string())]);
            for (rank, id) in retrieved.ids().enumerate() {
                if id == item.id {
                    return Err(PlannerError::Leakage { method: method.label(), id: id.to_string() });
                }
                let example = corpus
                    .get(id)
                    .ok_or_else(|| PlannerError::UnknownItem { method: method.label(), id: id.to_string() })?;
                let extra = [("rank", (rank + 1).to_string())];
                text.push('\n');
                text.push_str(&fill(&t.example_header, &with(item_vars(example), &extra)));
                images.extend(manual_images(example, &t.example_caption, &extra));
            }
            sections.push(Section { label: "retrieved".into(), text });
        }
        PredictionMethod::Oracle => {
            let connections = format_connections(&item.ground_truth);
            sections.push(Section { label: "oracle".into(), text: fill(&t.oracle_intro, &[("connections", connections)]) });
        }
    }
    sections.push(Section { label: "schema".into(), text: fill(&t.schema, &vars) });

    Ok(PromptBundle {
        system_text: t.system.trim().to_string(),
        user_sections: sections,
        images,
        decode_params: DecodeParams::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_support::item;
    use crate::corpus::Category;
    use crate::retrieval::Scored;

    fn with_pages(mut it: FurnitureItem, n: usize) -> FurnitureItem {
        it.manual_pages = (0..n).map(|i| PathBuf::from(format!("pages/page_{i:02}.png"))).collect();
        it.cover_page = it.manual_pages[0].clone();
        it
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            with_pages(item("Chair_t", Category::Chair, 4, &[(0, 1), (1, 2), (2, 3)]), 12),
            with_pages(item("Chair_a", Category::Chair, 3, &[(0, 1)]), 4),
            with_pages(item("Chair_b", Category::Chair, 3, &[(0, 1)]), 6),
            with_pages(item("Chair_c", Category::Chair, 3, &[(0, 1)]), 2),
        ])
        .unwrap()
    }

    fn hit(ids: &[&str]) -> RetrievalResult {
        RetrievalResult { ranked: ids.iter().map(|id| Scored { id: id.to_string(), score: 1.0 }).collect() }
    }

    #[test]
    fn zero_shot_has_only_overview() {
        let c = corpus();
        let t = c.get("Chair_t").unwrap();
        let b = build_prompt(t, PredictionMethod::ZeroShot, None, &c).unwrap();
        assert_eq!(b.images.len(), 1);
        assert_eq!(b.images[0].source, ImageSource::File { path: t.overview_path() });
        assert_eq!(b.decode_params, DecodeParams { temperature: 0.0, max_tokens: 4096, top_p: 1.0 });
        let base = b.section("baseline").unwrap();
        assert!(base.contains("Chair") && base.contains("Parts count: 4"));
    }

    #[test]
    fn cover_and_full_manual() {
        let c = corpus();
        let t = c.get("Chair_t").unwrap();
        let b = build_prompt(t, PredictionMethod::CoverPage, Some(&hit(&["Chair_t"])), &c).unwrap();
        assert_eq!(b.images.len(), 2);
        let b = build_prompt(t, PredictionMethod::FullManual, Some(&hit(&["Chair_t"])), &c).unwrap();
        assert_eq!(b.images.len(), 13);
        let paths: Vec<_> = b.images[1..]
            .iter()
            .map(|i| match &i.source {
                ImageSource::File { path } => path.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(paths, t.page_paths());
        assert!(matches!(
            build_prompt(t, PredictionMethod::FullManual, None, &c),
            Err(PlannerError::MissingRetrieval { .. })
        ));
        assert!(matches!(
            build_prompt(t, PredictionMethod::CoverPage, Some(&hit(&["Chair_a"])), &c),
            Err(PlannerError::WrongTarget { .. })
        ));
    }

    #[test]
    fn rag_images_counts_and_leakage() {
        let c = corpus();
        let t = c.get("Chair_t").unwrap();
        let m = PredictionMethod::RagImages { k: 3 };
        let b = build_prompt(t, m, Some(&hit(&["Chair_a", "Chair_b", "Chair_c"])), &c).unwrap();
        assert_eq!(b.images.len(), 1 + 4 + 6 + 2);
        assert!(b.images[1].caption.starts_with("Example 1"));
        assert!(b.images[12].caption.starts_with("Example 3"));
        assert!(matches!(
            build_prompt(t, m, Some(&hit(&["Chair_t"])), &c),
            Err(PlannerError::Leakage { .. })
        ));
        assert!(matches!(
            build_prompt(t, PredictionMethod::RagImages { k: 1 }, Some(&hit(&["Chair_a", "Chair_b"])), &c),
            Err(PlannerError::TooManyExamples { .. })
        ));
    }

    #[test]
    fn oracle_embeds_ground_truth() {
        let c = corpus();
        let t = c.get("Chair_t").unwrap();
        let b = build_prompt(t, PredictionMethod::Oracle, None, &c).unwrap();
        let text = b.section("oracle").unwrap();
        let parsed = parse_prediction(text, t.part_count);
        assert_eq!(parsed.parsed, t.ground_truth);
    }

    #[test]
    fn method_strings() {
        for m in [
            PredictionMethod::ZeroShot,
            PredictionMethod::CoverPage,
            PredictionMethod::FullManual,
            PredictionMethod::RagImages { k: 5 },
            PredictionMethod::Oracle,
        ] {
            assert_eq!(m.to_string().parse::<PredictionMethod>().unwrap(), m);
        }
        assert_eq!("rag_images".parse::<PredictionMethod>().unwrap(), PredictionMethod::RagImages { k: 3 });
        assert!("rag_images:0".parse::<PredictionMethod>().is_err());
        assert!("oracle:1".parse::<PredictionMethod>().is_err());
        let mut v = [
            PredictionMethod::Oracle,
            PredictionMethod::FullManual,
            PredictionMethod::RagImages { k: 3 },
            PredictionMethod::CoverPage,
            PredictionMethod::ZeroShot,
        ];
        v.sort();
        let labels: Vec<String> = v.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["Zero-Shot", "Cover Page", "RAG Images (k=3)", "Full Manual", "Oracle"]);
    }
}
