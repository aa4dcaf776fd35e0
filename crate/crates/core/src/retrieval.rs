//! Manual retrieval.
//!
//! Two routes: Okapi BM25 over each item's "category name" key (exact manual
//! lookup), and exact L2 nearest-neighbour search over cover-page embeddings
//! (similar-example lookup, restricted by category and never returning the
//! target item).

use crate::corpus::{Category, Corpus, FurnitureItem};
use crate::planner::PredictionMethod;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("embedding file {path}: {field}: {message}")]
    Format { path: PathBuf, field: &'static str, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding for item {0}")]
    MissingEmbedding(String),
    #[error("{0} requires an embedding matrix")]
    EmbeddingsRequired(String),
    #[error("bm25 did not resolve item {0}")]
    Unresolved(String),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<Scored>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|s| s.id.as_str())
    }

    pub fn top(&self) -> Option<&Scored> {
        self.ranked.first()
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub postings: BTreeMap<String, Vec<Posting>>,
}

impl Bm25Index {
    pub fn from_documents<'a, I>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (&'a str, String)>,
    {
        assert!(params.k1 > 0.0 && (0.0..=1.0).contains(&params.b), "invalid bm25 parameters");
        let mut doc_ids = Vec::new();
        let mut doc_lengths = Vec::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, (id, text)) in docs.into_iter().enumerate() {
            let tokens = tokenize(&text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (token, count) in tf {
                postings.entry(token).or_default().push(Posting { doc: doc as u32, tf: count });
            }
            doc_ids.push(id.to_string());
            doc_lengths.push(tokens.len() as u32);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        Self { params, doc_ids, doc_lengths, avg_doc_length, postings }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top `top_k` documents by BM25 score; ties go to the smaller id.
    pub fn query(&self, query: &str, top_k: usize) -> RetrievalResult {
        let Bm25Params { k1, b } = self.params;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for token in tokenize(query) {
            let Some(list) = self.postings.get(&token) else { continue };
            let idf = self.idf(list.len());
            for p in list {
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let tf = f64::from(p.tf);
                let norm = tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avg_doc_length));
                *scores.entry(p.doc).or_default() += idf * norm;
            }
        }
        let mut ranked: Vec<Scored> = scores
            .into_iter()
            .map(|(doc, score)| Scored { id: self.doc_ids[doc as usize].clone(), score })
            .collect();
        ranked.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.id.cmp(&y.id)));
        ranked.truncate(top_k);
        RetrievalResult { ranked }
    }
}

/// Indexes every item under `category + " " + name`.
pub fn build_bm25(corpus: &Corpus) -> Bm25Index {
    Bm25Index::from_documents(
        corpus.items().iter().map(|i| (i.id.as_str(), i.search_key())),
        Bm25Params::default(),
    )
}

pub fn bm25_query(index: &Bm25Index, query: &str, top_k: usize) -> RetrievalResult {
    index.query(query, top_k)
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"RAREMB1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    row: usize,
    id: String,
}

/// Companion id manifest for a vector file: `vecs.bin` -> `vecs.ids.jsonl`.
pub fn manifest_path_for(path: &Path) -> PathBuf {
    path.with_extension("ids.jsonl")
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        let fmt = |field, message: String| RetrievalError::Format { path: PathBuf::new(), field, message };
        if dim == 0 {
            return Err(fmt("dim", "must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(fmt("payload", format!("{} floats for {}x{dim}", data.len(), ids.len())));
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(fmt("ids", "duplicate id".into()));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn manifest_jsonl(&self) -> String {
        self.ids
            .iter()
            .enumerate()
            .map(|(row, id)| {
                serde_json::to_string(&ManifestRow { row, id: id.clone() }).expect("manifest row") + "\n"
            })
            .collect()
    }

    /// Writes the vector file and its companion manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RetrievalError::Io { path, source }
        };
        let mut f = fs::File::create(path).map_err(io(path))?;
        f.write_all(&self.to_bytes()).map_err(io(path))?;
        let manifest = manifest_path_for(path);
        fs::write(&manifest, self.manifest_jsonl()).map_err(io(&manifest))?;
        Ok(())
    }

    pub fn parse(bytes: &[u8], manifest: &str, path: &Path) -> Result<Self> {
        let fmt = |field, message: String| RetrievalError::Format { path: path.to_path_buf(), field, message };
        if bytes.len() < 8 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(fmt("magic", "expected \"RAREMB1\\n\"".into()));
        }
        if bytes.len() < 16 {
            return Err(fmt("header", format!("{} bytes, need 16", bytes.len())));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fmt("dim", "must be positive".into()));
        }
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fmt("count", "count * dim overflows".into()))?;
        let payload = &bytes[16..];
        if payload.len() < expected {
            return Err(fmt("payload", format!("truncated: {} of {expected} bytes", payload.len())));
        }
        if payload.len() > expected {
            return Err(fmt("payload", format!("{} trailing bytes", payload.len() - expected)));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut ids = Vec::with_capacity(count);
        for (i, line) in manifest.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: ManifestRow =
                serde_json::from_str(line).map_err(|e| fmt("manifest", format!("line {}: {e}", i + 1)))?;
            if row.row != i {
                return Err(fmt("manifest", format!("line {} declares row {}", i + 1, row.row)));
            }
            ids.push(row.id);
        }
        if ids.len() != count {
            return Err(fmt("count", format!("header declares {count} rows, manifest lists {}", ids.len())));
        }
        Self::new(ids, dim, data).map_err(|e| match e {
            RetrievalError::Format { field, message, .. } => fmt(field, message),
            other => other,
        })
    }
}

/// Reads a RAREMB1 vector file plus its `.ids.jsonl` manifest.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    load_embeddings_with_manifest(path, &manifest_path_for(path))
}

pub fn load_embeddings_with_manifest(path: &Path, manifest: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_path_buf(), source })?;
    let ids = fs::read_to_string(manifest)
        .map_err(|source| RetrievalError::Io { path: manifest.to_path_buf(), source })?;
    EmbeddingMatrix::parse(&bytes, &ids, path)
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// k nearest stored vectors to `query` by squared L2 distance.
///
/// Candidates must be corpus items, must not be `target_id`, and must belong
/// to `category` when one is given. Ties go to the smaller id.
pub fn retrieve_similar(
    emb: &EmbeddingMatrix,
    query: &[f32],
    target_id: &str,
    category: Option<Category>,
    k: usize,
    corpus: &Corpus,
) -> Result<RetrievalResult> {
    if query.len() != emb.dim() {
        return Err(RetrievalError::DimensionMismatch { expected: emb.dim(), got: query.len() });
    }
    let mut ranked: Vec<Scored> = emb
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| id.as_str() != target_id)
        .filter(|(_, id)| match corpus.get(id) {
            Some(item) => category.is_none_or(|c| item.category == c),
            None => false,
        })
        .map(|(i, id)| Scored { id: id.clone(), score: squared_l2(emb.row(i), query) })
        .collect();
    ranked.sort_by(|x, y| x.score.total_cmp(&y.score).then_with(|| x.id.cmp(&y.id)));
    ranked.truncate(k);
    Ok(RetrievalResult { ranked })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    #[default]
    WithinCategory,
    CrossCategory,
}

impl RetrievalScope {
    pub fn label(self) -> &'static str {
        match self {
            RetrievalScope::WithinCategory => "Within-Category",
            RetrievalScope::CrossCategory => "Cross-Category",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            RetrievalScope::WithinCategory => "within_category",
            RetrievalScope::CrossCategory => "cross_category",
        }
    }
}

/// Everything needed to fetch per-method retrieval material for an item.
#[derive(Debug, Clone)]
pub struct RetrievalContext {
    pub bm25: Bm25Index,
    pub embeddings: Option<EmbeddingMatrix>,
    /// Optional text-query vectors keyed by category name ("Chair", ...).
    pub queries: Option<EmbeddingMatrix>,
    pub scope: RetrievalScope,
}

impl RetrievalContext {
    pub fn new(corpus: &Corpus) -> Self {
        Self { bm25: build_bm25(corpus), embeddings: None, queries: None, scope: RetrievalScope::default() }
    }

    pub fn with_embeddings(mut self, emb: EmbeddingMatrix) -> Self {
        self.embeddings = Some(emb);
        self
    }

    pub fn with_queries(mut self, queries: EmbeddingMatrix) -> Self {
        self.queries = Some(queries);
        self
    }

    pub fn with_scope(mut self, scope: RetrievalScope) -> Self {
        self.scope = scope;
        self
    }

    /// Query vector for similar-example search: the category text query when
    /// one is loaded, otherwise the target's own cover embedding.
    pub fn example_query<'a>(&'a self, emb: &'a EmbeddingMatrix, item: &FurnitureItem) -> Result<&'a [f32]> {
        if let Some(q) = self.queries.as_ref().and_then(|q| q.row_by_id(item.category.as_str())) {
            return Ok(q);
        }
        emb.row_by_id(&item.id).ok_or_else(|| RetrievalError::MissingEmbedding(item.id.clone()))
    }

    pub fn similar(&self, item: &FurnitureItem, k: usize, corpus: &Corpus) -> Result<RetrievalResult> {
        let emb = self
            .embeddings
            .as_ref()
            .ok_or_else(|| RetrievalError::EmbeddingsRequired("example retrieval".into()))?;
        let query = self.example_query(emb, item)?;
        let category = match self.scope {
            RetrievalScope::WithinCategory => Some(item.category),
            RetrievalScope::CrossCategory => None,
        };
        retrieve_similar(emb, query, &item.id, category, k, corpus)
    }

    /// Retrieval material for `method`, or `None` when it retrieves nothing.
    pub fn retrieve_for(
        &self,
        method: PredictionMethod,
        item: &FurnitureItem,
        corpus: &Corpus,
    ) -> Result<Option<RetrievalResult>> {
        match method {
            PredictionMethod::ZeroShot | PredictionMethod::Oracle => Ok(None),
            PredictionMethod::CoverPage | PredictionMethod::FullManual => {
                let hit = self.bm25.query(&item.search_key(), 1);
                match hit.top() {
                    Some(top) if top.id == item.id => Ok(Some(hit)),
                    _ => Err(RetrievalError::Unresolved(item.id.clone())),
                }
            }
            PredictionMethod::RagImages { k } => self.similar(item, k, corpus).map(Some),
        }
    }
}
