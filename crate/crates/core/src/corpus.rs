//! Furniture corpus: item manifests, ground-truth connection sets and
//! dataset statistics.
//!
//! A corpus root holds one directory per item. Each directory carries an
//! `item.json` manifest plus the manual page images and the rendered parts
//! overview it references by relative path.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_FILE: &str = "item.json";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("item {id}: missing metadata file {path}")]
    MissingMetadata { id: String, path: PathBuf },
    #[error("item {id}: malformed metadata: {source}")]
    Metadata {
        id: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("item {id}: connection ({a},{b}) out of range for part_count {part_count}")]
    ConnectionOutOfRange {
        id: String,
        a: u32,
        b: u32,
        part_count: u32,
    },
    #[error("item {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("self-loop connection ({0},{0})")]
    SelfLoop(u32),
    #[error("unparsable group endpoint {0:?}")]
    GroupParse(String),
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Chair,
    Table,
    Bench,
    Shelf,
    Desk,
    Misc,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Chair,
        Category::Table,
        Category::Bench,
        Category::Shelf,
        Category::Desk,
        Category::Misc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Chair => "Chair",
            Category::Table => "Table",
            Category::Bench => "Bench",
            Category::Shelf => "Shelf",
            Category::Desk => "Desk",
            Category::Misc => "Misc",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

/// An unordered pair of distinct parts, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Connection {
    a: u32,
    b: u32,
}

impl Connection {
    pub fn a(self) -> u32 {
        self.a
    }

    pub fn b(self) -> u32 {
        self.b
    }

    pub fn contains(self, part: u32) -> bool {
        self.a == part || self.b == part
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.a, self.b)
    }
}

impl Serialize for Connection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.a, self.b].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Connection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[u32; 2]>::deserialize(d)?;
        normalize_connection(a, b).map_err(serde::de::Error::custom)
    }
}

/// Orders a raw pair so that the smaller index comes first.
pub fn normalize_connection(raw_a: u32, raw_b: u32) -> Result<Connection> {
    match raw_a.cmp(&raw_b) {
        std::cmp::Ordering::Less => Ok(Connection { a: raw_a, b: raw_b }),
        std::cmp::Ordering::Greater => Ok(Connection { a: raw_b, b: raw_a }),
        std::cmp::Ordering::Equal => Err(CorpusError::SelfLoop(raw_a)),
    }
}

/// A deduplicated set of connections, iterated in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConnectionSet(BTreeSet<Connection>);

impl ConnectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: Connection) -> bool {
        self.0.insert(c)
    }

    pub fn contains(&self, c: &Connection) -> bool {
        self.0.contains(c)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Connection> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &ConnectionSet) -> usize {
        self.0.intersection(&other.0).count()
    }

    /// Largest part index referenced, if any.
    pub fn max_index(&self) -> Option<u32> {
        self.0.iter().map(|c| c.b).max()
    }

    /// Builds a set from raw pairs, failing on any self-loop.
    pub fn from_pairs<I: IntoIterator<Item = (u32, u32)>>(pairs: I) -> Result<Self> {
        pairs
            .into_iter()
            .map(|(a, b)| normalize_connection(a, b))
            .collect()
    }

    /// First connection that references a part index `>= part_count`.
    pub fn first_out_of_range(&self, part_count: u32) -> Option<Connection> {
        self.0.iter().copied().find(|c| c.b >= part_count)
    }
}

impl FromIterator<Connection> for ConnectionSet {
    fn from_iter<T: IntoIterator<Item = Connection>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a ConnectionSet {
    type Item = &'a Connection;
    type IntoIter = std::collections::btree_set::Iter<'a, Connection>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// One side of a raw manifest connection: a single part or a comma-separated
/// group denoting a pre-assembled unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Endpoint {
    Part(u32),
    Group(String),
}

impl Endpoint {
    pub fn members(&self) -> Result<BTreeSet<u32>> {
        match self {
            Endpoint::Part(p) => Ok(BTreeSet::from([*p])),
            Endpoint::Group(s) => {
                let members = s
                    .split(',')
                    .map(|tok| tok.trim().parse::<u32>())
                    .collect::<std::result::Result<BTreeSet<_>, _>>()
                    .map_err(|_| CorpusError::GroupParse(s.clone()))?;
                if members.is_empty() {
                    return Err(CorpusError::GroupParse(s.clone()));
                }
                Ok(members)
            }
        }
    }
}

impl From<u32> for Endpoint {
    fn from(p: u32) -> Self {
        Endpoint::Part(p)
    }
}

impl From<&str> for Endpoint {
    fn from(s: &str) -> Self {
        Endpoint::Group(s.to_string())
    }
}

/// Expands raw endpoint pairs into a normalized connection set.
///
/// A pair of groups `A`, `B` contributes every cross pair `(a, b)` with
/// `a != b`. Pairs inside a single group are not emitted.
pub fn extract_ground_truth(raw: &[(Endpoint, Endpoint)]) -> Result<ConnectionSet> {
    let mut set = ConnectionSet::new();
    for (left, right) in raw {
        let left = left.members()?;
        let right = right.members()?;
        for &a in &left {
            for &b in &right {
                if a != b {
                    set.insert(normalize_connection(a, b)?);
                }
            }
        }
    }
    Ok(set)
}

/// On-disk `item.json` layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemManifest {
    pub id: String,
    pub category: Category,
    pub name: String,
    pub part_count: u32,
    pub pages: Vec<PathBuf>,
    pub parts_overview: PathBuf,
    pub connections: Vec<(Endpoint, Endpoint)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover_page: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assembly_steps: Option<Vec<Vec<(Endpoint, Endpoint)>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FurnitureItem {
    pub id: String,
    pub category: Category,
    pub name: String,
    pub part_count: u32,
    /// Item directory; all image refs below are relative to it.
    pub dir: PathBuf,
    pub manual_pages: Vec<PathBuf>,
    pub cover_page: PathBuf,
    pub parts_overview: PathBuf,
    pub ground_truth: ConnectionSet,
    pub assembly_steps: Option<Vec<ConnectionSet>>,
}

impl FurnitureItem {
    pub fn from_manifest(manifest: ItemManifest, dir: PathBuf) -> Result<Self> {
        let id = manifest.id.clone();
        let ground_truth = extract_ground_truth(&manifest.connections)
            .map_err(|e| CorpusError::Invalid { id: id.clone(), message: e.to_string() })?;
        let assembly_steps = manifest
            .assembly_steps
            .as_ref()
            .map(|steps| steps.iter().map(|s| extract_ground_truth(s)).collect::<Result<Vec<_>>>())
            .transpose()
            .map_err(|e| CorpusError::Invalid { id: id.clone(), message: e.to_string() })?;
        let cover_page = manifest
            .cover_page
            .clone()
            .or_else(|| manifest.pages.first().cloned())
            .unwrap_or_default();
        let item = FurnitureItem {
            id,
            category: manifest.category,
            name: manifest.name,
            part_count: manifest.part_count,
            dir,
            manual_pages: manifest.pages,
            cover_page,
            parts_overview: manifest.parts_overview,
            ground_truth,
            assembly_steps,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| CorpusError::Invalid {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.part_count == 0 {
            return Err(invalid("part_count must be at least 1"));
        }
        if self.manual_pages.is_empty() {
            return Err(invalid("manual has no pages"));
        }
        let sets = std::iter::once(&self.ground_truth).chain(self.assembly_steps.iter().flatten());
        for set in sets {
            if let Some(c) = set.first_out_of_range(self.part_count) {
                return Err(CorpusError::ConnectionOutOfRange {
                    id: self.id.clone(),
                    a: c.a,
                    b: c.b,
                    part_count: self.part_count,
                });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn page_paths(&self) -> Vec<PathBuf> {
        self.manual_pages.iter().map(|p| self.resolve(p)).collect()
    }

    pub fn cover_path(&self) -> PathBuf {
        self.resolve(&self.cover_page)
    }

    pub fn overview_path(&self) -> PathBuf {
        self.resolve(&self.parts_overview)
    }

    /// The BM25 document text and query string for this item.
    pub fn search_key(&self) -> String {
        format!("{} {}", self.category, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    items: Vec<FurnitureItem>,
    by_category: BTreeMap<Category, Vec<String>>,
}

impl Corpus {
    /// Validates every item and orders them lexicographically by id.
    pub fn new(mut items: Vec<FurnitureItem>) -> Result<Self> {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in items.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(CorpusError::DuplicateId(pair[0].id.clone()));
            }
        }
        let mut by_category: BTreeMap<Category, Vec<String>> = BTreeMap::new();
        for item in &items {
            item.validate()?;
            by_category.entry(item.category).or_default().push(item.id.clone());
        }
        Ok(Self { items, by_category })
    }

    pub fn items(&self) -> &[FurnitureItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FurnitureItem> {
        self.items
            .binary_search_by(|item| item.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.items[i])
    }

    pub fn find(&self, category: Category, name: &str) -> Option<&FurnitureItem> {
        self.by_category
            .get(&category)?
            .iter()
            .filter_map(|id| self.get(id))
            .find(|item| item.name == name)
    }

    pub fn by_category(&self) -> &BTreeMap<Category, Vec<String>> {
        &self.by_category
    }

    pub fn category_ids(&self, category: Category) -> &[String] {
        self.by_category.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Loads every item directory under `root`, in lexicographic id order.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.file_type().map_err(io_err(&entry.path()))?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();

    let mut items = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let dir_name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(CorpusError::MissingMetadata { id: dir_name, path: manifest_path });
        }
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: ItemManifest = serde_json::from_str(&text)
            .map_err(|source| CorpusError::Metadata { id: dir_name.clone(), source })?;
        items.push(FurnitureItem::from_manifest(manifest, dir)?);
    }
    Corpus::new(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Population statistics; `values` must be non-empty.
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: Category,
    pub count: usize,
    pub avg_parts: f64,
    pub avg_connections: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub item_count: usize,
    pub total_parts: u64,
    pub total_connections: u64,
    pub parts: Summary,
    pub connections: Summary,
    /// Sorted by count, descending.
    pub per_category: Vec<CategoryStats>,
}

pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let parts: Vec<f64> = corpus.items().iter().map(|i| f64::from(i.part_count)).collect();
    let conns: Vec<f64> = corpus.items().iter().map(|i| i.ground_truth.len() as f64).collect();

    let mut per_category: Vec<CategoryStats> = corpus
        .by_category()
        .iter()
        .map(|(&category, ids)| {
            let items: Vec<&FurnitureItem> = ids.iter().filter_map(|id| corpus.get(id)).collect();
            let n = items.len() as f64;
            CategoryStats {
                category,
                count: items.len(),
                avg_parts: items.iter().map(|i| f64::from(i.part_count)).sum::<f64>() / n,
                avg_connections: items.iter().map(|i| i.ground_truth.len() as f64).sum::<f64>() / n,
            }
        })
        .collect();
    per_category.sort_by(|a, b| b.count.cmp(&a.count).then(a.category.cmp(&b.category)));

    Ok(CorpusStats {
        item_count: corpus.len(),
        total_parts: corpus.items().iter().map(|i| u64::from(i.part_count)).sum(),
        total_connections: corpus.items().iter().map(|i| i.ground_truth.len() as u64).sum(),
        parts: Summary::of(&parts),
        connections: Summary::of(&conns),
        per_category,
    })
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "items: {}", self.item_count)?;
        writeln!(f, "total parts: {}", self.total_parts)?;
        writeln!(f, "total connections: {}", self.total_connections)?;
        for (label, s) in [("parts", &self.parts), ("connections", &self.connections)] {
            writeln!(
                f,
                "{label} per item: mean {:.2} (std {:.2}, range [{}, {}])",
                s.mean, s.std, s.min, s.max
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>6} {:>10} {:>16}", "Category", "Count", "Avg Parts", "Avg Connections")?;
        for row in &self.per_category {
            writeln!(
                f,
                "{:<10} {:>6} {:>10.1} {:>16.1}",
                row.category.as_str(),
                row.count,
                row.avg_parts,
                row.avg_connections
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn item(id: &str, category: Category, part_count: u32, gt: &[(u32, u32)]) -> FurnitureItem {
        let name = id.split_once('_').map(|(_, n)| n).unwrap_or(id).to_string();
        FurnitureItem {
            id: id.to_string(),
            category,
            name,
            part_count,
            dir: PathBuf::from("/nonexistent").join(id),
            manual_pages: vec![PathBuf::from("pages/page_00.png")],
            cover_page: PathBuf::from("pages/page_00.png"),
            parts_overview: PathBuf::from("parts_overview.ppm"),
            ground_truth: ConnectionSet::from_pairs(gt.iter().copied()).unwrap(),
            assembly_steps: None,
        }
    }
}
