//! Exact inner-product index over unit-norm image embeddings, plus the
//! similarity-weighted class vote used for retrieval grounding.
//!
//! On disk an index is a directory holding `embeddings.manifest.json` and
//! `embeddings.jsonl`, the same layout the embedding sidecar emits.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LabelSet;

pub const MANIFEST_FILE: &str = "embeddings.manifest.json";
pub const RECORDS_FILE: &str = "embeddings.jsonl";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 512;

const NORM_TOLERANCE: f64 = 1e-6;
const NORM_WARN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("no hits to vote over")]
    EmptyHits,
    #[error("all similarities are non-positive")]
    ZeroSimilarityMass,
    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("record `{0}` has no label")]
    MissingLabel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` onto the unit hypersphere.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    let n = norm(v);
    if n <= 0.0 || !n.is_finite() {
        return Err(VectorError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    /// Absent on query records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub dim: usize,
    pub count: usize,
    pub normalized: bool,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub record_id: String,
    pub label: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVote {
    pub category: String,
    pub confidence: f64,
}

/// Immutable flat index. Vectors are stored contiguously, row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<String>,
    meta: Vec<BTreeMap<String, String>>,
    data: Vec<f64>,
}

/// Outcome of building an index: the index plus ids whose input vectors
/// needed a norm correction above 1e-3.
#[derive(Debug, Clone)]
pub struct BuildReport {
    pub index: VectorIndex,
    pub renormalized: Vec<String>,
}

impl VectorIndex {
    /// Builds an index, normalizing any vector that is not already unit norm.
    /// `dim` is only consulted when `records` is empty.
    pub fn build(records: Vec<EmbeddingRecord>, dim: usize) -> Result<BuildReport, VectorError> {
        let dim = records.first().map(|r| r.vector.len()).unwrap_or(dim);
        let mut seen = HashSet::with_capacity(records.len());
        let mut index = VectorIndex {
            dim,
            ids: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
            meta: Vec::with_capacity(records.len()),
            data: Vec::with_capacity(records.len() * dim),
        };
        let mut renormalized = Vec::new();
        for rec in records {
            if rec.vector.len() != dim {
                return Err(VectorError::DimensionMismatch { expected: dim, got: rec.vector.len() });
            }
            if !seen.insert(rec.id.clone()) {
                return Err(VectorError::DuplicateId(rec.id));
            }
            let label = rec.label.ok_or_else(|| VectorError::MissingLabel(rec.id.clone()))?;
            let n = norm(&rec.vector);
            if (n - 1.0).abs() > NORM_WARN {
                log::warn!("record {}: norm {n} corrected to 1", rec.id);
                renormalized.push(rec.id.clone());
            }
            if (n - 1.0).abs() > 0.0 {
                index.data.extend(normalize(&rec.vector)?);
            } else {
                index.data.extend(rec.vector);
            }
            index.ids.push(rec.id);
            index.labels.push(label);
            index.meta.push(rec.meta);
        }
        Ok(BuildReport { index, renormalized })
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

    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            dim: self.dim,
            count: self.len(),
            normalized: true,
            format_version: FORMAT_VERSION,
        }
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        (0..self.len()).map(move |i| EmbeddingRecord {
            id: self.ids[i].clone(),
            label: Some(self.labels[i].clone()),
            vector: self.vector(i).to_vec(),
            meta: self.meta[i].clone(),
        })
    }

    /// Distinct labels present in the index, lexicographically sorted.
    pub fn label_set(&self) -> Option<LabelSet> {
        let distinct: BTreeSet<&str> = self.labels.iter().map(String::as_str).collect();
        LabelSet::new(distinct).ok()
    }

    /// Exact top-k by inner product in one linear scan. Hits are ordered by
    /// similarity descending, then record id ascending.
    pub fn knn_query(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>, VectorError> {
        if query.len() != self.dim {
            return Err(VectorError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        if k == 0 {
            return Err(VectorError::InvalidK);
        }
        if self.is_empty() {
            return Err(VectorError::EmptyIndex);
        }
        // max-heap on "worse first" keeps the current k best at hand
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for (i, id) in self.ids.iter().enumerate() {
            let cand = Candidate { similarity: dot(query, self.vector(i)), id, row: i };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| RetrievalHit {
                record_id: c.id.clone(),
                label: self.labels[c.row].clone(),
                similarity: c.similarity,
            })
            .collect())
    }

    /// Writes the manifest and record files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), VectorError> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| VectorError::CorruptManifest(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        let mut out = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
        for rec in self.records() {
            let line = serde_json::to_string(&rec).map_err(|e| VectorError::CorruptRecord {
                line: 0,
                reason: e.to_string(),
            })?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, VectorError> {
        Ok(Self::load_with_report(dir)?.index)
    }

    /// Loads an index, validating the manifest against every record.
    pub fn load_with_report(dir: &Path) -> Result<BuildReport, VectorError> {
        let (manifest, records) = read_embedding_dir(dir)?;
        for (i, rec) in records.iter().enumerate() {
            if rec.label.is_none() {
                return Err(VectorError::CorruptRecord { line: i + 1, reason: "missing label".into() });
            }
        }
        Self::build(records, manifest.dim)
    }
}

/// Reads a manifest + JSONL record pair. Records are checked against the
/// manifest dimension and count.
pub fn read_embedding_dir(dir: &Path) -> Result<(IndexManifest, Vec<EmbeddingRecord>), VectorError> {
    let raw = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: IndexManifest =
        serde_json::from_str(&raw).map_err(|e| VectorError::CorruptManifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(VectorError::FormatVersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let reader = BufReader::new(fs::File::open(dir.join(RECORDS_FILE))?);
    let mut records = Vec::with_capacity(manifest.count);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| VectorError::CorruptRecord { line: line_no, reason: e.to_string() })?;
        if rec.vector.len() != manifest.dim {
            return Err(VectorError::CorruptRecord {
                line: line_no,
                reason: format!("dimension {} does not match manifest {}", rec.vector.len(), manifest.dim),
            });
        }
        if manifest.normalized && (norm(&rec.vector) - 1.0).abs() > NORM_WARN {
            log::warn!("record {} at line {line_no}: stored vector is not unit norm", rec.id);
        }
        records.push(rec);
    }
    if records.len() != manifest.count {
        return Err(VectorError::CorruptRecord {
            line: records.len() + 1,
            reason: format!("manifest count {} but {} records", manifest.count, records.len()),
        });
    }
    Ok((manifest, records))
}

/// Writes records in the embedding-directory layout without building an
/// index; query embeddings use this since they carry no labels.
pub fn write_embedding_dir(dir: &Path, records: &[EmbeddingRecord]) -> Result<(), VectorError> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(DEFAULT_DIM);
    fs::create_dir_all(dir)?;
    let manifest = IndexManifest {
        dim,
        count: records.len(),
        normalized: records.iter().all(|r| (norm(&r.vector) - 1.0).abs() <= NORM_TOLERANCE),
        format_version: FORMAT_VERSION,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    let mut out = BufWriter::new(fs::File::create(dir.join(RECORDS_FILE))?);
    for rec in records {
        if rec.vector.len() != dim {
            return Err(VectorError::DimensionMismatch { expected: dim, got: rec.vector.len() });
        }
        out.write_all(serde_json::to_string(rec).expect("record serializes").as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Query embeddings keyed by image id, unit-normalized on load.
#[derive(Debug, Clone, Default)]
pub struct QueryEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl QueryEmbeddings {
    pub fn load(dir: &Path) -> Result<Self, VectorError> {
        let (manifest, records) = read_embedding_dir(dir)?;
        let mut vectors = BTreeMap::new();
        for rec in records {
            let v = normalize(&rec.vector)?;
            if vectors.insert(rec.id.clone(), v).is_some() {
                return Err(VectorError::DuplicateId(rec.id));
            }
        }
        Ok(Self { dim: manifest.dim, vectors })
    }

    pub fn from_map(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Self {
        Self { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.vectors.get(image_id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    similarity: f64,
    id: &'a String,
    row: usize,
}

// "Less" means ranked earlier: higher similarity, then smaller id.
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Similarity-weighted class confidences over a hit set. Negative
/// similarities are clamped to zero before voting. Output is sorted by
/// confidence descending, ties in `labels` order (unknown labels last, then
/// lexicographic).
pub fn weighted_vote(hits: &[RetrievalHit], labels: &LabelSet) -> Result<Vec<ClassVote>, VectorError> {
    if hits.is_empty() {
        return Err(VectorError::EmptyHits);
    }
    let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
    let mut total = 0.0;
    for hit in hits {
        let s = hit.similarity.max(0.0);
        *mass.entry(hit.label.as_str()).or_default() += s;
        total += s;
    }
    if total <= 0.0 {
        return Err(VectorError::ZeroSimilarityMass);
    }
    let mut votes: Vec<ClassVote> = mass
        .into_iter()
        .map(|(label, m)| ClassVote { category: label.to_string(), confidence: m / total })
        .collect();
    votes.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| labels.rank(&a.category).cmp(&labels.rank(&b.category)))
            .then_with(|| a.category.cmp(&b.category))
    });
    Ok(votes)
}

/// Renders votes as a ranked JSON array, one object per line, confidences
/// rounded to 4 decimals:
///
/// ```text
/// [
///   {"category": "scab", "confidence": 0.5005},
///   {"category": "healthy", "confidence": 0.3996}
/// ]
/// ```
pub fn format_votes(votes: &[ClassVote]) -> String {
    if votes.is_empty() {
        return "[]".to_string();
    }
    let body: Vec<String> = votes
        .iter()
        .map(|v| {
            let category = serde_json::to_string(&v.category).expect("string serializes");
            let confidence = serde_json::to_string(&round4(v.confidence)).expect("float serializes");
            format!("  {{\"category\": {category}, \"confidence\": {confidence}}}")
        })
        .collect();
    format!("[\n{}\n]", body.join(",\n"))
}

pub fn parse_votes(text: &str) -> Result<Vec<ClassVote>, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
