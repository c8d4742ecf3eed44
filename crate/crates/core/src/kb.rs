//! Per-household misjudgment knowledge base.
//!
//! Stores "bad cases" (utterances the gateway got wrong, with the label it
//! should have produced) and retrieves the most similar ones for a new
//! utterance by exhaustive cosine scoring over a deterministic hashed
//! character n-gram embedding.

use std::cmp::Ordering;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{normalize_text, Label, Timestamp};
use crate::store::{HouseholdFiles, StoreError};

pub const DEFAULT_DIMENSION: usize = 512;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_KB_CAPACITY: usize = 10_000;
/// Fixed seed mixed into every n-gram hash.
pub const DEFAULT_HASH_SEED: u64 = 0x005e_ed0f_ba5e_ca5e;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors score 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Text → fixed-length vector. Implementations must be deterministic.
pub trait Embedder: Send + Sync + fmt::Debug {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

/// Feature-hashed character n-grams (n = 1..=3), L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashedNgramEmbedder {
    /// # Panics
    ///
    /// Panics if `dimension` is 0.
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, seed }
    }

    fn bucket(&self, gram: &[char]) -> usize {
        let mut hash = FNV_OFFSET_BASIS;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(FNV_PRIME);
            }
        };
        feed(&self.seed.to_le_bytes());
        let mut buf = [0u8; 4];
        for c in gram {
            feed(c.encode_utf8(&mut buf).as_bytes());
        }
        (hash % self.dimension as u64) as usize
    }
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, DEFAULT_HASH_SEED)
    }
}

impl Embedder for HashedNgramEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        let chars: Vec<char> = normalize_text(text).chars().collect();
        let mut counts = vec![0f64; self.dimension];
        for n in 1..=3usize {
            for gram in chars.windows(n) {
                counts[self.bucket(gram)] += 1.0;
            }
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return EmbeddingVector::zeros(self.dimension);
        }
        EmbeddingVector(counts.into_iter().map(|c| (c / norm) as f32).collect())
    }
}

/// A stored misjudgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadCase {
    pub case_id: String,
    pub household_id: String,
    pub utterance: String,
    pub corrected_label: Label,
    pub created_at: Timestamp,
    /// Recomputed from `utterance` on load; never persisted.
    #[serde(skip)]
    pub embedding: EmbeddingVector,
}

/// Input to [`KnowledgeBase::add_case`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewBadCase {
    pub household_id: String,
    pub utterance: String,
    pub corrected_label: Label,
    pub created_at: Timestamp,
}

impl NewBadCase {
    pub fn case_id(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.household_id.as_str(),
            normalize_text(&self.utterance).as_str(),
            self.corrected_label.as_str(),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        h.update(self.created_at.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub case: BadCase,
    pub similarity: f64,
}

/// Retrieval order: similarity descending, then newest first, then case id.
pub fn rank_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| b.case.created_at.cmp(&a.case.created_at))
        .then_with(|| a.case.case_id.cmp(&b.case.case_id))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub accept: usize,
    pub reject: usize,
    pub total: usize,
}

#[derive(Debug, Default)]
struct HouseholdKb {
    cases: VecDeque<BadCase>,
    file_lines: usize,
}

#[derive(Serialize, Deserialize)]
struct CaseRecord {
    case_id: String,
    household_id: String,
    utterance: String,
    corrected_label: Label,
    created_at: Timestamp,
}

/// Knowledge base over all households. Writes to one household are
/// serialized; reads take a snapshot under a shared lock.
#[derive(Debug)]
pub struct KnowledgeBase {
    embedder: Arc<dyn Embedder>,
    capacity: usize,
    files: Option<HouseholdFiles>,
    households: RwLock<HashMap<String, Arc<RwLock<HouseholdKb>>>>,
}

impl KnowledgeBase {
    pub fn in_memory() -> Self {
        Self::with_embedder(Arc::new(HashedNgramEmbedder::default()), DEFAULT_KB_CAPACITY)
    }

    pub fn with_embedder(embedder: Arc<dyn Embedder>, capacity: usize) -> Self {
        Self {
            embedder,
            capacity: capacity.max(1),
            files: None,
            households: RwLock::new(HashMap::new()),
        }
    }

    /// Opens (or creates) a persistent KB under `dir`, replaying existing files.
    pub fn open(dir: impl Into<PathBuf>, embedder: Arc<dyn Embedder>, capacity: usize) -> Result<Self, StoreError> {
        let files = HouseholdFiles::open(dir)?;
        let kb = Self::replay(&files, embedder, capacity)?;
        Ok(Self {
            files: Some(files),
            ..kb
        })
    }

    /// Loads the cases under an existing `dir` into memory. Later additions
    /// are not written back.
    pub fn snapshot(dir: impl Into<PathBuf>, embedder: Arc<dyn Embedder>, capacity: usize) -> Result<Self, StoreError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(StoreError::Invalid(format!("{} is not a directory", dir.display())));
        }
        Self::replay(&HouseholdFiles::open(dir)?, embedder, capacity)
    }

    fn replay(files: &HouseholdFiles, embedder: Arc<dyn Embedder>, capacity: usize) -> Result<Self, StoreError> {
        let kb = Self::with_embedder(embedder, capacity);
        for (household, lines) in files.read_all()? {
            let slot = kb.slot(&household);
            let mut hh = slot.write();
            for (line_no, line) in &lines {
                let rec: CaseRecord = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                    path: files.display_path(&household),
                    line: *line_no,
                    message: e.to_string(),
                })?;
                let case = kb.materialize(rec);
                kb.insert(&mut hh, case);
            }
            hh.file_lines = lines.len();
        }
        Ok(kb)
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    fn slot(&self, household_id: &str) -> Arc<RwLock<HouseholdKb>> {
        if let Some(s) = self.households.read().get(household_id) {
            return s.clone();
        }
        self.households
            .write()
            .entry(household_id.to_string())
            .or_default()
            .clone()
    }

    fn existing(&self, household_id: &str) -> Option<Arc<RwLock<HouseholdKb>>> {
        self.households.read().get(household_id).cloned()
    }

    fn materialize(&self, rec: CaseRecord) -> BadCase {
        BadCase {
            embedding: self.embedder.embed(&rec.utterance),
            case_id: rec.case_id,
            household_id: rec.household_id,
            utterance: rec.utterance,
            corrected_label: rec.corrected_label,
            created_at: rec.created_at,
        }
    }

    /// Returns false for a duplicate.
    fn insert(&self, hh: &mut HouseholdKb, case: BadCase) -> bool {
        let key = normalize_text(&case.utterance);
        if hh
            .cases
            .iter()
            .any(|c| c.corrected_label == case.corrected_label && normalize_text(&c.utterance) == key)
        {
            return false;
        }
        hh.cases.push_back(case);
        while hh.cases.len() > self.capacity {
            hh.cases.pop_front();
        }
        true
    }

    /// Stores a case unless the household already holds the same normalized
    /// utterance with the same corrected label.
    pub fn add_case(&self, new: NewBadCase) -> Result<bool, StoreError> {
        if new.utterance.trim().is_empty() {
            return Err(StoreError::Invalid("empty utterance".into()));
        }
        if new.household_id.is_empty() {
            return Err(StoreError::Invalid("empty household id".into()));
        }
        let rec = CaseRecord {
            case_id: new.case_id(),
            household_id: new.household_id,
            utterance: new.utterance,
            corrected_label: new.corrected_label,
            created_at: new.created_at,
        };
        let line = serde_json::to_string(&rec).expect("case record serializes");
        let household = rec.household_id.clone();
        let case = self.materialize(rec);
        let slot = self.slot(&household);
        let mut hh = slot.write();
        if !self.insert(&mut hh, case) {
            return Ok(false);
        }
        if let Some(files) = &self.files {
            files.append(&household, &line)?;
            hh.file_lines += 1;
            if hh.file_lines > 2 * self.capacity {
                let lines: Vec<String> = hh
                    .cases
                    .iter()
                    .map(|c| {
                        serde_json::to_string(&CaseRecord {
                            case_id: c.case_id.clone(),
                            household_id: c.household_id.clone(),
                            utterance: c.utterance.clone(),
                            corrected_label: c.corrected_label,
                            created_at: c.created_at,
                        })
                        .expect("case record serializes")
                    })
                    .collect();
                files.rewrite(&household, lines.iter().map(String::as_str))?;
                hh.file_lines = lines.len();
            }
        }
        Ok(true)
    }

    /// Exact top-k by exhaustive scoring, restricted to one household.
    pub fn retrieve_top_k(&self, household_id: &str, query: &str, k: usize) -> Vec<RetrievalHit> {
        let Some(slot) = self.existing(household_id) else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        let q = self.embedder.embed(query);
        let mut hits: Vec<RetrievalHit> = {
            let hh = slot.read();
            hh.cases
                .iter()
                .map(|c| RetrievalHit {
                    similarity: cosine(&q, &c.embedding),
                    case: c.clone(),
                })
                .collect()
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        hits
    }

    pub fn kb_stats(&self, household_id: &str) -> KbStats {
        let Some(slot) = self.existing(household_id) else {
            return KbStats::default();
        };
        let hh = slot.read();
        let accept = hh.cases.iter().filter(|c| c.corrected_label == Label::Accept).count();
        KbStats {
            accept,
            reject: hh.cases.len() - accept,
            total: hh.cases.len(),
        }
    }

    /// Snapshot of a household's cases in insertion order.
    pub fn cases(&self, household_id: &str) -> Vec<BadCase> {
        self.existing(household_id)
            .map(|s| s.read().cases.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn contains_household(&self, household_id: &str) -> bool {
        self.existing(household_id).is_some_and(|s| !s.read().cases.is_empty())
    }

    pub fn households(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.households.read().keys().cloned().collect();
        ids.sort();
        ids
    }
}
