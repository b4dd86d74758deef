//! Vectors, embedding stores and cosine-similarity primitives.
//!
//! Two kinds of store exist. File-backed stores hold a word-vector table in
//! the GloVe text layout and embed multi-word labels as the unweighted mean
//! of their token vectors. Endpoint-backed stores send the whole label to a
//! remote embedding service and persist every fetched vector in an
//! [`EmbeddingCache`] so reruns never need the network.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::jsonl::AppendLog;

/// Drift tolerated before clamping a cosine back into `[-1, 1]`.
pub const COSINE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("degenerate vector: zero norm")]
    ZeroNorm,
    #[error("vector has a non-finite component at index {0}")]
    NonFinite(usize),
    #[error("vector must have at least one component")]
    EmptyVector,
    #[error("out of vocabulary: {0:?}")]
    OutOfVocabulary(String),
    #[error("empty pool: no pool member could be embedded ({skipped} skipped)")]
    EmptyPool { skipped: usize },
    #[error("invalid object label: {0:?}")]
    InvalidLabel(String),
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("embedding store {0:?} contains no vectors")]
    EmptyStore(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding endpoint returned {got} vectors for {expected} texts")]
    ResponseShape { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A dense vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self, SimilarityError> {
        if components.is_empty() {
            return Err(SimilarityError::EmptyVector);
        }
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(SimilarityError::NonFinite(i));
        }
        Ok(Self(components))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, SimilarityError> {
        Self::new(self.0.iter().map(|c| c * factor).collect())
    }

    fn mean_of(rows: &[&[f32]]) -> Result<Self, SimilarityError> {
        let dim = rows[0].len();
        let mut acc = vec![0.0f64; dim];
        for row in rows {
            for (a, &c) in acc.iter_mut().zip(row.iter()) {
                *a += f64::from(c);
            }
        }
        let n = rows.len() as f64;
        Self::new(acc.into_iter().map(|a| a / n).collect())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = SimilarityError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Canonical object name: trimmed, lowercase, single-spaced, non-empty.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectLabel(String);

impl ObjectLabel {
    pub fn new(raw: &str) -> Result<Self, SimilarityError> {
        let normalized = raw
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ");
        if normalized.is_empty() {
            return Err(SimilarityError::InvalidLabel(raw.to_string()));
        }
        Ok(Self(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObjectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ObjectLabel {
    type Error = SimilarityError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value)
    }
}

impl From<ObjectLabel> for String {
    fn from(l: ObjectLabel) -> Self {
        l.0
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64, SimilarityError> {
    if a.dimension() != b.dimension() {
        return Err(SimilarityError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    debug_assert!(cos.abs() <= 1.0 + COSINE_EPSILON, "cosine drift: {cos}");
    Ok(cos.clamp(-1.0, 1.0))
}

/// Anything that can turn an object label into a vector.
pub trait LabelEmbedder {
    fn embed_label(&self, label: &ObjectLabel) -> Result<Vector, SimilarityError>;
}

/// Result of [`max_similarity`]: the best cosine plus how many pool members
/// were skipped as out-of-vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolMax {
    pub value: f64,
    pub skipped: usize,
}

/// Maximum cosine similarity between `target` and any embeddable member of
/// `pool`. Out-of-vocabulary pool members are skipped and tallied.
pub fn max_similarity<'a, E, I>(
    target: &ObjectLabel,
    pool: I,
    store: &E,
) -> Result<PoolMax, SimilarityError>
where
    E: LabelEmbedder + ?Sized,
    I: IntoIterator<Item = &'a ObjectLabel>,
{
    let t = store.embed_label(target)?;
    let mut best: Option<f64> = None;
    let mut skipped = 0;
    for member in pool {
        let v = match store.embed_label(member) {
            Ok(v) => v,
            Err(SimilarityError::OutOfVocabulary(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = cosine_similarity(&t, &v)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    match best {
        Some(value) => Ok(PoolMax { value, skipped }),
        None => Err(SimilarityError::EmptyPool { skipped }),
    }
}

/// Where a store's vectors come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreSource {
    File { path: PathBuf },
    Endpoint { endpoint: String },
    Memory,
}

enum Backend {
    Table(HashMap<String, Box<[f32]>>),
    Remote {
        gateway: Arc<Gateway>,
        endpoint: String,
        cache: Arc<EmbeddingCache>,
    },
}

/// A named label → vector mapping of fixed dimension.
pub struct EmbeddingStore {
    name: String,
    dimension: usize,
    source: StoreSource,
    backend: Backend,
}

impl fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl EmbeddingStore {
    /// Load a whitespace-separated `token v1 .. vd` file. The dimension is
    /// taken from the first line; every other line must agree.
    pub fn load_text(name: &str, path: &Path) -> Result<Self, SimilarityError> {
        let io_err = |source| SimilarityError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut entries: HashMap<String, Box<[f32]>> = HashMap::new();
        let mut dimension = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            let lineno = idx + 1;
            let malformed = |reason: String| SimilarityError::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                reason,
            };
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_lowercase();
            let values = parts
                .map(|p| {
                    p.parse::<f32>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| malformed(format!("bad component {p:?}")))
                })
                .collect::<Result<Vec<f32>, _>>()?;
            if values.is_empty() {
                return Err(malformed("no vector components".into()));
            }
            if dimension == 0 {
                dimension = values.len();
            } else if values.len() != dimension {
                return Err(malformed(format!(
                    "expected {dimension} components, found {}",
                    values.len()
                )));
            }
            // first occurrence wins, as in the reference GloVe readers
            entries.entry(token).or_insert_with(|| values.into());
        }
        if entries.is_empty() {
            return Err(SimilarityError::EmptyStore(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            dimension,
            source: StoreSource::File {
                path: path.to_path_buf(),
            },
            backend: Backend::Table(entries),
        })
    }

    /// Build a table-backed store from in-memory vectors.
    pub fn from_entries<I, S>(name: &str, entries: I) -> Result<Self, SimilarityError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut table = HashMap::new();
        let mut dimension = 0;
        for (token, values) in entries {
            let v = Vector::new(values)?;
            if dimension == 0 {
                dimension = v.dimension();
            } else if v.dimension() != dimension {
                return Err(SimilarityError::DimensionMismatch {
                    left: dimension,
                    right: v.dimension(),
                });
            }
            let row: Box<[f32]> = v.0.iter().map(|&c| c as f32).collect();
            table.insert(token.as_ref().trim().to_lowercase(), row);
        }
        if table.is_empty() {
            return Err(SimilarityError::EmptyStore(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            dimension,
            source: StoreSource::Memory,
            backend: Backend::Table(table),
        })
    }

    /// A store backed by a remote embedding endpoint. Fetched vectors are
    /// written through `cache`.
    pub fn remote(
        name: &str,
        dimension: usize,
        gateway: Arc<Gateway>,
        endpoint: &str,
        cache: Arc<EmbeddingCache>,
    ) -> Self {
        Self {
            name: name.to_string(),
            dimension,
            source: StoreSource::Endpoint {
                endpoint: endpoint.to_string(),
            },
            backend: Backend::Remote {
                gateway,
                endpoint: endpoint.to_string(),
                cache,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn source(&self) -> &StoreSource {
        &self.source
    }

    /// Number of tokens held by a table store; `None` for remote stores.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<usize> {
        match &self.backend {
            Backend::Table(t) => Some(t.len()),
            Backend::Remote { .. } => None,
        }
    }

    pub fn contains_token(&self, token: &str) -> bool {
        matches!(&self.backend, Backend::Table(t) if t.contains_key(token))
    }

    /// Embed an object label. Table stores try the whole label first and
    /// otherwise average the vectors of its whitespace tokens that are
    /// present; remote stores embed the label as one unit.
    pub fn embed_object(&self, label: &ObjectLabel) -> Result<Vector, SimilarityError> {
        match &self.backend {
            Backend::Table(table) => {
                if let Some(row) = table.get(label.as_str()) {
                    return Vector::mean_of(&[row]);
                }
                let rows: Vec<&[f32]> = label
                    .as_str()
                    .split(' ')
                    .filter_map(|t| table.get(t).map(|r| &r[..]))
                    .collect();
                if rows.is_empty() {
                    return Err(SimilarityError::OutOfVocabulary(label.to_string()));
                }
                Vector::mean_of(&rows)
            }
            Backend::Remote {
                gateway,
                endpoint,
                cache,
            } => {
                if let Some(v) = cache.get(&self.name, label.as_str()) {
                    return Ok(v);
                }
                let mut vectors = gateway.embed(endpoint, &[label.as_str()])?;
                if vectors.len() != 1 {
                    return Err(SimilarityError::ResponseShape {
                        expected: 1,
                        got: vectors.len(),
                    });
                }
                let v = Vector::new(vectors.remove(0))?;
                if v.dimension() != self.dimension {
                    return Err(SimilarityError::DimensionMismatch {
                        left: self.dimension,
                        right: v.dimension(),
                    });
                }
                cache.put(&self.name, label.as_str(), &v)?;
                Ok(v)
            }
        }
    }
}

impl LabelEmbedder for EmbeddingStore {
    fn embed_label(&self, label: &ObjectLabel) -> Result<Vector, SimilarityError> {
        self.embed_object(label)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    label: String,
    store: String,
    vector: Vector,
}

/// Append-only JSONL cache of remotely fetched vectors, keyed by
/// `(store name, label)`. Reads are concurrent; appends are serialized.
pub struct EmbeddingCache {
    log: Option<AppendLog>,
    entries: RwLock<HashMap<(String, String), Vector>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            log: None,
            entries: RwLock::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn open(path: &Path) -> Result<Self, SimilarityError> {
        let (log, records) =
            AppendLog::open::<CacheRecord>(path).map_err(|source| SimilarityError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let entries = records
            .into_iter()
            .map(|r| ((r.store, r.label), r.vector))
            .collect();
        Ok(Self {
            log: Some(log),
            entries: RwLock::new(entries),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn get(&self, store: &str, label: &str) -> Option<Vector> {
        let found = self
            .entries
            .read()
            .expect("embedding cache lock poisoned")
            .get(&(store.to_string(), label.to_string()))
            .cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(&self, store: &str, label: &str, vector: &Vector) -> Result<(), SimilarityError> {
        let key = (store.to_string(), label.to_string());
        let mut entries = self.entries.write().expect("embedding cache lock poisoned");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            let rec = CacheRecord {
                label: label.to_string(),
                store: store.to_string(),
                vector: vector.clone(),
            };
            log.append(&rec).map_err(|source| SimilarityError::Io {
                path: log.path().to_path_buf(),
                source,
            })?;
        }
        entries.insert(key, vector.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("embedding cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(c: &[f64]) -> Vector {
        Vector::new(c.to_vec()).unwrap()
    }

    fn label(s: &str) -> ObjectLabel {
        ObjectLabel::new(s).unwrap()
    }

    fn fixture_store() -> EmbeddingStore {
        EmbeddingStore::from_entries(
            "fixture",
            [
                ("dog", vec![1.0, 0.0, 0.0]),
                ("cat", vec![0.5, 0.5, 0.0]),
                ("dining", vec![0.0, 2.0, 1.0]),
                ("table", vec![1.0, 0.0, 3.0]),
                ("kitten", vec![0.5, 0.5, 0.0]),
                ("car", vec![0.0, 0.0, 1.0]),
                ("bus", vec![0.1, 0.2, 0.9]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_computed() {
        // dot = 2 + 2 + 4 = 8, norms = 3 and 3
        let s = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(SimilarityError::DimensionMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(SimilarityError::ZeroNorm)
        ));
    }

    #[test]
    fn vector_rejects_non_finite_and_empty() {
        assert!(matches!(Vector::new(vec![]), Err(SimilarityError::EmptyVector)));
        assert!(matches!(
            Vector::new(vec![1.0, f64::NAN]),
            Err(SimilarityError::NonFinite(1))
        ));
    }

    #[test]
    fn label_normalization() {
        assert_eq!(label("  Dining   TABLE ").as_str(), "dining table");
        assert!(ObjectLabel::new("   ").is_err());
    }

    #[test]
    fn embed_single_token() {
        let store = fixture_store();
        assert_eq!(store.embed_object(&label("dog")).unwrap(), v(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn embed_multi_word_is_token_mean() {
        let store = fixture_store();
        // ([0,2,1] + [1,0,3]) / 2
        let got = store.embed_object(&label("dining table")).unwrap();
        assert_eq!(got, v(&[0.5, 1.0, 2.0]));
        // unknown tokens are ignored when at least one token is known
        let got = store.embed_object(&label("wooden table")).unwrap();
        assert_eq!(got, v(&[1.0, 0.0, 3.0]));
    }

    #[test]
    fn embed_out_of_vocabulary() {
        let store = fixture_store();
        match store.embed_object(&label("zxqv")) {
            Err(SimilarityError::OutOfVocabulary(l)) => assert_eq!(l, "zxqv"),
            other => panic!("expected OOV, got {other:?}"),
        }
    }

    #[test]
    fn max_similarity_identical_vector() {
        let store = fixture_store();
        let pool = [label("kitten")];
        let m = max_similarity(&label("cat"), &pool, &store).unwrap();
        assert!((m.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_similarity_empty_and_skips() {
        let store = fixture_store();
        let empty: [ObjectLabel; 0] = [];
        assert!(matches!(
            max_similarity(&label("cat"), &empty, &store),
            Err(SimilarityError::EmptyPool { skipped: 0 })
        ));
        let pool = [label("zxqv"), label("dog")];
        let m = max_similarity(&label("cat"), &pool, &store).unwrap();
        assert_eq!(m.skipped, 1);
        let only_oov = [label("zxqv")];
        assert!(matches!(
            max_similarity(&label("cat"), &only_oov, &store),
            Err(SimilarityError::EmptyPool { skipped: 1 })
        ));
        assert!(matches!(
            max_similarity(&label("zxqv"), &pool, &store),
            Err(SimilarityError::OutOfVocabulary(_))
        ));
    }

    #[test]
    fn max_similarity_matches_pairwise_scan() {
        let store = fixture_store();
        let target = label("bus");
        let pool: Vec<_> = ["dog", "cat", "dining table", "car", "kitten"]
            .iter()
            .map(|s| label(s))
            .collect();
        // exhaustive scan with the formula written out
        let t = store.embed_object(&target).unwrap();
        let mut brute = f64::NEG_INFINITY;
        for p in &pool {
            let pv = store.embed_object(p).unwrap();
            let dot: f64 = t.components().iter().zip(pv.components()).map(|(a, b)| a * b).sum();
            brute = brute.max(dot / (t.norm() * pv.norm()));
        }
        let got = max_similarity(&target, &pool, &store).unwrap();
        assert!((got.value - brute).abs() < 1e-12);
    }

    #[test]
    fn load_text_store_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("vec.txt");
        std::fs::write(&good, "Dog 1 0 0\ncat 0.5 0.5 0\n\ntable 1 0 3\n").unwrap();
        let store = EmbeddingStore::load_text("glove", &good).unwrap();
        assert_eq!(store.dimension(), 3);
        assert_eq!(store.len(), Some(3));
        assert!(store.contains_token("dog"));

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "dog 1 0 0\ncat 0.5 0.5\n").unwrap();
        match EmbeddingStore::load_text("glove", &bad) {
            Err(SimilarityError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line, got {other:?}"),
        }
        let nan = dir.path().join("nan.txt");
        std::fs::write(&nan, "dog 1 x 0\n").unwrap();
        assert!(matches!(
            EmbeddingStore::load_text("glove", &nan),
            Err(SimilarityError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            EmbeddingStore::load_text("glove", &dir.path().join("missing.txt")),
            Err(SimilarityError::Io { .. })
        ));
    }

    #[test]
    fn cache_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            assert!(cache.get("minilm", "dog").is_none());
            cache.put("minilm", "dog", &v(&[0.25, 0.5])).unwrap();
            cache.put("minilm", "dog", &v(&[0.25, 0.5])).unwrap();
            assert_eq!(cache.misses(), 1);
        }
        // simulate a torn trailing write
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"label\":\"ca").unwrap();
        drop(f);
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get("minilm", "dog"), Some(v(&[0.25, 0.5])));
        assert_eq!(cache.hits(), 1);
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("non-zero", |c| c.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in arb_vec(6), b in arb_vec(6)) {
            let (a, b) = (v(&a), v(&b));
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn cosine_scale_invariant(a in arb_vec(4), b in arb_vec(4), c in 0.01f64..100.0) {
            let (a, b) = (v(&a), v(&b));
            let scaled = a.scaled(c).unwrap();
            let d = cosine_similarity(&scaled, &b).unwrap() - cosine_similarity(&a, &b).unwrap();
            prop_assert!(d.abs() <= 1e-9);
        }

        #[test]
        fn max_similarity_monotone_in_pool(split in 1usize..6) {
            let store = fixture_store();
            let all: Vec<_> = ["dog", "cat", "dining", "table", "car", "kitten"]
                .iter().map(|s| label(s)).collect();
            let small = &all[..split];
            let a = max_similarity(&label("bus"), small, &store).unwrap().value;
            let b = max_similarity(&label("bus"), &all, &store).unwrap().value;
            prop_assert!(a <= b);
        }
    }
}
