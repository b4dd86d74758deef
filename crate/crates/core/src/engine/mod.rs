//! Per-caption CAOS scoring and run-level analyses.
//!
//! For each caption the ordered mention list is walked once. Ground-truth
//! objects plus genuine out-of-domain objects form the pool `T`; `X` starts
//! equal to `T` and grows by every mention after it has been visited; `K` is
//! the top-k most frequent training objects. Each hallucinated mention is
//! scored by its best cosine similarity against each pool.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::lexicon::{LexiconError, ObjectMention};
use crate::similarity::{max_similarity, LabelEmbedder, ObjectLabel, SimilarityError, Vector};

mod metrics;
pub mod pope;
mod sweep;

pub use metrics::{
    aggregate_run, cooccurrence_hallucination_fraction, precision_recall, subset_scores, AggregateScores,
    RunAggregate, Subset, SubsetAggregate,
};
pub use sweep::topk_sweep;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{mentions} mentions but {labels} genuine/hallucinated labels")]
    LengthMismatch { mentions: usize, labels: usize },
    #[error("top-k pool is empty")]
    EmptyTopK,
    #[error("none of the top-k labels {0:?} can be embedded")]
    TopKUnembeddable(Vec<String>),
    #[error("no caption records to aggregate")]
    NoRecords,
    #[error("k range is empty")]
    EmptyKRange,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

/// Scores of one caption under one embedding store. All six values are
/// `None` when no hallucination could be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaosScores {
    pub caos_t: Option<f64>,
    pub caos_x: Option<f64>,
    pub caos_k: Option<f64>,
    pub caos_t_over_x: Option<f64>,
    pub caos_x_over_k: Option<f64>,
    pub caos_avg: Option<f64>,
    /// Hallucinations that entered the averages.
    pub hallucination_count: usize,
    pub k_used: usize,
}

pub(crate) fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Means of the three similarity columns over `rows`, in order, skipping
/// rows without values. `None` when nothing remains.
pub(crate) fn column_means<'a, I>(rows: I) -> Option<(f64, f64, f64, usize)>
where
    I: IntoIterator<Item = &'a DetailRow>,
{
    let (mut t, mut x, mut k, mut n) = (0.0, 0.0, 0.0, 0usize);
    for row in rows {
        if let (Some(st), Some(sx), Some(sk)) = (row.sim_t, row.sim_x, row.sim_k) {
            t += st;
            x += sx;
            k += sk;
            n += 1;
        }
    }
    (n > 0).then(|| (t / n as f64, x / n as f64, k / n as f64, n))
}

impl CaosScores {
    pub fn from_rows(rows: &[DetailRow], k_used: usize) -> Self {
        match column_means(rows) {
            Some((t, x, k, n)) => Self {
                caos_t: Some(t),
                caos_x: Some(x),
                caos_k: Some(k),
                caos_t_over_x: ratio(t, x),
                caos_x_over_k: ratio(x, k),
                caos_avg: Some((t + x + k) / 3.0),
                hallucination_count: n,
                k_used,
            },
            None => Self {
                caos_t: None,
                caos_x: None,
                caos_k: None,
                caos_t_over_x: None,
                caos_x_over_k: None,
                caos_avg: None,
                hallucination_count: 0,
                k_used,
            },
        }
    }
}

/// One hallucinated mention. Similarities are `None` when the mention was
/// skipped, with the reason in `skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub label: ObjectLabel,
    /// Index of the mention in the caption's ordered list.
    pub position: usize,
    pub in_domain: bool,
    pub sim_t: Option<f64>,
    pub sim_x: Option<f64>,
    pub sim_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl DetailRow {
    pub fn is_scored(&self) -> bool {
        self.skipped.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaosResult {
    pub scores: CaosScores,
    pub details: Vec<DetailRow>,
}

/// Everything recorded about one generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub model: String,
    pub image_id: String,
    pub instruction_id: String,
    pub caption: String,
    pub mentions: Vec<ObjectMention>,
    /// `true` for genuine, `false` for hallucinated, aligned with `mentions`.
    pub genuine: Vec<bool>,
    pub ground_truth: Vec<ObjectLabel>,
    /// Keyed by embedding store name.
    pub stores: BTreeMap<String, CaosResult>,
}

impl CaptionRecord {
    pub fn hallucinated(&self) -> usize {
        self.genuine.iter().filter(|g| !**g).count()
    }
}

/// Memoizes lookups for one caption; out-of-vocabulary results are
/// remembered too.
pub(crate) struct Memo<'a, E: ?Sized> {
    inner: &'a E,
    seen: RefCell<HashMap<ObjectLabel, Option<Vector>>>,
}

impl<'a, E: LabelEmbedder + ?Sized> Memo<'a, E> {
    pub(crate) fn new(inner: &'a E) -> Self {
        Self {
            inner,
            seen: RefCell::new(HashMap::new()),
        }
    }
}

impl<E: LabelEmbedder + ?Sized> LabelEmbedder for Memo<'_, E> {
    fn embed_label(&self, label: &ObjectLabel) -> Result<Vector, SimilarityError> {
        if let Some(hit) = self.seen.borrow().get(label) {
            return hit
                .clone()
                .ok_or_else(|| SimilarityError::OutOfVocabulary(label.to_string()));
        }
        let got = match self.inner.embed_label(label) {
            Ok(v) => Some(v),
            Err(SimilarityError::OutOfVocabulary(_)) => None,
            Err(e) => return Err(e),
        };
        self.seen.borrow_mut().insert(label.clone(), got.clone());
        got.ok_or_else(|| SimilarityError::OutOfVocabulary(label.to_string()))
    }
}

fn push_unique(pool: &mut Vec<ObjectLabel>, label: &ObjectLabel) {
    if !pool.contains(label) {
        pool.push(label.clone());
    }
}

/// Score one caption.
///
/// `genuine[i]` tells whether `mentions[i]` is really in the image. A
/// hallucination whose label cannot be embedded, or whose `T` or `X` pool
/// has nothing embeddable yet, is kept as a skipped detail row and left out
/// of the averages.
pub fn caos_for_caption<E>(
    mentions: &[ObjectMention],
    genuine: &[bool],
    ground_truth: &BTreeSet<ObjectLabel>,
    top_k: &[ObjectLabel],
    store: &E,
) -> Result<CaosResult, EngineError>
where
    E: LabelEmbedder + ?Sized,
{
    if mentions.len() != genuine.len() {
        return Err(EngineError::LengthMismatch {
            mentions: mentions.len(),
            labels: genuine.len(),
        });
    }
    if top_k.is_empty() {
        return Err(EngineError::EmptyTopK);
    }
    let memo = Memo::new(store);
    let mut t: Vec<ObjectLabel> = ground_truth.iter().cloned().collect();
    for (m, g) in mentions.iter().zip(genuine) {
        if *g && !m.in_domain {
            push_unique(&mut t, &m.label);
        }
    }
    let mut x = t.clone();
    let mut details = Vec::new();
    let mut top_k_checked = false;

    for (position, (m, g)) in mentions.iter().zip(genuine).enumerate() {
        if !*g {
            let mut row = DetailRow {
                label: m.label.clone(),
                position,
                in_domain: m.in_domain,
                sim_t: None,
                sim_x: None,
                sim_k: None,
                skipped: None,
            };
            match score_one(&m.label, &t, &x, top_k, &memo) {
                Ok((st, sx, sk)) => {
                    row.sim_t = Some(st);
                    row.sim_x = Some(sx);
                    row.sim_k = Some(sk);
                    top_k_checked = true;
                }
                Err(Skip::Reason(reason)) => {
                    warn!(label = %m.label, %reason, "hallucination skipped");
                    row.skipped = Some(reason);
                }
                Err(Skip::Fatal(e)) => return Err(e),
            }
            details.push(row);
        }
        push_unique(&mut x, &m.label);
    }

    if !top_k_checked && !top_k.iter().any(|l| memo.embed_label(l).is_ok()) {
        return Err(EngineError::TopKUnembeddable(
            top_k.iter().map(ToString::to_string).collect(),
        ));
    }
    Ok(CaosResult {
        scores: CaosScores::from_rows(&details, top_k.len()),
        details,
    })
}

enum Skip {
    Reason(String),
    Fatal(EngineError),
}

fn score_one<E: LabelEmbedder + ?Sized>(
    label: &ObjectLabel,
    t: &[ObjectLabel],
    x: &[ObjectLabel],
    k: &[ObjectLabel],
    memo: &Memo<'_, E>,
) -> Result<(f64, f64, f64), Skip> {
    let pool = |name: &str, members: &[ObjectLabel]| match max_similarity(label, members, memo) {
        Ok(p) => Ok(p.value),
        Err(SimilarityError::OutOfVocabulary(_)) => Err(Skip::Reason("out of vocabulary".into())),
        Err(SimilarityError::EmptyPool { .. }) => Err(Skip::Reason(format!("empty {name} pool"))),
        Err(e) => Err(Skip::Fatal(e.into())),
    };
    let st = pool("T", t)?;
    let sx = pool("X", x)?;
    let sk = match max_similarity(label, k, memo) {
        Ok(p) => p.value,
        Err(SimilarityError::EmptyPool { .. }) => {
            return Err(Skip::Fatal(EngineError::TopKUnembeddable(
                k.iter().map(ToString::to_string).collect(),
            )))
        }
        Err(e) => return Err(Skip::Fatal(e.into())),
    };
    Ok((st, sx, sk))
}
