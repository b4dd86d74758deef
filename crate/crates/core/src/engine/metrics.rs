//! Run-level aggregation: CAOS macro averages, CHAIR_S, precision/recall,
//! subset breakdowns and the co-occurrence analysis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{column_means, ratio, CaptionRecord, DetailRow, EngineError};
use crate::lexicon::{CoOccurrenceTable, FrequencyTable, ObjectMention};
use crate::similarity::ObjectLabel;

/// Run-level CAOS scores. Ratios and the average are taken from the three
/// aggregate means, not averaged per caption.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateScores {
    pub caos_t: Option<f64>,
    pub caos_x: Option<f64>,
    pub caos_k: Option<f64>,
    pub caos_t_over_x: Option<f64>,
    pub caos_x_over_k: Option<f64>,
    pub caos_avg: Option<f64>,
}

impl AggregateScores {
    pub fn from_means(t: f64, x: f64, k: f64) -> Self {
        Self {
            caos_t: Some(t),
            caos_x: Some(x),
            caos_k: Some(k),
            caos_t_over_x: ratio(t, x),
            caos_x_over_k: ratio(x, k),
            caos_avg: Some((t + x + k) / 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubsetAggregate {
    #[serde(flatten)]
    pub scores: AggregateScores,
    /// Captions with at least one scored hallucination in the subset.
    pub scored_captions: usize,
    pub unscored_captions: usize,
    /// Hallucinations that could not be embedded or had an empty pool.
    pub skipped_hallucinations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub captions: usize,
    pub hallucinated_captions: usize,
    /// Fraction of captions with at least one hallucinated object.
    pub chair_s: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub objects_per_caption: f64,
    /// Keyed by embedding store name.
    pub stores: BTreeMap<String, SubsetAggregate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    InDomainOnly,
    OutOfDomainOnly,
    ExcludingTopFrequent(usize),
}

impl Subset {
    pub fn name(&self) -> String {
        match self {
            Subset::All => "all".into(),
            Subset::InDomainOnly => "in_domain_only".into(),
            Subset::OutOfDomainOnly => "out_of_domain_only".into(),
            Subset::ExcludingTopFrequent(m) => format!("excluding_top_{m}_frequent"),
        }
    }
}

/// Precision over mentions (`None` without mentions) and recall over
/// distinct ground-truth labels (`None` without ground truth).
pub fn precision_recall(
    mentions: &[ObjectMention],
    genuine: &[bool],
    ground_truth: &BTreeSet<ObjectLabel>,
) -> (Option<f64>, Option<f64>) {
    let precision = (!mentions.is_empty())
        .then(|| genuine.iter().filter(|g| **g).count() as f64 / mentions.len() as f64);
    let recall = (!ground_truth.is_empty()).then(|| {
        let hit: BTreeSet<&ObjectLabel> = mentions
            .iter()
            .map(|m| &m.label)
            .filter(|l| ground_truth.contains(*l))
            .collect();
        hit.len() as f64 / ground_truth.len() as f64
    });
    (precision, recall)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate_rows<F>(records: &[CaptionRecord], store: &str, keep: F) -> SubsetAggregate
where
    F: Fn(&DetailRow) -> bool,
{
    let mut out = SubsetAggregate::default();
    let mut per_caption = Vec::new();
    for rec in records {
        let rows: Vec<&DetailRow> = rec
            .stores
            .get(store)
            .map(|r| r.details.iter().filter(|d| keep(d)).collect())
            .unwrap_or_default();
        out.skipped_hallucinations += rows.iter().filter(|d| !d.is_scored()).count();
        match column_means(rows) {
            Some((t, x, k, _)) => per_caption.push((t, x, k)),
            None => out.unscored_captions += 1,
        }
    }
    out.scored_captions = per_caption.len();
    if let (Some(t), Some(x), Some(k)) = (
        mean(per_caption.iter().map(|c| c.0)),
        mean(per_caption.iter().map(|c| c.1)),
        mean(per_caption.iter().map(|c| c.2)),
    ) {
        out.scores = AggregateScores::from_means(t, x, k);
    }
    out
}

/// Aggregate CAOS over the hallucinations selected by `subset`. Captions
/// whose selected rows are all missing count as unscored.
pub fn subset_scores(
    records: &[CaptionRecord],
    store: &str,
    subset: &Subset,
    frequency: &FrequencyTable,
) -> Result<SubsetAggregate, EngineError> {
    Ok(match subset {
        Subset::All => aggregate_rows(records, store, |_| true),
        Subset::InDomainOnly => aggregate_rows(records, store, |d| d.in_domain),
        Subset::OutOfDomainOnly => aggregate_rows(records, store, |d| !d.in_domain),
        Subset::ExcludingTopFrequent(m) => {
            let top: BTreeSet<ObjectLabel> = frequency.ranked().into_iter().take(*m).collect();
            aggregate_rows(records, store, |d| !top.contains(&d.label))
        }
    })
}

pub fn aggregate_run(records: &[CaptionRecord]) -> Result<RunAggregate, EngineError> {
    if records.is_empty() {
        return Err(EngineError::NoRecords);
    }
    let hallucinated_captions = records.iter().filter(|r| r.hallucinated() > 0).count();
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for r in records {
        let gt: BTreeSet<ObjectLabel> = r.ground_truth.iter().cloned().collect();
        let (p, rc) = precision_recall(&r.mentions, &r.genuine, &gt);
        precisions.extend(p);
        recalls.extend(rc);
    }
    let store_names: BTreeSet<&String> = records.iter().flat_map(|r| r.stores.keys()).collect();
    let stores = store_names
        .into_iter()
        .map(|s| (s.clone(), aggregate_rows(records, s, |_| true)))
        .collect();
    Ok(RunAggregate {
        captions: records.len(),
        hallucinated_captions,
        chair_s: hallucinated_captions as f64 / records.len() as f64,
        precision: mean(precisions),
        recall: mean(recalls),
        objects_per_caption: records.iter().map(|r| r.mentions.len()).sum::<usize>() as f64
            / records.len() as f64,
        stores,
    })
}

/// Fraction of in-domain hallucinations that are the most frequent
/// co-occurring object of some in-domain mention earlier in the same
/// caption. `None` when there are no in-domain hallucinations.
pub fn cooccurrence_hallucination_fraction(
    records: &[CaptionRecord],
    cooc: &CoOccurrenceTable,
) -> Option<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for r in records {
        for (i, (m, g)) in r.mentions.iter().zip(&r.genuine).enumerate() {
            if *g || !m.in_domain {
                continue;
            }
            total += 1;
            let explained = r.mentions[..i]
                .iter()
                .filter(|p| p.in_domain)
                .any(|p| cooc.most_frequent_cooccurrer(&p.label).ok().as_ref() == Some(&m.label));
            if explained {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
