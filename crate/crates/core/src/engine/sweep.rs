//! CAOS_K as a function of k.

use std::collections::{BTreeMap, HashMap};

use super::{CaptionRecord, EngineError, Memo};
use crate::lexicon::{FrequencyTable, LexiconError};
use crate::similarity::{cosine_similarity, LabelEmbedder, ObjectLabel, SimilarityError};

/// Aggregate CAOS_K for every k in `k_range`, recomputed from the scored
/// hallucinations of `store` in `records`. Similarities to each frequent
/// label are computed once and reused across k.
pub fn topk_sweep<E>(
    records: &[CaptionRecord],
    store: &str,
    embedder: &E,
    frequency: &FrequencyTable,
    k_range: &[usize],
) -> Result<BTreeMap<usize, Option<f64>>, EngineError>
where
    E: LabelEmbedder + ?Sized,
{
    let k_max = *k_range.iter().max().ok_or(EngineError::EmptyKRange)?;
    for &k in k_range {
        if k == 0 || k > frequency.len() {
            return Err(LexiconError::KOutOfRange {
                k,
                max: frequency.len(),
            }
            .into());
        }
    }
    let ranked = frequency.top_k(k_max)?;
    let memo = Memo::new(embedder);
    let ranked_vecs = ranked
        .iter()
        .map(|l| match memo.embed_label(l) {
            Ok(v) => Ok(Some(v)),
            Err(SimilarityError::OutOfVocabulary(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;

    // prefix maxima per distinct hallucinated label
    let mut prefix: HashMap<ObjectLabel, Vec<Option<f64>>> = HashMap::new();
    let mut per_k: BTreeMap<usize, Vec<f64>> = k_range.iter().map(|&k| (k, Vec::new())).collect();
    for rec in records {
        let Some(result) = rec.stores.get(store) else {
            continue;
        };
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for row in result.details.iter().filter(|d| d.is_scored()) {
            if !prefix.contains_key(&row.label) {
                let target = memo.embed_label(&row.label)?;
                let mut best: Option<f64> = None;
                let mut curve = Vec::with_capacity(ranked.len());
                for v in &ranked_vecs {
                    if let Some(v) = v {
                        let s = cosine_similarity(&target, v)?;
                        best = Some(best.map_or(s, |b| b.max(s)));
                    }
                    curve.push(best);
                }
                prefix.insert(row.label.clone(), curve);
            }
            let curve = &prefix[&row.label];
            for &k in k_range {
                if let Some(s) = curve[k - 1] {
                    let e = sums.entry(k).or_insert((0.0, 0));
                    e.0 += s;
                    e.1 += 1;
                }
            }
        }
        for (k, (sum, n)) in sums {
            per_k.get_mut(&k).expect("k in range").push(sum / n as f64);
        }
    }
    Ok(per_k
        .into_iter()
        .map(|(k, means)| {
            let agg = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
            (k, agg)
        })
        .collect())
}
