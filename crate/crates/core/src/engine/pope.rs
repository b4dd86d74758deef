//! Yes/no object probing in the POPE style.
//!
//! Each image gets a balanced set of questions: objects from its ground
//! truth (answer yes) and the same number of absent objects (answer no),
//! chosen at random, by training frequency, or by co-occurrence with the
//! ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::gateway::{ChatTurn, Decoding, Gateway, ImageSource};
use crate::lexicon::{tokenize, CoOccurrenceTable, FrequencyTable, Vocabulary};
use crate::similarity::ObjectLabel;

#[derive(Debug, Error)]
pub enum PopeError {
    #[error("unknown negative sampling {0:?} (expected random, popular or adversarial)")]
    UnknownSampling(String),
    #[error("adversarial sampling needs a co-occurrence table")]
    MissingCooccurrence,
    #[error("questions per image must be a positive even number, got {0}")]
    BadQuestionCount(usize),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampling {
    #[default]
    Random,
    Popular,
    Adversarial,
}

impl FromStr for NegativeSampling {
    type Err = PopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "popular" => Ok(Self::Popular),
            "adversarial" => Ok(Self::Adversarial),
            _ => Err(PopeError::UnknownSampling(s.to_string())),
        }
    }
}

impl fmt::Display for NegativeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Popular => "popular",
            Self::Adversarial => "adversarial",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PopeImage {
    pub image_id: String,
    pub image: ImageSource,
    pub ground_truth: BTreeSet<ObjectLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: String,
    pub object: ObjectLabel,
    pub expected_yes: bool,
}

pub fn question_text(object: &ObjectLabel) -> String {
    format!("Is there a {object} in the image?")
}

/// Exactly one of "yes"/"no" decides; anything else is unparseable.
pub fn normalize_yes_no(reply: &str) -> Option<bool> {
    let mut yes = false;
    let mut no = false;
    for t in tokenize(reply) {
        match t.text.as_str() {
            "yes" => yes = true,
            "no" => no = true,
            _ => {}
        }
    }
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Build up to `per_image / 2` positive and as many negative questions for
/// every image. Images with fewer ground-truth objects get fewer pairs.
pub fn build_questions(
    images: &[PopeImage],
    vocab: &Vocabulary,
    frequency: &FrequencyTable,
    cooc: Option<&CoOccurrenceTable>,
    sampling: NegativeSampling,
    per_image: usize,
    seed: u64,
) -> Result<Vec<PopeQuestion>, PopeError> {
    if per_image == 0 || !per_image.is_multiple_of(2) {
        return Err(PopeError::BadQuestionCount(per_image));
    }
    if sampling == NegativeSampling::Adversarial && cooc.is_none() {
        return Err(PopeError::MissingCooccurrence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranked = frequency.ranked();
    let mut out = Vec::new();
    for img in images {
        let gt = &img.ground_truth;
        let absent: Vec<ObjectLabel> = vocab.labels().iter().filter(|l| !gt.contains(*l)).cloned().collect();
        let n = (per_image / 2).min(gt.len()).min(absent.len());
        let mut positives: Vec<ObjectLabel> = gt.iter().cloned().collect();
        positives.shuffle(&mut rng);
        positives.truncate(n);
        let negatives: Vec<ObjectLabel> = match sampling {
            NegativeSampling::Random => {
                let mut pool = absent;
                pool.shuffle(&mut rng);
                pool.truncate(n);
                pool
            }
            NegativeSampling::Popular => {
                let mut pool: Vec<ObjectLabel> = ranked.iter().filter(|l| !gt.contains(*l)).cloned().collect();
                pool.extend(absent.into_iter().filter(|l| frequency.count(l) == 0));
                pool.truncate(n);
                pool
            }
            NegativeSampling::Adversarial => {
                let cooc = cooc.expect("checked above");
                let mut scored: Vec<(u64, ObjectLabel)> = absent
                    .into_iter()
                    .map(|l| (gt.iter().map(|g| cooc.count(g, &l)).sum(), l))
                    .collect();
                scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                scored.into_iter().take(n).map(|(_, l)| l).collect()
            }
        };
        for (object, expected_yes) in positives
            .into_iter()
            .map(|l| (l, true))
            .chain(negatives.into_iter().map(|l| (l, false)))
        {
            out.push(PopeQuestion {
                image_id: img.image_id.clone(),
                object,
                expected_yes,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub questions: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub yes_ratio: Option<f64>,
}

/// Metrics from `(expected_yes, answered_yes)` pairs.
pub fn pope_metrics(answers: &[(bool, bool)]) -> PopeMetrics {
    let count = |e: bool, a: bool| answers.iter().filter(|x| **x == (e, a)).count();
    let (tp, fp, tn, fne) = (count(true, true), count(false, true), count(false, false), count(true, false));
    let div = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    PopeMetrics {
        questions: answers.len(),
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fne,
        accuracy: div(tp + tn, answers.len()),
        precision: div(tp, tp + fp),
        recall: div(tp, tp + fne),
        f1: div(2 * tp, 2 * tp + fp + fne),
        yes_ratio: div(tp + fp, answers.len()),
    }
}

/// Ask `endpoint` every question. Unparseable replies and failed requests
/// count as "no".
pub fn ask_questions(
    images: &[PopeImage],
    questions: &[PopeQuestion],
    gateway: &Gateway,
    endpoint: &str,
    decoding: &Decoding,
    workers: usize,
) -> Result<Vec<bool>, PopeError> {
    let by_id: BTreeMap<&str, &ImageSource> = images.iter().map(|i| (i.image_id.as_str(), &i.image)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PopeError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        questions
            .par_iter()
            .map(|q| {
                let image = by_id[q.image_id.as_str()].clone();
                let turn = ChatTurn::user_with_image(question_text(&q.object), image);
                match gateway.chat_complete(endpoint, &[turn], decoding) {
                    Ok(reply) => normalize_yes_no(&reply).unwrap_or_else(|| {
                        warn!(%endpoint, reply = %reply, "unparseable yes/no reply; counting as no");
                        false
                    }),
                    Err(e) => {
                        warn!(%endpoint, error = %e, "yes/no query failed; counting as no");
                        false
                    }
                }
            })
            .collect()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PopeConfig {
    pub sampling: NegativeSampling,
    pub questions_per_image: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PopeConfig {
    fn default() -> Self {
        Self {
            sampling: NegativeSampling::Random,
            questions_per_image: 6,
            seed: 0,
            workers: 4,
        }
    }
}

/// Build the question set, query the model and score the answers.
#[allow(clippy::too_many_arguments)]
pub fn pope_evaluate(
    images: &[PopeImage],
    vocab: &Vocabulary,
    frequency: &FrequencyTable,
    cooc: Option<&CoOccurrenceTable>,
    gateway: &Gateway,
    endpoint: &str,
    decoding: &Decoding,
    config: &PopeConfig,
) -> Result<PopeMetrics, PopeError> {
    let questions = build_questions(
        images,
        vocab,
        frequency,
        cooc,
        config.sampling,
        config.questions_per_image,
        config.seed,
    )?;
    let said = ask_questions(images, &questions, gateway, endpoint, decoding, config.workers)?;
    let answers: Vec<(bool, bool)> = questions.iter().zip(said).map(|(q, a)| (q.expected_yes, a)).collect();
    Ok(pope_metrics(&answers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{MockReply, MockTransport};
    use crate::gateway::{EndpointDescriptor, EndpointRole, GatewayMode};
    use std::sync::Arc;

    fn label(s: &str) -> ObjectLabel {
        ObjectLabel::new(s).unwrap()
    }

    fn fixture() -> (Vec<PopeImage>, Vocabulary, FrequencyTable, CoOccurrenceTable) {
        let vocab = Vocabulary::parse("dog\ncat\nperson\ncar\nchair\ncup\nbird\n").unwrap();
        let freq = FrequencyTable::from_counts([(label("person"), 9), (label("car"), 5), (label("cup"), 4), (label("dog"), 1)]);
        let cooc = CoOccurrenceTable::from_pairs([(label("dog"), label("cat"), 7), (label("dog"), label("bird"), 2)]);
        let images = vec![
            PopeImage {
                image_id: "1".into(),
                image: ImageSource::Url("http://img/1".into()),
                ground_truth: [label("dog"), label("person")].into(),
            },
            PopeImage {
                image_id: "2".into(),
                image: ImageSource::Url("http://img/2".into()),
                ground_truth: [label("car"), label("chair"), label("cup")].into(),
            },
        ];
        (images, vocab, freq, cooc)
    }

    #[test]
    fn questions_are_balanced_and_seeded() {
        let (images, vocab, freq, cooc) = fixture();
        for sampling in [NegativeSampling::Random, NegativeSampling::Popular, NegativeSampling::Adversarial] {
            let qs = build_questions(&images, &vocab, &freq, Some(&cooc), sampling, 4, 7).unwrap();
            let yes = qs.iter().filter(|q| q.expected_yes).count();
            assert_eq!(yes * 2, qs.len());
            for q in &qs {
                let img = images.iter().find(|i| i.image_id == q.image_id).unwrap();
                assert_eq!(img.ground_truth.contains(&q.object), q.expected_yes);
            }
            let again = build_questions(&images, &vocab, &freq, Some(&cooc), sampling, 4, 7).unwrap();
            assert_eq!(qs, again);
        }
        let popular = build_questions(&images, &vocab, &freq, None, NegativeSampling::Popular, 4, 0).unwrap();
        let negs: Vec<_> = popular.iter().filter(|q| q.image_id == "1" && !q.expected_yes).map(|q| q.object.to_string()).collect();
        assert_eq!(negs, ["car", "cup"]);
        let adv = build_questions(&images, &vocab, &freq, Some(&cooc), NegativeSampling::Adversarial, 4, 0).unwrap();
        let negs: Vec<_> = adv.iter().filter(|q| q.image_id == "1" && !q.expected_yes).map(|q| q.object.to_string()).collect();
        assert_eq!(negs, ["cat", "bird"]);
        assert!(build_questions(&images, &vocab, &freq, None, NegativeSampling::Adversarial, 4, 0).is_err());
        assert!(build_questions(&images, &vocab, &freq, None, NegativeSampling::Random, 3, 0).is_err());
    }

    #[test]
    fn yes_no_normalization() {
        assert_eq!(normalize_yes_no("Yes, there is."), Some(true));
        assert_eq!(normalize_yes_no("No."), Some(false));
        assert_eq!(normalize_yes_no("yes and no"), None);
        assert_eq!(normalize_yes_no("I cannot tell"), None);
    }

    #[test]
    fn always_yes_and_oracle_mocks() {
        let (images, vocab, freq, _) = fixture();
        let d = EndpointDescriptor::new("vlm", "http://mock", EndpointRole::Captioner);
        let mock = Arc::new(MockTransport::new(|_| MockReply::text("Yes")));
        let gw = Gateway::new(mock, [d.clone()], GatewayMode::Live, None).unwrap();
        let m = pope_evaluate(&images, &vocab, &freq, None, &gw, "vlm", &Decoding::default(), &PopeConfig::default()).unwrap();
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(2.0 / 3.0));

        let truth = images.clone();
        let mock = Arc::new(MockTransport::new(move |req| {
            let url = req.image_url().unwrap();
            let img = truth.iter().find(|i| matches!(&i.image, ImageSource::Url(u) if u == url)).unwrap();
            let q = req.last_user_text().unwrap();
            let hit = img.ground_truth.iter().any(|l| q == question_text(l));
            MockReply::text(if hit { "Yes" } else { "No" })
        }));
        let gw = Gateway::new(mock, [d], GatewayMode::Live, None).unwrap();
        let m = pope_evaluate(&images, &vocab, &freq, None, &gw, "vlm", &Decoding::default(), &PopeConfig::default()).unwrap();
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.accuracy, Some(1.0));
    }
}
