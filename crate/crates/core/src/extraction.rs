//! LLM-augmented object identification.
//!
//! The rule parser only knows the in-domain vocabulary. An extraction LLM is
//! asked for every object in the caption, its answer is checked word by word
//! against the caption text, and the surviving out-of-domain objects are
//! merged with the rule-based mentions in caption order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::gateway::{ChatTurn, Decoding, Gateway, GatewayError};
use crate::lexicon::{char_slice, lemma_match, tokenize, MentionSource, ObjectMention, Vocabulary};
use crate::similarity::ObjectLabel;

const DEFAULT_PROMPT: &str = include_str!("../assets/extraction_prompt.toml");

/// Items longer than this many words are treated as prose, not a list.
const MAX_ITEM_WORDS: usize = 5;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("failed to read prompt {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid prompt file: {0}")]
    Prompt(String),
    #[error("LLM object {label:?} cannot be located in caption {caption:?}")]
    Unlocatable { label: String, caption: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotExample {
    pub caption: String,
    pub objects: Vec<String>,
}

/// Versioned few-shot prompt for the extraction LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub version: String,
    pub preamble: String,
    pub shots: Vec<ShotExample>,
}

impl Default for ExtractionPrompt {
    fn default() -> Self {
        Self::parse(DEFAULT_PROMPT).expect("bundled extraction prompt is valid")
    }
}

impl ExtractionPrompt {
    pub fn parse(text: &str) -> Result<Self, ExtractionError> {
        let prompt: Self = toml::from_str(text).map_err(|e| ExtractionError::Prompt(e.to_string()))?;
        if prompt.shots.is_empty() {
            return Err(ExtractionError::Prompt("at least one shot example is required".into()));
        }
        if prompt.version.trim().is_empty() {
            return Err(ExtractionError::Prompt("version tag must be non-empty".into()));
        }
        Ok(prompt)
    }

    pub fn load(path: &Path) -> Result<Self, ExtractionError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExtractionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// System preamble, one user/assistant pair per shot, then the query.
    pub fn turns(&self, caption: &str) -> Vec<ChatTurn> {
        let mut turns = vec![ChatTurn::system(&self.preamble)];
        for shot in &self.shots {
            turns.push(ChatTurn::user(format!("Caption: {}", shot.caption)));
            turns.push(ChatTurn::assistant(shot.objects.join(", ")));
        }
        turns.push(ChatTurn::user(format!("Caption: {caption}")));
        turns
    }
}

/// Parse a comma-separated object list. Returns `None` when the reply does
/// not look like such a list.
pub fn parse_object_list(reply: &str) -> Option<Vec<ObjectLabel>> {
    let mut text = reply.trim();
    if let Some((head, rest)) = text.split_once(':') {
        if head.trim().eq_ignore_ascii_case("objects") {
            text = rest.trim();
        }
    }
    let text = text.trim_end_matches('.').trim();
    if text.is_empty() || text.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for item in text.split([',', '\n', ';']) {
        let item = item
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .trim_end_matches('.')
            .trim();
        if item.is_empty() {
            continue;
        }
        let item = ["a ", "an ", "the "]
            .iter()
            .find_map(|a| {
                item.get(..a.len())
                    .filter(|p| p.eq_ignore_ascii_case(a))
                    .map(|_| &item[a.len()..])
            })
            .unwrap_or(item);
        let words = item.split_whitespace().count();
        let clean = item
            .chars()
            .all(|c| c.is_alphanumeric() || c.is_whitespace() || c == '-' || c == '\'');
        if words == 0 || words > MAX_ITEM_WORDS || !clean {
            return None;
        }
        out.push(ObjectLabel::new(item).ok()?);
    }
    Some(out)
}

/// Ask the extraction LLM for the objects in `caption`. The reply is parsed
/// but not yet checked against the caption; an unparseable reply yields an
/// empty list.
pub fn llm_extract_objects(
    caption: &str,
    gateway: &Gateway,
    endpoint: &str,
    prompt: &ExtractionPrompt,
    decoding: &Decoding,
) -> Result<Vec<ObjectLabel>, GatewayError> {
    let reply = gateway.chat_complete(endpoint, &prompt.turns(caption), decoding)?;
    Ok(parse_object_list(&reply).unwrap_or_else(|| {
        warn!(%endpoint, reply = %reply, "unparseable object list; treating as empty");
        Vec::new()
    }))
}

/// First `(start, end)` character span where every token of `label` occurs
/// consecutively in `caption`, up to case and plural suffixes.
fn locate(label: &ObjectLabel, caption: &str) -> Option<(usize, usize)> {
    let needle = tokenize(label.as_str());
    let hay = tokenize(caption);
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find_map(|i| {
        needle
            .iter()
            .zip(&hay[i..])
            .all(|(n, h)| lemma_match(&n.text, &h.text))
            .then(|| (hay[i].start, hay[i + needle.len() - 1].end))
    })
}

/// Keep candidates whose every token appears in the caption (token match up
/// to case and plural suffixes). Order is preserved and repeats dropped.
pub fn verbatim_filter(candidates: &[ObjectLabel], caption: &str) -> Vec<ObjectLabel> {
    let words: Vec<String> = tokenize(caption).into_iter().map(|t| t.text).collect();
    let mut seen = BTreeSet::new();
    candidates
        .iter()
        .filter(|c| {
            let toks = tokenize(c.as_str());
            !toks.is_empty()
                && toks
                    .iter()
                    .all(|t| words.iter().any(|w| lemma_match(&t.text, w)))
        })
        .filter(|c| seen.insert((*c).clone()))
        .cloned()
        .collect()
}

/// Combine rule mentions with LLM labels in caption order.
///
/// LLM labels naming a vocabulary object, repeating a rule mention, or whose
/// first occurrence lies inside a rule mention's span are dropped; the rest
/// become out-of-domain mentions at their first occurrence.
pub fn merge_ordered(
    l1: &[ObjectMention],
    l2: &[ObjectLabel],
    caption: &str,
    vocab: &Vocabulary,
) -> Result<Vec<ObjectMention>, ExtractionError> {
    let mut merged: Vec<ObjectMention> = l1.to_vec();
    let spans: Vec<(usize, usize)> = l1
        .iter()
        .map(|m| (m.char_offset, m.char_offset + m.surface.chars().count()))
        .collect();
    for label in l2 {
        if vocab.contains(label) || vocab.canonicalize(label.as_str()).is_some() {
            continue;
        }
        if merged.iter().any(|m| &m.label == label) {
            continue;
        }
        let (start, end) = locate(label, caption).ok_or_else(|| ExtractionError::Unlocatable {
            label: label.to_string(),
            caption: caption.to_string(),
        })?;
        if spans.iter().any(|&(s, e)| start >= s && start < e) {
            continue;
        }
        if merged.iter().any(|m| m.char_offset == start) {
            continue;
        }
        merged.push(ObjectMention {
            label: label.clone(),
            surface: char_slice(caption, start, end),
            char_offset: start,
            source: MentionSource::Llm,
            in_domain: false,
        });
    }
    merged.sort_by_key(|m| m.char_offset);
    Ok(merged)
}
