//! In-domain vocabulary, the rule-based object parser and training-set
//! statistics (object frequencies and pairwise co-occurrence counts).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::ObjectLabel;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("surface form {surface:?} maps to both {first:?} and {second:?}")]
    DuplicateSynonym {
        surface: String,
        first: String,
        second: String,
    },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("label {0:?} is not in the vocabulary")]
    UnknownLabel(String),
    #[error("k = {k} is out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("{0:?} never co-occurs with another label")]
    NoCooccurrence(String),
}

fn read(path: &Path) -> Result<String, LexiconError> {
    std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A lowercase word token with its character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Character (not byte) offsets, end exclusive.
    pub start: usize,
    pub end: usize,
}

/// Split text into maximal alphanumeric runs, lowercased.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let mut idx = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            match current.as_mut() {
                Some((_, s)) => s.extend(ch.to_lowercase()),
                None => current = Some((idx, ch.to_lowercase().collect())),
            }
        } else if let Some((start, s)) = current.take() {
            tokens.push(Token {
                text: s,
                start,
                end: idx,
            });
        }
        idx += 1;
    }
    if let Some((start, s)) = current {
        tokens.push(Token {
            text: s,
            start,
            end: idx,
        });
    }
    tokens
}

/// Possible singular forms of a word under the plural suffix rules
/// (`-ies` → `-y`, `-es` → ``, `-s` → ``), the word itself first.
/// Stems shorter than three characters are not produced.
pub fn lemma_candidates(word: &str) -> Vec<String> {
    let mut out = vec![word.to_string()];
    let mut push = |s: String| {
        if s.chars().count() >= 3 && !out.contains(&s) {
            out.push(s);
        }
    };
    if let Some(stem) = word.strip_suffix("ies") {
        push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        push(stem.to_string());
    }
    if let Some(stem) = word.strip_suffix('s') {
        if !stem.ends_with('s') {
            push(stem.to_string());
        }
    }
    out
}

/// Whether two words are equal up to plural suffix rules.
pub fn lemma_match(a: &str, b: &str) -> bool {
    let ca = lemma_candidates(a);
    lemma_candidates(b).iter().any(|x| ca.contains(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionSource {
    Rule,
    Llm,
}

/// An object found in a caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMention {
    pub label: ObjectLabel,
    /// Caption text covered by the mention, original casing.
    pub surface: String,
    /// Character offset of `surface` in the caption.
    pub char_offset: usize,
    pub source: MentionSource,
    pub in_domain: bool,
}

impl fmt::Display for ObjectMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.label, self.char_offset)
    }
}

/// Substring of `text` between character offsets.
pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

/// Known object classes (the set G) and the surface forms that name them.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    canonical: BTreeSet<ObjectLabel>,
    synonyms: BTreeMap<String, ObjectLabel>,
    /// first token → (surface tokens, canonical)
    phrases: HashMap<String, Vec<(Vec<String>, ObjectLabel)>>,
}

impl Vocabulary {
    /// Parse `canonical: syn1, syn2, ...` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut vocab = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: &str| LexiconError::Syntax {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let (head, tail) = line.split_once(':').unwrap_or((line, ""));
            let canonical = ObjectLabel::new(head).map_err(|_| syntax("empty canonical label"))?;
            vocab.insert(&canonical, canonical.as_str())?;
            for syn in tail.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                vocab.insert(&canonical, syn)?;
            }
        }
        if vocab.canonical.is_empty() {
            return Err(LexiconError::EmptyVocabulary);
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&read(path)?)
    }

    fn insert(&mut self, canonical: &ObjectLabel, surface: &str) -> Result<(), LexiconError> {
        let tokens: Vec<String> = tokenize(surface).into_iter().map(|t| t.text).collect();
        if tokens.is_empty() {
            return Ok(());
        }
        let key = tokens.join(" ");
        if let Some(existing) = self.synonyms.get(&key) {
            if existing != canonical {
                return Err(LexiconError::DuplicateSynonym {
                    surface: key,
                    first: existing.to_string(),
                    second: canonical.to_string(),
                });
            }
            return Ok(());
        }
        self.canonical.insert(canonical.clone());
        self.synonyms.insert(key, canonical.clone());
        self.phrases
            .entry(tokens[0].clone())
            .or_default()
            .push((tokens, canonical.clone()));
        Ok(())
    }

    pub fn labels(&self) -> &BTreeSet<ObjectLabel> {
        &self.canonical
    }

    pub fn synonyms(&self) -> &BTreeMap<String, ObjectLabel> {
        &self.synonyms
    }

    pub fn contains(&self, label: &ObjectLabel) -> bool {
        self.canonical.contains(label)
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    /// Longest vocabulary phrase starting at token `i`: (token count,
    /// canonical). Among equally long phrases the one with the most exact
    /// (non-lemmatized) token matches wins, then the smaller canonical label.
    fn match_at(&self, tokens: &[Token], i: usize) -> Option<(usize, &ObjectLabel)> {
        let mut best: Option<(usize, usize, &ObjectLabel)> = None;
        for first in lemma_candidates(&tokens[i].text) {
            let Some(entries) = self.phrases.get(&first) else {
                continue;
            };
            for (phrase, canonical) in entries {
                let n = phrase.len();
                if i + n > tokens.len() {
                    continue;
                }
                let mut exact = 0;
                let matched = phrase.iter().zip(&tokens[i..i + n]).all(|(p, t)| {
                    if *p == t.text {
                        exact += 1;
                        true
                    } else {
                        lemma_candidates(&t.text).contains(p)
                    }
                });
                if !matched {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bn, be, bc)) => {
                        (n, exact) > (bn, be) || ((n, exact) == (bn, be) && canonical < bc)
                    }
                };
                if better {
                    best = Some((n, exact, canonical));
                }
            }
        }
        best.map(|(n, _, c)| (n, c))
    }

    /// Canonical label for a whole phrase, if the phrase is exactly one
    /// vocabulary surface form (up to case and plural suffixes).
    pub fn canonicalize(&self, phrase: &str) -> Option<ObjectLabel> {
        let tokens = tokenize(phrase);
        if tokens.is_empty() {
            return None;
        }
        match self.match_at(&tokens, 0) {
            Some((n, c)) if n == tokens.len() => Some(c.clone()),
            _ => None,
        }
    }

    /// Rule-based parse of `caption`: every vocabulary surface form found,
    /// longest match first, in caption order, keeping only the first mention
    /// of each canonical label.
    pub fn parse_in_domain_objects(&self, caption: &str) -> Vec<ObjectMention> {
        let tokens = tokenize(caption);
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.match_at(&tokens, i) {
                Some((n, canonical)) => {
                    if seen.insert(canonical.clone()) {
                        let (start, end) = (tokens[i].start, tokens[i + n - 1].end);
                        out.push(ObjectMention {
                            label: canonical.clone(),
                            surface: char_slice(caption, start, end),
                            char_offset: start,
                            source: MentionSource::Rule,
                            in_domain: true,
                        });
                    }
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Object frequencies over the training annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<ObjectLabel, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn from_counts<I>(counts: I) -> Self
    where
        I: IntoIterator<Item = (ObjectLabel, u64)>,
    {
        let mut table = Self::default();
        for (label, n) in counts {
            *table.counts.entry(label).or_default() += n;
            table.total += n;
        }
        table
    }

    /// Parse `label<TAB>count` lines. Labels are normalized through the
    /// vocabulary's synonyms and must belong to it.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, LexiconError> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let syntax = |reason: String| LexiconError::Syntax {
                line: idx + 1,
                reason,
            };
            let (label, count) = line
                .split_once('\t')
                .ok_or_else(|| syntax("expected label<TAB>count".into()))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| syntax(format!("bad count {count:?}")))?;
            let label = vocab
                .canonicalize(label)
                .ok_or_else(|| LexiconError::UnknownLabel(label.trim().to_string()))?;
            rows.push((label, count));
        }
        Ok(Self::from_counts(rows))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, LexiconError> {
        Self::parse(&read(path)?, vocab)
    }

    pub fn count(&self, label: &ObjectLabel) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// All counted labels, most frequent first, ties in lexicographic order.
    pub fn ranked(&self) -> Vec<ObjectLabel> {
        let mut rows: Vec<_> = self.counts.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        rows.into_iter().map(|(l, _)| l.clone()).collect()
    }

    /// The `k` most frequent labels.
    pub fn top_k(&self, k: usize) -> Result<Vec<ObjectLabel>, LexiconError> {
        if k == 0 || k > self.counts.len() {
            return Err(LexiconError::KOutOfRange {
                k,
                max: self.counts.len(),
            });
        }
        let mut ranked = self.ranked();
        ranked.truncate(k);
        Ok(ranked)
    }
}

/// Unordered pair counts over training images.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoOccurrenceTable {
    pairs: BTreeMap<(ObjectLabel, ObjectLabel), u64>,
}

fn ordered(a: ObjectLabel, b: ObjectLabel) -> (ObjectLabel, ObjectLabel) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CoOccurrenceTable {
    /// Build from pair counts; repeated pairs (in either order) are summed
    /// and self-pairs ignored.
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (ObjectLabel, ObjectLabel, u64)>,
    {
        let mut table = Self::default();
        for (a, b, n) in pairs {
            if a != b {
                *table.pairs.entry(ordered(a, b)).or_default() += n;
            }
        }
        table
    }

    /// Parse `label_a<TAB>label_b<TAB>count` lines against the vocabulary.
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self, LexiconError> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let syntax = |reason: String| LexiconError::Syntax {
                line: idx + 1,
                reason,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(syntax("expected label_a<TAB>label_b<TAB>count".into()));
            }
            let label = |s: &str| {
                vocab
                    .canonicalize(s)
                    .ok_or_else(|| LexiconError::UnknownLabel(s.trim().to_string()))
            };
            let count: u64 = cols[2]
                .trim()
                .parse()
                .map_err(|_| syntax(format!("bad count {:?}", cols[2])))?;
            rows.push((label(cols[0])?, label(cols[1])?, count));
        }
        Ok(Self::from_pairs(rows))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self, LexiconError> {
        Self::parse(&read(path)?, vocab)
    }

    pub fn count(&self, a: &ObjectLabel, b: &ObjectLabel) -> u64 {
        self.pairs
            .get(&ordered(a.clone(), b.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The label that co-occurs most often with `label`; ties go to the
    /// lexicographically smaller partner.
    pub fn most_frequent_cooccurrer(&self, label: &ObjectLabel) -> Result<ObjectLabel, LexiconError> {
        self.pairs
            .iter()
            .filter_map(|((a, b), n)| {
                if a == label {
                    Some((b, *n))
                } else if b == label {
                    Some((a, *n))
                } else {
                    None
                }
            })
            .max_by(|x, y| x.1.cmp(&y.1).then_with(|| y.0.cmp(x.0)))
            .map(|(l, _)| l.clone())
            .ok_or_else(|| LexiconError::NoCooccurrence(label.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(s: &str) -> ObjectLabel {
        ObjectLabel::new(s).unwrap()
    }

    fn vocab(text: &str) -> Vocabulary {
        Vocabulary::parse(text).unwrap()
    }

    fn rendered(ms: &[ObjectMention]) -> Vec<String> {
        ms.iter().map(ToString::to_string).collect()
    }

    #[test]
    fn vocabulary_file_parse() {
        let v = vocab("# comment\nperson: man, woman, people\ndog\n");
        assert_eq!(v.synonyms()["man"], label("person"));
        assert_eq!(v.synonyms()["people"], label("person"));
        assert_eq!(v.synonyms()["person"], label("person"));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(
            Vocabulary::parse("   \n# nothing\n"),
            Err(LexiconError::EmptyVocabulary)
        ));
        match Vocabulary::parse("person: man\nmannequin: man\n") {
            Err(LexiconError::DuplicateSynonym { surface, .. }) => assert_eq!(surface, "man"),
            other => panic!("expected duplicate, got {other:?}"),
        }
        // same canonical twice is harmless
        assert!(Vocabulary::parse("person: man, man\n").is_ok());
        assert!(matches!(
            Vocabulary::load(Path::new("/definitely/not/here.txt")),
            Err(LexiconError::Io { .. })
        ));
    }

    #[test]
    fn lemma_rules() {
        assert!(lemma_candidates("dogs").contains(&"dog".to_string()));
        assert!(lemma_candidates("buses").contains(&"bus".to_string()));
        assert!(lemma_candidates("cherries").contains(&"cherry".to_string()));
        assert!(lemma_candidates("horses").contains(&"horse".to_string()));
        assert!(lemma_candidates("glasses").contains(&"glass".to_string()));
        assert_eq!(lemma_candidates("bus"), vec!["bus".to_string()]);
        assert_eq!(lemma_candidates("glass"), vec!["glass".to_string()]);
        assert!(lemma_match("mugs", "mug"));
        assert!(!lemma_match("cat", "category"));
    }

    #[test]
    fn parse_man_riding_horse() {
        let v = vocab("person: man\nhorse\n");
        let got = v.parse_in_domain_objects("A man riding a horse");
        assert_eq!(rendered(&got), ["person@2", "horse@15"]);
        assert_eq!(got[0].surface, "man");
        assert!(got.iter().all(|m| m.in_domain && m.source == MentionSource::Rule));
    }

    #[test]
    fn parse_empty_and_dedup() {
        let v = vocab("dog\n");
        assert!(v.parse_in_domain_objects("").is_empty());
        let got = v.parse_in_domain_objects("two dogs and a dog");
        assert_eq!(rendered(&got), ["dog@4"]);
        assert_eq!(got[0].surface, "dogs");
    }

    #[test]
    fn parse_longest_match_first() {
        let v = vocab("dining table: table\nhot dog\ndog\n");
        let got = v.parse_in_domain_objects("A hot dog on the dining table next to a dog");
        assert_eq!(rendered(&got), ["hot dog@2", "dining table@17", "dog@40"]);
        let got = v.parse_in_domain_objects("Dining tables and a table");
        assert_eq!(rendered(&got), ["dining table@0"]);
        assert_eq!(got[0].surface, "Dining tables");
    }

    #[test]
    fn parse_offsets_are_characters() {
        let v = vocab("cat\n");
        let got = v.parse_in_domain_objects("Ünïcödé café cat");
        assert_eq!(rendered(&got), ["cat@13"]);
    }

    #[test]
    fn canonicalize_whole_phrases() {
        let v = vocab("person: man\ndining table\n");
        assert_eq!(v.canonicalize("Men"), None);
        assert_eq!(v.canonicalize("Dining Tables"), Some(label("dining table")));
        assert_eq!(v.canonicalize("man"), Some(label("person")));
        assert_eq!(v.canonicalize("dining room"), None);
        assert_eq!(v.canonicalize("dining table lamp"), None);
    }

    #[test]
    fn top_k_ordering_and_ties() {
        let f = FrequencyTable::from_counts([(label("a"), 5), (label("b"), 3), (label("c"), 1)]);
        assert_eq!(f.top_k(2).unwrap(), [label("a"), label("b")]);
        assert_eq!(f.total(), 9);
        let single = FrequencyTable::from_counts([(label("x"), 2)]);
        assert_eq!(single.top_k(1).unwrap(), [label("x")]);
        let tie = FrequencyTable::from_counts([(label("b"), 5), (label("a"), 5)]);
        assert_eq!(tie.top_k(1).unwrap(), [label("a")]);
        assert!(matches!(f.top_k(0), Err(LexiconError::KOutOfRange { .. })));
        assert!(matches!(f.top_k(4), Err(LexiconError::KOutOfRange { k: 4, max: 3 })));
    }

    #[test]
    fn frequency_file_normalizes_synonyms() {
        let v = vocab("person: man\ndog\n");
        let f = FrequencyTable::parse("man\t4\nperson\t1\ndog\t2\n", &v).unwrap();
        assert_eq!(f.count(&label("person")), 5);
        assert!(matches!(
            FrequencyTable::parse("unicorn\t1\n", &v),
            Err(LexiconError::UnknownLabel(_))
        ));
        assert!(matches!(
            FrequencyTable::parse("dog 1\n", &v),
            Err(LexiconError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn cooccurrer_queries() {
        let t = CoOccurrenceTable::from_pairs([
            (label("dog"), label("person"), 9),
            (label("frisbee"), label("dog"), 4),
        ]);
        assert_eq!(t.most_frequent_cooccurrer(&label("dog")).unwrap(), label("person"));
        assert_eq!(t.count(&label("person"), &label("dog")), 9);
        assert!(matches!(
            t.most_frequent_cooccurrer(&label("cat")),
            Err(LexiconError::NoCooccurrence(_))
        ));
        let tie = CoOccurrenceTable::from_pairs([
            (label("dog"), label("person"), 5),
            (label("dog"), label("cat"), 5),
        ]);
        assert_eq!(tie.most_frequent_cooccurrer(&label("dog")).unwrap(), label("cat"));
    }

    #[test]
    fn cooccurrence_file() {
        let v = vocab("person: man\ndog\ncat\n");
        let t = CoOccurrenceTable::parse("man\tdog\t3\ndog\tperson\t2\ncat\tdog\t1\n", &v).unwrap();
        assert_eq!(t.count(&label("dog"), &label("person")), 5);
        assert_eq!(t.len(), 2);
        assert!(CoOccurrenceTable::parse("dog\tcat\n", &v).is_err());
    }

    const WORDS: &[&str] = &[
        "a", "the", "dog", "dogs", "man", "men", "dining", "table", "tables", "hot", "on", "bus",
        "buses", "cat", "near", "person", "people", "glass", "glasses", "and",
    ];

    proptest! {
        #[test]
        fn parse_invariants(idx in prop::collection::vec(0..WORDS.len(), 0..25)) {
            let caption = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
            let v = vocab("person: man, people\ndog\nhot dog\ndining table: table\nbus\ncat\nwine glass: glass\n");
            let got = v.parse_in_domain_objects(&caption);
            prop_assert!(got.windows(2).all(|w| w[0].char_offset < w[1].char_offset));
            let labels: BTreeSet<_> = got.iter().map(|m| m.label.clone()).collect();
            prop_assert_eq!(labels.len(), got.len());
            for m in &got {
                let end = m.char_offset + m.surface.chars().count();
                prop_assert_eq!(char_slice(&caption, m.char_offset, end).to_lowercase(), m.surface.to_lowercase());
                prop_assert!(v.contains(&m.label));
            }
            prop_assert_eq!(v.parse_in_domain_objects(&caption), got);
        }

        #[test]
        fn top_k_prefix(counts in prop::collection::vec(0u64..20, 2..15), k in 1usize..14) {
            let f = FrequencyTable::from_counts(
                counts.iter().enumerate().map(|(i, &n)| (label(&format!("l{i:02}")), n)),
            );
            prop_assume!(k < f.len());
            let a = f.top_k(k).unwrap();
            let b = f.top_k(k + 1).unwrap();
            prop_assert_eq!(&b[..k], &a[..]);
        }
    }
}
