//! Presence oracle for out-of-domain objects.
//!
//! Each panel member is asked a fixed yes/no style question about the image.
//! The decision is a strict majority of the votes; ties resolve to absent.
//! Votes are cached per member so warm reruns never touch the network.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::gateway::{ChatTurn, Decoding, Gateway, ImageSource};
use crate::jsonl::AppendLog;
use crate::lexicon::{tokenize, ObjectMention};
use crate::similarity::ObjectLabel;

/// `{object}` is replaced by the object label.
pub const PRESENCE_TEMPLATE: &str =
    "Does the image contain {object}? Please respond with only Present or Absent.";
pub const TEMPLATE_VERSION: &str = "oracle-v1";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no votes to decide on")]
    NoVotes,
    #[error("out-of-domain object {0:?} needs an oracle panel but none is configured")]
    EmptyPanel(String),
    #[error("verdict cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Present,
    Absent,
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vote::Present => "present",
            Vote::Absent => "absent",
        })
    }
}

pub fn presence_question(object: &ObjectLabel) -> String {
    PRESENCE_TEMPLATE.replace("{object}", object.as_str())
}

/// Exactly one of the tokens "present"/"absent" decides the vote; anything
/// else is unparseable and counts as absent.
pub fn normalize_reply(reply: &str) -> Option<Vote> {
    let mut present = false;
    let mut absent = false;
    for t in tokenize(reply) {
        match t.text.as_str() {
            "present" => present = true,
            "absent" => absent = true,
            _ => {}
        }
    }
    match (present, absent) {
        (true, false) => Some(Vote::Present),
        (false, true) => Some(Vote::Absent),
        _ => None,
    }
}

/// Ask one panel member. Never fails: unparseable replies and gateway
/// errors are logged and count as absent.
pub fn query_presence(
    gateway: &Gateway,
    member: &str,
    image: &ImageSource,
    object: &ObjectLabel,
    decoding: &Decoding,
) -> Vote {
    let turn = ChatTurn::user_with_image(presence_question(object), image.clone());
    match gateway.chat_complete(member, &[turn], decoding) {
        Ok(reply) => normalize_reply(&reply).unwrap_or_else(|| {
            warn!(%member, %object, reply = %reply, "unparseable oracle reply; counting as absent");
            Vote::Absent
        }),
        Err(e) => {
            warn!(%member, %object, error = %e, "oracle query failed; counting as absent");
            Vote::Absent
        }
    }
}

/// Strict majority of present votes; ties go to absent.
pub fn ensemble_verdict(votes: &[Vote]) -> Result<Vote, OracleError> {
    if votes.is_empty() {
        return Err(OracleError::NoVotes);
    }
    let present = votes.iter().filter(|v| **v == Vote::Present).count();
    Ok(if 2 * present > votes.len() {
        Vote::Present
    } else {
        Vote::Absent
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceVerdict {
    pub object: ObjectLabel,
    pub image_id: String,
    pub per_member_votes: Vec<(String, Vote)>,
    pub decision: Vote,
    /// True when every vote came from the cache.
    pub cached: bool,
}

pub fn verdict_key(image_id: &str, object: &ObjectLabel, member: &str, template_version: &str) -> String {
    let mut h = Sha256::new();
    for part in [image_id, object.as_str(), member, template_version] {
        h.update(part.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VoteRecord {
    key: String,
    image_id: String,
    object: String,
    member: String,
    template_version: String,
    vote: Vote,
    timestamp: String,
}

/// Append-only cache of member votes.
pub struct VerdictCache {
    log: Option<AppendLog>,
    votes: RwLock<HashMap<String, Vote>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl VerdictCache {
    pub fn in_memory() -> Self {
        Self {
            log: None,
            votes: RwLock::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn open(path: &Path) -> Result<Self, OracleError> {
        let (log, records) = AppendLog::open::<VoteRecord>(path).map_err(|source| OracleError::Cache {
            path: path.to_path_buf(),
            source,
        })?;
        let votes = records.into_iter().map(|r| (r.key, r.vote)).collect();
        Ok(Self {
            log: Some(log),
            votes: RwLock::new(votes),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    fn get(&self, key: &str) -> Option<Vote> {
        let found = self.votes.read().expect("verdict cache poisoned").get(key).copied();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    fn put(&self, image_id: &str, object: &ObjectLabel, member: &str, vote: Vote) -> Result<(), OracleError> {
        let key = verdict_key(image_id, object, member, TEMPLATE_VERSION);
        let mut votes = self.votes.write().expect("verdict cache poisoned");
        if votes.contains_key(&key) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            let rec = VoteRecord {
                key: key.clone(),
                image_id: image_id.to_string(),
                object: object.to_string(),
                member: member.to_string(),
                template_version: TEMPLATE_VERSION.to_string(),
                vote,
                timestamp: chrono::Utc::now().to_rfc3339(),
            };
            log.append(&rec).map_err(|source| OracleError::Cache {
                path: log.path().to_path_buf(),
                source,
            })?;
        }
        votes.insert(key, vote);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.votes.read().expect("verdict cache poisoned").len()
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

/// Oracle configuration shared across captions.
pub struct OraclePanel<'a> {
    pub gateway: &'a Gateway,
    pub members: &'a [String],
    pub cache: &'a VerdictCache,
    pub decoding: Decoding,
}

impl OraclePanel<'_> {
    /// Votes of every member, cache first; uncached members are queried
    /// concurrently.
    pub fn verdict(
        &self,
        image_id: &str,
        image: &ImageSource,
        object: &ObjectLabel,
    ) -> Result<PresenceVerdict, OracleError> {
        if self.members.is_empty() {
            return Err(OracleError::EmptyPanel(object.to_string()));
        }
        let cached: Vec<Option<Vote>> = self
            .members
            .iter()
            .map(|m| self.cache.get(&verdict_key(image_id, object, m, TEMPLATE_VERSION)))
            .collect();
        let fresh: Vec<Option<Vote>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .members
                .iter()
                .zip(&cached)
                .map(|(m, c)| {
                    c.is_none().then(|| {
                        s.spawn(move || query_presence(self.gateway, m, image, object, &self.decoding))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.map(|h| h.join().expect("oracle worker panicked")))
                .collect()
        });
        let mut per_member_votes = Vec::with_capacity(self.members.len());
        for ((m, c), f) in self.members.iter().zip(&cached).zip(fresh) {
            let vote = match (c, f) {
                (Some(v), _) => *v,
                (None, Some(v)) => {
                    self.cache.put(image_id, object, m, v)?;
                    v
                }
                (None, None) => unreachable!("uncached member was not queried"),
            };
            per_member_votes.push((m.clone(), vote));
        }
        let votes: Vec<Vote> = per_member_votes.iter().map(|(_, v)| *v).collect();
        Ok(PresenceVerdict {
            object: object.clone(),
            image_id: image_id.to_string(),
            decision: ensemble_verdict(&votes)?,
            per_member_votes,
            cached: cached.iter().all(Option::is_some),
        })
    }
}

/// Genuine (`true`) or hallucinated (`false`) for each mention.
///
/// In-domain mentions are checked against the ground truth and never reach
/// the oracle. `panel` may be `None` when no out-of-domain mention exists.
pub fn label_mentions(
    mentions: &[ObjectMention],
    ground_truth: &BTreeSet<ObjectLabel>,
    panel: Option<&OraclePanel<'_>>,
    image_id: &str,
    image: &ImageSource,
) -> Result<Vec<bool>, OracleError> {
    mentions
        .iter()
        .map(|m| {
            if m.in_domain {
                return Ok(ground_truth.contains(&m.label));
            }
            let panel = panel.ok_or_else(|| OracleError::EmptyPanel(m.label.to_string()))?;
            Ok(panel.verdict(image_id, image, &m.label)?.decision == Vote::Present)
        })
        .collect()
}
