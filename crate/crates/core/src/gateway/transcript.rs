//! Append-only store of request/reply pairs for offline replay.

use std::collections::HashMap;
use std::io;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::jsonl::AppendLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub endpoint: String,
    pub request_hash: String,
    pub request: Value,
    pub reply: String,
}

pub struct TranscriptStore {
    log: Option<AppendLog>,
    replies: RwLock<HashMap<(String, String), String>>,
}

impl TranscriptStore {
    pub fn in_memory() -> Self {
        Self {
            log: None,
            replies: RwLock::new(HashMap::new()),
        }
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let (log, entries) = AppendLog::open::<TranscriptEntry>(path)?;
        let replies = entries
            .into_iter()
            .map(|e| ((e.endpoint, e.request_hash), e.reply))
            .collect();
        Ok(Self {
            log: Some(log),
            replies: RwLock::new(replies),
        })
    }

    pub fn lookup(&self, endpoint: &str, request_hash: &str) -> Option<String> {
        self.replies
            .read()
            .expect("transcript lock poisoned")
            .get(&(endpoint.to_string(), request_hash.to_string()))
            .cloned()
    }

    pub fn append(&self, entry: TranscriptEntry) -> io::Result<()> {
        let mut replies = self.replies.write().expect("transcript lock poisoned");
        let key = (entry.endpoint.clone(), entry.request_hash.clone());
        if replies.contains_key(&key) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            log.append(&entry)?;
        }
        replies.insert(key, entry.reply);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.replies.read().expect("transcript lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
