//! Shared harness: a scripted world behind the mock transport and run
//! configuration writers.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use caos::gateway::mock::{MockReply, MockRequest, MockTransport};
use caos::gateway::GatewayMode;
use caos::pipeline::{RunConfig, RunOutcome, Session};
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

pub const MEMBERS: [&str; 4] = ["o1", "o2", "o3", "o4"];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

#[derive(Debug, Clone, Deserialize)]
pub struct World {
    /// image URL -> caption
    pub captions: BTreeMap<String, String>,
    /// caption -> extractor reply
    pub extractions: BTreeMap<String, String>,
    /// image URL -> object -> one reply per panel member
    pub votes: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl World {
    pub fn load() -> Self {
        let text = std::fs::read_to_string(fixture("mock_world.json")).unwrap();
        serde_json::from_str(&text).unwrap()
    }
}

/// Deterministic 5-dim integer vector for a text, never all zero.
pub fn fake_embedding(text: &str) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    let mut v: Vec<f64> = digest[..5].iter().map(|b| (b % 7) as f64 - 3.0).collect();
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}

fn oracle_object(question: &str) -> Option<&str> {
    question.strip_prefix("Does the image contain ")?.split_once('?').map(|(o, _)| o)
}

/// Answer every endpoint of the fixture world. Captioner requests for
/// images in `down` fail with a non-retriable status.
pub fn responder(world: World, down: BTreeSet<String>) -> impl Fn(&MockRequest) -> MockReply + Send + Sync + 'static {
    move |req: &MockRequest| match req.endpoint.as_str() {
        "vlm" => {
            let url = req.image_url().unwrap_or_default();
            if down.contains(url) {
                return MockReply::status(400);
            }
            let text = req.last_user_text().unwrap_or_default();
            if text.starts_with("Is there a ") {
                return MockReply::text("Yes");
            }
            match world.captions.get(url) {
                Some(c) => MockReply::text(format!("  {c}\n")),
                None => MockReply::status(404),
            }
        }
        "extractor" => {
            let text = req.last_user_text().unwrap_or_default();
            let caption = text.strip_prefix("Caption: ").unwrap_or(text);
            MockReply::text(world.extractions.get(caption).cloned().unwrap_or_else(|| "none".into()))
        }
        "embedder" => {
            let data: Vec<_> = req.inputs().iter().map(|t| json!({ "embedding": fake_embedding(t) })).collect();
            MockReply::Json(json!({ "data": data }))
        }
        member => {
            let idx = MEMBERS.iter().position(|m| *m == member).expect("unknown endpoint");
            let url = req.image_url().unwrap_or_default();
            let object = oracle_object(req.last_user_text().unwrap_or_default()).unwrap_or_default();
            let reply = world
                .votes
                .get(url)
                .and_then(|v| v.get(object))
                .map(|vs| vs[idx].clone())
                .unwrap_or_else(|| "Absent".into());
            MockReply::text(reply)
        }
    }
}

pub fn world_transport() -> Arc<MockTransport> {
    Arc::new(MockTransport::new(responder(World::load(), BTreeSet::new())))
}

/// Configuration of the 10-image fixture run with the cache and output
/// directories under `dir`.
pub fn world_config(dir: &Path, mode: GatewayMode) -> String {
    let f = fixtures();
    format!(
        r#"
dataset = "{f}/dataset.jsonl"
vocabulary = "{f}/vocab.txt"
frequency = "{f}/frequency.tsv"
cooccurrence = "{f}/cooccurrence.tsv"
captioners = ["vlm"]
extractor = "extractor"
oracle_panel = ["o1", "o2", "o3", "o4"]
k = 3
seed = 7
concurrency = 4
mode = "{mode}"
cache_dir = "{d}/cache"
out_dir = "{d}/out"

[retry]
base_delay_ms = 1
max_delay_ms = 2

[pope]
model = "vlm"

[[embeddings]]
kind = "file"
name = "toy"
path = "{f}/embeddings.txt"

[[embeddings]]
kind = "endpoint"
name = "remote"
endpoint = "embedder"
dimension = 5

[[endpoints]]
name = "vlm"
base_url = "http://mock/v1"
role = "captioner"

[[endpoints]]
name = "extractor"
base_url = "http://mock/v1"
role = "extractor"

[[endpoints]]
name = "embedder"
base_url = "http://mock/v1"
role = "embedder"
{members}"#,
        f = f.display(),
        d = dir.display(),
        members = MEMBERS
            .iter()
            .map(|m| format!("\n[[endpoints]]\nname = \"{m}\"\nbase_url = \"http://mock/v1\"\nrole = \"oracle-member\"\n"))
            .collect::<String>(),
    )
}

pub fn parse_config(text: &str) -> RunConfig {
    RunConfig::parse(text, Path::new("/")).unwrap()
}

pub fn run_world(dir: &Path, mode: GatewayMode, transport: Arc<MockTransport>) -> RunOutcome {
    let session = Session::open(parse_config(&world_config(dir, mode)), transport).unwrap();
    session.run().unwrap()
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
