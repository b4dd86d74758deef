//! Run configuration file and the resources it points at.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{load_dataset, load_ingested, DatasetInstance, IngestedCaption, InstructionSet};
use super::PipelineError;
use crate::engine::pope::NegativeSampling;
use crate::extraction::ExtractionPrompt;
use crate::gateway::{Decoding, EndpointDescriptor, EndpointRole, GatewayMode};
use crate::lexicon::{CoOccurrenceTable, FrequencyTable, Vocabulary};
use crate::similarity::EmbeddingStore;

fn default_k() -> usize {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_failure_fraction() -> f64 {
    0.1
}
fn default_instruction_ids() -> Vec<u32> {
    vec![1]
}
fn default_sweep() -> Vec<usize> {
    (1..=10).collect()
}
fn default_top_m() -> usize {
    3
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_base_delay() -> u64 {
    500
}
fn default_max_delay() -> u64 {
    30_000
}
fn default_questions() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoreConfig {
    File { name: String, path: PathBuf },
    Endpoint { name: String, endpoint: String, dimension: usize },
}

impl StoreConfig {
    pub fn name(&self) -> &str {
        match self {
            Self::File { name, .. } | Self::Endpoint { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_base_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_max_delay")]
    pub max_delay_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            base_delay_ms: default_base_delay(),
            max_delay_ms: default_max_delay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopeSection {
    /// Endpoint answering the yes/no questions.
    pub model: String,
    #[serde(default)]
    pub sampling: NegativeSampling,
    #[serde(default = "default_questions")]
    pub questions_per_image: usize,
}

/// Contents of a run configuration file. Relative paths are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub vocabulary: PathBuf,
    pub frequency: PathBuf,
    #[serde(default)]
    pub cooccurrence: Option<PathBuf>,
    /// Defaults to the bundled instruction set.
    #[serde(default)]
    pub instructions: Option<PathBuf>,
    #[serde(default = "default_instruction_ids")]
    pub instruction_ids: Vec<u32>,
    #[serde(default)]
    pub extraction_prompt: Option<PathBuf>,
    /// Score these captions instead of generating new ones.
    #[serde(default)]
    pub captions: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub mode: GatewayMode,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    #[serde(default = "default_sweep")]
    pub sweep_k: Vec<usize>,
    #[serde(default = "default_top_m")]
    pub exclude_top_m: usize,
    #[serde(default)]
    pub captioners: Vec<String>,
    #[serde(default)]
    pub extractor: Option<String>,
    #[serde(default)]
    pub oracle_panel: Vec<String>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub pope: Option<PopeSection>,
    pub embeddings: Vec<StoreConfig>,
    #[serde(default)]
    pub endpoints: Vec<EndpointDescriptor>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset);
        join(&mut self.vocabulary);
        join(&mut self.frequency);
        join(&mut self.cache_dir);
        join(&mut self.out_dir);
        for p in [
            &mut self.cooccurrence,
            &mut self.instructions,
            &mut self.extraction_prompt,
            &mut self.captions,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        for s in &mut self.embeddings {
            if let StoreConfig::File { path, .. } = s {
                join(path);
            }
        }
    }

    /// Hash of the configuration as parsed (after path resolution).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    fn endpoint(&self, name: &str, role: EndpointRole, what: &str) -> Result<(), PipelineError> {
        match self.endpoints.iter().find(|d| d.name == name) {
            None => Err(PipelineError::Config(format!("{what} {name:?} has no [[endpoints]] entry"))),
            Some(d) if d.role != role => Err(PipelineError::Config(format!(
                "{what} {name:?} is declared with role {:?}",
                d.role
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]".into());
        }
        if self.embeddings.is_empty() {
            return bad("at least one [[embeddings]] store is required".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.embeddings {
            if !names.insert(s.name()) {
                return bad(format!("duplicate embedding store name {:?}", s.name()));
            }
            if let StoreConfig::Endpoint { endpoint, dimension, .. } = s {
                if *dimension == 0 {
                    return bad(format!("store {:?} needs a positive dimension", s.name()));
                }
                self.endpoint(endpoint, EndpointRole::Embedder, "embedding endpoint")?;
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.endpoints {
            d.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            if !seen.insert(&d.name) {
                return bad(format!("duplicate endpoint name {:?}", d.name));
            }
        }
        if self.captions.is_none() {
            if self.captioners.is_empty() {
                return bad("either `captions` or at least one captioner is required".into());
            }
            if self.instruction_ids.is_empty() {
                return bad("instruction_ids must not be empty".into());
            }
        }
        for c in &self.captioners {
            self.endpoint(c, EndpointRole::Captioner, "captioner")?;
        }
        if let Some(e) = &self.extractor {
            self.endpoint(e, EndpointRole::Extractor, "extractor")?;
        }
        for m in &self.oracle_panel {
            self.endpoint(m, EndpointRole::OracleMember, "oracle member")?;
        }
        if self.extractor.is_some() && self.oracle_panel.is_empty() {
            return bad("an extractor needs a non-empty oracle_panel".into());
        }
        if let Some(p) = &self.pope {
            self.endpoint(&p.model, EndpointRole::Captioner, "pope model")?;
        }
        Ok(())
    }
}

/// Everything a run reads from disk, loaded up front so that configuration
/// problems surface before any side effect.
pub struct Resources {
    pub vocab: Vocabulary,
    pub frequency: FrequencyTable,
    pub cooccurrence: Option<CoOccurrenceTable>,
    pub instructions: InstructionSet,
    pub prompt: ExtractionPrompt,
    pub dataset: Vec<DatasetInstance>,
    pub dataset_hash: String,
    pub ingested: Option<Vec<IngestedCaption>>,
    /// File-backed stores; endpoint stores are built once the gateway exists.
    pub file_stores: Vec<EmbeddingStore>,
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let cfg_err = |what: &str, e: &dyn std::fmt::Display| PipelineError::Config(format!("{what}: {e}"));
        let vocab = Vocabulary::load(&cfg.vocabulary).map_err(|e| cfg_err("vocabulary", &e))?;
        let frequency = FrequencyTable::load(&cfg.frequency, &vocab).map_err(|e| cfg_err("frequency table", &e))?;
        frequency.top_k(cfg.k).map_err(|e| cfg_err("k", &e))?;
        let cooccurrence = cfg
            .cooccurrence
            .as_deref()
            .map(|p| CoOccurrenceTable::load(p, &vocab))
            .transpose()
            .map_err(|e| cfg_err("co-occurrence table", &e))?;
        let instructions = match &cfg.instructions {
            Some(p) => InstructionSet::load(p)?,
            None => InstructionSet::default(),
        };
        if cfg.captions.is_none() {
            for id in &cfg.instruction_ids {
                instructions.get(*id)?;
            }
        }
        let prompt = match &cfg.extraction_prompt {
            Some(p) => ExtractionPrompt::load(p).map_err(|e| cfg_err("extraction prompt", &e))?,
            None => ExtractionPrompt::default(),
        };
        let (dataset, dataset_hash) = load_dataset(&cfg.dataset, &vocab)?;
        let ingested = cfg.captions.as_deref().map(load_ingested).transpose()?;
        if let Some(caps) = &ingested {
            let ids: BTreeSet<&str> = dataset.iter().map(|d| d.image_id.as_str()).collect();
            if let Some(c) = caps.iter().find(|c| !ids.contains(c.image_id.as_str())) {
                return Err(PipelineError::Config(format!(
                    "ingested caption refers to unknown image {:?}",
                    c.image_id
                )));
            }
        }
        let mut file_stores = Vec::new();
        for s in &cfg.embeddings {
            if let StoreConfig::File { name, path } = s {
                file_stores.push(EmbeddingStore::load_text(name, path).map_err(|e| cfg_err("embedding store", &e))?);
            }
        }
        Ok(Self {
            vocab,
            frequency,
            cooccurrence,
            instructions,
            prompt,
            dataset,
            dataset_hash,
            ingested,
            file_stores,
        })
    }
}
