//! Run orchestration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::config::{Resources, RunConfig, StoreConfig};
use super::dataset::{cmp_ids, DatasetInstance, IngestedCaption};
use super::report::{build_report, FailureRecord, ReportFormat, RunManifest, RunReport, RunStatus};
use super::PipelineError;
use crate::engine::pope::{pope_evaluate, PopeConfig, PopeImage, PopeMetrics};
use crate::engine::{caos_for_caption, CaptionRecord};
use crate::extraction::{llm_extract_objects, merge_ordered, verbatim_filter};
use crate::gateway::{Gateway, GatewayMode, ImageSource, RetryPolicy, TranscriptStore, Transport};
use crate::jsonl::AppendLog;
use crate::oracle::{label_mentions, OraclePanel, VerdictCache, TEMPLATE_VERSION};
use crate::similarity::{EmbeddingCache, EmbeddingStore};

/// Resume key of a caption record.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkKey {
    pub model: String,
    pub image_id: String,
    pub instruction_id: String,
}

impl WorkKey {
    fn of(r: &CaptionRecord) -> Self {
        Self {
            model: r.model.clone(),
            image_id: r.image_id.clone(),
            instruction_id: r.instruction_id.clone(),
        }
    }
}

/// Deterministic ordering for reports: model, instruction, image.
pub(crate) fn record_order(a: &CaptionRecord, b: &CaptionRecord) -> std::cmp::Ordering {
    a.model
        .cmp(&b.model)
        .then_with(|| cmp_ids(&a.instruction_id, &b.instruction_id))
        .then_with(|| cmp_ids(&a.image_id, &b.image_id))
}

struct WorkItem {
    key: WorkKey,
    /// Set for ingested captions.
    caption: Option<String>,
    /// Set for generated captions.
    instruction: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn failed(&self) -> bool {
        self.report.status == RunStatus::Failed
    }
}

/// A configured run: loaded resources, gateway, stores and caches.
pub struct Session {
    pub config: RunConfig,
    pub resources: Resources,
    pub gateway: Arc<Gateway>,
    pub stores: Vec<EmbeddingStore>,
    verdicts: VerdictCache,
    embeddings: Arc<EmbeddingCache>,
    config_hash: String,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Session {
    /// Load and check everything the configuration references, then open
    /// the caches. Nothing is written before all inputs have loaded.
    pub fn open(config: RunConfig, transport: Arc<dyn Transport>) -> Result<Self, PipelineError> {
        let resources = Resources::load(&config)?;
        let cache_dir = &config.cache_dir;
        let transcripts = match config.mode {
            GatewayMode::Live => None,
            _ => {
                let path = cache_dir.join("transcripts.jsonl");
                if config.mode == GatewayMode::Replay && !path.exists() {
                    return Err(PipelineError::Config(format!(
                        "replay mode needs a transcript at {}",
                        path.display()
                    )));
                }
                Some(Arc::new(TranscriptStore::open(&path).map_err(io_err(&path))?))
            }
        };
        let retry = RetryPolicy {
            base_delay: Duration::from_millis(config.retry.base_delay_ms),
            max_delay: Duration::from_millis(config.retry.max_delay_ms),
        };
        let gateway = Arc::new(
            Gateway::new(transport, config.endpoints.clone(), config.mode, transcripts)
                .map_err(|e| PipelineError::Config(e.to_string()))?
                .with_retry_policy(retry),
        );
        let verdict_path = cache_dir.join("verdicts.jsonl");
        let verdicts = VerdictCache::open(&verdict_path).map_err(|e| PipelineError::Stage(e.to_string()))?;
        let embed_path = cache_dir.join("embeddings.jsonl");
        let embeddings = Arc::new(EmbeddingCache::open(&embed_path).map_err(|e| PipelineError::Stage(e.to_string()))?);

        let mut file_stores: BTreeMap<String, EmbeddingStore> = BTreeMap::new();
        let mut resources = resources;
        for s in std::mem::take(&mut resources.file_stores) {
            file_stores.insert(s.name().to_string(), s);
        }
        let mut stores = Vec::new();
        for s in &config.embeddings {
            match s {
                StoreConfig::File { name, .. } => stores.push(file_stores.remove(name).expect("loaded above")),
                StoreConfig::Endpoint { name, endpoint, dimension } => stores.push(EmbeddingStore::remote(
                    name,
                    *dimension,
                    gateway.clone(),
                    endpoint,
                    embeddings.clone(),
                )),
            }
        }
        let config_hash = config.hash();
        Ok(Self {
            config,
            resources,
            gateway,
            stores,
            verdicts,
            embeddings,
            config_hash,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn instance(&self, image_id: &str) -> &DatasetInstance {
        self.resources
            .dataset
            .iter()
            .find(|d| d.image_id == image_id)
            .expect("work items refer to dataset images")
    }

    fn work_items(&self) -> Vec<WorkItem> {
        let mut items = Vec::new();
        match &self.resources.ingested {
            Some(caps) => {
                for c in caps {
                    items.push(WorkItem {
                        key: WorkKey {
                            model: c.model.clone(),
                            image_id: c.image_id.clone(),
                            instruction_id: c.instruction_id.clone(),
                        },
                        caption: Some(c.caption.clone()),
                        instruction: None,
                    });
                }
            }
            None => {
                for model in &self.config.captioners {
                    for id in &self.config.instruction_ids {
                        let text = self.resources.instructions.get(*id).expect("validated").text.clone();
                        for inst in &self.resources.dataset {
                            items.push(WorkItem {
                                key: WorkKey {
                                    model: model.clone(),
                                    image_id: inst.image_id.clone(),
                                    instruction_id: id.to_string(),
                                },
                                caption: None,
                                instruction: Some(text.clone()),
                            });
                        }
                    }
                }
            }
        }
        items
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.concurrency)
            .build()
            .map_err(|e| PipelineError::Stage(e.to_string()))
    }

    fn caption_for(&self, item: &WorkItem, image: &ImageSource) -> Result<String, String> {
        match (&item.caption, &item.instruction) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(text)) => self
                .gateway
                .generate_caption(&item.key.model, image, text, &self.config.decoding)
                .map_err(|e| format!("caption generation: {e}")),
            (None, None) => unreachable!("work item without caption source"),
        }
    }

    fn process(&self, item: &WorkItem) -> Result<CaptionRecord, String> {
        let inst = self.instance(&item.key.image_id);
        let needs_image = item.caption.is_none() || self.config.extractor.is_some();
        let image = if needs_image {
            ImageSource::from_locator(&inst.image, None).map_err(|e| e.to_string())?
        } else {
            ImageSource::Url(inst.image.clone())
        };
        let caption = self.caption_for(item, &image)?;
        let vocab = &self.resources.vocab;
        let l1 = vocab.parse_in_domain_objects(&caption);
        let mentions = match &self.config.extractor {
            Some(endpoint) => {
                let raw = llm_extract_objects(&caption, &self.gateway, endpoint, &self.resources.prompt, &self.config.decoding)
                    .map_err(|e| format!("object extraction: {e}"))?;
                let kept = verbatim_filter(&raw, &caption);
                merge_ordered(&l1, &kept, &caption, vocab).map_err(|e| e.to_string())?
            }
            None => l1,
        };
        let panel = (!self.config.oracle_panel.is_empty()).then(|| OraclePanel {
            gateway: &self.gateway,
            members: &self.config.oracle_panel,
            cache: &self.verdicts,
            decoding: self.config.decoding,
        });
        let genuine = label_mentions(&mentions, &inst.labels, panel.as_ref(), &inst.image_id, &image)
            .map_err(|e| format!("oracle: {e}"))?;
        let top_k = self.resources.frequency.top_k(self.config.k).map_err(|e| e.to_string())?;
        let mut stores = BTreeMap::new();
        for store in &self.stores {
            let r = caos_for_caption(&mentions, &genuine, &inst.labels, &top_k, store)
                .map_err(|e| format!("scoring with {}: {e}", store.name()))?;
            stores.insert(store.name().to_string(), r);
        }
        Ok(CaptionRecord {
            model: item.key.model.clone(),
            image_id: inst.image_id.clone(),
            instruction_id: item.key.instruction_id.clone(),
            caption,
            mentions,
            genuine,
            ground_truth: inst.labels.iter().cloned().collect(),
            stores,
        })
    }

    fn open_records(&self) -> Result<(AppendLog, Vec<CaptionRecord>), PipelineError> {
        let path = self.out_path("records.jsonl");
        AppendLog::open::<CaptionRecord>(&path).map_err(io_err(&path))
    }

    /// Score every pending work item, then aggregate and write all outputs.
    pub fn run(&self) -> Result<RunOutcome, PipelineError> {
        let started_at = chrono::Utc::now().to_rfc3339();
        let items = self.work_items();
        let (log, existing) = self.open_records()?;
        let keys: BTreeSet<WorkKey> = items.iter().map(|i| i.key.clone()).collect();
        let done: BTreeSet<WorkKey> = existing.iter().map(WorkKey::of).collect();
        let pending: Vec<&WorkItem> = items.iter().filter(|i| !done.contains(&i.key)).collect();
        info!(total = items.len(), pending = pending.len(), "starting run");

        let fresh = Mutex::new(Vec::new());
        let failures = Mutex::new(Vec::new());
        let append_error = Mutex::new(None);
        self.pool()?.install(|| {
            pending.par_iter().for_each(|item| match self.process(item) {
                Ok(rec) => {
                    if let Err(e) = log.append(&rec) {
                        append_error.lock().expect("poisoned").get_or_insert(e);
                    }
                    fresh.lock().expect("poisoned").push(rec);
                }
                Err(error) => {
                    warn!(model = %item.key.model, image = %item.key.image_id, instruction = %item.key.instruction_id, %error, "caption failed");
                    failures.lock().expect("poisoned").push(FailureRecord {
                        key: item.key.clone(),
                        error,
                    });
                }
            })
        });
        if let Some(e) = append_error.into_inner().expect("poisoned") {
            return Err(PipelineError::Io {
                path: log.path().to_path_buf(),
                source: e,
            });
        }
        let mut records: Vec<CaptionRecord> = existing
            .into_iter()
            .chain(fresh.into_inner().expect("poisoned"))
            .filter(|r| keys.contains(&WorkKey::of(r)))
            .collect();
        records.sort_by(record_order);
        let mut failures = failures.into_inner().expect("poisoned");
        failures.sort_by(|a, b| a.key.cmp(&b.key));
        let report = build_report(self, &records, failures, items.len())?;
        self.finish(report, &records, started_at)
    }

    /// Rebuild the report from the records already on disk.
    pub fn report_from_records(&self) -> Result<RunOutcome, PipelineError> {
        let started_at = chrono::Utc::now().to_rfc3339();
        let (_, mut records) = self.open_records()?;
        if records.is_empty() {
            return Err(PipelineError::NoRecords(self.out_path("records.jsonl")));
        }
        records.sort_by(record_order);
        let n = records.len();
        let report = build_report(self, &records, Vec::new(), n)?;
        self.finish(report, &records, started_at)
    }

    fn finish(&self, report: RunReport, records: &[CaptionRecord], started_at: String) -> Result<RunOutcome, PipelineError> {
        let dir = &self.config.out_dir;
        for format in ReportFormat::ALL {
            let path = dir.join(format.file_name());
            super::report::write_table(format, &report, records, &path)?;
        }
        let path = dir.join("report.json");
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(io_err(&path))?;
        let manifest = self.manifest(&report, started_at);
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(io_err(&path))?;
        Ok(RunOutcome {
            report,
            manifest,
            out_dir: dir.clone(),
        })
    }

    fn manifest(&self, report: &RunReport, started_at: String) -> RunManifest {
        RunManifest {
            config_hash: self.config_hash.clone(),
            dataset_hash: self.resources.dataset_hash.clone(),
            mode: self.config.mode,
            endpoints: self.config.endpoints.iter().map(|d| d.name.clone()).collect(),
            oracle_template_version: TEMPLATE_VERSION.to_string(),
            extraction_prompt_version: self.resources.prompt.version.clone(),
            instructions_version: self.resources.instructions.version.clone(),
            stores: self
                .stores
                .iter()
                .map(|s| super::report::StoreInfo {
                    name: s.name().to_string(),
                    dimension: s.dimension(),
                    source: s.source().clone(),
                })
                .collect(),
            k: self.config.k,
            seed: self.config.seed,
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            gateway: self.gateway.stats(),
            verdict_cache_hits: self.verdicts.hits(),
            verdict_cache_misses: self.verdicts.misses(),
            embedding_cache_hits: self.embeddings.hits(),
            embedding_cache_misses: self.embeddings.misses(),
            records: report.groups.iter().map(|g| g.aggregate.captions).sum(),
            status: report.status,
        }
    }

    /// Generate captions only, appending them to `captions.jsonl` in the
    /// output directory in the ingest format. Returns the number of
    /// failures.
    pub fn generate_captions(&self) -> Result<(usize, usize), PipelineError> {
        let path = self.out_path("captions.jsonl");
        let (log, existing) = AppendLog::open::<IngestedCaption>(&path).map_err(io_err(&path))?;
        let done: BTreeSet<WorkKey> = existing
            .iter()
            .map(|c| WorkKey {
                model: c.model.clone(),
                image_id: c.image_id.clone(),
                instruction_id: c.instruction_id.clone(),
            })
            .collect();
        let items: Vec<WorkItem> = self
            .work_items()
            .into_iter()
            .filter(|i| i.instruction.is_some() && !done.contains(&i.key))
            .collect();
        let results: Vec<Result<(), String>> = self.pool()?.install(|| {
            items
                .par_iter()
                .map(|item| {
                    let inst = self.instance(&item.key.image_id);
                    let image = ImageSource::from_locator(&inst.image, None).map_err(|e| e.to_string())?;
                    let caption = self.caption_for(item, &image)?;
                    log.append(&IngestedCaption {
                        model: item.key.model.clone(),
                        image_id: item.key.image_id.clone(),
                        instruction_id: item.key.instruction_id.clone(),
                        caption,
                    })
                    .map_err(|e| e.to_string())
                })
                .collect()
        });
        let failed = results.iter().filter(|r| r.is_err()).count();
        for e in results.iter().filter_map(|r| r.as_ref().err()) {
            warn!(error = %e, "caption generation failed");
        }
        Ok((existing.len() + results.len() - failed, failed))
    }

    /// Yes/no probing of the `[pope]` model over the dataset; writes
    /// `pope.json` to the output directory.
    pub fn pope(&self) -> Result<PopeMetrics, PipelineError> {
        let section = self
            .config
            .pope
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no [pope] section in the configuration".into()))?;
        let images = self
            .resources
            .dataset
            .iter()
            .map(|d| {
                Ok(PopeImage {
                    image_id: d.image_id.clone(),
                    image: ImageSource::from_locator(&d.image, None).map_err(|e| PipelineError::Stage(e.to_string()))?,
                    ground_truth: d.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let cfg = PopeConfig {
            sampling: section.sampling,
            questions_per_image: section.questions_per_image,
            seed: self.config.seed,
            workers: self.config.concurrency,
        };
        let metrics = pope_evaluate(
            &images,
            &self.resources.vocab,
            &self.resources.frequency,
            self.resources.cooccurrence.as_ref(),
            &self.gateway,
            &section.model,
            &self.config.decoding,
            &cfg,
        )
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        let path = self.out_path("pope.json");
        std::fs::create_dir_all(&self.config.out_dir).map_err(io_err(&self.config.out_dir))?;
        let json = serde_json::json!({
            "model": section.model,
            "sampling": section.sampling,
            "questions_per_image": section.questions_per_image,
            "seed": self.config.seed,
            "metrics": metrics,
        });
        std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&json).expect("serializes")))
            .map_err(io_err(&path))?;
        Ok(metrics)
    }

    pub(crate) fn top_m(&self) -> usize {
        self.config.exclude_top_m
    }

    pub(crate) fn sweep_range(&self) -> Vec<usize> {
        let max = self.resources.frequency.len();
        self.config.sweep_k.iter().copied().filter(|k| *k >= 1 && *k <= max).collect()
    }

    pub(crate) fn store(&self, name: &str) -> Option<&EmbeddingStore> {
        self.stores.iter().find(|s| s.name() == name)
    }
}
