//! Dataset, instruction and ingested-caption files, plus a converter from
//! COCO instance annotations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::lexicon::Vocabulary;
use crate::similarity::ObjectLabel;

const DEFAULT_INSTRUCTIONS: &str = include_str!("../../assets/instructions.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub image_id: String,
    /// URL, data URL or absolute file path.
    pub image: String,
    pub labels: BTreeSet<ObjectLabel>,
}

#[derive(Deserialize)]
struct DatasetLine {
    image_id: Value,
    image: String,
    labels: Vec<String>,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Numeric ids sort numerically and before any other id.
pub(crate) fn cmp_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn is_remote(locator: &str) -> bool {
    ["http://", "https://", "data:"].iter().any(|p| locator.starts_with(p))
}

fn data_error(path: &Path, line: usize, reason: impl Into<String>) -> PipelineError {
    PipelineError::Data {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Load a JSON-lines dataset (`image_id`, `image`, `labels`). Labels are
/// canonicalized through the vocabulary; relative image paths are resolved
/// against the dataset's directory. Returns the instances sorted by id and
/// a hash of the file contents.
pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<(Vec<DatasetInstance>, String), PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("dataset {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| data_error(path, 0, "not UTF-8"))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out: Vec<DatasetInstance> = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetLine = serde_json::from_str(line).map_err(|e| data_error(path, idx + 1, e.to_string()))?;
        let image_id = id_string(&row.image_id).ok_or_else(|| data_error(path, idx + 1, "image_id must be a string or number"))?;
        if !ids.insert(image_id.clone()) {
            return Err(data_error(path, idx + 1, format!("duplicate image id {image_id:?}")));
        }
        let mut labels = BTreeSet::new();
        for raw in &row.labels {
            let label = vocab
                .canonicalize(raw)
                .ok_or_else(|| data_error(path, idx + 1, format!("unknown ground-truth label {raw:?}")))?;
            labels.insert(label);
        }
        let image = if is_remote(&row.image) || Path::new(&row.image).is_absolute() {
            row.image
        } else {
            base.join(&row.image).to_string_lossy().into_owned()
        };
        out.push(DatasetInstance { image_id, image, labels });
    }
    out.sort_by(|a, b| cmp_ids(&a.image_id, &b.image_id));
    Ok((out, hex::encode(Sha256::digest(&bytes))))
}

/// A caption produced elsewhere, to be scored without generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestedCaption {
    pub model: String,
    pub image_id: String,
    pub instruction_id: String,
    pub caption: String,
}

#[derive(Deserialize)]
struct IngestLine {
    model: String,
    image_id: Value,
    instruction_id: Value,
    caption: String,
}

pub fn load_ingested(path: &Path) -> Result<Vec<IngestedCaption>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("captions {}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut keys = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: IngestLine = serde_json::from_str(line).map_err(|e| data_error(path, idx + 1, e.to_string()))?;
        let bad_id = || data_error(path, idx + 1, "ids must be strings or numbers");
        let cap = IngestedCaption {
            model: row.model,
            image_id: id_string(&row.image_id).ok_or_else(bad_id)?,
            instruction_id: id_string(&row.instruction_id).ok_or_else(bad_id)?,
            caption: row.caption,
        };
        if !keys.insert((cap.model.clone(), cap.image_id.clone(), cap.instruction_id.clone())) {
            return Err(data_error(path, idx + 1, "duplicate (model, image_id, instruction_id)"));
        }
        out.push(cap);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: u32,
    pub text: String,
}

/// Versioned list of captioning instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub version: String,
    pub instruction: Vec<Instruction>,
}

impl Default for InstructionSet {
    fn default() -> Self {
        Self::parse(DEFAULT_INSTRUCTIONS).expect("bundled instructions are valid")
    }
}

impl InstructionSet {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let set: Self = toml::from_str(text).map_err(|e| PipelineError::Config(format!("instructions: {e}")))?;
        let ids: BTreeSet<u32> = set.instruction.iter().map(|i| i.id).collect();
        if ids.len() != set.instruction.len() {
            return Err(PipelineError::Config("instructions: duplicate id".into()));
        }
        if set.instruction.iter().any(|i| i.text.trim().is_empty()) {
            return Err(PipelineError::Config("instructions: empty text".into()));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("instructions {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, id: u32) -> Result<&Instruction, PipelineError> {
        self.instruction
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| PipelineError::Config(format!("unknown instruction id {id}")))
    }
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    #[serde(default)]
    coco_url: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Output of [`convert_coco`].
#[derive(Debug, Clone, Default)]
pub struct CocoConversion {
    pub instances: Vec<DatasetInstance>,
    /// Number of images containing each label.
    pub frequency: BTreeMap<ObjectLabel, u64>,
    /// Number of images containing both labels of each unordered pair.
    pub cooccurrence: BTreeMap<(ObjectLabel, ObjectLabel), u64>,
}

#[derive(Debug, Clone, Default)]
pub struct CocoOptions {
    /// Prefix for image locators; the `coco_url` is used when absent and
    /// available, otherwise the bare file name.
    pub image_root: Option<String>,
    /// Keep only the first `limit` images by id.
    pub limit: Option<usize>,
}

/// Turn a COCO `instances_*.json` file into dataset instances plus image
/// level frequency and co-occurrence counts. Category names go through the
/// vocabulary when one is given.
pub fn convert_coco(
    path: &Path,
    vocab: Option<&Vocabulary>,
    options: &CocoOptions,
) -> Result<CocoConversion, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| data_error(path, 0, e.to_string()))?;
    let mut categories = BTreeMap::new();
    for c in &coco.categories {
        let label = match vocab {
            Some(v) => v
                .canonicalize(&c.name)
                .ok_or_else(|| data_error(path, 0, format!("category {:?} is not in the vocabulary", c.name)))?,
            None => ObjectLabel::new(&c.name).map_err(|e| data_error(path, 0, e.to_string()))?,
        };
        categories.insert(c.id, label);
    }
    let mut labels: BTreeMap<u64, BTreeSet<ObjectLabel>> = BTreeMap::new();
    for a in &coco.annotations {
        let label = categories
            .get(&a.category_id)
            .ok_or_else(|| data_error(path, 0, format!("unknown category id {}", a.category_id)))?;
        labels.entry(a.image_id).or_default().insert(label.clone());
    }
    let mut images: Vec<&CocoImage> = coco.images.iter().collect();
    images.sort_by_key(|i| i.id);
    if let Some(limit) = options.limit {
        images.truncate(limit);
    }
    let mut out = CocoConversion::default();
    for img in images {
        let set = labels.remove(&img.id).unwrap_or_default();
        for l in &set {
            *out.frequency.entry(l.clone()).or_default() += 1;
        }
        let list: Vec<&ObjectLabel> = set.iter().collect();
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                *out.cooccurrence.entry(((*a).clone(), (*b).clone())).or_default() += 1;
            }
        }
        let image = match (&options.image_root, &img.coco_url) {
            (Some(root), _) => format!("{}/{}", root.trim_end_matches('/'), img.file_name),
            (None, Some(url)) => url.clone(),
            (None, None) => img.file_name.clone(),
        };
        out.instances.push(DatasetInstance {
            image_id: img.id.to_string(),
            image,
            labels: set,
        });
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl CocoConversion {
    /// Write `dataset.jsonl`, `frequency.tsv` and `cooccurrence.tsv` into
    /// `dir` and return their paths.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3], PipelineError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let dataset = dir.join("dataset.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&dataset).map_err(io_err(&dataset))?);
        for inst in &self.instances {
            let line = serde_json::json!({
                "image_id": inst.image_id,
                "image": inst.image,
                "labels": inst.labels,
            });
            writeln!(f, "{line}").map_err(io_err(&dataset))?;
        }
        f.flush().map_err(io_err(&dataset))?;

        let frequency = dir.join("frequency.tsv");
        let mut text = String::new();
        for (l, n) in &self.frequency {
            text.push_str(&format!("{l}\t{n}\n"));
        }
        std::fs::write(&frequency, text).map_err(io_err(&frequency))?;

        let cooc = dir.join("cooccurrence.tsv");
        let mut text = String::new();
        for ((a, b), n) in &self.cooccurrence {
            text.push_str(&format!("{a}\t{b}\t{n}\n"));
        }
        std::fs::write(&cooc, text).map_err(io_err(&cooc))?;
        Ok([dataset, frequency, cooc])
    }
}
