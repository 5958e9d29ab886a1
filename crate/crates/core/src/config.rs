//! Run configuration: a flat `key = value` file whose keys mirror the CLI
//! flags. Flags override the file. Relative paths in a file resolve against
//! the file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::DEFAULT_UNUSABLE_THRESHOLD;
use crate::corpus::{DEFAULT_MIN_CHARS, DEFAULT_MIN_INSTANCES};
use crate::error::{Error, Result};
use crate::gateway::{DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::prompt::Variant;
use crate::sampler::DEFAULT_K_SHOT;
use crate::score::SelectionMetric;

pub const DEFAULT_MODEL: &str = "gpt-4";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Live,
    #[default]
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub ontology: PathBuf,
    /// Empty means every topic of the filtered ontology.
    pub topics: Vec<String>,
    pub variant: Variant,
    pub seed: u64,
    pub k_shot: usize,
    pub min_instances: usize,
    pub min_chars: usize,
    /// Test sentences per topic; `None` is unbounded.
    pub max_items: Option<usize>,
    pub backend: Backend,
    /// Replay source, or the record target in live mode.
    pub store: Option<PathBuf>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub base_url: String,
    pub concurrency: usize,
    /// Directory of `<variant>.txt` templates; built-ins when unset.
    pub templates: Option<PathBuf>,
    pub out: PathBuf,
    pub align_threshold: f64,
    pub selection: SelectionMetric,
    pub run_id: Option<String>,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, ontology: impl Into<PathBuf>, seed: u64) -> Self {
        RunConfig {
            corpus: corpus.into(),
            ontology: ontology.into(),
            topics: Vec::new(),
            variant: Variant::Full,
            seed,
            k_shot: DEFAULT_K_SHOT,
            min_instances: DEFAULT_MIN_INSTANCES,
            min_chars: DEFAULT_MIN_CHARS,
            max_items: None,
            backend: Backend::Replay,
            store: None,
            model: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            base_url: DEFAULT_BASE_URL.to_string(),
            concurrency: DEFAULT_CONCURRENCY,
            templates: None,
            out: PathBuf::from("out"),
            align_threshold: DEFAULT_UNUSABLE_THRESHOLD,
            selection: SelectionMetric::MacroF1,
            run_id: None,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.variant, self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_id())
    }

    pub fn validate(&self) -> Result<()> {
        for (what, path) in [("corpus", &self.corpus), ("ontology", &self.ontology)] {
            if !path.is_file() {
                return Err(Error::Config(format!("{what} file {} not found", path.display())));
            }
        }
        if let Some(dir) = &self.templates {
            if !dir.is_dir() {
                return Err(Error::Config(format!("template dir {} not found", dir.display())));
            }
        }
        if self.backend == Backend::Replay {
            match &self.store {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::Config(format!("replay store {} not found", p.display()))),
                None => return Err(Error::Config("replay backend needs a store path".into())),
            }
        }
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.align_threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config("temperature must lie in [0, 2]".into()));
        }
        Ok(())
    }
}

/// Partially specified configuration, as read from a file or flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigLayer {
    pub corpus: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub topics: Vec<String>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub k_shot: Option<usize>,
    pub min_instances: Option<usize>,
    pub min_chars: Option<usize>,
    pub max_items: Option<usize>,
    pub backend: Option<Backend>,
    pub store: Option<PathBuf>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub base_url: Option<String>,
    pub concurrency: Option<usize>,
    pub templates: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub align_threshold: Option<f64>,
    pub selection: Option<SelectionMetric>,
    pub run_id: Option<String>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ConfigLayer {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut layer = ConfigLayer::default();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "corpus" => layer.corpus = Some(path(value)),
                "ontology" => layer.ontology = Some(path(value)),
                "topic" | "topics" => layer.topics.extend(
                    value
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from),
                ),
                "variant" => layer.variant = Some(value.parse()?),
                "seed" => layer.seed = Some(parse_value(key, value)?),
                "k_shot" => layer.k_shot = Some(parse_value(key, value)?),
                "min_instances" => layer.min_instances = Some(parse_value(key, value)?),
                "min_chars" => layer.min_chars = Some(parse_value(key, value)?),
                "limit" | "max_items" => layer.max_items = Some(parse_value(key, value)?),
                "backend" => {
                    layer.backend = Some(match value {
                        "live" => Backend::Live,
                        "replay" => Backend::Replay,
                        _ => return Err(Error::Config(format!("unknown backend {value:?}"))),
                    })
                }
                "replay" | "store" => layer.store = Some(path(value)),
                "model" => layer.model = Some(value.to_string()),
                "temperature" => layer.temperature = Some(parse_value(key, value)?),
                "max_tokens" => layer.max_tokens = Some(parse_value(key, value)?),
                "base_url" => layer.base_url = Some(value.to_string()),
                "concurrency" => layer.concurrency = Some(parse_value(key, value)?),
                "templates" => layer.templates = Some(path(value)),
                "out" => layer.out = Some(path(value)),
                "threshold" => layer.align_threshold = Some(parse_value(key, value)?),
                "selection" => {
                    layer.selection = Some(match value {
                        "macro_f1" => SelectionMetric::MacroF1,
                        "micro_f1" => SelectionMetric::MicroF1,
                        _ => return Err(Error::Config(format!("unknown selection metric {value:?}"))),
                    })
                }
                "run_id" => layer.run_id = Some(value.to_string()),
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        Ok(layer)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Values set in `over` win; topics from `over` replace the file's.
    pub fn overlay(self, over: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            corpus: over.corpus.or(self.corpus),
            ontology: over.ontology.or(self.ontology),
            topics: if over.topics.is_empty() { self.topics } else { over.topics },
            variant: over.variant.or(self.variant),
            seed: over.seed.or(self.seed),
            k_shot: over.k_shot.or(self.k_shot),
            min_instances: over.min_instances.or(self.min_instances),
            min_chars: over.min_chars.or(self.min_chars),
            max_items: over.max_items.or(self.max_items),
            backend: over.backend.or(self.backend),
            store: over.store.or(self.store),
            model: over.model.or(self.model),
            temperature: over.temperature.or(self.temperature),
            max_tokens: over.max_tokens.or(self.max_tokens),
            base_url: over.base_url.or(self.base_url),
            concurrency: over.concurrency.or(self.concurrency),
            templates: over.templates.or(self.templates),
            out: over.out.or(self.out),
            align_threshold: over.align_threshold.or(self.align_threshold),
            selection: over.selection.or(self.selection),
            run_id: over.run_id.or(self.run_id),
        }
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let corpus = self.corpus.ok_or_else(|| Error::Config("corpus path is required".into()))?;
        let ontology = self.ontology.ok_or_else(|| Error::Config("ontology path is required".into()))?;
        let seed = self.seed.ok_or_else(|| Error::Config("seed is required".into()))?;
        let d = RunConfig::new(corpus, ontology, seed);
        Ok(RunConfig {
            topics: self.topics,
            variant: self.variant.unwrap_or(d.variant),
            k_shot: self.k_shot.unwrap_or(d.k_shot),
            min_instances: self.min_instances.unwrap_or(d.min_instances),
            min_chars: self.min_chars.unwrap_or(d.min_chars),
            max_items: self.max_items,
            backend: self.backend.unwrap_or(d.backend),
            store: self.store,
            model: self.model.unwrap_or(d.model),
            temperature: self.temperature.unwrap_or(d.temperature),
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            base_url: self.base_url.unwrap_or(d.base_url),
            concurrency: self.concurrency.unwrap_or(d.concurrency),
            templates: self.templates,
            out: self.out.unwrap_or(d.out),
            align_threshold: self.align_threshold.unwrap_or(d.align_threshold),
            selection: self.selection.unwrap_or(d.selection),
            run_id: self.run_id,
            ..d
        })
    }
}
