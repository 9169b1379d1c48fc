//! Run configuration, backend construction and the on-disk artifact store.
//!
//! A run is described by one TOML file ([`RunConfig`]). Every artifact a
//! command writes lives under the output root:
//!
//! ```text
//! <out>/synth/<category>/spec.json              resolved category spec
//! <out>/synth/<category>/<polarity>/<idx>.png   synthetic image
//! <out>/synth/<category>/<polarity>/<idx>.json  pseudo-annotation sidecar
//! <out>/concepts/<category>.json                tuned embedding
//! <out>/concepts/<category>.log.csv             training log
//! <out>/counts/<image>/<category>.json          count diagnostics
//! <out>/eval/report.{json,md}, *.png            evaluation report
//! ```
//!
//! Each artifact records the hash of the configuration that produced it
//! ([`RunConfig::hash`]); the output root and the thread count are excluded
//! from the hash because they do not change results.

mod commands;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::{CountKind, CounterBackend, CountingError, ToyCounter};
use crate::error::BackendError;
use crate::evaluation::{EvalError, MetricOptions};
use crate::shapes::{shape_class, SHAPE_CLASSES};
use crate::specializer::{SegmenterBackend, SpecializerError, ToySegmenter, TuningConfig};
use crate::synthesis::wire::ProcessGenerator;
use crate::synthesis::{AttentionStyle, GeneratorBackend, MockShapes, SynthesisError};
use crate::taxonomy::{
    CategorySpec, CommandSuggester, HttpSuggester, NegativeSuggester, StaticSuggester,
    TaxonomyError,
};
use crate::util::{normalize_name, sha256_hex};

pub use commands::{
    cmd_count, cmd_eval, cmd_report, cmd_synth, cmd_tune, CountOutput, SynthSummary, TuneSummary,
};

/// Environment variables read by the HTTP suggester. Their values never end
/// up in artifacts.
pub const ENV_SUGGESTER_URL: &str = "FINECOUNT_SUGGESTER_URL";
pub const ENV_SUGGESTER_KEY: &str = "FINECOUNT_SUGGESTER_KEY";
pub const ENV_SUGGESTER_MODEL: &str = "FINECOUNT_SUGGESTER_MODEL";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("category {category:?}: {source}")]
    Taxonomy {
        category: String,
        #[source]
        source: TaxonomyError,
    },
    #[error("synthesis for {category:?}: {source}")]
    Synthesis {
        category: String,
        #[source]
        source: SynthesisError,
    },
    #[error("no synthetic data for {category:?} under {path}; run the synth step first")]
    MissingSynth { category: String, path: String },
    #[error("tuning {category:?}: {source}")]
    Tuning {
        category: String,
        #[source]
        source: SpecializerError,
    },
    #[error("no concept for {category:?} at {path}; run the tune step first")]
    MissingConcept { category: String, path: String },
    #[error("counting {image}: {source}")]
    Counting {
        image: String,
        #[source]
        source: CountingError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Whether retrying the same command may succeed (an external service
    /// was unreachable or overloaded).
    pub fn is_retriable(&self) -> bool {
        match self {
            Self::Taxonomy { source, .. } => source.is_retriable(),
            Self::Synthesis {
                source: SynthesisError::Backend(e),
                ..
            } => e.is_retriable(),
            Self::Tuning {
                source: SpecializerError::Backend(e),
                ..
            } => e.is_retriable(),
            Self::Counting { source, .. } => source.is_retriable(),
            Self::Backend(e) => e.is_retriable(),
            _ => false,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSettings {
    pub n_pos: usize,
    pub n_neg_total: usize,
    /// Number of negatives requested from the suggester.
    pub n_negatives: usize,
    pub tau: f64,
    /// Overrides the generator's preferred attention blocks.
    pub block_subset: Option<Vec<u32>>,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg_total: 100,
            n_negatives: 5,
            tau: 0.1,
            block_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSettings {
    MockShapes {
        #[serde(default)]
        style: AttentionStyle,
    },
    /// A child process speaking the generator wire protocol on stdin/stdout.
    Process { command: Vec<String> },
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self::MockShapes {
            style: AttentionStyle::Flux,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuggesterSettings {
    /// Answers from the shape vocabulary: siblings first, then the nearest
    /// colours of other families.
    #[default]
    Shapes,
    Static {
        entries: BTreeMap<String, Vec<String>>,
    },
    Command {
        command: Vec<String>,
    },
    /// OpenAI-compatible chat endpoint; URL, key and model come from the
    /// environment.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmenterSettings {
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_cell")]
        cell: u32,
    },
}

fn default_cell() -> u32 {
    4
}

impl Default for SegmenterSettings {
    fn default() -> Self {
        Self::Toy { seed: 0, cell: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CounterSettings {
    #[default]
    ToyPoints,
    ToyDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountSettings {
    pub point_tau: f64,
    /// Prompt for the counter; defaults to each category's parent, else its
    /// name.
    pub broad_prompt: Option<String>,
    pub overlays: bool,
}

impl Default for CountSettings {
    fn default() -> Self {
        Self {
            point_tau: 0.5,
            broad_prompt: None,
            overlays: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; relative paths resolve against the working directory.
    pub out: PathBuf,
    /// Worker threads for image-level parallelism.
    pub jobs: usize,
    pub categories: Vec<CategorySpec>,
    pub synthesis: SynthesisSettings,
    pub generator: GeneratorSettings,
    pub suggester: SuggesterSettings,
    pub segmenter: SegmenterSettings,
    pub counter: CounterSettings,
    pub tuning: TuningConfig,
    pub count: CountSettings,
    pub eval: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("finecount-out"),
            jobs: 1,
            categories: Vec::new(),
            synthesis: SynthesisSettings::default(),
            generator: GeneratorSettings::default(),
            suggester: SuggesterSettings::default(),
            segmenter: SegmenterSettings::default(),
            counter: CounterSettings::default(),
            tuning: TuningConfig::default(),
            count: CountSettings::default(),
            eval: MetricOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form of everything that affects
    /// results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.jobs = 0;
        sha256_hex(
            serde_json::to_string(&canonical)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |message: String| PipelineError::Config {
            path: "<config>".into(),
            message,
        };
        if self.categories.is_empty() {
            return Err(bad("no categories configured".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            let slug = crate::slug(&c.name);
            if slug.is_empty() {
                return Err(bad(format!(
                    "category {:?} has no ASCII letters or digits to name its files",
                    c.name
                )));
            }
            if !seen.insert(slug) {
                return Err(bad(format!("category {:?} is listed twice", c.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.count.point_tau) {
            return Err(bad("count.point_tau must lie in [0, 1]".into()));
        }
        if !(self.synthesis.tau > 0.0 && self.synthesis.tau < 1.0) {
            return Err(bad("synthesis.tau must lie in (0, 1)".into()));
        }
        self.tuning.validate().map_err(|e| bad(e.to_string()))
    }

    pub fn generator(&self) -> Result<Box<dyn GeneratorBackend>, PipelineError> {
        Ok(match &self.generator {
            GeneratorSettings::MockShapes { style } => Box::new(MockShapes {
                style: *style,
                ..MockShapes::default()
            }),
            GeneratorSettings::Process { command } => {
                let (program, args) =
                    command.split_first().ok_or_else(|| PipelineError::Config {
                        path: "<config>".into(),
                        message: "generator.command is empty".into(),
                    })?;
                Box::new(ProcessGenerator::spawn(program, args)?)
            }
        })
    }

    pub fn suggester(&self) -> Result<Box<dyn NegativeSuggester>, PipelineError> {
        Ok(match &self.suggester {
            SuggesterSettings::Shapes => Box::new(ShapesSuggester),
            SuggesterSettings::Static { entries } => {
                Box::new(StaticSuggester::new(entries.clone()))
            }
            SuggesterSettings::Command { command } => {
                let (program, args) =
                    command.split_first().ok_or_else(|| PipelineError::Config {
                        path: "<config>".into(),
                        message: "suggester.command is empty".into(),
                    })?;
                Box::new(CommandSuggester {
                    program: program.clone(),
                    args: args.to_vec(),
                })
            }
            SuggesterSettings::Http => {
                let url = std::env::var(ENV_SUGGESTER_URL).map_err(|_| PipelineError::Config {
                    path: "<config>".into(),
                    message: format!("the http suggester needs {ENV_SUGGESTER_URL}"),
                })?;
                let model = std::env::var(ENV_SUGGESTER_MODEL).unwrap_or_else(|_| "default".into());
                Box::new(HttpSuggester::new(
                    url,
                    std::env::var(ENV_SUGGESTER_KEY).ok(),
                    model,
                ))
            }
        })
    }

    pub fn segmenter(&self) -> Box<dyn SegmenterBackend> {
        match self.segmenter {
            SegmenterSettings::Toy { seed, cell } => {
                Box::new(ToySegmenter::with_cell(seed, cell.max(1)))
            }
        }
    }

    pub fn counter(&self) -> Box<dyn CounterBackend> {
        Box::new(ToyCounter::new(match self.counter {
            CounterSettings::ToyPoints => CountKind::Points,
            CounterSettings::ToyDensity => CountKind::Density,
        }))
    }

    pub fn category(&self, name: &str) -> Option<&CategorySpec> {
        let key = normalize_name(name);
        self.categories
            .iter()
            .find(|c| normalize_name(&c.name) == key)
    }
}

/// Offline suggester over the shape vocabulary: classes of the same family
/// first, then the rest by colour distance. The requested count is read from
/// the request text.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShapesSuggester;

impl NegativeSuggester for ShapesSuggester {
    fn suggest(&self, request: &str) -> Result<String, BackendError> {
        let req = normalize_name(request);
        let target = SHAPE_CLASSES
            .iter()
            .filter(|c| req.contains(c.name))
            .max_by_key(|c| c.name.len())
            .and_then(|c| shape_class(c.name))
            .ok_or_else(|| {
                BackendError::failed("shapes-suggester", "request names no known shape")
            })?;
        let count = req
            .split_once("exactly ")
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .and_then(|n| n.parse::<usize>().ok())
            .unwrap_or(5);
        let dist = |c: &[u8; 3]| -> i64 {
            (0..3)
                .map(|k| (i64::from(c[k]) - i64::from(target.color[k])).pow(2))
                .sum()
        };
        let mut others: Vec<_> = SHAPE_CLASSES
            .iter()
            .filter(|c| c.name != target.name)
            .collect();
        others.sort_by_key(|c| (c.parent != target.parent, dist(&c.color)));
        Ok(others
            .iter()
            .take(count)
            .map(|c| c.name)
            .collect::<Vec<_>>()
            .join("\n"))
    }
}
