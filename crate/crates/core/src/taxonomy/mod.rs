//! Target categories, their negatives, and the prompts used to synthesize
//! both.

mod prompts;
mod suggester;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::util::normalize_name;

pub use prompts::{
    expand_prompts, fill_template, parse_prompt, PromptBundle, PromptParts, COUNT_SLOTS,
    LIGHT_SLOTS, PROMPT_TEMPLATE, VIEW_SLOTS,
};
pub use suggester::{
    negative_request, parse_suggestions, CommandSuggester, HttpSuggester, NegativeSuggester,
    StaticSuggester, NEGATIVE_REQUEST_TEMPLATE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("invalid category spec: {0}")]
    InvalidSpec(String),
    #[error("prompt count per category must be at least 1")]
    ZeroPrompts,
    #[error("negative source is llm_generated but no suggester was supplied")]
    MissingSuggester,
    #[error("suggester returned {} usable negatives for {category:?}, needed {needed}", obtained.len())]
    InsufficientNegatives {
        category: String,
        needed: usize,
        obtained: Vec<String>,
    },
    #[error(transparent)]
    Suggester(#[from] BackendError),
}

impl TaxonomyError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Suggester(e) if e.is_retriable())
    }
}

/// Where a category's hard negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Sibling categories suggested by a language model.
    #[default]
    LlmGenerated,
    /// The parent category as a single one-vs-many distractor.
    FineVsBroad,
    /// A fixed list from configuration.
    Static,
    /// No negative supervision.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategorySpec {
    pub name: String,
    pub parent: Option<String>,
    pub negatives: Vec<String>,
    pub negative_source: NegativeSource,
}

#[derive(Deserialize)]
struct RawCategorySpec {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    negatives: Vec<String>,
    #[serde(default)]
    negative_source: NegativeSource,
}

impl<'de> Deserialize<'de> for CategorySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawCategorySpec::deserialize(d)?;
        CategorySpec::new(raw.name, raw.parent, raw.negatives, raw.negative_source)
            .map_err(serde::de::Error::custom)
    }
}

impl CategorySpec {
    /// Builds a spec and establishes the source-dependent invariants:
    /// `FineVsBroad` pins the negatives to `[parent]`, `None` clears them, and
    /// the target name is filtered out of any supplied list.
    pub fn new(
        name: impl Into<String>,
        parent: Option<String>,
        negatives: Vec<String>,
        negative_source: NegativeSource,
    ) -> Result<Self, TaxonomyError> {
        let name = name.into().split_whitespace().collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(TaxonomyError::InvalidSpec("category name is empty".into()));
        }
        let parent = parent
            .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|p| !p.is_empty());
        let negatives = match negative_source {
            NegativeSource::FineVsBroad => {
                let parent = parent.clone().ok_or_else(|| {
                    TaxonomyError::InvalidSpec(format!(
                        "{name:?} uses fine_vs_broad negatives but has no parent"
                    ))
                })?;
                if normalize_name(&parent) == normalize_name(&name) {
                    return Err(TaxonomyError::InvalidSpec(format!(
                        "parent of {name:?} equals the category itself"
                    )));
                }
                vec![parent]
            }
            NegativeSource::None => Vec::new(),
            NegativeSource::LlmGenerated | NegativeSource::Static => {
                dedup_negatives(&name, negatives)
            }
        };
        Ok(Self {
            name,
            parent,
            negatives,
            negative_source,
        })
    }

    /// Convenience constructor for a category without parent or negatives.
    pub fn named(name: impl Into<String>) -> Result<Self, TaxonomyError> {
        Self::new(name, None, Vec::new(), NegativeSource::None)
    }

    /// The prompt handed to the counter when specializing: the parent when
    /// known, otherwise the name itself.
    pub fn broad_prompt(&self) -> &str {
        self.parent.as_deref().unwrap_or(&self.name)
    }
}

/// Case- and whitespace-insensitive dedup that also drops the target name.
fn dedup_negatives(target: &str, negatives: Vec<String>) -> Vec<String> {
    let target = normalize_name(target);
    let mut seen = std::collections::HashSet::new();
    negatives
        .into_iter()
        .map(|n| n.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|n| !n.is_empty())
        .filter(|n| {
            let key = normalize_name(n);
            key != target && seen.insert(key)
        })
        .collect()
}

/// Resolves `spec`'s negatives according to its source. `k` is the number of
/// suggestions requested from `llm` for [`NegativeSource::LlmGenerated`].
pub fn source_negatives(
    spec: &CategorySpec,
    k: usize,
    llm: Option<&dyn NegativeSuggester>,
) -> Result<CategorySpec, TaxonomyError> {
    let mut out = spec.clone();
    match spec.negative_source {
        NegativeSource::LlmGenerated => {
            if k == 0 {
                return Err(TaxonomyError::InvalidSpec(
                    "number of negatives to request must be at least 1".into(),
                ));
            }
            let llm = llm.ok_or(TaxonomyError::MissingSuggester)?;
            let reply = llm.suggest(&negative_request(k, &spec.name))?;
            let mut obtained = dedup_negatives(&spec.name, parse_suggestions(&reply));
            if obtained.len() < k {
                return Err(TaxonomyError::InsufficientNegatives {
                    category: spec.name.clone(),
                    needed: k,
                    obtained,
                });
            }
            obtained.truncate(k);
            out.negatives = obtained;
        }
        NegativeSource::FineVsBroad => {
            // Re-establish the invariant even if the caller mutated the field.
            let parent = spec.parent.clone().ok_or_else(|| {
                TaxonomyError::InvalidSpec(format!("{:?} has no parent", spec.name))
            })?;
            out.negatives = vec![parent];
        }
        NegativeSource::Static => {}
        NegativeSource::None => out.negatives.clear(),
    }
    Ok(out)
}
