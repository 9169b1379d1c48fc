use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CategorySpec, TaxonomyError};
use crate::util::{normalize_name, stream};

/// Synthesis prompt with `{COUNT}`, `{CATEGORY}`, `{VIEW}` and `{LIGHT}` slots.
pub const PROMPT_TEMPLATE: &str = "A photorealistic image of {COUNT} {CATEGORY}. {VIEW}, {LIGHT}";

pub const COUNT_SLOTS: [&str; 4] = ["many", "hundreds of", "a few", "exactly two"];
pub const VIEW_SLOTS: [&str; 5] = [
    "top-down view",
    "high angle",
    "viewed from a distance",
    "close-up",
    "macro shot",
];
pub const LIGHT_SLOTS: [&str; 6] = [
    "backlit",
    "soft lighting",
    "golden hour",
    "overcast",
    "sunlight",
    "dimly lit",
];

const SLOT_PRODUCT: usize = COUNT_SLOTS.len() * VIEW_SLOTS.len() * LIGHT_SLOTS.len();

pub fn fill_template(count: &str, category: &str, view: &str, light: &str) -> String {
    PROMPT_TEMPLATE
        .replace("{COUNT}", count)
        .replace("{CATEGORY}", category)
        .replace("{VIEW}", view)
        .replace("{LIGHT}", light)
}

/// A prompt split back into its template slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub count: &'static str,
    pub category: String,
    pub view: &'static str,
    pub light: &'static str,
}

/// Inverse of [`fill_template`]; `None` when `prompt` is not a template
/// expansion.
pub fn parse_prompt(prompt: &str) -> Option<PromptParts> {
    let rest = prompt.strip_prefix("A photorealistic image of ")?;
    let mut by_len = COUNT_SLOTS;
    by_len.sort_by_key(|s| std::cmp::Reverse(s.len()));
    let count = by_len
        .into_iter()
        .find(|c| rest.starts_with(c) && rest[c.len()..].starts_with(' '))?;
    let rest = &rest[count.len() + 1..];
    let (category, tail) = rest.rsplit_once(". ")?;
    let (view, light) = tail.split_once(", ")?;
    let view = VIEW_SLOTS.into_iter().find(|v| *v == view)?;
    let light = LIGHT_SLOTS.into_iter().find(|l| *l == light)?;
    if category.trim().is_empty() {
        return None;
    }
    Some(PromptParts {
        count,
        category: category.to_string(),
        view,
        light,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub positive_prompts: Vec<String>,
    /// Keyed by negative category name.
    pub negative_prompts: BTreeMap<String, Vec<String>>,
}

/// `n` prompts for one category. Slot triples follow a seeded permutation of
/// all 120 combinations, repeated cyclically, so any 120 consecutive prompts
/// use each triple exactly once.
fn category_prompts(category: &str, n: usize, seed: u64) -> Vec<String> {
    let mut order: Vec<usize> = (0..SLOT_PRODUCT).collect();
    let mut rng = stream(seed, &format!("prompts/{}", normalize_name(category)));
    order.shuffle(&mut rng);
    order
        .iter()
        .cycle()
        .take(n)
        .map(|&k| {
            let count = COUNT_SLOTS[k / (VIEW_SLOTS.len() * LIGHT_SLOTS.len())];
            let view = VIEW_SLOTS[(k / LIGHT_SLOTS.len()) % VIEW_SLOTS.len()];
            let light = LIGHT_SLOTS[k % LIGHT_SLOTS.len()];
            fill_template(count, category, view, light)
        })
        .collect()
}

/// Expands the template for the target and each of its negatives.
pub fn expand_prompts(
    spec: &CategorySpec,
    n_per_category: usize,
    seed: u64,
) -> Result<PromptBundle, TaxonomyError> {
    if n_per_category == 0 {
        return Err(TaxonomyError::ZeroPrompts);
    }
    if spec.name.trim().is_empty() {
        return Err(TaxonomyError::InvalidSpec("category name is empty".into()));
    }
    let positive_prompts = category_prompts(&spec.name, n_per_category, seed);
    let negative_prompts = spec
        .negatives
        .iter()
        .map(|neg| (neg.clone(), category_prompts(neg, n_per_category, seed)))
        .collect();
    Ok(PromptBundle {
        positive_prompts,
        negative_prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NegativeSource;
    use std::collections::HashSet;

    #[test]
    fn single_prompt_replays_byte_identically() {
        let spec = CategorySpec::named("Canada Goose").unwrap();
        let bundle = expand_prompts(&spec, 1, 0).unwrap();
        // Frozen from the seeded slot sequence.
        assert_eq!(
            bundle.positive_prompts,
            ["A photorealistic image of many Canada Goose. close-up, backlit"]
        );
        assert_eq!(expand_prompts(&spec, 1, 0).unwrap(), bundle);
    }

    #[test]
    fn zero_prompts_is_an_error() {
        let spec = CategorySpec::named("Canada Goose").unwrap();
        assert_eq!(expand_prompts(&spec, 0, 0), Err(TaxonomyError::ZeroPrompts));
    }

    #[test]
    fn full_cycle_covers_every_triple_once() {
        let spec = CategorySpec::named("Quail Eggs").unwrap();
        let prompts = expand_prompts(&spec, 300, 7).unwrap().positive_prompts;
        for window in prompts.windows(120) {
            let distinct: HashSet<_> = window.iter().collect();
            assert_eq!(distinct.len(), 120);
        }
    }

    #[test]
    fn every_prompt_parses_back() {
        let spec = CategorySpec::new(
            "Basil Leaves",
            None,
            vec!["Cilantro".into(), "Mint. Leaves".into()],
            NegativeSource::Static,
        )
        .unwrap();
        let bundle = expand_prompts(&spec, 40, 3).unwrap();
        assert_eq!(bundle.negative_prompts.len(), 2);
        for p in &bundle.positive_prompts {
            let parts = parse_prompt(p).unwrap();
            assert_eq!(parts.category, "Basil Leaves");
            assert_eq!(
                fill_template(parts.count, &parts.category, parts.view, parts.light),
                *p
            );
        }
        for (neg, prompts) in &bundle.negative_prompts {
            assert_eq!(prompts.len(), 40);
            for p in prompts {
                assert_eq!(&parse_prompt(p).unwrap().category, neg);
            }
        }
    }

    #[test]
    fn parse_rejects_foreign_prompts() {
        assert!(parse_prompt("a photo of a cat").is_none());
        assert!(
            parse_prompt("A photorealistic image of several cats. close-up, backlit").is_none()
        );
        assert!(parse_prompt("A photorealistic image of many cats. sideways, backlit").is_none());
    }
}
