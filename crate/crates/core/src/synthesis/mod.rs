//! Synthetic images with attention-derived pseudo-masks.
//!
//! A [`GeneratorBackend`] renders an image for a prompt and reports the
//! text-to-image cross-attention it computed on the way. For the target
//! category the attention is averaged over the selected blocks and heads
//! ([`average_attention`]), the category's token row is pulled out and laid
//! onto the patch grid ([`extract_category_map`]), min-max normalized
//! ([`normalize_map`]) and thresholded ([`binarize`]). Images of negative
//! categories skip all of that and get an empty mask.

mod mock_shapes;
mod store;
pub mod wire;

use std::ops::Range;

use image::RgbImage;
use ndarray::{s, Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::taxonomy::{CategorySpec, PromptBundle};
use crate::util::{fnv1a, mix, normalize_name};

pub use mock_shapes::{AttentionStyle, MockShapes};
pub use store::{load_pairs, mask_from_rle, mask_to_rle, pair_dir, write_pair, PairSidecar};

/// Threshold applied to normalized attention maps.
pub const DEFAULT_BIN_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed attention: {0}")]
    MalformedAttention(String),
    #[error("token span {start}..{end} out of bounds for {len} text tokens")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("{failed} of {requested} generations failed (limit is 20%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        requested: usize,
        first: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad artifact {path}: {message}")]
    Artifact { path: String, message: String },
}

/// Cross-attention captured during one generation, indexed
/// `(layer, head, text token, image patch)`. Patches are numbered row-major
/// over `grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    values: Array4<f32>,
    layers: Vec<u32>,
    grid: (usize, usize),
}

impl AttentionStack {
    pub fn new(
        values: Array4<f32>,
        layers: Vec<u32>,
        grid: (usize, usize),
    ) -> Result<Self, SynthesisError> {
        let (l, h, text, patches) = values.dim();
        if l == 0 || h == 0 || text == 0 || patches == 0 {
            return Err(SynthesisError::MalformedAttention(format!(
                "empty dimension in shape {:?}",
                values.dim()
            )));
        }
        if layers.len() != l {
            return Err(SynthesisError::MalformedAttention(format!(
                "{} layer ids for {l} layers",
                layers.len()
            )));
        }
        let mut sorted = layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layers.len() {
            return Err(SynthesisError::MalformedAttention(
                "duplicate layer ids".into(),
            ));
        }
        if grid.0 * grid.1 != patches {
            return Err(SynthesisError::MalformedAttention(format!(
                "grid {}x{} does not hold {patches} patches",
                grid.0, grid.1
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(SynthesisError::MalformedAttention(format!(
                "entry {bad} is negative or non-finite"
            )));
        }
        Ok(Self {
            values,
            layers,
            grid,
        })
    }

    pub fn values(&self) -> &Array4<f32> {
        &self.values
    }

    pub fn layers(&self) -> &[u32] {
        &self.layers
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn heads(&self) -> usize {
        self.values.dim().1
    }

    pub fn text_len(&self) -> usize {
        self.values.dim().2
    }
}

/// Token range occupied by one prompt word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

/// Words of a prompt as the span bookkeeping sees them: whitespace separated,
/// surrounding punctuation removed.
pub fn prompt_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token range covering the first occurrence of `category`'s words in order.
pub fn find_category_span(spans: &[WordSpan], category: &str) -> Option<Range<usize>> {
    let wanted: Vec<String> = prompt_words(category)
        .iter()
        .map(|w| normalize_name(w))
        .collect();
    if wanted.is_empty() || wanted.len() > spans.len() {
        return None;
    }
    spans.windows(wanted.len()).find_map(|win| {
        let hit = win
            .iter()
            .zip(&wanted)
            .all(|(span, w)| normalize_name(&span.word) == *w);
        hit.then(|| win[0].start..win[win.len() - 1].end)
    })
}

/// Output of one [`GeneratorBackend::generate`] call.
#[derive(Debug, Clone)]
pub struct Generation {
    pub image: RgbImage,
    pub attention: AttentionStack,
    pub token_spans: Vec<WordSpan>,
}

impl Generation {
    /// Checks the span invariants against the prompt that produced this
    /// generation.
    pub fn validate(&self, prompt: &str) -> Result<(), SynthesisError> {
        let text = self.attention.text_len();
        let mut last_end = 0;
        for span in &self.token_spans {
            if span.start >= span.end || span.end > text {
                return Err(SynthesisError::SpanOutOfBounds {
                    start: span.start,
                    end: span.end,
                    len: text,
                });
            }
            if span.start < last_end {
                return Err(SynthesisError::MalformedAttention(format!(
                    "token span for {:?} overlaps its predecessor",
                    span.word
                )));
            }
            last_end = span.end;
        }
        let words = prompt_words(prompt);
        let covered: Vec<&str> = self.token_spans.iter().map(|s| s.word.as_str()).collect();
        if words.len() != covered.len()
            || words
                .iter()
                .zip(&covered)
                .any(|(a, b)| normalize_name(a) != normalize_name(b))
        {
            return Err(SynthesisError::MalformedAttention(
                "token spans do not cover the prompt words".into(),
            ));
        }
        Ok(())
    }
}

/// What a generator can do. `preferred_blocks` is the block subset whose
/// attention localizes objects best for this generator; `None` means average
/// over everything captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCapabilities {
    pub name: String,
    pub image_size: (u32, u32),
    pub steps: u32,
    pub captured_blocks: Vec<u32>,
    pub preferred_blocks: Option<Vec<u32>>,
    /// Whether `generate` may be called from several threads at once.
    pub concurrent: bool,
}

pub trait GeneratorBackend: Send + Sync {
    fn capabilities(&self) -> GeneratorCapabilities;
    fn generate(&self, prompt: &str, seed: u64) -> Result<Generation, BackendError>;
}

/// Mean over all `(layer, head)` slices of the selected layers.
pub fn average_attention(
    stack: &AttentionStack,
    block_subset: Option<&[u32]>,
) -> Result<Array2<f64>, SynthesisError> {
    let layer_idx: Vec<usize> = match block_subset {
        None => (0..stack.layers.len()).collect(),
        Some([]) => {
            return Err(SynthesisError::InvalidArgument(
                "block subset is empty".into(),
            ))
        }
        Some(ids) => ids
            .iter()
            .map(|id| {
                stack.layers.iter().position(|l| l == id).ok_or_else(|| {
                    SynthesisError::InvalidArgument(format!(
                        "block {id} was not captured (have {:?})",
                        stack.layers
                    ))
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let (_, heads, text, patches) = stack.values.dim();
    let mut acc = Array2::<f64>::zeros((text, patches));
    for &l in &layer_idx {
        for h in 0..heads {
            let slice = stack.values.slice(s![l, h, .., ..]);
            acc.zip_mut_with(&slice, |a, &v| *a += f64::from(v));
        }
    }
    let n = (layer_idx.len() * heads) as f64;
    acc.mapv_inplace(|v| v / n);
    Ok(acc)
}

/// Selects the category's token row and reshapes it onto the patch grid.
/// Multi-token categories use the token with the largest total attention;
/// ties go to the lowest index.
pub fn extract_category_map(
    avg: &Array2<f64>,
    span: Range<usize>,
    grid: (usize, usize),
) -> Result<Array2<f64>, SynthesisError> {
    let (text, patches) = avg.dim();
    if span.is_empty() || span.end > text {
        return Err(SynthesisError::SpanOutOfBounds {
            start: span.start,
            end: span.end,
            len: text,
        });
    }
    if grid.0 * grid.1 != patches {
        return Err(SynthesisError::InvalidArgument(format!(
            "grid {}x{} does not hold {patches} patches",
            grid.0, grid.1
        )));
    }
    let mut best = span.start;
    let mut best_mass = avg.row(best).sum();
    for t in span.start + 1..span.end {
        let mass = avg.row(t).sum();
        if mass > best_mass {
            best = t;
            best_mass = mass;
        }
    }
    let row = avg.row(best).to_owned();
    Ok(row
        .into_shape_with_order(grid)
        .expect("patch count checked above"))
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(raw: &Array2<f64>) -> Array2<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if raw.is_empty() || range <= 0.0 || !range.is_finite() {
        return Array2::zeros(raw.dim());
    }
    raw.mapv(|v| ((v - min) / range).clamp(0.0, 1.0))
}

/// `1` where `map >= tau`, else `0`.
pub fn binarize(map: &Array2<f64>, tau: f64) -> Array2<u8> {
    assert!(
        tau > 0.0 && tau < 1.0,
        "threshold must lie in (0, 1), got {tau}"
    );
    map.mapv(|v| u8::from(v >= tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// A synthetic image with its pseudo-annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPair {
    pub image: RgbImage,
    pub prompt: String,
    pub seed: u64,
    /// Averaged attention (`text × patches`); only kept for freshly
    /// synthesized positives.
    pub avg_map: Option<Array2<f64>>,
    /// Normalized category map on the patch grid; zeros for negatives.
    pub cat_map: Array2<f64>,
    /// Binary target on the patch grid; all zeros for negatives.
    pub bin_mask: Array2<u8>,
    pub polarity: Polarity,
    /// Category depicted in the image.
    pub category: String,
}

/// Runs the attention chain for a positive generation.
pub fn positive_pair(
    generation: Generation,
    prompt: &str,
    seed: u64,
    category: &str,
    block_subset: Option<&[u32]>,
    tau: f64,
) -> Result<PseudoPair, SynthesisError> {
    generation.validate(prompt)?;
    let span = find_category_span(&generation.token_spans, category).ok_or_else(|| {
        SynthesisError::InvalidArgument(format!("category {category:?} not found in prompt tokens"))
    })?;
    let avg = average_attention(&generation.attention, block_subset)?;
    let raw = extract_category_map(&avg, span, generation.attention.grid())?;
    let cat_map = normalize_map(&raw);
    let bin_mask = binarize(&cat_map, tau);
    Ok(PseudoPair {
        image: generation.image,
        prompt: prompt.to_string(),
        seed,
        avg_map: Some(avg),
        cat_map,
        bin_mask,
        polarity: Polarity::Positive,
        category: category.to_string(),
    })
}

/// Wraps a negative generation with an empty target.
pub fn negative_pair(
    generation: Generation,
    prompt: &str,
    seed: u64,
    category: &str,
) -> PseudoPair {
    let grid = generation.attention.grid();
    PseudoPair {
        image: generation.image,
        prompt: prompt.to_string(),
        seed,
        avg_map: None,
        cat_map: Array2::zeros(grid),
        bin_mask: Array2::zeros(grid),
        polarity: Polarity::Negative,
        category: category.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub n_pos: usize,
    pub n_neg_total: usize,
    pub seed: u64,
    pub tau: f64,
    /// Overrides the backend's preferred blocks.
    pub block_subset: Option<Vec<u32>>,
    pub jobs: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            n_pos: 100,
            n_neg_total: 100,
            seed: 0,
            tau: DEFAULT_BIN_THRESHOLD,
            block_subset: None,
            jobs: 1,
        }
    }
}

/// A generation that was skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisFailure {
    pub polarity: Polarity,
    pub category: String,
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub pairs: Vec<PseudoPair>,
    pub failures: Vec<SynthesisFailure>,
}

/// Seed for the `index`-th image of `category` with the given polarity.
pub fn image_seed(seed: u64, polarity: Polarity, category: &str, index: usize) -> u64 {
    let tag = format!("{}/{}/{index}", polarity.as_str(), normalize_name(category));
    mix(seed ^ fnv1a(tag.as_bytes()))
}

/// Number of negatives each category receives under round-robin assignment.
pub fn round_robin_counts(n_categories: usize, total: usize) -> Vec<usize> {
    (0..n_categories)
        .map(|k| total / n_categories + usize::from(k < total % n_categories))
        .collect()
}

struct Job {
    polarity: Polarity,
    category: String,
    index: usize,
    prompt: String,
    seed: u64,
}

/// Builds `n_pos` positive pairs for `spec.name` and `n_neg_total` negatives
/// spread round-robin over `spec.negatives` (none when the category has no
/// negatives). Individual failures are recorded and skipped; more than 20% of
/// the requested images failing aborts the run.
pub fn synthesize_dataset(
    spec: &CategorySpec,
    bundle: &PromptBundle,
    backend: &dyn GeneratorBackend,
    opts: &SynthesisOptions,
) -> Result<SynthesisOutput, SynthesisError> {
    let caps = backend.capabilities();
    let subset: Option<Vec<u32>> = opts
        .block_subset
        .clone()
        .or_else(|| caps.preferred_blocks.clone());
    if opts.n_pos > 0 && bundle.positive_prompts.is_empty() {
        return Err(SynthesisError::InvalidArgument(
            "no positive prompts".into(),
        ));
    }

    let mut jobs = Vec::with_capacity(opts.n_pos + opts.n_neg_total);
    for i in 0..opts.n_pos {
        jobs.push(Job {
            polarity: Polarity::Positive,
            category: spec.name.clone(),
            index: i,
            prompt: bundle.positive_prompts[i % bundle.positive_prompts.len()].clone(),
            seed: image_seed(opts.seed, Polarity::Positive, &spec.name, i),
        });
    }
    let negs = &spec.negatives;
    if !negs.is_empty() {
        for i in 0..opts.n_neg_total {
            let category = &negs[i % negs.len()];
            let j = i / negs.len();
            let prompts = bundle
                .negative_prompts
                .get(category)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| {
                    SynthesisError::InvalidArgument(format!("no prompts for negative {category:?}"))
                })?;
            jobs.push(Job {
                polarity: Polarity::Negative,
                category: category.clone(),
                index: j,
                prompt: prompts[j % prompts.len()].clone(),
                seed: image_seed(opts.seed, Polarity::Negative, category, j),
            });
        }
    }
    let requested = jobs.len();

    let run = |job: &Job| -> Result<PseudoPair, SynthesisError> {
        let generation = backend.generate(&job.prompt, job.seed)?;
        match job.polarity {
            Polarity::Positive => positive_pair(
                generation,
                &job.prompt,
                job.seed,
                &job.category,
                subset.as_deref(),
                opts.tau,
            ),
            Polarity::Negative => Ok(negative_pair(
                generation,
                &job.prompt,
                job.seed,
                &job.category,
            )),
        }
    };
    let results: Vec<Result<PseudoPair, SynthesisError>> = if caps.concurrent && opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| SynthesisError::InvalidArgument(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut pairs = Vec::with_capacity(requested);
    let mut failures = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(pair) => pairs.push(pair),
            Err(e) => {
                tracing::warn!(category = %job.category, index = job.index, "generation failed: {e}");
                failures.push(SynthesisFailure {
                    polarity: job.polarity,
                    category: job.category.clone(),
                    index: job.index,
                    message: e.to_string(),
                })
            }
        }
    }
    if failures.len() * 5 > requested {
        return Err(SynthesisError::TooManyFailures {
            failed: failures.len(),
            requested,
            first: failures[0].message.clone(),
        });
    }
    Ok(SynthesisOutput { pairs, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn stack_from(
        slices: &[Vec<Vec<f32>>],
        layers: Vec<u32>,
        heads: usize,
        grid: (usize, usize),
    ) -> AttentionStack {
        let l = layers.len();
        let text = slices[0].len();
        let patches = slices[0][0].len();
        let values = Array4::from_shape_fn((l, heads, text, patches), |(a, b, c, d)| {
            slices[a * heads + b][c][d]
        });
        AttentionStack::new(values, layers, grid).unwrap()
    }

    #[test]
    fn average_of_identical_slices_is_the_slice() {
        let m = vec![vec![0.25f32, 1.0, 3.0], vec![0.0, 2.0, 0.5]];
        let stack = stack_from(&vec![m.clone(); 6], vec![0, 1, 2], 2, (1, 3));
        let avg = average_attention(&stack, None).unwrap();
        assert_eq!(avg, array![[0.25, 1.0, 3.0], [0.0, 2.0, 0.5]]);
    }

    #[test]
    fn average_of_two_layers() {
        let stack = stack_from(
            &[vec![vec![1.0, 3.0]], vec![vec![3.0, 5.0]]],
            vec![0, 1],
            1,
            (1, 2),
        );
        assert_eq!(average_attention(&stack, None).unwrap(), array![[2.0, 4.0]]);
    }

    #[test]
    fn block_subset_selects_layers() {
        // Blocks 0..7 where only 3, 4, 5 carry 1.0 and the rest 9.0.
        let heads = 2;
        let slices: Vec<_> = (0..8u32)
            .flat_map(|l| {
                let v = if (3..=5).contains(&l) { 1.0 } else { 9.0 };
                std::iter::repeat_n(vec![vec![v; 4]], heads)
            })
            .collect();
        let stack = stack_from(&slices, (0..8).collect(), heads, (2, 2));
        let avg = average_attention(&stack, Some(&[3, 4, 5])).unwrap();
        assert!(avg.iter().all(|&v| v == 1.0));
        assert!(matches!(
            average_attention(&stack, Some(&[])),
            Err(SynthesisError::InvalidArgument(_))
        ));
        assert!(average_attention(&stack, Some(&[11])).is_err());
    }

    #[test]
    fn stack_rejects_bad_values() {
        let bad = Array4::from_elem((1, 1, 1, 2), -1.0f32);
        assert!(AttentionStack::new(bad, vec![0], (1, 2)).is_err());
        let nan = Array4::from_elem((1, 1, 1, 2), f32::NAN);
        assert!(AttentionStack::new(nan, vec![0], (1, 2)).is_err());
        let ok = Array4::from_elem((1, 1, 1, 4), 0.5f32);
        assert!(AttentionStack::new(ok.clone(), vec![0], (1, 3)).is_err());
        assert!(AttentionStack::new(ok, vec![0], (2, 2)).is_ok());
    }

    #[test]
    fn single_token_slice() {
        let avg = array![[0.0, 0.0], [0.0, 0.0], [0.1, 0.9]];
        assert_eq!(
            extract_category_map(&avg, 2..3, (1, 2)).unwrap(),
            array![[0.1, 0.9]]
        );
    }

    #[test]
    fn multi_token_picks_max_mass_row() {
        let avg = array![[9.0, 9.0], [9.0, 9.0], [0.5, 0.5], [1.0, 2.0]];
        assert_eq!(
            extract_category_map(&avg, 2..4, (1, 2)).unwrap(),
            array![[1.0, 2.0]]
        );
        let tie = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(
            extract_category_map(&tie, 0..2, (1, 2)).unwrap(),
            array![[0.0, 1.0]]
        );
        assert!(matches!(
            extract_category_map(&avg, 3..5, (1, 2)),
            Err(SynthesisError::SpanOutOfBounds { .. })
        ));
        assert!(extract_category_map(&avg, 2..2, (1, 2)).is_err());
    }

    #[test]
    fn reshape_is_row_major() {
        let avg = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(
            extract_category_map(&avg, 0..1, (2, 2)).unwrap(),
            array![[1.0, 2.0], [3.0, 4.0]]
        );
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_map(&array![[0.0, 5.0], [10.0, 5.0]]),
            array![[0.0, 0.5], [1.0, 0.5]]
        );
        assert_eq!(
            normalize_map(&array![[3.0, 3.0], [3.0, 3.0]]),
            Array2::<f64>::zeros((2, 2))
        );
        let unit = array![[0.0, 0.3], [1.0, 0.7]];
        assert_eq!(normalize_map(&unit), unit);
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&array![[0.05, 0.2]], 0.1), array![[0u8, 1]]);
        assert_eq!(
            binarize(&Array2::zeros((2, 3)), 0.1),
            Array2::<u8>::zeros((2, 3))
        );
        assert_eq!(binarize(&array![[0.1]], 0.1), array![[1u8]]);
    }

    #[test]
    fn round_robin_split() {
        assert_eq!(round_robin_counts(2, 5), [3, 2]);
        assert_eq!(round_robin_counts(5, 100), [20; 5]);
    }

    #[test]
    fn category_span_lookup() {
        let words = prompt_words("A photorealistic image of many Canada Goose. close-up, backlit");
        let spans: Vec<_> = words
            .iter()
            .enumerate()
            .map(|(i, w)| WordSpan {
                word: w.clone(),
                start: 2 * i,
                end: 2 * i + 2,
            })
            .collect();
        assert_eq!(find_category_span(&spans, "canada goose"), Some(10..14));
        assert_eq!(find_category_span(&spans, "snow goose"), None);
    }
}
