//! Procedural stand-in for a text-to-image generator.
//!
//! Prompts are parsed back into their template slots; the category selects a
//! [`ShapeClass`](crate::shapes::ShapeClass) (or a whole family when a parent
//! name is used), `{COUNT}` sets how many shapes appear, `{VIEW}` their size
//! and `{LIGHT}` the illumination. The emitted attention for the category's
//! tokens is the per-patch occupancy of the named shapes, scaled per head, so
//! pseudo-masks derived from it have an exact analytic reference.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    find_category_span, prompt_words, AttentionStack, Generation, GeneratorBackend,
    GeneratorCapabilities, WordSpan,
};
use crate::error::BackendError;
use crate::shapes::{classes_named, Lighting, Scene, ShapeClass, SHAPE_CLASSES};
use crate::taxonomy::parse_prompt;
use crate::util::{fnv1a, mix, normalize_name, stream};

/// Which blocks carry clean, object-localized attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStyle {
    /// Eight captured blocks; only blocks 3, 4 and 5 localize objects, the
    /// rest are noise.
    #[default]
    Flux,
    /// Six captured blocks, all usable.
    Sdxl,
}

const FLUX_PREFERRED: [u32; 3] = [3, 4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockShapes {
    pub width: u32,
    pub height: u32,
    pub patch: u32,
    pub heads: usize,
    pub style: AttentionStyle,
    /// Base shape radius range in pixels before the view scale is applied.
    pub radius: (f64, f64),
}

impl Default for MockShapes {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            patch: 8,
            heads: 4,
            style: AttentionStyle::Flux,
            radius: (3.5, 5.5),
        }
    }
}

fn view_scale(view: &str) -> f64 {
    match view {
        "high angle" => 0.9,
        "viewed from a distance" => 0.7,
        "close-up" => 1.25,
        "macro shot" => 1.45,
        _ => 1.0,
    }
}

fn lighting(light: &str) -> Lighting {
    let (brightness, tint) = match light {
        "backlit" => (0.8, [1.0, 1.0, 1.0]),
        "soft lighting" => (0.95, [1.0, 1.0, 1.0]),
        "golden hour" => (1.0, [1.08, 1.0, 0.85]),
        "overcast" => (0.9, [0.97, 1.0, 1.05]),
        "sunlight" => (1.1, [1.0, 1.0, 1.0]),
        "dimly lit" => (0.7, [1.0, 1.0, 1.0]),
        _ => (1.0, [1.0, 1.0, 1.0]),
    };
    Lighting { brightness, tint }
}

impl MockShapes {
    fn captured(&self) -> Vec<u32> {
        match self.style {
            AttentionStyle::Flux => (0..8).collect(),
            AttentionStyle::Sdxl => (0..6).collect(),
        }
    }

    fn is_clean(&self, block: u32) -> bool {
        match self.style {
            AttentionStyle::Flux => FLUX_PREFERRED.contains(&block),
            AttentionStyle::Sdxl => true,
        }
    }

    /// Resolves the prompt's category to the shape classes it depicts and the
    /// category string as written in the prompt.
    fn resolve(&self, prompt: &str) -> Result<(String, Vec<&'static ShapeClass>), BackendError> {
        let category = match parse_prompt(prompt) {
            Some(parts) => parts.category,
            None => {
                // Free-form prompt: longest class or family name it mentions.
                let p = normalize_name(prompt);
                SHAPE_CLASSES
                    .iter()
                    .flat_map(|c| [c.name, c.parent])
                    .filter(|n| p.contains(n))
                    .max_by_key(|n| n.len())
                    .map(str::to_string)
                    .ok_or_else(|| {
                        BackendError::failed("mock-shapes", format!("no known shape in {prompt:?}"))
                    })?
            }
        };
        let classes = classes_named(&category);
        if classes.is_empty() {
            return Err(BackendError::failed(
                "mock-shapes",
                format!("unknown category {category:?}"),
            ));
        }
        Ok((category, classes))
    }

    /// The scene `generate` renders for `(prompt, seed)`.
    pub fn scene_for(&self, prompt: &str, seed: u64) -> Result<Scene, BackendError> {
        let (_, classes) = self.resolve(prompt)?;
        let parts = parse_prompt(prompt);
        let mut rng = stream(mix(seed ^ fnv1a(prompt.as_bytes())), "mock-shapes/scene");
        let count = match parts.as_ref().map(|p| p.count) {
            Some("exactly two") => 2,
            Some("a few") => rng.random_range(3..=4),
            Some("many") => rng.random_range(5..=7),
            Some("hundreds of") => rng.random_range(8..=10),
            _ => 4,
        };
        let scale = parts.as_ref().map_or(1.0, |p| view_scale(p.view));
        let mut scene = Scene::empty(self.width, self.height);
        scene.lighting = parts
            .as_ref()
            .map_or_else(Lighting::default, |p| lighting(p.light));
        let radius = (self.radius.0 * scale, self.radius.1 * scale);
        for _ in 0..count {
            let class = classes[rng.random_range(0..classes.len())];
            scene.scatter(&mut rng, class, 1, radius);
        }
        Ok(scene)
    }
}

impl GeneratorBackend for MockShapes {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            name: "mock-shapes".into(),
            image_size: (self.width, self.height),
            steps: 1,
            captured_blocks: self.captured(),
            preferred_blocks: match self.style {
                AttentionStyle::Flux => Some(FLUX_PREFERRED.to_vec()),
                AttentionStyle::Sdxl => None,
            },
            concurrent: true,
        }
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Generation, BackendError> {
        if self.patch == 0
            || !self.width.is_multiple_of(self.patch)
            || !self.height.is_multiple_of(self.patch)
        {
            return Err(BackendError::failed(
                "mock-shapes",
                "image size must be a multiple of the patch size",
            ));
        }
        let (category, classes) = self.resolve(prompt)?;
        let scene = self.scene_for(prompt, seed)?;
        let image = scene.render();

        let grid = (
            (self.height / self.patch) as usize,
            (self.width / self.patch) as usize,
        );
        let mut occupancy = ndarray::Array2::<f64>::zeros(grid);
        for class in &classes {
            occupancy += &scene.patch_occupancy(class.name, self.patch);
        }
        let occupancy: Vec<f64> = occupancy.iter().copied().collect();

        // Token 0 is a start token; each prompt word is one token after it.
        let words = prompt_words(prompt);
        let token_spans: Vec<WordSpan> = words
            .iter()
            .enumerate()
            .map(|(i, w)| WordSpan {
                word: w.clone(),
                start: i + 1,
                end: i + 2,
            })
            .collect();
        let text = words.len() + 1;
        let span = find_category_span(&token_spans, &category)
            .ok_or_else(|| BackendError::failed("mock-shapes", "category tokens not found"))?;
        // The last word of the category is the head noun and attends hardest.
        let head_token = span.end - 1;

        let layers = self.captured();
        let patches = grid.0 * grid.1;
        let mut noise = stream(seed, "mock-shapes/noise");
        let noise_vals: Vec<f32> = (0..layers.len() * self.heads * text * patches)
            .map(|_| noise.random_range(0.0..0.5))
            .collect();
        let values =
            Array4::from_shape_fn((layers.len(), self.heads, text, patches), |(l, h, t, q)| {
                if !self.is_clean(layers[l]) {
                    let idx = ((l * self.heads + h) * text + t) * patches + q;
                    return noise_vals[idx];
                }
                // Heads alternate between 0.75 and 1.25 so that, with an even head
                // count, the mean over heads is exactly the occupancy.
                let scale = if (l + h) % 2 == 0 { 0.75 } else { 1.25 };
                let v = if t == head_token {
                    scale * occupancy[q]
                } else if span.contains(&t) {
                    0.5 * scale * occupancy[q]
                } else if t == 0 {
                    0.3
                } else {
                    0.02 * scale
                };
                v as f32
            });
        let attention = AttentionStack::new(values, layers, grid)
            .map_err(|e| BackendError::failed("mock-shapes", e))?;
        Ok(Generation {
            image,
            attention,
            token_spans,
        })
    }
}
