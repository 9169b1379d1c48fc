//! End-to-end experiment on procedural shape scenes.
//!
//! Every shape class is a subcategory; scenes mix two to four classes of one
//! family, and a class-agnostic counter prompted with the family name counts
//! all of them. One concept is tuned per class on synthetic data from
//! [`MockShapes`], and each class is then counted by specializing the
//! counter's output with that concept's mask. Ground truth comes from the
//! scene geometry.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::{
    count_fine_grained, count_raw, CountKind, CounterBackend, CountingError, ToyCounter,
};
use crate::evaluation::{summarize, EvalError, EvalRecord, MetricOptions, MetricSummary};
use crate::shapes::{Lighting, Scene, SHAPE_CLASSES};
use crate::specializer::{
    initial_embedding, tune, ConceptEmbedding, SegmenterBackend, SpecializerError, ToySegmenter,
    TuningConfig,
};
use crate::synthesis::{synthesize_dataset, MockShapes, SynthesisError, SynthesisOptions};
use crate::taxonomy::{expand_prompts, CategorySpec, NegativeSource, TaxonomyError};
use crate::util::stream;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Tuning(#[from] SpecializerError),
    #[error(transparent)]
    Counting(#[from] CountingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// How negatives are chosen for each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyNegatives {
    /// The other classes of the same family.
    Siblings,
    /// The family name.
    Parent,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySetup {
    /// Positive and negative synthetic pairs per class; 0 skips tuning and
    /// uses the text-initialized embedding.
    pub n_pos: usize,
    pub n_neg: usize,
    pub negatives: ToyNegatives,
    pub n_scenes: usize,
    pub scene_size: u32,
    pub seed: u64,
    pub counter: CountKind,
    pub point_tau: f64,
    pub tuning: TuningConfig,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            n_pos: 20,
            n_neg: 20,
            negatives: ToyNegatives::Siblings,
            n_scenes: 50,
            scene_size: 96,
            seed: 0,
            counter: CountKind::Points,
            point_tau: 0.5,
            tuning: TuningConfig::default(),
        }
    }
}

/// Test scenes: each picks a family, two to four of its classes (at most the
/// family size) and one to five instances of each.
pub fn test_scenes(n: usize, size: u32, seed: u64) -> Vec<Scene> {
    let mut rng = stream(seed, "experiment/scenes");
    let families = ["disk", "square", "triangle"];
    (0..n)
        .map(|_| {
            let family = *families.choose(&mut rng).expect("non-empty");
            let members: Vec<_> = SHAPE_CLASSES
                .iter()
                .filter(|c| c.parent == family)
                .collect();
            let k = rng.random_range(2..=4usize.min(members.len()));
            let chosen: Vec<_> = members.choose_multiple(&mut rng, k).copied().collect();
            let mut scene = Scene::empty(size, size);
            scene.lighting = Lighting {
                brightness: rng.random_range(0.75..1.1),
                tint: [1.0; 3],
            };
            for class in chosen {
                let n = rng.random_range(1..=5);
                scene.scatter(&mut rng, class, n, (5.0, 7.0));
            }
            scene
        })
        .collect()
}

fn spec_for(
    class: &str,
    parent: &str,
    negatives: ToyNegatives,
) -> Result<CategorySpec, TaxonomyError> {
    let siblings: Vec<String> = SHAPE_CLASSES
        .iter()
        .filter(|c| c.parent == parent && c.name != class)
        .map(|c| c.name.to_string())
        .collect();
    let (negs, source) = match negatives {
        ToyNegatives::Siblings => (siblings, NegativeSource::Static),
        ToyNegatives::Parent => (Vec::new(), NegativeSource::FineVsBroad),
        ToyNegatives::None => (Vec::new(), NegativeSource::None),
    };
    CategorySpec::new(class, Some(parent.to_string()), negs, source)
}

/// Tunes one concept per shape class.
pub fn train_concepts(
    setup: &ToySetup,
    segmenter: &ToySegmenter,
) -> Result<BTreeMap<String, ConceptEmbedding>, ExperimentError> {
    let generator = MockShapes::default();
    let run =
        |class: &crate::shapes::ShapeClass| -> Result<(String, ConceptEmbedding), ExperimentError> {
            let spec = spec_for(class.name, class.parent, setup.negatives)?;
            let mut tuning = setup.tuning.clone();
            tuning.seed = setup.seed;
            if setup.n_pos == 0 {
                let z = initial_embedding(segmenter, &spec.name, tuning.init, tuning.seed)?;
                return Ok((
                    spec.name.clone(),
                    ConceptEmbedding::untuned(&spec.name, tuning.init, z)?,
                ));
            }
            let bundle = expand_prompts(&spec, setup.n_pos.max(setup.n_neg), setup.seed)?;
            let opts = SynthesisOptions {
                n_pos: setup.n_pos,
                n_neg_total: setup.n_neg,
                seed: setup.seed,
                ..Default::default()
            };
            let data = synthesize_dataset(&spec, &bundle, &generator, &opts)?;
            let concept = tune(segmenter, &spec.name, &data.pairs, &tuning)?;
            Ok((spec.name.clone(), concept))
        };
    SHAPE_CLASSES.par_iter().map(run).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    pub baseline: MetricSummary,
    pub specialized: MetricSummary,
    pub baseline_records: Vec<EvalRecord>,
    pub specialized_records: Vec<EvalRecord>,
}

/// Counts every class present in every scene, once with the broad-prompt
/// counter alone and once specialized.
pub fn evaluate(
    scenes: &[Scene],
    concepts: &BTreeMap<String, ConceptEmbedding>,
    segmenter: &dyn SegmenterBackend,
    counter: &dyn CounterBackend,
    point_tau: f64,
) -> Result<ToyOutcome, ExperimentError> {
    let mut baseline_records = Vec::new();
    let mut specialized_records = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image = scene.render();
        let mut present: Vec<&str> = scene.shapes.iter().map(|s| s.class.as_str()).collect();
        present.sort_unstable();
        present.dedup();
        for class in present {
            let parent = SHAPE_CLASSES
                .iter()
                .find(|c| c.name == class)
                .map_or(class, |c| c.parent);
            let y = scene.count_of(class) as f64;
            let raw = count_raw(counter, &image, parent)?;
            let rec = |y_hat| EvalRecord {
                image_id: format!("scene_{i:03}"),
                subcategory: class.to_string(),
                parent: parent.to_string(),
                y,
                y_hat,
            };
            baseline_records.push(rec(raw));
            let Some(concept) = concepts.get(class) else {
                continue;
            };
            let fine =
                count_fine_grained(segmenter, counter, &image, parent, &concept.z, point_tau)?;
            specialized_records.push(rec(fine.count()));
        }
    }
    let opts = MetricOptions::default();
    Ok(ToyOutcome {
        baseline: summarize(&baseline_records, &opts)?,
        specialized: summarize(&specialized_records, &opts)?,
        baseline_records,
        specialized_records,
    })
}

/// Synthesizes, tunes and evaluates according to `setup`.
pub fn run(setup: &ToySetup) -> Result<ToyOutcome, ExperimentError> {
    let segmenter = ToySegmenter::new(setup.seed);
    let concepts = train_concepts(setup, &segmenter)?;
    let scenes = test_scenes(setup.n_scenes, setup.scene_size, setup.seed);
    evaluate(
        &scenes,
        &concepts,
        &segmenter,
        &ToyCounter::new(setup.counter),
        setup.point_tau,
    )
}

/// Writes scenes in the annotated-dataset layout read by
/// [`load_dataset`](crate::evaluation::load_dataset): one dot per shape at
/// its centre, the scene's family as parent.
pub fn write_dataset(root: &std::path::Path, scenes: &[Scene]) -> std::io::Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;
    let mut annotations = serde_json::Map::new();
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("scene{i:04}");
        scene
            .render()
            .save(images.join(format!("{id}.png")))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let parent = scene
            .shapes
            .first()
            .and_then(|s| crate::shapes::shape_class(&s.class))
            .map_or("shape", |c| c.parent);
        let points: Vec<_> = scene
            .shapes
            .iter()
            .map(|s| serde_json::json!({ "x": s.cx, "y": s.cy, "sub": s.class }))
            .collect();
        annotations.insert(
            id,
            serde_json::json!({ "parent": parent, "points": points }),
        );
    }
    let text = serde_json::to_string_pretty(&annotations).expect("json") + "\n";
    std::fs::write(root.join("annotations.json"), text)
}
