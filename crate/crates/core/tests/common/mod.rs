//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use finecount::synthesis::{synthesize_dataset, MockShapes, PseudoPair, SynthesisOptions};
use finecount::taxonomy::{expand_prompts, CategorySpec, NegativeSource};

/// `|a - b| <= tol * max(|a|, |b|)`, with an absolute floor for values near
/// zero.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= tol * scale.max(1e-12)
}

/// Mock-generator pairs for `class` with its siblings as static negatives.
pub fn shape_pairs(class: &str, siblings: &[&str], n: usize, seed: u64) -> Vec<PseudoPair> {
    let parent = finecount::shapes::shape_class(class).map(|c| c.parent.to_string());
    let spec = CategorySpec::new(
        class,
        parent,
        siblings.iter().map(|s| s.to_string()).collect(),
        NegativeSource::Static,
    )
    .unwrap();
    let bundle = expand_prompts(&spec, n, seed).unwrap();
    let opts = SynthesisOptions {
        n_pos: n,
        n_neg_total: n,
        seed,
        ..Default::default()
    };
    synthesize_dataset(&spec, &bundle, &MockShapes::default(), &opts)
        .unwrap()
        .pairs
}
