//! Behaviour of the tuning loop on the toy segmenter.

mod common;

use finecount::error::BackendError;
use finecount::specializer::{
    prepare_sample, select_checkpoint, tune, views_loss, EmbeddingInit, EpochRecord, FeatureField,
    SegmenterBackend, SpecializerError, ToySegmenter, TuningConfig,
};
use finecount::synthesis::{Polarity, PseudoPair};
use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DISKS: [&str; 3] = ["orange disk", "yellow disk", "pink disk"];

fn red_disk_pairs(n: usize) -> Vec<PseudoPair> {
    common::shape_pairs("red disk", &DISKS, n, 3)
}

/// Concept loss of `z` over every pair, unaugmented.
fn set_loss(seg: &ToySegmenter, pairs: &[PseudoPair], z: &[f64]) -> f64 {
    let samples: Vec<_> = pairs
        .iter()
        .map(|p| prepare_sample(seg, p, 0.1, false).unwrap())
        .collect();
    let views: Vec<_> = samples.iter().map(|s| &s.full).collect();
    views_loss(seg, &views, z, false).unwrap().0
}

#[test]
fn tuning_halves_the_loss_from_a_random_start() {
    let seg = ToySegmenter::new(1);
    let pairs = red_disk_pairs(20);
    let cfg = TuningConfig {
        init: EmbeddingInit::Random,
        ..Default::default()
    };
    let concept = tune(&seg, "red disk", &pairs, &cfg).unwrap();
    let start =
        finecount::specializer::initial_embedding(&seg, "red disk", cfg.init, cfg.seed).unwrap();
    let (before, after) = (
        set_loss(&seg, &pairs, &start),
        set_loss(&seg, &pairs, &concept.z),
    );
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
    let first = concept.history.first().unwrap().val_loss;
    let last = concept.history.last().unwrap().val_loss;
    assert!(last < first, "val loss {first} -> {last}");
}

#[test]
fn one_epoch_selects_that_epoch() {
    let seg = ToySegmenter::new(1);
    let cfg = TuningConfig {
        epochs: 1,
        ..Default::default()
    };
    let concept = tune(&seg, "red disk", &red_disk_pairs(6), &cfg).unwrap();
    assert_eq!(concept.selected_epoch, 1);
    assert_eq!(concept.history.len(), 1);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let seg = ToySegmenter::new(2);
    let pairs = red_disk_pairs(8);
    let cfg = TuningConfig {
        epochs: 12,
        ..Default::default()
    };
    let a = tune(&seg, "red disk", &pairs, &cfg).unwrap();
    let b = tune(&seg, "red disk", &pairs, &cfg).unwrap();
    assert_eq!(a, b);
    let c = tune(&seg, "red disk", &pairs, &TuningConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.z, c.z);
}

#[test]
fn random_and_text_starts_follow_different_paths() {
    let seg = ToySegmenter::new(2);
    let pairs = red_disk_pairs(8);
    let cfg = TuningConfig {
        epochs: 5,
        ..Default::default()
    };
    let text = tune(&seg, "red disk", &pairs, &cfg).unwrap();
    let random = tune(
        &seg,
        "red disk",
        &pairs,
        &TuningConfig {
            init: EmbeddingInit::Random,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(text.z, random.z);
    assert_ne!(text.history[0].train_loss, random.history[0].train_loss);
}

#[test]
fn full_batch_loss_falls_every_epoch_without_augmentation() {
    let seg = ToySegmenter::new(3);
    let pairs = red_disk_pairs(10);
    let cfg = TuningConfig {
        epochs: 15,
        lr: 1e-4,
        cutmix_prob: 0.0,
        downscale_prob: 0.0,
        init: EmbeddingInit::Random,
        ..Default::default()
    };
    let concept = tune(&seg, "red disk", &pairs, &cfg).unwrap();
    for w in concept.history.windows(2) {
        assert!(w[1].train_loss < w[0].train_loss, "{:?}", concept.history);
    }
}

#[test]
fn selection_ignores_record_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let history: Vec<EpochRecord> = (1..=30)
        .map(|epoch| EpochRecord {
            epoch,
            train_loss: 0.0,
            val_loss: ((epoch * 7919) % 31) as f64 / 31.0,
            sharpness: ((epoch * 104729) % 37) as f64 / 37.0,
            lr: 5e-3,
        })
        .collect();
    let pick = |h: &[EpochRecord]| h[select_checkpoint(h, 0.2).unwrap()].epoch;
    let expected = pick(&history);
    for _ in 0..20 {
        let mut shuffled = history.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(pick(&shuffled), expected);
    }
}

#[test]
fn tuning_without_positives_fails() {
    let seg = ToySegmenter::new(0);
    let negatives: Vec<_> = red_disk_pairs(4)
        .into_iter()
        .filter(|p| p.polarity == Polarity::Negative)
        .collect();
    assert!(matches!(
        tune(&seg, "red disk", &negatives, &TuningConfig::default()),
        Err(SpecializerError::NoPositives)
    ));
}

/// Delegates to the toy segmenter but hides its gradient, or corrupts its
/// output.
struct Crippled {
    inner: ToySegmenter,
    nan: bool,
}

impl SegmenterBackend for Crippled {
    fn name(&self) -> &str {
        "crippled"
    }
    fn encode_image(&self, image: &RgbImage) -> Result<FeatureField, BackendError> {
        self.inner.encode_image(image)
    }
    fn text_embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.inner.text_embed(text)
    }
    fn decode(&self, features: &FeatureField, z: &[f64]) -> Result<Array2<f64>, BackendError> {
        let out = self.inner.decode(features, z)?;
        Ok(if self.nan {
            out.mapv(|_| f64::NAN)
        } else {
            out
        })
    }
    fn decode_vjp(
        &self,
        f: &FeatureField,
        z: &[f64],
        g: &Array2<f64>,
    ) -> Result<Vec<f64>, BackendError> {
        if self.nan {
            self.inner.decode_vjp(f, z, g)
        } else {
            Err(BackendError::capability(self.name(), "gradients"))
        }
    }
    fn parameter_checksum(&self) -> String {
        self.inner.parameter_checksum()
    }
}

#[test]
fn backend_failures_surface_as_typed_errors() {
    let pairs = red_disk_pairs(4);
    let no_grad = Crippled {
        inner: ToySegmenter::new(0),
        nan: false,
    };
    assert!(matches!(
        tune(&no_grad, "red disk", &pairs, &TuningConfig::default()),
        Err(SpecializerError::GradientUnavailable(_))
    ));
    let nan = Crippled {
        inner: ToySegmenter::new(0),
        nan: true,
    };
    match tune(&nan, "red disk", &pairs, &TuningConfig::default()) {
        Err(SpecializerError::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn bad_configs_are_rejected_before_work() {
    let seg = ToySegmenter::new(0);
    let pairs = red_disk_pairs(2);
    for cfg in [
        TuningConfig {
            epochs: 0,
            ..Default::default()
        },
        TuningConfig {
            select_fraction: 0.0,
            ..Default::default()
        },
        TuningConfig {
            sharpness_sigma: Some(-1.0),
            ..Default::default()
        },
        TuningConfig {
            val_fraction: 1.0,
            ..Default::default()
        },
    ] {
        assert!(
            matches!(
                tune(&seg, "red disk", &pairs, &cfg),
                Err(SpecializerError::InvalidConfig(_))
            ),
            "{cfg:?}"
        );
    }
}

#[test]
fn single_pair_trains_without_a_validation_split() {
    // Too little data to split: validation falls back to the training set.
    let seg = ToySegmenter::new(0);
    let pair = PseudoPair {
        image: RgbImage::from_pixel(32, 32, image::Rgb([215, 45, 45])),
        prompt: "red disk".into(),
        seed: 0,
        avg_map: None,
        cat_map: Array2::ones((8, 8)),
        bin_mask: Array2::ones((8, 8)),
        polarity: Polarity::Positive,
        category: "red disk".into(),
    };
    let concept = tune(
        &seg,
        "red disk",
        &[pair],
        &TuningConfig {
            epochs: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(concept.history.len(), 3);
}
