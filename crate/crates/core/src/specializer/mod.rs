//! Prompt tuning of a concept embedding inside a frozen conditional
//! segmenter.
//!
//! The segmenter is a [`SegmenterBackend`]: it encodes an image once into a
//! [`FeatureField`] and decodes `(features, z)` into a per-cell probability
//! map. Only `z` is trained. Positive synthetic images are supervised with
//! their binarized attention masks, negative ones with an empty mask, and the
//! two binary cross-entropies are added ([`concept_loss`]).

mod augment;
mod optim;
mod sharpness;
mod store;
mod toy;
mod tune;

use image::RgbImage;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::grid::resize_nearest;
use crate::synthesis::{Polarity, PseudoPair};

pub use augment::{
    augment, cutmix_quadrant, downscale_pair, AugmentConfig, TrainSample, TrainView,
};
pub use optim::{AdamW, Stepper};
pub use sharpness::{sharpness, try_sharpness};
pub use store::{concept_path, load_concept, training_log_csv, write_concept, ConceptFile};
pub use toy::{ToySegmenter, TOY_CHANNELS};
pub use tune::{initial_embedding, prepare_sample, select_checkpoint, tune, EpochRecord};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SpecializerError {
    #[error("prediction grid {pred:?} and target grid {target:?} cannot be aligned")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no positive pairs to tune on")]
    NoPositives,
    #[error("invalid tuning config: {0}")]
    InvalidConfig(String),
    #[error("segmenter cannot provide gradients with respect to the embedding: {0}")]
    GradientUnavailable(BackendError),
    #[error("non-finite loss at epoch {epoch} (train {train_loss}, lr {lr}, |z| {z_norm})")]
    NonFiniteLoss {
        epoch: usize,
        train_loss: f64,
        lr: f64,
        z_norm: f64,
    },
    #[error("embedding has dimension {0}, expected {dim}", dim = crate::EMBED_DIM)]
    BadDimension(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad concept file {path}: {message}")]
    Artifact { path: String, message: String },
}

/// Encoded image features, `(channels, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField(pub Array3<f64>);

impl FeatureField {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, r, c) = self.0.dim();
        (r, c)
    }

    /// Copies quadrant `q` (0 top-left, 1 top-right, 2 bottom-left,
    /// 3 bottom-right) of `other` into `self`.
    pub fn paste_quadrant(&mut self, other: &FeatureField, q: usize) {
        let (rows, cols) = quadrant_bounds(self.grid(), q);
        let src = other.0.slice(s![.., rows.clone(), cols.clone()]);
        self.0.slice_mut(s![.., rows, cols]).assign(&src);
    }
}

/// Row and column ranges of quadrant `q` on a `(rows, cols)` grid, split at
/// `rows / 2` and `cols / 2`.
pub fn quadrant_bounds(
    (rows, cols): (usize, usize),
    q: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (hr, hc) = (rows / 2, cols / 2);
    match q {
        0 => (0..hr, 0..hc),
        1 => (0..hr, hc..cols),
        2 => (hr..rows, 0..hc),
        3 => (hr..rows, hc..cols),
        _ => panic!("quadrant index {q} out of range"),
    }
}

/// A frozen open-vocabulary segmenter whose text conditioning can be replaced
/// by a free embedding.
pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> &str;

    fn encode_image(&self, image: &RgbImage) -> Result<FeatureField, BackendError>;

    /// Text-encoder embedding of `text`; used to initialize tuning.
    fn text_embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;

    /// Per-cell probabilities in `[0, 1]`.
    fn decode(&self, features: &FeatureField, z: &[f64]) -> Result<Array2<f64>, BackendError>;

    /// Gradient with respect to `z` of `sum(grad_out * decode(features, z))`.
    fn decode_vjp(
        &self,
        _features: &FeatureField,
        _z: &[f64],
        _grad_out: &Array2<f64>,
    ) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::capability(self.name(), "gradients"))
    }

    /// Digest of every frozen parameter. Must not change across tuning.
    fn parameter_checksum(&self) -> String;

    /// Whether `encode_image`/`decode` may run on several threads at once.
    fn concurrent(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    #[default]
    TextEncoder,
    Random,
}

/// A tuned (or freshly initialized) concept embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub category: String,
    pub init: EmbeddingInit,
    pub z: Vec<f64>,
    /// 1-based epoch whose `z` was kept; 0 when untuned.
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl ConceptEmbedding {
    /// An embedding that skips tuning altogether.
    pub fn untuned(
        category: impl Into<String>,
        init: EmbeddingInit,
        z: Vec<f64>,
    ) -> Result<Self, SpecializerError> {
        if z.len() != crate::EMBED_DIM {
            return Err(SpecializerError::BadDimension(z.len()));
        }
        Ok(Self {
            category: category.into(),
            init,
            z,
            selected_epoch: 0,
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub val_fraction: f64,
    /// Threshold applied to attention maps when building targets.
    pub bin_threshold: f64,
    pub sharpness_k: usize,
    /// Fixed perturbation scale; `None` uses `sharpness_rel * |z| / sqrt(512)`.
    pub sharpness_sigma: Option<f64>,
    pub sharpness_rel: f64,
    /// Fraction of epochs (lowest sharpness first) eligible for selection.
    pub select_fraction: f64,
    pub cutmix_prob: f64,
    pub downscale_prob: f64,
    /// Mini-batch size; `None` trains on the full split each step.
    pub batch_size: Option<usize>,
    pub init: EmbeddingInit,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 5e-3,
            weight_decay: 0.01,
            plateau_factor: 0.9,
            plateau_patience: 10,
            val_fraction: 0.2,
            bin_threshold: 0.1,
            sharpness_k: 8,
            sharpness_sigma: None,
            sharpness_rel: 1e-2,
            select_fraction: 0.2,
            cutmix_prob: 0.5,
            downscale_prob: 0.5,
            batch_size: None,
            init: EmbeddingInit::TextEncoder,
            seed: 0,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<(), SpecializerError> {
        let bad = |m: &str| Err(SpecializerError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau_factor must lie in (0, 1]");
        }
        if !(self.bin_threshold > 0.0 && self.bin_threshold < 1.0) {
            return bad("bin_threshold must lie in (0, 1)");
        }
        if self.sharpness_k == 0 {
            return bad("sharpness_k must be at least 1");
        }
        if self.sharpness_sigma.is_some_and(|s| s.is_nan() || s <= 0.0) {
            return bad("sharpness_sigma must be positive");
        }
        if !(self.select_fraction > 0.0 && self.select_fraction <= 1.0) {
            return bad("select_fraction must lie in (0, 1]");
        }
        for (name, p) in [
            ("cutmix_prob", self.cutmix_prob),
            ("downscale_prob", self.downscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SpecializerError::InvalidConfig(format!(
                    "{name} must lie in [0, 1]"
                )));
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

fn align_target(pred: &Array2<f64>, target: &Array2<u8>) -> Result<Array2<u8>, SpecializerError> {
    let (pd, td) = (pred.dim(), target.dim());
    if pd.0 == 0 || pd.1 == 0 || td.0 == 0 || td.1 == 0 {
        return Err(SpecializerError::ShapeMismatch {
            pred: pd,
            target: td,
        });
    }
    Ok(if pd == td {
        target.clone()
    } else {
        resize_nearest(target, pd)
    })
}

/// Mean clamped binary cross-entropy and its gradient with respect to `pred`.
/// The gradient is zero where the clamp is active.
pub(crate) fn bce_with_grad(pred: &Array2<f64>, target: &Array2<u8>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &t| {
            let t = f64::from(t.min(1));
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            if p > BCE_EPS && p < 1.0 - BCE_EPS {
                *g = (pc - t) / (pc * (1.0 - pc)) / n;
            }
        });
    (loss / n, grad)
}

/// Positive-image loss: mean BCE between the prediction and the binary mask,
/// after nearest-neighbour resizing the mask to the prediction grid.
pub fn positive_loss(
    pred: &Array2<f64>,
    target_mask: &Array2<u8>,
) -> Result<f64, SpecializerError> {
    let target = align_target(pred, target_mask)?;
    Ok(bce_with_grad(pred, &target).0)
}

/// Negative-image loss: BCE against an all-zero mask.
pub fn negative_loss(pred: &Array2<f64>) -> f64 {
    bce_with_grad(pred, &Array2::zeros(pred.dim())).0
}

/// Mean positive loss over the positives plus mean negative loss over the
/// negatives. A polarity absent from the batch contributes nothing.
pub fn concept_loss(batch: &[(Array2<f64>, &PseudoPair)]) -> Result<f64, SpecializerError> {
    if batch.is_empty() {
        return Err(SpecializerError::EmptyBatch);
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (pred, pair) in batch {
        let (slot, loss) = match pair.polarity {
            Polarity::Positive => (0, positive_loss(pred, &pair.bin_mask)?),
            Polarity::Negative => (1, negative_loss(pred)),
        };
        sums[slot] += loss;
        counts[slot] += 1;
    }
    Ok((0..2)
        .filter(|&i| counts[i] > 0)
        .map(|i| sums[i] / counts[i] as f64)
        .sum())
}

/// Per-polarity weights that turn a sum of per-item losses into
/// [`concept_loss`].
pub(crate) fn polarity_weights(polarities: impl Iterator<Item = Polarity>) -> [f64; 2] {
    let mut counts = [0usize; 2];
    for p in polarities {
        counts[usize::from(p == Polarity::Negative)] += 1;
    }
    counts.map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
}

/// Concept loss of `views` at `z`, optionally with its gradient.
pub fn views_loss(
    backend: &dyn SegmenterBackend,
    views: &[&TrainView],
    z: &[f64],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), BackendError> {
    let weights = polarity_weights(views.iter().map(|v| v.polarity));
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; z.len()]);
    for view in views {
        let w = weights[usize::from(view.polarity == Polarity::Negative)];
        let pred = backend.decode(&view.features, z)?;
        let target = if pred.dim() == view.target.dim() {
            view.target.clone()
        } else {
            resize_nearest(&view.target, pred.dim())
        };
        let (l, mut g) = bce_with_grad(&pred, &target);
        loss += w * l;
        if let Some(acc) = grad.as_mut() {
            g.mapv_inplace(|v| v * w);
            let gz = backend.decode_vjp(&view.features, z, &g)?;
            for (a, b) in acc.iter_mut().zip(gz) {
                *a += b;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pair(polarity: Polarity, mask: Array2<u8>) -> PseudoPair {
        PseudoPair {
            image: RgbImage::new(1, 1),
            prompt: String::new(),
            seed: 0,
            avg_map: None,
            cat_map: mask.mapv(f64::from),
            bin_mask: mask,
            polarity,
            category: "x".into(),
        }
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let t = array![[1u8, 0], [0, 1]];
        let loss = positive_loss(&t.mapv(f64::from), &t).unwrap();
        assert!(loss <= -(1.0 - BCE_EPS).ln() + 1e-15);
    }

    #[test]
    fn half_prediction_costs_ln2() {
        let pred = Array2::from_elem((3, 2), 0.5);
        for t in [Array2::zeros((3, 2)), Array2::ones((3, 2))] {
            assert!((positive_loss(&pred, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!((negative_loss(&pred) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_values() {
        let pos = positive_loss(&array![[0.9, 0.1]], &array![[1u8, 0]]).unwrap();
        assert!((pos - 0.105_360_515_657_826_3).abs() < 1e-12);
        let neg = negative_loss(&array![[0.2, 0.8]]);
        assert!((neg - 0.916_290_731_874_155).abs() < 1e-12);
        assert!(negative_loss(&Array2::zeros((2, 2))) < 1e-6);
    }

    #[test]
    fn target_is_resized_to_prediction() {
        let pred = Array2::from_elem((4, 4), 0.5);
        let coarse = array![[1u8, 0], [0, 0]];
        let loss = positive_loss(&pred, &coarse).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            positive_loss(&pred, &Array2::zeros((0, 2))),
            Err(SpecializerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concept_loss_combines_polarities() {
        let p = pair(Polarity::Positive, array![[1u8, 0]]);
        let n = pair(Polarity::Negative, array![[0u8, 0]]);
        let pred_p = array![[0.9, 0.1]];
        let pred_n = array![[0.2, 0.8]];
        let a = positive_loss(&pred_p, &p.bin_mask).unwrap();
        let b = negative_loss(&pred_n);
        let only_pos = concept_loss(&[(pred_p.clone(), &p), (pred_p.clone(), &p)]).unwrap();
        assert!((only_pos - a).abs() < 1e-12);
        let both = concept_loss(&[(pred_p, &p), (pred_n, &n)]).unwrap();
        assert!((both - (a + b)).abs() < 1e-12);
        assert!(matches!(
            concept_loss(&[]),
            Err(SpecializerError::EmptyBatch)
        ));
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let pred = array![[0.3, 0.7], [0.55, 0.05]];
        let target = array![[1u8, 0], [1, 0]];
        let (_, grad) = bce_with_grad(&pred, &target);
        let h = 1e-6;
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut up = pred.clone();
            up[idx] += h;
            let mut down = pred.clone();
            down[idx] -= h;
            let fd = (bce_with_grad(&up, &target).0 - bce_with_grad(&down, &target).0) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() < 1e-6,
                "{idx:?}: {fd} vs {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn quadrant_paste() {
        let mut a = FeatureField(Array3::zeros((2, 4, 4)));
        let b = FeatureField(Array3::ones((2, 4, 4)));
        a.paste_quadrant(&b, 3);
        assert_eq!(a.0.sum(), 8.0);
        assert_eq!(a.0[[1, 3, 3]], 1.0);
        assert_eq!(a.0[[1, 1, 3]], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TuningConfig::default().validate().is_ok());
        let bad = TuningConfig {
            val_fraction: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TuningConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
