//! The tuning loop and checkpoint selection.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Stepper};
use super::sharpness::try_sharpness;
use super::toy::random_embedding;
use super::{
    augment, views_loss, AugmentConfig, ConceptEmbedding, EmbeddingInit, SegmenterBackend,
    SpecializerError, TrainSample, TrainView, TuningConfig,
};
use crate::error::BackendError;
use crate::grid::{downscale_pad, downscale_pad_image, resize_nearest};
use crate::synthesis::{binarize, Polarity, PseudoPair};
use crate::util::stream;
use crate::EMBED_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub sharpness: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Index into `history` of the checkpoint to keep: among the
/// `ceil(fraction * n)` epochs with the lowest sharpness, the one with the
/// lowest validation loss. Ties go to the earlier epoch.
pub fn select_checkpoint(history: &[EpochRecord], fraction: f64) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    let n_keep = ((fraction * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        history[a]
            .sharpness
            .total_cmp(&history[b].sharpness)
            .then(history[a].epoch.cmp(&history[b].epoch))
    });
    order.truncate(n_keep);
    order.into_iter().min_by(|&a, &b| {
        history[a]
            .val_loss
            .total_cmp(&history[b].val_loss)
            .then(history[a].epoch.cmp(&history[b].epoch))
    })
}

/// Extracts features for `pair` (and for its downscaled copy when
/// `with_small`) and builds targets on the decoder grid. Positive targets are
/// the category map binarized at `threshold`; negative targets are empty.
pub fn prepare_sample(
    backend: &dyn SegmenterBackend,
    pair: &PseudoPair,
    threshold: f64,
    with_small: bool,
) -> Result<TrainSample, BackendError> {
    let features = backend.encode_image(&pair.image)?;
    let grid = features.grid();
    let target = match pair.polarity {
        Polarity::Positive => resize_nearest(&binarize(&pair.cat_map, threshold), grid),
        Polarity::Negative => ndarray::Array2::zeros(grid),
    };
    let small = if with_small {
        let small_features = backend.encode_image(&downscale_pad_image(&pair.image))?;
        let small_target = resize_nearest(&downscale_pad(&target, 0), small_features.grid());
        Some(TrainView {
            features: small_features,
            target: small_target,
            polarity: pair.polarity,
        })
    } else {
        None
    };
    Ok(TrainSample {
        full: TrainView {
            features,
            target,
            polarity: pair.polarity,
        },
        small,
    })
}

/// Initial embedding for `category` under `init`.
pub fn initial_embedding(
    backend: &dyn SegmenterBackend,
    category: &str,
    init: EmbeddingInit,
    seed: u64,
) -> Result<Vec<f64>, SpecializerError> {
    let z = match init {
        EmbeddingInit::TextEncoder => backend.text_embed(category)?,
        EmbeddingInit::Random => random_embedding(&mut stream(seed, "tune/init")),
    };
    if z.len() != EMBED_DIM {
        return Err(SpecializerError::BadDimension(z.len()));
    }
    Ok(z)
}

/// Splits indices of each polarity into (train, val), `round(n * fraction)`
/// to validation but always leaving one for training.
fn stratified_split(pairs: &[PseudoPair], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream(seed, "tune/split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for polarity in [Polarity::Positive, Polarity::Negative] {
        let mut idx: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs[i].polarity == polarity)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = if n <= 1 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).min(n - 1)
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn lift(e: BackendError) -> SpecializerError {
    match e {
        BackendError::Capability { .. } => SpecializerError::GradientUnavailable(e),
        other => SpecializerError::Backend(other),
    }
}

/// Tunes a concept embedding for `category` on synthetic pairs.
pub fn tune(
    backend: &dyn SegmenterBackend,
    category: &str,
    pairs: &[PseudoPair],
    cfg: &TuningConfig,
) -> Result<ConceptEmbedding, SpecializerError> {
    cfg.validate()?;
    if !pairs.iter().any(|p| p.polarity == Polarity::Positive) {
        return Err(SpecializerError::NoPositives);
    }
    let mut z = initial_embedding(backend, category, cfg.init, cfg.seed)?;

    let with_small = cfg.downscale_prob > 0.0;
    let samples: Vec<TrainSample> = if backend.concurrent() {
        pairs
            .par_iter()
            .map(|p| prepare_sample(backend, p, cfg.bin_threshold, with_small))
            .collect::<Result<_, _>>()?
    } else {
        pairs
            .iter()
            .map(|p| prepare_sample(backend, p, cfg.bin_threshold, with_small))
            .collect::<Result<_, _>>()?
    };

    let (train_idx, mut val_idx) = stratified_split(pairs, cfg.val_fraction, cfg.seed);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let negatives: Vec<&TrainSample> = train_idx
        .iter()
        .map(|&i| &samples[i])
        .filter(|s| s.full.polarity == Polarity::Negative)
        .collect();
    let train_views: Vec<&TrainView> = train_idx.iter().map(|&i| &samples[i].full).collect();
    let val_views: Vec<&TrainView> = val_idx.iter().map(|&i| &samples[i].full).collect();

    // Fail before the first epoch if the backend has no gradients.
    let probe = &samples[train_idx[0]].full;
    let zero = ndarray::Array2::zeros(backend.decode(&probe.features, &z)?.dim());
    backend
        .decode_vjp(&probe.features, &z, &zero)
        .map_err(lift)?;

    let aug = AugmentConfig {
        downscale_prob: cfg.downscale_prob,
        cutmix_prob: cfg.cutmix_prob,
    };
    let batch_size = cfg
        .batch_size
        .unwrap_or(train_idx.len())
        .min(train_idx.len());
    let mut opt = AdamW::new(EMBED_DIM, cfg.weight_decay);
    let mut rng = stream(cfg.seed, "tune/epochs");
    let mut sharp_rng = stream(cfg.seed, "tune/sharpness");
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let views: Vec<TrainView> = batch
                .iter()
                .map(|&i| augment(&samples[i], &negatives, &aug, &mut rng))
                .collect();
            let refs: Vec<&TrainView> = views.iter().collect();
            let (loss, grad) = views_loss(backend, &refs, &z, true).map_err(lift)?;
            let grad = grad.expect("requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(SpecializerError::NonFiniteLoss {
                    epoch,
                    train_loss: loss,
                    lr,
                    z_norm: norm(&z),
                });
            }
            opt.step(&mut z, &grad, lr);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = views_loss(backend, &val_views, &z, false)?.0;
        let sigma = cfg.sharpness_sigma.unwrap_or_else(|| {
            (cfg.sharpness_rel * norm(&z) / (EMBED_DIM as f64).sqrt()).max(1e-6)
        });
        let sharp = try_sharpness(
            &z,
            |probe| views_loss(backend, &train_views, probe, false).map(|r| r.0),
            cfg.sharpness_k,
            sigma,
            &mut sharp_rng,
        )?;
        if !val_loss.is_finite() {
            return Err(SpecializerError::NonFiniteLoss {
                epoch,
                train_loss,
                lr,
                z_norm: norm(&z),
            });
        }
        tracing::debug!(
            epoch,
            train_loss,
            val_loss,
            sharpness = sharp,
            lr,
            "epoch done"
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            sharpness: sharp,
            lr,
        });
        snapshots.push(z.clone());

        // Reduce-on-plateau with a relative improvement threshold of 1e-4.
        if val_loss < best * (1.0 - 1e-4) {
            best = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                bad_epochs = 0;
            }
        }
    }

    let chosen = select_checkpoint(&history, cfg.select_fraction).expect("at least one epoch");
    Ok(ConceptEmbedding {
        category: category.to_string(),
        init: cfg.init,
        z: snapshots.swap_remove(chosen),
        selected_epoch: chosen + 1,
        history,
    })
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}
