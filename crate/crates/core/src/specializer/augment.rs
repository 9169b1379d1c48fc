//! Training-time augmentation.
//!
//! Downscaling works on images (and is therefore applied before feature
//! extraction, see [`TrainSample`]); CutMix works on extracted features.

use ndarray::Array2;
use rand::Rng;

use super::{quadrant_bounds, FeatureField};
use crate::grid::{downscale_pad, downscale_pad_image};
use crate::synthesis::{Polarity, PseudoPair};

/// Features plus the target on the decoder's output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub features: FeatureField,
    pub target: Array2<u8>,
    pub polarity: Polarity,
}

/// A training pair with features pre-extracted for the original image and,
/// when downscaling is enabled, for its 50%-downscaled-and-padded copy.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub full: TrainView,
    pub small: Option<TrainView>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub downscale_prob: f64,
    pub cutmix_prob: f64,
}

/// Image-level downscale augmentation: the image is halved and zero-padded
/// back to size, and every map of the pair goes through the same transform.
pub fn downscale_pair(pair: &PseudoPair) -> PseudoPair {
    PseudoPair {
        image: downscale_pad_image(&pair.image),
        prompt: pair.prompt.clone(),
        seed: pair.seed,
        avg_map: None,
        cat_map: downscale_pad(&pair.cat_map, 0.0),
        bin_mask: downscale_pad(&pair.bin_mask, 0),
        polarity: pair.polarity,
        category: pair.category.clone(),
    }
}

/// Replaces quadrant `q` of a positive view with the same quadrant of a
/// negative one. The pasted region's target becomes zero; the rest keeps the
/// positive mask. Views with mismatched feature grids are returned unchanged.
pub fn cutmix_quadrant(positive: &TrainView, negative: &TrainView, q: usize) -> TrainView {
    let mut out = positive.clone();
    if positive.features.0.dim() != negative.features.0.dim() {
        return out;
    }
    out.features.paste_quadrant(&negative.features, q);
    let (rows, cols) = quadrant_bounds(out.target.dim(), q);
    out.target.slice_mut(ndarray::s![rows, cols]).fill(0);
    out
}

/// Draws one augmented view of `sample`. `negatives` are CutMix partners;
/// only positive samples are mixed.
pub fn augment<R: Rng + ?Sized>(
    sample: &TrainSample,
    negatives: &[&TrainSample],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> TrainView {
    let downscale = rng.random::<f64>() < cfg.downscale_prob;
    let base = match (&sample.small, downscale) {
        (Some(small), true) => small,
        _ => &sample.full,
    };
    if base.polarity == Polarity::Positive && !negatives.is_empty() {
        let mix = rng.random::<f64>() < cfg.cutmix_prob;
        if mix {
            let q = rng.random_range(0..4);
            let partner = negatives[rng.random_range(0..negatives.len())];
            return cutmix_quadrant(base, &partner.full, q);
        }
    }
    base.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(polarity: Polarity, fill: f64, target: Array2<u8>) -> TrainView {
        TrainView {
            features: FeatureField(Array3::from_elem((2, 4, 4), fill)),
            target,
            polarity,
        }
    }

    #[test]
    fn downscale_moves_blob_with_its_mask() {
        let mut image = RgbImage::new(16, 16);
        let mut mask = Array2::<u8>::zeros((16, 16));
        for y in 6..10 {
            for x in 6..10 {
                image.put_pixel(x, y, Rgb([200, 100, 0]));
                mask[[y as usize, x as usize]] = 1;
            }
        }
        let pair = PseudoPair {
            image,
            prompt: String::new(),
            seed: 0,
            avg_map: None,
            cat_map: mask.mapv(f64::from),
            bin_mask: mask,
            polarity: Polarity::Positive,
            category: "blob".into(),
        };
        let small = downscale_pair(&pair);
        for y in 0..16u32 {
            for x in 0..16u32 {
                let lit = small.image.get_pixel(x, y)[0] > 0;
                let in_mask = small.bin_mask[[y as usize, x as usize]] == 1;
                assert_eq!(lit, in_mask, "pixel ({x},{y})");
                assert_eq!(in_mask, (3..5).contains(&x) && (3..5).contains(&y));
            }
        }
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let pos = view(Polarity::Positive, 1.0, Array2::ones((4, 4)));
        let sample = TrainSample {
            full: pos.clone(),
            small: Some(view(Polarity::Positive, 9.0, Array2::zeros((4, 4)))),
        };
        let neg = TrainSample {
            full: view(Polarity::Negative, 0.0, Array2::zeros((4, 4))),
            small: None,
        };
        let cfg = AugmentConfig {
            downscale_prob: 0.0,
            cutmix_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(augment(&sample, &[&neg], &cfg, &mut rng), pos);
        }
    }

    #[test]
    fn cutmix_zeroes_swapped_quadrant_target() {
        let mut target = Array2::<u8>::zeros((4, 4));
        target[[0, 0]] = 1;
        target[[1, 3]] = 1;
        target[[3, 3]] = 1;
        let pos = view(Polarity::Positive, 1.0, target.clone());
        let neg = view(Polarity::Negative, 0.0, Array2::zeros((4, 4)));
        for q in 0..4 {
            let mixed = cutmix_quadrant(&pos, &neg, q);
            let (rows, cols) = quadrant_bounds((4, 4), q);
            let removed: u32 = target
                .slice(ndarray::s![rows, cols])
                .iter()
                .map(|&v| u32::from(v))
                .sum();
            let total: u32 = mixed.target.iter().map(|&v| u32::from(v)).sum();
            assert_eq!(total, 3 - removed);
            assert_eq!(mixed.features.0.sum(), 2.0 * 12.0);
            assert_eq!(mixed.polarity, Polarity::Positive);
        }
    }

    #[test]
    fn always_mixing_positive_changes_it() {
        let sample = TrainSample {
            full: view(Polarity::Positive, 1.0, Array2::ones((4, 4))),
            small: None,
        };
        let neg = TrainSample {
            full: view(Polarity::Negative, 0.0, Array2::zeros((4, 4))),
            small: None,
        };
        let cfg = AugmentConfig {
            downscale_prob: 0.0,
            cutmix_prob: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&sample, &[&neg], &cfg, &mut rng);
        assert_eq!(out.target.iter().filter(|&&v| v == 1).count(), 12);
        // Negatives are never mixed.
        let out = augment(&neg, &[&neg], &cfg, &mut rng);
        assert_eq!(out, neg.full);
    }
}
