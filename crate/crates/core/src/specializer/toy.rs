//! A small differentiable segmenter over colour features.
//!
//! Each `cell`×`cell` block of the image is described by [`TOY_CHANNELS`]
//! averaged quadratic colour monomials. A frozen projection `W`
//! (`TOY_CHANNELS` × 512, orthogonal rows scaled by `scale`) maps the concept
//! embedding to per-channel weights, and the decoder emits
//! `sigmoid(sum_c f_c (W z)_c)` per cell. The text encoder knows the shape
//! vocabulary: a class or family name becomes a wide ball in colour space
//! around the mean colour of the classes it names.

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{FeatureField, SegmenterBackend};
use crate::error::BackendError;
use crate::shapes::classes_named;
use crate::util::{fnv1a, sha256_hex, stream};
use crate::EMBED_DIM;

/// `[1, r, g, b, r², g², b², rg, rb, gb]` on centred colours.
pub const TOY_CHANNELS: usize = 10;

const NAME: &str = "toy-segmenter";
/// Colour values are mapped to `(v / 255 - 0.5) * COLOR_GAIN`.
const COLOR_GAIN: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct ToySegmenter {
    projection: Array2<f64>,
    cell: u32,
    scale: f64,
    /// Half-width of the text prior's colour ball beyond the spread of the
    /// named classes.
    prior_radius: f64,
    /// Curvature of the text prior.
    prior_sharpness: f64,
}

impl ToySegmenter {
    pub fn new(seed: u64) -> Self {
        Self::with_cell(seed, 4)
    }

    pub fn with_cell(seed: u64, cell: u32) -> Self {
        assert!(cell > 0);
        let scale = 4.0;
        let mut rng = stream(seed, NAME);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(TOY_CHANNELS);
        while rows.len() < TOY_CHANNELS {
            let mut v: Vec<f64> = (0..EMBED_DIM)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                rows.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().map(|a| a * scale).collect();
        Self {
            projection: Array2::from_shape_vec((TOY_CHANNELS, EMBED_DIM), flat).expect("shape"),
            cell,
            scale,
            prior_radius: 1.6,
            prior_sharpness: 0.5,
        }
    }

    pub fn cell(&self) -> u32 {
        self.cell
    }

    /// Per-channel weights `W z`.
    pub fn channel_weights(&self, z: &[f64]) -> Vec<f64> {
        self.projection
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// An embedding whose channel weights are exactly `v` (the minimum-norm
    /// preimage, since the projection rows are orthogonal).
    pub fn embedding_for(&self, v: &[f64; TOY_CHANNELS]) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        (0..EMBED_DIM)
            .map(|j| {
                (0..TOY_CHANNELS)
                    .map(|c| self.projection[[c, j]] * v[c])
                    .sum::<f64>()
                    / s2
            })
            .collect()
    }

    fn logits(&self, features: &FeatureField, z: &[f64]) -> Result<Array2<f64>, BackendError> {
        if features.channels() != TOY_CHANNELS {
            return Err(BackendError::failed(
                NAME,
                format!(
                    "expected {TOY_CHANNELS} feature channels, got {}",
                    features.channels()
                ),
            ));
        }
        if z.len() != EMBED_DIM {
            return Err(BackendError::failed(
                NAME,
                format!("embedding has dimension {}, expected {EMBED_DIM}", z.len()),
            ));
        }
        let w = self.channel_weights(z);
        let mut out = Array2::zeros(features.grid());
        for (c, wc) in w.iter().enumerate() {
            out.scaled_add(*wc, &features.0.index_axis(ndarray::Axis(0), c));
        }
        Ok(out)
    }

    fn text_prior(&self, text: &str) -> Option<[f64; TOY_CHANNELS]> {
        let classes = classes_named(text);
        if classes.is_empty() {
            return None;
        }
        let centred: Vec<[f64; 3]> = classes.iter().map(|c| c.color.map(centre)).collect();
        let mut mu = [0.0; 3];
        for c in &centred {
            for k in 0..3 {
                mu[k] += c[k] / centred.len() as f64;
            }
        }
        let spread = centred
            .iter()
            .map(|c| (0..3).map(|k| (c[k] - mu[k]).powi(2)).sum::<f64>())
            .fold(0.0, f64::max)
            .sqrt();
        let r = spread + self.prior_radius;
        let b = self.prior_sharpness;
        let mu2: f64 = mu.iter().map(|m| m * m).sum();
        Some([
            b * r * r - b * mu2,
            2.0 * b * mu[0],
            2.0 * b * mu[1],
            2.0 * b * mu[2],
            -b,
            -b,
            -b,
            0.0,
            0.0,
            0.0,
        ])
    }
}

fn centre(v: u8) -> f64 {
    (f64::from(v) / 255.0 - 0.5) * COLOR_GAIN
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SegmenterBackend for ToySegmenter {
    fn name(&self) -> &str {
        NAME
    }

    fn encode_image(&self, image: &RgbImage) -> Result<FeatureField, BackendError> {
        let (w, h) = image.dimensions();
        let (rows, cols) = ((h / self.cell) as usize, (w / self.cell) as usize);
        if rows == 0 || cols == 0 {
            return Err(BackendError::failed(
                NAME,
                format!("image {w}x{h} is smaller than one {0}x{0} cell", self.cell),
            ));
        }
        let mut f = Array3::zeros((TOY_CHANNELS, rows, cols));
        let norm = f64::from(self.cell * self.cell);
        for i in 0..rows {
            for j in 0..cols {
                for dy in 0..self.cell {
                    for dx in 0..self.cell {
                        let x = j as u32 * self.cell + dx;
                        let y = i as u32 * self.cell + dy;
                        let [r, g, b] = image.get_pixel(x, y).0.map(centre);
                        let m = [1.0, r, g, b, r * r, g * g, b * b, r * g, r * b, g * b];
                        for (c, v) in m.iter().enumerate() {
                            f[[c, i, j]] += v / norm;
                        }
                    }
                }
            }
        }
        Ok(FeatureField(f))
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        Ok(match self.text_prior(text) {
            Some(v) => self.embedding_for(&v),
            None => {
                let mut rng = stream(fnv1a(text.as_bytes()), "toy-segmenter/unknown-text");
                let normal = Normal::new(0.0, 0.02).expect("valid");
                (0..EMBED_DIM).map(|_| normal.sample(&mut rng)).collect()
            }
        })
    }

    fn decode(&self, features: &FeatureField, z: &[f64]) -> Result<Array2<f64>, BackendError> {
        Ok(self.logits(features, z)?.mapv(sigmoid))
    }

    fn decode_vjp(
        &self,
        features: &FeatureField,
        z: &[f64],
        grad_out: &Array2<f64>,
    ) -> Result<Vec<f64>, BackendError> {
        let p = self.decode(features, z)?;
        if grad_out.dim() != p.dim() {
            return Err(BackendError::failed(
                NAME,
                "gradient grid does not match output grid",
            ));
        }
        let g_logit = ndarray::Zip::from(&p)
            .and(grad_out)
            .map_collect(|&p, &g| g * p * (1.0 - p));
        let g_w: Vec<f64> = (0..TOY_CHANNELS)
            .map(|c| (&features.0.index_axis(ndarray::Axis(0), c) * &g_logit).sum())
            .collect();
        Ok((0..EMBED_DIM)
            .map(|j| {
                (0..TOY_CHANNELS)
                    .map(|c| self.projection[[c, j]] * g_w[c])
                    .sum()
            })
            .collect())
    }

    fn parameter_checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.projection.len() * 8 + 32);
        for v in &self.projection {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.cell.to_le_bytes());
        for v in [self.scale, self.prior_radius, self.prior_sharpness] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    fn concurrent(&self) -> bool {
        true
    }
}

/// Random `N(0, 0.02^2)` embedding.
pub(crate) fn random_embedding<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.02).expect("valid");
    (0..EMBED_DIM).map(|_| normal.sample(rng)).collect()
}
