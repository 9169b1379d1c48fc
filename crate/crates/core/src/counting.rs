//! Counting with a class-agnostic counter and restricting its output to a
//! fine-grained concept.
//!
//! A counter returns either a density map or a set of points
//! ([`CountField`]). The tuned concept is decoded into a mask, the mask is
//! upsampled to the counter's grid, and the counter output is multiplied by
//! it ([`specialize`]). For points the mask is read at each point and the
//! point kept when the value reaches `point_tau`.

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::grid::resize_bilinear;
use crate::specializer::SegmenterBackend;

#[derive(Debug, Error)]
pub enum CountingError {
    #[error("mask grid {mask:?} does not match the count grid {field:?}")]
    DimMismatch {
        mask: (usize, usize),
        field: (usize, usize),
    },
    #[error("point threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("malformed counter output: {0}")]
    Malformed(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BackendError,
    },
}

impl CountingError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Stage { source, .. } if source.is_retriable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encode,
    Decode,
    Count,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Encode => "image encoding",
            Stage::Decode => "mask decoding",
            Stage::Count => "counting",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountKind {
    Density,
    Points,
}

/// Raw or specialized counter output.
#[derive(Debug, Clone, PartialEq)]
pub struct CountField {
    pub kind: CountKind,
    /// Non-negative per-cell density (`Density` only).
    pub density: Option<Array2<f64>>,
    /// `(x, y)` pixel coordinates (`Points` only).
    pub points: Vec<(f64, f64)>,
    /// `(width, height)` of the counted image.
    pub image_size: (u32, u32),
    pub source: String,
    pub prompt_used: String,
}

impl CountField {
    pub fn density(
        density: Array2<f64>,
        image_size: (u32, u32),
        source: &str,
        prompt: &str,
    ) -> Self {
        Self {
            kind: CountKind::Density,
            density: Some(density),
            points: Vec::new(),
            image_size,
            source: source.into(),
            prompt_used: prompt.into(),
        }
    }

    pub fn points(
        points: Vec<(f64, f64)>,
        image_size: (u32, u32),
        source: &str,
        prompt: &str,
    ) -> Self {
        Self {
            kind: CountKind::Points,
            density: None,
            points,
            image_size,
            source: source.into(),
            prompt_used: prompt.into(),
        }
    }

    /// The grid a mask must have to be applied to this field: the density
    /// grid, or the image grid `(height, width)` for points.
    pub fn grid(&self) -> (usize, usize) {
        match (&self.density, self.kind) {
            (Some(d), CountKind::Density) => d.dim(),
            _ => (self.image_size.1 as usize, self.image_size.0 as usize),
        }
    }

    fn check(&self) -> Result<(), CountingError> {
        match self.kind {
            CountKind::Density => {
                let d = self.density.as_ref().ok_or_else(|| {
                    CountingError::Malformed("density field without a map".into())
                })?;
                if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(CountingError::Malformed(
                        "density must be finite and non-negative".into(),
                    ));
                }
            }
            CountKind::Points => {
                if self
                    .points
                    .iter()
                    .any(|(x, y)| !x.is_finite() || !y.is_finite())
                {
                    return Err(CountingError::Malformed("non-finite point".into()));
                }
            }
        }
        Ok(())
    }
}

/// The scalar count: density mass or number of points.
pub fn extract_count(field: &CountField) -> f64 {
    match field.kind {
        CountKind::Density => field.density.as_ref().map_or(0.0, |d| d.sum()),
        CountKind::Points => field.points.len() as f64,
    }
}

pub trait CounterBackend: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, image: &RgbImage, prompt: &str) -> Result<CountField, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Specialized {
    pub field: CountField,
    pub retained: Vec<(f64, f64)>,
    pub discarded: Vec<(f64, f64)>,
}

/// Mask value under point `(x, y)`: the pixel containing it, clamped to the
/// grid.
pub fn mask_at(mask: &Array2<f64>, (x, y): (f64, f64)) -> f64 {
    let (rows, cols) = mask.dim();
    let r = (y.floor().max(0.0) as usize).min(rows.saturating_sub(1));
    let c = (x.floor().max(0.0) as usize).min(cols.saturating_sub(1));
    mask[[r, c]]
}

/// Restricts `raw` to `mask`, which must already be on [`CountField::grid`].
/// Densities are multiplied elementwise; points are kept iff the mask under
/// them is at least `point_tau`.
pub fn specialize(
    raw: &CountField,
    mask: &Array2<f64>,
    point_tau: f64,
) -> Result<Specialized, CountingError> {
    if !(0.0..=1.0).contains(&point_tau) {
        return Err(CountingError::BadThreshold(point_tau));
    }
    raw.check()?;
    if mask.dim() != raw.grid() {
        return Err(CountingError::DimMismatch {
            mask: mask.dim(),
            field: raw.grid(),
        });
    }
    let mut field = raw.clone();
    let (mut retained, mut discarded) = (Vec::new(), Vec::new());
    match raw.kind {
        CountKind::Density => {
            field.density = raw.density.as_ref().map(|d| d * mask);
        }
        CountKind::Points => {
            for &p in &raw.points {
                if mask_at(mask, p) >= point_tau {
                    retained.push(p);
                } else {
                    discarded.push(p);
                }
            }
            field.points = retained.clone();
        }
    }
    Ok(Specialized {
        field,
        retained,
        discarded,
    })
}

/// Decodes the concept mask for `image` on the segmenter's own grid.
pub fn decode_mask(
    segmenter: &dyn SegmenterBackend,
    image: &RgbImage,
    z: &[f64],
) -> Result<Array2<f64>, CountingError> {
    let features = segmenter
        .encode_image(image)
        .map_err(|source| CountingError::Stage {
            stage: Stage::Encode,
            source,
        })?;
    segmenter
        .decode(&features, z)
        .map_err(|source| CountingError::Stage {
            stage: Stage::Decode,
            source,
        })
}

/// The concept mask bilinearly resized to the image's `(height, width)`.
pub fn predict_mask(
    segmenter: &dyn SegmenterBackend,
    image: &RgbImage,
    z: &[f64],
) -> Result<Array2<f64>, CountingError> {
    let mask = decode_mask(segmenter, image, z)?;
    let (w, h) = image.dimensions();
    Ok(resize_bilinear(&mask, (h as usize, w as usize)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kind: CountKind,
    pub raw_count: f64,
    pub specialized_count: f64,
    pub retained: Vec<(f64, f64)>,
    pub discarded: Vec<(f64, f64)>,
    /// `specialized_count / raw_count`; absent when nothing was counted.
    pub mask_mass_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FineCount {
    pub raw: CountField,
    pub specialized: Specialized,
    /// Mask on the segmenter grid.
    pub mask: Array2<f64>,
    /// Mask upsampled to the count grid.
    pub mask_on_grid: Array2<f64>,
}

impl FineCount {
    pub fn count(&self) -> f64 {
        extract_count(&self.specialized.field)
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let raw_count = extract_count(&self.raw);
        let specialized_count = self.count();
        Diagnostics {
            kind: self.raw.kind,
            raw_count,
            specialized_count,
            retained: self.specialized.retained.clone(),
            discarded: self.specialized.discarded.clone(),
            mask_mass_ratio: (raw_count > 0.0).then(|| specialized_count / raw_count),
        }
    }
}

/// Counts `image` with the counter prompted by `prompt`, then restricts the
/// result to the concept `z`.
pub fn count_fine_grained(
    segmenter: &dyn SegmenterBackend,
    counter: &dyn CounterBackend,
    image: &RgbImage,
    prompt: &str,
    z: &[f64],
    point_tau: f64,
) -> Result<FineCount, CountingError> {
    let mask = decode_mask(segmenter, image, z)?;
    let raw = counter
        .count(image, prompt)
        .map_err(|source| CountingError::Stage {
            stage: Stage::Count,
            source,
        })?;
    let mask_on_grid = resize_bilinear(&mask, raw.grid());
    let specialized = specialize(&raw, &mask_on_grid, point_tau)?;
    Ok(FineCount {
        raw,
        specialized,
        mask,
        mask_on_grid,
    })
}

/// Counts with the counter alone.
pub fn count_raw(
    counter: &dyn CounterBackend,
    image: &RgbImage,
    prompt: &str,
) -> Result<f64, CountingError> {
    let raw = counter
        .count(image, prompt)
        .map_err(|source| CountingError::Stage {
            stage: Stage::Count,
            source,
        })?;
    raw.check()?;
    Ok(extract_count(&raw))
}

/// Debug rendering: the mask tinted yellow over the image, retained points
/// as green crosses and discarded ones as red crosses.
pub fn overlay(image: &RgbImage, result: &FineCount) -> RgbImage {
    let (w, h) = image.dimensions();
    let mask = resize_bilinear(&result.mask, (h as usize, w as usize));
    let mut out = RgbImage::from_fn(w, h, |x, y| {
        let m = 0.45 * mask[[y as usize, x as usize]].clamp(0.0, 1.0);
        let p = image.get_pixel(x, y).0;
        let yellow = [255.0, 220.0, 0.0];
        Rgb(std::array::from_fn(|k| {
            (f64::from(p[k]) * (1.0 - m) + yellow[k] * m).round() as u8
        }))
    });
    let mut cross = |(x, y): (f64, f64), color: [u8; 3]| {
        let (cx, cy) = (x.floor() as i64, y.floor() as i64);
        for d in -2i64..=2 {
            for (px, py) in [(cx + d, cy), (cx, cy + d)] {
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    out.put_pixel(px as u32, py as u32, Rgb(color));
                }
            }
        }
    };
    for &p in &result.specialized.retained {
        cross(p, [40, 220, 60]);
    }
    for &p in &result.specialized.discarded {
        cross(p, [230, 30, 30]);
    }
    out
}

/// Class-agnostic counter for the synthetic shape scenes: every 4-connected
/// blob of pixels that differ from the dominant (background) colour is one
/// object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCounter {
    pub kind: CountKind,
    /// Minimum per-channel difference from the background.
    pub contrast: u8,
    pub min_area: usize,
}

impl ToyCounter {
    pub fn new(kind: CountKind) -> Self {
        Self {
            kind,
            contrast: 24,
            min_area: 3,
        }
    }

    /// Connected foreground components as pixel lists.
    pub fn components(&self, image: &RgbImage) -> Vec<Vec<(u32, u32)>> {
        let (w, h) = image.dimensions();
        let mut freq: HashMap<[u8; 3], usize> = HashMap::new();
        for p in image.pixels() {
            *freq.entry(p.0).or_default() += 1;
        }
        let Some(bg) = freq
            .into_iter()
            .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
            .map(|(c, _)| c)
        else {
            return Vec::new();
        };
        let fg = |x: u32, y: u32| {
            let p = image.get_pixel(x, y).0;
            (0..3).any(|k| p[k].abs_diff(bg[k]) > self.contrast)
        };
        let mut seen = vec![false; (w * h) as usize];
        let mut out = Vec::new();
        for y0 in 0..h {
            for x0 in 0..w {
                if seen[(y0 * w + x0) as usize] || !fg(x0, y0) {
                    continue;
                }
                let mut comp = Vec::new();
                let mut stack = vec![(x0, y0)];
                seen[(y0 * w + x0) as usize] = true;
                while let Some((x, y)) = stack.pop() {
                    comp.push((x, y));
                    let mut visit = |nx: u32, ny: u32| {
                        let i = (ny * w + nx) as usize;
                        if !seen[i] && fg(nx, ny) {
                            seen[i] = true;
                            stack.push((nx, ny));
                        }
                    };
                    if x > 0 {
                        visit(x - 1, y);
                    }
                    if x + 1 < w {
                        visit(x + 1, y);
                    }
                    if y > 0 {
                        visit(x, y - 1);
                    }
                    if y + 1 < h {
                        visit(x, y + 1);
                    }
                }
                if comp.len() >= self.min_area {
                    comp.sort_unstable();
                    out.push(comp);
                }
            }
        }
        out
    }
}

impl CounterBackend for ToyCounter {
    fn name(&self) -> &str {
        match self.kind {
            CountKind::Density => "toy-density",
            CountKind::Points => "toy-points",
        }
    }

    fn count(&self, image: &RgbImage, prompt: &str) -> Result<CountField, BackendError> {
        let comps = self.components(image);
        let size = image.dimensions();
        Ok(match self.kind {
            CountKind::Points => {
                let points = comps
                    .iter()
                    .map(|c| {
                        let n = c.len() as f64;
                        let sx: f64 = c.iter().map(|p| f64::from(p.0) + 0.5).sum();
                        let sy: f64 = c.iter().map(|p| f64::from(p.1) + 0.5).sum();
                        (sx / n, sy / n)
                    })
                    .collect();
                CountField::points(points, size, self.name(), prompt)
            }
            CountKind::Density => {
                let mut d = Array2::zeros((size.1 as usize, size.0 as usize));
                for c in &comps {
                    let share = 1.0 / c.len() as f64;
                    for &(x, y) in c {
                        d[[y as usize, x as usize]] += share;
                    }
                }
                CountField::density(d, size, self.name(), prompt)
            }
        })
    }
}
