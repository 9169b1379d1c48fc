//! On-disk layout: `synth/<category>/<polarity>/<idx>.png` plus a JSON
//! sidecar `<idx>.json` holding the pseudo-annotation. Category directories
//! use [`slug`](crate::util::slug)ged names.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Polarity, PseudoPair, SynthesisError};
use crate::util::slug;

/// Uncompressed run-length encoding of a binary mask in row-major order.
/// Runs alternate starting with zeros, so a mask starting with `1` begins
/// with a zero-length run.
pub fn mask_to_rle(mask: &Array2<u8>) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0usize;
    for &v in mask.iter() {
        let v = u8::from(v != 0);
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn mask_from_rle(runs: &[usize], grid: (usize, usize)) -> Option<Array2<u8>> {
    let mut flat = Vec::with_capacity(grid.0 * grid.1);
    for (i, &len) in runs.iter().enumerate() {
        flat.extend(std::iter::repeat_n((i % 2) as u8, len));
    }
    Array2::from_shape_vec(grid, flat).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSidecar {
    /// Category the synthetic set was built for.
    pub target: String,
    /// Category depicted in this image.
    pub category: String,
    pub polarity: Polarity,
    pub prompt: String,
    pub seed: u64,
    pub grid: (usize, usize),
    pub mask_rle: Vec<usize>,
    /// Normalized category map, row-major; omitted for negatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cat_map: Option<Vec<f64>>,
    pub config_hash: String,
}

pub fn pair_dir(root: &Path, target: &str, polarity: Polarity) -> PathBuf {
    root.join("synth")
        .join(slug(target))
        .join(polarity.as_str())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthesisError + '_ {
    move |source| SynthesisError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `pair` as image + sidecar and returns the image path.
pub fn write_pair(
    root: &Path,
    target: &str,
    index: usize,
    pair: &PseudoPair,
    config_hash: &str,
) -> Result<PathBuf, SynthesisError> {
    let dir = pair_dir(root, target, pair.polarity);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let png = dir.join(format!("{index:04}.png"));
    pair.image
        .save(&png)
        .map_err(|e| SynthesisError::Artifact {
            path: png.display().to_string(),
            message: e.to_string(),
        })?;
    let sidecar = PairSidecar {
        target: target.to_string(),
        category: pair.category.clone(),
        polarity: pair.polarity,
        prompt: pair.prompt.clone(),
        seed: pair.seed,
        grid: pair.bin_mask.dim(),
        mask_rle: mask_to_rle(&pair.bin_mask),
        cat_map: (pair.polarity == Polarity::Positive)
            .then(|| pair.cat_map.iter().copied().collect()),
        config_hash: config_hash.to_string(),
    };
    let json = dir.join(format!("{index:04}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    Ok(png)
}

/// Loads every pair stored for `target`, positives first, each polarity in
/// index order.
pub fn load_pairs(root: &Path, target: &str) -> Result<Vec<PseudoPair>, SynthesisError> {
    let mut pairs = Vec::new();
    for polarity in [Polarity::Positive, Polarity::Negative] {
        let dir = pair_dir(root, target, polarity);
        if !dir.exists() {
            continue;
        }
        let mut sidecars: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        sidecars.sort();
        for json in sidecars {
            let bad = |message: String| SynthesisError::Artifact {
                path: json.display().to_string(),
                message,
            };
            let text = fs::read_to_string(&json).map_err(io_err(&json))?;
            let meta: PairSidecar = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let bin_mask = mask_from_rle(&meta.mask_rle, meta.grid)
                .ok_or_else(|| bad("mask run lengths do not match the grid".into()))?;
            let cat_map = match meta.cat_map {
                Some(v) => Array2::from_shape_vec(meta.grid, v).map_err(|e| bad(e.to_string()))?,
                None => Array2::zeros(meta.grid),
            };
            let png = json.with_extension("png");
            let image = image::open(&png)
                .map_err(|e| SynthesisError::Artifact {
                    path: png.display().to_string(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            pairs.push(PseudoPair {
                image,
                prompt: meta.prompt,
                seed: meta.seed,
                avg_map: None,
                cat_map,
                bin_mask,
                polarity: meta.polarity,
                category: meta.category,
            });
        }
    }
    Ok(pairs)
}
