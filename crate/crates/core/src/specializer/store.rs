//! Concept files: `concepts/<slug>.json` plus a CSV training log next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConceptEmbedding, EmbeddingInit, EpochRecord, SpecializerError};
use crate::util::slug;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFile {
    pub category: String,
    pub init: EmbeddingInit,
    pub selected_epoch: usize,
    pub segmenter: String,
    pub segmenter_checksum: String,
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
    pub z: Vec<f64>,
}

impl ConceptFile {
    pub fn embedding(&self) -> ConceptEmbedding {
        ConceptEmbedding {
            category: self.category.clone(),
            init: self.init,
            z: self.z.clone(),
            selected_epoch: self.selected_epoch,
            history: self.history.clone(),
        }
    }
}

pub fn concept_path(root: &Path, category: &str) -> PathBuf {
    root.join("concepts")
        .join(format!("{}.json", slug(category)))
}

pub fn training_log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,sharpness,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.sharpness, r.lr
        ));
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SpecializerError + '_ {
    move |source| SpecializerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the concept JSON and its training log; returns the JSON path.
pub fn write_concept(root: &Path, file: &ConceptFile) -> Result<PathBuf, SpecializerError> {
    let path = concept_path(root, &file.category);
    let dir = path.parent().expect("has parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(file).expect("serializable");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    let log = path.with_extension("log.csv");
    fs::write(&log, training_log_csv(&file.history)).map_err(io_err(&log))?;
    Ok(path)
}

pub fn load_concept(path: &Path) -> Result<ConceptFile, SpecializerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: ConceptFile =
        serde_json::from_str(&text).map_err(|e| SpecializerError::Artifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if file.z.len() != crate::EMBED_DIM {
        return Err(SpecializerError::Artifact {
            path: path.display().to_string(),
            message: format!("embedding has dimension {}", file.z.len()),
        });
    }
    Ok(file)
}
