//! Point-annotated test sets.
//!
//! Layout: `<root>/annotations.json` and `<root>/images/`. The annotation file
//! maps image ids to their parent category and labelled points:
//!
//! ```json
//! {"img_001": {"parent": "disk", "points": [{"x": 10.5, "y": 3.0, "sub": "red disk"}]}}
//! ```
//!
//! The image for id `img_001` is `images/img_001.png` (or `.jpg`/`.jpeg`), or
//! `images/<file>` when the entry carries a `"file"` key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Reserved subcategory grouping infrequent classes.
pub const OTHER: &str = "other";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    pub sub: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub path: PathBuf,
    pub parent: String,
    pub labels: Vec<PointLabel>,
    /// `(width, height)`.
    pub size: (u32, u32),
}

impl AnnotatedImage {
    /// Ground-truth count per subcategory present in the image.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for l in &self.labels {
            *out.entry(l.sub.clone()).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ItemErrorKind {
    MissingImage,
    UnreadableImage { message: String },
    PointOutOfBounds { index: usize },
    EmptySubcategory { index: usize },
    MissingParent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    #[serde(flatten)]
    pub kind: ItemErrorKind,
}

impl std::fmt::Display for ItemError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            ItemErrorKind::MissingImage => write!(f, "{}: image file not found", self.id),
            ItemErrorKind::UnreadableImage { message } => {
                write!(f, "{}: unreadable image: {message}", self.id)
            }
            ItemErrorKind::PointOutOfBounds { index } => {
                write!(f, "{}: point {index} lies outside the image", self.id)
            }
            ItemErrorKind::EmptySubcategory { index } => {
                write!(f, "{}: point {index} has an empty subcategory", self.id)
            }
            ItemErrorKind::MissingParent => write!(f, "{}: empty parent category", self.id),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub images: Vec<AnnotatedImage>,
    /// Items skipped in lenient mode.
    pub errors: Vec<ItemError>,
}

#[derive(Deserialize)]
struct RawEntry {
    parent: String,
    #[serde(default)]
    file: Option<String>,
    points: Vec<PointLabel>,
}

fn find_image(dir: &Path, id: &str, file: Option<&str>) -> Option<PathBuf> {
    if let Some(f) = file {
        let p = dir.join(f);
        return p.exists().then_some(p);
    }
    let direct = dir.join(id);
    if direct.extension().is_some() && direct.is_file() {
        return Some(direct);
    }
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn load_item(root: &Path, id: &str, entry: RawEntry) -> Result<AnnotatedImage, ItemError> {
    let err = |kind| ItemError {
        id: id.to_string(),
        kind,
    };
    if entry.parent.trim().is_empty() {
        return Err(err(ItemErrorKind::MissingParent));
    }
    let path = find_image(&root.join("images"), id, entry.file.as_deref())
        .ok_or_else(|| err(ItemErrorKind::MissingImage))?;
    let size = image::image_dimensions(&path).map_err(|e| {
        err(ItemErrorKind::UnreadableImage {
            message: e.to_string(),
        })
    })?;
    for (index, p) in entry.points.iter().enumerate() {
        if p.sub.trim().is_empty() {
            return Err(err(ItemErrorKind::EmptySubcategory { index }));
        }
        let inside = p.x.is_finite()
            && p.y.is_finite()
            && (0.0..f64::from(size.0)).contains(&p.x)
            && (0.0..f64::from(size.1)).contains(&p.y);
        if !inside {
            return Err(err(ItemErrorKind::PointOutOfBounds { index }));
        }
    }
    Ok(AnnotatedImage {
        id: id.to_string(),
        path,
        parent: entry.parent,
        labels: entry.points,
        size,
    })
}

/// Loads `root`. In strict mode the first bad item aborts; otherwise bad
/// items are skipped and listed in [`LoadedDataset::errors`]. Images come
/// back sorted by id.
pub fn load_dataset(root: &Path, strict: bool) -> Result<LoadedDataset, EvalError> {
    let path = root.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if text.trim().is_empty() {
        tracing::warn!(path = %path.display(), "annotation file is empty");
        return Ok(LoadedDataset::default());
    }
    let raw: BTreeMap<String, RawEntry> =
        serde_json::from_str(&text).map_err(|e| EvalError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if raw.is_empty() {
        tracing::warn!(path = %path.display(), "annotation file has no entries");
    }
    let mut out = LoadedDataset::default();
    for (id, entry) in raw {
        match load_item(root, &id, entry) {
            Ok(img) => out.images.push(img),
            Err(e) if strict => return Err(EvalError::Item(e)),
            Err(e) => {
                tracing::warn!(error = %e, "skipping dataset item");
                out.errors.push(e);
            }
        }
    }
    Ok(out)
}

/// Converts an FSC147-style annotation file (`{"<file>": {"points":
/// [[x, y], ...]}}`) into this crate's schema. FSC147 has no subcategories,
/// so every point is labelled with the image's parent from `parents`
/// (or `default_parent`).
pub fn convert_fsc147(
    fsc_json: &str,
    parents: &BTreeMap<String, String>,
    default_parent: &str,
) -> Result<String, serde_json::Error> {
    #[derive(Deserialize)]
    struct FscEntry {
        points: Vec<[f64; 2]>,
    }
    let raw: BTreeMap<String, FscEntry> = serde_json::from_str(fsc_json)?;
    let mut out = serde_json::Map::new();
    for (file, entry) in raw {
        let id = Path::new(&file)
            .file_stem()
            .map_or(file.clone(), |s| s.to_string_lossy().into_owned());
        let parent = parents.get(&file).map_or(default_parent, String::as_str);
        let points: Vec<PointLabel> = entry
            .points
            .iter()
            .map(|&[x, y]| PointLabel {
                x,
                y,
                sub: parent.to_string(),
            })
            .collect();
        out.insert(
            id,
            serde_json::json!({"parent": parent, "file": file, "points": points}),
        );
    }
    serde_json::to_string_pretty(&out)
}
