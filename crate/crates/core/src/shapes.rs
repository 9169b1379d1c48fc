//! Procedural scenes of colored shapes.
//!
//! Each [`ShapeClass`] stands in for a fine-grained subcategory. Classes in the
//! same family share a parent name ("disk", "square", "triangle") and have
//! neighbouring hues, which makes them each other's lookalikes. Scenes know
//! their exact geometry, so every derived quantity (pixel labels, per-patch
//! occupancy, per-class counts) has an analytic ground truth.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::normalize_name;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeClass {
    pub name: &'static str,
    pub parent: &'static str,
    pub kind: ShapeKind,
    pub color: [u8; 3],
}

/// Every class the mock backends understand.
pub const SHAPE_CLASSES: &[ShapeClass] = &[
    ShapeClass {
        name: "red disk",
        parent: "disk",
        kind: ShapeKind::Disk,
        color: [215, 45, 45],
    },
    ShapeClass {
        name: "orange disk",
        parent: "disk",
        kind: ShapeKind::Disk,
        color: [235, 130, 35],
    },
    ShapeClass {
        name: "yellow disk",
        parent: "disk",
        kind: ShapeKind::Disk,
        color: [225, 205, 40],
    },
    ShapeClass {
        name: "pink disk",
        parent: "disk",
        kind: ShapeKind::Disk,
        color: [235, 115, 175],
    },
    ShapeClass {
        name: "green square",
        parent: "square",
        kind: ShapeKind::Square,
        color: [55, 170, 70],
    },
    ShapeClass {
        name: "teal square",
        parent: "square",
        kind: ShapeKind::Square,
        color: [35, 165, 150],
    },
    ShapeClass {
        name: "lime square",
        parent: "square",
        kind: ShapeKind::Square,
        color: [155, 210, 50],
    },
    ShapeClass {
        name: "blue triangle",
        parent: "triangle",
        kind: ShapeKind::Triangle,
        color: [50, 90, 215],
    },
    ShapeClass {
        name: "purple triangle",
        parent: "triangle",
        kind: ShapeKind::Triangle,
        color: [145, 70, 195],
    },
    ShapeClass {
        name: "cyan triangle",
        parent: "triangle",
        kind: ShapeKind::Triangle,
        color: [60, 185, 230],
    },
];

pub const BACKGROUND: [u8; 3] = [40, 40, 48];

/// Case- and whitespace-insensitive class lookup.
pub fn shape_class(name: &str) -> Option<&'static ShapeClass> {
    let key = normalize_name(name);
    SHAPE_CLASSES.iter().find(|c| c.name == key)
}

/// Other classes sharing `name`'s parent.
pub fn lookalikes(name: &str) -> Vec<&'static ShapeClass> {
    match shape_class(name) {
        Some(target) => SHAPE_CLASSES
            .iter()
            .filter(|c| c.parent == target.parent && c.name != target.name)
            .collect(),
        None => Vec::new(),
    }
}

/// Classes whose name or parent equals `name` (a parent name selects the
/// whole family).
pub fn classes_named(name: &str) -> Vec<&'static ShapeClass> {
    let key = normalize_name(name);
    SHAPE_CLASSES
        .iter()
        .filter(|c| c.name == key || c.parent == key)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub class: String,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub cx: f64,
    pub cy: f64,
    /// Half-extent in pixels.
    pub radius: f64,
}

impl PlacedShape {
    pub fn new(class: &ShapeClass, cx: f64, cy: f64, radius: f64) -> Self {
        Self {
            class: class.name.to_string(),
            kind: class.kind,
            color: class.color,
            cx,
            cy,
            radius,
        }
    }

    /// Point-in-shape test in continuous pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // Apex up; the base spans the full width at the bottom.
                if !(-r..=r).contains(&dy) {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
        }
    }
}

/// Global illumination of a scene: a brightness factor and a per-channel tint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub brightness: f64,
    pub tint: [f64; 3],
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            tint: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub lighting: Lighting,
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            lighting: Lighting::default(),
            shapes: Vec::new(),
        }
    }

    /// Index of the shape covering the center of pixel `(x, y)`, if any.
    pub fn shape_at(&self, x: u32, y: u32) -> Option<usize> {
        let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        self.shapes.iter().position(|s| s.contains(px, py))
    }

    pub fn render(&self) -> RgbImage {
        let light = |c: u8, k: usize| -> u8 {
            let v = f64::from(c) * self.lighting.brightness * self.lighting.tint[k];
            v.round().clamp(0.0, 255.0) as u8
        };
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let base = match self.shape_at(x, y) {
                Some(i) => self.shapes[i].color,
                None => BACKGROUND,
            };
            Rgb([light(base[0], 0), light(base[1], 1), light(base[2], 2)])
        })
    }

    /// Per-pixel membership mask (rows × cols) for one class.
    pub fn class_mask(&self, class: &str) -> Array2<bool> {
        let key = normalize_name(class);
        Array2::from_shape_fn((self.height as usize, self.width as usize), |(y, x)| {
            self.shape_at(x as u32, y as u32)
                .is_some_and(|i| self.shapes[i].class == key)
        })
    }

    /// Fraction of each `patch`×`patch` block covered by `class`.
    pub fn patch_occupancy(&self, class: &str, patch: u32) -> Array2<f64> {
        let mask = self.class_mask(class);
        let rows = (self.height / patch) as usize;
        let cols = (self.width / patch) as usize;
        let p = patch as usize;
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let hits = (0..p)
                .flat_map(|dy| (0..p).map(move |dx| (i * p + dy, j * p + dx)))
                .filter(|&idx| mask[idx])
                .count();
            hits as f64 / (p * p) as f64
        })
    }

    pub fn count_of(&self, class: &str) -> usize {
        let key = normalize_name(class);
        self.shapes.iter().filter(|s| s.class == key).count()
    }

    /// Places up to `count` shapes of `class` at random non-overlapping
    /// positions. Returns how many fit.
    pub fn scatter<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        class: &ShapeClass,
        count: usize,
        radius: (f64, f64),
    ) -> usize {
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 400 * count.max(1) {
            attempts += 1;
            let r = if radius.1 > radius.0 {
                rng.random_range(radius.0..radius.1)
            } else {
                radius.0
            };
            let (w, h) = (f64::from(self.width), f64::from(self.height));
            if w <= 2.0 * r + 2.0 || h <= 2.0 * r + 2.0 {
                break;
            }
            let cx = rng.random_range(r + 1.0..w - r - 1.0);
            let cy = rng.random_range(r + 1.0..h - r - 1.0);
            let clear = self.shapes.iter().all(|s| {
                let d = ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt();
                d >= s.radius + r + 3.0
            });
            if clear {
                self.shapes.push(PlacedShape::new(class, cx, cy, r));
                placed += 1;
            }
        }
        placed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_is_case_insensitive() {
        assert_eq!(shape_class("Orange  Disk").unwrap().name, "orange disk");
        assert!(shape_class("canada goose").is_none());
        let names: Vec<_> = lookalikes("red disk").iter().map(|c| c.name).collect();
        assert_eq!(names, ["orange disk", "yellow disk", "pink disk"]);
        assert_eq!(classes_named("square").len(), 3);
    }

    #[test]
    fn scatter_places_disjoint_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scene = Scene::empty(96, 96);
        let a = scene.scatter(&mut rng, shape_class("red disk").unwrap(), 5, (4.0, 6.0));
        let b = scene.scatter(
            &mut rng,
            shape_class("blue triangle").unwrap(),
            4,
            (4.0, 6.0),
        );
        assert_eq!((a, b), (5, 4));
        assert_eq!(scene.count_of("red disk"), 5);
        let img = scene.render();
        let red = scene.class_mask("red disk");
        for (y, row) in red.outer_iter().enumerate() {
            for (x, &hit) in row.iter().enumerate() {
                let px = img.get_pixel(x as u32, y as u32);
                assert_eq!(hit, px.0 == [215, 45, 45]);
            }
        }
    }

    #[test]
    fn occupancy_of_full_patch_is_one() {
        let mut scene = Scene::empty(16, 16);
        scene.shapes.push(PlacedShape::new(
            shape_class("green square").unwrap(),
            8.0,
            8.0,
            8.0,
        ));
        let occ = scene.patch_occupancy("green square", 8);
        assert_eq!(occ.dim(), (2, 2));
        assert!(occ.iter().all(|&v| v > 0.5));
        assert_eq!(scene.patch_occupancy("red disk", 8).sum(), 0.0);
    }
}
