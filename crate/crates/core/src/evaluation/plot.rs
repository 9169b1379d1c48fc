//! Minimal raster charts (no text) for reports: the Markdown next to each
//! PNG carries the labels and numbers.

use image::{Rgb, RgbImage};

const W: u32 = 480;
const H: u32 = 300;
const MARGIN: u32 = 30;
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const PALETTE: [[u8; 3]; 4] = [[52, 101, 164], [204, 85, 0], [78, 154, 6], [117, 80, 123]];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn y_pixel(v: f64, max: f64) -> u32 {
    let span = f64::from(H - MARGIN - MARGIN / 2);
    let frac = if max > 0.0 {
        (v / max).clamp(0.0, 1.0)
    } else {
        0.0
    };
    H - MARGIN - (frac * span).round() as u32
}

/// Grouped bars: `groups[i][s]` is series `s` of group `i`.
pub fn bar_chart(groups: &[Vec<f64>]) -> RgbImage {
    let mut img = canvas();
    let series = groups.iter().map(Vec::len).max().unwrap_or(0);
    if groups.is_empty() || series == 0 {
        return img;
    }
    let max = groups
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let slot = f64::from(W - MARGIN - MARGIN / 2) / groups.len() as f64;
    let bar = (slot * 0.8 / series as f64).max(1.0);
    for (i, group) in groups.iter().enumerate() {
        for (s, &v) in group.iter().enumerate() {
            let x0 = f64::from(MARGIN) + i as f64 * slot + slot * 0.1 + s as f64 * bar;
            let top = y_pixel(v, max);
            for x in x0.round() as u32..(x0 + bar).round().max(x0.round() + 1.0) as u32 {
                for y in top..H - MARGIN {
                    img.put_pixel(x.min(W - 1), y, Rgb(PALETTE[s % PALETTE.len()]));
                }
            }
        }
    }
    img
}

/// One polyline per series of `(x, y)` points, sharing axes.
pub fn line_chart(series: &[Vec<(f64, f64)>]) -> RgbImage {
    let mut img = canvas();
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flatten()
        .copied()
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    if pts.is_empty() {
        return img;
    }
    let x_max = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let y_max = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let span_x = f64::from(W - MARGIN - MARGIN / 2);
    let to_px = |(x, y): (f64, f64)| {
        let fx = if x_max > 0.0 { x / x_max } else { 0.0 };
        (
            f64::from(MARGIN) + fx * span_x,
            f64::from(y_pixel(y, y_max)),
        )
    };
    for (s, line) in series.iter().enumerate() {
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        for pair in line.windows(2) {
            let (a, b) = (to_px(pair[0]), to_px(pair[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let (x, y) = (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
                img.put_pixel(
                    (x.round() as u32).min(W - 1),
                    (y.round() as u32).min(H - 1),
                    color,
                );
            }
        }
        for &p in line {
            let (x, y) = to_px(p);
            for dx in -2i32..=2 {
                for dy in -2i32..=2 {
                    let (px, py) = (x.round() as i32 + dx, y.round() as i32 + dy);
                    if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
    img
}
