//! Resampling helpers for 2-D maps stored as `ndarray::Array2` (rows × cols).
//!
//! Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`; both resamplers use half-pixel
//! centers so a map and its resized copy stay spatially aligned.

use image::{Rgb, RgbImage};
use ndarray::Array2;

fn source_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    pos.min(src_len - 1)
}

/// Nearest-neighbour resize to `(rows, cols)`.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, (rows, cols): (usize, usize)) -> Array2<T> {
    let (sr, sc) = src.dim();
    assert!(sr > 0 && sc > 0, "cannot resize an empty grid");
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        src[[source_index(i, rows, sr), source_index(j, cols, sc)]]
    })
}

fn bilinear_axis(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize to `(rows, cols)` with clamped borders. Convex
/// combinations only, so the output range never exceeds the input range.
pub fn resize_bilinear(src: &Array2<f64>, (rows, cols): (usize, usize)) -> Array2<f64> {
    let (sr, sc) = src.dim();
    assert!(sr > 0 && sc > 0, "cannot resize an empty grid");
    let ys: Vec<_> = (0..rows).map(|i| bilinear_axis(i, rows, sr)).collect();
    let xs: Vec<_> = (0..cols).map(|j| bilinear_axis(j, cols, sc)).collect();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Halves a grid (sampling every second cell) and pads it back to its
/// original size with `fill`. The content ends up in the top-left corner,
/// the same placement [`downscale_pad_image`] uses.
pub fn downscale_pad<T: Copy>(src: &Array2<T>, fill: T) -> Array2<T> {
    let (rows, cols) = src.dim();
    let (hr, hc) = (rows.div_ceil(2), cols.div_ceil(2));
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        if i < hr && j < hc {
            src[[2 * i, 2 * j]]
        } else {
            fill
        }
    })
}

/// Downscales an image to 50% with a 2×2 box filter and zero-pads it back to
/// the original resolution (content top-left).
pub fn downscale_pad_image(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let (hw, hh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = RgbImage::new(w, h);
    for y in 0..hh {
        for x in 0..hw {
            let mut acc = [0u32; 3];
            let mut n = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < w && sy < h {
                        let p = img.get_pixel(sx, sy);
                        for c in 0..3 {
                            acc[c] += u32::from(p[c]);
                        }
                        n += 1;
                    }
                }
            }
            let px = Rgb([
                ((acc[0] + n / 2) / n) as u8,
                ((acc[1] + n / 2) / n) as u8,
                ((acc[2] + n / 2) / n) as u8,
            ]);
            out.put_pixel(x, y, px);
        }
    }
    out
}
