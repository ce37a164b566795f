//! Grayscale renders of label and prediction planes and polygon overlays.

use super::image::{GrayImage, RgbImage};
use crate::geometry::Polygon;
use crate::labelgen::{LabelMaps, Raster};

/// Value range mapped onto `0..=255` for each label plane.
pub fn plane_range(name: &str) -> (f64, f64) {
    match name {
        "dir_x" | "dir_y" => (-1.0, 1.0),
        _ => (0.0, 1.0),
    }
}

/// One grayscale image per label plane, in `LabelMaps::PLANE_NAMES` order.
pub fn label_renders(maps: &LabelMaps) -> Vec<(&'static str, GrayImage)> {
    LabelMaps::PLANE_NAMES
        .iter()
        .zip(maps.planes())
        .map(|(&name, r)| {
            let (lo, hi) = plane_range(name);
            (name, GrayImage::from_raster(r, lo, hi))
        })
        .collect()
}

/// Probability-like map in `[0, 1]`.
pub fn prob_render(r: &Raster) -> GrayImage {
    GrayImage::from_raster(r, 0.0, 1.0)
}

/// Copy of `img` with every polygon outline drawn in `color`.
pub fn overlay(img: &RgbImage, polys: &[Polygon], color: [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    let (h, w) = (img.dims.height as f64, img.dims.width as f64);
    for poly in polys {
        for (a, b) in poly.edges() {
            let steps = (4.0 * a.dist(b)).ceil().max(1.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let x = a.x + (b.x - a.x) * t;
                let y = a.y + (b.y - a.y) * t;
                if x >= 0.0 && y >= 0.0 && x < w && y < h {
                    out.set(y as usize, x as usize, color);
                }
            }
        }
    }
    out
}
