//! Seeded synthetic scenes: bright rotated rectangles and curved bands on a
//! dark textured background, with exact polygon annotations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotation::Annotation;
use super::image::RgbImage;
use super::DataError;
use crate::geometry::{segments_intersect, Point2, Polygon};
use crate::labelgen::Dims;

/// Shortest side any generated instance may have.
pub const MIN_SIDE: f64 = 12.0;
pub const MAX_ATTEMPTS: usize = 100;
/// Arc samples per side of a curved band.
pub const ARC_POINTS: usize = 6;
pub const BACKGROUND_MAX: u8 = 80;
pub const TEXT_MIN: u8 = 180;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Band,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability that a proposed instance is a curved band.
    pub band_prob: f64,
    /// Longest side over shortest side for rectangles.
    pub max_aspect: f64,
    /// Minimum clearance between instances, in pixels.
    pub gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { height: 256, width: 256, min_instances: 1, max_instances: 4, band_prob: 0.3, max_aspect: 2.2, gap: 4.0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synth(m));
        if self.height < 32 || self.width < 32 {
            return bad(format!("image must be at least 32x32, got {}x{}", self.height, self.width));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance range {}..={} is empty or starts at 0",
                self.min_instances, self.max_instances
            ));
        }
        if !(0.0..=1.0).contains(&self.band_prob) {
            return bad(format!("band_prob must lie in [0, 1], got {}", self.band_prob));
        }
        if !(self.max_aspect >= 1.0) || !(self.gap >= 0.0) {
            return bad("max_aspect must be at least 1 and gap non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub annotation: Annotation,
    pub kinds: Vec<ShapeKind>,
}

fn rotated_rect(c: Point2, long: f64, short: f64, angle: f64) -> Polygon {
    let (s, co) = angle.sin_cos();
    let (hl, hs) = (long / 2.0, short / 2.0);
    let pts = [(-hl, -hs), (hl, -hs), (hl, hs), (-hl, hs)]
        .map(|(u, v)| Point2::new(c.x + u * co - v * s, c.y + u * s + v * co));
    Polygon::new(pts.to_vec()).expect("rectangle with positive sides")
}

/// Annular sector: outer arc forward, inner arc back.
fn band(c: Point2, r_in: f64, thickness: f64, start: f64, span: f64) -> Polygon {
    let r_out = r_in + thickness;
    let mut pts = Vec::with_capacity(2 * ARC_POINTS);
    for i in 0..ARC_POINTS {
        let a = start + span * i as f64 / (ARC_POINTS - 1) as f64;
        pts.push(Point2::new(c.x + r_out * a.cos(), c.y + r_out * a.sin()));
    }
    for i in (0..ARC_POINTS).rev() {
        let a = start + span * i as f64 / (ARC_POINTS - 1) as f64;
        pts.push(Point2::new(c.x + r_in * a.cos(), c.y + r_in * a.sin()));
    }
    Polygon::new(pts).expect("annular sector is simple")
}

fn inside_frame(p: &Polygon, dims: Dims, margin: f64) -> bool {
    let (lo, hi) = p.bbox();
    lo.x >= margin && lo.y >= margin && hi.x <= dims.width as f64 - margin && hi.y <= dims.height as f64 - margin
}

/// True when the two boundaries stay at least `gap` apart and neither
/// polygon contains the other.
fn clear_of(a: &Polygon, b: &Polygon, gap: f64) -> bool {
    for (p1, p2) in a.edges() {
        for (q1, q2) in b.edges() {
            if segments_intersect(p1, p2, q1, q2) {
                return false;
            }
        }
    }
    if a.contains(b.vertices()[0]) || b.contains(a.vertices()[0]) {
        return false;
    }
    let near = |x: &Polygon, y: &Polygon| x.vertices().iter().any(|&v| y.nearest_boundary(v).distance < gap);
    !near(a, b) && !near(b, a)
}

fn propose(rng: &mut ChaCha8Rng, cfg: &SynthConfig, dims: Dims) -> (Polygon, ShapeKind) {
    let small = dims.height.min(dims.width) as f64;
    if rng.gen_bool(cfg.band_prob) {
        let thickness = rng.gen_range(14.0..=24.0);
        let r_in = rng.gen_range(1.2 * thickness..=(small / 2.5).max(1.5 * thickness));
        let mid = r_in + thickness / 2.0;
        let arc = rng.gen_range(2.5 * thickness..=(5.0 * thickness).min(0.6 * small).max(2.6 * thickness));
        let span = (arc / mid).min(2.0 * PI / 3.0);
        let start = rng.gen_range(0.0..2.0 * PI);
        let c = Point2::new(rng.gen_range(0.0..dims.width as f64), rng.gen_range(0.0..dims.height as f64));
        (band(c, r_in, thickness, start, span), ShapeKind::Band)
    } else {
        let short_hi = (small / 3.0).clamp(16.0, 36.0);
        let short = rng.gen_range(16.0..=short_hi);
        let long = short * rng.gen_range(1.0..=cfg.max_aspect);
        let angle = rng.gen_range(-PI / 6.0..=PI / 6.0);
        let c = Point2::new(rng.gen_range(0.0..dims.width as f64), rng.gen_range(0.0..dims.height as f64));
        (rotated_rect(c, long, short, angle), ShapeKind::Rect)
    }
}

/// Deterministic in `seed`. Places between `min_instances` and
/// `max_instances` non-overlapping instances by rejection sampling, giving up
/// after `MAX_ATTEMPTS` proposals; a centered rectangle is used if nothing fit.
pub fn synth_sample(image_id: &str, seed: u64, cfg: &SynthConfig) -> Result<SynthSample, DataError> {
    cfg.validate()?;
    let dims = Dims::new(cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(cfg.min_instances..=cfg.max_instances);

    let mut placed: Vec<(Polygon, ShapeKind)> = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        if placed.len() == target {
            break;
        }
        let (poly, kind) = propose(&mut rng, cfg, dims);
        if inside_frame(&poly, dims, 2.0) && placed.iter().all(|(q, _)| clear_of(&poly, q, cfg.gap)) {
            placed.push((poly, kind));
        }
    }
    if placed.is_empty() {
        let (w, h) = (dims.width as f64, dims.height as f64);
        let rw = (w / 2.0).max(MIN_SIDE);
        let rh = (h / 4.0).max(MIN_SIDE);
        let poly =
            Polygon::rect((w - rw) / 2.0, (h - rh) / 2.0, (w + rw) / 2.0, (h + rh) / 2.0).expect("fallback rectangle");
        placed.push((poly, ShapeKind::Rect));
    }

    let image = paint(&mut rng, dims, &placed);
    let (polygons, kinds): (Vec<_>, Vec<_>) = placed.into_iter().unzip();
    let transcriptions =
        kinds.iter().map(|k| if *k == ShapeKind::Rect { "rect" } else { "band" }.to_string()).collect();
    Ok(SynthSample {
        image,
        annotation: Annotation { image_id: image_id.to_string(), polygons, transcriptions },
        kinds,
    })
}

fn paint(rng: &mut ChaCha8Rng, dims: Dims, placed: &[(Polygon, ShapeKind)]) -> RgbImage {
    let mut img = RgbImage::new(dims);
    let fx = rng.gen_range(0.02..0.12);
    let fy = rng.gen_range(0.02..0.12);
    let (px, py) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-8.0..8.0));
    for r in 0..dims.height {
        for c in 0..dims.width {
            let base = 40.0 + 22.0 * (fx * c as f64 + px).sin() * (fy * r as f64 + py).cos();
            let px_rgb = tint.map(|t| {
                let v = base + t + rng.gen_range(-10.0..10.0);
                v.round().clamp(0.0, f64::from(BACKGROUND_MAX)) as u8
            });
            img.set(r, c, px_rgb);
        }
    }
    for (poly, _) in placed {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(f64::from(TEXT_MIN) + 10.0..=245.0));
        for (row, c0, c1) in poly.pixel_spans(dims.height, dims.width) {
            for col in c0..c1 {
                let rgb =
                    color.map(|v| (v + rng.gen_range(-10.0..=10.0)).round().clamp(f64::from(TEXT_MIN), 255.0) as u8);
                img.set(row, col, rgb);
            }
        }
    }
    img
}
