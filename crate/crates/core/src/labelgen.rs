//! Supervision rasters for one image: text center, foreground, threshold band,
//! normalized distance-to-edge and unit direction-to-edge.
//!
//! Inside/outside is decided at pixel centers with the even-odd rule. When
//! polygons overlap, a pixel's distance and direction come from whichever
//! polygon boundary is nearest (lowest index on ties).

use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::{BoundaryHit, Point2, Polygon};

pub const RMLB_MAGIC: &[u8; 4] = b"RMLB";
pub const RMLB_VERSION: u32 = 1;

/// Polygons with less area than this are treated as degenerate.
const MIN_POLYGON_AREA: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("shrink ratio must lie in (0, 1), got {0}")]
    BadShrinkRatio(f64),
    #[error("unclip ratio must exceed 1, got {0}")]
    BadUnclipRatio(f64),
    #[error("label container: {msg} at byte {offset}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn pixels(self) -> usize {
        self.height * self.width
    }
}

/// One float plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; dims.pixels()] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.dims.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.dims.width + col] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Shrink and unclip ratios for the center region and its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkPolicy {
    pub shrink_ratio: f64,
    pub unclip_ratio: f64,
}

impl Default for ShrinkPolicy {
    fn default() -> Self {
        Self { shrink_ratio: 0.4, unclip_ratio: 1.5 }
    }
}

impl ShrinkPolicy {
    pub fn new(shrink_ratio: f64, unclip_ratio: f64) -> Result<Self, LabelError> {
        if !(shrink_ratio > 0.0 && shrink_ratio < 1.0) {
            return Err(LabelError::BadShrinkRatio(shrink_ratio));
        }
        if !(unclip_ratio > 1.0) {
            return Err(LabelError::BadUnclipRatio(unclip_ratio));
        }
        Ok(Self { shrink_ratio, unclip_ratio })
    }

    /// `D = A (1 - r^2) / L`.
    pub fn shrink_distance(&self, poly: &Polygon) -> f64 {
        poly.area() * (1.0 - self.shrink_ratio * self.shrink_ratio) / poly.perimeter()
    }

    /// `D' = A' r' / L'`.
    pub fn unclip_distance(&self, poly: &Polygon) -> f64 {
        unclip_distance(poly, self.unclip_ratio)
    }
}

pub fn unclip_distance(poly: &Polygon, unclip_ratio: f64) -> f64 {
    poly.area() * unclip_ratio / poly.perimeter()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarningKind {
    /// Polygon has (numerically) zero area and was skipped.
    ZeroArea,
    /// The inward offset collapsed or covered no pixel center; a half-size
    /// copy scaled about the centroid was used instead.
    ShrinkFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelWarning {
    pub polygon: usize,
    pub kind: WarningKind,
}

/// A raster together with the per-polygon warnings raised while drawing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub raster: Raster,
    pub warnings: Vec<LabelWarning>,
}

fn usable<'a>(polys: &'a [Polygon], warnings: &mut Vec<LabelWarning>) -> Vec<(usize, &'a Polygon)> {
    polys
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let ok = p.area() > MIN_POLYGON_AREA;
            if !ok {
                warnings.push(LabelWarning { polygon: *i, kind: WarningKind::ZeroArea });
            }
            ok
        })
        .collect()
}

fn fill(raster: &mut Raster, poly: &Polygon) {
    let Dims { height, width } = raster.dims;
    for (row, c0, c1) in poly.pixel_spans(height, width) {
        raster.data[row * width + c0..row * width + c1].fill(1.0);
    }
}

/// 1 at pixel centers inside any polygon, 0 elsewhere.
pub fn render_foreground(polys: &[Polygon], dims: Dims) -> Rendered {
    let mut warnings = Vec::new();
    let mut raster = Raster::zeros(dims);
    for (_, p) in usable(polys, &mut warnings) {
        fill(&mut raster, p);
    }
    Rendered { raster, warnings }
}

/// The polygon shrunk by the policy distance, or the half-size fallback.
pub fn shrink_polygon(poly: &Polygon, dims: Dims, policy: &ShrinkPolicy) -> (Polygon, bool) {
    let d = policy.shrink_distance(poly);
    match poly.offset(-d) {
        Ok(inner) if inner.pixel_count(dims.height, dims.width) > 0 => (inner, false),
        _ => {
            let half = poly.scaled_about_centroid(0.5).unwrap_or_else(|_| poly.clone());
            (half, true)
        }
    }
}

/// Shrunk text-center regions.
pub fn render_center(polys: &[Polygon], dims: Dims, policy: &ShrinkPolicy) -> Rendered {
    let mut warnings = Vec::new();
    let mut raster = Raster::zeros(dims);
    for (i, p) in usable(polys, &mut warnings) {
        let (inner, fell_back) = shrink_polygon(p, dims, policy);
        if fell_back {
            warnings.push(LabelWarning { polygon: i, kind: WarningKind::ShrinkFallback });
        }
        fill(&mut raster, &inner);
    }
    Rendered { raster, warnings }
}

/// Owning polygon and nearest boundary hit for every foreground pixel.
fn nearest_field(polys: &[Polygon], dims: Dims) -> Vec<Option<(usize, BoundaryHit)>> {
    let mut field: Vec<Option<(usize, BoundaryHit)>> = vec![None; dims.pixels()];
    let mut sink = Vec::new();
    for (i, p) in usable(polys, &mut sink) {
        for (row, c0, c1) in p.pixel_spans(dims.height, dims.width) {
            for col in c0..c1 {
                let q = Point2::new(col as f64 + 0.5, row as f64 + 0.5);
                let hit = p.nearest_boundary(q);
                let slot = &mut field[row * dims.width + col];
                if slot.is_none_or(|(_, h)| hit.distance < h.distance) {
                    *slot = Some((i, hit));
                }
            }
        }
    }
    field
}

fn distance_from_field(field: &[Option<(usize, BoundaryHit)>], n_polys: usize, dims: Dims) -> Raster {
    let mut max = vec![0.0f64; n_polys];
    for (owner, hit) in field.iter().flatten() {
        max[*owner] = max[*owner].max(hit.distance);
    }
    let mut raster = Raster::zeros(dims);
    for (px, cell) in field.iter().enumerate() {
        if let Some((owner, hit)) = cell {
            if max[*owner] > 0.0 {
                raster.data[px] = (hit.distance / max[*owner]) as f32;
            }
        }
    }
    raster
}

/// Distance to the nearest edge, normalized by each instance's maximum.
pub fn render_distance(polys: &[Polygon], dims: Dims) -> Raster {
    distance_from_field(&nearest_field(polys, dims), polys.len(), dims)
}

/// Unit vector from each pixel center toward its nearest edge point.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    pub x: Raster,
    pub y: Raster,
}

fn direction_from_field(field: &[Option<(usize, BoundaryHit)>], dims: Dims) -> DirectionField {
    let mut x = Raster::zeros(dims);
    let mut y = Raster::zeros(dims);
    for (px, cell) in field.iter().enumerate() {
        if let Some((_, hit)) = cell {
            if hit.distance > 0.0 {
                let row = px / dims.width;
                let col = px % dims.width;
                let dx = hit.point.x - (col as f64 + 0.5);
                let dy = hit.point.y - (row as f64 + 0.5);
                x.data[px] = (dx / hit.distance) as f32;
                y.data[px] = (dy / hit.distance) as f32;
            }
        }
    }
    DirectionField { x, y }
}

pub fn render_direction(polys: &[Polygon], dims: Dims) -> DirectionField {
    direction_from_field(&nearest_field(polys, dims), dims)
}

fn band_without_center(polys: &[Polygon], dims: Dims, policy: &ShrinkPolicy, center: &Raster) -> Rendered {
    let mut warnings = Vec::new();
    let mut raster = Raster::zeros(dims);
    for (_, p) in usable(polys, &mut warnings) {
        let d = policy.shrink_distance(p);
        if d <= 0.0 {
            continue;
        }
        let (lo, hi) = p.bbox();
        let r0 = (lo.y - d).floor().max(0.0) as usize;
        let r1 = ((hi.y + d).ceil().max(0.0) as usize).min(dims.height);
        let c0 = (lo.x - d).floor().max(0.0) as usize;
        let c1 = ((hi.x + d).ceil().max(0.0) as usize).min(dims.width);
        for row in r0..r1 {
            for col in c0..c1 {
                let q = Point2::new(col as f64 + 0.5, row as f64 + 0.5);
                let dist = p.nearest_boundary(q).distance;
                if dist < d {
                    let v = (1.0 - dist / d).clamp(0.0, 1.0) as f32;
                    let px = row * dims.width + col;
                    raster.data[px] = raster.data[px].max(v);
                }
            }
        }
    }
    for (b, &c) in raster.data.iter_mut().zip(&center.data) {
        if c != 0.0 {
            *b = 0.0;
        }
    }
    Rendered { raster, warnings }
}

/// Band of width `D` on both sides of each boundary, valued `1 - dist / D`,
/// and zero inside the center regions.
pub fn render_threshold_band(polys: &[Polygon], dims: Dims, policy: &ShrinkPolicy) -> Rendered {
    let center = render_center(polys, dims, policy);
    let mut band = band_without_center(polys, dims, policy, &center.raster);
    band.warnings = center.warnings;
    band
}

/// All supervision planes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMaps {
    pub dims: Dims,
    pub center: Raster,
    pub foreground: Raster,
    pub threshold_band: Raster,
    pub distance: Raster,
    pub direction: DirectionField,
}

impl LabelMaps {
    pub fn generate(polys: &[Polygon], dims: Dims, policy: &ShrinkPolicy) -> (Self, Vec<LabelWarning>) {
        let foreground = render_foreground(polys, dims);
        let center = render_center(polys, dims, policy);
        let band = band_without_center(polys, dims, policy, &center.raster);
        let field = nearest_field(polys, dims);
        let distance = distance_from_field(&field, polys.len(), dims);
        let direction = direction_from_field(&field, dims);
        let mut warnings = foreground.warnings;
        warnings.extend(center.warnings.into_iter().filter(|w| w.kind == WarningKind::ShrinkFallback));
        (
            Self {
                dims,
                center: center.raster,
                foreground: foreground.raster,
                threshold_band: band.raster,
                distance,
                direction,
            },
            warnings,
        )
    }

    /// Planes in container order: center, foreground, threshold band,
    /// distance, direction x, direction y.
    pub fn planes(&self) -> [&Raster; 6] {
        [&self.center, &self.foreground, &self.threshold_band, &self.distance, &self.direction.x, &self.direction.y]
    }

    pub const PLANE_NAMES: [&'static str; 6] = ["center", "foreground", "threshold_band", "distance", "dir_x", "dir_y"];

    pub fn write_rmlb<W: Write>(&self, mut w: W) -> Result<(), LabelError> {
        w.write_all(RMLB_MAGIC)?;
        w.write_all(&RMLB_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.height as u32).to_le_bytes())?;
        w.write_all(&(self.dims.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.dims.pixels() * 4);
        for plane in self.planes() {
            buf.clear();
            for v in &plane.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_rmlb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 24 * self.dims.pixels());
        self.write_rmlb(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_rmlb<R: Read>(mut r: R) -> Result<Self, LabelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_rmlb_bytes(&bytes)
    }

    pub fn from_rmlb_bytes(bytes: &[u8]) -> Result<Self, LabelError> {
        let fmt = |offset: usize, msg: &str| LabelError::Format { offset: offset as u64, msg: msg.to_string() };
        if bytes.len() < 16 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != RMLB_MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != RMLB_VERSION {
            return Err(fmt(4, &format!("unsupported version {}", word(4))));
        }
        let dims = Dims::new(word(8) as usize, word(12) as usize);
        let expected = 16 + 24 * dims.pixels();
        if bytes.len() < expected {
            return Err(fmt(bytes.len(), "truncated plane data"));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, "trailing bytes after last plane"));
        }
        let mut planes = (0..6).map(|k| {
            let start = 16 + 4 * k * dims.pixels();
            Raster {
                dims,
                data: bytes[start..start + 4 * dims.pixels()]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            }
        });
        let mut next = || planes.next().unwrap();
        Ok(Self {
            dims,
            center: next(),
            foreground: next(),
            threshold_band: next(),
            distance: next(),
            direction: DirectionField { x: next(), y: next() },
        })
    }
}

/// 4-connected component count of the nonzero pixels.
pub fn count_components_4(raster: &Raster) -> usize {
    let Dims { height, width } = raster.dims;
    let mut seen = vec![false; raster.data.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..raster.data.len() {
        if raster.data[start] == 0.0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(px) = stack.pop() {
            let (r, c) = (px / width, px % width);
            let mut visit = |n: usize| {
                if raster.data[n] != 0.0 && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(px - width);
            }
            if r + 1 < height {
                visit(px + width);
            }
            if c > 0 {
                visit(px - 1);
            }
            if c + 1 < width {
                visit(px + 1);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::rect(x0, y0, x0 + s, y0 + s).unwrap()
    }

    #[test]
    fn foreground_square_block() {
        let r = render_foreground(&[sq(5.0, 5.0, 10.0)], Dims::new(20, 20)).raster;
        for row in 0..20 {
            for col in 0..20 {
                let inside = (5..15).contains(&row) && (5..15).contains(&col);
                assert_eq!(r.get(row, col), if inside { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(render_foreground(&[], Dims::new(20, 20)).raster.count_nonzero(), 0);
    }

    #[test]
    fn foreground_union() {
        let r = render_foreground(&[sq(0.0, 0.0, 10.0), sq(5.0, 5.0, 10.0)], Dims::new(20, 20)).raster;
        assert_eq!(r.count_nonzero(), 175);
    }

    #[test]
    fn center_of_large_square() {
        let policy = ShrinkPolicy::default();
        let s = sq(0.0, 0.0, 100.0);
        assert!((policy.shrink_distance(&s) - 21.0).abs() < 1e-12);
        let r = render_center(&[s], Dims::new(128, 128), &policy).raster;
        assert_eq!(r.count_nonzero(), 58 * 58);
        assert_eq!(r.get(21, 21), 1.0);
        assert_eq!(r.get(20, 21), 0.0);
        assert_eq!(r.get(78, 78), 1.0);
        assert_eq!(r.get(79, 78), 0.0);
    }

    #[test]
    fn thin_rectangle_falls_back() {
        // Shrunk strip [1.67, 2.33] contains no pixel center.
        let thin = Polygon::rect(0.5, 2.0, 3.5, 42.0).unwrap();
        let out = render_center(std::slice::from_ref(&thin), Dims::new(48, 8), &ShrinkPolicy::default());
        assert_eq!(out.warnings, vec![LabelWarning { polygon: 0, kind: WarningKind::ShrinkFallback }]);
        assert!(out.raster.count_nonzero() > 0);
    }

    #[test]
    fn distance_and_direction_examples() {
        // Pixel (col, row) has center (col + 0.5, row + 0.5); the pixel whose
        // center is (5, 5) does not exist, so use a square offset by half a pixel.
        let s = Polygon::rect(-0.5, -0.5, 9.5, 9.5).unwrap();
        let dims = Dims::new(12, 12);
        let dist = render_distance(std::slice::from_ref(&s), dims);
        // center (4.5+.5, ...) = (5,5) -> raw 5.0 and the instance maximum.
        assert_eq!(dist.get(4, 4), 1.0);
        // center (1, 5): raw 1.0
        assert!((dist.get(4, 0) - 0.2).abs() < 1e-7);
        let dir = render_direction(std::slice::from_ref(&s), dims);
        assert_eq!((dir.x.get(4, 0), dir.y.get(4, 0)), (-1.0, 0.0));
        // center (5, 9): nearest wall y = 9.5... use the exact 10x10 square instead
        let s10 = Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap();
        let dir = render_direction(std::slice::from_ref(&s10), dims);
        // pixel (col 5, row 9): center (5.5, 9.5), nearest wall y = 10
        assert_eq!((dir.x.get(9, 5), dir.y.get(9, 5)), (0.0, 1.0));
        // pixel (col 0, row 5): center (0.5, 5.5), nearest wall x = 0
        assert_eq!((dir.x.get(5, 0), dir.y.get(5, 0)), (-1.0, 0.0));
    }

    #[test]
    fn band_edges() {
        let policy = ShrinkPolicy::default();
        let s = Polygon::rect(20.5, 20.5, 60.5, 60.5).unwrap();
        let d = policy.shrink_distance(&s); // 40*40*0.84/160 = 8.4
        assert!((d - 8.4).abs() < 1e-12);
        let band = render_threshold_band(std::slice::from_ref(&s), Dims::new(96, 96), &policy).raster;
        // pixel centered on the left edge (x = 20.5)
        assert_eq!(band.get(40, 20), 1.0);
        // 8 px outside: 1 - 8/8.4
        assert!((band.get(40, 12) - (1.0 - 8.0 / 8.4) as f32).abs() < 1e-6);
        // 9 px outside -> beyond D
        assert_eq!(band.get(40, 11), 0.0);
        // exactly D from the boundary is zero: D = 21 for a 100 px square
        let big = Polygon::rect(0.5, 0.5, 100.5, 100.5).unwrap();
        let band = render_threshold_band(std::slice::from_ref(&big), Dims::new(104, 104), &policy).raster;
        assert_eq!(band.get(50, 0), 1.0);
        assert_eq!(band.get(50, 1), (1.0 - 1.0 / 21.0) as f32);
        assert_eq!(band.get(50, 21), 0.0);
        assert!(band.get(50, 20) > 0.0);
    }

    #[test]
    fn policy_validation() {
        assert!(ShrinkPolicy::new(0.0, 1.5).is_err());
        assert!(ShrinkPolicy::new(1.0, 1.5).is_err());
        assert!(ShrinkPolicy::new(0.4, 1.0).is_err());
    }

    #[test]
    fn rmlb_roundtrip_and_rejects() {
        let polys = [sq(3.0, 4.0, 12.0), sq(20.0, 2.0, 8.0)];
        let (maps, _) = LabelMaps::generate(&polys, Dims::new(32, 40), &ShrinkPolicy::default());
        let bytes = maps.to_rmlb_bytes();
        assert_eq!(&bytes[..4], b"RMLB");
        assert_eq!(bytes.len(), 16 + 6 * 4 * 32 * 40);
        assert_eq!(LabelMaps::from_rmlb_bytes(&bytes).unwrap(), maps);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(LabelMaps::from_rmlb_bytes(&bad), Err(LabelError::Format { offset: 0, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(LabelMaps::from_rmlb_bytes(&long).is_err());
        assert!(LabelMaps::from_rmlb_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
