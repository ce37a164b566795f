//! From a probability map to scored text polygons: threshold, label
//! 8-connected components, trace each boundary, expand and score.
//!
//! Contours are traced through the centers of boundary pixels, simplified,
//! then pushed out by half a pixel so they follow the outer pixel edges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{closest_on_segment, GeometryError, Point2, Polygon};
use crate::labelgen::{unclip_distance, Dims, Raster};

#[derive(Debug, Error)]
pub enum PostError {
    #[error("invalid post-processing parameters: {0}")]
    Params(String),
    #[error("detection document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("detection document holds an invalid polygon: {0}")]
    Polygon(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostParams {
    pub bin_thresh: f64,
    pub box_score_thresh: f64,
    pub unclip_ratio: f64,
    /// Components with fewer pixels are dropped.
    pub min_area: usize,
}

impl Default for PostParams {
    fn default() -> Self {
        Self { bin_thresh: 0.3, box_score_thresh: 0.5, unclip_ratio: 1.5, min_area: 16 }
    }
}

impl PostParams {
    pub fn validate(&self) -> Result<(), PostError> {
        if !(self.bin_thresh > 0.0 && self.bin_thresh < 1.0) {
            return Err(PostError::Params(format!("bin_thresh must lie in (0, 1), got {}", self.bin_thresh)));
        }
        if !(self.box_score_thresh >= 0.0 && self.box_score_thresh <= 1.0) {
            return Err(PostError::Params(format!(
                "box_score_thresh must lie in [0, 1], got {}",
                self.box_score_thresh
            )));
        }
        if !(self.unclip_ratio > 1.0 && self.unclip_ratio.is_finite()) {
            return Err(PostError::Params(format!("unclip ratio must exceed 1, got {}", self.unclip_ratio)));
        }
        Ok(())
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.dims.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// `P > thresh` per pixel, compared at the map's `f32` precision.
pub fn binarize(prob: &Raster, thresh: f64) -> Mask {
    let t = thresh as f32;
    Mask { dims: prob.dims, data: prob.data.iter().map(|&p| p > t).collect() }
}

/// Component labels: 0 is background, 1..=count in first-encounter scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub count: usize,
    /// Pixel count of component `k` at index `k - 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.dims.width + col]
    }

    fn is(&self, label: u32, row: i64, col: i64) -> bool {
        let (h, w) = (self.dims.height as i64, self.dims.width as i64);
        row >= 0 && col >= 0 && row < h && col < w && self.labels[(row * w + col) as usize] == label
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass 8-connected labeling with union-find.
pub fn connected_components(mask: &Mask) -> Components {
    let (h, w) = (mask.dims.height, mask.dims.width);
    let mut prov = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if !mask.data[r * w + c] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            let mut look = |rr: usize, cc: usize| {
                let l = prov[rr * w + cc];
                if l != 0 {
                    neighbours[k] = l;
                    k += 1;
                }
            };
            if c > 0 {
                look(r, c - 1);
            }
            if r > 0 {
                if c > 0 {
                    look(r - 1, c - 1);
                }
                look(r - 1, c);
                if c + 1 < w {
                    look(r - 1, c + 1);
                }
            }
            let label = if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let mut root = find(&mut parent, neighbours[0]);
                for &n in &neighbours[1..k] {
                    let other = find(&mut parent, n);
                    if other != root {
                        let (lo, hi) = (root.min(other), root.max(other));
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                root
            };
            prov[r * w + c] = label;
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; h * w];
    for i in 0..h * w {
        if prov[i] == 0 {
            continue;
        }
        let root = find(&mut parent, prov[i]) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        labels[i] = remap[root];
        sizes[remap[root] as usize - 1] += 1;
    }
    Components { dims: mask.dims, labels, count: sizes.len(), sizes }
}

/// Moore neighbourhood, clockwise on screen (y down) starting west.
const MOORE: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn moore_index(dx: i64, dy: i64) -> usize {
    MOORE.iter().position(|&d| d == (dx, dy)).expect("unit offset")
}

/// Boundary pixels of component `label` in clockwise order, starting at its
/// first pixel in scan order.
pub fn trace_boundary(comps: &Components, label: u32) -> Vec<(usize, usize)> {
    let w = comps.dims.width;
    let Some(first) = comps.labels.iter().position(|&l| l == label) else {
        return Vec::new();
    };
    let start = ((first % w) as i64, (first / w) as i64);
    let step = |cur: (i64, i64), back: usize| -> Option<((i64, i64), usize)> {
        for i in 1..=8 {
            let d = (back + i) % 8;
            let q = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if comps.is(label, q.1, q.0) {
                let prev = MOORE[(back + i - 1) % 8];
                let b = (cur.0 + prev.0, cur.1 + prev.1);
                return Some((q, moore_index(b.0 - q.0, b.1 - q.1)));
            }
        }
        None
    };
    let mut out = vec![(start.0 as usize, start.1 as usize)];
    let Some((second, mut back)) = step(start, 0) else {
        return out;
    };
    let mut cur = second;
    let limit = 4 * comps.sizes[label as usize - 1] + 8;
    while out.len() <= limit {
        out.push((cur.0 as usize, cur.1 as usize));
        let (next, nb) = step(cur, back).expect("a pixel with a neighbour keeps one");
        if cur == start && next == second {
            out.pop();
            break;
        }
        cur = next;
        back = nb;
    }
    out
}

fn perpendicular(a: Point2, b: Point2, q: Point2) -> f64 {
    closest_on_segment(a, b, q).dist(q)
}

fn douglas_peucker(pts: &[Point2], tol: f64, keep: &mut [bool]) {
    let mut stack = vec![(0, pts.len() - 1)];
    while let Some((i, j)) = stack.pop() {
        if j <= i + 1 {
            continue;
        }
        let (mut best, mut at) = (0.0, i);
        for k in i + 1..j {
            let d = perpendicular(pts[i], pts[j], pts[k]);
            if d > best {
                best = d;
                at = k;
            }
        }
        if best > tol {
            keep[at] = true;
            stack.push((i, at));
            stack.push((at, j));
        }
    }
}

/// Closed-ring Douglas–Peucker: splits at the vertex farthest from the first.
pub fn simplify_closed(ring: &[Point2], tol: f64) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::with_capacity(ring.len());
    for &p in ring {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    while pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    let n = pts.len();
    if n <= 3 {
        return pts;
    }
    let far = (1..n).max_by(|&a, &b| pts[0].dist(pts[a]).total_cmp(&pts[0].dist(pts[b]))).unwrap_or(1);
    let mut closed = pts.clone();
    closed.push(pts[0]);
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    douglas_peucker(&closed[..=far], tol, &mut keep[..=far]);
    douglas_peucker(&closed[far..], tol, &mut keep[far..]);
    (0..n).filter(|&i| keep[i]).map(|i| pts[i]).collect()
}

pub const SIMPLIFY_TOLERANCE: f64 = 0.5;

/// Removes out-and-back excursions `a, b, a` left by one-pixel spurs.
fn remove_spurs(ring: &[Point2]) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(ring.len());
    for &p in ring.iter().chain(ring.first()) {
        if out.len() >= 2 && out[out.len() - 2] == p {
            out.pop();
        } else if out.last() != Some(&p) {
            out.push(p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    // The seam between the end and the start can hide one more excursion.
    while out.len() >= 3 && out[1] == out[out.len() - 1] {
        out.remove(0);
        out.pop();
    }
    out
}

/// Convex hull in clockwise (y-down) order, collinear points dropped.
fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point2, a: Point2, b: Point2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Outline of one component along its outer pixel edges. Components whose
/// boundary pinches to a single pixel fall back to their convex hull.
/// `None` when neither gives a valid polygon (lines and single pixels).
pub fn trace_contour(comps: &Components, label: u32) -> Option<Polygon> {
    let ring: Vec<Point2> =
        trace_boundary(comps, label).into_iter().map(|(x, y)| Point2::new(x as f64 + 0.5, y as f64 + 0.5)).collect();
    let ring = remove_spurs(&ring);
    let simplified = simplify_closed(&ring, SIMPLIFY_TOLERANCE);
    let through_centers = Polygon::new(simplified).or_else(|_| Polygon::new(convex_hull(&ring))).ok()?;
    through_centers.offset(0.5).ok()
}

/// Mean of `prob` over pixels whose centers lie inside `poly`.
pub fn mean_inside(poly: &Polygon, prob: &Raster) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (row, c0, c1) in poly.pixel_spans(prob.dims.height, prob.dims.width) {
        for col in c0..c1 {
            sum += f64::from(prob.get(row, col));
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub polygon: Polygon,
    pub score: f64,
    /// False when the outward offset collapsed and the contour was kept as is.
    pub expanded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub dims: Dims,
    pub detections: Vec<Detection>,
}

/// Why components produced no detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub components: usize,
    pub below_min_area: usize,
    pub invalid_contour: usize,
    pub low_score: usize,
    pub unclip_collapsed: usize,
}

/// Coarser simplification tolerances tried when the outward offset of a
/// jagged contour self-intersects.
const UNCLIP_RETRY_TOLERANCES: [f64; 3] = [1.0, 2.0, 4.0];

/// Outward offset by `d`, retrying on smoother versions of the contour and
/// finally on its convex hull.
fn expand(contour: &Polygon, d: f64) -> Option<Polygon> {
    if let Ok(p) = contour.offset(d) {
        return Some(p);
    }
    for tol in UNCLIP_RETRY_TOLERANCES {
        let smoother = simplify_closed(contour.vertices(), tol);
        if let Some(p) = Polygon::new(smoother).ok().and_then(|s| s.offset(d).ok()) {
            return Some(p);
        }
    }
    Polygon::new(convex_hull(contour.vertices())).ok().and_then(|h| h.offset(d).ok())
}

/// Scores a traced contour and expands it when the score passes.
/// Returns `None` when rejected by score.
pub fn unclip_and_score(contour: &Polygon, prob: &Raster, params: &PostParams) -> Option<Detection> {
    let score = mean_inside(contour, prob)?;
    if score < params.box_score_thresh {
        return None;
    }
    let d = unclip_distance(contour, params.unclip_ratio);
    Some(match expand(contour, d) {
        Some(polygon) => Detection { polygon: start_at_top_left(polygon), score, expanded: true },
        None => Detection { polygon: start_at_top_left(contour.clone()), score, expanded: false },
    })
}

/// Rotates the vertex list to begin at the top-most, then left-most vertex.
fn start_at_top_left(poly: Polygon) -> Polygon {
    let v = poly.vertices();
    let first = (0..v.len()).min_by(|&a, &b| v[a].y.total_cmp(&v[b].y).then(v[a].x.total_cmp(&v[b].x))).unwrap_or(0);
    if first == 0 {
        return poly;
    }
    let mut rotated = v[first..].to_vec();
    rotated.extend_from_slice(&v[..first]);
    Polygon::new(rotated).expect("rotation keeps a valid polygon valid")
}

/// Full post-processing of one probability map.
pub fn detect(prob: &Raster, params: &PostParams) -> (DetectionResult, Diagnostics) {
    let mask = binarize(prob, params.bin_thresh);
    let comps = connected_components(&mask);
    let mut diag = Diagnostics { components: comps.count, ..Diagnostics::default() };
    let mut detections = Vec::new();
    for label in 1..=comps.count as u32 {
        if comps.sizes[label as usize - 1] < params.min_area {
            diag.below_min_area += 1;
            continue;
        }
        let Some(contour) = trace_contour(&comps, label) else {
            diag.invalid_contour += 1;
            continue;
        };
        match unclip_and_score(&contour, prob, params) {
            Some(det) => {
                if !det.expanded {
                    diag.unclip_collapsed += 1;
                }
                detections.push(det);
            }
            None => diag.low_score += 1,
        }
    }
    (DetectionResult { dims: prob.dims, detections }, diag)
}

#[derive(Serialize, Deserialize)]
struct JsonDetection {
    points: Vec<[f64; 2]>,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonResult {
    width: usize,
    height: usize,
    detections: Vec<JsonDetection>,
}

impl DetectionResult {
    pub fn to_json(&self) -> String {
        let doc = JsonResult {
            width: self.dims.width,
            height: self.dims.height,
            detections: self
                .detections
                .iter()
                .map(|d| JsonDetection {
                    points: d.polygon.vertices().iter().map(|p| [p.x, p.y]).collect(),
                    score: d.score,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PostError> {
        let doc: JsonResult = serde_json::from_str(text)?;
        let detections = doc
            .detections
            .into_iter()
            .map(|d| {
                let pts = d.points.iter().map(|p| Point2::new(p[0], p[1])).collect();
                Ok(Detection { polygon: Polygon::new(pts)?, score: d.score, expanded: true })
            })
            .collect::<Result<_, PostError>>()?;
        Ok(Self { dims: Dims::new(doc.height, doc.width), detections })
    }

    pub fn polygons(&self) -> Vec<Polygon> {
        self.detections.iter().map(|d| d.polygon.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(pts: &[(f64, f64)]) -> Vec<Point2> {
        pts.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn spurs_and_hull() {
        let spur = ring(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (2.0, 0.0), (2.0, 1.0), (0.0, 1.0)]);
        assert_eq!(remove_spurs(&spur), ring(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 1.0), (0.0, 1.0)]));
        let square = ring(&[(0.0, 0.0), (2.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 2.0), (1.0, 0.0)]);
        let hull = convex_hull(&square);
        assert_eq!(hull.len(), 4);
        assert!(Polygon::new(hull).unwrap().signed_area() > 0.0);
    }

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask { dims: Dims::new(h, w), data: rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect() }
    }

    fn filled(h: usize, w: usize, v: f32) -> Raster {
        Raster { dims: Dims::new(h, w), data: vec![v; h * w] }
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(binarize(&filled(4, 4, 0.29), 0.3).count(), 0);
        assert_eq!(binarize(&filled(4, 4, 0.31), 0.3).count(), 16);
        assert_eq!(binarize(&filled(4, 4, 0.3), 0.3).count(), 0);
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let m = mask_from(&["##..", "##..", "..##", "..##"]);
        let c = connected_components(&m);
        assert_eq!(c.count, 1);
        assert_eq!(c.sizes, vec![8]);
        let m = mask_from(&["##.##", "##.##"]);
        let c = connected_components(&m);
        assert_eq!(c.count, 2);
        assert_eq!((c.label(0, 0), c.label(0, 4)), (1, 2));
    }

    #[test]
    fn labels_follow_first_encounter() {
        // a U shape whose arms meet only on the last row
        let m = mask_from(&["#..#.#", "#..#..", "####.."]);
        let c = connected_components(&m);
        assert_eq!(c.count, 2);
        assert_eq!(c.label(0, 0), 1);
        assert_eq!(c.label(0, 3), 1);
        assert_eq!(c.label(0, 5), 2);
    }

    #[test]
    fn square_traces_to_four_vertices() {
        let mut rows = vec![String::from("............"); 12];
        for r in rows.iter_mut().take(11).skip(1) {
            *r = format!(".{}.", "#".repeat(10));
        }
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let c = connected_components(&mask_from(&refs));
        let poly = trace_contour(&c, 1).unwrap();
        assert_eq!(poly.len(), 4);
        assert!((poly.area() - 100.0).abs() < 1e-9);
        assert!(poly.signed_area() > 0.0, "clockwise on screen");
    }

    #[test]
    fn trace_visits_boundary_once() {
        let c = connected_components(&mask_from(&["###", "###", "###"]));
        let b = trace_boundary(&c, 1);
        assert_eq!(b, vec![(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)]);
    }

    #[test]
    fn single_pixel_is_dropped_by_area() {
        let mut p = filled(8, 8, 0.0);
        p.set(3, 3, 0.9);
        let (res, diag) = detect(&p, &PostParams::default());
        assert!(res.detections.is_empty());
        assert_eq!(diag.below_min_area, 1);
    }

    #[test]
    fn scoring_and_expansion() {
        let sq = Polygon::rect(5.0, 5.0, 15.0, 15.0).unwrap();
        let det = unclip_and_score(&sq, &filled(24, 24, 1.0), &PostParams::default()).unwrap();
        assert_eq!(det.score, 1.0);
        let (lo, hi) = det.polygon.bbox();
        assert!((hi.x - lo.x - 17.5).abs() < 1e-9 && (hi.y - lo.y - 17.5).abs() < 1e-9);
        assert!(unclip_and_score(&sq, &filled(24, 24, 0.4), &PostParams::default()).is_none());
    }

    #[test]
    fn json_round_trip() {
        let mut p = filled(32, 32, 0.0);
        for r in 8..20 {
            for c in 4..24 {
                p.set(r, c, 0.9);
            }
        }
        let (res, _) = detect(&p, &PostParams::default());
        assert_eq!(res.detections.len(), 1);
        let back = DetectionResult::from_json(&res.to_json()).unwrap();
        assert_eq!(back.polygons(), res.polygons());
        let first = res.detections[0].polygon.vertices()[0];
        assert!(res.detections[0]
            .polygon
            .vertices()
            .iter()
            .all(|v| v.y > first.y || (v.y == first.y && v.x >= first.x)));
    }
}
