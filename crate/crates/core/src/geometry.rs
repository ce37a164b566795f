//! Polygon primitives for text-region annotations.
//!
//! Coordinates are image pixels with `x` to the right and `y` down. A pixel
//! `(col, row)` covers the unit square `[col, col + 1) x [row, row + 1)` and its
//! center sits at `(col + 0.5, row + 0.5)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} is not finite")]
    NonFinite(usize),
    #[error("vertices {0} and {1} coincide")]
    DuplicateVertex(usize, usize),
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
    #[error("offset by {d} collapses the polygon")]
    Collapse { d: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    fn add_scaled(self, v: Point2, s: f64) -> Point2 {
        Point2::new(self.x + v.x * s, self.y + v.y * s)
    }
}

fn cross(a: Point2, b: Point2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn dot(a: Point2, b: Point2) -> f64 {
    a.x * b.x + a.y * b.y
}

/// Orientation of `c` relative to the directed line `a -> b`.
fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    cross(b.sub(a), c.sub(a))
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching counts.
pub fn segments_intersect(p1: Point2, p2: Point2, p3: Point2, p4: Point2) -> bool {
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p3, p4, p1))
        || (d2 == 0.0 && on_segment(p3, p4, p2))
        || (d3 == 0.0 && on_segment(p1, p2, p3))
        || (d4 == 0.0 && on_segment(p1, p2, p4))
}

/// Closest point to `q` on segment `a..b`.
pub fn closest_on_segment(a: Point2, b: Point2, q: Point2) -> Point2 {
    let ab = b.sub(a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return a;
    }
    let t = (dot(q.sub(a), ab) / len2).clamp(0.0, 1.0);
    a.add_scaled(ab, t)
}

/// Result of a nearest-boundary query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryHit {
    pub distance: f64,
    pub point: Point2,
    pub edge: usize,
}

/// A simple polygon with at least three vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    /// Validates and wraps a vertex ring (closing edge implied).
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        if let Some(i) = vertices.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            if vertices[i] == vertices[j] {
                return Err(GeometryError::DuplicateVertex(i, j));
            }
        }
        let poly = Self { vertices };
        poly.check_simple()?;
        Ok(poly)
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::from_coords(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    fn check_simple(&self) -> Result<(), GeometryError> {
        let n = self.vertices.len();
        let v = &self.vertices;
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            for j in (i + 1)..n {
                let (c, d) = (v[j], v[(j + 1) % n]);
                let adjacent_next = j == i + 1;
                let adjacent_wrap = i == 0 && j == n - 1;
                if adjacent_next || adjacent_wrap {
                    // Adjacent edges share one vertex; they may only overlap
                    // if they fold back onto each other.
                    let (u, w) = if adjacent_next { (b.sub(a), d.sub(c)) } else { (b.sub(a), c.sub(d)) };
                    let folds = cross(u, w) == 0.0 && if adjacent_next { dot(u, w) < 0.0 } else { dot(u, w) > 0.0 };
                    if folds {
                        return Err(GeometryError::SelfIntersecting(i, j));
                    }
                    // A triangle's third vertex can still land on the opposite edge.
                    continue;
                }
                if segments_intersect(a, b, c, d) {
                    return Err(GeometryError::SelfIntersecting(i, j));
                }
            }
        }
        Ok(())
    }

    /// Shoelace sum; positive for clockwise rings in y-down image coordinates.
    pub fn signed_area(&self) -> f64 {
        let twice: f64 = self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum();
        twice * 0.5
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// `(min, max)` corners of the bounding box.
    pub fn bbox(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point2 {
        let a = self.signed_area();
        if a == 0.0 {
            let n = self.vertices.len() as f64;
            let (sx, sy) = self.vertices.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
            return Point2::new(sx / n, sy / n);
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let c = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point2::new(cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Uniform scaling about the area centroid.
    pub fn scaled_about_centroid(&self, s: f64) -> Result<Polygon, GeometryError> {
        let c = self.centroid();
        Polygon::new(self.vertices.iter().map(|p| Point2::new(c.x + (p.x - c.x) * s, c.y + (p.y - c.y) * s)).collect())
    }

    /// Per-axis scaling about the origin, used to map between image resolutions.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Polygon, GeometryError> {
        Polygon::new(self.vertices.iter().map(|p| Point2::new(p.x * sx, p.y * sy)).collect())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon { vertices: self.vertices.iter().map(|p| Point2::new(p.x + dx, p.y + dy)).collect() }
    }

    /// Even-odd point containment. Points on the boundary resolve by the
    /// half-open crossing rule, consistent with [`Polygon::crossings`].
    pub fn contains(&self, q: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > q.y) != (b.y > q.y) {
                let x = a.x + (q.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if q.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Sorted x-coordinates where the horizontal line at `y` crosses the ring.
    pub fn crossings(&self, y: f64) -> Vec<f64> {
        let mut xs: Vec<f64> = self
            .edges()
            .filter(|(a, b)| (a.y > y) != (b.y > y))
            .map(|(a, b)| a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs
    }

    /// Pixel spans whose centers fall inside the polygon, clipped to a
    /// `height x width` raster. Yields `(row, col_start, col_end_exclusive)`.
    pub fn pixel_spans(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let mut spans = Vec::new();
        let (lo, hi) = self.bbox();
        let r0 = (lo.y - 0.5).floor().max(0.0) as usize;
        let r1 = ((hi.y + 0.5).ceil().max(0.0) as usize).min(height);
        for row in r0..r1 {
            let xs = self.crossings(row as f64 + 0.5);
            for pair in xs.chunks_exact(2) {
                // Columns with x0 < col + 0.5 < x1.
                let c0 = ((pair[0] - 0.5).floor() + 1.0).max(0.0);
                let c1 = ((pair[1] - 0.5).ceil()).min(width as f64);
                if c1 > c0 {
                    spans.push((row, c0 as usize, c1 as usize));
                }
            }
        }
        spans
    }

    /// Number of pixel centers inside the polygon on a raster of the given size.
    pub fn pixel_count(&self, height: usize, width: usize) -> usize {
        self.pixel_spans(height, width).iter().map(|&(_, a, b)| b - a).sum()
    }

    /// Exact closest boundary point; ties go to the lowest edge index.
    pub fn nearest_boundary(&self, q: Point2) -> BoundaryHit {
        let mut best = BoundaryHit { distance: f64::INFINITY, point: q, edge: 0 };
        for (i, (a, b)) in self.edges().enumerate() {
            let p = closest_on_segment(a, b, q);
            let d = p.dist(q);
            if d < best.distance {
                best = BoundaryHit { distance: d, point: p, edge: i };
            }
        }
        best
    }

    /// Offsets every edge along its normal by `|d|` (negative `d` moves inward)
    /// and rejoins neighbours with miter joins. Outer joins whose miter would
    /// reach further than `2|d|` from the vertex are beveled instead. Edges
    /// whose offset copy reverses direction are dropped and their neighbours
    /// re-intersected, one at a time.
    pub fn offset(&self, d: f64) -> Result<Polygon, GeometryError> {
        if d == 0.0 {
            return Ok(self.clone());
        }
        let collapse = GeometryError::Collapse { d };
        let v = &self.vertices;
        let n = v.len();
        let sign = if self.signed_area() >= 0.0 { 1.0 } else { -1.0 };
        let dirs: Vec<Point2> = (0..n)
            .map(|i| {
                let e = v[(i + 1) % n].sub(v[i]);
                let len = dot(e, e).sqrt();
                Point2::new(e.x / len, e.y / len)
            })
            .collect();
        // Outward normal for each edge.
        let normals: Vec<Point2> = dirs.iter().map(|u| Point2::new(sign * u.y, -sign * u.x)).collect();
        let origin = |i: usize| v[i].add_scaled(normals[i], d);

        // Join between consecutive active edges `a` then `b`: one point, or
        // two for a bevel.
        let join = |a: usize, b: usize| -> Option<(Point2, Point2)> {
            let adjacent = (a + 1) % n == b;
            let (na, nb) = (normals[a], normals[b]);
            let cos = dot(na, nb);
            let denom = 1.0 + cos;
            let outer = sign * cross(dirs[a], dirs[b]) * d > 0.0;
            if adjacent {
                if outer && denom < 0.5 || denom < 1e-12 {
                    return Some((v[b].add_scaled(na, d), v[b].add_scaled(nb, d)));
                }
                let m = Point2::new(na.x + nb.x, na.y + nb.y);
                let p = v[b].add_scaled(m, d / denom);
                return Some((p, p));
            }
            let (pa, pb) = (origin(a), origin(b));
            let det = cross(dirs[a], dirs[b]);
            if det.abs() < 1e-12 {
                return None;
            }
            let t = cross(pb.sub(pa), dirs[b]) / det;
            let p = pa.add_scaled(dirs[a], t);
            Some((p, p))
        };

        let mut active: Vec<usize> = (0..n).collect();
        let joins = loop {
            if active.len() < 3 {
                return Err(collapse);
            }
            let m = active.len();
            let joins: Option<Vec<(Point2, Point2)>> =
                (0..m).map(|k| join(active[(k + m - 1) % m], active[k])).collect();
            let Some(joins) = joins else { return Err(collapse) };
            // joins[k] sits at the start of active[k].
            let mut worst: Option<(usize, f64)> = None;
            for k in 0..m {
                let start = joins[k].1;
                let end = joins[(k + 1) % m].0;
                let along = dot(end.sub(start), dirs[active[k]]);
                if along <= 0.0 && worst.is_none_or(|(_, w)| along < w) {
                    worst = Some((k, along));
                }
            }
            match worst {
                Some((k, _)) => {
                    active.remove(k);
                }
                None => break joins,
            }
        };

        let scale = {
            let (lo, hi) = self.bbox();
            (hi.x - lo.x).max(hi.y - lo.y).max(1.0)
        };
        let eps = 1e-9 * scale;
        let mut ring: Vec<Point2> = Vec::with_capacity(joins.len() * 2);
        for (a, b) in joins {
            for p in [a, b] {
                if ring.last().is_none_or(|q: &Point2| q.dist(p) > eps) {
                    ring.push(p);
                }
            }
        }
        while ring.len() > 1 && ring[0].dist(*ring.last().unwrap()) <= eps {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(collapse);
        }
        let poly = Polygon::new(ring).map_err(|_| collapse.clone())?;
        if poly.signed_area() * sign <= 0.0 || (d < 0.0 && poly.area() >= self.area()) {
            return Err(collapse);
        }
        Ok(poly)
    }

    /// Whether every interior angle is below 180 degrees.
    pub fn is_convex(&self) -> bool {
        let v = &self.vertices;
        let n = v.len();
        let sign = self.signed_area().signum();
        (0..n).all(|i| orient(v[i], v[(i + 1) % n], v[(i + 2) % n]) * sign >= 0.0)
    }
}
