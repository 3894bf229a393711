//! Piecewise-affine maps on a triangulated rectangular grid.
//!
//! Vertex `(i, j)` sits at domain position `(x0 + i * hx, y0 + j * hy)` and is
//! stored at index `j * (nx + 1) + i`. Every cell is split along its SW-NE
//! diagonal into a lower-right triangle `(SW, SE, NE)` and an upper-left
//! triangle `(SW, NE, NW)`, both counter-clockwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, DensityField};
use crate::geometry::{Point, Rect, Segment, SegmentSet};

/// Triangles with signed image area below this are degenerate.
pub const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("map not a local homeomorphism: triangle {triangle} has signed area {area}")]
    Degenerate { triangle: usize, area: f64 },
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("grid must have at least one cell per axis")]
    EmptyGrid,
    #[error("point ({}, {}) outside the map domain", .0.x, .0.y)]
    OutsideDomain(Point),
    #[error(transparent)]
    Density(#[from] DensityError),
}

pub type Result<T> = std::result::Result<T, MapError>;

/// 2x2 matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Singular values `(s_max, s_min)` of a 2x2 matrix, closed form.
pub fn singular_values(m: &Mat2) -> (f64, f64) {
    let e = 0.5 * (m[0][0] + m[1][1]);
    let f = 0.5 * (m[0][0] - m[1][1]);
    let g = 0.5 * (m[1][0] + m[0][1]);
    let h = 0.5 * (m[1][0] - m[0][1]);
    let q = e.hypot(h);
    let r = f.hypot(g);
    (q + r, (q - r).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapFile", into = "MapFile")]
pub struct PiecewiseAffineMap {
    domain: Rect,
    nx: usize,
    ny: usize,
    vertices: Vec<Point>,
}

/// Bi-Lipschitz constant from per-triangle singular values. When
/// `certified` is false the value is only a lower bound on the true constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLipschitzEstimate {
    pub constant: f64,
    pub certified: bool,
}

impl BiLipschitzEstimate {
    pub fn label(&self) -> &'static str {
        if self.certified {
            "EXACT"
        } else {
            "LOWER_BOUND"
        }
    }
}

impl PiecewiseAffineMap {
    pub fn new(domain: Rect, nx: usize, ny: usize, vertices: Vec<Point>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(MapError::EmptyGrid);
        }
        let expected = (nx + 1) * (ny + 1);
        if vertices.len() != expected {
            return Err(MapError::VertexCount { expected, got: vertices.len() });
        }
        Ok(PiecewiseAffineMap { domain, nx, ny, vertices })
    }

    /// Identity on the unit square.
    pub fn identity(nx: usize, ny: usize) -> Result<Self> {
        Self::identity_on(Rect::unit(), nx, ny)
    }

    pub fn identity_on(domain: Rect, nx: usize, ny: usize) -> Result<Self> {
        Self::from_fn(domain, nx, ny, |p| p)
    }

    /// Interpolates `f` at the grid vertices.
    pub fn from_fn(domain: Rect, nx: usize, ny: usize, f: impl Fn(Point) -> Point) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(MapError::EmptyGrid);
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(f(domain_vertex(&domain, nx, ny, i, j)));
            }
        }
        Self::new(domain, nx, ny, vertices)
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }
    pub fn vertex(&self, i: usize, j: usize) -> Point {
        self.vertices[j * (self.nx + 1) + i]
    }
    pub fn domain_vertex(&self, i: usize, j: usize) -> Point {
        domain_vertex(&self.domain, self.nx, self.ny, i, j)
    }
    pub fn triangle_count(&self) -> usize {
        2 * self.nx * self.ny
    }

    /// Copy with new image positions for the same grid.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Result<Self> {
        Self::new(self.domain, self.nx, self.ny, vertices)
    }

    /// Post-composes the map with `g`.
    pub fn compose(&self, g: impl Fn(Point) -> Point) -> Self {
        PiecewiseAffineMap { vertices: self.vertices.iter().map(|p| g(*p)).collect(), ..self.clone() }
    }

    pub(crate) fn topology(&self) -> Topology {
        Topology::new(&self.domain, self.nx, self.ny)
    }

    /// Affine differential of every triangle, in triangle order.
    pub fn differentials(&self) -> Vec<Mat2> {
        let topo = self.topology();
        (0..topo.triangles.len()).map(|t| topo.differential(t, &self.vertices)).collect()
    }

    fn check_orientation(&self) -> Result<Vec<Mat2>> {
        let topo = self.topology();
        let mut out = Vec::with_capacity(topo.triangles.len());
        for t in 0..topo.triangles.len() {
            let area = topo.signed_image_area(t, &self.vertices);
            if !(area >= DEGENERATE_AREA) {
                return Err(MapError::Degenerate { triangle: t, area });
            }
            out.push(topo.differential(t, &self.vertices));
        }
        Ok(out)
    }

    /// Determinant of the differential on every triangle.
    pub fn triangle_jacobians(&self) -> Result<Vec<f64>> {
        Ok(self.check_orientation()?.iter().map(det2).collect())
    }

    /// Per-cell Jacobian: mean of the cell's two triangle determinants.
    pub fn jacobian_field(&self) -> Result<DensityField> {
        let jac = self.triangle_jacobians()?;
        let values: Vec<f64> = jac.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        Ok(DensityField::from_values(self.domain, self.nx, self.ny, values)?)
    }

    pub fn bilipschitz_constant(&self) -> Result<f64> {
        Ok(self.bilipschitz_estimate()?.constant)
    }

    /// `max(s_max, 1 / s_min)` over triangles, certified exact when the
    /// boundary image is a simple closed curve (all triangles already being
    /// positively oriented).
    pub fn bilipschitz_estimate(&self) -> Result<BiLipschitzEstimate> {
        let diffs = self.check_orientation()?;
        let constant = diffs
            .iter()
            .map(|d| {
                let (smax, smin) = singular_values(d);
                smax.max(1.0 / smin)
            })
            .fold(1.0, f64::max);
        Ok(BiLipschitzEstimate { constant, certified: self.boundary_is_simple() })
    }

    /// Image of the domain boundary as a closed counter-clockwise polygon.
    pub fn boundary_polygon(&self) -> Vec<Point> {
        let (nx, ny) = (self.nx, self.ny);
        let mut out = Vec::with_capacity(2 * (nx + ny));
        out.extend((0..nx).map(|i| self.vertex(i, 0)));
        out.extend((0..ny).map(|j| self.vertex(nx, j)));
        out.extend((1..=nx).rev().map(|i| self.vertex(i, ny)));
        out.extend((1..=ny).rev().map(|j| self.vertex(0, j)));
        out
    }

    /// Sweep over boundary edges sorted by their left end; only edges whose
    /// x-extents overlap are tested against each other.
    pub fn boundary_is_simple(&self) -> bool {
        let poly = self.boundary_polygon();
        let n = poly.len();
        let edges: Vec<(Point, Point)> = (0..n).map(|k| (poly[k], poly[(k + 1) % n])).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let lo = |k: usize| edges[k].0.x.min(edges[k].1.x);
        let hi = |k: usize| edges[k].0.x.max(edges[k].1.x);
        order.sort_by(|a, b| lo(*a).total_cmp(&lo(*b)).then(a.cmp(b)));
        let mut active: Vec<usize> = Vec::new();
        for &e in &order {
            let x = lo(e);
            active.retain(|a| hi(*a) >= x);
            for &a in &active {
                let adjacent = (a + 1) % n == e || (e + 1) % n == a;
                if adjacent {
                    // consecutive edges may only share their common vertex
                    let (shared, pa, pe) = if (a + 1) % n == e {
                        (edges[e].0, edges[a].0, edges[e].1)
                    } else {
                        (edges[a].0, edges[e].0, edges[a].1)
                    };
                    if folds_back(shared, pa, pe) {
                        return false;
                    }
                } else if closed_segments_meet(edges[a], edges[e]) {
                    return false;
                }
            }
            active.push(e);
        }
        true
    }

    fn locate(&self, p: Point) -> Result<(usize, usize, f64, f64)> {
        if !self.domain.contains(p) {
            return Err(MapError::OutsideDomain(p));
        }
        let fx = (p.x - self.domain.x0()) / self.domain.width() * self.nx as f64;
        let fy = (p.y - self.domain.y0()) / self.domain.height() * self.ny as f64;
        let i = (fx.floor() as usize).min(self.nx - 1);
        let j = (fy.floor() as usize).min(self.ny - 1);
        Ok((i, j, fx - i as f64, fy - j as f64))
    }

    /// Image of a domain point by barycentric interpolation.
    pub fn eval(&self, p: Point) -> Result<Point> {
        let (i, j, u, v) = self.locate(p)?;
        let sw = self.vertex(i, j);
        let ne = self.vertex(i + 1, j + 1);
        let (w0, w1, w2, other) = if u >= v {
            (1.0 - u, u - v, v, self.vertex(i + 1, j))
        } else {
            (1.0 - v, u, v - u, self.vertex(i, j + 1))
        };
        // lower-right: (sw, se, ne); upper-left: (sw, ne, nw)
        let (a, b) = if u >= v { (other, ne) } else { (ne, other) };
        Ok(Point::new(w0 * sw.x + w1 * a.x + w2 * b.x, w0 * sw.y + w1 * a.y + w2 * b.y))
    }

    /// Index of the triangle containing `p`.
    pub fn triangle_at(&self, p: Point) -> Result<usize> {
        let (i, j, u, v) = self.locate(p)?;
        Ok(2 * (j * self.nx + i) + usize::from(u < v))
    }

    /// Ratio `|f(p) - f(q)| / |p - q|` for every segment.
    pub fn stretch_pairs(&self, segments: &SegmentSet) -> Result<StretchReport> {
        let mut pairs = Vec::with_capacity(segments.len());
        for s in segments.iter() {
            let fp = self.eval(s.p())?;
            let fq = self.eval(s.q())?;
            pairs.push(StretchPair { segment: *s, ratio: fp.dist(fq) / s.length() });
        }
        Ok(StretchReport::new(pairs))
    }
}

fn domain_vertex(domain: &Rect, nx: usize, ny: usize, i: usize, j: usize) -> Point {
    // exact at the far edges
    let x = if i == nx { domain.x1() } else { domain.x0() + domain.width() * i as f64 / nx as f64 };
    let y = if j == ny { domain.y1() } else { domain.y0() + domain.height() * j as f64 / ny as f64 };
    Point::new(x, y)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, (a, b): (Point, Point)) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn closed_segments_meet(s: (Point, Point), t: (Point, Point)) -> bool {
    let d1 = cross(t.0, t.1, s.0);
    let d2 = cross(t.0, t.1, s.1);
    let d3 = cross(s.0, s.1, t.0);
    let d4 = cross(s.0, s.1, t.1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(s.0, t))
        || (d2 == 0.0 && on_segment(s.1, t))
        || (d3 == 0.0 && on_segment(t.0, s))
        || (d4 == 0.0 && on_segment(t.1, s))
}

/// Edges `shared -> a` and `shared -> b` overlap beyond their common vertex.
fn folds_back(shared: Point, a: Point, b: Point) -> bool {
    let c = cross(shared, a, b);
    let dot = (a.x - shared.x) * (b.x - shared.x) + (a.y - shared.y) * (b.y - shared.y);
    c == 0.0 && dot > 0.0
}

/// Precomputed triangle connectivity and inverse domain edge matrices.
#[derive(Debug, Clone)]
pub(crate) struct Topology {
    pub triangles: Vec<[usize; 3]>,
    pub inv_edges: [Mat2; 2],
    pub domain_area: f64,
}

impl Topology {
    pub fn new(domain: &Rect, nx: usize, ny: usize) -> Self {
        let hx = domain.width() / nx as f64;
        let hy = domain.height() / ny as f64;
        let stride = nx + 1;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let sw = j * stride + i;
                let (se, ne, nw) = (sw + 1, sw + stride + 1, sw + stride);
                triangles.push([sw, se, ne]);
                triangles.push([sw, ne, nw]);
            }
        }
        // domain edge matrices P = [p1 - p0, p2 - p0] (columns)
        let lower: Mat2 = [[hx, hx], [0.0, hy]];
        let upper: Mat2 = [[hx, 0.0], [hy, hy]];
        Topology { triangles, inv_edges: [inv2(&lower), inv2(&upper)], domain_area: 0.5 * hx * hy }
    }

    pub fn edge_matrix(&self, t: usize, v: &[Point]) -> Mat2 {
        let [a, b, c] = self.triangles[t];
        let (p0, p1, p2) = (v[a], v[b], v[c]);
        [[p1.x - p0.x, p2.x - p0.x], [p1.y - p0.y, p2.y - p0.y]]
    }

    pub fn differential(&self, t: usize, v: &[Point]) -> Mat2 {
        mul2(&self.edge_matrix(t, v), &self.inv_edges[t % 2])
    }

    pub fn signed_image_area(&self, t: usize, v: &[Point]) -> f64 {
        0.5 * det2(&self.edge_matrix(t, v))
    }
}

pub(crate) fn mul2(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

pub(crate) fn inv2(m: &Mat2) -> Mat2 {
    let d = det2(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

/// A segment and its stretch ratio under a map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchPair {
    pub segment: Segment,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchReport {
    pub pairs: Vec<StretchPair>,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl StretchReport {
    pub fn new(pairs: Vec<StretchPair>) -> Self {
        let (min_ratio, max_ratio) = pairs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.ratio), hi.max(p.ratio)));
        StretchReport { pairs, min_ratio, max_ratio }
    }

    /// Indices of the pairs that are `a`-stretched (ratio at least `a`).
    pub fn stretched(&self, a: f64) -> Vec<usize> {
        (0..self.pairs.len()).filter(|k| self.pairs[*k].ratio >= a).collect()
    }

    /// Pair with the largest ratio, first one on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, p) in self.pairs.iter().enumerate() {
            if best.is_none_or(|b| p.ratio > self.pairs[b].ratio) {
                best = Some(k);
            }
        }
        best
    }
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    nx: usize,
    ny: usize,
    vertices: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rect: Option<Rect>,
}

impl From<PiecewiseAffineMap> for MapFile {
    fn from(m: PiecewiseAffineMap) -> Self {
        let rect = (m.domain != Rect::unit()).then_some(m.domain);
        MapFile { nx: m.nx, ny: m.ny, vertices: m.vertices, rect }
    }
}

impl TryFrom<MapFile> for PiecewiseAffineMap {
    type Error = MapError;

    fn try_from(f: MapFile) -> Result<Self> {
        PiecewiseAffineMap::new(f.rect.unwrap_or(Rect::unit()), f.nx, f.ny, f.vertices)
    }
}
