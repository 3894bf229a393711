//! Planar primitives and raster sets over axis-aligned rectangles.
//!
//! Sets are stored as [`RasterMask`]es: a row-major grid of pixels over a
//! [`Rect`], row `j = 0` at the bottom (`y0`). Every distance in this module is
//! measured between pixel centers.

use std::collections::VecDeque;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rectangle [{0}, {1}] x [{2}, {3}]")]
    DegenerateRect(f64, f64, f64, f64),
    #[error("degenerate segment: endpoints coincide")]
    DegenerateSegment,
    #[error("segments {0} and {1} intersect")]
    IntersectingSegments(usize, usize),
    #[error("empty set has no neighborhoods")]
    EmptySet,
    #[error("neighborhood radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("seed outside set")]
    SeedOutsideSet,
    #[error("raster grids differ")]
    GridMismatch,
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Closed axis-aligned rectangle with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        // written so that NaN fails too
        if !(x0 < x1 && y0 < y1) || !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(GeometryError::DegenerateRect(x0, x1, y0, y1));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub const fn unit() -> Self {
        Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Intersection with `other`, `None` when it has no interior.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        Rect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
        .ok()
    }

    /// Nearest point of the rectangle to `p`.
    pub fn clamp(&self, p: Point) -> Point {
        Point::new(p.x.clamp(self.x0, self.x1), p.y.clamp(self.y0, self.y1))
    }

    pub fn distance_to(&self, p: Point) -> f64 {
        p.dist(self.clamp(p))
    }
}

impl TryFrom<[f64; 4]> for Rect {
    type Error = GeometryError;

    fn try_from([x0, y0, x1, y1]: [f64; 4]) -> Result<Self> {
        Rect::new(x0, y0, x1, y1)
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point; 2]", into = "[Point; 2]")]
pub struct Segment {
    p: Point,
    q: Point,
}

impl Segment {
    pub fn new(p: Point, q: Point) -> Result<Self> {
        if p == q {
            return Err(GeometryError::DegenerateSegment);
        }
        Ok(Segment { p, q })
    }

    pub fn p(&self) -> Point {
        self.p
    }
    pub fn q(&self) -> Point {
        self.q
    }
    pub fn length(&self) -> f64 {
        self.p.dist(self.q)
    }
    pub fn midpoint(&self) -> Point {
        Point::new(0.5 * (self.p.x + self.q.x), 0.5 * (self.p.y + self.q.y))
    }

    /// Whether the relative interiors of the two segments meet.
    ///
    /// Touching at an endpoint (including T-junctions) does not count; a
    /// crossing or a collinear overlap of positive length does.
    pub fn interiors_intersect(&self, other: &Segment) -> bool {
        let (a, b, c, d) = (self.p, self.q, other.p, other.q);
        let o1 = orient(a, b, c);
        let o2 = orient(a, b, d);
        let o3 = orient(c, d, a);
        let o4 = orient(c, d, b);
        if o1 == 0.0 && o2 == 0.0 {
            // collinear: project onto the dominant axis and compare open intervals
            let key = |p: Point| if (b.x - a.x).abs() >= (b.y - a.y).abs() { p.x } else { p.y };
            let (s0, s1) = minmax(key(a), key(b));
            let (t0, t1) = minmax(key(c), key(d));
            return s0.max(t0) < s1.min(t1);
        }
        o1 * o2 < 0.0 && o3 * o4 < 0.0
    }
}

impl TryFrom<[Point; 2]> for Segment {
    type Error = GeometryError;

    fn try_from([p, q]: [Point; 2]) -> Result<Self> {
        Segment::new(p, q)
    }
}

impl From<Segment> for [Point; 2] {
    fn from(s: Segment) -> Self {
        [s.p, s.q]
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    let v = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if v.abs() < 1e-15 {
        0.0
    } else {
        v
    }
}

fn minmax(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Ordered collection of segments whose open interiors are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct SegmentSet {
    segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for i in 0..segments.len() {
            for j in (i + 1)..segments.len() {
                if segments[i].interiors_intersect(&segments[j]) {
                    return Err(GeometryError::IntersectingSegments(i, j));
                }
            }
        }
        Ok(SegmentSet { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
    pub fn len(&self) -> usize {
        self.segments.len()
    }
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }
}

impl TryFrom<Vec<Segment>> for SegmentSet {
    type Error = GeometryError;

    fn try_from(v: Vec<Segment>) -> Result<Self> {
        SegmentSet::new(v)
    }
}

impl From<SegmentSet> for Vec<Segment> {
    fn from(s: SegmentSet) -> Self {
        s.segments
    }
}

/// Boolean raster over a rectangle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskFile", into = "MaskFile")]
pub struct RasterMask {
    rect: Rect,
    nx: usize,
    ny: usize,
    bits: Vec<bool>,
}

// Rect holds only finite floats
impl Eq for Rect {}

impl RasterMask {
    pub fn empty(rect: Rect, nx: usize, ny: usize) -> Self {
        assert!(nx > 0 && ny > 0, "raster must have at least one pixel");
        RasterMask { rect, nx, ny, bits: vec![false; nx * ny] }
    }

    pub fn full(rect: Rect, nx: usize, ny: usize) -> Self {
        let mut m = Self::empty(rect, nx, ny);
        m.bits.fill(true);
        m
    }

    /// Mask of pixels whose center satisfies `pred`.
    pub fn from_fn(rect: Rect, nx: usize, ny: usize, mut pred: impl FnMut(Point) -> bool) -> Self {
        let mut m = Self::empty(rect, nx, ny);
        for j in 0..ny {
            for i in 0..nx {
                let c = m.center(i, j);
                m.bits[j * nx + i] = pred(c);
            }
        }
        m
    }

    pub fn from_bits(rect: Rect, nx: usize, ny: usize, bits: Vec<bool>) -> Result<Self> {
        if nx == 0 || ny == 0 || bits.len() != nx * ny {
            return Err(GeometryError::InvalidRaster(format!(
                "expected {}x{} bits, got {}",
                nx,
                ny,
                bits.len()
            )));
        }
        Ok(RasterMask { rect, nx, ny, bits })
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn pitch(&self) -> (f64, f64) {
        (self.rect.width() / self.nx as f64, self.rect.height() / self.ny as f64)
    }
    pub fn cell_area(&self) -> f64 {
        let (hx, hy) = self.pitch();
        hx * hy
    }

    pub fn center(&self, i: usize, j: usize) -> Point {
        let (hx, hy) = self.pitch();
        Point::new(self.rect.x0 + (i as f64 + 0.5) * hx, self.rect.y0 + (j as f64 + 0.5) * hy)
    }

    /// Pixel containing `p`; points on the far edges belong to the last pixel.
    pub fn pixel_of(&self, p: Point) -> Option<(usize, usize)> {
        if !self.rect.contains(p) {
            return None;
        }
        let (hx, hy) = self.pitch();
        let i = (((p.x - self.rect.x0) / hx) as usize).min(self.nx - 1);
        let j = (((p.y - self.rect.y0) / hy) as usize).min(self.ny - 1);
        Some((i, j))
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.nx + i]
    }
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[j * self.nx + i] = value;
    }

    /// Whether `p` lies in a set pixel; false outside the rectangle.
    pub fn contains_point(&self, p: Point) -> bool {
        self.pixel_of(p).is_some_and(|(i, j)| self.get(i, j))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }
    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.cell_area()
    }

    pub fn same_grid(&self, other: &RasterMask) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.rect == other.rect
    }

    pub fn is_subset_of(&self, other: &RasterMask) -> Result<bool> {
        if !self.same_grid(other) {
            return Err(GeometryError::GridMismatch);
        }
        Ok(self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b))
    }

    pub fn union(&self, other: &RasterMask) -> Result<RasterMask> {
        self.zip_with(other, |a, b| a || b)
    }
    pub fn intersection(&self, other: &RasterMask) -> Result<RasterMask> {
        self.zip_with(other, |a, b| a && b)
    }
    pub fn difference(&self, other: &RasterMask) -> Result<RasterMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> RasterMask {
        let mut m = self.clone();
        m.bits.iter_mut().for_each(|b| *b = !*b);
        m
    }

    fn zip_with(&self, other: &RasterMask, f: impl Fn(bool, bool) -> bool) -> Result<RasterMask> {
        if !self.same_grid(other) {
            return Err(GeometryError::GridMismatch);
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect();
        Ok(RasterMask { bits, ..*self })
    }

    /// Number of set pixels with at least one 4-neighbor that is unset or
    /// outside the raster.
    pub fn boundary_count(&self) -> usize {
        let mut n = 0;
        for j in 0..self.ny {
            for i in 0..self.nx {
                if !self.get(i, j) {
                    continue;
                }
                let edge = i == 0 || j == 0 || i + 1 == self.nx || j + 1 == self.ny;
                if edge
                    || !self.get(i - 1, j)
                    || !self.get(i + 1, j)
                    || !self.get(i, j - 1)
                    || !self.get(i, j + 1)
                {
                    n += 1;
                }
            }
        }
        n
    }

    /// Squared center-to-center distance from every pixel to the nearest set
    /// pixel (`f64::INFINITY` when the mask is empty).
    pub fn squared_distance_to_set(&self) -> Vec<f64> {
        let (hx, hy) = self.pitch();
        squared_edt(self.nx, self.ny, hx, hy, |i, j| self.get(i, j))
    }

    /// Squared distance from every pixel to the nearest unset pixel, where the
    /// plane outside the raster counts as unset (the pixel lattice continues
    /// past the edges).
    pub fn squared_distance_to_complement(&self) -> Vec<f64> {
        let (hx, hy) = self.pitch();
        let (px, py) = (self.nx + 2, self.ny + 2);
        let padded = squared_edt(px, py, hx, hy, |i, j| {
            i == 0 || j == 0 || i == px - 1 || j == py - 1 || !self.get(i - 1, j - 1)
        });
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            out.extend_from_slice(&padded[(j + 1) * px + 1..(j + 1) * px + 1 + self.nx]);
        }
        out
    }
}

/// Outer `eps`-neighborhood and inner `eps`-core of a set.
///
/// `ext` holds every pixel whose center is closer than `eps` to a set pixel
/// center; `int` holds every set pixel whose center is farther than `eps` from
/// every unset pixel center (pixels beyond the raster edge are unset).
pub fn neighborhoods(mask: &RasterMask, eps: f64) -> Result<(RasterMask, RasterMask)> {
    if !(eps > 0.0) {
        return Err(GeometryError::NonPositiveRadius(eps));
    }
    if mask.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let eps2 = eps * eps;
    let to_set = mask.squared_distance_to_set();
    let to_unset = mask.squared_distance_to_complement();
    let ext = RasterMask { bits: to_set.iter().map(|d| *d < eps2).collect(), ..*mask };
    let int = RasterMask {
        bits: mask.bits.iter().zip(&to_unset).map(|(b, d)| *b && *d > eps2).collect(),
        ..*mask
    };
    Ok((ext, int))
}

/// Maximal 4-connected set of set pixels containing the pixel under `seed`.
pub fn connected_component(mask: &RasterMask, seed: Point) -> Result<RasterMask> {
    let (si, sj) = mask.pixel_of(seed).ok_or(GeometryError::SeedOutsideSet)?;
    if !mask.get(si, sj) {
        return Err(GeometryError::SeedOutsideSet);
    }
    let (nx, ny) = (mask.nx, mask.ny);
    let mut out = RasterMask::empty(mask.rect, nx, ny);
    let mut queue = VecDeque::from([(si, sj)]);
    out.set(si, sj, true);
    while let Some((i, j)) = queue.pop_front() {
        let mut visit = |a: usize, b: usize| {
            if mask.get(a, b) && !out.get(a, b) {
                out.set(a, b, true);
                queue.push_back((a, b));
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < nx {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < ny {
            visit(i, j + 1);
        }
    }
    Ok(out)
}

/// Exact squared Euclidean distance transform on an anisotropic pixel
/// lattice (separable lower-envelope-of-parabolas method).
pub(crate) fn squared_edt(
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    is_target: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if is_target(i, j) {
                grid[j * nx + i] = 0.0;
            }
        }
    }
    let mut env = Envelope::default();
    let mut line = vec![0.0; nx.max(ny)];
    let mut out = vec![0.0; nx.max(ny)];
    for j in 0..ny {
        line[..nx].copy_from_slice(&grid[j * nx..(j + 1) * nx]);
        env.transform(&line[..nx], hx * hx, &mut out[..nx]);
        grid[j * nx..(j + 1) * nx].copy_from_slice(&out[..nx]);
    }
    for i in 0..nx {
        for j in 0..ny {
            line[j] = grid[j * nx + i];
        }
        env.transform(&line[..ny], hy * hy, &mut out[..ny]);
        for j in 0..ny {
            grid[j * nx + i] = out[j];
        }
    }
    grid
}

#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    /// `out[q] = min_p f[p] + scale * (q - p)^2` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], scale: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        for (q, fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let Some(&p) = self.v.last() else {
                    self.v.push(q);
                    self.z.push(f64::NEG_INFINITY);
                    break;
                };
                let pf = p as f64;
                let s = ((fq + scale * qf * qf) - (f[p] + scale * pf * pf)) / (2.0 * scale * (qf - pf));
                if s <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(s);
                    break;
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.v.len() && self.z[k + 1] < qf {
                k += 1;
            }
            let p = self.v[k];
            let d = qf - p as f64;
            *o = f[p] + scale * d * d;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    nx: usize,
    ny: usize,
    rect: Rect,
    bits: String,
}

impl From<RasterMask> for MaskFile {
    fn from(m: RasterMask) -> Self {
        let mut bytes = vec![0u8; m.bits.len().div_ceil(8)];
        for (k, b) in m.bits.iter().enumerate() {
            if *b {
                bytes[k / 8] |= 1 << (k % 8);
            }
        }
        MaskFile {
            nx: m.nx,
            ny: m.ny,
            rect: m.rect,
            bits: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<MaskFile> for RasterMask {
    type Error = GeometryError;

    fn try_from(f: MaskFile) -> Result<Self> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(f.bits.as_bytes())
            .map_err(|e| GeometryError::InvalidRaster(format!("bits: {e}")))?;
        let n = f.nx.checked_mul(f.ny).filter(|n| *n > 0).ok_or_else(|| {
            GeometryError::InvalidRaster(format!("nx: bad pixel counts {}x{}", f.nx, f.ny))
        })?;
        if bytes.len() != n.div_ceil(8) {
            return Err(GeometryError::InvalidRaster(format!(
                "bits: expected {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits = (0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect();
        RasterMask::from_bits(f.rect, f.nx, f.ny, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_mask(n: usize, pred: impl FnMut(Point) -> bool) -> RasterMask {
        RasterMask::from_fn(Rect::unit(), n, n, pred)
    }

    #[test]
    fn rect_rejects_degenerate() {
        assert!(Rect::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Rect::new(0.0, 1.0, 1.0, 0.5).is_err());
        assert!(Rect::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert_eq!(Rect::new(0.0, 0.0, 2.0, 0.5).unwrap().area(), 1.0);
    }

    #[test]
    fn segment_intersections() {
        let s = |a: [f64; 2], b: [f64; 2]| Segment::new(a.into(), b.into()).unwrap();
        assert!(Segment::new(Point::new(0.1, 0.1), Point::new(0.1, 0.1)).is_err());
        assert!(s([0., 0.], [1., 1.]).interiors_intersect(&s([0., 1.], [1., 0.])));
        // shared endpoint and T-junction are allowed
        assert!(!s([0., 0.], [0.5, 0.]).interiors_intersect(&s([0.5, 0.], [1., 0.])));
        assert!(!s([0., 0.], [1., 0.]).interiors_intersect(&s([0.5, 0.], [0.5, 1.])));
        assert!(s([0., 0.], [0.6, 0.]).interiors_intersect(&s([0.5, 0.], [1., 0.])));
        assert!(SegmentSet::new(vec![s([0., 0.], [1., 1.]), s([0., 1.], [1., 0.])]).is_err());
        assert_eq!(SegmentSet::new(vec![s([0., 0.], [1., 0.]), s([0., 1.], [1., 1.])]).unwrap().len(), 2);
    }

    #[test]
    fn full_mask_neighborhoods() {
        let n = 50;
        let m = unit_mask(n, |_| true);
        let (ext, int) = neighborhoods(&m, 0.1).unwrap();
        assert_eq!(ext, m);
        let h = 1.0 / n as f64;
        for j in 0..n {
            for i in 0..n {
                let to_edge = [i + 1, n - i, j + 1, n - j].into_iter().min().unwrap() as f64 * h;
                assert_eq!(int.get(i, j), to_edge > 0.1, "pixel {i},{j}");
            }
        }
    }

    #[test]
    fn single_pixel_has_empty_core() {
        let mut m = RasterMask::empty(Rect::unit(), 16, 16);
        m.set(5, 7, true);
        let (ext, int) = neighborhoods(&m, 0.5 / 16.0).unwrap();
        assert_eq!(ext, m);
        assert_eq!(int, m);
        let (ext, int) = neighborhoods(&m, 1.5 / 16.0).unwrap();
        assert_eq!(ext.count(), 9);
        assert!(ext.get(4, 6) && ext.get(6, 8));
        assert!(int.is_empty());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = RasterMask::empty(Rect::unit(), 4, 4);
        assert_eq!(neighborhoods(&m, 0.1), Err(GeometryError::EmptySet));
        let full = RasterMask::full(Rect::unit(), 4, 4);
        assert!(neighborhoods(&full, 0.0).is_err());
    }

    #[test]
    fn disk_core_matches_analytic_area() {
        let n = 256;
        let disk = unit_mask(n, |p| p.dist(Point::new(0.5, 0.5)) < 0.3);
        let (ext, int) = neighborhoods(&disk, 0.05).unwrap();
        let h = 1.0 / n as f64;
        let core = std::f64::consts::PI * 0.25 * 0.25;
        assert!((int.measure() - core).abs() <= 2.0 * 2.0 * std::f64::consts::PI * 0.25 * h);
        let shell = std::f64::consts::PI * 0.35 * 0.35;
        assert!((ext.measure() - shell).abs() <= 2.0 * 2.0 * std::f64::consts::PI * 0.35 * h);
    }

    #[test]
    fn distance_transform_matches_brute_force_anisotropic() {
        let rect = Rect::new(0.0, 0.0, 2.0, 0.5).unwrap();
        let m = RasterMask::from_fn(rect, 23, 17, |p| ((p.x * 7.3).sin() + (p.y * 11.1).cos()) > 1.2);
        let got = m.squared_distance_to_set();
        for j in 0..17 {
            for i in 0..23 {
                let c = m.center(i, j);
                let mut best = f64::INFINITY;
                for b in 0..17 {
                    for a in 0..23 {
                        if m.get(a, b) {
                            let d = c.dist(m.center(a, b));
                            best = best.min(d * d);
                        }
                    }
                }
                assert!((got[j * 23 + i] - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn component_of_full_mask_is_full() {
        let m = RasterMask::full(Rect::unit(), 8, 8);
        assert_eq!(connected_component(&m, Point::new(0.3, 0.9)).unwrap(), m);
    }

    #[test]
    fn component_separates_disjoint_squares() {
        let first = |p: Point| p.x < 0.4 && p.y < 0.4;
        let second = |p: Point| p.x > 0.6 && p.y > 0.6;
        let m = unit_mask(32, |p| first(p) || second(p));
        let c = connected_component(&m, Point::new(0.1, 0.1)).unwrap();
        assert_eq!(c, unit_mask(32, first));
        assert_eq!(
            connected_component(&m, Point::new(0.5, 0.5)),
            Err(GeometryError::SeedOutsideSet)
        );
        assert_eq!(
            connected_component(&m, Point::new(1.5, 0.5)),
            Err(GeometryError::SeedOutsideSet)
        );
    }

    #[test]
    fn components_match_union_find() {
        use rand::{Rng, SeedableRng};
        let n = 64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bits: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.55)).collect();
        let m = RasterMask::from_bits(Rect::unit(), n, n, bits).unwrap();
        let mut parent: Vec<usize> = (0..n * n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for j in 0..n {
            for i in 0..n {
                for (a, b) in [(i + 1, j), (i, j + 1)] {
                    if a < n && b < n && m.get(i, j) && m.get(a, b) {
                        let (r, s) = (find(&mut parent, j * n + i), find(&mut parent, b * n + a));
                        parent[r] = s;
                    }
                }
            }
        }
        for k in (0..n * n).filter(|&k| m.bits()[k]).step_by(37) {
            let c = connected_component(&m, m.center(k % n, k / n)).unwrap();
            let root = find(&mut parent, k);
            for q in 0..n * n {
                let same = m.bits()[q] && find(&mut parent, q) == root;
                assert_eq!(c.bits()[q], same, "seed {k}, pixel {q}");
            }
        }
    }

    #[test]
    fn diagonal_neighbors_are_not_connected() {
        let mut m = RasterMask::empty(Rect::unit(), 4, 4);
        m.set(0, 0, true);
        m.set(1, 1, true);
        let c = connected_component(&m, m.center(0, 0)).unwrap();
        assert_eq!(c.count(), 1);
    }

    #[test]
    fn mask_json_layout() {
        let mut m = RasterMask::empty(Rect::unit(), 3, 3);
        m.set(0, 0, true);
        m.set(2, 2, true);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["nx"], 3);
        assert_eq!(v["rect"], serde_json::json!([0.0, 0.0, 1.0, 1.0]));
        // bit 0 and bit 8, LSB first
        assert_eq!(v["bits"], "AQE=");
        let back: RasterMask = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        let bad = serde_json::json!({"nx": 3, "ny": 3, "rect": [0, 0, 1, 1], "bits": "AQ=="});
        assert!(serde_json::from_value::<RasterMask>(bad).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = RasterMask> {
        (1usize..20, 1usize..20).prop_flat_map(|(nx, ny)| {
            proptest::collection::vec(any::<bool>(), nx * ny)
                .prop_map(move |bits| RasterMask::from_bits(Rect::unit(), nx, ny, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn neighborhoods_bracket_the_set(m in arb_mask(), eps in 0.01f64..0.4) {
            prop_assume!(!m.is_empty());
            let (ext, int) = neighborhoods(&m, eps).unwrap();
            prop_assert!(int.is_subset_of(&m).unwrap());
            prop_assert!(m.is_subset_of(&ext).unwrap());
            prop_assert!(int.measure() <= m.measure() && m.measure() <= ext.measure());
        }

        #[test]
        fn neighborhoods_are_monotone(m in arb_mask(), extra in any::<u64>(), eps in 0.01f64..0.4) {
            prop_assume!(!m.is_empty());
            let mut bigger = m.clone();
            let mut state = extra;
            for j in 0..m.ny() {
                for i in 0..m.nx() {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if state >> 62 == 0 {
                        bigger.set(i, j, true);
                    }
                }
            }
            let (e1, i1) = neighborhoods(&m, eps).unwrap();
            let (e2, i2) = neighborhoods(&bigger, eps).unwrap();
            prop_assert!(e1.is_subset_of(&e2).unwrap());
            prop_assert!(i1.is_subset_of(&i2).unwrap());
        }

        #[test]
        fn component_is_idempotent(m in arb_mask(), pick in any::<prop::sample::Index>()) {
            let set: Vec<usize> = (0..m.nx() * m.ny()).filter(|k| m.bits()[*k]).collect();
            prop_assume!(!set.is_empty());
            let k = set[pick.index(set.len())];
            let c = connected_component(&m, m.center(k % m.nx(), k / m.nx())).unwrap();
            for k2 in (0..m.nx() * m.ny()).filter(|k| c.bits()[*k]) {
                let again = connected_component(&m, m.center(k2 % m.nx(), k2 / m.nx())).unwrap();
                prop_assert_eq!(&again, &c);
            }
        }

        #[test]
        fn mask_json_roundtrip(m in arb_mask()) {
            let s = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(serde_json::from_str::<RasterMask>(&s).unwrap(), m);
        }
    }
}
