//! Stretch certificates, checkerboard refinement and area-convergence checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{embedded_checkerboard, rescaled_checkerboard, CheckerboardSpec, DensityError, DensityField};
use crate::geometry::{neighborhoods, GeometryError, Point, RasterMask, Rect, Segment, SegmentSet};
use crate::plmap::{MapError, PiecewiseAffineMap};
use crate::solver::{mismatch_area, realize_jacobian, SolveError, SolverConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("map sequence is empty")]
    EmptySequence,
    #[error("eps must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("no candidate segment fits the refinement region")]
    NoCandidates,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

pub type Result<T> = std::result::Result<T, CertifyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchCertificate {
    density: DensityField,
    segments: SegmentSet,
    delta: f64,
    kappa: f64,
    level: u32,
    lipschitz_bound: f64,
}

impl StretchCertificate {
    pub fn new(
        density: DensityField,
        segments: SegmentSet,
        delta: f64,
        kappa: f64,
        level: u32,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        let bad = |m: &str| Err(CertifyError::InvalidCertificate(m.to_string()));
        if segments.is_empty() {
            return bad("segment set is empty");
        }
        if !(delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(kappa > -1.0 && kappa.is_finite()) {
            return bad("kappa must be finite and > -1");
        }
        if !(lipschitz_bound >= 1.0 && lipschitz_bound.is_finite()) {
            return bad("L must be finite and >= 1");
        }
        Ok(StretchCertificate { density, segments, delta, kappa, level, lipschitz_bound })
    }

    pub fn density(&self) -> &DensityField {
        &self.density
    }

    pub fn segments(&self) -> &SegmentSet {
        &self.segments
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    /// `(1 + kappa)^i / L`
    pub fn threshold(&self) -> f64 {
        (1.0 + self.kappa).powi(self.level as i32) / self.lipschitz_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Holds { segment: usize, ratio: f64 },
    Violated { max_ratio: f64 },
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateEvaluation {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub mismatch_area: f64,
    pub delta: f64,
    pub threshold: f64,
    /// `(1 + kappa)^i |f(0,0) - f(1,0)|` when both points lie in the domain.
    pub absolute_threshold: Option<f64>,
    /// Whether some segment image is at least `absolute_threshold` long.
    pub absolute_holds: Option<bool>,
}

/// Checks the stretch alternative: either the map misses the density on
/// area `>= delta`, or some segment is stretched by at least the threshold.
pub fn evaluate_certificate(cert: &StretchCertificate, map: &PiecewiseAffineMap, tau: f64) -> Result<CertificateEvaluation> {
    let mismatch = mismatch_area(map, &cert.density, tau)?;
    let threshold = cert.threshold();
    let report = map.stretch_pairs(&cert.segments)?;
    let dom = map.domain();
    let (a, b) = (Point::new(0.0, 0.0), Point::new(1.0, 0.0));
    let absolute_threshold = if dom.contains(a) && dom.contains(b) {
        let scale = (1.0 + cert.kappa).powi(cert.level as i32);
        Some(scale * map.eval(a)?.dist(map.eval(b)?))
    } else {
        None
    };
    let absolute_holds = match absolute_threshold {
        Some(t) => {
            let mut hit = false;
            for s in cert.segments.iter() {
                hit |= map.eval(s.p())?.dist(map.eval(s.q())?) >= t;
            }
            Some(hit)
        }
        None => None,
    };
    let verdict = if mismatch >= cert.delta {
        Verdict::NotApplicable
    } else {
        match report.argmax() {
            Some(k) if report.pairs[k].ratio >= threshold => Verdict::Holds { segment: k, ratio: report.pairs[k].ratio },
            _ => Verdict::Violated { max_ratio: report.max_ratio },
        }
    };
    Ok(CertificateEvaluation {
        verdict,
        mismatch_area: mismatch,
        delta: cert.delta,
        threshold,
        absolute_threshold,
        absolute_holds,
    })
}

/// Largest `kappa` for which every map stretches some segment by at least
/// `(1 + kappa) / L`, i.e. `min_f (L * max_ratio(f) - 1)`.
pub fn estimate_kappa(maps: &[PiecewiseAffineMap], segments: &SegmentSet, lipschitz_bound: f64) -> Result<f64> {
    if maps.is_empty() {
        return Err(CertifyError::EmptySequence);
    }
    let ratios: Vec<f64> = maps
        .par_iter()
        .map(|m| m.stretch_pairs(segments).map(|r| r.max_ratio))
        .collect::<std::result::Result<_, _>>()?;
    Ok(ratios.into_iter().map(|r| lipschitz_bound * r - 1.0).fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub segment: Segment,
    pub ratio: f64,
    pub rect: Rect,
    /// Width of `rect` relative to the previous checkerboard region.
    pub scale: f64,
    pub mismatch_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementState {
    pub density: DensityField,
    pub level: u32,
    /// Rectangle holding the most recent checkerboard.
    pub region: Rect,
    pub cells: usize,
    pub history: Vec<RefinementStep>,
}

impl RefinementState {
    /// Level 0: the checkerboard strip at the bottom of the unit square.
    pub fn new(spec: CheckerboardSpec, nx: usize, ny: usize) -> Result<Self> {
        Ok(RefinementState {
            density: embedded_checkerboard(spec, nx, ny)?,
            level: 0,
            region: spec.strip(),
            cells: spec.n(),
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Error)]
#[error("refinement failed at level {}: {source}", state.level)]
pub struct RefinementError {
    pub state: Box<RefinementState>,
    #[source]
    pub source: CertifyError,
}

/// Horizontal segments joining centers of adjacent checkerboard cells, on
/// three rows of the region.
pub(crate) fn candidate_segments(region: &Rect, cells: usize) -> Vec<Segment> {
    let w = region.width() / cells as f64;
    let mut out = Vec::new();
    for row in 0..3 {
        let y = region.y0() + (row as f64 + 0.5) * region.height() / 3.0;
        for k in 0..cells.saturating_sub(1) {
            let x = region.x0() + (k as f64 + 0.5) * w;
            if let Ok(s) = Segment::new(Point::new(x, y), Point::new(x + w, y)) {
                out.push(s);
            }
        }
    }
    out
}

/// Pixel-aligned neighborhood of the segment, clipped to `bound`.
fn neighborhood_rect(density: &DensityField, segment: &Segment, bound: &Rect) -> Option<(usize, usize, usize, usize)> {
    let pad = 0.25 * segment.length();
    let (p, q) = (segment.p(), segment.q());
    let x0 = p.x.min(q.x) - pad;
    let x1 = p.x.max(q.x) + pad;
    let y0 = p.y.min(q.y) - pad;
    let y1 = p.y.max(q.y) + pad;
    let r = density.rect();
    let (hx, hy) = density.pitch();
    let lo_i = |x: f64| ((x - r.x0()) / hx - 1e-9).floor().max(0.0) as usize;
    let hi_i = |x: f64| (((x - r.x0()) / hx + 1e-9).ceil() as usize).min(density.nx());
    let lo_j = |y: f64| ((y - r.y0()) / hy - 1e-9).floor().max(0.0) as usize;
    let hi_j = |y: f64| (((y - r.y0()) / hy + 1e-9).ceil() as usize).min(density.ny());
    let bi0 = ((bound.x0() - r.x0()) / hx).round() as usize;
    let bi1 = ((bound.x1() - r.x0()) / hx).round() as usize;
    let bj0 = ((bound.y0() - r.y0()) / hy).round() as usize;
    let bj1 = ((bound.y1() - r.y0()) / hy).round() as usize;
    let (i0, i1) = (lo_i(x0).max(bi0), hi_i(x1).min(bi1));
    let (j0, j1) = (lo_j(y0).max(bj0), hi_j(y1).min(bj1));
    (i1 > i0 && j1 > j0).then_some((i0, j0, i1 - i0, j1 - j0))
}

fn refine_step(state: &RefinementState, config: &SolverConfig, spec: CheckerboardSpec) -> Result<RefinementState> {
    let rho = &state.density;
    let id = PiecewiseAffineMap::identity_on(rho.rect(), rho.nx(), rho.ny())?;
    let solved = realize_jacobian(rho, config, &id)?;
    let map = &solved.map;
    let mut best: Option<(Segment, f64)> = None;
    for s in candidate_segments(&state.region, state.cells) {
        let ratio = map.eval(s.p())?.dist(map.eval(s.q())?) / s.length();
        if best.as_ref().is_none_or(|(_, r)| ratio > *r) {
            best = Some((s, ratio));
        }
    }
    let (segment, ratio) = best.ok_or(CertifyError::NoCandidates)?;
    let bound = state.history.last().map_or(rho.rect(), |h| h.rect);
    let (i0, j0, kx, ky) = neighborhood_rect(rho, &segment, &bound).ok_or(CertifyError::NoCandidates)?;
    let grid = rho.grid();
    let (hx, hy) = grid.pitch();
    let r = grid.rect();
    let rect = Rect::new(
        r.x0() + i0 as f64 * hx,
        r.y0() + j0 as f64 * hy,
        r.x0() + (i0 + kx) as f64 * hx,
        r.y0() + (j0 + ky) as f64 * hy,
    )?;
    let local = rho.window(i0, j0, kx, ky)?;
    let patch = rescaled_checkerboard(rect, kx, ky, spec.n(), local.min(), local.max())?;
    let mut values = rho.values().to_vec();
    for j in 0..ky {
        for i in 0..kx {
            values[(j0 + j) * rho.nx() + i0 + i] = patch.get(i, j);
        }
    }
    let density = DensityField::new(rho.rect(), rho.nx(), rho.ny(), values, rho.range())?;
    let mut history = state.history.clone();
    history.push(RefinementStep {
        segment,
        ratio,
        rect,
        scale: rect.width() / state.region.width(),
        mismatch_area: solved.mismatch_area,
    });
    log::info!("level {}: stretch {ratio:.6} on {segment:?}, replaced {kx}x{ky} cells", state.level + 1);
    Ok(RefinementState { density, level: state.level + 1, region: rect, cells: spec.n(), history })
}

/// One refinement: solve, pick the most stretched candidate segment and
/// replace the density around it with a rescaled checkerboard.
pub fn bk_refine(
    state: RefinementState,
    config: &SolverConfig,
    spec: CheckerboardSpec,
) -> std::result::Result<RefinementState, RefinementError> {
    match refine_step(&state, config, spec) {
        Ok(next) => Ok(next),
        Err(source) => Err(RefinementError { state: Box::new(state), source }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Entry {
    /// 1-based position in the sequence.
    pub k: usize,
    pub outer_inclusion: bool,
    pub inner_inclusion: bool,
    pub image_area: f64,
    pub jacobian_integral: f64,
    pub discrepancy: f64,
    /// Twice the area of the boundary pixel band of the rasterized image.
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    /// Least `k` from which both inclusions hold to the end; `None` if the
    /// last map already fails.
    pub k0: Option<usize>,
    pub eps: f64,
    pub raster: Rect,
    pub nx: usize,
    pub ny: usize,
    pub entries: Vec<Lemma2Entry>,
}

fn bounding_box<'a>(maps: impl Iterator<Item = &'a PiecewiseAffineMap>) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for m in maps {
        for p in m.vertices() {
            b = (b.0.min(p.x), b.1.min(p.y), b.2.max(p.x), b.3.max(p.y));
        }
    }
    b
}

/// Rasterizes `f(U)` on `grid`: a pixel is set when its center lies in the
/// image of some triangle and its preimage lies in `U`.
pub fn rasterize_image(map: &PiecewiseAffineMap, region: &RasterMask, grid: &RasterMask) -> Result<RasterMask> {
    let mut out = RasterMask::empty(grid.rect(), grid.nx(), grid.ny());
    let (hx, hy) = grid.pitch();
    let g = grid.rect();
    let topo = map.topology();
    for (t, tri) in topo.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|k| map.vertices()[k]);
        let [da, _, _] = tri.map(|k| {
            let (i, j) = (k % (map.nx() + 1), k / (map.nx() + 1));
            map.domain_vertex(i, j)
        });
        let d = topo.differential(t, map.vertices());
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let inv = [[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]];
        let (xmin, xmax) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (ymin, ymax) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        let i0 = ((xmin - g.x0()) / hx - 0.5).ceil().max(0.0) as usize;
        let j0 = ((ymin - g.y0()) / hy - 0.5).ceil().max(0.0) as usize;
        let i1 = ((((xmax - g.x0()) / hx - 0.5).floor() + 1.0).max(0.0) as usize).min(grid.nx());
        let j1 = ((((ymax - g.y0()) / hy - 0.5).floor() + 1.0).max(0.0) as usize).min(grid.ny());
        let edge = |p: Point, q: Point, r: Point| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        for j in j0..j1 {
            for i in i0..i1 {
                let p = grid.center(i, j);
                if edge(a, b, p) < 0.0 || edge(b, c, p) < 0.0 || edge(c, a, p) < 0.0 {
                    continue;
                }
                let (dx, dy) = (p.x - a.x, p.y - a.y);
                let pre = Point::new(da.x + inv[0][0] * dx + inv[0][1] * dy, da.y + inv[1][0] * dx + inv[1][1] * dy);
                if region.contains_point(pre) {
                    out.set(i, j, true);
                }
            }
        }
    }
    Ok(out)
}

/// Finds the least `k0` such that `f_k(U)` lies in the `eps`-neighborhood of
/// `f(U)` and contains its `eps`-core for every `k >= k0`, and compares the
/// rasterized image areas with the Jacobian integrals over `U`.
pub fn verify_lemma2(
    sequence: &[PiecewiseAffineMap],
    limit: &PiecewiseAffineMap,
    region: &RasterMask,
    eps: f64,
) -> Result<Lemma2Report> {
    if !(eps > 0.0) {
        return Err(CertifyError::NonPositiveEps(eps));
    }
    if sequence.is_empty() {
        return Err(CertifyError::EmptySequence);
    }
    for m in sequence.iter().chain(std::iter::once(limit)) {
        m.triangle_jacobians()?;
    }
    let (nx, ny) = (region.nx(), region.ny());
    let (x0, y0, x1, y1) = bounding_box(sequence.iter().chain(std::iter::once(limit)));
    let pitch = ((x1 - x0) / nx as f64).max((y1 - y0) / ny as f64);
    let pad = eps + 4.0 * pitch;
    let raster = Rect::new(x0 - pad, y0 - pad, x1 + pad, y1 + pad)?;
    let grid = RasterMask::empty(raster, nx, ny);
    let target = rasterize_image(limit, region, &grid)?;
    let (ext, int) = neighborhoods(&target, eps)?;
    let entries: Vec<Lemma2Entry> = sequence
        .par_iter()
        .enumerate()
        .map(|(k, map)| -> Result<Lemma2Entry> {
            let image = rasterize_image(map, region, &grid)?;
            let jac = map.triangle_jacobians()?;
            let mut integral = 0.0;
            for j in 0..region.ny() {
                for i in 0..region.nx() {
                    if region.get(i, j) {
                        integral += jac[map.triangle_at(region.center(i, j))?];
                    }
                }
            }
            integral *= region.cell_area();
            let image_area = image.measure();
            Ok(Lemma2Entry {
                k: k + 1,
                outer_inclusion: image.is_subset_of(&ext)?,
                inner_inclusion: int.is_subset_of(&image)?,
                image_area,
                jacobian_integral: integral,
                discrepancy: (image_area - integral).abs(),
                budget: 2.0 * image.boundary_count() as f64 * image.cell_area(),
            })
        })
        .collect::<Result<_>>()?;
    let mut k0 = None;
    for e in entries.iter().rev() {
        if e.outer_inclusion && e.inner_inclusion {
            k0 = Some(e.k);
        } else {
            break;
        }
    }
    Ok(Lemma2Report { k0, eps, raster, nx, ny, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn horizontal(n: usize) -> SegmentSet {
        let segs = (0..n)
            .map(|k| {
                let y = (k as f64 + 0.5) / n as f64;
                Segment::new(Point::new(0.2, y), Point::new(0.8, y)).unwrap()
            })
            .collect();
        SegmentSet::new(segs).unwrap()
    }

    #[test]
    fn certificate_validation() {
        let rho = DensityField::constant(Rect::unit(), 4, 4, 1.0).unwrap();
        let segs = horizontal(2);
        assert!(StretchCertificate::new(rho.clone(), segs.clone(), 0.0, 0.1, 1, 1.5).is_err());
        assert!(StretchCertificate::new(rho.clone(), SegmentSet::new(vec![]).unwrap(), 0.1, 0.1, 1, 1.5).is_err());
        assert!(StretchCertificate::new(rho.clone(), segs.clone(), 0.1, 0.1, 1, 0.5).is_err());
        let c = StretchCertificate::new(rho, segs, 0.1, 0.21, 2, 1.1).unwrap();
        assert!((c.threshold() - 1.21 * 1.21 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn identity_holds_and_mismatch_is_not_applicable() {
        let rho = DensityField::constant(Rect::unit(), 8, 8, 1.0).unwrap();
        let id = PiecewiseAffineMap::identity(8, 8).unwrap();
        let cert = StretchCertificate::new(rho, horizontal(3), 0.01, 0.0, 1, 1.0).unwrap();
        let ev = evaluate_certificate(&cert, &id, 0.1).unwrap();
        assert!(matches!(ev.verdict, Verdict::Holds { ratio, .. } if (ratio - 1.0).abs() < 1e-12));
        assert_eq!(ev.absolute_threshold, Some(1.0));

        let two = DensityField::constant(Rect::unit(), 8, 8, 2.0).unwrap();
        let cert = StretchCertificate::new(two, horizontal(3), 0.5, 0.0, 1, 1.0).unwrap();
        assert_eq!(evaluate_certificate(&cert, &id, 0.1).unwrap().verdict, Verdict::NotApplicable);
    }

    #[test]
    fn violated_when_threshold_is_out_of_reach() {
        let rho = DensityField::constant(Rect::unit(), 4, 4, 1.0).unwrap();
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let cert = StretchCertificate::new(rho, horizontal(2), 0.1, 1.0, 3, 2.0).unwrap();
        let ev = evaluate_certificate(&cert, &id, 0.1).unwrap();
        assert_eq!(ev.threshold, 4.0);
        assert!(matches!(ev.verdict, Verdict::Violated { max_ratio } if (max_ratio - 1.0).abs() < 1e-12));
    }

    #[test]
    fn kappa_estimate() {
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let wide = id.compose(|p| Point::new(1.2 * p.x, p.y / 1.2));
        let k = estimate_kappa(&[id.clone(), wide], &horizontal(2), 1.1).unwrap();
        assert!((k - 0.1).abs() < 1e-12);
        assert!(estimate_kappa(&[], &horizontal(2), 1.1).is_err());
    }

    #[test]
    fn depth_zero_state() {
        let spec = CheckerboardSpec::new(4, 1.0).unwrap();
        let s = RefinementState::new(spec, 32, 32).unwrap();
        assert_eq!(s.level, 0);
        assert!(s.history.is_empty());
        assert_eq!(s.density, embedded_checkerboard(spec, 32, 32).unwrap());
    }

    #[test]
    fn candidates_join_adjacent_cell_centers() {
        let segs = candidate_segments(&Rect::new(0.0, 0.0, 1.0, 0.25).unwrap(), 4);
        assert_eq!(segs.len(), 9);
        assert_eq!(segs[4].p(), Point::new(0.375, 0.125));
        assert_eq!(segs[4].q(), Point::new(0.625, 0.125));
    }

    #[test]
    fn raster_image_of_identity_is_the_region() {
        let u = RasterMask::from_fn(Rect::unit(), 32, 32, |p| p.dist(Point::new(0.5, 0.5)) < 0.3);
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let grid = RasterMask::empty(Rect::unit(), 32, 32);
        assert_eq!(rasterize_image(&id, &u, &grid).unwrap(), u);
    }

    #[test]
    fn constant_sequence_has_k0_one() {
        let u = RasterMask::from_fn(Rect::unit(), 64, 64, |p| p.dist(Point::new(0.5, 0.5)) < 0.3);
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let r = verify_lemma2(&[id.clone(), id.clone(), id.clone()], &id, &u, 0.05).unwrap();
        assert_eq!(r.k0, Some(1));
        assert!(r.entries.iter().all(|e| e.outer_inclusion && e.inner_inclusion));
        assert!(verify_lemma2(&[], &id, &u, 0.05).is_err());
        assert!(verify_lemma2(&[id.clone()], &id, &u, 0.0).is_err());
    }
}
