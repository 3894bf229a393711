//! Grid-sampled densities: checkerboards, integration, and the two
//! perturbations that plant a bad patch inside an arbitrary density (a
//! partition-of-unity glue for continuous fields, and a floor-and-patch for
//! bounded measurable ones).
//!
//! A [`DensityField`] holds one value per cell center of an `nx x ny` grid and
//! is read as piecewise constant on cells.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{connected_component, GeometryError, Point, RasterMask, Rect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("density values must be positive and finite (sample {index} is {value})")]
    NonPositive { index: usize, value: f64 },
    #[error("declared range [{a}, {b}] does not contain the samples [{min}, {max}]")]
    RangeViolation { a: f64, b: f64, min: f64, max: f64 },
    #[error("expected {expected} samples, got {got}")]
    SampleCount { expected: usize, got: usize },
    #[error("checkerboard needs N >= 1 and c > 0 (got N = {n}, c = {c})")]
    BadCheckerboard { n: usize, c: f64 },
    #[error("cells misaligned with grid: {samples} samples for {cells} cells")]
    Misaligned { samples: usize, cells: usize },
    #[error("resolution mismatch between field and mask")]
    ResolutionMismatch,
    #[error("patch is not aligned with the grid of the field")]
    PatchNotAligned,
    #[error("patch range violates glue bound: values [{min}, {max}] not within [{lo}, {hi}]")]
    PatchRange { min: f64, max: f64, lo: f64, hi: f64 },
    #[error("patch square is not contained in the component")]
    SquareOutsideComponent,
    #[error("component leaves the band [{lo}, {hi}]")]
    ComponentOutsideBand { lo: f64, hi: f64 },
    #[error("weights are not a partition of unity subordinate to the cover: {0}")]
    BadWeights(String),
    #[error("eps = {eps} must lie in (0, (b - a) / 10) with [a, b] = [{a}, {b}]")]
    EpsOutOfRange { eps: f64, a: f64, b: f64 },
    #[error("parameter out of range: {0}")]
    BadParameter(String),
    #[error("band [{lo}, {hi}] has empty preimage")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("no density point found at schedule resolution (best ratio {best})")]
    NoDensityPoint { best: f64 },
    #[error("band occupancy {ratio} below threshold {theta}")]
    LowOccupancy { ratio: f64, theta: f64 },
    #[error("patch value {value} at a band pixel leaves the band [{lo}, {hi}]")]
    PatchLeavesBand { value: f64, lo: f64, hi: f64 },
    #[error("no {side}x{side} square fits inside the component")]
    NoSquareFits { side: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DensityError>;

/// Positive density sampled at cell centers, with a declared value range
/// `[a, b]` that brackets every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityFile", into = "DensityFile")]
pub struct DensityField {
    rect: Rect,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    range: [f64; 2],
}

impl DensityField {
    pub fn new(rect: Rect, nx: usize, ny: usize, values: Vec<f64>, range: [f64; 2]) -> Result<Self> {
        if nx == 0 || ny == 0 || values.len() != nx * ny {
            return Err(DensityError::SampleCount { expected: nx * ny, got: values.len() });
        }
        if let Some((index, &value)) =
            values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(DensityError::NonPositive { index, value });
        }
        let (min, max) = min_max(&values);
        let [a, b] = range;
        if !(a <= min && max <= b) {
            return Err(DensityError::RangeViolation { a, b, min, max });
        }
        Ok(DensityField { rect, nx, ny, values, range })
    }

    /// Field with the declared range set to the sample extremes.
    pub fn from_values(rect: Rect, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        let (min, max) = min_max(&values);
        Self::new(rect, nx, ny, values, [min, max])
    }

    pub fn from_fn(rect: Rect, nx: usize, ny: usize, f: impl Fn(Point) -> f64) -> Result<Self> {
        let grid = RasterMask::empty(rect, nx.max(1), ny.max(1));
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(f(grid.center(i, j)));
            }
        }
        Self::from_values(rect, nx, ny, values)
    }

    pub fn constant(rect: Rect, nx: usize, ny: usize, value: f64) -> Result<Self> {
        Self::from_values(rect, nx, ny, vec![value; nx * ny])
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
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn range(&self) -> [f64; 2] {
        self.range
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
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
        Point::new(self.rect.x0() + (i as f64 + 0.5) * hx, self.rect.y0() + (j as f64 + 0.5) * hy)
    }
    pub fn min(&self) -> f64 {
        min_max(&self.values).0
    }
    pub fn max(&self) -> f64 {
        min_max(&self.values).1
    }

    /// Value of the cell containing `p`.
    pub fn value_at(&self, p: Point) -> Option<f64> {
        self.grid().pixel_of(p).map(|(i, j)| self.get(i, j))
    }

    /// Empty mask on the same grid.
    pub fn grid(&self) -> RasterMask {
        RasterMask::empty(self.rect, self.nx, self.ny)
    }

    pub fn same_grid(&self, mask: &RasterMask) -> bool {
        self.rect == mask.rect() && self.nx == mask.nx() && self.ny == mask.ny()
    }

    pub fn same_grid_as(&self, other: &DensityField) -> bool {
        self.rect == other.rect && self.nx == other.nx && self.ny == other.ny
    }

    /// Copy with a different declared range.
    pub fn with_range(&self, range: [f64; 2]) -> Result<Self> {
        Self::new(self.rect, self.nx, self.ny, self.values.clone(), range)
    }

    /// Sub-grid of `kx x ky` cells starting at cell `(i0, j0)`.
    pub fn window(&self, i0: usize, j0: usize, kx: usize, ky: usize) -> Result<Self> {
        if kx == 0 || ky == 0 || i0 + kx > self.nx || j0 + ky > self.ny {
            return Err(DensityError::BadParameter(format!(
                "window {kx}x{ky} at ({i0}, {j0}) exceeds {}x{} grid",
                self.nx, self.ny
            )));
        }
        let (hx, hy) = self.pitch();
        let rect = Rect::new(
            self.rect.x0() + i0 as f64 * hx,
            self.rect.y0() + j0 as f64 * hy,
            self.rect.x0() + (i0 + kx) as f64 * hx,
            self.rect.y0() + (j0 + ky) as f64 * hy,
        )?;
        let mut values = Vec::with_capacity(kx * ky);
        for j in j0..j0 + ky {
            values.extend_from_slice(&self.values[j * self.nx + i0..j * self.nx + i0 + kx]);
        }
        Self::new(rect, kx, ky, values, self.range)
    }

    /// One line per grid row, bottom row first.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

#[derive(Serialize, Deserialize)]
struct DensityFile {
    nx: usize,
    ny: usize,
    rect: Rect,
    range: [f64; 2],
    values: Vec<f64>,
}

impl From<DensityField> for DensityFile {
    fn from(f: DensityField) -> Self {
        DensityFile { nx: f.nx, ny: f.ny, rect: f.rect, range: f.range, values: f.values }
    }
}

impl TryFrom<DensityFile> for DensityField {
    type Error = DensityError;

    fn try_from(f: DensityFile) -> Result<Self> {
        DensityField::new(f.rect, f.nx, f.ny, f.values, f.range)
    }
}

/// Cell count `n` and amplitude `c` of a checkerboard row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCheckerboard", into = "RawCheckerboard")]
pub struct CheckerboardSpec {
    n: usize,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCheckerboard {
    #[serde(rename = "N")]
    n: usize,
    c: f64,
}

impl CheckerboardSpec {
    pub fn new(n: usize, c: f64) -> Result<Self> {
        if n == 0 || !(c > 0.0) || !c.is_finite() {
            return Err(DensityError::BadCheckerboard { n, c });
        }
        Ok(CheckerboardSpec { n, c })
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> f64 {
        self.c
    }

    /// The row `[0, 1] x [0, 1/N]` holding the checkerboard.
    pub fn strip(&self) -> Rect {
        Rect::new(0.0, 0.0, 1.0, 1.0 / self.n as f64).expect("N >= 1")
    }
}

impl TryFrom<RawCheckerboard> for CheckerboardSpec {
    type Error = DensityError;
    fn try_from(r: RawCheckerboard) -> Result<Self> {
        CheckerboardSpec::new(r.n, r.c)
    }
}

impl From<CheckerboardSpec> for RawCheckerboard {
    fn from(s: CheckerboardSpec) -> Self {
        RawCheckerboard { n: s.n, c: s.c }
    }
}

/// Value of an `n`-cell checkerboard laid across `rect` at abscissa `x`:
/// `lo` on even cells, `hi` on odd cells (cells numbered from 1).
pub fn checkerboard_value(rect: &Rect, n: usize, lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - rect.x0()) / rect.width()).clamp(0.0, 1.0);
    let cell = ((t * n as f64) as usize).min(n - 1) + 1;
    if cell % 2 == 1 {
        hi
    } else {
        lo
    }
}

/// Samples the checkerboard on its strip `[0, 1] x [0, 1/N]`.
pub fn make_checkerboard(spec: CheckerboardSpec, nx: usize, ny: usize) -> Result<DensityField> {
    if nx == 0 || nx % spec.n != 0 {
        return Err(DensityError::Misaligned { samples: nx, cells: spec.n });
    }
    if ny == 0 {
        return Err(DensityError::SampleCount { expected: 1, got: 0 });
    }
    let per_cell = nx / spec.n;
    let mut values = Vec::with_capacity(nx * ny);
    for _ in 0..ny {
        for i in 0..nx {
            let cell = i / per_cell + 1;
            values.push(if cell % 2 == 1 { 1.0 + spec.c } else { 1.0 });
        }
    }
    DensityField::new(spec.strip(), nx, ny, values, [1.0, 1.0 + spec.c])
}

/// The checkerboard strip placed inside the unit square, with value 1 on the
/// rest of the square. `ny` must be a multiple of `N` so the strip is a whole
/// number of rows.
pub fn embedded_checkerboard(spec: CheckerboardSpec, nx: usize, ny: usize) -> Result<DensityField> {
    if ny == 0 || ny % spec.n != 0 {
        return Err(DensityError::Misaligned { samples: ny, cells: spec.n });
    }
    let strip = make_checkerboard(spec, nx, ny / spec.n)?;
    let mut values = strip.values;
    values.resize(nx * ny, 1.0);
    DensityField::new(Rect::unit(), nx, ny, values, [1.0, 1.0 + spec.c])
}

/// Checkerboard of `n` vertical cells spread over `rect`, valued `lo`/`hi`.
pub fn rescaled_checkerboard(rect: Rect, nx: usize, ny: usize, n: usize, lo: f64, hi: f64) -> Result<DensityField> {
    if n == 0 {
        return Err(DensityError::BadCheckerboard { n, c: hi - lo });
    }
    let grid = RasterMask::empty(rect, nx.max(1), ny.max(1));
    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            values.push(checkerboard_value(&rect, n, lo, hi, grid.center(i, j).x));
        }
    }
    DensityField::new(rect, nx, ny, values, [lo.min(hi), lo.max(hi)])
}

/// Midpoint-rule integral of `rho` over the set pixels of `region`.
pub fn integrate(rho: &DensityField, region: &RasterMask) -> Result<f64> {
    if !rho.same_grid(region) {
        return Err(DensityError::ResolutionMismatch);
    }
    let sum: f64 = rho.values.iter().zip(region.bits()).filter(|(_, b)| **b).map(|(v, _)| *v).sum();
    Ok(sum * rho.cell_area())
}

/// Closed band preimage `{lo <= rho <= hi}`.
pub fn band_mask(rho: &DensityField, lo: f64, hi: f64) -> RasterMask {
    let bits = rho.values.iter().map(|v| *v >= lo && *v <= hi).collect();
    RasterMask::from_bits(rho.rect, rho.nx, rho.ny, bits).expect("same grid")
}

/// 4-connected component of the band preimage containing `seed`.
pub fn band_component(rho: &DensityField, lo: f64, hi: f64, seed: Point) -> Result<RasterMask> {
    Ok(connected_component(&band_mask(rho, lo, hi), seed)?)
}

/// Cell offset of an aligned sub-rectangle: `rect` must start on a grid line
/// and cover exactly `kx x ky` cells.
pub(crate) fn aligned_window(grid: &RasterMask, rect: &Rect, kx: usize, ky: usize) -> Result<(usize, usize)> {
    let (hx, hy) = grid.pitch();
    let fi = (rect.x0() - grid.rect().x0()) / hx;
    let fj = (rect.y0() - grid.rect().y0()) / hy;
    let (i0, j0) = (fi.round(), fj.round());
    let tol = 1e-7;
    let aligned = (fi - i0).abs() < tol
        && (fj - j0).abs() < tol
        && (rect.width() / hx - kx as f64).abs() < tol
        && (rect.height() / hy - ky as f64).abs() < tol
        && i0 >= 0.0
        && j0 >= 0.0
        && i0 as usize + kx <= grid.nx()
        && j0 as usize + ky <= grid.ny();
    if !aligned {
        return Err(DensityError::PatchNotAligned);
    }
    Ok((i0 as usize, j0 as usize))
}

/// Pixel-aligned rectangle of `kx x ky` cells at `(i0, j0)`.
pub fn cell_rect(grid: &RasterMask, i0: usize, j0: usize, kx: usize, ky: usize) -> Result<Rect> {
    let (hx, hy) = grid.pitch();
    let r = grid.rect();
    Ok(Rect::new(
        r.x0() + i0 as f64 * hx,
        r.y0() + j0 as f64 * hy,
        r.x0() + (i0 + kx) as f64 * hx,
        r.y0() + (j0 + ky) as f64 * hy,
    )?)
}

/// Weights `{w1, w2}` with `w1 + w2 = 1`, gluing a base density (`w1`) with a
/// patch extension (`w2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionWeights {
    rect: Rect,
    nx: usize,
    ny: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl PartitionWeights {
    pub fn new(rect: Rect, nx: usize, ny: usize, w1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        if w1.len() != nx * ny || w2.len() != nx * ny {
            return Err(DensityError::BadWeights("length mismatch".into()));
        }
        for (k, (a, b)) in w1.iter().zip(&w2).enumerate() {
            if !(*a >= 0.0 && *b >= 0.0) || (a + b - 1.0).abs() > 1e-12 {
                return Err(DensityError::BadWeights(format!("sample {k}: w1 = {a}, w2 = {b}")));
            }
        }
        Ok(PartitionWeights { rect, nx, ny, w1, w2 })
    }

    /// Normalized distance weights for the cover `{plane \ square, component}`:
    /// `w2 = d1 / (d1 + d2)` style blend that is 1 on the square and 0 off
    /// the component.
    pub fn subordinate(square: &Rect, component: &RasterMask) -> Result<Self> {
        let (kx, ky) = {
            let (hx, hy) = component.pitch();
            ((square.width() / hx).round() as usize, (square.height() / hy).round() as usize)
        };
        let (i0, j0) = aligned_window(component, square, kx, ky)?;
        let mut inside = RasterMask::empty(component.rect(), component.nx(), component.ny());
        for j in j0..j0 + ky {
            for i in i0..i0 + kx {
                if !component.get(i, j) {
                    return Err(DensityError::SquareOutsideComponent);
                }
                inside.set(i, j, true);
            }
        }
        let to_square = inside.squared_distance_to_set();
        let to_outside = component.complement().squared_distance_to_set();
        let n = component.nx() * component.ny();
        let mut w1 = Vec::with_capacity(n);
        let mut w2 = Vec::with_capacity(n);
        for k in 0..n {
            if !component.bits()[k] {
                w1.push(1.0);
                w2.push(0.0);
            } else if inside.bits()[k] {
                w1.push(0.0);
                w2.push(1.0);
            } else {
                let d1 = to_square[k].sqrt();
                let d2 = to_outside[k].sqrt();
                // d2 is infinite when the component fills the whole grid
                let t = if d2.is_finite() { d1 / (d1 + d2) } else { 0.0 };
                let t = t.clamp(0.0, 1.0);
                w1.push(t);
                w2.push(1.0 - t);
            }
        }
        Self::new(component.rect(), component.nx(), component.ny(), w1, w2)
    }

    /// `w1 = 1, w2 = 0` everywhere.
    pub fn trivial(rect: Rect, nx: usize, ny: usize) -> Self {
        PartitionWeights { rect, nx, ny, w1: vec![1.0; nx * ny], w2: vec![0.0; nx * ny] }
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }
    pub fn w2(&self) -> &[f64] {
        &self.w2
    }
}

/// A patch extended from its square to a whole component. `field` lives on
/// the component's grid; samples outside `support` carry the patch supremum
/// and are not part of the extension.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExtension {
    pub field: DensityField,
    pub support: RasterMask,
}

fn check_patch_range(patch: &DensityField, lo: f64, hi: f64) -> Result<()> {
    let (min, max) = (patch.min(), patch.max());
    if min < lo || max > hi {
        return Err(DensityError::PatchRange { min, max, lo, hi });
    }
    Ok(())
}

fn locate_patch(grid: &RasterMask, patch: &DensityField) -> Result<(usize, usize)> {
    aligned_window(grid, &patch.rect, patch.nx, patch.ny)
}

/// Continuous-style extension of `patch` to `component`, valued in
/// `[lo, hi]`, equal to the patch on its square, and with the same supremum.
///
/// Off the square, each sample blends the patch value at the nearest point of
/// the square with the patch supremum, moving to the supremum over a distance
/// equal to the longer side of the square.
pub fn extend_patch(patch: &DensityField, component: &RasterMask, range: [f64; 2]) -> Result<PatchExtension> {
    let [lo, hi] = range;
    check_patch_range(patch, lo, hi)?;
    let (i0, j0) = locate_patch(component, patch)?;
    for j in j0..j0 + patch.ny {
        for i in i0..i0 + patch.nx {
            if !component.get(i, j) {
                return Err(DensityError::SquareOutsideComponent);
            }
        }
    }
    let sup = patch.max();
    let square = patch.rect;
    let falloff = square.width().max(square.height());
    let (nx, ny) = (component.nx(), component.ny());
    let mut values = vec![sup; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if !component.get(i, j) {
                continue;
            }
            let k = j * nx + i;
            if (i0..i0 + patch.nx).contains(&i) && (j0..j0 + patch.ny).contains(&j) {
                values[k] = patch.get(i - i0, j - j0);
                continue;
            }
            let c = component.center(i, j);
            let near = square.clamp(c);
            let (pi, pj) = patch.grid().pixel_of(near).expect("clamped into the square");
            let t = (c.dist(near) / falloff).min(1.0);
            values[k] = ((1.0 - t) * patch.get(pi, pj) + t * sup).clamp(lo, hi);
        }
    }
    let field = DensityField::new(component.rect(), nx, ny, values, [lo, hi])?;
    Ok(PatchExtension { field, support: component.clone() })
}

/// Glues a bad patch into `phi`: `rho = phi * w1 + ext * w2`, where `ext`
/// extends the patch over `component`.
///
/// With `[a, b]` the declared range of `phi`, the patch must take values in
/// `[a, a + eps]`, `phi` must stay in that band on `component`, and `w2` must
/// vanish off `component`. The output is bit-identical to `phi` where
/// `w2 = 0` and to the patch where `w1 = 0`; everywhere
/// `|rho - phi| <= eps`, strictly so when either the patch or `phi` avoids the
/// band endpoints.
pub fn perturb_glue(
    phi: &DensityField,
    patch: &DensityField,
    component: &RasterMask,
    weights: &PartitionWeights,
    eps: f64,
) -> Result<DensityField> {
    let [a, b] = phi.range;
    if !(eps > 0.0 && eps < (b - a) / 10.0) {
        return Err(DensityError::EpsOutOfRange { eps, a, b });
    }
    if !phi.same_grid(component) || weights.rect != phi.rect || weights.nx != phi.nx || weights.ny != phi.ny {
        return Err(DensityError::ResolutionMismatch);
    }
    let (lo, hi) = (a, a + eps);
    for (k, inside) in component.bits().iter().enumerate() {
        if *inside && !(phi.values[k] >= lo && phi.values[k] <= hi) {
            return Err(DensityError::ComponentOutsideBand { lo, hi });
        }
        if !*inside && weights.w2[k] != 0.0 {
            return Err(DensityError::BadWeights(format!("w2 nonzero off the component at sample {k}")));
        }
    }
    let ext = extend_patch(patch, component, [lo, hi])?;
    let values = phi
        .values
        .iter()
        .zip(&ext.field.values)
        .zip(weights.w1.iter().zip(&weights.w2))
        .map(|((p, e), (w1, w2))| {
            if *w2 == 0.0 {
                *p
            } else if *w1 == 0.0 {
                *e
            } else {
                p * w1 + e * w2
            }
        })
        .collect();
    DensityField::new(phi.rect, phi.nx, phi.ny, values, phi.range)
}

/// Pointwise floor `max(phi, eps)`.
pub fn truncate_floor(phi: &DensityField, eps: f64) -> Result<DensityField> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DensityError::BadParameter(format!("floor must be positive, got {eps}")));
    }
    let values = phi.values.iter().map(|v| v.max(eps)).collect();
    let [a, b] = phi.range;
    DensityField::new(phi.rect, phi.nx, phi.ny, values, [a.max(eps), b.max(eps)])
}

/// Square found around an approximate density point of a band preimage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensitySquare {
    pub square: Rect,
    pub center: Point,
    pub side: f64,
    pub ratio: f64,
}

/// Side lengths halving from the extent of the band preimage down to four
/// pixels.
pub fn default_square_schedule(phi: &DensityField, band: [f64; 2]) -> Vec<f64> {
    let mask = band_mask(phi, band[0], band[1]);
    let (hx, hy) = phi.pitch();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for j in 0..phi.ny {
        for i in 0..phi.nx {
            if mask.get(i, j) {
                let c = phi.center(i, j);
                x0 = x0.min(c.x - 0.5 * hx);
                x1 = x1.max(c.x + 0.5 * hx);
                y0 = y0.min(c.y - 0.5 * hy);
                y1 = y1.max(c.y + 0.5 * hy);
            }
        }
    }
    if !x0.is_finite() {
        return Vec::new();
    }
    let floor = 4.0 * hx.max(hy);
    let mut side = (x1 - x0).hypot(y1 - y0).min(phi.rect.width().min(phi.rect.height()));
    let mut out = Vec::new();
    while side >= floor {
        out.push(side);
        side *= 0.5;
    }
    if out.is_empty() {
        out.push(floor.min(phi.rect.width().min(phi.rect.height())));
    }
    out
}

/// Scans pixel-aligned squares of each side in `schedule` (in order) and
/// returns the first side at which some square has band occupancy at least
/// `theta`; among those squares the highest occupancy wins, ties going to the
/// first in row-major order.
pub fn find_density_square(
    phi: &DensityField,
    band: [f64; 2],
    schedule: &[f64],
    theta: f64,
) -> Result<DensitySquare> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(DensityError::BadParameter(format!("theta must lie in (0, 1), got {theta}")));
    }
    let mask = band_mask(phi, band[0], band[1]);
    if mask.is_empty() {
        return Err(DensityError::EmptyBand { lo: band[0], hi: band[1] });
    }
    let (nx, ny) = (phi.nx, phi.ny);
    // summed-area table, (nx + 1) x (ny + 1)
    let mut sat = vec![0u32; (nx + 1) * (ny + 1)];
    for j in 0..ny {
        for i in 0..nx {
            sat[(j + 1) * (nx + 1) + i + 1] = mask.get(i, j) as u32 + sat[j * (nx + 1) + i + 1]
                + sat[(j + 1) * (nx + 1) + i]
                - sat[j * (nx + 1) + i];
        }
    }
    let count = |i0: usize, j0: usize, kx: usize, ky: usize| {
        let w = nx + 1;
        sat[(j0 + ky) * w + i0 + kx] + sat[j0 * w + i0] - sat[j0 * w + i0 + kx] - sat[(j0 + ky) * w + i0]
    };
    let (hx, hy) = phi.pitch();
    let mut best_overall = 0.0f64;
    for &side in schedule {
        let kx = ((side / hx).round() as usize).max(1);
        let ky = ((side / hy).round() as usize).max(1);
        if kx > nx || ky > ny {
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for j0 in 0..=ny - ky {
            for i0 in 0..=nx - kx {
                let r = count(i0, j0, kx, ky) as f64 / (kx * ky) as f64;
                if best.is_none_or(|(b, _, _)| r > b) {
                    best = Some((r, i0, j0));
                }
            }
        }
        let (ratio, i0, j0) = best.expect("at least one window");
        best_overall = best_overall.max(ratio);
        if ratio >= theta {
            let square = cell_rect(&mask, i0, j0, kx, ky)?;
            return Ok(DensitySquare { square, center: square.center(), side: square.width(), ratio });
        }
    }
    Err(DensityError::NoDensityPoint { best: best_overall })
}

/// Replaces `phi_eps` on `square`: band-preimage samples take the patch value
/// (which must itself lie in the band), every other sample keeps `phi_eps`.
pub fn patch_linf(
    phi_eps: &DensityField,
    square: &Rect,
    patch: &DensityField,
    band: [f64; 2],
    theta: f64,
) -> Result<DensityField> {
    let [lo, hi] = band;
    let grid = phi_eps.grid();
    let (i0, j0) = aligned_window(&grid, square, patch.nx, patch.ny)?;
    if !(patch.rect.x0() - square.x0()).abs().max((patch.rect.y0() - square.y0()).abs()).le(&1e-9) {
        return Err(DensityError::PatchNotAligned);
    }
    let mut in_band = 0usize;
    for j in j0..j0 + patch.ny {
        for i in i0..i0 + patch.nx {
            let v = phi_eps.get(i, j);
            if v >= lo && v <= hi {
                in_band += 1;
            }
        }
    }
    let ratio = in_band as f64 / (patch.nx * patch.ny) as f64;
    if ratio < theta {
        return Err(DensityError::LowOccupancy { ratio, theta });
    }
    let mut values = phi_eps.values.clone();
    for j in j0..j0 + patch.ny {
        for i in i0..i0 + patch.nx {
            let k = j * phi_eps.nx + i;
            if values[k] >= lo && values[k] <= hi {
                let p = patch.get(i - i0, j - j0);
                if !(p >= lo && p <= hi) {
                    return Err(DensityError::PatchLeavesBand { value: p, lo, hi });
                }
                values[k] = p;
            }
        }
    }
    let [a, b] = phi_eps.range;
    DensityField::new(phi_eps.rect, phi_eps.nx, phi_eps.ny, values, [a.min(lo), b.max(hi)])
}

/// Pixel-aligned `side x side` square inside `component`, centered as deep in
/// the component as possible.
pub fn square_in_component(component: &RasterMask, side: usize) -> Result<Rect> {
    let (nx, ny) = (component.nx(), component.ny());
    if side == 0 || side > nx || side > ny {
        return Err(DensityError::NoSquareFits { side });
    }
    let mut sat = vec![0u32; (nx + 1) * (ny + 1)];
    let w = nx + 1;
    for j in 0..ny {
        for i in 0..nx {
            sat[(j + 1) * w + i + 1] =
                component.get(i, j) as u32 + sat[j * w + i + 1] + sat[(j + 1) * w + i] - sat[j * w + i];
        }
    }
    let depth = component.squared_distance_to_complement();
    let mut best: Option<(f64, usize, usize)> = None;
    let full = (side * side) as u32;
    for j0 in 0..=ny - side {
        for i0 in 0..=nx - side {
            let c = sat[(j0 + side) * w + i0 + side] + sat[j0 * w + i0] - sat[j0 * w + i0 + side] - sat[(j0 + side) * w + i0];
            if c != full {
                continue;
            }
            let mid = (j0 + side / 2) * nx + i0 + side / 2;
            if best.is_none_or(|(d, _, _)| depth[mid] > d) {
                best = Some((depth[mid], i0, j0));
            }
        }
    }
    let (_, i0, j0) = best.ok_or(DensityError::NoSquareFits { side })?;
    cell_rect(component, i0, j0, side, side)
}
