//! Fixtures shared by the kernel benchmarks.

use densjac::{DensityField, PiecewiseAffineMap, Point, RasterMask, Rect};

pub fn disk(n: usize, radius: f64) -> RasterMask {
    let c = Point::new(0.5, 0.5);
    RasterMask::from_fn(Rect::unit(), n, n, |p| p.dist(c) < radius)
}

/// Smooth orientation-preserving warp of the unit square.
pub fn warped(n: usize) -> PiecewiseAffineMap {
    let id = PiecewiseAffineMap::identity(n, n).expect("positive grid");
    id.compose(|p| {
        Point::new(
            p.x + 0.03 * (6.0 * p.y).sin(),
            p.y + 0.03 * (5.0 * p.x).cos(),
        )
    })
}

pub fn ramp(n: usize) -> DensityField {
    DensityField::from_fn(Rect::unit(), n, n, |p| 1.0 + 0.5 * p.x * p.y).expect("positive values")
}
