//! Constrained fitting of a piecewise-affine map to a target Jacobian.
//!
//! The objective is
//!
//! ```text
//! E(v) = sum_T |T| * ( w_jac * (det D_T - rho_T)^2 + w_bar * B(D_T) )
//! ```
//!
//! plus `w_conf * (|D_T|^2 - 2 det D_T)`, which vanishes exactly on similarities,
//! where `D_T` is the differential on triangle `T` and `B` is a barrier on the
//! eigenvalues `lambda` of `D_T^t D_T` (the squared singular values): it is
//! zero in the interior of `[L^-2, L^2]` and blows up at both ends, so every
//! accepted iterate stays `L`-bi-Lipschitz triangle by triangle. The barrier
//! is a symmetric function of the eigenvalues and therefore smooth in `D_T`
//! even where the singular values coincide.
//!
//! Minimization uses limited-memory quasi-Newton directions (plain gradient
//! descent when `memory == 0`) with Armijo backtracking. The image of the first
//! grid vertex is pinned at the origin; rotations are left free.

use std::collections::VecDeque;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityField;
use crate::geometry::Point;
use crate::plmap::{det2, MapError, Mat2, PiecewiseAffineMap, Topology, DEGENERATE_AREA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("density grid does not match the map grid")]
    GridMismatch,
    #[error("mismatch tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("initial map violates the bi-Lipschitz bound {bound} on triangle {triangle}")]
    InfeasibleInitial { bound: f64, triangle: usize },
    #[error(transparent)]
    Map(#[from] MapError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Bi-Lipschitz bound `L >= 1`.
    pub lipschitz_bound: f64,
    /// Pointwise `|Jac - rho|` threshold used for the mismatch area.
    pub mismatch_tolerance: f64,
    pub max_iterations: usize,
    pub initial_step: f64,
    /// Step multiplier after an accepted step; backtracking halves.
    pub step_growth: f64,
    pub armijo: f64,
    /// Steps below this count as convergence.
    pub min_step: f64,
    pub gradient_tolerance: f64,
    pub jacobian_weight: f64,
    pub barrier_weight: f64,
    pub conformal_weight: f64,
    /// Number of curvature pairs kept for the quasi-Newton direction.
    pub memory: usize,
    /// Solve on successively halved grids first and prolong each result.
    pub multilevel: bool,
    /// Width of the active barrier zone at each end of `[L^-2, L^2]`, as a
    /// fraction of that interval.
    pub barrier_margin: f64,
    /// Total number of runs; run 0 starts from the given map, the others from
    /// randomly jittered copies.
    pub restarts: usize,
    /// Jitter amplitude in units of the grid pitch.
    pub restart_jitter: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lipschitz_bound: 2.0,
            mismatch_tolerance: 0.05,
            max_iterations: 20_000,
            initial_step: 1.0,
            step_growth: 2.0,
            armijo: 1e-4,
            min_step: 1e-12,
            gradient_tolerance: 1e-12,
            jacobian_weight: 1.0,
            barrier_weight: 1e-3,
            conformal_weight: 1.0,
            memory: 8,
            multilevel: true,
            barrier_margin: 0.1,
            restarts: 1,
            restart_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SolveError::InvalidConfig(msg.to_string()));
        if !(self.lipschitz_bound >= 1.0 && self.lipschitz_bound.is_finite()) {
            return bad("lipschitz_bound must be a finite value >= 1");
        }
        if !(self.mismatch_tolerance > 0.0) {
            return bad("mismatch_tolerance must be positive");
        }
        if !(self.initial_step > 0.0 && self.step_growth >= 1.0 && self.min_step > 0.0) {
            return bad("step schedule needs initial_step > 0, step_growth >= 1, min_step > 0");
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad("armijo must lie in (0, 1)");
        }
        if !(self.jacobian_weight >= 0.0 && self.barrier_weight >= 0.0 && self.conformal_weight >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        if !(self.barrier_margin > 0.0 && self.barrier_margin < 0.5) {
            return bad("barrier_margin must lie in (0, 0.5)");
        }
        if !(self.restart_jitter >= 0.0) {
            return bad("restart_jitter must be non-negative");
        }
        Ok(())
    }
}

/// What a solve says about realizability. A success is upper evidence (a
/// map exists); a failure after all restarts is only lower evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Evidence {
    Realized,
    NotRealizedAfterRestarts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub restart: usize,
    pub mismatch_area: f64,
    pub objective: f64,
    pub accepted_steps: usize,
    pub converged: bool,
}

/// Fields excluded from reproducibility comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub config: SolverConfig,
    pub mismatch_area: f64,
    pub achieved_l: f64,
    pub lipschitz_certified: bool,
    /// Area where no `L`-bi-Lipschitz map can come within tolerance.
    pub unreachable_area: f64,
    pub objective: f64,
    pub accepted_steps: usize,
    pub converged: bool,
    pub evidence: Evidence,
    /// Restart that produced the final map.
    pub best_restart: usize,
    pub runs: Vec<RunSummary>,
    /// Objective after every accepted step of the best run, starting with
    /// the initial value.
    pub trace: Vec<f64>,
    pub map: PiecewiseAffineMap,
    pub metadata: Metadata,
}

impl SolveReport {
    /// Objective trace as `iteration,objective` CSV.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,objective\n");
        for (k, e) in self.trace.iter().enumerate() {
            s.push_str(&format!("{k},{e}\n"));
        }
        s
    }
}

/// Area of the cells where `|Jac(map) - rho| > tau`.
pub fn mismatch_area(map: &PiecewiseAffineMap, rho: &DensityField, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(SolveError::NonPositiveTolerance(tau));
    }
    check_grid(map, rho)?;
    let jac = map.jacobian_field()?;
    let n = jac.values().iter().zip(rho.values()).filter(|(j, r)| (*j - *r).abs() > tau).count();
    Ok(n as f64 * rho.cell_area())
}

fn check_grid(map: &PiecewiseAffineMap, rho: &DensityField) -> Result<()> {
    if map.domain() != rho.rect() || map.nx() != rho.nx() || map.ny() != rho.ny() {
        return Err(SolveError::GridMismatch);
    }
    Ok(())
}

/// Clamped log barrier: zero for `d >= dhat`, `+inf` for `d <= 0`, C2 at `dhat`.
fn barrier(d: f64, dhat: f64) -> f64 {
    if d >= dhat {
        0.0
    } else if d <= 0.0 {
        f64::INFINITY
    } else {
        -(d - dhat) * (d - dhat) * (d / dhat).ln()
    }
}

fn barrier_deriv(d: f64, dhat: f64) -> f64 {
    if d >= dhat || d <= 0.0 {
        0.0
    } else {
        -2.0 * (d - dhat) * (d / dhat).ln() - (d - dhat) * (d - dhat) / d
    }
}

/// Discretized objective for one density and config.
#[derive(Debug, Clone)]
pub struct Objective {
    topo: Topology,
    /// Target value per triangle.
    target: Vec<f64>,
    jacobian_weight: f64,
    barrier_weight: f64,
    conformal_weight: f64,
    lo: f64,
    hi: f64,
    dhat: f64,
}

impl Objective {
    pub fn new(rho: &DensityField, config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let topo = Topology::new(&rho.rect(), rho.nx(), rho.ny());
        let target = rho.values().iter().flat_map(|v| [*v, *v]).collect();
        let l2 = config.lipschitz_bound * config.lipschitz_bound;
        let (lo, hi) = (1.0 / l2, l2);
        Ok(Objective {
            topo,
            target,
            jacobian_weight: config.jacobian_weight,
            barrier_weight: config.barrier_weight,
            conformal_weight: config.conformal_weight,
            lo,
            hi,
            dhat: config.barrier_margin * (hi - lo),
        })
    }

    /// Eigenvalues of `D^t D`, largest first.
    fn stretch_eigs(d: &Mat2) -> (f64, f64, [f64; 3]) {
        let p = d[0][0] * d[0][0] + d[1][0] * d[1][0];
        let q = d[0][0] * d[0][1] + d[1][0] * d[1][1];
        let r = d[0][1] * d[0][1] + d[1][1] * d[1][1];
        let mid = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        (mid + rad, mid - rad, [p, q, r])
    }

    fn within_bounds(&self, l1: f64, l2: f64) -> bool {
        if self.dhat > 0.0 {
            l1 < self.hi && l2 > self.lo
        } else {
            // L = 1: no interior, allow rounding only
            let slack = 1e-12;
            l1 <= self.hi * (1.0 + slack) && l2 >= self.lo * (1.0 - slack)
        }
    }

    fn eig_barrier(&self, lambda: f64) -> f64 {
        if self.dhat > 0.0 {
            barrier(self.hi - lambda, self.dhat) + barrier(lambda - self.lo, self.dhat)
        } else {
            0.0
        }
    }

    fn eig_barrier_deriv(&self, lambda: f64) -> f64 {
        if self.dhat > 0.0 {
            -barrier_deriv(self.hi - lambda, self.dhat) + barrier_deriv(lambda - self.lo, self.dhat)
        } else {
            0.0
        }
    }

    /// Triangle energy (unscaled by area); `None` when infeasible.
    fn triangle_energy(&self, t: usize, v: &[Point]) -> Option<f64> {
        if self.topo.signed_image_area(t, v) < DEGENERATE_AREA {
            return None;
        }
        let d = self.topo.differential(t, v);
        let (l1, l2, _) = Self::stretch_eigs(&d);
        if !self.within_bounds(l1, l2) {
            return None;
        }
        let det = det2(&d);
        let r = det - self.target[t];
        let b = self.eig_barrier(l1) + self.eig_barrier(l2);
        let conf = l1 + l2 - 2.0 * det;
        Some(self.jacobian_weight * r * r + self.barrier_weight * b + self.conformal_weight * conf)
    }

    /// Objective value, `+inf` outside the feasible set.
    pub fn value(&self, v: &[Point]) -> f64 {
        let mut sum = 0.0;
        for t in 0..self.topo.triangles.len() {
            match self.triangle_energy(t, v) {
                Some(e) => sum += e,
                None => return f64::INFINITY,
            }
        }
        sum * self.topo.domain_area
    }

    /// Objective value and its gradient with respect to every vertex.
    pub fn value_and_gradient(&self, v: &[Point]) -> (f64, Vec<Point>) {
        let mut grad = vec![Point::new(0.0, 0.0); v.len()];
        let mut sum = 0.0;
        let area = self.topo.domain_area;
        for t in 0..self.topo.triangles.len() {
            let Some(e) = self.triangle_energy(t, v) else {
                return (f64::INFINITY, grad);
            };
            sum += e;
            let d = self.topo.differential(t, v);
            let r = det2(&d) - self.target[t];
            // dE/dD from the Jacobian term: 2 w r cof(D)
            let s = 2.0 * self.jacobian_weight * r;
            let mut g: Mat2 = [[s * d[1][1], -s * d[1][0]], [-s * d[0][1], s * d[0][0]]];
            // conformal term: 2 w (D - cof(D))
            let c = 2.0 * self.conformal_weight;
            g[0][0] += c * (d[0][0] - d[1][1]);
            g[0][1] += c * (d[0][1] + d[1][0]);
            g[1][0] += c * (d[1][0] + d[0][1]);
            g[1][1] += c * (d[1][1] - d[0][0]);
            let (l1, l2, [p, q, rr]) = Self::stretch_eigs(&d);
            let (g1, g2) = (self.eig_barrier_deriv(l1), self.eig_barrier_deriv(l2));
            if g1 != 0.0 || g2 != 0.0 {
                // G = sum_k g'(l_k) v_k v_k^t = a I + b C
                let (a, b) = if l1 - l2 > 1e-9 * (1.0 + l1) {
                    let b = (g1 - g2) / (l1 - l2);
                    (g1 - b * l1, b)
                } else {
                    (0.5 * (g1 + g2), 0.0)
                };
                let gm: Mat2 = [[a + b * p, b * q], [b * q, a + b * rr]];
                let w = 2.0 * self.barrier_weight;
                for i in 0..2 {
                    for k in 0..2 {
                        g[i][k] += w * (d[i][0] * gm[0][k] + d[i][1] * gm[1][k]);
                    }
                }
            }
            // chain through D = E P^-1: dE/dE = dE/dD P^-t
            let pinv = &self.topo.inv_edges[t % 2];
            let m: Mat2 = [
                [g[0][0] * pinv[0][0] + g[0][1] * pinv[0][1], g[0][0] * pinv[1][0] + g[0][1] * pinv[1][1]],
                [g[1][0] * pinv[0][0] + g[1][1] * pinv[0][1], g[1][0] * pinv[1][0] + g[1][1] * pinv[1][1]],
            ];
            let [i0, i1, i2] = self.topo.triangles[t];
            grad[i1].x += area * m[0][0];
            grad[i1].y += area * m[1][0];
            grad[i2].x += area * m[0][1];
            grad[i2].y += area * m[1][1];
            grad[i0].x -= area * (m[0][0] + m[0][1]);
            grad[i0].y -= area * (m[1][0] + m[1][1]);
        }
        (sum * area, grad)
    }
}

struct Run {
    map: PiecewiseAffineMap,
    objective: f64,
    trace: Vec<f64>,
    accepted: usize,
    converged: bool,
}

fn dot(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.x * q.x + p.y * q.y).sum()
}

/// Two-loop recursion: `-H g` from the stored curvature pairs.
fn quasi_newton_direction(g: &[Point], pairs: &VecDeque<(Vec<Point>, Vec<Point>, f64)>) -> Vec<Point> {
    let mut q: Vec<Point> = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            qi.x -= a * yi.x;
            qi.y -= a * yi.y;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            qi.x *= gamma;
            qi.y *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            qi.x += (a - b) * si.x;
            qi.y += (a - b) * si.y;
        }
    }
    q.iter().map(|p| Point::new(-p.x, -p.y)).collect()
}

fn descend(obj: &Objective, start: &PiecewiseAffineMap, config: &SolverConfig) -> Result<Run> {
    let origin = start.vertices()[0];
    let mut x: Vec<Point> =
        start.vertices().iter().map(|p| Point::new(p.x - origin.x, p.y - origin.y)).collect();
    let (mut e, mut g) = obj.value_and_gradient(&x);
    g[0] = Point::new(0.0, 0.0);
    let mut trace = vec![e];
    let mut gd_step = config.initial_step;
    let mut pairs: VecDeque<(Vec<Point>, Vec<Point>, f64)> = VecDeque::new();
    let mut accepted = 0;
    let mut converged = false;
    let mut trial = x.clone();
    for _ in 0..config.max_iterations {
        let gn2 = dot(&g, &g);
        if e == 0.0 || gn2.sqrt() <= config.gradient_tolerance {
            converged = true;
            break;
        }
        let (dir, mut step, quasi) = if pairs.is_empty() {
            (g.iter().map(|p| Point::new(-p.x, -p.y)).collect::<Vec<_>>(), gd_step, false)
        } else {
            let d = quasi_newton_direction(&g, &pairs);
            if dot(&d, &g) < 0.0 {
                (d, 1.0, true)
            } else {
                pairs.clear();
                (g.iter().map(|p| Point::new(-p.x, -p.y)).collect(), gd_step, false)
            }
        };
        let slope = dot(&dir, &g);
        let found = loop {
            for ((t, p), d) in trial.iter_mut().zip(&x).zip(&dir) {
                *t = Point::new(p.x + step * d.x, p.y + step * d.y);
            }
            let et = obj.value(&trial);
            if et <= e + config.armijo * step * slope {
                break true;
            }
            step *= 0.5;
            if step < config.min_step {
                break false;
            }
        };
        if !found {
            if quasi {
                // retry along the gradient before giving up
                pairs.clear();
                continue;
            }
            converged = true;
            break;
        }
        let (e_new, mut g_new) = obj.value_and_gradient(&trial);
        g_new[0] = Point::new(0.0, 0.0);
        if config.memory > 0 {
            let s: Vec<Point> = trial.iter().zip(&x).map(|(a, b)| Point::new(a.x - b.x, a.y - b.y)).collect();
            let y: Vec<Point> = g_new.iter().zip(&g).map(|(a, b)| Point::new(a.x - b.x, a.y - b.y)).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if pairs.len() == config.memory {
                    pairs.pop_front();
                }
                pairs.push_back((s, y, 1.0 / sy));
            }
        }
        if !quasi {
            gd_step = step * config.step_growth;
        }
        std::mem::swap(&mut x, &mut trial);
        e = e_new;
        g = g_new;
        trace.push(e);
        accepted += 1;
    }
    Ok(Run { map: start.with_vertices(x)?, objective: e, trace, accepted, converged })
}

fn coarsen(rho: &DensityField) -> Option<DensityField> {
    let (nx, ny) = (rho.nx(), rho.ny());
    if nx % 2 != 0 || ny % 2 != 0 || nx < 4 || ny < 4 {
        return None;
    }
    let (cx, cy) = (nx / 2, ny / 2);
    let mut values = Vec::with_capacity(cx * cy);
    for j in 0..cy {
        for i in 0..cx {
            let sum = rho.get(2 * i, 2 * j)
                + rho.get(2 * i + 1, 2 * j)
                + rho.get(2 * i, 2 * j + 1)
                + rho.get(2 * i + 1, 2 * j + 1);
            values.push(0.25 * sum);
        }
    }
    DensityField::from_values(rho.rect(), cx, cy, values).ok()
}

/// Restriction to every `stride`-th grid vertex.
fn restrict(map: &PiecewiseAffineMap, stride: usize) -> Result<PiecewiseAffineMap> {
    let (cx, cy) = (map.nx() / stride, map.ny() / stride);
    let mut v = Vec::with_capacity((cx + 1) * (cy + 1));
    for j in 0..=cy {
        for i in 0..=cx {
            v.push(map.vertex(stride * i, stride * j));
        }
    }
    Ok(PiecewiseAffineMap::new(map.domain(), cx, cy, v)?)
}

/// Exact prolongation to the grid refined twice in each direction; every
/// fine triangle lies in one coarse triangle.
fn prolong(map: &PiecewiseAffineMap) -> Result<PiecewiseAffineMap> {
    let (nx, ny) = (2 * map.nx(), 2 * map.ny());
    let mid = |a: Point, b: Point| Point::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let (ci, cj) = (i / 2, j / 2);
            v.push(match (i % 2, j % 2) {
                (0, 0) => map.vertex(ci, cj),
                (1, 0) => mid(map.vertex(ci, cj), map.vertex(ci + 1, cj)),
                (0, 1) => mid(map.vertex(ci, cj), map.vertex(ci, cj + 1)),
                _ => mid(map.vertex(ci, cj), map.vertex(ci + 1, cj + 1)),
            });
        }
    }
    Ok(PiecewiseAffineMap::new(map.domain(), nx, ny, v)?)
}

fn multilevel_descend(
    obj: &Objective,
    rho: &DensityField,
    start: &PiecewiseAffineMap,
    config: &SolverConfig,
) -> Result<Run> {
    if !config.multilevel {
        return descend(obj, start, config);
    }
    let mut levels = Vec::new();
    let mut cur = rho.clone();
    while let Some(c) = coarsen(&cur) {
        levels.push(c.clone());
        cur = c;
    }
    // coarsest first; skip levels where the restricted start is infeasible
    let mut current: Option<PiecewiseAffineMap> = None;
    for (depth, level) in levels.iter().enumerate().rev() {
        let level_obj = Objective::new(level, config)?;
        let init = match current.take() {
            Some(m) => m,
            None => {
                let m = restrict(start, 1 << (depth + 1))?;
                if !level_obj.value(m.vertices()).is_finite() {
                    continue;
                }
                m
            }
        };
        let run = descend(&level_obj, &init, config)?;
        log::trace!("level {}x{}: objective {:.6e}", level.nx(), level.ny(), run.objective);
        current = Some(prolong(&run.map)?);
    }
    match current {
        Some(m) if obj.value(m.vertices()) <= obj.value(start.vertices()) => descend(obj, &m, config),
        _ => descend(obj, start, config),
    }
}

fn jittered(start: &PiecewiseAffineMap, obj: &Objective, config: &SolverConfig, restart: usize) -> PiecewiseAffineMap {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64));
    let h = (start.domain().width() / start.nx() as f64).min(start.domain().height() / start.ny() as f64);
    let offsets: Vec<Point> = (0..start.vertices().len())
        .map(|_| Point::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
        .collect();
    let mut amp = config.restart_jitter * h;
    for _ in 0..20 {
        let v: Vec<Point> = start
            .vertices()
            .iter()
            .zip(&offsets)
            .map(|(p, o)| Point::new(p.x + amp * o.x, p.y + amp * o.y))
            .collect();
        if obj.value(&v).is_finite() {
            return start.with_vertices(v).expect("same grid");
        }
        amp *= 0.5;
    }
    start.clone()
}

/// Fits `initial` to `rho` under the bi-Lipschitz bound, keeping the best of
/// `config.restarts` runs (smallest mismatch area, then smallest objective,
/// then lowest restart index). Restarts run concurrently.
pub fn realize_jacobian(rho: &DensityField, config: &SolverConfig, initial: &PiecewiseAffineMap) -> Result<SolveReport> {
    let clock = Instant::now();
    config.validate()?;
    check_grid(initial, rho)?;
    initial.triangle_jacobians()?;
    let obj = Objective::new(rho, config)?;
    let tau = config.mismatch_tolerance;
    let l2 = config.lipschitz_bound * config.lipschitz_bound;
    let unreachable = rho.values().iter().filter(|r| **r - l2 > tau || 1.0 / l2 - **r > tau).count() as f64
        * rho.cell_area();

    if rho.values().iter().all(|r| *r < 1.0 / l2 || *r > l2) {
        let est = initial.bilipschitz_estimate()?;
        log::info!("density entirely outside [1/L^2, L^2]; reporting full mismatch");
        return Ok(SolveReport {
            config: config.clone(),
            mismatch_area: rho.rect().area(),
            achieved_l: est.constant,
            lipschitz_certified: est.certified,
            unreachable_area: unreachable,
            objective: obj.value(initial.vertices()),
            accepted_steps: 0,
            converged: false,
            evidence: Evidence::NotRealizedAfterRestarts,
            best_restart: 0,
            runs: Vec::new(),
            trace: Vec::new(),
            map: initial.clone(),
            metadata: Metadata { wall_time_s: clock.elapsed().as_secs_f64() },
        });
    }

    if let Some(t) = (0..initial.triangle_count()).find(|t| obj.triangle_energy(*t, initial.vertices()).is_none()) {
        return Err(SolveError::InfeasibleInitial { bound: config.lipschitz_bound, triangle: t });
    }

    let runs: Vec<Result<(Run, f64)>> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 { initial.clone() } else { jittered(initial, &obj, config, r) };
            let run = multilevel_descend(&obj, rho, &start, config)?;
            let area = mismatch_area(&run.map, rho, tau)?;
            log::debug!(
                "restart {r}: objective {:.6e}, mismatch {area:.6}, {} steps",
                run.objective,
                run.accepted
            );
            Ok((run, area))
        })
        .collect();
    let runs: Vec<(Run, f64)> = runs.into_iter().collect::<Result<_>>()?;
    let summaries = runs
        .iter()
        .enumerate()
        .map(|(k, (run, area))| RunSummary {
            restart: k,
            mismatch_area: *area,
            objective: run.objective,
            accepted_steps: run.accepted,
            converged: run.converged,
        })
        .collect();
    let best = (0..runs.len())
        .min_by(|a, b| {
            let (ra, rb) = (&runs[*a], &runs[*b]);
            ra.1.total_cmp(&rb.1).then(ra.0.objective.total_cmp(&rb.0.objective)).then(a.cmp(b))
        })
        .expect("at least one run");
    let (run, area) = runs.into_iter().nth(best).expect("index in range");
    let est = run.map.bilipschitz_estimate()?;
    Ok(SolveReport {
        config: config.clone(),
        mismatch_area: area,
        achieved_l: est.constant,
        lipschitz_certified: est.certified,
        unreachable_area: unreachable,
        objective: run.objective,
        accepted_steps: run.accepted,
        converged: run.converged,
        evidence: if area == 0.0 { Evidence::Realized } else { Evidence::NotRealizedAfterRestarts },
        best_restart: best,
        runs: summaries,
        trace: run.trace,
        map: run.map,
        metadata: Metadata { wall_time_s: clock.elapsed().as_secs_f64() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{make_checkerboard, CheckerboardSpec};
    use crate::geometry::Rect;

    #[test]
    fn barrier_is_c2_at_threshold() {
        let dhat = 0.3;
        assert_eq!(barrier(dhat, dhat), 0.0);
        assert_eq!(barrier_deriv(dhat, dhat), 0.0);
        assert!(barrier(1e-9, dhat) > 1.0);
        let h = 1e-6;
        let d = 0.17;
        let fd = (barrier(d + h, dhat) - barrier(d - h, dhat)) / (2.0 * h);
        assert!((fd - barrier_deriv(d, dhat)).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::default();
        assert!(c.validate().is_ok());
        c.lipschitz_bound = 0.9;
        assert!(c.validate().is_err());
        let c = SolverConfig { mismatch_tolerance: 0.0, ..SolverConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn already_optimal_takes_no_steps() {
        let rho = DensityField::constant(Rect::unit(), 8, 8, 1.0).unwrap();
        let id = PiecewiseAffineMap::identity(8, 8).unwrap();
        let r = realize_jacobian(&rho, &SolverConfig::default(), &id).unwrap();
        assert_eq!(r.mismatch_area, 0.0);
        assert!((r.achieved_l - 1.0).abs() < 1e-12);
        assert_eq!(r.accepted_steps, 0);
        assert_eq!(r.evidence, Evidence::Realized);
    }

    #[test]
    fn unit_bound_keeps_identity() {
        let rho = DensityField::constant(Rect::unit(), 4, 4, 1.0).unwrap();
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let cfg = SolverConfig { lipschitz_bound: 1.0, ..SolverConfig::default() };
        let r = realize_jacobian(&rho, &cfg, &id).unwrap();
        assert_eq!(r.mismatch_area, 0.0);
    }

    #[test]
    fn mismatch_area_examples() {
        let spec = CheckerboardSpec::new(2, 1.0).unwrap();
        let rho = make_checkerboard(spec, 4, 2).unwrap();
        let id = PiecewiseAffineMap::identity_on(rho.rect(), 4, 2).unwrap();
        // the odd cell [0, 1/2] x [0, 1/2]
        assert_eq!(mismatch_area(&id, &rho, 0.5).unwrap(), 0.25);
        let one = DensityField::constant(Rect::unit(), 4, 4, 1.0).unwrap();
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        assert_eq!(mismatch_area(&id, &one, 1e-9).unwrap(), 0.0);
        let tau = 0.2;
        let s = (1.0 + tau / 2.0f64).sqrt();
        let scaled = id.compose(|p| Point::new(s * p.x, s * p.y));
        assert_eq!(mismatch_area(&scaled, &one, tau).unwrap(), 0.0);
        assert!(mismatch_area(&id, &one, 0.0).is_err());
        let other = DensityField::constant(Rect::unit(), 2, 4, 1.0).unwrap();
        assert_eq!(mismatch_area(&id, &other, 0.1), Err(SolveError::GridMismatch));
    }

    #[test]
    fn out_of_range_density_reports_full_mismatch() {
        let rho = DensityField::constant(Rect::unit(), 4, 4, 9.0).unwrap();
        let id = PiecewiseAffineMap::identity(4, 4).unwrap();
        let cfg = SolverConfig { lipschitz_bound: 1.5, ..SolverConfig::default() };
        let r = realize_jacobian(&rho, &cfg, &id).unwrap();
        assert_eq!(r.mismatch_area, 1.0);
        assert_eq!(r.unreachable_area, 1.0);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn infeasible_or_degenerate_initial_map() {
        let rho = DensityField::constant(Rect::unit(), 4, 4, 1.0).unwrap();
        let big = PiecewiseAffineMap::identity(4, 4).unwrap().compose(|p| Point::new(3.0 * p.x, 3.0 * p.y));
        let cfg = SolverConfig { lipschitz_bound: 2.0, ..SolverConfig::default() };
        assert!(matches!(realize_jacobian(&rho, &cfg, &big), Err(SolveError::InfeasibleInitial { .. })));
        let flat = PiecewiseAffineMap::identity(4, 4).unwrap().compose(|p| Point::new(p.x, 0.0));
        assert!(matches!(realize_jacobian(&rho, &cfg, &flat), Err(SolveError::Map(_))));
    }

    #[test]
    fn short_constant_fit_decreases_monotonically() {
        let rho = DensityField::constant(Rect::unit(), 8, 8, 2.0).unwrap();
        let id = PiecewiseAffineMap::identity(8, 8).unwrap();
        let cfg = SolverConfig { max_iterations: 300, restarts: 2, seed: 7, ..SolverConfig::default() };
        let r = realize_jacobian(&rho, &cfg, &id).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.trace.last().unwrap() < &r.trace[0]);
        assert!(r.achieved_l <= cfg.lipschitz_bound * (1.0 + 1e-6));
        assert_eq!(r.map.vertices()[0], Point::new(0.0, 0.0));
        assert_eq!(r.runs.len(), 2);
    }
}
