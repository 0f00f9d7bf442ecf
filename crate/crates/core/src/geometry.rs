//! Scene types and the near-field cost geometry.
//!
//! The metasurface lives on the plane `x3 = alpha`; targets `Y_i = (y_i, beta)`
//! sit on the parallel plane `x3 = beta > alpha`. The transport cost is
//! `c(X, Y) = |X| + |X - Y|`, the sum of the two ray path lengths, and the
//! phase is the lower envelope `min_i c(X, Y_i) + b_i`. Cell bisectors are
//! conics: projections of the intersections of lifted hyperboloid sheets
//! with power-diagram facets.

use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::distribution::SourceDensity;
use crate::polygon::{ConvexPolygon, PolygonError};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("beta must be strictly greater than alpha (planar-target setup; the Apollonius limit beta = alpha is not supported): alpha = {alpha}, beta = {beta}")]
    BetaNotAboveAlpha { alpha: f64, beta: f64 },
    #[error("scene needs at least one target")]
    NoTargets,
    #[error("targets {0} and {1} coincide")]
    DuplicateTargets(usize, usize),
    #[error("target masses must all be positive and finite (mass {index} = {value})")]
    BadMass { index: usize, value: f64 },
    #[error("targets and masses length mismatch: {targets} vs {masses}")]
    LengthMismatch { targets: usize, masses: usize },
    #[error("weight vector has wrong length: expected {expected}, got {got}")]
    WeightLength { expected: usize, got: usize },
    #[error(transparent)]
    Polygon(#[from] PolygonError),
    #[error("bisector of targets {i} and {j} is empty: |b_i - b_j| = {gap} >= |y_i - y_j| = {sep}")]
    EmptyBisector { i: usize, j: usize, gap: f64, sep: f64 },
    #[error("masses do not balance the source: sum(g) = {mass_sum}, integral of rho = {source_total}")]
    MassImbalance { mass_sum: f64, source_total: f64 },
}

/// Point on the aperture plane `x3 = alpha` (the plane coordinate is implied
/// by the scene).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub x1: f64,
    pub x2: f64,
}

impl PlanePoint {
    pub fn new(x1: f64, x2: f64) -> Self {
        PlanePoint { x1, x2 }
    }

    pub fn xy(self) -> Vector2<f64> {
        Vector2::new(self.x1, self.x2)
    }
}

impl From<Vector2<f64>> for PlanePoint {
    fn from(v: Vector2<f64>) -> Self {
        PlanePoint { x1: v.x, x2: v.y }
    }
}

/// Target point on the plane `x3 = beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPoint {
    pub y1: f64,
    pub y2: f64,
}

impl TargetPoint {
    pub fn new(y1: f64, y2: f64) -> Self {
        TargetPoint { y1, y2 }
    }

    pub fn xy(self) -> Vector2<f64> {
        Vector2::new(self.y1, self.y2)
    }
}

/// Phase weight vector, one offset per target.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn zeros(n: usize) -> Self {
        Weights(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Shift so the entries sum to zero (the solver's internal gauge).
    pub fn into_zero_sum(mut self) -> Self {
        let mean = self.0.iter().sum::<f64>() / self.0.len() as f64;
        for v in &mut self.0 {
            *v -= mean;
        }
        self
    }

    /// Shift so the first entry is zero (the gauge used to state uniqueness).
    pub fn pinned_first(&self) -> Vec<f64> {
        let b0 = self.0[0];
        self.0.iter().map(|v| v - b0).collect()
    }
}

impl std::ops::Deref for Weights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Lifted power-diagram site: `q_i = (y_i, -b_i)` with weight `w_i = -2 b_i^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedSite {
    pub q: Vector3<f64>,
    pub weight: f64,
}

impl LiftedSite {
    pub fn new(y: TargetPoint, b: f64) -> Self {
        LiftedSite {
            q: Vector3::new(y.y1, y.y2, -b),
            weight: -2.0 * b * b,
        }
    }

    /// Recover the weight offset the site was built from.
    pub fn b(&self) -> f64 {
        -self.q.z
    }

    /// Power distance `|x - q|^2 + w` used by the 3D diagram.
    pub fn power(&self, x: Vector3<f64>) -> f64 {
        (x - self.q).norm_squared() + self.weight
    }
}

/// The fixed problem geometry: aperture polygon, heights, targets, masses,
/// and the source density.
#[derive(Debug, Clone)]
pub struct Scene {
    alpha: f64,
    beta: f64,
    domain: ConvexPolygon,
    targets: Vec<TargetPoint>,
    masses: Vec<f64>,
    source: Arc<SourceDensity>,
}

impl Scene {
    pub fn new(
        alpha: f64,
        beta: f64,
        domain: ConvexPolygon,
        targets: Vec<TargetPoint>,
        masses: Vec<f64>,
        source: SourceDensity,
    ) -> Result<Self, GeometryError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(GeometryError::BadAlpha(alpha));
        }
        if !(beta.is_finite() && beta > alpha) {
            return Err(GeometryError::BetaNotAboveAlpha { alpha, beta });
        }
        if targets.is_empty() {
            return Err(GeometryError::NoTargets);
        }
        if targets.len() != masses.len() {
            return Err(GeometryError::LengthMismatch {
                targets: targets.len(),
                masses: masses.len(),
            });
        }
        for (i, g) in masses.iter().enumerate() {
            if !(g.is_finite() && *g > 0.0) {
                return Err(GeometryError::BadMass { index: i, value: *g });
            }
        }
        let scene = Scene {
            alpha,
            beta,
            domain,
            targets,
            masses,
            source: Arc::new(source),
        };
        let sep_tol = 1e-12 * scene.scale();
        for i in 0..scene.targets.len() {
            for j in (i + 1)..scene.targets.len() {
                if (scene.targets[i].xy() - scene.targets[j].xy()).norm() <= sep_tol {
                    return Err(GeometryError::DuplicateTargets(i, j));
                }
            }
        }
        Ok(scene)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Vertical separation `beta - alpha` between aperture and target planes.
    pub fn height_gap(&self) -> f64 {
        self.beta - self.alpha
    }

    pub fn domain(&self) -> &ConvexPolygon {
        &self.domain
    }

    pub fn targets(&self) -> &[TargetPoint] {
        &self.targets
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn source(&self) -> &SourceDensity {
        &self.source
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    /// Diameter of the 3D bounding box of aperture and targets; the length
    /// scale behind all geometric tolerances.
    pub fn scale(&self) -> f64 {
        let (lo, hi) = self.domain.bounding_box();
        let mut lo3 = Vector3::new(lo.x, lo.y, self.alpha);
        let mut hi3 = Vector3::new(hi.x, hi.y, self.beta);
        for t in &self.targets {
            lo3.x = lo3.x.min(t.y1);
            lo3.y = lo3.y.min(t.y2);
            hi3.x = hi3.x.max(t.y1);
            hi3.y = hi3.y.max(t.y2);
        }
        (hi3 - lo3).norm()
    }

    /// Geometric equality tolerance: 1e-9 of the scene diameter.
    pub fn tol_geom(&self) -> f64 {
        1e-9 * self.scale()
    }

    /// Max chord deviation allowed when sampling conic arcs.
    pub fn arc_tol(&self) -> f64 {
        1e-4 * self.domain.diameter()
    }

    pub fn check_weights(&self, b: &[f64]) -> Result<(), GeometryError> {
        if b.len() != self.targets.len() {
            return Err(GeometryError::WeightLength {
                expected: self.targets.len(),
                got: b.len(),
            });
        }
        Ok(())
    }

    /// `X` as a 3D point on the aperture plane.
    pub fn embed(&self, x: PlanePoint) -> Vector3<f64> {
        Vector3::new(x.x1, x.x2, self.alpha)
    }

    /// Near-field cost `c(X, Y) = |X| + |X - Y|`.
    pub fn cost_to(&self, x: PlanePoint, y: TargetPoint) -> f64 {
        let a = self.alpha;
        let d = self.beta - self.alpha;
        let from_origin = (x.x1 * x.x1 + x.x2 * x.x2 + a * a).sqrt();
        let dx = x.x1 - y.y1;
        let dy = x.x2 - y.y2;
        let to_target = (dx * dx + dy * dy + d * d).sqrt();
        from_origin + to_target
    }

    pub fn cost(&self, x: PlanePoint, i: usize) -> f64 {
        self.cost_to(x, self.targets[i])
    }

    /// In-plane gradient of the cost: the first two components of
    /// `X/|X| + (X - Y)/|X - Y|`.
    pub fn cost_gradient(&self, x: PlanePoint, i: usize) -> Vector2<f64> {
        let y = self.targets[i];
        let a = self.alpha;
        let d = self.beta - self.alpha;
        let r0 = (x.x1 * x.x1 + x.x2 * x.x2 + a * a).sqrt();
        let dx = x.x1 - y.y1;
        let dy = x.x2 - y.y2;
        let r1 = (dx * dx + dy * dy + d * d).sqrt();
        Vector2::new(x.x1 / r0 + dx / r1, x.x2 / r0 + dy / r1)
    }

    /// Evaluate the phase `min_i c(X, Y_i) + b_i`; ties go to the lowest index.
    pub fn phase(&self, x: PlanePoint, b: &[f64]) -> (f64, usize) {
        debug_assert_eq!(b.len(), self.targets.len());
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (i, y) in self.targets.iter().enumerate() {
            let v = self.cost_to(x, *y) + b[i];
            if v < best {
                best = v;
                arg = i;
            }
        }
        (best, arg)
    }

    /// Height of the upper hyperboloid sheet `|X - Y_i| + b_i` above `X`.
    pub fn sheet_height(&self, x: PlanePoint, i: usize, b_i: f64) -> f64 {
        let y = self.targets[i];
        let d = self.beta - self.alpha;
        let dx = x.x1 - y.y1;
        let dy = x.x2 - y.y2;
        (dx * dx + dy * dy + d * d).sqrt() + b_i
    }

    /// Lift all targets to weighted power-diagram sites.
    pub fn lift_sites(&self, b: &[f64]) -> Vec<LiftedSite> {
        debug_assert_eq!(b.len(), self.targets.len());
        self.targets
            .iter()
            .zip(b)
            .map(|(y, bi)| LiftedSite::new(*y, *bi))
            .collect()
    }

    /// Whether the upper sheet of target `i` misses the lower sheet of
    /// target `j`: `sqrt(4 (alpha - beta)^2 + |y_i - y_j|^2) > b_j - b_i`,
    /// strictly.
    pub fn sheets_separated(&self, i: usize, j: usize, b: &[f64]) -> bool {
        debug_assert!(i != j);
        let d = self.beta - self.alpha;
        let sep = (self.targets[i].xy() - self.targets[j].xy()).norm_squared();
        (4.0 * d * d + sep).sqrt() > b[j] - b[i]
    }

    /// Closed-form minimum of `|X - Y_i| + |X - Y_j|` over the aperture
    /// plane, attained above the midpoint of the targets.
    pub fn sheet_gap_threshold(&self, i: usize, j: usize) -> f64 {
        let d = self.beta - self.alpha;
        let sep = (self.targets[i].xy() - self.targets[j].xy()).norm_squared();
        2.0 * (d * d + 0.25 * sep).sqrt()
    }

    /// Implicit conic carrying the cost bisector of targets `i` and `j`.
    pub fn bisector(&self, i: usize, j: usize, b: &[f64]) -> Result<BisectorConic, GeometryError> {
        debug_assert!(i != j);
        let yi = self.targets[i].xy();
        let yj = self.targets[j].xy();
        let delta = b[j] - b[i];
        let sep = (yi - yj).norm();
        if delta.abs() >= sep {
            // |X - Y_i| - |X - Y_j| ranges over (-|y_i - y_j|, |y_i - y_j|)
            // on the plane, so the equality set is empty.
            return Err(GeometryError::EmptyBisector {
                i,
                j,
                gap: delta.abs(),
                sep,
            });
        }
        Ok(BisectorConic::new(
            yi,
            yj,
            b[i],
            b[j],
            self.height_gap(),
        ))
    }
}

/// Implicit-form conic `A x1^2 + B x1 x2 + C x2^2 + D x1 + E x2 + F = 0`
/// containing the bisector `{c(X,Y_i) + b_i = c(X,Y_j) + b_j}`, together
/// with the data needed to evaluate the unsquared residual that selects
/// the genuine branch.
#[derive(Debug, Clone, Copy)]
pub struct BisectorConic {
    pub coeffs: [f64; 6],
    yi: Vector2<f64>,
    yj: Vector2<f64>,
    bi: f64,
    bj: f64,
    /// Squared vertical gap `(beta - alpha)^2`.
    h2: f64,
}

impl BisectorConic {
    fn new(yi: Vector2<f64>, yj: Vector2<f64>, bi: f64, bj: f64, h: f64) -> Self {
        let delta = bj - bi;
        let p = -2.0 * (yi - yj);
        let q = yi.norm_squared() - yj.norm_squared();
        let coeffs = if delta == 0.0 {
            // Equal weights: the bisector is the straight line
            // r_i^2 - r_j^2 = 0, i.e. p . x + q = 0.
            [0.0, 0.0, 0.0, p.x, p.y, q]
        } else {
            // Eliminating both radicals from |X-Y_i| - |X-Y_j| = delta gives
            // (r_i^2 - r_j^2)^2 - 2 delta^2 (r_i^2 + r_j^2) + delta^2 (delta^2 - 4 h^2) = 0.
            let d2 = delta * delta;
            let s = -2.0 * (yi + yj);
            let s0 = yi.norm_squared() + yj.norm_squared();
            [
                p.x * p.x - 4.0 * d2,
                2.0 * p.x * p.y,
                p.y * p.y - 4.0 * d2,
                2.0 * p.x * q - 2.0 * d2 * s.x,
                2.0 * p.y * q - 2.0 * d2 * s.y,
                q * q - 2.0 * d2 * s0 + d2 * (d2 - 4.0 * h * h),
            ]
        };
        // Normalize for numerical sanity; the zero set is unchanged.
        let m = coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        let coeffs = if m > 0.0 {
            coeffs.map(|c| c / m)
        } else {
            coeffs
        };
        BisectorConic {
            coeffs,
            yi,
            yj,
            bi,
            bj,
            h2: h * h,
        }
    }

    /// Polynomial value of the implicit conic at `x`.
    pub fn implicit(&self, x: Vector2<f64>) -> f64 {
        let [a, b, c, d, e, f] = self.coeffs;
        a * x.x * x.x + b * x.x * x.y + c * x.y * x.y + d * x.x + e * x.y + f
    }

    /// Unsquared cost-difference residual
    /// `(|X - Y_i| + b_i) - (|X - Y_j| + b_j)`; zero exactly on the branch
    /// where the two supporting costs agree.
    pub fn residual(&self, x: Vector2<f64>) -> f64 {
        let ri = ((x - self.yi).norm_squared() + self.h2).sqrt();
        let rj = ((x - self.yj).norm_squared() + self.h2).sqrt();
        (ri + self.bi) - (rj + self.bj)
    }

    /// In-plane gradient of the residual. Never vanishes for distinct
    /// targets on a common plane strictly above the aperture.
    pub fn residual_gradient(&self, x: Vector2<f64>) -> Vector2<f64> {
        let di = x - self.yi;
        let dj = x - self.yj;
        let ri = (di.norm_squared() + self.h2).sqrt();
        let rj = (dj.norm_squared() + self.h2).sqrt();
        di / ri - dj / rj
    }

    /// Newton-project `x` onto the residual zero set. Returns `None` if the
    /// iteration fails to reach `tol` (flat gradient or far seed).
    pub fn snap(&self, mut x: Vector2<f64>, tol: f64) -> Option<Vector2<f64>> {
        for _ in 0..40 {
            let r = self.residual(x);
            if r.abs() <= tol {
                return Some(x);
            }
            let g = self.residual_gradient(x);
            let g2 = g.norm_squared();
            if g2 < 1e-300 {
                return None;
            }
            x -= g * (r / g2);
        }
        if self.residual(x).abs() <= tol {
            Some(x)
        } else {
            None
        }
    }

    /// Membership of `x` on the genuine branch, within `tol` of cost equality.
    pub fn on_branch(&self, x: Vector2<f64>, tol: f64) -> bool {
        self.residual(x).abs() <= tol
    }
}
