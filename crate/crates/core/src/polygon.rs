//! Convex polygons in the aperture plane: validation, containment, clipping.

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolygonError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertices must be finite")]
    NonFinite,
    #[error("polygon must be counterclockwise (signed area {0} <= 0)")]
    NotCounterclockwise(f64),
    #[error("polygon must be convex (reflex corner at vertex {0})")]
    NotConvex(usize),
}

/// Convex polygon with counterclockwise vertices. Both properties are
/// checked at construction so downstream clipping can assume them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    verts: Vec<Vector2<f64>>,
}

impl ConvexPolygon {
    pub fn new(verts: Vec<Vector2<f64>>) -> Result<Self, PolygonError> {
        if verts.len() < 3 {
            return Err(PolygonError::TooFewVertices(verts.len()));
        }
        if verts.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(PolygonError::NonFinite);
        }
        let poly = ConvexPolygon { verts };
        let area = poly.area();
        if area <= 0.0 {
            return Err(PolygonError::NotCounterclockwise(2.0 * area));
        }
        // Convexity: every corner must turn left (or be straight) within a
        // tolerance scaled by the edge lengths involved.
        let n = poly.verts.len();
        for i in 0..n {
            let a = poly.verts[i];
            let b = poly.verts[(i + 1) % n];
            let c = poly.verts[(i + 2) % n];
            let ab = b - a;
            let bc = c - b;
            let cross = ab.x * bc.y - ab.y * bc.x;
            if cross < -1e-12 * ab.norm() * bc.norm() {
                return Err(PolygonError::NotConvex((i + 1) % n));
            }
        }
        Ok(poly)
    }

    pub fn from_coords(coords: &[[f64; 2]]) -> Result<Self, PolygonError> {
        Self::new(coords.iter().map(|c| Vector2::new(c[0], c[1])).collect())
    }

    /// Axis-aligned rectangle `[x0,x1] x [y0,y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        ConvexPolygon {
            verts: vec![
                Vector2::new(x0, y0),
                Vector2::new(x1, y0),
                Vector2::new(x1, y1),
                Vector2::new(x0, y1),
            ],
        }
    }

    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.verts
    }

    pub fn num_edges(&self) -> usize {
        self.verts.len()
    }

    /// Edge `k` as the ordered pair (start, end), counterclockwise.
    pub fn edge(&self, k: usize) -> (Vector2<f64>, Vector2<f64>) {
        let n = self.verts.len();
        (self.verts[k % n], self.verts[(k + 1) % n])
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
        (0..self.verts.len()).map(move |k| self.edge(k))
    }

    /// Outward unit normal of edge `k` (counterclockwise polygon).
    pub fn outward_normal(&self, k: usize) -> Vector2<f64> {
        let (a, b) = self.edge(k);
        let t = (b - a).normalize();
        Vector2::new(t.y, -t.x)
    }

    pub fn area(&self) -> f64 {
        let n = self.verts.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            s += a.x * b.y - a.y * b.x;
        }
        0.5 * s
    }

    pub fn centroid(&self) -> Vector2<f64> {
        // Area-weighted centroid; falls back to vertex mean for slivers.
        let n = self.verts.len();
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a2 = 0.0;
        for i in 0..n {
            let p = self.verts[i];
            let q = self.verts[(i + 1) % n];
            let w = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
            a2 += w;
        }
        if a2.abs() < 1e-300 {
            let mut m = Vector2::zeros();
            for v in &self.verts {
                m += v;
            }
            return m / self.verts.len() as f64;
        }
        Vector2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    pub fn bounding_box(&self) -> (Vector2<f64>, Vector2<f64>) {
        let mut lo = self.verts[0];
        let mut hi = self.verts[0];
        for v in &self.verts {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Distance from the centroid to the nearest edge; a cheap inradius
    /// lower bound used to place initialization sites strictly inside.
    pub fn centroid_clearance(&self) -> f64 {
        let c = self.centroid();
        let mut d = f64::INFINITY;
        for k in 0..self.num_edges() {
            let (a, _) = self.edge(k);
            let n = self.outward_normal(k);
            d = d.min((a - c).dot(&n));
        }
        d
    }

    /// Containment with a signed tolerance: `tol > 0` accepts points
    /// slightly outside, `tol < 0` requires strict interiority.
    pub fn contains(&self, p: Vector2<f64>, tol: f64) -> bool {
        for k in 0..self.num_edges() {
            let (a, _) = self.edge(k);
            let n = self.outward_normal(k);
            if (p - a).dot(&n) > tol {
                return false;
            }
        }
        true
    }

    /// Signed distance to the boundary along the worst edge normal;
    /// negative inside, positive outside (exact for convex polygons only
    /// in the inside direction, which is all callers need).
    pub fn max_edge_excess(&self, p: Vector2<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.num_edges() {
            let (a, _) = self.edge(k);
            let n = self.outward_normal(k);
            worst = worst.max((p - a).dot(&n));
        }
        worst
    }

    /// Clip by the half-plane `n . x <= c`. Returns `None` when the
    /// intersection is empty or degenerate (area ~ 0).
    pub fn clip_halfplane(&self, n: Vector2<f64>, c: f64) -> Option<ConvexPolygon> {
        let mut out: Vec<Vector2<f64>> = Vec::with_capacity(self.verts.len() + 1);
        let k = self.verts.len();
        for i in 0..k {
            let p = self.verts[i];
            let q = self.verts[(i + 1) % k];
            let dp = n.dot(&p) - c;
            let dq = n.dot(&q) - c;
            if dp <= 0.0 {
                out.push(p);
                if dq > 0.0 {
                    let t = dp / (dp - dq);
                    out.push(p + (q - p) * t);
                }
            } else if dq <= 0.0 {
                let t = dp / (dp - dq);
                out.push(p + (q - p) * t);
            }
        }
        // Weld near-duplicate consecutive vertices produced by crossings
        // that graze existing vertices.
        let scale = self.diameter().max(1e-300);
        let mut welded: Vec<Vector2<f64>> = Vec::with_capacity(out.len());
        for v in out {
            if welded.last().is_none_or(|w| (v - w).norm() > 1e-14 * scale) {
                welded.push(v);
            }
        }
        if welded.len() >= 2 {
            let first = welded[0];
            if (welded[welded.len() - 1] - first).norm() <= 1e-14 * scale {
                welded.pop();
            }
        }
        if welded.len() < 3 {
            return None;
        }
        Some(ConvexPolygon { verts: welded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_clockwise() {
        let e = ConvexPolygon::from_coords(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(e, Err(PolygonError::NotCounterclockwise(_))));
    }

    #[test]
    fn rejects_nonconvex() {
        let e = ConvexPolygon::from_coords(&[
            [0.0, 0.0],
            [2.0, 0.0],
            [2.0, 2.0],
            [1.0, 0.5],
            [0.0, 2.0],
        ]);
        assert!(matches!(e, Err(PolygonError::NotConvex(_))));
    }

    #[test]
    fn area_and_centroid_of_square() {
        let p = ConvexPolygon::rectangle(-1.0, -1.0, 1.0, 1.0);
        assert_relative_eq!(p.area(), 4.0);
        assert_relative_eq!(p.centroid().x, 0.0);
        assert_relative_eq!(p.centroid_clearance(), 1.0);
    }

    #[test]
    fn containment_tolerance() {
        let p = ConvexPolygon::rectangle(0.0, 0.0, 1.0, 1.0);
        assert!(p.contains(Vector2::new(0.5, 0.5), 0.0));
        assert!(p.contains(Vector2::new(1.0 + 1e-12, 0.5), 1e-9));
        assert!(!p.contains(Vector2::new(1.1, 0.5), 1e-9));
        assert!(!p.contains(Vector2::new(0.5, 1.0), -1e-9));
    }

    #[test]
    fn halfplane_clip_splits_area() {
        let p = ConvexPolygon::rectangle(-1.0, -1.0, 1.0, 1.0);
        let half = p.clip_halfplane(Vector2::new(1.0, 0.0), 0.0).unwrap();
        assert_relative_eq!(half.area(), 2.0, max_relative = 1e-14);
        assert!(p.clip_halfplane(Vector2::new(1.0, 0.0), -2.0).is_none());
    }
}
