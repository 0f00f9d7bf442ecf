//! Convex polyhedra by iterated half-space clipping.
//!
//! Power cells are built by clipping an axis-aligned box with one
//! half-space per competing site plus the vertical walls of the aperture
//! prism. Faces remember which constraint generated them so bisector
//! facets can be looked up by the arc extractor.

use nalgebra::{Vector2, Vector3};

/// Which constraint a face came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceTag {
    /// One of the six bounding-box sides.
    Box,
    /// Vertical wall above domain edge `k`.
    Domain(usize),
    /// Power bisector against site `j`.
    Bisector(usize),
}

#[derive(Debug, Clone)]
pub struct Face {
    /// Planar convex polygon (winding unspecified; consumers reorient).
    pub verts: Vec<Vector3<f64>>,
    /// Outward unit normal; the face lies on `normal . x = offset` and the
    /// polyhedron on `normal . x <= offset`.
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub tag: FaceTag,
}

#[derive(Debug, Clone)]
pub struct Polyhedron {
    pub faces: Vec<Face>,
    scale: f64,
}

impl Polyhedron {
    /// Axis-aligned box `[lo, hi]`, all faces tagged `Box`.
    pub fn axis_box(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let corners = [
            v(lo.x, lo.y, lo.z),
            v(hi.x, lo.y, lo.z),
            v(hi.x, hi.y, lo.z),
            v(lo.x, hi.y, lo.z),
            v(lo.x, lo.y, hi.z),
            v(hi.x, lo.y, hi.z),
            v(hi.x, hi.y, hi.z),
            v(lo.x, hi.y, hi.z),
        ];
        let quad = |a: usize, b: usize, c: usize, d: usize, n: Vector3<f64>, off: f64| Face {
            verts: vec![corners[a], corners[b], corners[c], corners[d]],
            normal: n,
            offset: off,
            tag: FaceTag::Box,
        };
        Polyhedron {
            faces: vec![
                quad(0, 3, 2, 1, v(0.0, 0.0, -1.0), -lo.z),
                quad(4, 5, 6, 7, v(0.0, 0.0, 1.0), hi.z),
                quad(0, 1, 5, 4, v(0.0, -1.0, 0.0), -lo.y),
                quad(2, 3, 7, 6, v(0.0, 1.0, 0.0), hi.y),
                quad(0, 4, 7, 3, v(-1.0, 0.0, 0.0), -lo.x),
                quad(1, 2, 6, 5, v(1.0, 0.0, 0.0), hi.x),
            ],
            scale: (hi - lo).norm(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// All distinct vertices (welded at the clipping tolerance).
    pub fn vertices(&self) -> Vec<Vector3<f64>> {
        let tol = 1e-9 * self.scale;
        let mut out: Vec<Vector3<f64>> = Vec::new();
        for f in &self.faces {
            for v in &f.verts {
                if !out.iter().any(|w| (v - w).norm() <= tol) {
                    out.push(*v);
                }
            }
        }
        out
    }

    pub fn face_with_tag(&self, tag: FaceTag) -> Option<&Face> {
        self.faces.iter().find(|f| f.tag == tag)
    }

    /// Membership test against every retained half-space.
    pub fn contains(&self, p: Vector3<f64>, tol: f64) -> bool {
        self.faces
            .iter()
            .all(|f| f.normal.dot(&p) - f.offset <= tol)
    }

    /// Worst half-space violation at `p` (negative strictly inside).
    pub fn max_violation(&self, p: Vector3<f64>) -> f64 {
        self.faces
            .iter()
            .map(|f| f.normal.dot(&p) - f.offset)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clip by `n . x <= c`. Returns `None` when nothing with volume is left.
    pub fn clip(&self, n: Vector3<f64>, c: f64, tag: FaceTag) -> Option<Polyhedron> {
        let norm = n.norm();
        debug_assert!(norm > 0.0);
        let nh = n / norm;
        let ch = c / norm;
        let eps = 1e-12 * self.scale;

        let mut any_strictly_inside = false;
        let mut any_outside = false;
        for f in &self.faces {
            for v in &f.verts {
                let d = nh.dot(v) - ch;
                if d < -eps {
                    any_strictly_inside = true;
                }
                if d > eps {
                    any_outside = true;
                }
            }
        }
        if !any_strictly_inside {
            return None;
        }
        if !any_outside {
            return Some(self.clone());
        }

        let mut faces: Vec<Face> = Vec::with_capacity(self.faces.len() + 1);
        let mut cap_points: Vec<Vector3<f64>> = Vec::new();
        for f in &self.faces {
            let k = f.verts.len();
            let d: Vec<f64> = f.verts.iter().map(|v| nh.dot(v) - ch).collect();
            let mut kept: Vec<Vector3<f64>> = Vec::with_capacity(k + 2);
            for a in 0..k {
                let b = (a + 1) % k;
                let (pa, pb) = (f.verts[a], f.verts[b]);
                let inside_a = d[a] <= eps;
                let inside_b = d[b] <= eps;
                if inside_a {
                    kept.push(pa);
                    if d[a].abs() <= eps {
                        cap_points.push(pa);
                    }
                }
                if inside_a != inside_b {
                    let t = (d[a] / (d[a] - d[b])).clamp(0.0, 1.0);
                    let x = pa + (pb - pa) * t;
                    kept.push(x);
                    cap_points.push(x);
                }
            }
            let kept = weld_loop(kept, 1e-12 * self.scale);
            if kept.len() >= 3 {
                faces.push(Face {
                    verts: kept,
                    normal: f.normal,
                    offset: f.offset,
                    tag: f.tag,
                });
            }
        }

        // Cap face: the section of a convex body by a plane is convex, so
        // the hull of the collected crossing points is exact.
        if let Some(cap) = convex_cap(&cap_points, nh, 1e-12 * self.scale) {
            faces.push(Face {
                verts: cap,
                normal: nh,
                offset: ch,
                tag,
            });
        }

        if faces.len() < 4 {
            return None;
        }
        Some(Polyhedron {
            faces,
            scale: self.scale,
        })
    }
}

fn weld_loop(pts: Vec<Vector3<f64>>, tol: f64) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_none_or(|q| (p - q).norm() > tol) {
            out.push(p);
        }
    }
    while out.len() >= 2 && (out[out.len() - 1] - out[0]).norm() <= tol {
        out.pop();
    }
    out
}

/// 2D convex hull (monotone chain) of the cap points expressed in an
/// orthonormal frame of the cap plane.
fn convex_cap(
    pts: &[Vector3<f64>],
    normal: Vector3<f64>,
    tol: f64,
) -> Option<Vec<Vector3<f64>>> {
    if pts.len() < 3 {
        return None;
    }
    let u = orthonormal_to(normal);
    let v = normal.cross(&u);
    let origin = pts[0];
    let mut flat: Vec<(Vector2<f64>, Vector3<f64>)> = Vec::with_capacity(pts.len());
    for p in pts {
        let d = p - origin;
        let f = Vector2::new(u.dot(&d), v.dot(&d));
        if !flat.iter().any(|(g, _)| (f - g).norm() <= tol) {
            flat.push((f, *p));
        }
    }
    if flat.len() < 3 {
        return None;
    }
    flat.sort_by(|a, b| {
        a.0.x
            .partial_cmp(&b.0.x)
            .unwrap()
            .then(a.0.y.partial_cmp(&b.0.y).unwrap())
    });
    let cross = |o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<(Vector2<f64>, Vector3<f64>)> = Vec::with_capacity(flat.len() + 1);
    for &p in flat.iter().chain(flat.iter().rev().skip(1)) {
        while hull.len() >= 2
            && cross(hull[hull.len() - 2].0, hull[hull.len() - 1].0, p.0) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return None;
    }
    Some(hull.into_iter().map(|(_, p)| p).collect())
}

fn orthonormal_to(n: Vector3<f64>) -> Vector3<f64> {
    let pick = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::new(1.0, 0.0, 0.0)
    } else if n.y.abs() <= n.z.abs() {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    n.cross(&pick).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Polyhedron {
        Polyhedron::axis_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0))
    }

    fn volume_by_mc(p: &Polyhedron, lo: Vector3<f64>, hi: Vector3<f64>, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0usize;
        for _ in 0..n {
            let x = Vector3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            if p.contains(x, 0.0) {
                hits += 1;
            }
        }
        let vol_box = (hi - lo).iter().product::<f64>();
        vol_box * hits as f64 / n as f64
    }

    #[test]
    fn box_contains_and_vertices() {
        let b = unit_box();
        assert_eq!(b.vertices().len(), 8);
        assert!(b.contains(Vector3::new(0.5, 0.5, 0.5), 0.0));
        assert!(!b.contains(Vector3::new(1.5, 0.5, 0.5), 1e-9));
    }

    #[test]
    fn clip_keeps_half() {
        let b = unit_box();
        let h = b
            .clip(Vector3::new(1.0, 0.0, 0.0), 0.5, FaceTag::Bisector(1))
            .unwrap();
        assert!(h.contains(Vector3::new(0.25, 0.5, 0.5), 0.0));
        assert!(!h.contains(Vector3::new(0.75, 0.5, 0.5), 1e-9));
        let cap = h.face_with_tag(FaceTag::Bisector(1)).unwrap();
        assert_eq!(cap.verts.len(), 4);
        for v in &cap.verts {
            assert_relative_eq!(v.x, 0.5, epsilon = 1e-12);
        }
        let vol = volume_by_mc(&h, Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), 40_000);
        assert!((vol - 0.5).abs() < 0.02);
    }

    #[test]
    fn clip_away_everything_is_none() {
        let b = unit_box();
        assert!(b
            .clip(Vector3::new(1.0, 0.0, 0.0), -0.5, FaceTag::Box)
            .is_none());
        // Tangent plane: nothing with volume remains on the wrong side.
        assert!(b
            .clip(Vector3::new(1.0, 0.0, 0.0), 0.0, FaceTag::Box)
            .is_none());
    }

    #[test]
    fn clip_no_op_when_fully_inside() {
        let b = unit_box();
        let same = b
            .clip(Vector3::new(1.0, 0.0, 0.0), 2.0, FaceTag::Box)
            .unwrap();
        assert_eq!(same.faces.len(), 6);
    }

    #[test]
    fn oblique_clips_stay_convex_and_watertight() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = Polyhedron::axis_box(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0));
        for k in 0..12 {
            let n = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if n.norm() < 1e-3 {
                continue;
            }
            let c = rng.random_range(0.1..0.9) * n.norm();
            match p.clip(n, c, FaceTag::Bisector(k)) {
                Some(q) => p = q,
                None => break,
            }
            // Every vertex satisfies every retained half-space.
            for v in p.vertices() {
                assert!(p.max_violation(v) <= 1e-9);
            }
        }
    }
}
