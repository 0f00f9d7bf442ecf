//! Boundary arcs of Laguerre cells and the assembled diagram.
//!
//! Interior arcs `γ_ij` are the projections of power-facet/sheet
//! intersections. Each facet `P_i ∩ P_j` is a planar convex polygon; the
//! curve inside it is traced by root-finding the unsquared cost-difference
//! residual along the facet edges and marching the implicit curve between
//! the crossings with a predictor-corrector stepper. Domain arcs `γ_i,∞`
//! are the intervals of `∂Ω` owned by each cell, split at the arc
//! endpoints that land on the boundary. Pieces are chained into closed,
//! consistently oriented loops whose shoelace areas feed the
//! divergence-theorem mass engine.

use nalgebra::{Vector2, Vector3};

use super::{classify_unchecked, CellsError, LiftedRegions};
use crate::geometry::{BisectorConic, PlanePoint, Scene};
use crate::polyhedron::{Face, FaceTag, Polyhedron};

/// Sampled bisector arc between cells `i` and `j` (stored once, `i < j`).
#[derive(Debug, Clone)]
pub struct InteriorArc {
    pub i: usize,
    pub j: usize,
    /// Polyline on the cost-equality branch, endpoints on facet boundaries.
    pub points: Vec<Vector2<f64>>,
    pub conic: BisectorConic,
}

impl InteriorArc {
    pub fn chord_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }

    pub fn endpoints(&self) -> (Vector2<f64>, Vector2<f64>) {
        (self.points[0], *self.points.last().unwrap())
    }
}

/// One oriented piece of a cell boundary loop.
#[derive(Debug, Clone)]
pub enum LoopPiece {
    /// Interior arc by index into `LaguerreDiagram::arcs`; `reversed` means
    /// the stored polyline is traversed back to front.
    Arc { arc: usize, reversed: bool },
    /// Straight segment of `∂Ω` on domain edge `edge`, traversed `a -> b`.
    Domain {
        edge: usize,
        a: Vector2<f64>,
        b: Vector2<f64>,
    },
}

/// Closed boundary loops of one cell, oriented with the cell on the left,
/// and the resulting signed area (outer loops positive, holes negative).
#[derive(Debug, Clone, Default)]
pub struct CellBoundary {
    pub loops: Vec<Vec<LoopPiece>>,
    pub area: f64,
}

impl CellBoundary {
    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }
}

/// The full cell decomposition for one weight vector.
#[derive(Debug, Clone)]
pub struct LaguerreDiagram {
    pub regions: LiftedRegions,
    pub arcs: Vec<InteriorArc>,
    pub cells: Vec<CellBoundary>,
}

impl LaguerreDiagram {
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn areas(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.area).collect()
    }

    pub fn is_empty_cell(&self, i: usize) -> bool {
        self.cells[i].is_empty()
    }

    /// Resolve a loop into its concrete polyline (closed, first point not
    /// repeated at the end).
    pub fn loop_points(&self, pieces: &[LoopPiece]) -> Vec<Vector2<f64>> {
        let mut out: Vec<Vector2<f64>> = Vec::new();
        for piece in pieces {
            let pts = self.piece_points(piece);
            let skip = usize::from(!out.is_empty());
            for p in pts.into_iter().skip(skip) {
                out.push(p);
            }
        }
        if out.len() >= 2 && (out[out.len() - 1] - out[0]).norm() == 0.0 {
            out.pop();
        }
        out
    }

    fn piece_points(&self, piece: &LoopPiece) -> Vec<Vector2<f64>> {
        match piece {
            LoopPiece::Arc { arc, reversed } => {
                let pts = &self.arcs[*arc].points;
                if *reversed {
                    pts.iter().rev().cloned().collect()
                } else {
                    pts.clone()
                }
            }
            LoopPiece::Domain { a, b, .. } => vec![*a, *b],
        }
    }
}

/// Build the Laguerre diagram: lifted power cells, conic arcs, domain
/// arcs, closed loops, and per-cell areas.
pub fn boundary_arcs(scene: &Scene, b: &[f64]) -> Result<LaguerreDiagram, CellsError> {
    let regions = LiftedRegions::build(scene, b)?;
    build_diagram(scene, regions)
}

pub(crate) fn build_diagram(
    scene: &Scene,
    regions: LiftedRegions,
) -> Result<LaguerreDiagram, CellsError> {
    let n = regions.num_cells();
    let b = regions.b.clone();
    let scale = scene.scale();
    let noise_len = 1e-13 * scale;

    // Interior arcs, one canonical extraction per unordered pair.
    let mut arcs: Vec<InteriorArc> = Vec::new();
    for i in 0..n {
        let Some(poly) = &regions.cells[i] else {
            continue;
        };
        for j in (i + 1)..n {
            let Ok(conic) = scene.bisector(i, j, &b) else {
                continue; // empty equality set, facet misses the sheet
            };
            for points in face_curve_arcs(scene, poly, i, j, &b) {
                let arc = InteriorArc {
                    i,
                    j,
                    points,
                    conic,
                };
                if arc.chord_length() > noise_len {
                    arcs.push(arc);
                }
            }
        }
    }

    // Weld arc endpoints meeting at triple points to a shared representative
    // so loops close exactly. The weld radius stays far below tol_geom.
    weld_arc_endpoints(&mut arcs, 1e-10 * scale);

    // Domain pieces: each edge of the aperture polygon is split at the arc
    // endpoints lying on it; each sub-interval belongs to one cell.
    let mut cell_pieces: Vec<Vec<LoopPiece>> = vec![Vec::new(); n];
    build_domain_pieces(scene, &b, &arcs, &mut cell_pieces);
    for (idx, arc) in arcs.iter().enumerate() {
        cell_pieces[arc.i].push(LoopPiece::Arc {
            arc: idx,
            reversed: false,
        });
        cell_pieces[arc.j].push(LoopPiece::Arc {
            arc: idx,
            reversed: false,
        });
    }

    // Chain pieces into closed loops and orient them cell-on-the-left.
    let mut cells: Vec<CellBoundary> = Vec::with_capacity(n);
    for (i, pieces) in cell_pieces.iter().enumerate() {
        if pieces.is_empty() {
            cells.push(CellBoundary::default());
            continue;
        }
        let loops = chain_loops(i, pieces, &arcs, 1e-7 * scale)?;
        let mut oriented: Vec<Vec<LoopPiece>> = Vec::with_capacity(loops.len());
        let mut area = 0.0;
        for lp in loops {
            let lp = orient_cell_left(scene, &b, i, lp, &arcs);
            area += shoelace(&resolve_points(&lp, &arcs));
            oriented.push(lp);
        }
        cells.push(CellBoundary {
            loops: oriented,
            area,
        });
    }

    Ok(LaguerreDiagram {
        regions,
        arcs,
        cells,
    })
}

/// Arcs of the facet `P_owner ∩ P_other` intersected with sheet `owner`,
/// projected to the aperture plane. Exposed to the Jacobian so it can
/// extract the mirrored `(j, i)` route independently.
pub(crate) fn face_curve_arcs(
    scene: &Scene,
    poly: &Polyhedron,
    owner: usize,
    other: usize,
    b: &[f64],
) -> Vec<Vec<Vector2<f64>>> {
    let Some(face) = poly.face_with_tag(FaceTag::Bisector(other)) else {
        return Vec::new();
    };
    let Ok(conic) = scene.bisector(owner, other, b) else {
        return Vec::new();
    };
    let scale = scene.scale();
    if face.normal.z.abs() <= 1e-14 {
        vertical_face_arcs(scene, face, owner, b[owner], scale)
    } else {
        let Some(poly2) = projected_polygon(face) else {
            return Vec::new();
        };
        let tracer = Tracer {
            curve: &conic,
            poly: &poly2,
            arc_tol: scene.arc_tol(),
            scale,
        };
        tracer.extract()
    }
}

/// Equal-weight facets are vertical; the bisector projects to a straight
/// line and the curve is traced in (line-parameter, height) coordinates
/// where the sheet is a convex 1D graph.
fn vertical_face_arcs(
    scene: &Scene,
    face: &Face,
    owner: usize,
    b_owner: f64,
    scale: f64,
) -> Vec<Vec<Vector2<f64>>> {
    // In-plane direction of the projected line.
    let n2 = Vector2::new(face.normal.x, face.normal.y);
    if n2.norm() < 1e-300 {
        return Vec::new();
    }
    let dir = Vector2::new(-n2.y, n2.x).normalize();
    let o3 = face.verts[0];
    let o2 = Vector2::new(o3.x, o3.y);
    let coords: Vec<Vector2<f64>> = face
        .verts
        .iter()
        .map(|v| Vector2::new(dir.dot(&Vector2::new(v.x - o3.x, v.y - o3.y)), v.z - o3.z))
        .collect();
    let Some(poly2) = orient_ccw(coords) else {
        return Vec::new();
    };
    let curve = WallSheet {
        scene,
        target: owner,
        b_target: b_owner,
        origin: o2,
        dir,
        z0: o3.z,
    };
    let tracer = Tracer {
        curve: &curve,
        poly: &poly2,
        arc_tol: scene.arc_tol(),
        scale,
    };
    tracer
        .extract()
        .into_iter()
        .map(|pts| pts.into_iter().map(|p| o2 + dir * p.x).collect())
        .collect()
}

/// Smooth scalar field whose zero set is the curve being traced.
trait CurveField {
    fn value(&self, p: Vector2<f64>) -> f64;
    fn gradient(&self, p: Vector2<f64>) -> Vector2<f64>;

    fn snap(&self, mut p: Vector2<f64>, tol: f64) -> Option<Vector2<f64>> {
        for _ in 0..40 {
            let r = self.value(p);
            if r.abs() <= tol {
                return Some(p);
            }
            let g = self.gradient(p);
            let g2 = g.norm_squared();
            if g2 < 1e-300 {
                return None;
            }
            p -= g * (r / g2);
        }
        (self.value(p).abs() <= tol).then_some(p)
    }
}

impl CurveField for BisectorConic {
    fn value(&self, p: Vector2<f64>) -> f64 {
        self.residual(p)
    }
    fn gradient(&self, p: Vector2<f64>) -> Vector2<f64> {
        self.residual_gradient(p)
    }
}

/// Sheet height over a vertical wall, in (line-parameter, height) frame.
struct WallSheet<'a> {
    scene: &'a Scene,
    target: usize,
    b_target: f64,
    origin: Vector2<f64>,
    dir: Vector2<f64>,
    z0: f64,
}

impl CurveField for WallSheet<'_> {
    fn value(&self, p: Vector2<f64>) -> f64 {
        let x = self.origin + self.dir * p.x;
        (p.y + self.z0)
            - self
                .scene
                .sheet_height(PlanePoint::from(x), self.target, self.b_target)
    }
    fn gradient(&self, p: Vector2<f64>) -> Vector2<f64> {
        let x = self.origin + self.dir * p.x;
        let y = self.scene.targets()[self.target];
        let d = self.scene.height_gap();
        let dx = x.x - y.y1;
        let dy = x.y - y.y2;
        let r = (dx * dx + dy * dy + d * d).sqrt();
        let dsheet_dt = (dx * self.dir.x + dy * self.dir.y) / r;
        Vector2::new(-dsheet_dt, 1.0)
    }
}

fn projected_polygon(face: &Face) -> Option<Vec<Vector2<f64>>> {
    orient_ccw(
        face.verts
            .iter()
            .map(|v| Vector2::new(v.x, v.y))
            .collect(),
    )
}

fn orient_ccw(mut verts: Vec<Vector2<f64>>) -> Option<Vec<Vector2<f64>>> {
    if verts.len() < 3 {
        return None;
    }
    let area = shoelace(&verts);
    let diam = polygon_diameter(&verts);
    if area.abs() <= 1e-14 * diam * diam {
        return None; // degenerate sliver
    }
    if area < 0.0 {
        verts.reverse();
    }
    Some(verts)
}

fn polygon_diameter(verts: &[Vector2<f64>]) -> f64 {
    let mut lo = verts[0];
    let mut hi = verts[0];
    for v in verts {
        lo.x = lo.x.min(v.x);
        lo.y = lo.y.min(v.y);
        hi.x = hi.x.max(v.x);
        hi.y = hi.y.max(v.y);
    }
    (hi - lo).norm()
}

fn shoelace(pts: &[Vector2<f64>]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for k in 0..n {
        let a = pts[k];
        let b = pts[(k + 1) % n];
        s += a.x * b.y - a.y * b.x;
    }
    0.5 * s
}

fn contains_convex(poly: &[Vector2<f64>], p: Vector2<f64>, tol: f64) -> bool {
    let n = poly.len();
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        let e = b - a;
        if e.x * (p.y - a.y) - e.y * (p.x - a.x) < -tol * e.norm() {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy)]
struct Crossing {
    point: Vector2<f64>,
    used: bool,
}

/// Implicit-curve tracer over one convex facet polygon.
struct Tracer<'a, C: CurveField + ?Sized> {
    curve: &'a C,
    poly: &'a [Vector2<f64>],
    arc_tol: f64,
    scale: f64,
}

impl<C: CurveField + ?Sized> Tracer<'_, C> {
    fn snap_tol(&self) -> f64 {
        1e-13 * self.scale
    }

    fn extract(&self) -> Vec<Vec<Vector2<f64>>> {
        let mut crossings = self.edge_crossings();
        if crossings.is_empty() {
            return Vec::new();
        }
        let mut arcs = Vec::new();
        for s in 0..crossings.len() {
            if crossings[s].used {
                continue;
            }
            crossings[s].used = true;
            let start = crossings[s].point;
            let (mut pts, exit) = self.march(start);
            // Prefer the exact coordinates of the matching edge crossing.
            let diam = polygon_diameter(self.poly);
            let mut endpoint = exit;
            if let Some(k) = nearest_unused(&crossings, exit, 1e-6 * diam) {
                crossings[k].used = true;
                endpoint = crossings[k].point;
            }
            if pts.last().is_none_or(|l| (l - endpoint).norm() > 0.0) {
                pts.push(endpoint);
            }
            if pts.len() >= 2 {
                arcs.push(pts);
            }
        }
        arcs
    }

    /// Roots of the field along every polygon edge (at most two per edge:
    /// a line meets a conic, or a convex graph, at most twice).
    fn edge_crossings(&self) -> Vec<Crossing> {
        let mut out: Vec<Crossing> = Vec::new();
        let n = self.poly.len();
        let diam = polygon_diameter(self.poly);
        for k in 0..n {
            let a = self.poly[k];
            let b = self.poly[(k + 1) % n];
            let f = |t: f64| self.curve.value(a + (b - a) * t);
            const SAMPLES: usize = 24;
            let mut prev_t = 0.0;
            let mut prev_v = f(0.0);
            for s in 1..=SAMPLES {
                let t = s as f64 / SAMPLES as f64;
                let v = f(t);
                if prev_v == 0.0 || (prev_v < 0.0) != (v < 0.0) {
                    let root = bisect_root(&f, prev_t, t, prev_v, v);
                    let p = a + (b - a) * root;
                    if !out
                        .iter()
                        .any(|c| (c.point - p).norm() <= 1e-11 * diam.max(1e-300))
                    {
                        out.push(Crossing {
                            point: p,
                            used: false,
                        });
                    }
                }
                prev_t = t;
                prev_v = v;
            }
        }
        out
    }

    /// Predictor-corrector march from a boundary crossing into the polygon
    /// until the curve leaves it; returns the sampled interior points and
    /// the boundary exit point.
    fn march(&self, start: Vector2<f64>) -> (Vec<Vector2<f64>>, Vector2<f64>) {
        let diam = polygon_diameter(self.poly);
        let in_tol = 1e-12 * diam;
        let h_max = 0.125 * diam;
        let h_min = (1e-4 * self.arc_tol).max(1e-13 * self.scale);
        let mut h = (diam / 64.0).clamp(h_min, h_max);

        let mut tangent = self.tangent_at(start);
        if !self.points_inward(start, tangent, diam) {
            tangent = -tangent;
        }

        let mut pts = vec![start];
        let mut p = start;
        for _ in 0..50_000 {
            let mut corr = None;
            let mut t_new = tangent;
            while h >= h_min {
                let pred = p + tangent * h;
                match self.curve.snap(pred, self.snap_tol()) {
                    Some(c) => {
                        let mut t = self.tangent_at(c);
                        if t.dot(&tangent) < 0.0 {
                            t = -t;
                        }
                        // Chord deviation estimate: kappa h^2 / 8.
                        let dev = 0.125 * (t - tangent).norm() * h;
                        if dev > self.arc_tol && h > h_min {
                            h *= 0.5;
                            continue;
                        }
                        corr = Some(c);
                        t_new = t;
                        if dev < 0.125 * self.arc_tol {
                            h = (h * 1.6).min(h_max);
                        }
                        break;
                    }
                    None => {
                        h *= 0.5;
                    }
                }
            }
            let Some(c) = corr else {
                // Corrector kept failing: exit through the boundary along
                // the last tangent.
                let exit = self.exit_point(p, p + tangent * (4.0 * h_min));
                return (pts, exit);
            };
            if !contains_convex(self.poly, c, in_tol) {
                let exit = self.exit_point(p, c);
                return (pts, exit);
            }
            if (c - p).norm() > 0.0 {
                pts.push(c);
            }
            p = c;
            tangent = t_new;
        }
        (pts, p)
    }

    fn tangent_at(&self, p: Vector2<f64>) -> Vector2<f64> {
        let g = self.curve.gradient(p);
        let t = Vector2::new(-g.y, g.x);
        let n = t.norm();
        if n < 1e-300 {
            Vector2::new(1.0, 0.0)
        } else {
            t / n
        }
    }

    fn points_inward(&self, start: Vector2<f64>, dir: Vector2<f64>, diam: f64) -> bool {
        for probe in [1e-3, 1e-5, 1e-7] {
            let h = probe * diam;
            let fwd = self
                .curve
                .snap(start + dir * h, self.snap_tol())
                .map(|p| contains_convex(self.poly, p, 0.0));
            let bwd = self
                .curve
                .snap(start - dir * h, self.snap_tol())
                .map(|p| contains_convex(self.poly, p, 0.0));
            match (fwd, bwd) {
                (Some(true), Some(false)) | (Some(true), None) => return true,
                (Some(false), Some(true)) | (None, Some(true)) => return false,
                _ => {}
            }
        }
        // Fall back to heading toward the polygon centroid.
        let c: Vector2<f64> = self.poly.iter().sum::<Vector2<f64>>() / self.poly.len() as f64;
        dir.dot(&(c - start)) >= 0.0
    }

    /// The chord `p_in -> p_out` leaves the polygon; root-find the curve on
    /// the crossed edge to get a boundary-exact exit point.
    fn exit_point(&self, p_in: Vector2<f64>, p_out: Vector2<f64>) -> Vector2<f64> {
        let n = self.poly.len();
        let mut best: Option<(f64, usize, f64)> = None; // (s on chord, edge, t on edge)
        let d = p_out - p_in;
        for k in 0..n {
            let a = self.poly[k];
            let b = self.poly[(k + 1) % n];
            let e = b - a;
            let denom = d.x * e.y - d.y * e.x;
            if denom.abs() < 1e-300 {
                continue;
            }
            let r = a - p_in;
            let s = (r.x * e.y - r.y * e.x) / denom;
            let t = (r.x * d.y - r.y * d.x) / denom;
            if (-1e-9..=1.0 + 1e-9).contains(&s) && (-1e-9..=1.0 + 1e-9).contains(&t) {
                if best.is_none_or(|(bs, _, _)| s < bs) {
                    best = Some((s, k, t));
                }
            }
        }
        let Some((_, k, t_hit)) = best else {
            return p_out;
        };
        let a = self.poly[k];
        let bb = self.poly[(k + 1) % n];
        let f = |t: f64| self.curve.value(a + (bb - a) * t);
        // Bracket a sign change near the chord hit, widening as needed.
        for half_width in [0.02, 0.1, 0.5, 1.0] {
            let lo = (t_hit - half_width).max(0.0);
            let hi = (t_hit + half_width).min(1.0);
            const M: usize = 32;
            let mut pt = lo;
            let mut pv = f(lo);
            let mut found: Option<(f64, f64, f64, f64)> = None;
            for s in 1..=M {
                let t = lo + (hi - lo) * s as f64 / M as f64;
                let v = f(t);
                if pv == 0.0 || (pv < 0.0) != (v < 0.0) {
                    found = Some((pt, t, pv, v));
                    break;
                }
                pt = t;
                pv = v;
            }
            if let Some((t0, t1, v0, v1)) = found {
                let root = bisect_root(&f, t0, t1, v0, v1);
                return a + (bb - a) * root;
            }
        }
        // Tangential graze: accept the straight chord intersection.
        a + (bb - a) * t_hit.clamp(0.0, 1.0)
    }
}

fn nearest_unused(crossings: &[Crossing], p: Vector2<f64>, tol: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in crossings.iter().enumerate() {
        if c.used {
            continue;
        }
        let d = (c.point - p).norm();
        if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

fn bisect_root(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, mut flo: f64, fhi: f64) -> f64 {
    if flo == 0.0 {
        return lo;
    }
    if fhi == 0.0 {
        return hi;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Weld arc endpoints within `radius` to their cluster mean so that loops
/// close on exact coordinates.
fn weld_arc_endpoints(arcs: &mut [InteriorArc], radius: f64) {
    #[derive(Clone, Copy)]
    struct End {
        arc: usize,
        last: bool,
        p: Vector2<f64>,
    }
    let mut ends: Vec<End> = Vec::with_capacity(arcs.len() * 2);
    for (k, a) in arcs.iter().enumerate() {
        ends.push(End {
            arc: k,
            last: false,
            p: a.points[0],
        });
        ends.push(End {
            arc: k,
            last: true,
            p: *a.points.last().unwrap(),
        });
    }
    let mut cluster = vec![usize::MAX; ends.len()];
    let mut reps: Vec<(Vector2<f64>, usize)> = Vec::new();
    for (k, e) in ends.iter().enumerate() {
        let mut assigned = false;
        for (ci, (rep, count)) in reps.iter_mut().enumerate() {
            if (*rep - e.p).norm() <= radius {
                // Running mean keeps the representative stable.
                *rep = (*rep * *count as f64 + e.p) / (*count as f64 + 1.0);
                *count += 1;
                cluster[k] = ci;
                assigned = true;
                break;
            }
        }
        if !assigned {
            cluster[k] = reps.len();
            reps.push((e.p, 1));
        }
    }
    for (k, e) in ends.iter().enumerate() {
        let (rep, count) = reps[cluster[k]];
        if count < 2 {
            continue; // lone endpoint, keep the root-found coordinates
        }
        let arc = &mut arcs[e.arc];
        if e.last {
            let m = arc.points.len() - 1;
            arc.points[m] = rep;
        } else {
            arc.points[0] = rep;
        }
    }
}

/// Split each domain edge at the arc endpoints on it and hand every
/// sub-interval to the cell owning its midpoint.
fn build_domain_pieces(
    scene: &Scene,
    b: &[f64],
    arcs: &[InteriorArc],
    cell_pieces: &mut [Vec<LoopPiece>],
) {
    let scale = scene.scale();
    let on_edge_tol = 1e-8 * scale;
    for k in 0..scene.domain().num_edges() {
        let (a, bb) = scene.domain().edge(k);
        let e = bb - a;
        let len = e.norm();
        let dir = e / len;
        let mut splits: Vec<(f64, Vector2<f64>)> = Vec::new();
        for arc in arcs {
            for p in [arc.points[0], *arc.points.last().unwrap()] {
                let rel = p - a;
                let off = (dir.x * rel.y - dir.y * rel.x).abs();
                if off > on_edge_tol {
                    continue;
                }
                let t = dir.dot(&rel) / len;
                if t > 1e-12 && t < 1.0 - 1e-12 {
                    splits.push((t, p));
                }
            }
        }
        splits.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        splits.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-13);
        let mut pts: Vec<Vector2<f64>> = Vec::with_capacity(splits.len() + 2);
        pts.push(a);
        pts.extend(splits.into_iter().map(|(_, p)| p));
        pts.push(bb);
        for w in pts.windows(2) {
            let (p0, p1) = (w[0], w[1]);
            if (p1 - p0).norm() <= 1e-13 * scale {
                continue;
            }
            let mid = PlanePoint::from((p0 + p1) * 0.5);
            let owner = classify_unchecked(scene, mid, b);
            cell_pieces[owner].push(LoopPiece::Domain {
                edge: k,
                a: p0,
                b: p1,
            });
        }
    }
}

/// Chain a cell's pieces into closed loops by matching endpoints.
fn chain_loops(
    cell: usize,
    pieces: &[LoopPiece],
    arcs: &[InteriorArc],
    weld: f64,
) -> Result<Vec<Vec<LoopPiece>>, CellsError> {
    let ends: Vec<(Vector2<f64>, Vector2<f64>)> =
        pieces.iter().map(|p| piece_ends(p, arcs)).collect();

    // Cluster endpoints.
    let mut reps: Vec<Vector2<f64>> = Vec::new();
    let mut cluster_of = |p: Vector2<f64>, reps: &mut Vec<Vector2<f64>>| -> usize {
        for (ci, r) in reps.iter().enumerate() {
            if (*r - p).norm() <= weld {
                return ci;
            }
        }
        reps.push(p);
        reps.len() - 1
    };
    let mut piece_clusters: Vec<(usize, usize)> = Vec::with_capacity(pieces.len());
    for (s, e) in &ends {
        let cs = cluster_of(*s, &mut reps);
        let ce = cluster_of(*e, &mut reps);
        piece_clusters.push((cs, ce));
    }

    let mut at_cluster: Vec<Vec<(usize, bool)>> = vec![Vec::new(); reps.len()];
    for (idx, (cs, ce)) in piece_clusters.iter().enumerate() {
        at_cluster[*cs].push((idx, false)); // piece starts here
        at_cluster[*ce].push((idx, true)); // piece ends here
    }

    let mut used = vec![false; pieces.len()];
    let mut loops: Vec<Vec<LoopPiece>> = Vec::new();
    for first in 0..pieces.len() {
        if used[first] {
            continue;
        }
        let mut lp: Vec<LoopPiece> = Vec::new();
        let home = piece_clusters[first].0;
        let mut cur = first;
        let mut entered_at_end = false; // traverse start -> end
        loop {
            used[cur] = true;
            lp.push(oriented_piece(&pieces[cur], entered_at_end));
            let exit_cluster = if entered_at_end {
                piece_clusters[cur].0
            } else {
                piece_clusters[cur].1
            };
            if exit_cluster == home {
                break;
            }
            let next = at_cluster[exit_cluster]
                .iter()
                .find(|(idx, _)| !used[*idx]);
            match next {
                Some(&(idx, at_end)) => {
                    cur = idx;
                    entered_at_end = at_end;
                }
                None => return Err(CellsError::OpenLoop { cell }),
            }
        }
        loops.push(lp);
    }
    Ok(loops)
}

fn piece_ends(piece: &LoopPiece, arcs: &[InteriorArc]) -> (Vector2<f64>, Vector2<f64>) {
    match piece {
        LoopPiece::Arc { arc, reversed } => {
            let (s, e) = arcs[*arc].endpoints();
            if *reversed {
                (e, s)
            } else {
                (s, e)
            }
        }
        LoopPiece::Domain { a, b, .. } => (*a, *b),
    }
}

fn oriented_piece(piece: &LoopPiece, flip: bool) -> LoopPiece {
    match piece {
        LoopPiece::Arc { arc, reversed } => LoopPiece::Arc {
            arc: *arc,
            reversed: *reversed ^ flip,
        },
        LoopPiece::Domain { edge, a, b } => {
            if flip {
                LoopPiece::Domain {
                    edge: *edge,
                    a: *b,
                    b: *a,
                }
            } else {
                LoopPiece::Domain {
                    edge: *edge,
                    a: *a,
                    b: *b,
                }
            }
        }
    }
}

fn resolve_points(pieces: &[LoopPiece], arcs: &[InteriorArc]) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for piece in pieces {
        let pts: Vec<Vector2<f64>> = match piece {
            LoopPiece::Arc { arc, reversed } => {
                if *reversed {
                    arcs[*arc].points.iter().rev().cloned().collect()
                } else {
                    arcs[*arc].points.clone()
                }
            }
            LoopPiece::Domain { a, b, .. } => vec![*a, *b],
        };
        let skip = usize::from(!out.is_empty());
        out.extend(pts.into_iter().skip(skip));
    }
    if out.len() >= 2 && (out[out.len() - 1] - out[0]).norm() == 0.0 {
        out.pop();
    }
    out
}

/// Flip the loop if the cell lies to the right of its traversal. The side
/// is decided by classifying probe points offset from the longest resolved
/// segment; probes outside the aperture count as "not this cell".
fn orient_cell_left(
    scene: &Scene,
    b: &[f64],
    cell: usize,
    pieces: Vec<LoopPiece>,
    arcs: &[InteriorArc],
) -> Vec<LoopPiece> {
    let pts = resolve_points(&pieces, arcs);
    let n = pts.len();
    if n < 2 {
        return pieces;
    }
    // Longest segments first: they give the most room for offset probes.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &bb| {
        let la = (pts[(a + 1) % n] - pts[a]).norm();
        let lb = (pts[(bb + 1) % n] - pts[bb]).norm();
        lb.partial_cmp(&la).unwrap()
    });
    let probe_label = |p: Vector2<f64>| -> Option<usize> {
        if !scene.domain().contains(p, 0.0) {
            return None;
        }
        Some(classify_unchecked(scene, PlanePoint::from(p), b))
    };
    for &k in order.iter().take(16.min(n)) {
        let a = pts[k];
        let bp = pts[(k + 1) % n];
        let d = bp - a;
        let len = d.norm();
        if len < 1e-300 {
            continue;
        }
        let dir = d / len;
        let left = Vector2::new(-dir.y, dir.x);
        let mid = (a + bp) * 0.5;
        for hh in [0.25 * scene.arc_tol(), 0.05 * scene.arc_tol(), 1e-8 * scene.scale()] {
            let l = probe_label(mid + left * hh);
            let r = probe_label(mid - left * hh);
            match (l == Some(cell), r == Some(cell)) {
                (true, false) => return pieces,
                (false, true) => return reverse_loop(pieces),
                _ => {}
            }
        }
    }
    // Undecidable sliver: default to positive orientation.
    if shoelace(&pts) < 0.0 {
        reverse_loop(pieces)
    } else {
        pieces
    }
}

fn reverse_loop(pieces: Vec<LoopPiece>) -> Vec<LoopPiece> {
    pieces
        .into_iter()
        .rev()
        .map(|p| oriented_piece(&p, true))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::SourceDensity;
    use crate::geometry::TargetPoint;
    use crate::polygon::ConvexPolygon;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn square_scene(targets: &[[f64; 2]], beta: f64) -> Scene {
        let n = targets.len();
        Scene::new(
            1.0,
            beta,
            ConvexPolygon::rectangle(-1.0, -1.0, 1.0, 1.0),
            targets.iter().map(|t| TargetPoint::new(t[0], t[1])).collect(),
            vec![1.0 / n as f64; n],
            SourceDensity::Constant(0.25),
        )
        .unwrap()
    }

    fn grid_targets(n: usize, lo: f64, hi: f64) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let fx = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                let fy = if n == 1 { 0.5 } else { j as f64 / (n - 1) as f64 };
                out.push([lo + (hi - lo) * fx, lo + (hi - lo) * fy]);
            }
        }
        out
    }

    #[test]
    fn single_cell_boundary_is_the_domain() {
        let s = square_scene(&[[0.1, -0.2]], 2.0);
        let d = boundary_arcs(&s, &[0.0]).unwrap();
        assert!(d.arcs.is_empty());
        assert_eq!(d.cells[0].loops.len(), 1);
        assert_relative_eq!(d.cells[0].area, 4.0, max_relative = 1e-12);
        let pts = d.loop_points(&d.cells[0].loops[0]);
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn two_symmetric_cells_split_by_straight_arc() {
        // Equal weights: vertical facet, the bisector is the line x1 = 0.
        let s = square_scene(&[[-0.5, 0.0], [0.5, 0.0]], 2.0);
        let d = boundary_arcs(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(d.arcs.len(), 1);
        for p in &d.arcs[0].points {
            assert!(p.x.abs() < 1e-9, "arc point off the symmetry line: {p:?}");
        }
        assert_relative_eq!(d.cells[0].area, 2.0, max_relative = 1e-9);
        assert_relative_eq!(d.cells[1].area, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn curved_arc_points_have_equal_costs() {
        let s = square_scene(&[[-0.4, 0.1], [0.45, -0.2]], 2.0);
        let b = [0.05, -0.1];
        let d = boundary_arcs(&s, &b).unwrap();
        assert_eq!(d.arcs.len(), 1);
        let tol = s.tol_geom();
        let arc = &d.arcs[0];
        assert!(arc.points.len() > 3);
        for p in &arc.points {
            let ci = s.cost_to(PlanePoint::from(*p), s.targets()[0]) + b[0];
            let cj = s.cost_to(PlanePoint::from(*p), s.targets()[1]) + b[1];
            assert!(
                (ci - cj).abs() <= tol,
                "cost residual {} at {p:?}",
                (ci - cj).abs()
            );
        }
    }

    #[test]
    fn partition_area_matches_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = square_scene(&grid_targets(3, -0.6, 0.6), 2.0);
        for trial in 0..5 {
            let b: Vec<f64> = (0..9).map(|_| rng.random_range(-0.2..0.2)).collect();
            let d = boundary_arcs(&s, &b).unwrap();
            let total: f64 = d.areas().iter().sum();
            assert_relative_eq!(total, 4.0, max_relative = 1e-9);
            let _ = trial;
        }
    }

    #[test]
    fn arc_endpoints_triple_or_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = square_scene(&grid_targets(5, -0.7, 0.7), 2.0);
        let b: Vec<f64> = (0..25).map(|_| rng.random_range(-0.1..0.1)).collect();
        let d = boundary_arcs(&s, &b).unwrap();
        assert!(!d.arcs.is_empty());
        let tol = s.tol_geom();
        for arc in &d.arcs {
            for p in [arc.points[0], *arc.points.last().unwrap()] {
                let on_boundary = s.domain().max_edge_excess(p).abs() <= 1e-7 * s.scale();
                let pp = PlanePoint::from(p);
                let ci = s.cost(pp, arc.i) + b[arc.i];
                let triple = (0..25).any(|k| {
                    k != arc.i && k != arc.j && {
                        let ck = s.cost(pp, k) + b[k];
                        (ck - ci).abs() <= 10.0 * tol
                    }
                });
                assert!(
                    on_boundary || triple,
                    "endpoint {p:?} of arc ({}, {}) neither on boundary nor triple",
                    arc.i,
                    arc.j
                );
            }
        }
    }

    #[test]
    fn loops_close_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = square_scene(&grid_targets(4, -0.5, 0.5), 1.8);
        let b: Vec<f64> = (0..16).map(|_| rng.random_range(-0.15..0.15)).collect();
        let d = boundary_arcs(&s, &b).unwrap();
        for cell in &d.cells {
            for lp in &cell.loops {
                let pts = d.loop_points(lp);
                assert!(pts.len() >= 3);
                // Consecutive pieces join on exact coordinates, so the
                // resolved loop has no duplicate closing point and every
                // junction gap is zero by construction.
                for w in pts.windows(2) {
                    assert!((w[1] - w[0]).norm() < 0.5 * s.domain().diameter());
                }
            }
        }
    }

    #[test]
    fn interior_arcs_are_shared_between_cells() {
        let s = square_scene(&grid_targets(3, -0.6, 0.6), 2.0);
        let b = vec![0.0; 9];
        let d = boundary_arcs(&s, &b).unwrap();
        for (idx, arc) in d.arcs.iter().enumerate() {
            let in_i = d.cells[arc.i]
                .loops
                .iter()
                .flatten()
                .any(|p| matches!(p, LoopPiece::Arc { arc: a, .. } if *a == idx));
            let in_j = d.cells[arc.j]
                .loops
                .iter()
                .flatten()
                .any(|p| matches!(p, LoopPiece::Arc { arc: a, .. } if *a == idx));
            assert!(in_i && in_j, "arc {idx} not shared by both of its cells");
        }
    }
}
