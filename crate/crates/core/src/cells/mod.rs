//! Laguerre cells by two independent engines.
//!
//! The grid engine rasterizes the cell definition directly: each sample is
//! assigned to the target minimizing `c(X, Y_i) + b_i`. The lifting engine
//! realizes each cell as the projection of a 3D power cell intersected with
//! the upper hyperboloid sheet of its target, which turns the curved-cell
//! comparisons into linear half-space tests. The two engines share no code
//! path and are cross-checked against each other in the tests.

mod arcs;

pub use arcs::{boundary_arcs, CellBoundary, InteriorArc, LaguerreDiagram, LoopPiece};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{GeometryError, LiftedSite, PlanePoint, Scene};
use crate::polyhedron::{FaceTag, Polyhedron};

#[derive(Debug, Error)]
pub enum CellsError {
    #[error("point ({x1}, {x2}) lies outside the aperture domain")]
    OutsideDomain { x1: f64, x2: f64 },
    #[error("lift condition violated for targets {i}, {j}: |b_i - b_j| = {gap} >= sqrt(4(alpha-beta)^2 + |y_i - y_j|^2) = {bound}")]
    LiftConditionViolated { i: usize, j: usize, gap: f64, bound: f64 },
    #[error("failed to close boundary loop of cell {cell}")]
    OpenLoop { cell: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Smallest index attaining `min_i c(X, Y_i) + b_i`; errors outside the domain.
pub fn classify(scene: &Scene, x: PlanePoint, b: &[f64]) -> Result<usize, CellsError> {
    if !scene.domain().contains(x.xy(), scene.tol_geom()) {
        return Err(CellsError::OutsideDomain { x1: x.x1, x2: x.x2 });
    }
    Ok(classify_unchecked(scene, x, b))
}

/// Argmin classification without the domain check (total on the plane).
pub fn classify_unchecked(scene: &Scene, x: PlanePoint, b: &[f64]) -> usize {
    scene.phase(x, b).1
}

/// Rasterized classification over the bounding box of the domain.
/// Label `-1` marks samples outside the aperture polygon.
#[derive(Debug, Clone)]
pub struct LabelGrid {
    pub nx: usize,
    pub ny: usize,
    /// Lower-left corner of the covered box.
    pub origin: Vector2<f64>,
    pub dx: f64,
    pub dy: f64,
    /// Row-major, `ny` rows of `nx` labels.
    pub labels: Vec<i32>,
}

impl LabelGrid {
    pub fn center(&self, ix: usize, iy: usize) -> PlanePoint {
        PlanePoint::new(
            self.origin.x + (ix as f64 + 0.5) * self.dx,
            self.origin.y + (iy as f64 + 0.5) * self.dy,
        )
    }

    pub fn label(&self, ix: usize, iy: usize) -> i32 {
        self.labels[iy * self.nx + ix]
    }

    pub fn pixel_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Fraction of in-domain samples carrying each cell label.
    pub fn label_fractions(&self, n: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n];
        let mut total = 0usize;
        for &l in &self.labels {
            if l >= 0 {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| c as f64 / total.max(1) as f64)
            .collect()
    }
}

/// Classify every pixel center of a `resolution` grid over the domain box.
pub fn grid_cells(scene: &Scene, b: &[f64], resolution: (usize, usize)) -> LabelGrid {
    let (nx, ny) = resolution;
    assert!(nx >= 2 && ny >= 2, "grid resolution must be at least 2x2");
    let (lo, hi) = scene.domain().bounding_box();
    let dx = (hi.x - lo.x) / nx as f64;
    let dy = (hi.y - lo.y) / ny as f64;
    let tol = scene.tol_geom();
    let labels: Vec<i32> = (0..ny)
        .into_par_iter()
        .flat_map_iter(|iy| {
            let y = lo.y + (iy as f64 + 0.5) * dy;
            (0..nx).map(move |ix| {
                let x = PlanePoint::new(lo.x + (ix as f64 + 0.5) * dx, y);
                if scene.domain().contains(x.xy(), tol) {
                    classify_unchecked(scene, x, b) as i32
                } else {
                    -1
                }
            })
        })
        .collect();
    LabelGrid {
        nx,
        ny,
        origin: lo,
        dx,
        dy,
        labels,
    }
}

/// Pairwise lift condition `|b_i - b_j| < sqrt(4 (alpha - beta)^2 + |y_i - y_j|^2)`.
pub fn check_lift_condition(scene: &Scene, b: &[f64]) -> bool {
    lift_condition_violation(scene, b).is_none()
}

fn lift_condition_violation(scene: &Scene, b: &[f64]) -> Option<(usize, usize, f64, f64)> {
    let n = scene.num_targets();
    for i in 0..n {
        for j in (i + 1)..n {
            let bound = scene.sheet_gap_threshold(i, j);
            let gap = (b[i] - b[j]).abs();
            if gap >= bound {
                return Some((i, j, gap, bound));
            }
        }
    }
    None
}

/// The `i`-th cell of the 3D power diagram of `sites`, clipped to `[lo, hi]`.
pub fn power_cell(
    i: usize,
    sites: &[LiftedSite],
    lo: Vector3<f64>,
    hi: Vector3<f64>,
) -> Option<Polyhedron> {
    let mut poly = Polyhedron::axis_box(lo, hi);
    for (j, s) in sites.iter().enumerate() {
        if j == i {
            continue;
        }
        let (n, c) = power_halfspace(&sites[i], s);
        poly = poly.clip(n, c, FaceTag::Bisector(j))?;
    }
    Some(poly)
}

/// Half-space `|x - q_i|^2 + w_i <= |x - q_j|^2 + w_j` expanded to
/// `2 (q_j - q_i) . x <= (|q_j|^2 + w_j) - (|q_i|^2 + w_i)`.
fn power_halfspace(si: &LiftedSite, sj: &LiftedSite) -> (Vector3<f64>, f64) {
    let n = 2.0 * (sj.q - si.q);
    let c = (sj.q.norm_squared() + sj.weight) - (si.q.norm_squared() + si.weight);
    (n, c)
}

/// All restricted power cells `P_i = Pow_i(Q) ∩ (Ω x R)` for one weight
/// vector, together with the site list. This is the lifting engine's full
/// state; Laguerre-cell membership reduces to half-space tests on the
/// target's hyperboloid sheet.
#[derive(Debug, Clone)]
pub struct LiftedRegions {
    pub b: Vec<f64>,
    pub sites: Vec<LiftedSite>,
    /// `None` marks a 3D power cell with empty interior.
    pub cells: Vec<Option<Polyhedron>>,
    member_tol: f64,
}

impl LiftedRegions {
    /// Build every restricted power cell. Fails if the pairwise lift
    /// condition does not hold (the power-diagram identity needs it).
    pub fn build(scene: &Scene, b: &[f64]) -> Result<Self, CellsError> {
        scene.check_weights(b)?;
        if let Some((i, j, gap, bound)) = lift_condition_violation(scene, b) {
            return Err(CellsError::LiftConditionViolated { i, j, gap, bound });
        }
        let sites = scene.lift_sites(b);
        let (lo2, hi2) = scene.domain().bounding_box();

        // Height range covering every sheet over the domain, with margin.
        let mut max_dist: f64 = 0.0;
        for v in scene.domain().vertices() {
            for t in scene.targets() {
                let d = Vector3::new(v.x - t.y1, v.y - t.y2, scene.height_gap());
                max_dist = max_dist.max(d.norm());
            }
        }
        let bmin = b.iter().cloned().fold(f64::INFINITY, f64::min);
        let bmax = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let margin = 0.1 * max_dist + 1e-6 * scene.scale();
        let lo = Vector3::new(lo2.x, lo2.y, bmin - margin);
        let hi = Vector3::new(hi2.x, hi2.y, bmax + max_dist + margin);

        // Domain prism walls first: they keep the polyhedra small before
        // the O(N) bisector clips.
        let mut prism = Some(Polyhedron::axis_box(lo, hi));
        for k in 0..scene.domain().num_edges() {
            let (a, _) = scene.domain().edge(k);
            let n2 = scene.domain().outward_normal(k);
            let n3 = Vector3::new(n2.x, n2.y, 0.0);
            let c = n2.dot(&a);
            prism = prism.and_then(|p| p.clip(n3, c, FaceTag::Domain(k)));
        }
        let prism = prism.expect("domain prism cannot be empty");

        let cells: Vec<Option<Polyhedron>> = (0..sites.len())
            .into_par_iter()
            .map(|i| {
                let mut poly = prism.clone();
                for (j, s) in sites.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let (n, c) = power_halfspace(&sites[i], s);
                    match poly.clip(n, c, FaceTag::Bisector(j)) {
                        Some(q) => poly = q,
                        None => return None,
                    }
                }
                Some(poly)
            })
            .collect();

        Ok(LiftedRegions {
            b: b.to_vec(),
            sites,
            cells,
            member_tol: 1e-12 * scene.scale(),
        })
    }

    /// Laguerre-cell membership through the lifting: `X ∈ Lag_i(b)` iff the
    /// lift of `X` onto sheet `i` lies in the restricted power cell `P_i`.
    pub fn member(&self, scene: &Scene, i: usize, x: PlanePoint) -> bool {
        if !scene.domain().contains(x.xy(), self.member_tol) {
            return false;
        }
        let Some(cell) = &self.cells[i] else {
            return false;
        };
        let p = Vector3::new(x.x1, x.x2, scene.sheet_height(x, i, self.b[i]));
        cell.contains(p, self.member_tol)
    }

    /// Classification by the lifting engine. The cost argmin is probed
    /// first and confirmed through the half-space route; if confirmation
    /// fails (a sample within rounding of an arc) the cells are scanned in
    /// index order. `None` when no cell accepts the sample.
    pub fn classify(&self, scene: &Scene, x: PlanePoint) -> Option<usize> {
        let candidate = classify_unchecked(scene, x, &self.b);
        if self.member(scene, candidate, x) {
            // Confirmed via the lifted half-space tests.
            let mut k = 0;
            while k < candidate {
                if self.member(scene, k, x) {
                    return Some(k);
                }
                k += 1;
            }
            return Some(candidate);
        }
        (0..self.cells.len()).find(|&i| self.member(scene, i, x))
    }

    pub fn is_empty_cell(&self, i: usize) -> bool {
        self.cells[i].is_none()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Convenience wrapper matching the cell-construction entry point of the
/// lifting engine: membership predicate plus the 3D cells.
pub fn lifted_regions(scene: &Scene, b: &[f64]) -> Result<LiftedRegions, CellsError> {
    LiftedRegions::build(scene, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::SourceDensity;
    use crate::geometry::TargetPoint;
    use crate::polygon::ConvexPolygon;
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
    fn classify_single_target_and_outside() {
        let s = square_scene(&[[0.2, 0.2]], 2.0);
        assert_eq!(classify(&s, PlanePoint::new(0.1, -0.4), &[0.0]).unwrap(), 0);
        assert!(matches!(
            classify(&s, PlanePoint::new(1.5, 0.0), &[0.0]),
            Err(CellsError::OutsideDomain { .. })
        ));
    }

    #[test]
    fn classify_zero_weights_contains_projections() {
        // With b = 0 the projection of Y_k onto the aperture lies in cell k.
        let s = square_scene(&grid_targets(3, -0.6, 0.6), 2.0);
        let b = vec![0.0; 9];
        for (k, t) in s.targets().iter().enumerate() {
            let x = PlanePoint::new(t.y1, t.y2);
            assert_eq!(classify(&s, x, &b).unwrap(), k);
        }
    }

    #[test]
    fn classify_matches_exhaustive_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let targets: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)])
            .collect();
        let s = square_scene(&targets, 1.7);
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-0.2..0.2)).collect();
        for _ in 0..500 {
            let x = PlanePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for i in 0..10 {
                let c = s.cost(x, i) + b[i];
                if c < best {
                    best = c;
                    arg = i;
                }
            }
            assert_eq!(classify(&s, x, &b).unwrap(), arg);
        }
    }

    #[test]
    fn grid_single_target_all_zero() {
        let s = square_scene(&[[0.0, 0.0]], 2.0);
        let g = grid_cells(&s, &[0.0], (32, 32));
        assert!(g.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn grid_mirror_symmetry() {
        let s = square_scene(&[[-0.4, 0.0], [0.4, 0.0]], 2.0);
        let g = grid_cells(&s, &[0.0, 0.0], (64, 64));
        for iy in 0..64 {
            for ix in 0..64 {
                let l = g.label(ix, iy);
                let lm = g.label(63 - ix, iy);
                // Mirrored samples swap labels except exactly on the tie line.
                let c = g.center(ix, iy);
                if c.x1.abs() > g.dx {
                    assert_eq!(l, 1 - lm, "at {:?}", c);
                }
            }
        }
    }

    #[test]
    fn lift_condition_cases() {
        let s = square_scene(&[[0.3, 0.3], [0.3000000001, 0.3]], 2.0);
        assert!(check_lift_condition(&s, &[0.7, 0.7]));
        assert!(!check_lift_condition(&s, &[0.0, 2.0]));
        assert!(check_lift_condition(&s, &[0.0, 1.9]));
    }

    #[test]
    fn power_cell_single_site_is_box() {
        let sites = vec![LiftedSite::new(TargetPoint::new(0.0, 0.0), 0.0)];
        let cell = power_cell(
            0,
            &sites,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert_eq!(cell.faces.len(), 6);
        assert_eq!(cell.vertices().len(), 8);
    }

    #[test]
    fn power_cell_two_symmetric_sites_halve_the_box() {
        let sites = vec![
            LiftedSite::new(TargetPoint::new(-0.5, 0.0), 0.0),
            LiftedSite::new(TargetPoint::new(0.5, 0.0), 0.0),
        ];
        let lo = Vector3::new(-1.0, -1.0, -1.0);
        let hi = Vector3::new(1.0, 1.0, 1.0);
        let c0 = power_cell(0, &sites, lo, hi).unwrap();
        // Cell of the left site is the half-box x <= 0.
        assert!(c0.contains(Vector3::new(-0.5, 0.3, 0.2), 0.0));
        assert!(!c0.contains(Vector3::new(0.5, 0.3, 0.2), 1e-9));
        let cap = c0.face_with_tag(FaceTag::Bisector(1)).unwrap();
        for v in &cap.verts {
            assert!(v.x.abs() < 1e-12);
        }
    }

    #[test]
    fn power_cell_vertices_satisfy_all_inequalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sites: Vec<LiftedSite> = (0..8)
            .map(|_| {
                LiftedSite::new(
                    TargetPoint::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)),
                    rng.random_range(-0.4..0.4),
                )
            })
            .collect();
        let lo = Vector3::new(-1.5, -1.5, -2.0);
        let hi = Vector3::new(1.5, 1.5, 4.0);
        for i in 0..sites.len() {
            let Some(cell) = power_cell(i, &sites, lo, hi) else {
                continue;
            };
            for v in cell.vertices() {
                for (j, s) in sites.iter().enumerate() {
                    if j != i {
                        assert!(
                            sites[i].power(v) <= s.power(v) + 1e-8,
                            "vertex of cell {i} violates inequality against {j}"
                        );
                    }
                }
            }
            // Random interior points classify to i under the power distance.
            let verts = cell.vertices();
            let centroid: Vector3<f64> =
                verts.iter().sum::<Vector3<f64>>() / verts.len() as f64;
            for v in &verts {
                let p = centroid + (v - centroid) * 0.7;
                if cell.contains(p, -1e-9) {
                    let best = (0..sites.len())
                        .min_by(|&a, &b| {
                            sites[a].power(p).partial_cmp(&sites[b].power(p)).unwrap()
                        })
                        .unwrap();
                    assert_eq!(best, i);
                }
            }
        }
    }

    #[test]
    fn lifting_regions_contain_projections_at_zero_weights() {
        let s = square_scene(&grid_targets(3, -0.5, 0.5), 2.0);
        let b = vec![0.0; 9];
        let regions = LiftedRegions::build(&s, &b).unwrap();
        for (k, t) in s.targets().iter().enumerate() {
            assert!(regions.member(&s, k, PlanePoint::new(t.y1, t.y2)));
        }
    }

    #[test]
    fn lifting_mirror_symmetric_regions() {
        let s = square_scene(&[[-0.4, 0.1], [0.4, 0.1]], 2.0);
        let regions = LiftedRegions::build(&s, &[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let x = PlanePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let xm = PlanePoint::new(-x.x1, x.x2);
            if x.x1.abs() > 1e-6 {
                assert_eq!(
                    regions.member(&s, 0, x),
                    regions.member(&s, 1, xm),
                    "mirror symmetry at {:?}",
                    x
                );
            }
        }
    }

    #[test]
    fn lifting_violated_condition_is_an_error() {
        let s = square_scene(&[[0.3, 0.3], [0.31, 0.3]], 2.0);
        let err = LiftedRegions::build(&s, &[0.0, 2.5]).unwrap_err();
        assert!(matches!(err, CellsError::LiftConditionViolated { .. }));
    }

    #[test]
    fn lifting_agrees_with_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = square_scene(&grid_targets(5, -0.7, 0.7), 2.0);
        let b: Vec<f64> = (0..25).map(|_| rng.random_range(-0.15..0.15)).collect();
        let regions = LiftedRegions::build(&s, &b).unwrap();
        let mut disagreements = 0usize;
        let total = 20_000usize;
        for _ in 0..total {
            let x = PlanePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let oracle = classify_unchecked(&s, x, &b);
            match regions.classify(&s, x) {
                Some(l) if l == oracle => {}
                _ => disagreements += 1,
            }
        }
        assert!(
            (disagreements as f64) < 1e-3 * total as f64,
            "too many engine disagreements: {disagreements}"
        );
    }
}
