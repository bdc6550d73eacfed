//! Tetrahedral complexes: the spatial backbone of the reconstruction.
//!
//! A [`TetComplex`] is a conforming tetrahedralization of the convex hull of
//! its vertices with face-adjacency links.  Complexes are built either by
//! incremental Delaunay insertion ([`delaunay_tetrahedralize`],
//! [`TetComplex::insert_vertices`], [`TetComplex::remove_vertices`]) or as a
//! structured lattice ([`TetComplex::structured`]).  All geometric decisions
//! go through the filtered predicates in [`predicates`]; every stored
//! tetrahedron is positively oriented.

pub mod delaunay;
pub mod predicates;

use crate::Vec3;
use predicates::orient3d;
use std::collections::HashMap;
use thiserror::Error;

pub use delaunay::{delaunay_tetrahedralize, InsertReport, RemoveReport};

pub type VertexId = u32;
pub type TetId = u32;

/// Neighbor marker for faces on the convex hull.
pub const HULL: TetId = u32::MAX;

/// Two vertices closer than this are considered the same point.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Face `i` of a tetrahedron is opposite vertex `i`; `FACES[i]` lists the
/// local indices of its corners, ordered so that
/// `orient3d(face[0], face[1], face[2], v[i]) > 0` for a positively oriented
/// tetrahedron (the face normal by the right-hand rule points away from the
/// opposite vertex).
pub const FACES: [[usize; 3]; 4] = [[1, 3, 2], [0, 2, 3], [0, 3, 1], [0, 1, 2]];

/// The six vertex-index pairs forming the edges of a tetrahedron.
pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tetrahedron {
    /// Vertex ids, positively oriented.
    pub v: [VertexId; 4],
    /// `nbr[i]` is the tetrahedron sharing the face opposite `v[i]`, or
    /// [`HULL`] when that face lies on the convex hull.
    pub nbr: [TetId; 4],
}

#[derive(Debug, Clone, Default)]
pub struct TetComplex {
    pub vertices: Vec<Vec3>,
    pub tets: Vec<Tetrahedron>,
    /// Bumped on every topology change; consumers use it to invalidate
    /// caches and to detect stale cross-references.
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// Containing tetrahedron; points on shared boundaries report the lowest
    /// tetrahedron id among those containing the query.
    Inside(TetId),
    /// Outside the convex hull.
    Outside,
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point location walk failed to terminate")]
    WalkCycle,
    #[error("vertex {0} lies on the convex hull and cannot be removed")]
    HullVertexRemoval(VertexId),
    #[error("{0} is not a valid id")]
    InvalidId(u32),
}

impl TetComplex {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// Vertex ids of face `i` of tet `t` (opposite corner `i`), ordered per
    /// [`FACES`].
    pub fn face_vertices(&self, t: TetId, i: usize) -> [VertexId; 3] {
        let tet = &self.tets[t as usize];
        FACES[i].map(|k| tet.v[k])
    }

    /// Six times the signed volume of tet `t` (filtered; exactly positive
    /// for every tet of a valid complex).
    pub fn orient(&self, t: TetId) -> f64 {
        let [a, b, c, d] = self.tet_points(t);
        orient3d(&a, &b, &c, &d)
    }

    pub fn volume(&self, t: TetId) -> f64 {
        self.orient(t) / 6.0
    }

    pub fn tet_points(&self, t: TetId) -> [Vec3; 4] {
        self.tets[t as usize].v.map(|v| self.vertices[v as usize])
    }

    pub fn centroid(&self, t: TetId) -> Vec3 {
        let [a, b, c, d] = self.tet_points(t);
        (a + b + c + d) / 4.0
    }

    /// Barycentric coordinates of `p` in tet `t`.  The four weights sum to
    /// one; they are all in `[0, 1]` exactly when `p` lies inside the tet.
    pub fn barycentric(&self, t: TetId, p: &Vec3) -> [f64; 4] {
        let [v0, v1, v2, v3] = self.tet_points(t);
        let m = crate::Mat3::from_columns(&[v1 - v0, v2 - v0, v3 - v0]);
        match m.lu().solve(&(p - v0)) {
            Some(l) => [1.0 - l.x - l.y - l.z, l.x, l.y, l.z],
            // Unreachable for valid complexes; propagate NaN rather than a
            // silently wrong weight.
            None => [f64::NAN; 4],
        }
    }

    /// Spatial gradients of the four barycentric coordinates of tet `t`.
    ///
    /// Row `i` of the inverse edge matrix is the (constant) gradient of
    /// `lambda_i`; the four gradients sum to zero.  `None` for degenerate
    /// tets.
    pub fn lambda_gradients(&self, t: TetId) -> Option<[Vec3; 4]> {
        let [v0, v1, v2, v3] = self.tet_points(t);
        let m = crate::Mat3::from_columns(&[v1 - v0, v2 - v0, v3 - v0]);
        let inv = m.try_inverse()?;
        let g1 = Vec3::new(inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]);
        let g2 = Vec3::new(inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]);
        let g3 = Vec3::new(inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]);
        Some([-(g1 + g2 + g3), g1, g2, g3])
    }

    /// Circumcenter and circumradius of tet `t`, or `None` when the tet is
    /// degenerate at predicate tolerance.
    pub fn circumsphere(&self, t: TetId) -> Option<(Vec3, f64)> {
        let [v0, v1, v2, v3] = self.tet_points(t);
        if orient3d(&v0, &v1, &v2, &v3) == 0.0 {
            return None;
        }
        let m = crate::Mat3::from_rows(&[
            (2.0 * (v1 - v0)).transpose(),
            (2.0 * (v2 - v0)).transpose(),
            (2.0 * (v3 - v0)).transpose(),
        ]);
        let rhs = Vec3::new(
            v1.norm_squared() - v0.norm_squared(),
            v2.norm_squared() - v0.norm_squared(),
            v3.norm_squared() - v0.norm_squared(),
        );
        let center = m.lu().solve(&rhs)?;
        Some((center, (center - v0).norm()))
    }

    /// Circumradius of tet `t`; `+inf` for near-degenerate tets, making them
    /// sort first in largest-circumradius orderings.
    pub fn circumradius(&self, t: TetId) -> f64 {
        match self.circumsphere(t) {
            Some((_, r)) => r,
            None => f64::INFINITY,
        }
    }

    /// Walk from `hint` (or tet 0) to the tetrahedron containing `p`.
    ///
    /// Containment ties on shared faces/edges/vertices resolve to the lowest
    /// tet id among all tets containing `p`.  Returns
    /// [`GeometryError::WalkCycle`] if the walk exceeds its step budget,
    /// which only happens on complexes that violate the validity invariants.
    pub fn locate(&self, p: &Vec3, hint: Option<TetId>) -> Result<Location, GeometryError> {
        if self.tets.is_empty() {
            return Ok(Location::Outside);
        }
        let mut cur = match hint {
            Some(h) if (h as usize) < self.tets.len() => h,
            _ => 0,
        };
        let budget = 4 * self.tets.len() + 64;
        for step in 0..budget {
            let tet = &self.tets[cur as usize];
            let pts = tet.v.map(|v| self.vertices[v as usize]);
            let mut worst: Option<(usize, f64)> = None;
            let mut negatives = [false; 4];
            let mut n_neg = 0usize;
            for i in 0..4 {
                let [fa, fb, fc] = FACES[i];
                let o = orient3d(&pts[fa], &pts[fb], &pts[fc], p);
                if o < 0.0 {
                    negatives[i] = true;
                    n_neg += 1;
                    if worst.is_none_or(|(_, w)| o < w) {
                        worst = Some((i, o));
                    }
                }
            }
            let exit = match worst {
                None => return Ok(Location::Inside(self.resolve_tie(cur, p))),
                Some((i, _)) => {
                    // Straight most-negative descent can cycle on thin tets;
                    // past a grace period, pick among the negative faces
                    // pseudo-randomly (but deterministically).
                    if step > self.tets.len() && n_neg > 1 {
                        let mut pick = (mix(cur as u64 ^ ((step as u64) << 32)) as usize) % n_neg;
                        let mut j = 0;
                        loop {
                            if negatives[j] {
                                if pick == 0 {
                                    break j;
                                }
                                pick -= 1;
                            }
                            j += 1;
                        }
                    } else {
                        i
                    }
                }
            };
            match self.tets[cur as usize].nbr[exit] {
                HULL => return Ok(Location::Outside),
                n => cur = n,
            }
        }
        Err(GeometryError::WalkCycle)
    }

    /// `p` is inside `start`; collect every tet containing `p` across
    /// zero-orientation faces and return the smallest id.
    fn resolve_tie(&self, start: TetId, p: &Vec3) -> TetId {
        let mut best = start;
        let mut stack = vec![start];
        let mut seen = vec![start];
        while let Some(t) = stack.pop() {
            let tet = &self.tets[t as usize];
            let pts = tet.v.map(|v| self.vertices[v as usize]);
            for i in 0..4 {
                let [fa, fb, fc] = FACES[i];
                if orient3d(&pts[fa], &pts[fb], &pts[fc], p) == 0.0 {
                    let n = tet.nbr[i];
                    if n != HULL && !seen.contains(&n) {
                        seen.push(n);
                        if self.contains(n, p) {
                            best = best.min(n);
                            stack.push(n);
                        }
                    }
                }
            }
        }
        best
    }

    fn contains(&self, t: TetId, p: &Vec3) -> bool {
        let pts = self.tet_points(t);
        (0..4).all(|i| {
            let [fa, fb, fc] = FACES[i];
            orient3d(&pts[fa], &pts[fb], &pts[fc], p) >= 0.0
        })
    }

    /// All `(tet, face_slot)` pairs whose face lies on the convex hull.
    pub fn hull_faces(&self) -> Vec<(TetId, usize)> {
        let mut out = Vec::new();
        for (t, tet) in self.tets.iter().enumerate() {
            for i in 0..4 {
                if tet.nbr[i] == HULL {
                    out.push((t as TetId, i));
                }
            }
        }
        out
    }

    /// `true` for every vertex incident to a hull face.
    pub fn hull_vertex_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.vertices.len()];
        for (t, i) in self.hull_faces() {
            for v in self.face_vertices(t, i) {
                mask[v as usize] = true;
            }
        }
        mask
    }

    /// Unique undirected edges of the complex, each as an ordered pair.
    pub fn edges(&self) -> Vec<(VertexId, VertexId)> {
        let mut set = std::collections::BTreeSet::new();
        for tet in &self.tets {
            for (i, j) in TET_EDGES {
                let (a, b) = (tet.v[i].min(tet.v[j]), tet.v[i].max(tet.v[j]));
                set.insert((a, b));
            }
        }
        set.into_iter().collect()
    }

    /// Incident tetrahedra of every vertex.
    pub fn vertex_tets(&self) -> Vec<Vec<TetId>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for (t, tet) in self.tets.iter().enumerate() {
            for v in tet.v {
                out[v as usize].push(t as TetId);
            }
        }
        out
    }

    /// Structural validity: positive orientations, symmetric adjacency with
    /// matching shared faces, and hull faces consistently marked.
    pub fn validate(&self) -> Result<(), String> {
        for (t, tet) in self.tets.iter().enumerate() {
            for v in tet.v {
                if v as usize >= self.vertices.len() {
                    return Err(format!("tet {t} references vertex {v} out of range"));
                }
            }
            if self.orient(t as TetId) <= 0.0 {
                return Err(format!("tet {t} is not positively oriented"));
            }
            for i in 0..4 {
                let n = tet.nbr[i];
                if n == HULL {
                    continue;
                }
                let Some(other) = self.tets.get(n as usize) else {
                    return Err(format!("tet {t} neighbor {n} out of range"));
                };
                let mut face = self.face_vertices(t as TetId, i);
                face.sort_unstable();
                let back = (0..4).find(|&j| {
                    let mut f = self.face_vertices(n, j);
                    f.sort_unstable();
                    f == face && other.nbr[j] == t as TetId
                });
                if back.is_none() {
                    return Err(format!("tet {t} face {i}: neighbor {n} does not link back"));
                }
            }
        }
        Ok(())
    }

    /// Exhaustive empty-circumsphere check (quadratic; tests only).  A vertex
    /// may violate a circumsphere by at most `tol` relative to its radius.
    pub fn validate_delaunay(&self, tol: f64) -> Result<(), String> {
        for t in 0..self.tets.len() {
            let Some((center, r)) = self.circumsphere(t as TetId) else {
                return Err(format!("tet {t} is degenerate"));
            };
            let tet = &self.tets[t];
            for (v, p) in self.vertices.iter().enumerate() {
                if tet.v.contains(&(v as VertexId)) {
                    continue;
                }
                if (p - center).norm() < r * (1.0 - tol) {
                    return Err(format!("vertex {v} violates circumsphere of tet {t}"));
                }
            }
        }
        Ok(())
    }

    /// Freudenthal (Kuhn) lattice: `res^3` cubes on `[min, max]`, six
    /// tetrahedra per cube, conforming across cube boundaries.
    pub fn structured(min: Vec3, max: Vec3, res: u32) -> TetComplex {
        assert!(res >= 1, "lattice needs at least one cell");
        let n = res as usize;
        let np = n + 1;
        let mut vertices = Vec::with_capacity(np * np * np);
        let step = (max - min) / res as f64;
        for ix in 0..np {
            for iy in 0..np {
                for iz in 0..np {
                    vertices.push(
                        min + Vec3::new(ix as f64 * step.x, iy as f64 * step.y, iz as f64 * step.z),
                    );
                }
            }
        }
        let vid = |ix: usize, iy: usize, iz: usize| ((ix * np + iy) * np + iz) as VertexId;
        // The six axis orderings along the cube diagonal; odd permutations
        // get two corners swapped to restore positive orientation.
        const PERMS: [([usize; 3], bool); 6] = [
            ([0, 1, 2], true),
            ([1, 2, 0], true),
            ([2, 0, 1], true),
            ([0, 2, 1], false),
            ([2, 1, 0], false),
            ([1, 0, 2], false),
        ];
        let mut tets = Vec::with_capacity(6 * n * n * n);
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    for (perm, even) in PERMS {
                        let mut c = [ix, iy, iz];
                        let mut corners = [vid(c[0], c[1], c[2]); 4];
                        for (k, &axis) in perm.iter().enumerate() {
                            c[axis] += 1;
                            corners[k + 1] = vid(c[0], c[1], c[2]);
                        }
                        if !even {
                            corners.swap(1, 2);
                        }
                        tets.push(Tetrahedron { v: corners, nbr: [HULL; 4] });
                    }
                }
            }
        }
        let mut complex = TetComplex { vertices, tets, generation: 0 };
        complex.rebuild_adjacency();
        complex
    }

    /// Recompute all `nbr` links from shared faces (unmatched faces become
    /// hull faces).
    pub(crate) fn rebuild_adjacency(&mut self) {
        let mut map: HashMap<[VertexId; 3], (TetId, usize)> =
            HashMap::with_capacity(self.tets.len() * 2);
        for t in 0..self.tets.len() {
            for i in 0..4 {
                let mut f = self.face_vertices(t as TetId, i);
                f.sort_unstable();
                match map.remove(&f) {
                    Some((u, j)) => {
                        self.tets[t].nbr[i] = u;
                        self.tets[u as usize].nbr[j] = t as TetId;
                    }
                    None => {
                        self.tets[t].nbr[i] = HULL;
                        map.insert(f, (t as TetId, i));
                    }
                }
            }
        }
    }
}

/// SplitMix64 finalizer; used for deterministic pseudo-random tie-breaking.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_tet() -> TetComplex {
        TetComplex {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            tets: vec![Tetrahedron { v: [0, 1, 2, 3], nbr: [HULL; 4] }],
            generation: 0,
        }
    }

    #[test]
    fn face_order_constant_is_consistent() {
        let c = single_tet();
        let pts = c.tet_points(0);
        for i in 0..4 {
            let [fa, fb, fc] = FACES[i];
            assert!(
                orient3d(&pts[fa], &pts[fb], &pts[fc], &pts[i]) > 0.0,
                "face {i} must be oriented toward its opposite vertex"
            );
        }
    }

    #[test]
    fn barycentric_reconstructs_point_and_sums_to_one() {
        let c = single_tet();
        let p = Vec3::new(0.2, 0.3, 0.1);
        let l = c.barycentric(0, &p);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pts = c.tet_points(0);
        let rec: Vec3 = (0..4).map(|i| l[i] * pts[i]).sum();
        assert!((rec - p).norm() < 1e-12);
        // Vertices map to unit weights.
        let lv = c.barycentric(0, &pts[2]);
        assert!((lv[2] - 1.0).abs() < 1e-12 && lv[0].abs() < 1e-12);
    }

    #[test]
    fn circumradius_closed_forms() {
        // Unit corner tet: circumradius sqrt(3)/2 (center at (1/2,1/2,1/2)).
        let c = single_tet();
        let r = c.circumradius(0);
        assert!((r - 3.0_f64.sqrt() / 2.0).abs() < 1e-12, "corner tet: {r}");
        // Regular tet with edge a has R = a*sqrt(3/8).
        let a = 2.0 * 2.0_f64.sqrt();
        let reg = TetComplex {
            vertices: vec![
                Vec3::new(1.0, 1.0, 1.0),
                Vec3::new(-1.0, -1.0, 1.0),
                Vec3::new(-1.0, 1.0, -1.0),
                Vec3::new(1.0, -1.0, -1.0),
            ],
            tets: vec![Tetrahedron { v: [0, 1, 2, 3], nbr: [HULL; 4] }],
            generation: 0,
        };
        let rr = reg.circumradius(0);
        assert!((rr - a * (3.0_f64 / 8.0).sqrt()).abs() < 1e-12, "regular tet: {rr}");
        assert!((rr - 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn circumradius_degenerate_is_infinite() {
        let mut c = single_tet();
        c.vertices[3] = Vec3::new(0.5, 0.5, 0.0); // squash into the xy-plane
        assert!(c.circumradius(0).is_infinite());
    }

    #[test]
    fn locate_inside_outside_single_tet() {
        let c = single_tet();
        assert_eq!(
            c.locate(&Vec3::new(0.2, 0.2, 0.2), None).unwrap(),
            Location::Inside(0)
        );
        assert_eq!(c.locate(&Vec3::new(1.0, 1.0, 1.0), None).unwrap(), Location::Outside);
    }

    #[test]
    fn structured_lattice_is_valid_and_fills_the_box() {
        let min = Vec3::new(-1.0, -1.0, -1.0);
        let max = Vec3::new(1.0, 1.0, 1.0);
        let c = TetComplex::structured(min, max, 3);
        assert_eq!(c.n_vertices(), 4 * 4 * 4);
        assert_eq!(c.n_tets(), 6 * 27);
        c.validate().expect("structured lattice is a valid complex");
        let total: f64 = (0..c.n_tets()).map(|t| c.volume(t as TetId)).sum();
        assert!((total - 8.0).abs() < 1e-9, "tet volumes must tile the box, got {total}");
        // Freudenthal lattices are Delaunay up to cospherical ties.
        c.validate_delaunay(1e-9).expect("lattice is Delaunay within tolerance");
    }

    #[test]
    fn locate_agrees_with_exhaustive_scan_on_lattice() {
        use rand::Rng;
        use rand::SeedableRng;
        let c = TetComplex::structured(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Vec3::new(rng.random(), rng.random(), rng.random());
            let hint = Some(rng.random_range(0..c.n_tets() as TetId));
            let loc = c.locate(&p, hint).unwrap();
            let brute: Vec<TetId> =
                (0..c.n_tets() as TetId).filter(|&t| c.contains(t, &p)).collect();
            match loc {
                Location::Inside(t) => {
                    assert_eq!(Some(t), brute.first().copied(), "lowest containing tet");
                }
                Location::Outside => assert!(brute.is_empty()),
            }
        }
    }

    #[test]
    fn hull_of_lattice_is_box_surface() {
        let c = TetComplex::structured(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 2);
        // Each cube face on the boundary contributes 2 triangles; 6 box sides
        // x 4 cube faces x 2 = 48.
        assert_eq!(c.hull_faces().len(), 48);
        let mask = c.hull_vertex_mask();
        let interior = mask.iter().filter(|m| !**m).count();
        assert_eq!(interior, 1, "a 2x2x2 lattice has exactly one interior vertex");
    }
}
