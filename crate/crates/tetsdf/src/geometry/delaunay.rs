//! Incremental Delaunay tetrahedralization (Bowyer-Watson).
//!
//! The builder works on a *closed* complex: every hull facet carries a ghost
//! tetrahedron whose fourth vertex is the symbolic point at infinity, so all
//! faces have exactly two incident cells and insertion outside the current
//! hull needs no special casing.  A point conflicts with a finite cell when
//! it lies strictly inside its circumsphere, and with a ghost cell when it
//! lies strictly beyond its hull facet (or on the facet plane, strictly
//! inside the facet's circumcircle).  The conflict region is carved out and
//! re-joined to the new vertex.
//!
//! Predicate ties are never resolved: a cavity whose boundary would create a
//! degenerate cell, or a point that conflicts with nothing, aborts the
//! attempt, and the point is retried with a deterministic jitter bounded by
//! the vertex merge tolerance.  This trades exactness on adversarially
//! degenerate inputs (exact lattices, cospherical shells) for simplicity,
//! and is validated by the structural and empty-circumsphere checks in the
//! test suite.

use super::predicates::{insphere, orient3d, orient3d_raw, FILTER_EPS};
use super::{mix, GeometryError, TetComplex, Tetrahedron, VertexId, FACES, HULL, MERGE_TOLERANCE};
use crate::Vec3;
use std::collections::{HashMap, HashSet};

/// Symbolic vertex at infinity; ghosts always store it in slot 3.
const INF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct CoreTet {
    v: [u32; 4],
    nbr: [u32; 4],
}

impl CoreTet {
    fn is_ghost(&self) -> bool {
        self.v[3] == INF
    }

    fn slot_of_nbr(&self, t: u32) -> usize {
        (0..4).find(|&i| self.nbr[i] == t).expect("adjacency must be symmetric")
    }
}

enum Attempt {
    Done(u32),
    Duplicate,
    /// Tie or inconsistent cavity; caller may retry with a jittered point.
    Degenerate,
}

struct Core {
    pts: Vec<Vec3>,
    tets: Vec<CoreTet>,
    alive: Vec<bool>,
    free: Vec<u32>,
    n_alive: usize,
    /// Finite alive tet used as the walk start.
    hint: u32,
}

impl Core {
    fn point(&self, v: u32) -> Vec3 {
        self.pts[v as usize]
    }

    /// Start a triangulation from the first four affinely independent
    /// points of `pts`; returns the indices consumed.
    fn bootstrap(pts: Vec<Vec3>) -> Result<(Core, [usize; 4]), GeometryError> {
        let n = pts.len();
        let i0 = 0usize;
        let i1 = (1..n)
            .find(|&j| (pts[j] - pts[i0]).norm() > MERGE_TOLERANCE)
            .ok_or_else(|| GeometryError::DegenerateInput("all points coincident".into()))?;
        let i2 = (i1 + 1..n)
            .find(|&j| {
                let u = pts[i1] - pts[i0];
                let w = pts[j] - pts[i0];
                u.cross(&w).norm() > FILTER_EPS.sqrt() * u.norm() * w.norm()
            })
            .ok_or_else(|| GeometryError::DegenerateInput("all points collinear".into()))?;
        let i3 = (i2 + 1..n)
            .find(|&j| orient3d(&pts[i0], &pts[i1], &pts[i2], &pts[j]) != 0.0)
            .ok_or_else(|| GeometryError::DegenerateInput("all points coplanar".into()))?;

        let mut v = [i0 as u32, i1 as u32, i2 as u32, i3 as u32];
        if orient3d(&pts[i0], &pts[i1], &pts[i2], &pts[i3]) < 0.0 {
            v.swap(2, 3);
        }
        let mut core = Core {
            pts,
            tets: vec![CoreTet { v, nbr: [0; 4] }],
            alive: vec![true],
            free: Vec::new(),
            n_alive: 1,
            hint: 0,
        };
        // One ghost per facet of the first tet, then stitch ghost-ghost
        // adjacency around its edges.
        for i in 0..4 {
            let facet = FACES[i].map(|k| v[k]);
            let g = core.alloc(CoreTet { v: [facet[0], facet[1], facet[2], INF], nbr: [0; 4] });
            core.tets[g as usize].nbr[3] = 0;
            core.tets[0].nbr[i] = g;
        }
        core.stitch_ghost_edges((1..5).collect());
        Ok((core, [i0, i1, i2, i3]))
    }

    /// Connect ghost tets among `ghosts` pairwise across their shared hull
    /// edges (slots 0..3 of a ghost are its edge-adjacent ghosts).
    fn stitch_ghost_edges(&mut self, ghosts: Vec<u32>) {
        let mut edge_map: HashMap<(u32, u32), (u32, usize)> = HashMap::new();
        for g in ghosts {
            let t = self.tets[g as usize];
            for s in 0..3 {
                let mut e = [t.v[(s + 1) % 3], t.v[(s + 2) % 3]];
                e.sort_unstable();
                match edge_map.remove(&(e[0], e[1])) {
                    Some((h, hs)) => {
                        self.tets[g as usize].nbr[s] = h;
                        self.tets[h as usize].nbr[hs] = g;
                    }
                    None => {
                        edge_map.insert((e[0], e[1]), (g, s));
                    }
                }
            }
        }
        assert!(edge_map.is_empty(), "hull must be edge-closed");
    }

    fn alloc(&mut self, t: CoreTet) -> u32 {
        self.n_alive += 1;
        match self.free.pop() {
            Some(id) => {
                self.tets[id as usize] = t;
                self.alive[id as usize] = true;
                id
            }
            None => {
                self.tets.push(t);
                self.alive.push(true);
                (self.tets.len() - 1) as u32
            }
        }
    }

    fn release(&mut self, id: u32) {
        self.alive[id as usize] = false;
        self.free.push(id);
        self.n_alive -= 1;
    }

    /// Rebuild a closed core from a public complex by attaching ghosts to
    /// every hull facet.
    fn from_complex(c: &TetComplex) -> Core {
        let mut core = Core {
            pts: c.vertices.clone(),
            tets: c
                .tets
                .iter()
                .map(|t| CoreTet { v: t.v, nbr: t.nbr })
                .collect(),
            alive: vec![true; c.tets.len()],
            free: Vec::new(),
            n_alive: c.tets.len(),
            hint: 0,
        };
        let mut ghosts = Vec::new();
        for (t, i) in c.hull_faces() {
            let facet = c.face_vertices(t, i);
            let g = core.alloc(CoreTet {
                v: [facet[0], facet[1], facet[2], INF],
                nbr: [0; 4],
            });
            core.tets[g as usize].nbr[3] = t;
            core.tets[t as usize].nbr[i] = g;
            ghosts.push(g);
        }
        core.stitch_ghost_edges(ghosts);
        core
    }

    /// Strip ghosts and compact into a public complex.
    fn to_complex(&self, generation: u64) -> TetComplex {
        let mut map = vec![HULL; self.tets.len()];
        let mut next = 0u32;
        for (i, t) in self.tets.iter().enumerate() {
            if self.alive[i] && !t.is_ghost() {
                map[i] = next;
                next += 1;
            }
        }
        let mut tets = Vec::with_capacity(next as usize);
        for (i, t) in self.tets.iter().enumerate() {
            if !self.alive[i] || t.is_ghost() {
                continue;
            }
            let nbr = t.nbr.map(|n| map[n as usize]); // ghosts map to HULL
            tets.push(Tetrahedron { v: t.v, nbr });
        }
        TetComplex { vertices: self.pts.clone(), tets, generation }
    }

    /// Walk toward `p` through finite cells; returns the containing finite
    /// cell, or the ghost through whose facet the walk left the hull.
    fn walk(&self, p: &Vec3) -> Result<u32, GeometryError> {
        let mut cur = self.hint;
        let budget = 4 * self.n_alive + 64;
        for step in 0..budget {
            let tet = &self.tets[cur as usize];
            if tet.is_ghost() {
                return Ok(cur);
            }
            let pts = tet.v.map(|v| self.point(v));
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
            match worst {
                None => return Ok(cur),
                Some((i, _)) => {
                    let exit = if step > self.n_alive && n_neg > 1 {
                        // Deterministic pseudo-random descent to break
                        // potential cycles on thin cells.
                        let mut pick = (mix(cur as u64 ^ ((step as u64) << 32)) as usize) % n_neg;
                        (0..4)
                            .find(|&j| {
                                if negatives[j] {
                                    if pick == 0 {
                                        return true;
                                    }
                                    pick -= 1;
                                }
                                false
                            })
                            .unwrap()
                    } else {
                        i
                    };
                    cur = self.tets[cur as usize].nbr[exit];
                }
            }
        }
        Err(GeometryError::WalkCycle)
    }

    fn conflicts(&self, t: u32, p: &Vec3) -> bool {
        let tet = &self.tets[t as usize];
        if tet.is_ghost() {
            let a = self.point(tet.v[0]);
            let b = self.point(tet.v[1]);
            let c = self.point(tet.v[2]);
            // Facet normals point inward; negative means strictly outside.
            let o = orient3d(&a, &b, &c, p);
            if o != 0.0 {
                return o < 0.0;
            }
            in_circumcircle_strict(&a, &b, &c, p)
        } else {
            let [a, b, c, d] = tet.v.map(|v| self.point(v));
            insphere(&a, &b, &c, &d, p) > 0.0
        }
    }

    /// One transactional insertion attempt: locate, grow the conflict
    /// cavity, validate it completely, then commit.  `reuse_id` pins the
    /// vertex id (used when `pts` is pre-populated).
    fn attempt(&mut self, p: Vec3, reuse_id: Option<u32>) -> Result<Attempt, GeometryError> {
        let start = self.walk(&p)?;

        // Find a conflict seed near the walk's end point.
        let mut seed = None;
        let mut ring = vec![start];
        let mut seen: HashSet<u32> = ring.iter().copied().collect();
        'search: while let Some(t) = ring.pop() {
            if self.conflicts(t, &p) {
                seed = Some(t);
                break 'search;
            }
            if seen.len() < 64 {
                for n in self.tets[t as usize].nbr {
                    if seen.insert(n) {
                        ring.push(n);
                    }
                }
            }
        }
        let Some(seed) = seed else {
            return Ok(Attempt::Degenerate); // nothing conflicts: predicate tie
        };

        // Grow the connected conflict region.
        let mut cavity = vec![seed];
        let mut in_cavity: HashSet<u32> = cavity.iter().copied().collect();
        let mut stack = vec![seed];
        while let Some(t) = stack.pop() {
            for n in self.tets[t as usize].nbr {
                if !in_cavity.contains(&n) && self.conflicts(n, &p) {
                    in_cavity.insert(n);
                    cavity.push(n);
                    stack.push(n);
                }
            }
        }

        // Duplicate rejection: any existing vertex of the cavity within the
        // merge tolerance claims the point.
        for &t in &cavity {
            for v in self.tets[t as usize].v {
                if v != INF && (self.point(v) - p).norm() <= MERGE_TOLERANCE {
                    return Ok(Attempt::Duplicate);
                }
            }
        }

        // Collect and validate the cavity boundary.
        struct BFace {
            verts: [u32; 3], // finite faces; ghost-edge faces store INF in slot 2
            outside: u32,
            outside_slot: usize,
        }
        let mut bfaces = Vec::new();
        for &t in &cavity {
            let tet = self.tets[t as usize];
            for i in 0..4 {
                let n = tet.nbr[i];
                if in_cavity.contains(&n) {
                    continue;
                }
                let mut verts = FACES[i].map(|k| tet.v[k]);
                if verts.contains(&INF) {
                    // Normalize: the two finite edge vertices first.
                    while verts[2] != INF {
                        verts.rotate_left(1);
                    }
                    let (a, b) = (self.point(verts[0]), self.point(verts[1]));
                    let e = b - a;
                    let w = p - a;
                    if e.cross(&w).norm() <= FILTER_EPS.sqrt() * e.norm() * w.norm() {
                        return Ok(Attempt::Degenerate); // collinear hull edge
                    }
                } else {
                    let [a, b, c] =
                        [self.point(verts[0]), self.point(verts[1]), self.point(verts[2])];
                    let o = orient3d(&a, &b, &c, &p);
                    if o == 0.0 {
                        return Ok(Attempt::Degenerate); // flat new cell
                    }
                    if o < 0.0 {
                        verts.swap(0, 1);
                    }
                }
                bfaces.push(BFace { verts, outside: n, outside_slot: self.tets[n as usize].slot_of_nbr(t) });
            }
        }

        // The boundary must be a closed 2-manifold: every edge (vertex pair,
        // possibly including INF) is shared by exactly two boundary faces.
        let mut edge_count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &bfaces {
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                let key = (f.verts[i].min(f.verts[j]), f.verts[i].max(f.verts[j]));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        if edge_count.values().any(|&c| c != 2) {
            return Ok(Attempt::Degenerate);
        }

        // ---- Commit ----
        let pid = match reuse_id {
            Some(id) => {
                self.pts[id as usize] = p;
                id
            }
            None => {
                self.pts.push(p);
                (self.pts.len() - 1) as u32
            }
        };
        for &t in &cavity {
            self.release(t);
        }
        let mut new_ids = Vec::with_capacity(bfaces.len());
        for f in &bfaces {
            let (v, boundary_slot) = if f.verts[2] == INF {
                ([f.verts[0], f.verts[1], pid, INF], 2usize)
            } else {
                ([f.verts[0], f.verts[1], f.verts[2], pid], 3usize)
            };
            let id = self.alloc(CoreTet { v, nbr: [HULL; 4] });
            self.tets[id as usize].nbr[boundary_slot] = f.outside;
            self.tets[f.outside as usize].nbr[f.outside_slot] = id;
            new_ids.push(id);
        }
        // Link faces interior to the fan (each contains `pid`; keyed by the
        // remaining vertex pair).
        let mut half: HashMap<(u32, u32), (u32, usize)> = HashMap::new();
        for &id in &new_ids {
            let tet = self.tets[id as usize];
            for s in 0..4 {
                if tet.nbr[s] != HULL {
                    continue; // boundary slot, already linked
                }
                let face: Vec<u32> = (0..4).filter(|&k| k != s).map(|k| tet.v[k]).collect();
                let others: Vec<u32> = face.iter().copied().filter(|&v| v != pid).collect();
                debug_assert_eq!(others.len(), 2);
                let key = (others[0].min(others[1]), others[0].max(others[1]));
                match half.remove(&key) {
                    Some((h, hs)) => {
                        self.tets[id as usize].nbr[s] = h;
                        self.tets[h as usize].nbr[hs] = id;
                    }
                    None => {
                        half.insert(key, (id, s));
                    }
                }
            }
        }
        debug_assert!(half.is_empty(), "fan faces must pair up");

        // Restore the facet-points-inward convention for new ghosts, using
        // the finite cell across the facet as the interior witness.
        let mut finite_hint = None;
        for &id in &new_ids {
            let tet = self.tets[id as usize];
            if !tet.is_ghost() {
                finite_hint = Some(id);
                continue;
            }
            let partner = tet.nbr[3];
            let pt = self.tets[partner as usize];
            let apex = pt
                .v
                .iter()
                .copied()
                .find(|v| !tet.v.contains(v))
                .expect("facet partner shares exactly three vertices");
            let [a, b, c] = [self.point(tet.v[0]), self.point(tet.v[1]), self.point(tet.v[2])];
            if orient3d_raw(&a, &b, &c, &self.point(apex)) < 0.0 {
                self.tets[id as usize].v.swap(0, 1);
                self.tets[id as usize].nbr.swap(0, 1);
            }
        }
        self.hint = finite_hint.expect("every insertion creates a finite cell");
        Ok(Attempt::Done(pid))
    }

    /// Insert with up to three deterministic jitter retries on predicate
    /// ties.  The jitter stays within the merge tolerance, so a retried
    /// vertex is still "the same point" under the dedup rule.
    fn insert(&mut self, p: Vec3, reuse_id: Option<u32>) -> Result<Attempt, GeometryError> {
        let seed = reuse_id.unwrap_or(self.pts.len() as u32) as u64;
        for retry in 0..4u64 {
            let q = if retry == 0 {
                p
            } else {
                let h = mix(seed.wrapping_mul(4).wrapping_add(retry));
                let u = Vec3::new(
                    (h & 0xffff) as f64 / 32768.0 - 1.0,
                    ((h >> 16) & 0xffff) as f64 / 32768.0 - 1.0,
                    ((h >> 32) & 0xffff) as f64 / 32768.0 - 1.0,
                );
                p + u.normalize() * (0.25 * MERGE_TOLERANCE * retry as f64)
            };
            match self.attempt(q, reuse_id)? {
                Attempt::Degenerate => continue,
                done => return Ok(done),
            }
        }
        Ok(Attempt::Degenerate)
    }
}

/// Strictly inside the circumcircle of coplanar triangle `(a, b, c)`?
/// Conservative: degenerate triangles and ties answer `false`.
fn in_circumcircle_strict(a: &Vec3, b: &Vec3, c: &Vec3, p: &Vec3) -> bool {
    let u = b - a;
    let w = c - a;
    let n = u.cross(&w);
    let n2 = n.norm_squared();
    if n2 <= (FILTER_EPS * u.norm() * w.norm()).powi(2) {
        return false;
    }
    let alpha = w.norm_squared() * (u.norm_squared() - u.dot(&w)) / (2.0 * n2);
    let beta = u.norm_squared() * (w.norm_squared() - u.dot(&w)) / (2.0 * n2);
    let center = a + alpha * u + beta * w;
    let r2 = (a - center).norm_squared();
    (p - center).norm_squared() < r2 * (1.0 - FILTER_EPS)
}

/// Delaunay tetrahedralization of `points`; vertex ids equal input indices.
///
/// Fails with [`GeometryError::DegenerateInput`] when the input has fewer
/// than four points, is entirely coplanar, or contains duplicates within the
/// merge tolerance.
pub fn delaunay_tetrahedralize(points: &[Vec3]) -> Result<TetComplex, GeometryError> {
    if points.len() < 4 {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    let (mut core, used) = Core::bootstrap(points.to_vec())?;
    for j in 0..points.len() {
        if used.contains(&j) {
            continue;
        }
        match core.insert(points[j], Some(j as u32))? {
            Attempt::Done(_) => {}
            Attempt::Duplicate => {
                return Err(GeometryError::DegenerateInput(format!(
                    "point {j} duplicates an earlier vertex"
                )))
            }
            Attempt::Degenerate => {
                return Err(GeometryError::DegenerateInput(format!(
                    "point {j} could not be inserted (degenerate configuration)"
                )))
            }
        }
    }
    Ok(core.to_complex(0))
}

/// Result of [`TetComplex::insert_vertices`].
#[derive(Debug)]
pub struct InsertReport {
    pub complex: TetComplex,
    /// `(input index, assigned vertex id)` for every inserted point; ids of
    /// pre-existing vertices are unchanged.
    pub accepted: Vec<(usize, VertexId)>,
    /// Input indices rejected as duplicates (or unresolvable ties).
    pub rejected: Vec<usize>,
}

/// Result of [`TetComplex::remove_vertices`].
#[derive(Debug)]
pub struct RemoveReport {
    pub complex: TetComplex,
    /// Old vertex id -> new vertex id (`None` for removed vertices).
    pub old_to_new: Vec<Option<VertexId>>,
}

impl TetComplex {
    /// Insert `points` (in order) into the triangulation, returning the
    /// updated complex.  Existing vertex ids are stable; new vertices append.
    /// Points duplicating an existing vertex within [`MERGE_TOLERANCE`] are
    /// rejected.  The generation advances only if something was inserted.
    pub fn insert_vertices(&self, points: &[Vec3]) -> Result<InsertReport, GeometryError> {
        if points.is_empty() {
            return Ok(InsertReport { complex: self.clone(), accepted: vec![], rejected: vec![] });
        }
        let mut core = Core::from_complex(self);
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for (i, &p) in points.iter().enumerate() {
            match core.insert(p, None)? {
                Attempt::Done(id) => accepted.push((i, id)),
                Attempt::Duplicate | Attempt::Degenerate => rejected.push(i),
            }
        }
        let generation = if accepted.is_empty() { self.generation } else { self.generation + 1 };
        Ok(InsertReport { complex: core.to_complex(generation), accepted, rejected })
    }

    /// Remove interior vertices (no id may lie on the convex hull) and
    /// re-triangulate.  Surviving vertices keep their relative order.
    pub fn remove_vertices(&self, ids: &[VertexId]) -> Result<RemoveReport, GeometryError> {
        let mut sorted: Vec<VertexId> = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() {
            return Ok(RemoveReport {
                complex: self.clone(),
                old_to_new: (0..self.vertices.len() as u32).map(Some).collect(),
            });
        }
        if let Some(&bad) = sorted.iter().find(|&&v| v as usize >= self.vertices.len()) {
            return Err(GeometryError::InvalidId(bad));
        }
        let hull = self.hull_vertex_mask();
        if let Some(&v) = sorted.iter().find(|&&v| hull[v as usize]) {
            return Err(GeometryError::HullVertexRemoval(v));
        }
        let drop: HashSet<VertexId> = sorted.iter().copied().collect();
        let mut survivors = Vec::with_capacity(self.vertices.len() - sorted.len());
        let mut old_to_new = vec![None; self.vertices.len()];
        for (v, &p) in self.vertices.iter().enumerate() {
            if !drop.contains(&(v as VertexId)) {
                old_to_new[v] = Some(survivors.len() as VertexId);
                survivors.push(p);
            }
        }
        let mut complex = delaunay_tetrahedralize(&survivors)?;
        complex.generation = self.generation + 1;
        Ok(RemoveReport { complex, old_to_new })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TetId;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn cube_corners() -> Vec<Vec3> {
        let mut v = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    v.push(Vec3::new(x, y, z));
                }
            }
        }
        v
    }

    /// Volume of the convex hull, independently of the tetrahedra: divergence
    /// theorem over the hull faces against an interior reference point.
    fn hull_volume(c: &TetComplex) -> f64 {
        let reference = c.centroid(0);
        c.hull_faces()
            .iter()
            .map(|&(t, i)| {
                let [a, b, f] = c.face_vertices(t, i).map(|v| c.vertices[v as usize]);
                orient3d_raw(&a, &b, &f, &reference) / 6.0
            })
            .sum()
    }

    fn assert_well_formed(c: &TetComplex) {
        c.validate().expect("structurally valid");
        let tet_total: f64 = (0..c.n_tets()).map(|t| c.volume(t as TetId)).sum();
        let hull_total = hull_volume(c);
        assert!(
            (tet_total - hull_total).abs() < 1e-9 * hull_total.max(1.0),
            "tetrahedra must tile the hull: {tet_total} vs {hull_total}"
        );
    }

    #[test]
    fn builds_random_clouds_delaunay() {
        for (seed, n) in [(1u64, 20usize), (2, 60), (3, 120)] {
            let pts = random_cloud(seed, n);
            let c = delaunay_tetrahedralize(&pts).expect("build succeeds");
            assert_eq!(c.n_vertices(), n);
            assert_eq!(c.vertices, pts, "vertex order equals input order");
            assert_well_formed(&c);
            c.validate_delaunay(1e-9).expect("empty circumspheres");
        }
    }

    #[test]
    fn builds_cube_with_interior_points() {
        let mut pts = cube_corners();
        pts.extend(random_cloud(11, 40).iter().map(|p| p * 0.9));
        let c = delaunay_tetrahedralize(&pts).expect("build succeeds");
        assert_well_formed(&c);
        c.validate_delaunay(1e-9).expect("Delaunay");
        let total: f64 = (0..c.n_tets()).map(|t| c.volume(t as TetId)).sum();
        assert!((total - 8.0).abs() < 1e-9, "hull is the full cube, volume {total}");
        // Only the 8 corners are hull vertices.
        let hull = c.hull_vertex_mask();
        assert_eq!(hull.iter().filter(|h| **h).count(), 8);
    }

    #[test]
    fn exact_lattice_survives_degeneracy_handling() {
        // A perfectly regular lattice is maximally cospherical/cocircular;
        // the jitter fallback must still produce a valid complex.
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    pts.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let c = delaunay_tetrahedralize(&pts).expect("lattice builds");
        assert_well_formed(&c);
        let total: f64 = (0..c.n_tets()).map(|t| c.volume(t as TetId)).sum();
        assert!((total - 27.0).abs() < 1e-6, "lattice hull volume {total}");
        c.validate_delaunay(1e-6).expect("Delaunay within jitter tolerance");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(matches!(
            delaunay_tetrahedralize(&[Vec3::zeros(); 3]),
            Err(GeometryError::DegenerateInput(_))
        ));
        let coplanar: Vec<Vec3> =
            (0..10).map(|i| Vec3::new(i as f64, (i * i % 7) as f64, 0.0)).collect();
        assert!(matches!(
            delaunay_tetrahedralize(&coplanar),
            Err(GeometryError::DegenerateInput(_))
        ));
        let mut dup = cube_corners();
        dup.push(Vec3::new(1.0, 1.0, 1.0) + Vec3::new(1e-10, 0.0, 0.0));
        assert!(matches!(
            delaunay_tetrahedralize(&dup),
            Err(GeometryError::DegenerateInput(_))
        ));
    }

    #[test]
    fn insert_interior_keeps_hull_and_appends_ids() {
        let mut pts = cube_corners();
        pts.extend(random_cloud(5, 10).iter().map(|p| p * 0.8));
        let c = delaunay_tetrahedralize(&pts).unwrap();
        let extra = [Vec3::new(0.123, -0.317, 0.208), Vec3::new(-0.4, 0.4, -0.1)];
        let rep = c.insert_vertices(&extra).unwrap();
        assert_eq!(rep.accepted, vec![(0, 18), (1, 19)]);
        assert!(rep.rejected.is_empty());
        assert_eq!(rep.complex.generation, c.generation + 1);
        assert_eq!(rep.complex.vertices[..18], c.vertices[..]);
        assert_well_formed(&rep.complex);
        rep.complex.validate_delaunay(1e-9).unwrap();
        assert_eq!(
            rep.complex.hull_vertex_mask().iter().filter(|h| **h).count(),
            8,
            "interior insertion must not change the hull"
        );
    }

    #[test]
    fn insert_outside_hull_extends_it() {
        let c = delaunay_tetrahedralize(&cube_corners()).unwrap();
        let rep = c.insert_vertices(&[Vec3::new(0.0, 0.0, 3.0)]).unwrap();
        assert_eq!(rep.accepted.len(), 1);
        assert_well_formed(&rep.complex);
        rep.complex.validate_delaunay(1e-9).unwrap();
        let hull = rep.complex.hull_vertex_mask();
        assert!(hull[8], "the far point becomes a hull vertex");
        assert!(hull_volume(&rep.complex) > 8.0 + 1.0, "hull volume grew");
    }

    #[test]
    fn insert_duplicates_rejected_complex_unchanged() {
        let mut pts = cube_corners();
        pts.push(Vec3::new(0.2, 0.1, -0.3));
        let c = delaunay_tetrahedralize(&pts).unwrap();
        let rep = c
            .insert_vertices(&[Vec3::new(0.2, 0.1, -0.3), Vec3::new(1.0, 1.0, 1.0)])
            .unwrap();
        assert!(rep.accepted.is_empty());
        assert_eq!(rep.rejected, vec![0, 1]);
        assert_eq!(rep.complex.generation, c.generation, "no-op keeps the generation");
        assert_eq!(rep.complex.vertices, c.vertices);
        assert_eq!(rep.complex.tets.len(), c.tets.len());
    }

    #[test]
    fn insert_empty_list_is_identity() {
        let c = delaunay_tetrahedralize(&cube_corners()).unwrap();
        let rep = c.insert_vertices(&[]).unwrap();
        assert_eq!(rep.complex.generation, c.generation);
        assert_eq!(rep.complex.tets.len(), c.tets.len());
    }

    #[test]
    fn remove_interior_vertices_and_rebuild() {
        let mut pts = cube_corners();
        pts.extend(random_cloud(9, 30).iter().map(|p| p * 0.85));
        let c = delaunay_tetrahedralize(&pts).unwrap();
        let rep = c.remove_vertices(&[10, 20, 15]).unwrap();
        assert_eq!(rep.complex.n_vertices(), c.n_vertices() - 3);
        assert_eq!(rep.complex.generation, c.generation + 1);
        assert_well_formed(&rep.complex);
        rep.complex.validate_delaunay(1e-9).unwrap();
        // Mapping: dropped ids map to None, survivors keep order.
        assert!(rep.old_to_new[10].is_none());
        assert_eq!(rep.old_to_new[9], Some(9));
        assert_eq!(rep.old_to_new[11], Some(10));
        for (old, new) in rep.old_to_new.iter().enumerate() {
            if let Some(n) = new {
                assert_eq!(rep.complex.vertices[*n as usize], c.vertices[old]);
            }
        }
    }

    #[test]
    fn remove_hull_vertex_is_an_error() {
        let mut pts = cube_corners();
        pts.push(Vec3::new(0.0, 0.0, 0.0));
        let c = delaunay_tetrahedralize(&pts).unwrap();
        assert!(matches!(
            c.remove_vertices(&[2]),
            Err(GeometryError::HullVertexRemoval(2))
        ));
        // Interior vertex 8 is fine.
        assert!(c.remove_vertices(&[8]).is_err() == false);
    }

    #[test]
    fn incremental_matches_batch_build() {
        // Inserting in two rounds yields the same Delaunay complex (same
        // empty-circumsphere property; tet count may differ only on ties).
        let mut pts = cube_corners();
        pts.extend(random_cloud(21, 25).iter().map(|p| p * 0.9));
        let batch = delaunay_tetrahedralize(&pts).unwrap();
        let first = delaunay_tetrahedralize(&pts[..20]).unwrap();
        let rep = first.insert_vertices(&pts[20..]).unwrap();
        assert_eq!(rep.accepted.len(), 13);
        assert_well_formed(&rep.complex);
        rep.complex.validate_delaunay(1e-9).unwrap();
        assert_eq!(rep.complex.n_vertices(), batch.n_vertices());
        assert_eq!(rep.complex.n_tets(), batch.n_tets());
    }
}
