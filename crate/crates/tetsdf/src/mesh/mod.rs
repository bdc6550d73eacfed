//! Triangle meshes extracted from the zero set of the piecewise-linear field.
//!
//! Marching tetrahedra places one mesh vertex on every grid edge whose
//! endpoint values straddle zero, at the exact zero of the linear
//! interpolant, and connects them with one or two triangles per straddling
//! cell.  Because cut vertices are deduplicated by grid edge, the result is
//! watertight wherever the zero set is closed.
//!
//! Every extracted vertex keeps its provenance — which grid edge it sits on
//! and the field values that placed it — which makes the mesh a
//! differentiable function of the field: [`provenance_backward`] pushes
//! adjoints of vertex positions back onto the per-vertex field values.

pub mod io;
pub mod raycast;

use crate::geometry::{TetComplex, VertexId};
use crate::Vec3;
use std::collections::HashMap;

/// Exact zeros are nudged positive so the surface never passes through a
/// grid vertex, where the cut-edge combinatorics would be ambiguous.
const ZERO_SHIFT: f64 = 1e-10;

/// Where an extracted vertex came from: the zero crossing along grid edge
/// `(a, b)`, with the (shift-adjusted) field values that placed it.
#[derive(Debug, Clone, Copy)]
pub struct EdgeCut {
    pub a: VertexId,
    pub b: VertexId,
    pub fa: f64,
    pub fb: f64,
}

/// An indexed triangle mesh.  Triangles wind so their normal points toward
/// positive field values (outward for a signed distance field).
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub positions: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Parallel to `positions` for extracted meshes; empty for loaded ones.
    pub provenance: Vec<EdgeCut>,
}

impl TriMesh {
    /// Unnormalized face normal `(p1 - p0) x (p2 - p0)`.
    pub fn face_normal_raw(&self, tri: usize) -> Vec3 {
        let [i, j, k] = self.triangles[tri];
        let p0 = self.positions[i as usize];
        (self.positions[j as usize] - p0).cross(&(self.positions[k as usize] - p0))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| 0.5 * self.face_normal_raw(t).norm()).sum()
    }
}

fn shifted(values: &[f64], i: VertexId) -> f64 {
    let v = values[i as usize];
    if v == 0.0 {
        ZERO_SHIFT
    } else {
        v
    }
}

struct CutTable<'a> {
    complex: &'a TetComplex,
    values: &'a [f64],
    by_edge: HashMap<(VertexId, VertexId), u32>,
    positions: Vec<Vec3>,
    cuts: Vec<EdgeCut>,
}

impl CutTable<'_> {
    fn vertex(&mut self, a: VertexId, b: VertexId) -> u32 {
        let key = (a.min(b), a.max(b));
        *self.by_edge.entry(key).or_insert_with(|| {
            let (i, j) = key;
            let fa = shifted(self.values, i);
            let fb = shifted(self.values, j);
            let t = fa / (fa - fb);
            let pa = self.complex.vertices[i as usize];
            let pb = self.complex.vertices[j as usize];
            self.positions.push(pa + (pb - pa) * t);
            self.cuts.push(EdgeCut { a: i, b: j, fa, fb });
            (self.positions.len() - 1) as u32
        })
    }
}

/// Extract the zero set of the per-vertex field `values` as a triangle mesh.
///
/// Deterministic: cells are visited in index order and cut vertices are
/// numbered in first-encounter order.
pub fn marching_tets(complex: &TetComplex, values: &[f64]) -> TriMesh {
    assert_eq!(values.len(), complex.n_vertices(), "one field value per grid vertex");
    let mut table = CutTable {
        complex,
        values,
        by_edge: HashMap::new(),
        positions: Vec::new(),
        cuts: Vec::new(),
    };
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for (ti, tet) in complex.tets.iter().enumerate() {
        let f: [f64; 4] = std::array::from_fn(|k| shifted(values, tet.v[k]));
        let neg: Vec<usize> = (0..4).filter(|&k| f[k] < 0.0).collect();
        let mut emit = |tri: [u32; 3], table: &CutTable| {
            // Wind so the triangle normal points along the field gradient.
            let p0 = table.positions[tri[0] as usize];
            let p1 = table.positions[tri[1] as usize];
            let p2 = table.positions[tri[2] as usize];
            let n = (p1 - p0).cross(&(p2 - p0));
            let g = complex
                .lambda_gradients(ti as u32)
                .map(|gl| (0..4).map(|k| gl[k] * f[k]).sum::<Vec3>())
                .unwrap_or_else(Vec3::zeros);
            if n.dot(&g) < 0.0 {
                triangles.push([tri[0], tri[2], tri[1]]);
            } else {
                triangles.push(tri);
            }
        };
        match neg.len() {
            0 | 4 => {}
            1 | 3 => {
                // One vertex is separated from the other three: a triangle on
                // the three edges incident to it.
                let apex = if neg.len() == 1 {
                    neg[0]
                } else {
                    (0..4).find(|k| !neg.contains(k)).unwrap()
                };
                let others: Vec<usize> = (0..4).filter(|&k| k != apex).collect();
                let tri = [
                    table.vertex(tet.v[apex], tet.v[others[0]]),
                    table.vertex(tet.v[apex], tet.v[others[1]]),
                    table.vertex(tet.v[apex], tet.v[others[2]]),
                ];
                emit(tri, &table);
            }
            2 => {
                // Two against two: a quad on the four crossing edges, split
                // along the diagonal anchored at the corner whose grid edge
                // has the smallest (sorted) vertex-id key, so the choice does
                // not depend on local vertex order within the cell.
                let (k, l) = (neg[0], neg[1]);
                let pos: Vec<usize> = (0..4).filter(|c| !neg.contains(c)).collect();
                let (m, n) = (pos[0], pos[1]);
                let corners = [(k, m), (k, n), (l, n), (l, m)];
                let key = |(a, b): (usize, usize)| {
                    let (x, y) = (tet.v[a], tet.v[b]);
                    (x.min(y), x.max(y))
                };
                let anchor = (0..4).min_by_key(|&c| key(corners[c])).unwrap();
                let q: [u32; 4] = std::array::from_fn(|c| {
                    let (a, b) = corners[(anchor + c) % 4];
                    table.vertex(tet.v[a], tet.v[b])
                });
                emit([q[0], q[1], q[2]], &table);
                emit([q[0], q[2], q[3]], &table);
            }
            _ => unreachable!(),
        }
    }

    TriMesh { positions: table.positions, triangles, provenance: table.cuts }
}

/// Push adjoints of mesh vertex positions back to the field values that
/// placed them.  `d_values` accumulates (callers zero it).
pub fn provenance_backward(
    complex: &TetComplex,
    mesh: &TriMesh,
    d_positions: &[Vec3],
    d_values: &mut [f64],
) {
    assert_eq!(mesh.provenance.len(), mesh.positions.len(), "mesh has no provenance");
    assert_eq!(d_positions.len(), mesh.positions.len());
    assert_eq!(d_values.len(), complex.n_vertices());
    for (v, cut) in mesh.provenance.iter().enumerate() {
        let d = d_positions[v];
        if d == Vec3::zeros() {
            continue;
        }
        let delta = cut.fa - cut.fb;
        let pa = complex.vertices[cut.a as usize];
        let pb = complex.vertices[cut.b as usize];
        let m = mesh.positions[v];
        // m = pa + (fa / (fa - fb)) (pb - pa):
        //   dm/dfa = (pb - m) / (fa - fb),  dm/dfb = (m - pa) / (fa - fb).
        d_values[cut.a as usize] += d.dot(&((pb - m) / delta));
        d_values[cut.b as usize] += d.dot(&((m - pa) / delta));
    }
}

/// Push adjoints of mesh vertex positions back to the grid vertex positions
/// of the edges that carry them.  A cut vertex is the affine blend
/// `(1 - t) pa + t pb` with `t = fa / (fa - fb)`, so the adjoint splits by the
/// same weights.  `d_grid` accumulates (callers zero it).
pub fn provenance_backward_positions(
    complex: &TetComplex,
    mesh: &TriMesh,
    d_positions: &[Vec3],
    d_grid: &mut [Vec3],
) {
    assert_eq!(mesh.provenance.len(), mesh.positions.len(), "mesh has no provenance");
    assert_eq!(d_positions.len(), mesh.positions.len());
    assert_eq!(d_grid.len(), complex.n_vertices());
    for (v, cut) in mesh.provenance.iter().enumerate() {
        let d = d_positions[v];
        if d == Vec3::zeros() {
            continue;
        }
        let t = cut.fa / (cut.fa - cut.fb);
        d_grid[cut.a as usize] += d * (1.0 - t);
        d_grid[cut.b as usize] += d * t;
    }
}
