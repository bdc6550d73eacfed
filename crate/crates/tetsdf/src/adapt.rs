//! Surface-centric adaptation of the tetrahedral grid: conservative culling
//! of cells that cannot contribute opacity, contribution and image-error
//! statistics gathered during rendering, densification around the zero level
//! set and in poorly-reconstructed regions, and pruning of idle vertices.

use crate::field::{softplus, AppearanceField, SdfField};
use crate::geometry::{GeometryError, Location, TetComplex, TetId, VertexId};
use crate::render::{Camera, SegmentRecord};
use crate::Vec3;

/// Contribution threshold below which a vertex counts as idle.
pub const DEFAULT_TAU_C: f64 = 0.01;
/// Share of the total tet count each densification pass may split.
pub const DENSIFY_FRACTION: f64 = 0.05;
/// Cells whose opacity upper bound stays below this are skippable.
pub const CULL_OPACITY_BOUND: f64 = 0.1;
/// Mean view rays closer than this angle (degrees) to parallel trigger the
/// centroid fallback when intersecting them.
const MIN_RAY_ANGLE_DEG: f64 = 1.0;
/// An error-driven vertex must sit at least this far inside its tet, in
/// barycentric terms, or the centroid is used instead.
const INTERIOR_MARGIN: f64 = 0.02;

/// Width of the field band that can produce visible opacity at sharpness
/// `s`: outside `|f| > band_width(s) / 2` per side, a full crossing yields
/// under 1% opacity.
pub fn band_width(s: f64) -> f64 {
    2.0 * 199.0_f64.ln() / s
}

/// Largest opacity any sub-segment through a cell with vertex values `f` can
/// produce: entering at the highest value and leaving at the lowest.
/// Computed with the same clamped log-CDF expression the compositor uses, so
/// the bound is conservative numerically and not merely analytically.
pub fn opacity_bound(f: &[f64; 4], s: f64) -> f64 {
    let f_min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let f_max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (1.0 - (softplus(-s * f_max) - softplus(-s * f_min)).exp()).max(0.0)
}

/// Per-tet skip flags: a cell is culled when every vertex value is outside
/// the visible band *and* its opacity upper bound is below
/// [`CULL_OPACITY_BOUND`].  Culled cells are skipped by the renderer but stay
/// in the grid.
pub fn cull_flags(complex: &TetComplex, sdf: &SdfField, s: f64) -> Vec<bool> {
    assert_eq!(sdf.values.len(), complex.n_vertices());
    let ell = band_width(s);
    complex
        .tets
        .iter()
        .map(|tet| {
            let f: [f64; 4] = std::array::from_fn(|k| sdf.values[tet.v[k] as usize]);
            let min_abs = f.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            min_abs > ell && opacity_bound(&f, s) < CULL_OPACITY_BOUND
        })
        .collect()
}

/// Peak compositing weight seen per tet since the last reset, across pixels
/// and views.
#[derive(Debug, Clone)]
pub struct ContributionStats {
    c_t: Vec<f64>,
    /// Views folded in since the last reset.
    pub views: u64,
}

impl ContributionStats {
    pub fn new(n_tets: usize) -> ContributionStats {
        ContributionStats { c_t: vec![0.0; n_tets], views: 0 }
    }

    pub fn n_tets(&self) -> usize {
        self.c_t.len()
    }

    /// Fold one rendered view's segment records in.
    pub fn observe(&mut self, records: &[SegmentRecord]) {
        for r in records {
            let slot = &mut self.c_t[r.tet as usize];
            *slot = slot.max(r.weight);
        }
        self.views += 1;
    }

    pub fn tet_contribution(&self, t: TetId) -> f64 {
        self.c_t[t as usize]
    }

    /// Per-vertex aggregate: the maximum over incident tets.
    pub fn vertex_contributions(&self, complex: &TetComplex) -> Vec<f64> {
        assert_eq!(self.c_t.len(), complex.n_tets());
        let mut c_v: Vec<f64> = vec![0.0; complex.n_vertices()];
        for (t, tet) in complex.tets.iter().enumerate() {
            for &v in &tet.v {
                c_v[v as usize] = c_v[v as usize].max(self.c_t[t]);
            }
        }
        c_v
    }

    pub fn reset(&mut self) {
        self.c_t.fill(0.0);
        self.views = 0;
    }
}

/// The mean viewing ray of one view through one tet, with that view's error
/// score for the tet.
#[derive(Debug, Clone, Copy)]
pub struct ViewRay {
    pub score: f64,
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Per-tet image-error accumulation across views: total score plus the two
/// highest-error views' mean rays, which guide where inside the tet a new
/// vertex is placed.
#[derive(Debug, Clone)]
pub struct ErrorStats {
    pub total: Vec<f64>,
    best: Vec<[Option<ViewRay>; 2]>,
}

impl ErrorStats {
    pub fn new(n_tets: usize) -> ErrorStats {
        ErrorStats { total: vec![0.0; n_tets], best: vec![[None, None]; n_tets] }
    }

    pub fn n_tets(&self) -> usize {
        self.total.len()
    }

    /// Fold in one view: `residual` is the per-pixel mean absolute color
    /// error of that view's rendering.  A tet's view score is its
    /// compositing-weighted residual plus the residual variance over its
    /// pixel footprint.
    pub fn observe_view(&mut self, cam: &Camera, records: &[SegmentRecord], residual: &[f64]) {
        assert_eq!(residual.len(), (cam.width * cam.height) as usize);
        #[derive(Clone, Copy, Default)]
        struct Acc {
            weighted: f64,
            dir: Vec3,
            sum_r: f64,
            sum_r2: f64,
            n: u32,
        }
        let mut acc: Vec<Acc> = vec![Acc::default(); self.total.len()];
        let mut touched: Vec<TetId> = Vec::new();
        for rec in records {
            let r = residual[(rec.y * cam.width + rec.x) as usize];
            let a = &mut acc[rec.tet as usize];
            if a.n == 0 {
                touched.push(rec.tet);
            }
            let (_, dir) = cam.ray(rec.x, rec.y);
            a.weighted += rec.weight * r;
            a.dir += dir * rec.weight;
            a.sum_r += r;
            a.sum_r2 += r * r;
            a.n += 1;
        }
        let origin = cam.center();
        for t in touched {
            let a = acc[t as usize];
            let mean = a.sum_r / a.n as f64;
            let var = (a.sum_r2 / a.n as f64 - mean * mean).max(0.0);
            let score = a.weighted + var;
            self.total[t as usize] += score;
            let dir_norm = a.dir.norm();
            if score <= 0.0 || dir_norm == 0.0 {
                continue;
            }
            let ray = ViewRay { score, origin, dir: a.dir / dir_norm };
            let best = &mut self.best[t as usize];
            // Keep the two highest-scoring views, best first.
            if best[0].map_or(true, |b| ray.score > b.score) {
                best[1] = best[0];
                best[0] = Some(ray);
            } else if best[1].map_or(true, |b| ray.score > b.score) {
                best[1] = Some(ray);
            }
        }
    }

    pub fn best_rays(&self, t: TetId) -> &[Option<ViewRay>; 2] {
        &self.best[t as usize]
    }

    pub fn reset(&mut self) {
        self.total.fill(0.0);
        for b in &mut self.best {
            *b = [None, None];
        }
    }
}

/// A grid topology change with all fields carried over.
#[derive(Debug)]
pub struct AdaptedModel {
    pub complex: TetComplex,
    pub sdf: SdfField,
    pub appearance: AppearanceField,
    /// Vertices added (densification) or removed (pruning).
    pub changed: usize,
    /// Old vertex id -> new vertex id; identity-extended for insertions,
    /// `None` for removed vertices.  Lets an optimizer remap per-vertex
    /// state.
    pub old_to_new: Vec<Option<VertexId>>,
}

fn identity_map(n: usize) -> Vec<Option<VertexId>> {
    (0..n as u32).map(Some).collect()
}

/// Rebuild the per-tet appearance for `new` by copying, for each new tet,
/// the parameters of the old tet containing its centroid.  Coefficients,
/// gradient and anchor move together, so the carried color function is
/// exactly the donor tet's.
fn carry_appearance(
    old_complex: &TetComplex,
    old: &AppearanceField,
    new: &TetComplex,
) -> AppearanceField {
    let stride = old.stride();
    let mut data = vec![0.0; stride * new.n_tets()];
    let mut anchors = Vec::with_capacity(new.n_tets());
    let mut hint = None;
    for t in 0..new.n_tets() {
        let c = new.centroid(t as TetId);
        let donor = match old_complex.locate(&c, hint) {
            Ok(Location::Inside(ot)) => ot,
            // The hulls coincide (only interior vertices change), so this is
            // a point-on-hull-face roundoff case: reuse the last donor.
            _ => hint.unwrap_or(0),
        };
        hint = Some(donor);
        data[t * stride..(t + 1) * stride]
            .copy_from_slice(&old.data[donor as usize * stride..(donor as usize + 1) * stride]);
        anchors.push(old.anchors[donor as usize]);
    }
    AppearanceField { sh_degree: old.sh_degree, data, anchors, generation: new.generation }
}

/// Insert `points`, extending the field by evaluation at each new vertex and
/// re-carrying appearance.
fn insert_and_carry(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    points: &[Vec3],
) -> Result<AdaptedModel, GeometryError> {
    if points.is_empty() {
        return Ok(AdaptedModel {
            complex: complex.clone(),
            sdf: sdf.clone(),
            appearance: appearance.clone(),
            changed: 0,
            old_to_new: identity_map(complex.n_vertices()),
        });
    }
    let report = complex.insert_vertices(points)?;
    let mut values = sdf.values.clone();
    for &(idx, vid) in &report.accepted {
        debug_assert_eq!(vid as usize, values.len());
        let (f, _) = sdf
            .eval(complex, &points[idx], None)
            .expect("densification points lie inside the hull");
        values.push(f);
    }
    let appearance = carry_appearance(complex, appearance, &report.complex);
    let old_to_new = identity_map(complex.n_vertices());
    Ok(AdaptedModel {
        sdf: SdfField::new(values, report.complex.generation),
        appearance,
        changed: report.accepted.len(),
        complex: report.complex,
        old_to_new,
    })
}

/// Tets whose vertex values straddle the zero level set (a value of exactly
/// zero counts as positive, matching extraction).
fn crossing_tets(complex: &TetComplex, sdf: &SdfField) -> Vec<TetId> {
    complex
        .tets
        .iter()
        .enumerate()
        .filter(|(_, tet)| {
            let mut neg = false;
            let mut pos = false;
            for &v in &tet.v {
                if sdf.values[v as usize] < 0.0 {
                    neg = true;
                } else {
                    pos = true;
                }
            }
            neg && pos
        })
        .map(|(t, _)| t as TetId)
        .collect()
}

/// Densification budget for one pass.
fn budget(complex: &TetComplex, fraction: f64) -> usize {
    (fraction * complex.n_tets() as f64).ceil() as usize
}

/// The surface-densification candidate list: crossing tets, largest
/// circumradius first, truncated to the budget.
pub fn surface_candidates(complex: &TetComplex, sdf: &SdfField, fraction: f64) -> Vec<TetId> {
    let mut crossing = crossing_tets(complex, sdf);
    crossing.sort_by(|&a, &b| {
        let (ra, rb) = (complex.circumradius(a), complex.circumradius(b));
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    crossing.truncate(budget(complex, fraction));
    crossing
}

/// Split the largest crossing tets by inserting their centroids.
pub fn densify_surface(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    fraction: f64,
) -> Result<AdaptedModel, GeometryError> {
    let points: Vec<Vec3> =
        surface_candidates(complex, sdf, fraction).iter().map(|&t| complex.centroid(t)).collect();
    insert_and_carry(complex, sdf, appearance, &points)
}

/// Closest point between two mean view rays, if they are far enough from
/// parallel.
fn ray_intersection(a: &ViewRay, b: &ViewRay) -> Option<Vec3> {
    let cos_limit = (MIN_RAY_ANGLE_DEG.to_radians()).cos();
    let d = a.dir.dot(&b.dir);
    if d.abs() >= cos_limit {
        return None;
    }
    let w0 = a.origin - b.origin;
    let denom = 1.0 - d * d;
    let s = (d * b.dir.dot(&w0) - a.dir.dot(&w0)) / denom;
    let t = (b.dir.dot(&w0) - d * a.dir.dot(&w0)) / denom;
    let pa = a.origin + a.dir * s;
    let pb = b.origin + b.dir * t;
    Some((pa + pb) * 0.5)
}

/// Error-densification candidates: positive-score tets not in `exclude`,
/// highest total first, truncated to the budget, each with its insertion
/// point (mean-ray intersection when well-conditioned and interior,
/// otherwise the centroid).
pub fn error_candidates(
    complex: &TetComplex,
    stats: &ErrorStats,
    fraction: f64,
    exclude: &[TetId],
) -> Vec<(TetId, Vec3)> {
    assert_eq!(stats.n_tets(), complex.n_tets());
    let excluded: std::collections::HashSet<TetId> = exclude.iter().copied().collect();
    let mut scored: Vec<TetId> = (0..complex.n_tets() as TetId)
        .filter(|t| stats.total[*t as usize] > 0.0 && !excluded.contains(t))
        .collect();
    scored.sort_by(|&a, &b| {
        stats.total[b as usize]
            .partial_cmp(&stats.total[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    scored.truncate(budget(complex, fraction));
    scored
        .into_iter()
        .map(|t| {
            let point = match stats.best_rays(t) {
                [Some(a), Some(b)] => ray_intersection(a, b)
                    .filter(|p| {
                        let lam = complex.barycentric(t, p);
                        lam.iter().all(|&l| l >= INTERIOR_MARGIN)
                    })
                    .unwrap_or_else(|| complex.centroid(t)),
                _ => complex.centroid(t),
            };
            (t, point)
        })
        .collect()
}

/// Split the highest-error tets, placing each new vertex where the two most
/// erroneous views' mean rays (nearly) cross.
pub fn densify_error(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    stats: &ErrorStats,
    fraction: f64,
    exclude: &[TetId],
) -> Result<AdaptedModel, GeometryError> {
    let points: Vec<Vec3> =
        error_candidates(complex, stats, fraction, exclude).iter().map(|&(_, p)| p).collect();
    insert_and_carry(complex, sdf, appearance, &points)
}

/// One densification event: the surface pass picks its tets first, the error
/// pass draws an equal, disjoint budget, and all points are inserted
/// together (both selections are made against the same grid).
pub fn densify(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    stats: Option<&ErrorStats>,
    fraction: f64,
) -> Result<AdaptedModel, GeometryError> {
    let surface = surface_candidates(complex, sdf, fraction);
    let mut points: Vec<Vec3> = surface.iter().map(|&t| complex.centroid(t)).collect();
    if let Some(stats) = stats {
        points.extend(error_candidates(complex, stats, fraction, &surface).iter().map(|&(_, p)| p));
    }
    insert_and_carry(complex, sdf, appearance, &points)
}

/// Per-vertex idleness: `true` where the best compositing weight over all
/// incident tets stays below `tau_c`.  Computed against the grid the stats
/// were recorded on; vertex ids survive later insertions, so the mask can
/// outlive a densification (new vertices are simply absent and count as
/// busy).
pub fn idle_vertices(
    complex: &TetComplex,
    stats: &ContributionStats,
    tau_c: f64,
) -> Vec<bool> {
    stats.vertex_contributions(complex).iter().map(|&c| c < tau_c).collect()
}

/// Remove interior vertices that are both idle (contribution below `tau_c`)
/// and outside the visible band.  The caller must reset its statistics
/// afterwards: tet ids do not survive re-tetrahedralization.
pub fn prune(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    stats: &ContributionStats,
    tau_c: f64,
    s: f64,
) -> Result<AdaptedModel, GeometryError> {
    prune_idle(complex, sdf, appearance, &idle_vertices(complex, stats, tau_c), s)
}

/// [`prune`] with the idleness decision already made.  `idle` may be shorter
/// than the vertex count (vertices past its end are kept), which lets a mask
/// computed before a densification apply to the grown grid.
pub fn prune_idle(
    complex: &TetComplex,
    sdf: &SdfField,
    appearance: &AppearanceField,
    idle: &[bool],
    s: f64,
) -> Result<AdaptedModel, GeometryError> {
    assert!(idle.len() <= complex.n_vertices(), "idle mask longer than the vertex list");
    let hull = complex.hull_vertex_mask();
    let ell = band_width(s);
    let ids: Vec<VertexId> = (0..idle.len())
        .filter(|&v| !hull[v] && idle[v] && sdf.values[v].abs() > ell)
        .map(|v| v as VertexId)
        .collect();
    if ids.is_empty() {
        return Ok(AdaptedModel {
            complex: complex.clone(),
            sdf: sdf.clone(),
            appearance: appearance.clone(),
            changed: 0,
            old_to_new: identity_map(complex.n_vertices()),
        });
    }
    let report = complex.remove_vertices(&ids)?;
    let new = report.complex;
    let mut values = vec![0.0; new.n_vertices()];
    for (old, maybe_new) in report.old_to_new.iter().enumerate() {
        if let Some(nv) = maybe_new {
            values[*nv as usize] = sdf.values[old];
        }
    }
    let appearance = carry_appearance(complex, appearance, &new);
    Ok(AdaptedModel {
        sdf: SdfField::new(values, new.generation),
        appearance,
        changed: ids.len(),
        complex: new,
        old_to_new: report.old_to_new,
    })
}
