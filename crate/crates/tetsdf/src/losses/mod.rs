//! Training objectives and their backward passes.
//!
//! Every term here is differentiable through the quantities the renderer and
//! mesh rasterizer produce: per-pixel color, depth, normal and opacity on the
//! volume-rendering side, and depth / normal maps of the extracted mesh on
//! the rasterization side.  Each loss function returns its (unweighted) term
//! values and accumulates `scale * d(term)/d(input)` adjoints into the
//! buffers it is given, so a caller assembles the total objective by invoking
//! each term with the coefficient it carries in the total.

pub mod ssim;

use std::collections::BTreeSet;

use crate::field::SdfField;
use crate::geometry::{Location, TetComplex, TetId};
use crate::mesh::raycast::{MeshMaps, NO_HIT};
use crate::render::{Camera, PixelGrads, RenderOutput};
use crate::Vec3;

pub use ssim::{ssim_plane, ssim_rgb, SSIM_C1, SSIM_C2};

/// Pixels count toward mask-gated terms only above this opacity.
pub const OPACITY_GATE: f64 = 0.5;

/// Coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Structural-similarity share inside the color term.
    pub ssim: f64,
    /// Weight of the mesh-consistency group in the total.
    pub mesh: f64,
    /// Weight of the field-regularity group in the total.
    pub field: f64,
    /// Mesh depth agreement (inside the mesh group).
    pub md: f64,
    /// Mesh normal agreement (inside the mesh group).
    pub mn: f64,
    /// Rendered-normal versus depth-derived-normal agreement (field group).
    pub nd: f64,
    /// Eikonal residual (field group).
    pub eik: f64,
    /// Curvature magnitude (field group).
    pub curv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            mesh: 1.0,
            field: 1.0,
            md: 0.05,
            mn: 0.05,
            nd: 0.05,
            eik: 0.01,
            curv: 5e-6,
        }
    }
}

/// Unweighted values of every individual term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    /// Mean absolute color error (over pixels and channels).
    pub rgb_l1: f64,
    /// `1 - ssim` between rendered and reference images.
    pub rgb_ssim: f64,
    /// Mean `log(1 + |D - D_mesh|)` over valid pixels.
    pub mesh_depth: f64,
    /// Mean `1 - N . N_mesh` over valid pixels.
    pub mesh_normal: f64,
    /// Mean `1 - N . N_depth` over valid interior pixels.
    pub nd: f64,
    /// Mean squared deviation of `|grad f|` from one.
    pub eik: f64,
    /// Mean absolute field Laplacian.
    pub curv: f64,
}

/// One fitting iteration's objective, broken into groups, plus the weighted
/// total.  `total` always equals
/// `rgb + weights.mesh * mesh + weights.field * field` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms,
    /// `rgb_l1 + ssim_weight * rgb_ssim`.
    pub rgb: f64,
    /// `md * mesh_depth + mn * mesh_normal`.
    pub mesh: f64,
    /// `nd * nd_term + eik * eik_term + curv * curv_term`.
    pub field: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(iteration: u64, terms: LossTerms, w: &LossWeights) -> LossReport {
        let rgb = terms.rgb_l1 + w.ssim * terms.rgb_ssim;
        let mesh = w.md * terms.mesh_depth + w.mn * terms.mesh_normal;
        let field = w.nd * terms.nd + w.eik * terms.eik + w.curv * terms.curv;
        LossReport { iteration, terms, rgb, mesh, field, total: rgb + w.mesh * mesh + w.field * field }
    }

    pub fn csv_header() -> &'static str {
        "iteration,rgb_l1,rgb_ssim,mesh_depth,mesh_normal,nd,eik,curv,rgb,mesh,field,total"
    }

    /// One log line.  Floats print in shortest round-trip form, so equal
    /// numbers produce byte-identical lines.
    pub fn csv_line(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            t.rgb_l1,
            t.rgb_ssim,
            t.mesh_depth,
            t.mesh_normal,
            t.nd,
            t.eik,
            t.curv,
            self.rgb,
            self.mesh,
            self.field,
            self.total
        )
    }
}

/// Color objective: mean absolute error plus a structural-similarity term,
/// `mean |C - C*| + lambda_ssim * (1 - ssim(C, C*))`.
///
/// Accumulates `scale * d/dC` of that expression into `grads.d_color` and
/// returns `(l1, 1 - ssim)`.
pub fn loss_rgb(
    color: &[[f64; 3]],
    reference: &[[f64; 3]],
    width: u32,
    height: u32,
    lambda_ssim: f64,
    scale: f64,
    grads: &mut PixelGrads,
) -> (f64, f64) {
    let n = (width * height) as usize;
    assert_eq!(color.len(), n, "rendered image size mismatch");
    assert_eq!(reference.len(), n, "reference image size mismatch");
    assert_eq!(grads.d_color.len(), n);

    let mut l1 = 0.0;
    let k = scale / (3.0 * n as f64);
    for i in 0..n {
        for c in 0..3 {
            let d = color[i][c] - reference[i][c];
            l1 += d.abs();
            if d != 0.0 {
                grads.d_color[i][c] += k * d.signum();
            }
        }
    }
    l1 /= 3.0 * n as f64;

    let s = ssim_rgb(
        color,
        reference,
        width as usize,
        height as usize,
        Some((&mut grads.d_color, -scale * lambda_ssim)),
    );
    (l1, 1.0 - s)
}

/// Agreement between the volume rendering and the rasterized extracted mesh:
/// `md_term = mean log(1 + |D - D_mesh|)` and `mn_term = mean (1 - N . N_mesh)`,
/// both over pixels where the mesh is hit and rendered opacity exceeds the
/// gate.  Returns `(md_term, mn_term)`; an empty mask yields zeros and a
/// warning on stderr.
///
/// Adjoints: `scale_md`/`scale_mn` times the term derivatives go to
/// `grads.d_depth` / `grads.d_normal` (render side) and to `d_mesh_depth` /
/// `d_mesh_normal` (mesh-map side, same pixel layout).
#[allow(clippy::too_many_arguments)]
pub fn loss_mesh(
    out: &RenderOutput,
    maps: &MeshMaps,
    scale_md: f64,
    scale_mn: f64,
    grads: &mut PixelGrads,
    d_mesh_depth: &mut [f64],
    d_mesh_normal: &mut [[f64; 3]],
) -> (f64, f64) {
    let n = (out.width * out.height) as usize;
    assert_eq!(maps.width, out.width, "mesh maps rendered at a different size");
    assert_eq!(maps.height, out.height);
    assert_eq!(d_mesh_depth.len(), n);
    assert_eq!(d_mesh_normal.len(), n);

    let valid = |i: usize| maps.tri[i] != NO_HIT && out.opacity[i] > OPACITY_GATE;
    let count = (0..n).filter(|&i| valid(i)).count();
    if count == 0 {
        eprintln!("warning: mesh-consistency loss saw no valid pixels; term is zero");
        return (0.0, 0.0);
    }
    let inv = 1.0 / count as f64;
    let (mut md, mut mn) = (0.0, 0.0);
    for i in 0..n {
        if !valid(i) {
            continue;
        }
        let diff = out.depth[i] - maps.depth[i];
        md += (1.0 + diff.abs()).ln();
        let g = if diff == 0.0 { 0.0 } else { diff.signum() / (1.0 + diff.abs()) };
        grads.d_depth[i] += scale_md * inv * g;
        d_mesh_depth[i] -= scale_md * inv * g;

        let nr = out.normal[i];
        let nm = maps.normal[i];
        mn += 1.0 - (nr[0] * nm[0] + nr[1] * nm[1] + nr[2] * nm[2]);
        for c in 0..3 {
            grads.d_normal[i][c] -= scale_mn * inv * nm[c];
            d_mesh_normal[i][c] -= scale_mn * inv * nr[c];
        }
    }
    (md * inv, mn * inv)
}

/// Agreement between rendered normals and normals implied by the rendered
/// depth map: depth is back-projected to camera-space points, the local
/// surface normal is the normalized cross product of horizontal and vertical
/// central differences (flipped to face the camera), and the loss is
/// `mean (1 - N . N_depth)` over interior pixels whose opacity exceeds the
/// gate.  Accumulates `scale` times the adjoints into `grads.d_depth` (at the
/// four stencil neighbors) and `grads.d_normal` (at the center).
pub fn loss_nd(out: &RenderOutput, cam: &Camera, scale: f64, grads: &mut PixelGrads) -> f64 {
    let (w, h) = (out.width, out.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    // Unit camera-space direction per pixel; the back-projected point is
    // depth times this (depth is the ray parameter for a unit direction).
    let dirs: Vec<Vec3> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| cam.dir_cam(x, y).normalize())
        .collect();
    let at = |x: u32, y: u32| (y * w + x) as usize;
    let point = |x: u32, y: u32| dirs[at(x, y)] * out.depth[at(x, y)];

    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if out.opacity[at(x, y)] > OPACITY_GATE {
                count += 1;
            }
        }
    }
    if count == 0 {
        return 0.0;
    }
    let k = scale / count as f64;
    let inv = 1.0 / count as f64;

    let mut total = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = at(x, y);
            if out.opacity[i] <= OPACITY_GATE {
                continue;
            }
            let px = (point(x + 1, y) - point(x - 1, y)) * 0.5;
            let py = (point(x, y + 1) - point(x, y - 1)) * 0.5;
            let m = px.cross(&py);
            let m_len = m.norm();
            let n_render = Vec3::new(out.normal[i][0], out.normal[i][1], out.normal[i][2]);
            if m_len < 1e-15 {
                // Degenerate stencil (e.g. background depth on both sides):
                // the normal is undefined; count the pixel at full penalty
                // but propagate no gradient through the singularity.
                total += inv;
                continue;
            }
            let u_m = m / m_len;
            // Face the camera: camera-space view direction is dirs[i].
            let sigma = if u_m.dot(&dirs[i]) > 0.0 { -1.0 } else { 1.0 };
            let n_cam = u_m * sigma;
            // Rendered normals live in world space.
            let n_world = cam.rot.transpose() * n_cam;
            total += inv * (1.0 - n_render.dot(&n_world));

            // Backward.  d/dN_render:
            for c in 0..3 {
                grads.d_normal[i][c] -= k * n_world[c];
            }
            // d/dN_world = -N_render; N_world = R^T N_cam.
            let d_ncam = cam.rot * (n_render * -k);
            let d_m = (d_ncam - u_m * u_m.dot(&d_ncam)) * (sigma / m_len);
            let d_px = py.cross(&d_m);
            let d_py = d_m.cross(&px);
            // p(x, y) = depth * unit_dir, so d(depth) = unit_dir . d(point).
            grads.d_depth[at(x + 1, y)] += 0.5 * dirs[at(x + 1, y)].dot(&d_px);
            grads.d_depth[at(x - 1, y)] -= 0.5 * dirs[at(x - 1, y)].dot(&d_px);
            grads.d_depth[at(x, y + 1)] += 0.5 * dirs[at(x, y + 1)].dot(&d_py);
            grads.d_depth[at(x, y - 1)] -= 0.5 * dirs[at(x, y - 1)].dot(&d_py);
        }
    }
    total
}

/// Eikonal and curvature regularity of the field, probed at grid vertices
/// with six-point central-difference stencils of half-width
/// `0.5 * (mean incident edge length)`.  Vertices whose stencil leaves the
/// hull are skipped.  Returns `(mean (|grad f| - 1)^2, mean |laplacian f|)`
/// over probed vertices and accumulates `scale_eik` / `scale_curv` times the
/// adjoints into `d_values`.
pub fn loss_field_reg(
    complex: &TetComplex,
    sdf: &SdfField,
    scale_eik: f64,
    scale_curv: f64,
    d_values: &mut [f64],
) -> (f64, f64) {
    loss_field_reg_signed(complex, sdf, scale_eik, scale_curv, d_values, None)
}

/// [`loss_field_reg`] that additionally reports, per vertex, which side of
/// the objective's kinks the stencil landed on: 3 for skipped vertices, +10
/// when the probed gradient is too small to differentiate, otherwise the
/// Laplacian's sign.  Finite-difference checks compare signatures between
/// perturbed evaluations — a change means the subgradient jumped and the
/// comparison is void.
pub fn loss_field_reg_signed(
    complex: &TetComplex,
    sdf: &SdfField,
    scale_eik: f64,
    scale_curv: f64,
    d_values: &mut [f64],
    mut signature: Option<&mut Vec<i8>>,
) -> (f64, f64) {
    let n = complex.n_vertices();
    assert_eq!(sdf.values.len(), n);
    assert_eq!(d_values.len(), n);
    let vt = complex.vertex_tets();

    // Raw per-vertex adjoints; folded in at the end once the probed-vertex
    // count (the normalizer) is known.
    let mut g_eik = vec![0.0; n];
    let mut g_curv = vec![0.0; n];
    let (mut eik_sum, mut curv_sum) = (0.0, 0.0);
    let mut count = 0usize;

    // One probed sample: value, containing tet, barycentric weights.
    struct Probe {
        f: f64,
        tet: TetId,
        lam: [f64; 4],
    }
    let eval = |p: &Vec3, hint: TetId| -> Option<Probe> {
        match complex.locate(p, Some(hint)).ok()? {
            Location::Outside => None,
            Location::Inside(t) => {
                let lam = complex.barycentric(t, p);
                let tet = &complex.tets[t as usize];
                let f = (0..4).map(|k| lam[k] * sdf.values[tet.v[k] as usize]).sum();
                Some(Probe { f, tet: t, lam })
            }
        }
    };
    let scatter = |buf: &mut [f64], probe: &Probe, w: f64| {
        let tet = &complex.tets[probe.tet as usize];
        for k in 0..4 {
            buf[tet.v[k] as usize] += probe.lam[k] * w;
        }
    };

    for v in 0..n {
        let mut mark = |s: i8| {
            if let Some(sig) = signature.as_deref_mut() {
                sig.push(s);
            }
        };
        let Some(&hint) = vt[v].first() else {
            mark(3);
            continue;
        };
        let mut neighbors = BTreeSet::new();
        for &t in &vt[v] {
            for &u in &complex.tets[t as usize].v {
                if u as usize != v {
                    neighbors.insert(u);
                }
            }
        }
        if neighbors.is_empty() {
            mark(3);
            continue;
        }
        let pv = complex.vertices[v];
        let mean_edge = neighbors
            .iter()
            .map(|&u| (complex.vertices[u as usize] - pv).norm())
            .sum::<f64>()
            / neighbors.len() as f64;
        let eps = 0.5 * mean_edge;

        // samples[axis][0] = -eps probe, samples[axis][1] = +eps probe.
        let mut samples: Vec<[Probe; 2]> = Vec::with_capacity(3);
        let mut complete = true;
        'axes: for axis in 0..3 {
            let mut pair: Vec<Probe> = Vec::with_capacity(2);
            for sgn in [-1.0, 1.0] {
                let mut p = pv;
                p[axis] += sgn * eps;
                match eval(&p, hint) {
                    Some(probe) => pair.push(probe),
                    None => {
                        complete = false;
                        break 'axes;
                    }
                }
            }
            let [lo, hi] = <[Probe; 2]>::try_from(pair).ok().unwrap();
            samples.push([lo, hi]);
        }
        if !complete {
            mark(3);
            continue;
        }
        count += 1;
        let f0 = sdf.values[v];

        let grad = Vec3::new(
            (samples[0][1].f - samples[0][0].f) / (2.0 * eps),
            (samples[1][1].f - samples[1][0].f) / (2.0 * eps),
            (samples[2][1].f - samples[2][0].f) / (2.0 * eps),
        );
        let g_norm = grad.norm();
        eik_sum += (g_norm - 1.0) * (g_norm - 1.0);
        if g_norm > 1e-12 {
            let c = 2.0 * (g_norm - 1.0) / g_norm;
            for axis in 0..3 {
                let w = c * grad[axis] / (2.0 * eps);
                scatter(&mut g_eik, &samples[axis][1], w);
                scatter(&mut g_eik, &samples[axis][0], -w);
            }
        }

        let lap: f64 =
            (0..3).map(|a| (samples[a][1].f + samples[a][0].f - 2.0 * f0) / (eps * eps)).sum();
        curv_sum += lap.abs();
        if lap != 0.0 {
            let w = lap.signum() / (eps * eps);
            for axis in 0..3 {
                scatter(&mut g_curv, &samples[axis][1], w);
                scatter(&mut g_curv, &samples[axis][0], w);
                g_curv[v] -= 2.0 * w;
            }
        }
        let mut s = if lap == 0.0 {
            0
        } else {
            lap.signum() as i8
        };
        if g_norm <= 1e-12 {
            s += 10;
        }
        mark(s);
    }

    if count == 0 {
        return (0.0, 0.0);
    }
    let inv = 1.0 / count as f64;
    for i in 0..n {
        d_values[i] += scale_eik * inv * g_eik[i] + scale_curv * inv * g_curv[i];
    }
    (eik_sum * inv, curv_sum * inv)
}
