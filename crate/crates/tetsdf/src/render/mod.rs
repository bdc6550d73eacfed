//! Differentiable volume rendering of the piecewise-linear SDF.
//!
//! Rays traverse the tetrahedral grid cell by cell ([`trace`]); each crossed
//! segment converts its entry/exit signed distances into an opacity
//! ([`composite`]), and segments composite front to back into color, depth,
//! normal and opacity images.  The backward pass ([`backward`]) replays the
//! traversal instead of storing it, producing exact gradients of any
//! per-pixel loss with respect to the vertex SDF values, the per-tet
//! appearance parameters, and the global sharpness.
//!
//! Rendering is deterministic for a fixed input regardless of worker count:
//! pixels write disjoint slots, and gradient reductions run over a fixed
//! number of row chunks folded in a fixed order.

pub mod backward;
pub mod composite;
pub mod image_io;
pub mod trace;

use crate::field::{AppearanceField, SdfField, Sharpness};
use crate::geometry::{Location, TetComplex, TetId};
use crate::{Mat3, Vec3};
use thiserror::Error;

pub use backward::{render_backward, PixelGrads, RenderGrads, SegmentRecord};

/// Transmittance below which compositing stops early.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

/// Gradient and image reductions always run over this many row chunks,
/// independent of how many worker threads execute them.
pub const REDUCTION_CHUNKS: usize = 16;

/// Everything that renders: the grid plus the fields fitted on it.
#[derive(Debug, Clone)]
pub struct Model {
    pub complex: TetComplex,
    pub sdf: SdfField,
    pub appearance: AppearanceField,
    pub sharpness: Sharpness,
    pub background: [f64; 3],
}

impl Model {
    /// All components must have been built for the same grid generation.
    pub fn check_generations(&self) -> Result<(), RenderError> {
        for (what, got) in [("sdf", self.sdf.generation), ("appearance", self.appearance.generation)]
        {
            if got != self.complex.generation {
                return Err(RenderError::GenerationMismatch {
                    what,
                    expected: self.complex.generation,
                    got,
                });
            }
        }
        if self.sdf.values.len() != self.complex.n_vertices() {
            return Err(RenderError::GenerationMismatch {
                what: "sdf length",
                expected: self.complex.n_vertices() as u64,
                got: self.sdf.values.len() as u64,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("{what} was built for generation {got}, grid is at {expected}")]
    GenerationMismatch { what: &'static str, expected: u64, got: u64 },
}

/// Pinhole camera, OpenCV convention: `x_cam = R x_world + t`, camera looks
/// down +z, x right, y down.  Pixel `(x, y)` is sampled at its center.
#[derive(Debug, Clone)]
pub struct Camera {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Camera {
    pub fn center(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    /// Camera-space direction through pixel `(x, y)`, unnormalized `(u, v, 1)`.
    pub fn dir_cam(&self, x: u32, y: u32) -> Vec3 {
        Vec3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// World-space ray through pixel `(x, y)`: `(origin, unit direction)`.
    pub fn ray(&self, x: u32, y: u32) -> (Vec3, Vec3) {
        let d = self.rot.transpose() * self.dir_cam(x, y);
        (self.center(), d.normalize())
    }

    /// Camera at `pos` looking toward `target` with `up` fixing the roll.
    pub fn look_at(
        name: impl Into<String>,
        pos: Vec3,
        target: Vec3,
        up: Vec3,
        width: u32,
        height: u32,
        focal: f64,
    ) -> Camera {
        let forward = (target - pos).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Looking straight along `up`; pick any perpendicular.
            right = forward.cross(&Vec3::new(0.0, 1.0, 0.0));
            if right.norm() < 1e-9 {
                right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * pos);
        Camera {
            name: name.into(),
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rot,
            trans,
        }
    }
}

/// Per-generation (and per-SDF-state) derived quantities used by rendering.
pub struct RenderCache {
    pub generation: u64,
    /// Barycentric gradients per tet; zeros for (impossible) degenerate tets.
    pub grad_lambda: Vec<[Vec3; 4]>,
    /// First vertex position of each tet (linear-field base point).
    pub base_point: Vec<Vec3>,
    /// SDF value at the first vertex of each tet.
    pub base_value: Vec<f64>,
    /// Constant SDF gradient of each tet.
    pub sdf_grad: Vec<Vec3>,
    /// Unit surface normal of each tet (zero where the gradient vanishes).
    pub normal: Vec<Vec3>,
    /// Hull triangles for ray entry tests, in enumeration order.
    pub hull: Vec<HullTri>,
}

#[derive(Debug, Clone, Copy)]
pub struct HullTri {
    pub tet: TetId,
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
}

impl RenderCache {
    pub fn build(model: &Model) -> RenderCache {
        let c = &model.complex;
        let n = c.n_tets();
        let mut grad_lambda = Vec::with_capacity(n);
        let mut base_point = Vec::with_capacity(n);
        let mut base_value = Vec::with_capacity(n);
        let mut sdf_grad = Vec::with_capacity(n);
        let mut normal = Vec::with_capacity(n);
        for t in 0..n {
            let tet = &c.tets[t];
            let gl = c.lambda_gradients(t as TetId).unwrap_or([Vec3::zeros(); 4]);
            let g: Vec3 =
                (0..4).map(|i| model.sdf.values[tet.v[i] as usize] * gl[i]).sum();
            grad_lambda.push(gl);
            base_point.push(c.vertices[tet.v[0] as usize]);
            base_value.push(model.sdf.values[tet.v[0] as usize]);
            sdf_grad.push(g);
            let gn = g.norm();
            normal.push(if gn > 1e-12 { g / gn } else { Vec3::zeros() });
        }
        let hull = c
            .hull_faces()
            .into_iter()
            .map(|(t, i)| {
                let [a, b, f] = c.face_vertices(t, i).map(|v| c.vertices[v as usize]);
                HullTri { tet: t, a, b, c: f }
            })
            .collect();
        RenderCache {
            generation: c.generation,
            grad_lambda,
            base_point,
            base_value,
            sdf_grad,
            normal,
            hull,
        }
    }

    /// Linear-field value of tet `t` at `x` (exact inside the tet).
    #[inline]
    pub fn field_at(&self, t: TetId, x: &Vec3) -> f64 {
        self.base_value[t as usize] + self.sdf_grad[t as usize].dot(&(x - self.base_point[t as usize]))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions<'a> {
    /// Tets flagged `true` are skipped during compositing (kept in the grid).
    pub cull: Option<&'a [bool]>,
}

/// Images produced by one forward render; all row-major `width x height`.
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Composited color including the background term.
    pub color: Vec<[f64; 3]>,
    /// Weight-summed midpoint ray distance (0 where nothing composited).
    pub depth: Vec<f64>,
    /// Renormalized weighted surface normal (zero vector where undefined).
    pub normal: Vec<[f64; 3]>,
    /// `1 - T_final`.
    pub opacity: Vec<f64>,
    /// Number of composited segments per pixel (a discrete signature of the
    /// traversal, used by gradient checking to detect topology flips).
    pub n_segments: Vec<u16>,
    /// Pixels whose ray trace stalled twice and rendered as background.
    pub stalled: usize,
}

/// Split `height` rows into [`REDUCTION_CHUNKS`] contiguous ranges.
pub(crate) fn row_chunks(height: u32) -> Vec<std::ops::Range<u32>> {
    let n = REDUCTION_CHUNKS as u32;
    let size = height.div_ceil(n);
    (0..n)
        .map(|i| (i * size).min(height)..((i + 1) * size).min(height))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Render all pixels of `cam`.  Deterministic for fixed inputs.
pub fn render_view(
    model: &Model,
    cache: &RenderCache,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput, RenderError> {
    model.check_generations()?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let start = match model.complex.locate(&cam.center(), None) {
        Ok(Location::Inside(t)) => trace::RayStart::Inside(t),
        _ => trace::RayStart::Outside,
    };

    let mut color = vec![[0.0; 3]; w * h];
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![[0.0; 3]; w * h];
    let mut opacity = vec![0.0; w * h];
    let mut n_segments = vec![0u16; w * h];

    let chunks = row_chunks(cam.height);
    let bands: Vec<(std::ops::Range<u32>, &mut [[f64; 3]], &mut [f64], &mut [[f64; 3]], &mut [f64], &mut [u16])> = {
        let mut bands = Vec::new();
        let mut c_rest = color.as_mut_slice();
        let mut d_rest = depth.as_mut_slice();
        let mut n_rest = normal.as_mut_slice();
        let mut o_rest = opacity.as_mut_slice();
        let mut s_rest = n_segments.as_mut_slice();
        for r in &chunks {
            let len = (r.end - r.start) as usize * w;
            let (c0, c1) = c_rest.split_at_mut(len);
            let (d0, d1) = d_rest.split_at_mut(len);
            let (n0, n1) = n_rest.split_at_mut(len);
            let (o0, o1) = o_rest.split_at_mut(len);
            let (s0, s1) = s_rest.split_at_mut(len);
            c_rest = c1;
            d_rest = d1;
            n_rest = n1;
            o_rest = o1;
            s_rest = s1;
            bands.push((r.clone(), c0, d0, n0, o0, s0));
        }
        bands
    };

    use rayon::prelude::*;
    let stalled: usize = bands
        .into_par_iter()
        .map(|(rows, c, d, n, o, s)| {
            let mut segments = Vec::with_capacity(64);
            let mut composited = Vec::with_capacity(64);
            let mut stalled = 0usize;
            for y in rows.clone() {
                for x in 0..cam.width {
                    let idx = ((y - rows.start) * cam.width + x) as usize;
                    let (origin, dir) = cam.ray(x, y);
                    let ok = trace::trace_ray(
                        &model.complex,
                        &cache.hull,
                        start,
                        &origin,
                        &dir,
                        &mut segments,
                    )
                    .is_ok();
                    if !ok {
                        stalled += 1;
                        segments.clear();
                    }
                    composited.clear();
                    let pf = composite::composite_pixel(
                        model,
                        cache,
                        &segments,
                        &origin,
                        &dir,
                        opts.cull,
                        Some(&mut composited),
                    );
                    let mut col = pf.color;
                    for ch in 0..3 {
                        col[ch] += pf.t_final * model.background[ch];
                    }
                    c[idx] = col;
                    d[idx] = pf.depth;
                    let nr = pf.normal_raw.norm();
                    n[idx] = if nr > 1e-12 {
                        let u = pf.normal_raw / nr;
                        [u.x, u.y, u.z]
                    } else {
                        [0.0; 3]
                    };
                    o[idx] = 1.0 - pf.t_final;
                    s[idx] = composited.len() as u16;
                }
            }
            stalled
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();

    Ok(RenderOutput {
        width: cam.width,
        height: cam.height,
        color,
        depth,
        normal,
        opacity,
        n_segments,
        stalled,
    })
}
