//! Backward pass of the volume renderer.
//!
//! Given per-pixel adjoints of the rendered color, depth and normal images,
//! re-trace every ray, replay its compositing, and accumulate adjoints of
//! the vertex SDF values, the per-tet appearance parameters, and the global
//! log-sharpness.  The replay reproduces the forward arithmetic bit for bit,
//! so no per-segment state needs to be stored across the passes.
//!
//! For segment weights `w_k = T_k alpha_k` and final transmittance `T`, the
//! opacity adjoint uses the closed form
//!
//! ```text
//! dL/dalpha_k = (dL/dw_k) T_k  -  [ sum_{l>k} (dL/dw_l) w_l + (dL/dT) T ] / (1 - alpha_k)
//! ```
//!
//! evaluated back to front with a running suffix sum.  `alpha_k = 1` (exact
//! saturation) can only occur at the last composited segment, where the
//! suffix is exactly zero, so the division is guarded but never wrong.

use super::composite::{composite_pixel, segment_alpha_backward, CompositedSegment};
use super::trace::{self, RayStart};
use super::{row_chunks, Camera, Model, RenderCache, RenderError, RenderOptions};
use crate::geometry::{Location, TetId};
use crate::Vec3;
use rayon::prelude::*;

/// Adjoints of the rendered images (row-major, same layout as the render).
pub struct PixelGrads {
    pub d_color: Vec<[f64; 3]>,
    pub d_depth: Vec<f64>,
    pub d_normal: Vec<[f64; 3]>,
}

impl PixelGrads {
    pub fn zeros(width: u32, height: u32) -> PixelGrads {
        let n = (width * height) as usize;
        PixelGrads {
            d_color: vec![[0.0; 3]; n],
            d_depth: vec![0.0; n],
            d_normal: vec![[0.0; 3]; n],
        }
    }
}

/// Parameter adjoints produced by one backward render.
pub struct RenderGrads {
    /// Per vertex, parallel to `sdf.values`.
    pub sdf: Vec<f64>,
    /// Per tet, parallel to `appearance.data`.
    pub appearance: Vec<f64>,
    pub log_s: f64,
}

impl RenderGrads {
    fn zeros(model: &Model) -> RenderGrads {
        RenderGrads {
            sdf: vec![0.0; model.sdf.values.len()],
            appearance: vec![0.0; model.appearance.data.len()],
            log_s: 0.0,
        }
    }

    fn fold(&mut self, other: &RenderGrads) {
        for (a, b) in self.sdf.iter_mut().zip(&other.sdf) {
            *a += b;
        }
        for (a, b) in self.appearance.iter_mut().zip(&other.appearance) {
            *a += b;
        }
        self.log_s += other.log_s;
    }
}

/// A composited segment observed during backward replay; consumed by the
/// grid-adaptation statistics.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRecord {
    pub x: u32,
    pub y: u32,
    pub tet: TetId,
    pub weight: f64,
}

/// Backward render: accumulate parameter adjoints for the given per-pixel
/// image adjoints.  With `collect_segments`, also return every composited
/// segment (deterministic order) for contribution statistics.
pub fn render_backward(
    model: &Model,
    cache: &RenderCache,
    cam: &Camera,
    opts: &RenderOptions,
    pixel: &PixelGrads,
    collect_segments: bool,
) -> Result<(RenderGrads, Option<Vec<SegmentRecord>>), RenderError> {
    model.check_generations()?;
    let start = match model.complex.locate(&cam.center(), None) {
        Ok(Location::Inside(t)) => RayStart::Inside(t),
        _ => RayStart::Outside,
    };
    let s = model.sharpness.s();

    let chunks = row_chunks(cam.height);
    let parts: Vec<(RenderGrads, Vec<SegmentRecord>)> = chunks
        .into_par_iter()
        .map(|rows| {
            let mut g = RenderGrads::zeros(model);
            let mut ds_total = 0.0;
            let mut records = Vec::new();
            let mut segments = Vec::with_capacity(64);
            let mut recs: Vec<CompositedSegment> = Vec::with_capacity(64);
            let stride = model.appearance.stride();
            for y in rows {
                for x in 0..cam.width {
                    let idx = (y * cam.width + x) as usize;
                    let (origin, dir) = cam.ray(x, y);
                    if trace::trace_ray(
                        &model.complex,
                        &cache.hull,
                        start,
                        &origin,
                        &dir,
                        &mut segments,
                    )
                    .is_err()
                    {
                        continue; // forward rendered pure background here
                    }
                    recs.clear();
                    let pf = composite_pixel(
                        model,
                        cache,
                        &segments,
                        &origin,
                        &dir,
                        opts.cull,
                        Some(&mut recs),
                    );
                    if collect_segments {
                        for r in &recs {
                            records.push(SegmentRecord { x, y, tet: r.tet, weight: r.weight });
                        }
                    }
                    if recs.is_empty() {
                        continue;
                    }

                    let dl_dc = pixel.d_color[idx];
                    let dl_dd = pixel.d_depth[idx];
                    let dl_dn = Vec3::new(
                        pixel.d_normal[idx][0],
                        pixel.d_normal[idx][1],
                        pixel.d_normal[idx][2],
                    );
                    // Through the output normalization of the normal map.
                    let raw_norm = pf.normal_raw.norm();
                    let dl_draw = if raw_norm > 1e-12 {
                        let n = pf.normal_raw / raw_norm;
                        (dl_dn - n * n.dot(&dl_dn)) / raw_norm
                    } else {
                        Vec3::zeros()
                    };
                    let dl_dt_final =
                        dl_dc[0] * model.background[0] + dl_dc[1] * model.background[1] + dl_dc[2] * model.background[2];

                    let mut suffix = dl_dt_final * pf.t_final;
                    for k in (0..recs.len()).rev() {
                        let seg = recs[k];
                        let z = 0.5 * (seg.t_in + seg.t_out);
                        let n_k = cache.normal[seg.tet as usize];
                        let dw = dl_dc[0] * seg.cbar[0]
                            + dl_dc[1] * seg.cbar[1]
                            + dl_dc[2] * seg.cbar[2]
                            + dl_dd * z
                            + dl_draw.dot(&n_k);
                        let denom = 1.0 - seg.alpha;
                        let dalpha = dw * seg.transmittance
                            - if suffix != 0.0 && denom > 0.0 { suffix / denom } else { 0.0 };
                        suffix += dw * seg.weight;

                        // Opacity -> endpoint SDF values and sharpness.
                        let (da_dfi, da_dfo, da_ds) =
                            segment_alpha_backward(seg.f_in, seg.f_out, s);
                        let d_fin = dalpha * da_dfi;
                        let d_fout = dalpha * da_dfo;
                        ds_total += dalpha * da_ds;

                        let ti = seg.tet as usize;
                        let x_in = origin + dir * seg.t_in;
                        let x_out = origin + dir * seg.t_out;
                        let rel_in = x_in - cache.base_point[ti];
                        let rel_out = x_out - cache.base_point[ti];

                        // Normal-map term: through n_k = g/|g| of this cell.
                        let g_vec = cache.sdf_grad[ti];
                        let g_norm = g_vec.norm();
                        let dl_dg = if g_norm > 1e-12 {
                            let v = dl_draw * seg.weight;
                            (v - n_k * n_k.dot(&v)) / g_norm
                        } else {
                            Vec3::zeros()
                        };

                        let tet = &model.complex.tets[ti];
                        for j in 0..4 {
                            let gl = cache.grad_lambda[ti][j];
                            let lam_in = if j == 0 { 1.0 } else { 0.0 } + gl.dot(&rel_in);
                            let lam_out = if j == 0 { 1.0 } else { 0.0 } + gl.dot(&rel_out);
                            g.sdf[tet.v[j] as usize] +=
                                d_fin * lam_in + d_fout * lam_out + gl.dot(&dl_dg);
                        }

                        // Color term: both endpoint appearance evaluations.
                        let dl_dcbar = [
                            0.5 * seg.weight * dl_dc[0],
                            0.5 * seg.weight * dl_dc[1],
                            0.5 * seg.weight * dl_dc[2],
                        ];
                        let block = &mut g.appearance[ti * stride..(ti + 1) * stride];
                        model.appearance.eval_backward(seg.tet, &x_in, &dir, &dl_dcbar, block);
                        model.appearance.eval_backward(seg.tet, &x_out, &dir, &dl_dcbar, block);
                    }
                }
            }
            g.log_s = s * ds_total;
            (g, records)
        })
        .collect();

    let mut grads = RenderGrads::zeros(model);
    let mut records = collect_segments.then(Vec::new);
    for (g, r) in parts {
        grads.fold(&g);
        if let Some(all) = records.as_mut() {
            all.extend(r);
        }
    }
    Ok((grads, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AppearanceField, SdfField, Sharpness};
    use crate::geometry::TetComplex;
    use rand::{Rng, SeedableRng};

    /// Sphere-ish scene with de-symmetrizing noise so every gradient path is
    /// exercised with generic values.
    fn noisy_model() -> Model {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let complex = TetComplex::structured(
            crate::Vec3::new(-1.0, -1.0, -1.0),
            crate::Vec3::new(1.0, 1.0, 1.0),
            3,
        );
        let values = complex
            .vertices
            .iter()
            .map(|p| p.norm() - 0.6 + rng.random_range(-0.05..0.05))
            .collect();
        let generation = complex.generation;
        let sdf = SdfField::new(values, generation);
        let mut appearance = AppearanceField::neutral(&complex, 1, 0.6);
        for v in appearance.data.iter_mut() {
            *v += rng.random_range(-0.08..0.08);
        }
        Model {
            complex,
            sdf,
            appearance,
            sharpness: Sharpness { log_s: 15.0f64.ln() },
            background: [0.35, 0.45, 0.55],
        }
    }

    fn test_camera() -> Camera {
        Camera::look_at(
            "t",
            crate::Vec3::new(0.3, -2.6, 0.4),
            crate::Vec3::new(0.0, 0.0, 0.0),
            crate::Vec3::new(0.0, 0.0, 1.0),
            8,
            8,
            8.0,
        )
    }

    fn random_adjoints(out: &super::super::RenderOutput) -> PixelGrads {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let n = out.color.len();
        let mut pg = PixelGrads::zeros(out.width, out.height);
        for i in 0..n {
            for c in 0..3 {
                pg.d_color[i][c] = rng.random_range(-1.0..1.0);
            }
            pg.d_depth[i] = rng.random_range(-1.0..1.0);
            // Normal adjoints only where a solid surface renders; elsewhere the
            // normalized output is numerically touchy and means nothing.
            if out.opacity[i] > 0.2 {
                for c in 0..3 {
                    pg.d_normal[i][c] = rng.random_range(-1.0..1.0);
                }
            }
        }
        pg
    }

    /// The linear functional whose gradient the backward pass computes.
    fn scalar_loss(out: &super::super::RenderOutput, pg: &PixelGrads) -> f64 {
        let mut l = 0.0;
        for i in 0..out.color.len() {
            for c in 0..3 {
                l += pg.d_color[i][c] * out.color[i][c];
                l += pg.d_normal[i][c] * out.normal[i][c];
            }
            l += pg.d_depth[i] * out.depth[i];
        }
        l
    }

    fn render_loss(model: &Model, cam: &Camera, pg: &PixelGrads) -> (f64, Vec<u16>) {
        let cache = RenderCache::build(model);
        let out = super::super::render_view(model, &cache, cam, &RenderOptions { cull: None })
            .unwrap();
        (scalar_loss(&out, pg), out.n_segments)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = noisy_model();
        let cam = test_camera();
        let cache = RenderCache::build(&model);
        let out = super::super::render_view(&model, &cache, &cam, &RenderOptions { cull: None })
            .unwrap();
        assert_eq!(out.stalled, 0);
        let pg = random_adjoints(&out);
        let (grads, _) =
            render_backward(&model, &cache, &cam, &RenderOptions { cull: None }, &pg, false)
                .unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        let mut skipped = 0usize;
        let mut check = |analytic: f64, fd: (f64, Vec<u16>), fd2: (f64, Vec<u16>), what: String| {
            if fd.1 != fd2.1 {
                // A composited-segment count flipped inside the stencil: the
                // functional is non-smooth there, so the comparison is void.
                skipped += 1;
                return;
            }
            let est = (fd.0 - fd2.0) / (2.0 * h);
            let scale = analytic.abs().max(est.abs());
            // The absolute term covers central-difference roundoff: the loss is
            // O(100), so the quotient carries ~1e-16 * 100 / 2e-5 = 5e-10 noise.
            let tol = 1e-4 * scale + 2e-9;
            assert!(
                (analytic - est).abs() < tol,
                "{what}: analytic {analytic} vs fd {est}"
            );
            checked += 1;
        };

        for i in 0..model.sdf.values.len() {
            let mut m = model.clone();
            m.sdf.values[i] += h;
            let plus = render_loss(&m, &cam, &pg);
            m.sdf.values[i] -= 2.0 * h;
            let minus = render_loss(&m, &cam, &pg);
            check(grads.sdf[i], plus, minus, format!("sdf[{i}]"));
        }

        let step = (model.appearance.data.len() / 90).max(1);
        for i in (0..model.appearance.data.len()).step_by(step) {
            let mut m = model.clone();
            m.appearance.data[i] += h;
            let plus = render_loss(&m, &cam, &pg);
            m.appearance.data[i] -= 2.0 * h;
            let minus = render_loss(&m, &cam, &pg);
            check(grads.appearance[i], plus, minus, format!("appearance[{i}]"));
        }

        {
            let mut m = model.clone();
            m.sharpness.log_s += h;
            let plus = render_loss(&m, &cam, &pg);
            m.sharpness.log_s -= 2.0 * h;
            let minus = render_loss(&m, &cam, &pg);
            check(grads.log_s, plus, minus, "log_s".to_string());
        }

        assert!(checked > 80, "need a meaningful number of comparisons, got {checked}");
        assert!(skipped < checked / 4, "too many non-smooth skips: {skipped} of {checked}");
        assert!(grads.sdf.iter().any(|g| g.abs() > 1e-6), "sdf gradient is live");
        assert!(grads.appearance.iter().any(|g| g.abs() > 1e-6), "appearance gradient is live");
        assert!(grads.log_s.abs() > 1e-9, "sharpness gradient is live");
    }

    #[test]
    fn segment_records_sum_to_pixel_opacity() {
        let model = noisy_model();
        let cam = test_camera();
        let cache = RenderCache::build(&model);
        let out = super::super::render_view(&model, &cache, &cam, &RenderOptions { cull: None })
            .unwrap();
        let pg = PixelGrads::zeros(cam.width, cam.height);
        let (_, records) =
            render_backward(&model, &cache, &cam, &RenderOptions { cull: None }, &pg, true)
                .unwrap();
        let records = records.unwrap();
        let mut per_pixel = vec![0.0f64; (cam.width * cam.height) as usize];
        for r in &records {
            per_pixel[(r.y * cam.width + r.x) as usize] += r.weight;
        }
        // Weights telescope: their sum is exactly the rendered opacity.
        for (i, (&sum, &op)) in per_pixel.iter().zip(&out.opacity).enumerate() {
            assert!((sum - op).abs() < 1e-12, "pixel {i}: {sum} vs {op}");
        }
        assert!(records.iter().any(|r| r.weight > 0.01));
    }

    #[test]
    fn gradients_identical_across_thread_counts() {
        let model = noisy_model();
        let cam = test_camera();
        let cache = RenderCache::build(&model);
        let out = super::super::render_view(&model, &cache, &cam, &RenderOptions { cull: None })
            .unwrap();
        let pg = random_adjoints(&out);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let out2 =
                    super::super::render_view(&model, &cache, &cam, &RenderOptions { cull: None })
                        .unwrap();
                let (g, recs) = render_backward(
                    &model,
                    &cache,
                    &cam,
                    &RenderOptions { cull: None },
                    &pg,
                    true,
                )
                .unwrap();
                (out2, g, recs.unwrap())
            })
        };
        let (o1, g1, r1) = run(1);
        let (o7, g7, r7) = run(7);
        assert_eq!(o1.color, o7.color);
        assert_eq!(o1.depth, o7.depth);
        assert_eq!(o1.normal, o7.normal);
        assert!(g1.sdf.iter().zip(&g7.sdf).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1
            .appearance
            .iter()
            .zip(&g7.appearance)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(g1.log_s.to_bits(), g7.log_s.to_bits());
        assert_eq!(r1.len(), r7.len());
        assert!(r1
            .iter()
            .zip(&r7)
            .all(|(a, b)| (a.x, a.y, a.tet, a.weight.to_bits())
                == (b.x, b.y, b.tet, b.weight.to_bits())));
    }

    #[test]
    fn culled_tets_get_no_gradient_and_render_transparent() {
        let model = noisy_model();
        let cam = test_camera();
        let cache = RenderCache::build(&model);
        let all = vec![true; model.complex.tets.len()];
        let out =
            render_view_all(&model, &cache, &cam, &RenderOptions { cull: Some(&all) });
        // Everything culled: pure background, zero gradients.
        for (i, c) in out.color.iter().enumerate() {
            assert_eq!(*c, model.background, "pixel {i}");
        }
        let pg = random_adjoints(&out);
        let (g, _) =
            render_backward(&model, &cache, &cam, &RenderOptions { cull: Some(&all) }, &pg, false)
                .unwrap();
        assert!(g.sdf.iter().all(|x| *x == 0.0));
        assert!(g.appearance.iter().all(|x| *x == 0.0));
        assert_eq!(g.log_s, 0.0);
    }

    fn render_view_all(
        model: &Model,
        cache: &RenderCache,
        cam: &Camera,
        opts: &RenderOptions,
    ) -> super::super::RenderOutput {
        super::super::render_view(model, cache, cam, opts).unwrap()
    }
}
