//! Synthetic ground truth and dataset plumbing: analytic distance-field
//! primitives with a sphere-traced reference renderer, orbiting camera rigs,
//! grid/field initialization, posed-image dataset io, and reconstruction
//! metrics (Chamfer distance, PSNR).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{AppearanceField, SdfField, Sharpness};
use crate::geometry::{delaunay_tetrahedralize, GeometryError, TetComplex};
use crate::mesh::TriMesh;
use crate::render::image_io::{read_png, write_png};
use crate::render::Camera;
use crate::{Mat3, Vec3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("camera file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image file missing or unreadable: {0}")]
    MissingImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("camera position coincides with its target")]
    DegenerateLookAt,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// Analytic signed distance fields.

#[derive(Debug, Clone, Copy)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box given by center and half-extents.
    Box { center: Vec3, half: Vec3 },
    /// Torus around the z axis through `center`: ring radius `major`, tube
    /// radius `minor`.
    Torus { center: Vec3, major: f64, minor: f64 },
}

impl Primitive {
    pub fn eval(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.max().min(0.0)
            }
            Primitive::Torus { center, major, minor } => {
                let d = p - center;
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                (ring * ring + d.z * d.z).sqrt() - minor
            }
        }
    }
}

/// A min-union of primitives, each with a flat albedo.  Distances are exact
/// per primitive; the union is a (conservative) lower bound near seams.
#[derive(Debug, Clone)]
pub struct AnalyticSdf {
    pub parts: Vec<(Primitive, [f64; 3])>,
}

impl AnalyticSdf {
    pub fn sphere(center: Vec3, radius: f64, albedo: [f64; 3]) -> AnalyticSdf {
        AnalyticSdf { parts: vec![(Primitive::Sphere { center, radius }, albedo)] }
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        self.parts.iter().map(|(pr, _)| pr.eval(p)).fold(f64::INFINITY, f64::min)
    }

    /// Distance plus the albedo of the nearest part.
    pub fn eval_with_albedo(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let mut best = (f64::INFINITY, [0.0; 3]);
        for (pr, albedo) in &self.parts {
            let d = pr.eval(p);
            if d < best.0 {
                best = (d, *albedo);
            }
        }
        best
    }

    /// Central-difference surface normal.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[axis] += h;
            lo[axis] -= h;
            g[axis] = (self.eval(&hi) - self.eval(&lo)) / (2.0 * h);
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vec3::zeros()
        }
    }
}

/// Direction from surface toward the fixed scene light.
pub fn default_light_dir() -> Vec3 {
    Vec3::new(0.4, -0.7, 0.8).normalize()
}

/// Sphere-trace `sdf` through every pixel of `cam`: color is
/// `albedo * max(0.2, n . l)` at hits, `background` at misses; depth is the
/// hit distance (0 at misses).
pub fn render_reference(
    sdf: &AnalyticSdf,
    cam: &Camera,
    background: [f64; 3],
    light: &Vec3,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let n = (cam.width * cam.height) as usize;
    let mut color = vec![background; n];
    let mut depth = vec![0.0; n];
    let rows: Vec<(usize, &mut [[f64; 3]], &mut [f64])> = color
        .chunks_mut(cam.width as usize)
        .zip(depth.chunks_mut(cam.width as usize))
        .enumerate()
        .map(|(y, (c, d))| (y, c, d))
        .collect();
    let t_max = 100.0;
    rows.into_par_iter().for_each(|(y, crow, drow)| {
        for x in 0..cam.width {
            let (origin, dir) = cam.ray(x, y as u32);
            let mut t = 0.0;
            for _ in 0..256 {
                let p = origin + dir * t;
                let f = sdf.eval(&p);
                if f.abs() < 1e-6 {
                    let nrm = sdf.normal(&p);
                    let (_, albedo) = sdf.eval_with_albedo(&p);
                    let shade = nrm.dot(light).max(0.2);
                    crow[x as usize] =
                        [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade];
                    drow[x as usize] = t;
                    break;
                }
                t += f;
                if t > t_max || t < 0.0 {
                    break;
                }
            }
        }
    });
    (color, depth)
}

/// `n` cameras equally spaced in azimuth on a sphere of `radius` around
/// `lookat`, at `elevation_deg` above its equator, aimed at `lookat` with
/// `up = +z`.
pub fn camera_rig(
    n: usize,
    radius: f64,
    elevation_deg: f64,
    lookat: Vec3,
    width: u32,
    height: u32,
    focal: f64,
) -> Result<Vec<Camera>, SceneError> {
    if radius <= 0.0 {
        return Err(SceneError::DegenerateLookAt);
    }
    let el = elevation_deg.to_radians();
    (0..n)
        .map(|k| {
            let az = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let pos = lookat
                + radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            if (pos - lookat).norm() < 1e-12 {
                return Err(SceneError::DegenerateLookAt);
            }
            Ok(Camera::look_at(
                format!("view{k:03}"),
                pos,
                lookat,
                Vec3::new(0.0, 0.0, 1.0),
                width,
                height,
                focal,
            ))
        })
        .collect()
}

/// A freshly initialized scene: grid, fields, and a sharpness start value.
pub struct InitializedScene {
    pub complex: TetComplex,
    pub sdf: SdfField,
    pub appearance: AppearanceField,
    pub sharpness: Sharpness,
}

/// Build the initial grid (8 bounding-box corners plus a jittered stratified
/// lattice, `n_points` total) and initialize the field to a centered sphere
/// of radius `r0` (default 0.3 x bounds diagonal) with mid-gray appearance.
pub fn init_scene(
    lo: Vec3,
    hi: Vec3,
    n_points: usize,
    r0: Option<f64>,
    sh_degree: u32,
    seed: u64,
) -> Result<InitializedScene, SceneError> {
    assert!(n_points >= 12, "need at least 12 points (8 corners + 4 interior)");
    let mut points = Vec::with_capacity(n_points);
    for corner in 0..8 {
        points.push(Vec3::new(
            if corner & 1 == 0 { lo.x } else { hi.x },
            if corner & 2 == 0 { lo.y } else { hi.y },
            if corner & 4 == 0 { lo.z } else { hi.z },
        ));
    }
    // Stratified interior lattice: the first n-8 cells of the smallest cube
    // lattice that holds them, each jittered away from its cell walls.
    let interior = n_points - 8;
    let per_axis = (interior as f64).cbrt().ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = hi - lo;
    'fill: for iz in 0..per_axis {
        for iy in 0..per_axis {
            for ix in 0..per_axis {
                if points.len() == n_points {
                    break 'fill;
                }
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0.15..0.85);
                let u = (ix as f64 + jitter(&mut rng)) / per_axis as f64;
                let v = (iy as f64 + jitter(&mut rng)) / per_axis as f64;
                let w = (iz as f64 + jitter(&mut rng)) / per_axis as f64;
                points.push(lo + Vec3::new(u * ext.x, v * ext.y, w * ext.z));
            }
        }
    }
    let complex = delaunay_tetrahedralize(&points)?;
    let center = (lo + hi) / 2.0;
    let diagonal = ext.norm();
    let radius = r0.unwrap_or(0.3 * diagonal);
    let values: Vec<f64> =
        complex.vertices.iter().map(|p| (p - center).norm() - radius).collect();
    let sdf = SdfField::new(values, complex.generation);
    let appearance = AppearanceField::neutral(&complex, sh_degree, 0.5);
    Ok(InitializedScene { complex, sdf, appearance, sharpness: Sharpness::init_for_diagonal(diagonal) })
}

// ---------------------------------------------------------------------------
// Posed datasets.

/// Similarity transform taking original world coordinates to the normalized
/// frame the solver works in: `p_norm = (p - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneTransform {
    pub offset: Vec3,
    pub scale: f64,
}

impl SceneTransform {
    pub fn identity() -> SceneTransform {
        SceneTransform { offset: Vec3::zeros(), scale: 1.0 }
    }

    pub fn to_normalized(&self, p: &Vec3) -> Vec3 {
        (p - self.offset) * self.scale
    }

    pub fn to_original(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.offset
    }

    /// Distances measured in the normalized frame, reported in original
    /// units.
    pub fn distance_to_original(&self, d: f64) -> f64 {
        d / self.scale
    }
}

pub struct Dataset {
    pub cameras: Vec<Camera>,
    /// One row-major RGB image per camera, values in [0, 1].
    pub images: Vec<Vec<[f64; 3]>>,
    pub gt: Option<AnalyticSdf>,
    /// Original-world -> solver-frame transform already applied to cameras.
    pub transform: SceneTransform,
}

fn apply_transform(cam: &Camera, t: &SceneTransform) -> Camera {
    let center = t.to_normalized(&cam.center());
    Camera { trans: -(cam.rot * center), ..cam.clone() }
}

/// Normalizing transform from the bounding box of the camera centers into
/// [-1, 1]^3 (largest extent maps to full width; degenerate boxes get unit
/// scale).
pub fn normalizing_transform(cameras: &[Camera]) -> SceneTransform {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for cam in cameras {
        let c = cam.center();
        lo = lo.inf(&c);
        hi = hi.sup(&c);
    }
    let extent = (hi - lo).max();
    let scale = if extent > 1e-12 { 2.0 / extent } else { 1.0 };
    SceneTransform { offset: (lo + hi) / 2.0, scale }
}

/// Write `cameras.txt` plus one PNG per view.
pub fn save_dataset(
    dir: &Path,
    cameras: &[Camera],
    images: &[Vec<[f64; 3]>],
) -> Result<(), SceneError> {
    assert_eq!(cameras.len(), images.len());
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join("cameras.txt"))?;
    for (cam, img) in cameras.iter().zip(images) {
        let file = format!("{}.png", cam.name);
        write_png(&dir.join(&file), cam.width, cam.height, img)?;
        writeln!(f, "name {file}")?;
        writeln!(f, "size {} {}", cam.width, cam.height)?;
        writeln!(f, "K {} {} {} {}", cam.fx, cam.fy, cam.cx, cam.cy)?;
        let r = cam.rot;
        writeln!(
            f,
            "R {} {} {} {} {} {} {} {} {}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)]
        )?;
        writeln!(f, "t {} {} {}", cam.trans.x, cam.trans.y, cam.trans.z)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Load a posed dataset: `cameras.txt` (5-line blocks) plus the PNGs it
/// names, auto-normalized into [-1, 1]^3 by the camera bounding box.
pub fn load_posed(dir: &Path) -> Result<Dataset, SceneError> {
    let path = dir.join("cameras.txt");
    let file = std::fs::File::open(&path)
        .map_err(|e| SceneError::Parse { line: 0, msg: format!("{}: {e}", path.display()) })?;
    let mut lines = BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|(i, l)| match l {
            Ok(s) => {
                let t = s.trim().to_string();
                if t.is_empty() || t.starts_with('#') {
                    None
                } else {
                    Some((i, t))
                }
            }
            Err(_) => Some((i, String::new())),
        })
        .collect::<Vec<(usize, String)>>()
        .into_iter();

    let mut cameras = Vec::new();
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    loop {
        let Some((ln_name, name_line)) = lines.next() else { break };
        let parse_err = |line: usize, msg: String| SceneError::Parse { line, msg };
        let want = |lines: &mut dyn Iterator<Item = (usize, String)>,
                    key: &str,
                    after: usize|
         -> Result<(usize, Vec<String>), SceneError> {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(after, format!("unexpected end of file, wanted `{key}`")))?;
            let mut parts = l.split_whitespace().map(str::to_string);
            let head = parts.next().unwrap_or_default();
            if head != key {
                return Err(parse_err(ln, format!("expected `{key}`, found `{head}`")));
            }
            Ok((ln, parts.collect()))
        };
        let floats = |ln: usize, vals: &[String], n: usize| -> Result<Vec<f64>, SceneError> {
            if vals.len() != n {
                return Err(parse_err(ln, format!("expected {n} numbers, found {}", vals.len())));
            }
            vals.iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| parse_err(ln, format!("not a number: `{v}`")))
                })
                .collect()
        };

        let mut head = name_line.split_whitespace();
        if head.next() != Some("name") {
            return Err(parse_err(ln_name, format!("expected `name <file>`, found `{name_line}`")));
        }
        let img_file = head
            .next()
            .ok_or_else(|| parse_err(ln_name, "missing image file after `name`".into()))?
            .to_string();

        let (ln, vals) = want(&mut lines, "size", ln_name)?;
        let size = floats(ln, &vals, 2)?;
        let (width, height) = (size[0] as u32, size[1] as u32);
        let (ln, vals) = want(&mut lines, "K", ln)?;
        let k = floats(ln, &vals, 4)?;
        let (ln, vals) = want(&mut lines, "R", ln)?;
        let r = floats(ln, &vals, 9)?;
        let (ln, vals) = want(&mut lines, "t", ln)?;
        let t = floats(ln, &vals, 3)?;

        let rot = Mat3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        cameras.push(Camera {
            name: img_file.trim_end_matches(".png").to_string(),
            width,
            height,
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            rot,
            trans: Vec3::new(t[0], t[1], t[2]),
        });
        files.push((ln_name, dir.join(&img_file)));
    }

    let mut images = Vec::with_capacity(cameras.len());
    for (cam, (_, path)) in cameras.iter().zip(&files) {
        let (w, h, img) =
            read_png(path).map_err(|_| SceneError::MissingImage(path.display().to_string()))?;
        if (w, h) != (cam.width, cam.height) {
            return Err(SceneError::Parse {
                line: 0,
                msg: format!(
                    "{}: image is {w}x{h} but cameras.txt says {}x{}",
                    path.display(),
                    cam.width,
                    cam.height
                ),
            });
        }
        images.push(img);
    }

    let transform = normalizing_transform(&cameras);
    let cameras = cameras.iter().map(|c| apply_transform(c, &transform)).collect();
    Ok(Dataset { cameras, images, gt: None, transform })
}

// ---------------------------------------------------------------------------
// Metrics.

/// Uniform grid over a point set answering nearest-neighbor queries.
pub struct PointGrid {
    points: Vec<Vec3>,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    origin: Vec3,
    cell: f64,
    span: (i64, i64, i64),
}

impl PointGrid {
    pub fn build(points: Vec<Vec3>) -> PointGrid {
        assert!(!points.is_empty());
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-9);
        let per_axis = (points.len() as f64 / 4.0).cbrt().ceil().max(1.0);
        let cell = extent / per_axis;
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let key = |p: &Vec3| {
            (
                ((p.x - lo.x) / cell).floor() as i64,
                ((p.y - lo.y) / cell).floor() as i64,
                ((p.z - lo.z) / cell).floor() as i64,
            )
        };
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p)).or_default().push(i as u32);
        }
        let span = key(&hi);
        PointGrid { points, cells, origin: lo, cell, span }
    }

    /// Index and distance of the nearest stored point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        // Ring search around the occupied cell nearest the query.  For a
        // query inside the grid that is its own cell; far-away queries are
        // clamped so the search only ever walks occupied territory.
        let qc = (
            (((q.x - self.origin.x) / self.cell).floor() as i64).clamp(0, self.span.0),
            (((q.y - self.origin.y) / self.cell).floor() as i64).clamp(0, self.span.1),
            (((q.z - self.origin.z) / self.cell).floor() as i64).clamp(0, self.span.2),
        );
        // Distance from the query to its (clamped) home cell's box: the ring
        // bound below must allow for it.
        let mut d_box2 = 0.0;
        for (qa, (oa, ca)) in [q.x, q.y, q.z]
            .iter()
            .zip([(self.origin.x, qc.0), (self.origin.y, qc.1), (self.origin.z, qc.2)])
        {
            let lo = oa + ca as f64 * self.cell;
            let gap = (lo - qa).max(qa - (lo + self.cell)).max(0.0);
            d_box2 += gap * gap;
        }
        let d_box = d_box2.sqrt();
        let max_ring = qc.0.max(self.span.0 - qc.0)
            .max(qc.1.max(self.span.1 - qc.1))
            .max(qc.2.max(self.span.2 - qc.2));
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=max_ring {
            // Any point in a cell on this ring is at least
            // (ring-1)*cell - d_box away from the query; once that exceeds
            // the best distance, no farther ring can win.
            if best.1.is_finite() && (ring - 1) as f64 * self.cell - d_box > best.1 {
                break;
            }
            for dz in (-ring).max(-qc.2)..=ring.min(self.span.2 - qc.2) {
                for dy in (-ring).max(-qc.1)..=ring.min(self.span.1 - qc.1) {
                    for dx in (-ring).max(-qc.0)..=ring.min(self.span.0 - qc.0) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&(qc.0 + dx, qc.1 + dy, qc.2 + dz))
                        else {
                            continue;
                        };
                        for &i in ids {
                            let d = (self.points[i as usize] - q).norm();
                            if d < best.1 {
                                best = (i as usize, d);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Exact distance from `p` to triangle `abc` (closest-feature cases), with a
/// segment fallback for degenerate triangles.
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (p - a).norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (p - b).norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (p - c).norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = va + vb + vc;
    if denom <= 0.0 || !denom.is_finite() {
        // Degenerate (collinear) triangle: nearest point lies on an edge.
        let seg = |a: &Vec3, b: &Vec3| {
            let ab = b - a;
            let t = (ab.dot(&(p - a)) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
            (p - (a + ab * t)).norm()
        };
        return seg(a, b).min(seg(a, c)).min(seg(b, c));
    }
    let v = vb / denom;
    let w = vc / denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Uniform grid over a mesh's triangles answering point-to-surface distance
/// queries.
pub struct TriangleGrid<'a> {
    mesh: &'a TriMesh,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    origin: Vec3,
    cell: f64,
    span: (i64, i64, i64),
}

impl<'a> TriangleGrid<'a> {
    pub fn build(mesh: &'a TriMesh) -> Result<TriangleGrid<'a>, SceneError> {
        if mesh.triangles.is_empty() {
            return Err(SceneError::EmptyMesh);
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &mesh.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-9);
        let per_axis = (mesh.triangles.len() as f64 / 4.0).cbrt().ceil().max(1.0);
        let cell = extent / per_axis;
        let index = |v: f64, o: f64| ((v - o) / cell).floor() as i64;
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let mut tlo = Vec3::repeat(f64::INFINITY);
            let mut thi = Vec3::repeat(f64::NEG_INFINITY);
            for &v in tri {
                tlo = tlo.inf(&mesh.positions[v as usize]);
                thi = thi.sup(&mesh.positions[v as usize]);
            }
            for iz in index(tlo.z, lo.z)..=index(thi.z, lo.z) {
                for iy in index(tlo.y, lo.y)..=index(thi.y, lo.y) {
                    for ix in index(tlo.x, lo.x)..=index(thi.x, lo.x) {
                        cells.entry((ix, iy, iz)).or_default().push(t as u32);
                    }
                }
            }
        }
        let span = (index(hi.x, lo.x), index(hi.y, lo.y), index(hi.z, lo.z));
        Ok(TriangleGrid { mesh, cells, origin: lo, cell, span })
    }

    /// Distance from `q` to the nearest point of the mesh surface.
    pub fn distance(&self, q: &Vec3) -> f64 {
        let qc = (
            (((q.x - self.origin.x) / self.cell).floor() as i64).clamp(0, self.span.0),
            (((q.y - self.origin.y) / self.cell).floor() as i64).clamp(0, self.span.1),
            (((q.z - self.origin.z) / self.cell).floor() as i64).clamp(0, self.span.2),
        );
        let mut d_box2 = 0.0;
        for (qa, (oa, ca)) in [q.x, q.y, q.z]
            .iter()
            .zip([(self.origin.x, qc.0), (self.origin.y, qc.1), (self.origin.z, qc.2)])
        {
            let lo = oa + ca as f64 * self.cell;
            let gap = (lo - qa).max(qa - (lo + self.cell)).max(0.0);
            d_box2 += gap * gap;
        }
        let d_box = d_box2.sqrt();
        let max_ring = qc.0.max(self.span.0 - qc.0)
            .max(qc.1.max(self.span.1 - qc.1))
            .max(qc.2.max(self.span.2 - qc.2));
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // A triangle first listed on this ring has its closest point in
            // a ring-or-farther cell (overlapping cells all list it), hence
            // at least (ring-1)*cell - d_box from the query.
            if best.is_finite() && (ring - 1) as f64 * self.cell - d_box > best {
                break;
            }
            for dz in (-ring).max(-qc.2)..=ring.min(self.span.2 - qc.2) {
                for dy in (-ring).max(-qc.1)..=ring.min(self.span.1 - qc.1) {
                    for dx in (-ring).max(-qc.0)..=ring.min(self.span.0 - qc.0) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&(qc.0 + dx, qc.1 + dy, qc.2 + dz))
                        else {
                            continue;
                        };
                        for &t in ids {
                            let [a, b, c] = self.mesh.triangles[t as usize];
                            let d = point_triangle_distance(
                                q,
                                &self.mesh.positions[a as usize],
                                &self.mesh.positions[b as usize],
                                &self.mesh.positions[c as usize],
                            );
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// `n` area-weighted uniform samples of the mesh surface.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Vec3>, SceneError> {
    if mesh.triangles.is_empty() {
        return Err(SceneError::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += 0.5 * mesh.face_normal_raw(t).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(SceneError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random_range(0.0..total);
        let t = cumulative.partition_point(|&c| c <= pick).min(mesh.triangles.len() - 1);
        let [a, b, c] = mesh.triangles[t];
        let (pa, pb, pc) = (
            mesh.positions[a as usize],
            mesh.positions[b as usize],
            mesh.positions[c as usize],
        );
        let mut u: f64 = rng.random_range(0.0..1.0);
        let mut v: f64 = rng.random_range(0.0..1.0);
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push(pa + (pb - pa) * u + (pc - pa) * v);
    }
    Ok(out)
}

/// Symmetric Chamfer distance between two point sets:
/// `0.5 * (mean nearest a->b + mean nearest b->a)`.
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let one_way = |from: &[Vec3], to: &[Vec3]| {
        let grid = PointGrid::build(to.to_vec());
        let dists: Vec<f64> = from.par_iter().map(|p| grid.nearest(p).1).collect();
        dists.iter().sum::<f64>() / dists.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

pub const CHAMFER_SAMPLES: usize = 100_000;

/// Chamfer distance between two meshes over [`CHAMFER_SAMPLES`] area-weighted
/// samples per side.
pub fn chamfer_meshes(a: &TriMesh, b: &TriMesh, seed: u64) -> Result<f64, SceneError> {
    let sa = sample_surface(a, CHAMFER_SAMPLES, seed)?;
    let sb = sample_surface(b, CHAMFER_SAMPLES, seed ^ 0x9e37_79b9)?;
    Ok(chamfer_points(&sa, &sb))
}

/// Chamfer distance between a mesh and an analytic reference surface given a
/// precomputed sampling of that surface.  Both halves measure true
/// point-to-surface distance: mesh samples -> reference via the exact
/// analytic distance, reference samples -> mesh via point-to-triangle
/// queries, so neither half carries a point-sampling floor.
pub fn chamfer_mesh_vs_reference(
    mesh: &TriMesh,
    sdf: &AnalyticSdf,
    ref_samples: &[Vec3],
    seed: u64,
) -> Result<f64, SceneError> {
    let samples = sample_surface(mesh, CHAMFER_SAMPLES, seed)?;
    let to_ref: f64 =
        samples.par_iter().map(|p| sdf.eval(p).abs()).sum::<f64>() / samples.len() as f64;
    let grid = TriangleGrid::build(mesh)?;
    let to_mesh: f64 = ref_samples.par_iter().map(|p| grid.distance(p)).sum::<f64>()
        / ref_samples.len() as f64;
    Ok(0.5 * (to_ref + to_mesh))
}

/// Sampling of an analytic surface for [`chamfer_mesh_vs_reference`]: a
/// densely extracted reference mesh spreads samples area-uniformly, then
/// each sample is projected onto the exact zero set so the reference carries
/// no discretization error of its own.
pub fn reference_samples(
    sdf: &AnalyticSdf,
    bounds: (Vec3, Vec3),
    seed: u64,
) -> Result<Vec<Vec3>, SceneError> {
    let reference = dense_reference_mesh(sdf, bounds, 96);
    let mut samples = sample_surface(&reference, CHAMFER_SAMPLES, seed ^ 0x9e37_79b9)?;
    samples.par_iter_mut().for_each(|p| {
        for _ in 0..3 {
            let f = sdf.eval(p);
            if f.abs() < 1e-12 {
                break;
            }
            *p -= sdf.normal(p) * f;
        }
    });
    Ok(samples)
}

/// Chamfer distance between a mesh and an analytic reference surface.
pub fn chamfer_mesh_sdf(
    mesh: &TriMesh,
    sdf: &AnalyticSdf,
    bounds: (Vec3, Vec3),
    seed: u64,
) -> Result<f64, SceneError> {
    chamfer_mesh_vs_reference(mesh, sdf, &reference_samples(sdf, bounds, seed)?, seed)
}

/// Extract the analytic surface on a dense structured grid (ground truth for
/// sampling; the min-union field is exact on each primitive away from
/// seams).
pub fn dense_reference_mesh(sdf: &AnalyticSdf, bounds: (Vec3, Vec3), res: u32) -> TriMesh {
    let complex = TetComplex::structured(bounds.0, bounds.1, res);
    let values: Vec<f64> = complex.vertices.iter().map(|p| sdf.eval(p)).collect();
    crate::mesh::marching_tets(&complex, &values)
}

/// Peak signal-to-noise ratio in dB over all pixels and channels.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let mut mse = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (3 * a.len()) as f64;
    -10.0 * mse.max(1e-300).log10()
}

// ---------------------------------------------------------------------------
// Built-in presets.

pub struct ScenePreset {
    pub name: &'static str,
    pub sdf: AnalyticSdf,
    pub background: [f64; 3],
}

/// Built-in synthetic scenes.  All fit inside [-0.7, 0.7]^3 so the default
/// [-1, 1]^3 solve bounds enclose them with margin.
pub fn preset(name: &str) -> Option<ScenePreset> {
    let background = [0.05, 0.05, 0.08];
    let sdf = match name {
        "sphere" => AnalyticSdf::sphere(Vec3::zeros(), 0.5, [0.85, 0.45, 0.3]),
        "box" => AnalyticSdf {
            parts: vec![(
                Primitive::Box { center: Vec3::zeros(), half: Vec3::new(0.35, 0.35, 0.35) },
                [0.3, 0.55, 0.85],
            )],
        },
        "torus" => AnalyticSdf {
            parts: vec![(
                Primitive::Torus { center: Vec3::zeros(), major: 0.45, minor: 0.18 },
                [0.75, 0.7, 0.3],
            )],
        },
        "spherebox" => AnalyticSdf {
            parts: vec![
                (
                    Primitive::Sphere { center: Vec3::new(-0.28, 0.0, 0.08), radius: 0.32 },
                    [0.85, 0.45, 0.3],
                ),
                (
                    Primitive::Box {
                        center: Vec3::new(0.3, 0.0, -0.12),
                        half: Vec3::new(0.24, 0.24, 0.24),
                    },
                    [0.3, 0.55, 0.85],
                ),
            ],
        },
        _ => return None,
    };
    Some(ScenePreset { name: Box::leak(name.to_string().into_boxed_str()), sdf, background })
}

/// Default orbit for preset scenes: `n` cameras at radius 2.5, elevation
/// 20 degrees, focal 1.5x the image width.
pub fn preset_rig(n: usize, width: u32, height: u32) -> Result<Vec<Camera>, SceneError> {
    camera_rig(n, 2.5, 20.0, Vec3::zeros(), width, height, 1.5 * width as f64)
}
