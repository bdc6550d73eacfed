//! Parameter blocks, a bias-corrected adaptive-moment optimizer, versioned
//! binary checkpoints, the per-view forward/backward pipeline, the training
//! loop (render → extract → losses → backward → step → adapt), and the
//! finite-difference gradient harness.

use std::collections::HashMap;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapt::{cull_flags, densify, idle_vertices, prune_idle, ContributionStats, ErrorStats};
use crate::field::{AppearanceField, SdfField, Sharpness};
use crate::geometry::{GeometryError, TetComplex, VertexId};
use crate::losses::{
    loss_field_reg_signed, loss_mesh, loss_nd, loss_rgb, LossReport, LossTerms, LossWeights,
};
use crate::mesh::raycast::{build_maps, maps_backward, Bvh, MeshMaps, NO_HIT};
use crate::mesh::{marching_tets, provenance_backward, TriMesh};
use crate::render::backward::{render_backward, PixelGrads, SegmentRecord};
use crate::render::{render_view, Camera, Model, RenderCache, RenderError, RenderOptions};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("shape mismatch in block `{block}`: {expected} parameters vs {got} gradients")]
    ShapeMismatch { block: &'static str, expected: usize, got: usize },
    #[error("non-finite loss at iteration {iteration} (diagnostic checkpoint {checkpoint:?})")]
    NanLoss { iteration: u64, checkpoint: Option<PathBuf> },
    #[error("training needs at least one camera/image pair")]
    EmptyDataset,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Parameter and gradient blocks.

/// Learning-rate multiplier per parameter block.
#[derive(Debug, Clone, Copy)]
pub struct BlockLrs {
    pub sdf: f64,
    pub appearance: f64,
    pub log_s: f64,
}

impl Default for BlockLrs {
    fn default() -> Self {
        BlockLrs { sdf: 1e-3, appearance: 2.5e-3, log_s: 1e-3 }
    }
}

/// Gradients of the total objective w.r.t. every optimizable parameter.
pub struct GradSet {
    /// Per grid vertex, parallel to `model.sdf.values`.
    pub sdf: Vec<f64>,
    /// Parallel to `model.appearance.data`.
    pub appearance: Vec<f64>,
    pub log_s: f64,
}

impl GradSet {
    pub fn zeros(model: &Model) -> GradSet {
        GradSet {
            sdf: vec![0.0; model.sdf.values.len()],
            appearance: vec![0.0; model.appearance.data.len()],
            log_s: 0.0,
        }
    }
}

/// First and second moment estimates per block, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_sdf: Vec<f64>,
    pub v_sdf: Vec<f64>,
    pub m_app: Vec<f64>,
    pub v_app: Vec<f64>,
    pub m_log_s: f64,
    pub v_log_s: f64,
    /// Completed steps; the next step uses `t + 1` for bias correction.
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        AdamState {
            m_sdf: vec![0.0; model.sdf.values.len()],
            v_sdf: vec![0.0; model.sdf.values.len()],
            m_app: vec![0.0; model.appearance.data.len()],
            v_app: vec![0.0; model.appearance.data.len()],
            m_log_s: 0.0,
            v_log_s: 0.0,
            t: 0,
        }
    }

    /// Carry moments across a topology edit: surviving vertices keep theirs
    /// via the id map, new vertices start at zero.  Per-tet appearance has
    /// no id mapping across a re-tetrahedralization, so its moments reset.
    pub fn remap(
        &self,
        old_to_new: &[Option<VertexId>],
        n_sdf: usize,
        n_appearance: usize,
    ) -> AdamState {
        let mut next = AdamState {
            m_sdf: vec![0.0; n_sdf],
            v_sdf: vec![0.0; n_sdf],
            m_app: vec![0.0; n_appearance],
            v_app: vec![0.0; n_appearance],
            m_log_s: self.m_log_s,
            v_log_s: self.v_log_s,
            t: self.t,
        };
        for (old, maybe_new) in old_to_new.iter().enumerate() {
            if let Some(nv) = maybe_new {
                next.m_sdf[*nv as usize] = self.m_sdf[old];
                next.v_sdf[*nv as usize] = self.v_sdf[old];
            }
        }
        next
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn adam_block(
    block: &'static str,
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    t: u64,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(OptimError::ShapeMismatch { block, expected: params.len(), got: grads.len() });
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One bias-corrected adaptive-moment update over all blocks.  `state.t`
/// advances by one; learning rates are per block.
pub fn adam_step(
    model: &mut Model,
    grads: &GradSet,
    state: &mut AdamState,
    lrs: &BlockLrs,
) -> Result<(), OptimError> {
    state.t += 1;
    let t = state.t;
    adam_block("sdf", &mut model.sdf.values, &grads.sdf, &mut state.m_sdf, &mut state.v_sdf, lrs.sdf, t)?;
    adam_block(
        "appearance",
        &mut model.appearance.data,
        &grads.appearance,
        &mut state.m_app,
        &mut state.v_app,
        lrs.appearance,
        t,
    )?;
    let mut p = [model.sharpness.log_s];
    let mut sm = [state.m_log_s];
    let mut sv = [state.v_log_s];
    adam_block("log_s", &mut p, &[grads.log_s], &mut sm, &mut sv, lrs.log_s, t)?;
    model.sharpness.log_s = p[0];
    state.m_log_s = sm[0];
    state.v_log_s = sv[0];
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSDF";
pub const CHECKPOINT_VERSION: u32 = 1;

struct BlockWriter {
    buf: Vec<u8>,
}

impl BlockWriter {
    fn new() -> BlockWriter {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        BlockWriter { buf }
    }

    fn block(&mut self, name: &str, payload: &[u8]) {
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }
}

fn pack_f64s(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn pack_u32s(values: impl IntoIterator<Item = u32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct BlockReader {
    blocks: HashMap<String, Vec<u8>>,
}

impl BlockReader {
    fn parse(bytes: &[u8]) -> Result<BlockReader, OptimError> {
        let bad = |msg: &str| OptimError::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing TSDF magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(OptimError::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let mut blocks = HashMap::new();
        let mut at = 8usize;
        while at < bytes.len() {
            if at + 4 > bytes.len() {
                return Err(bad("truncated block name length"));
            }
            let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            at += 4;
            if at + name_len + 8 > bytes.len() {
                return Err(bad("truncated block header"));
            }
            let name = std::str::from_utf8(&bytes[at..at + name_len])
                .map_err(|_| bad("block name is not utf-8"))?
                .to_string();
            at += name_len;
            let len = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
            at += 8;
            if at + len > bytes.len() {
                return Err(OptimError::CorruptCheckpoint(format!("block `{name}` truncated")));
            }
            blocks.insert(name, bytes[at..at + len].to_vec());
            at += len;
        }
        Ok(BlockReader { blocks })
    }

    fn get(&self, name: &str) -> Result<&[u8], OptimError> {
        self.blocks
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| OptimError::CorruptCheckpoint(format!("missing block `{name}`")))
    }

    fn f64s(&self, name: &str) -> Result<Vec<f64>, OptimError> {
        let b = self.get(name)?;
        if b.len() % 8 != 0 {
            return Err(OptimError::CorruptCheckpoint(format!("block `{name}` has odd length")));
        }
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&self, name: &str) -> Result<Vec<u32>, OptimError> {
        let b = self.get(name)?;
        if b.len() % 4 != 0 {
            return Err(OptimError::CorruptCheckpoint(format!("block `{name}` has odd length")));
        }
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u64_scalar(&self, name: &str) -> Result<u64, OptimError> {
        let b = self.get(name)?;
        if b.len() != 8 {
            return Err(OptimError::CorruptCheckpoint(format!("block `{name}` is not a u64")));
        }
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// A full project save: grid, fields, and optimizer state.
pub struct Checkpoint {
    pub model: Model,
    pub state: AdamState,
    /// Completed training iterations at save time.
    pub iteration: u64,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), OptimError> {
    let model = &ckpt.model;
    let mut w = BlockWriter::new();
    w.block(
        "grid/vertices",
        &pack_f64s(model.complex.vertices.iter().flat_map(|p| [p.x, p.y, p.z])),
    );
    w.block("grid/tets", &pack_u32s(model.complex.tets.iter().flat_map(|t| t.v)));
    w.block("grid/neighbors", &pack_u32s(model.complex.tets.iter().flat_map(|t| t.nbr)));
    w.block("grid/generation", &model.complex.generation.to_le_bytes());
    w.block("field/sdf", &pack_f64s(model.sdf.values.iter().copied()));
    w.block("field/sh_degree", &pack_u32s([model.appearance.sh_degree]));
    w.block("field/appearance", &pack_f64s(model.appearance.data.iter().copied()));
    w.block(
        "field/anchors",
        &pack_f64s(model.appearance.anchors.iter().flat_map(|p| [p.x, p.y, p.z])),
    );
    w.block("field/log_s", &model.sharpness.log_s.to_le_bytes());
    w.block("model/background", &pack_f64s(model.background));
    w.block("optim/t", &ckpt.state.t.to_le_bytes());
    w.block("optim/m_sdf", &pack_f64s(ckpt.state.m_sdf.iter().copied()));
    w.block("optim/v_sdf", &pack_f64s(ckpt.state.v_sdf.iter().copied()));
    w.block("optim/m_app", &pack_f64s(ckpt.state.m_app.iter().copied()));
    w.block("optim/v_app", &pack_f64s(ckpt.state.v_app.iter().copied()));
    w.block("optim/m_log_s", &ckpt.state.m_log_s.to_le_bytes());
    w.block("optim/v_log_s", &ckpt.state.v_log_s.to_le_bytes());
    w.block("train/iteration", &ckpt.iteration.to_le_bytes());
    std::fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, OptimError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let r = BlockReader::parse(&bytes)?;
    let bad = |msg: String| OptimError::CorruptCheckpoint(msg);

    let vs = r.f64s("grid/vertices")?;
    if vs.len() % 3 != 0 {
        return Err(bad("vertex block length not a multiple of 3".into()));
    }
    let vertices: Vec<Vec3> =
        vs.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let tv = r.u32s("grid/tets")?;
    let tn = r.u32s("grid/neighbors")?;
    if tv.len() % 4 != 0 || tn.len() != tv.len() {
        return Err(bad("tet blocks disagree".into()));
    }
    let tets = tv
        .chunks_exact(4)
        .zip(tn.chunks_exact(4))
        .map(|(v, n)| crate::geometry::Tetrahedron {
            v: [v[0], v[1], v[2], v[3]],
            nbr: [n[0], n[1], n[2], n[3]],
        })
        .collect();
    let complex =
        TetComplex { vertices, tets, generation: r.u64_scalar("grid/generation")? };
    complex.validate().map_err(|e| bad(format!("grid does not validate: {e}")))?;

    let sdf = SdfField::new(r.f64s("field/sdf")?, complex.generation);
    let sh = r.u32s("field/sh_degree")?;
    if sh.len() != 1 {
        return Err(bad("sh_degree block malformed".into()));
    }
    let anchors_flat = r.f64s("field/anchors")?;
    let appearance = AppearanceField {
        sh_degree: sh[0],
        data: r.f64s("field/appearance")?,
        anchors: anchors_flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        generation: complex.generation,
    };
    let log_s = r.f64s("field/log_s")?;
    let bg = r.f64s("model/background")?;
    if log_s.len() != 1 || bg.len() != 3 {
        return Err(bad("scalar blocks malformed".into()));
    }
    let model = Model {
        complex,
        sdf,
        appearance,
        sharpness: Sharpness { log_s: log_s[0] },
        background: [bg[0], bg[1], bg[2]],
    };
    model.check_generations().map_err(|e| bad(format!("{e}")))?;
    let m_log_s = r.f64s("optim/m_log_s")?;
    let v_log_s = r.f64s("optim/v_log_s")?;
    if m_log_s.len() != 1 || v_log_s.len() != 1 {
        return Err(bad("optimizer scalar blocks malformed".into()));
    }
    let state = AdamState {
        m_sdf: r.f64s("optim/m_sdf")?,
        v_sdf: r.f64s("optim/v_sdf")?,
        m_app: r.f64s("optim/m_app")?,
        v_app: r.f64s("optim/v_app")?,
        m_log_s: m_log_s[0],
        v_log_s: v_log_s[0],
        t: r.u64_scalar("optim/t")?,
    };
    if state.m_sdf.len() != model.sdf.values.len() || state.m_app.len() != model.appearance.data.len()
    {
        return Err(bad("optimizer state shapes disagree with the fields".into()));
    }
    Ok(Checkpoint { model, state, iteration: r.u64_scalar("train/iteration")? })
}

// ---------------------------------------------------------------------------
// One-view forward/backward pipeline.

/// Everything one training view produced: loss terms, the rendered maps, the
/// extracted mesh and its rasterized maps, per-pixel color residual, and
/// (optionally) the per-segment records for adaptation statistics.
pub struct ViewEval {
    pub terms: LossTerms,
    pub out: crate::render::RenderOutput,
    pub mesh: TriMesh,
    pub maps: MeshMaps,
    /// Mean absolute color error per pixel.
    pub residual: Vec<f64>,
    pub segments: Option<Vec<SegmentRecord>>,
    /// Kink signature of the field regularizers (see
    /// [`loss_field_reg_signed`]).
    pub field_signature: Vec<i8>,
}

fn empty_maps(cam: &Camera) -> MeshMaps {
    let n = (cam.width * cam.height) as usize;
    MeshMaps {
        width: cam.width,
        height: cam.height,
        depth: vec![0.0; n],
        normal: vec![[0.0; 3]; n],
        tri: vec![NO_HIT; n],
        bary: vec![[0.0; 3]; n],
    }
}

/// Render one view, extract the mesh, evaluate every loss term, and (when
/// `grads` is given) push all adjoints back onto the parameter blocks.
pub fn evaluate_view(
    model: &Model,
    cache: &RenderCache,
    cam: &Camera,
    reference: &[[f64; 3]],
    weights: &LossWeights,
    cull: Option<&[bool]>,
    collect_segments: bool,
    mut grads: Option<&mut GradSet>,
) -> Result<ViewEval, OptimError> {
    let opts = RenderOptions { cull };
    let out = render_view(model, cache, cam, &opts)?;
    let mesh = marching_tets(&model.complex, &model.sdf.values);
    let maps = if mesh.triangles.is_empty() {
        empty_maps(cam)
    } else {
        let bvh = Bvh::build(&mesh);
        build_maps(&mesh, &bvh, cam)
    };

    let n = (cam.width * cam.height) as usize;
    let mut pixel = PixelGrads::zeros(cam.width, cam.height);
    let mut d_mesh_depth = vec![0.0; n];
    let mut d_mesh_normal = vec![[0.0; 3]; n];
    let mut d_values_scratch;
    let d_values: &mut [f64] = match grads.as_deref_mut() {
        Some(g) => &mut g.sdf,
        None => {
            d_values_scratch = vec![0.0; model.sdf.values.len()];
            &mut d_values_scratch
        }
    };

    let (rgb_l1, rgb_ssim) =
        loss_rgb(&out.color, reference, cam.width, cam.height, weights.ssim, 1.0, &mut pixel);
    let (mesh_depth, mesh_normal) = loss_mesh(
        &out,
        &maps,
        weights.mesh * weights.md,
        weights.mesh * weights.mn,
        &mut pixel,
        &mut d_mesh_depth,
        &mut d_mesh_normal,
    );
    let nd = loss_nd(&out, cam, weights.field * weights.nd, &mut pixel);
    let mut field_signature = Vec::with_capacity(model.complex.n_vertices());
    let (eik, curv) = loss_field_reg_signed(
        &model.complex,
        &model.sdf,
        weights.field * weights.eik,
        weights.field * weights.curv,
        d_values,
        Some(&mut field_signature),
    );

    let mut segments = None;
    if let Some(g) = grads {
        let (render_grads, segs) =
            render_backward(model, cache, cam, &opts, &pixel, collect_segments)?;
        for (dst, src) in g.sdf.iter_mut().zip(&render_grads.sdf) {
            *dst += src;
        }
        for (dst, src) in g.appearance.iter_mut().zip(&render_grads.appearance) {
            *dst += src;
        }
        g.log_s += render_grads.log_s;
        segments = segs;
        if !mesh.triangles.is_empty() {
            let d_positions = maps_backward(&mesh, cam, &maps, &d_mesh_depth, &d_mesh_normal);
            provenance_backward(&model.complex, &mesh, &d_positions, &mut g.sdf);
        }
    }

    let residual = out
        .color
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            ((c[0] - r[0]).abs() + (c[1] - r[1]).abs() + (c[2] - r[2]).abs()) / 3.0
        })
        .collect();

    Ok(ViewEval {
        terms: LossTerms { rgb_l1, rgb_ssim, mesh_depth, mesh_normal, nd, eik, curv },
        out,
        mesh,
        maps,
        residual,
        segments,
        field_signature,
    })
}

// ---------------------------------------------------------------------------
// Training loop.

/// When each maintenance action runs.  Intervals are in iterations; windows
/// are inclusive iteration ranges (1-based, checked at the end of each
/// iteration).
#[derive(Debug, Clone)]
pub struct Schedule {
    pub iterations: u64,
    pub densify_interval: u64,
    pub densify_window: (u64, u64),
    pub prune_interval: u64,
    pub prune_window: (u64, u64),
    pub cull_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 18_000,
            densify_interval: 500,
            densify_window: (2_000, 16_000),
            prune_interval: 500,
            prune_window: (4_000, 15_000),
            cull_interval: 100,
            checkpoint_interval: 1_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), OptimError> {
        let complain = |msg: String| Err(OptimError::InvalidSchedule(msg));
        for (what, v) in [
            ("densify interval", self.densify_interval),
            ("prune interval", self.prune_interval),
            ("cull interval", self.cull_interval),
            ("checkpoint interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return complain(format!("{what} must be positive"));
            }
        }
        for (what, (lo, hi)) in
            [("densify", self.densify_window), ("prune", self.prune_window)]
        {
            if lo > hi {
                return complain(format!("{what} window is empty ({lo} > {hi})"));
            }
            if self.iterations > 0 && hi > self.iterations {
                return complain(format!(
                    "{what} window ends at {hi}, beyond the {} total iterations",
                    self.iterations
                ));
            }
        }
        Ok(())
    }

    fn due(k: u64, interval: u64, window: (u64, u64)) -> bool {
        k % interval == 0 && k >= window.0 && k <= window.1
    }
}

pub struct TrainSetup {
    pub model: Model,
    pub cameras: Vec<Camera>,
    pub images: Vec<Vec<[f64; 3]>>,
    pub weights: LossWeights,
    pub lrs: BlockLrs,
    pub schedule: Schedule,
    pub seed: u64,
    pub densify_enabled: bool,
    pub prune_enabled: bool,
    /// Fraction of tets densified per event (per pass).
    pub densify_fraction: f64,
    /// Contribution threshold below which an idle vertex may be pruned.
    pub tau_c: f64,
    /// Where checkpoints and the loss log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

impl TrainSetup {
    pub fn new(model: Model, cameras: Vec<Camera>, images: Vec<Vec<[f64; 3]>>) -> TrainSetup {
        TrainSetup {
            model,
            cameras,
            images,
            weights: LossWeights::default(),
            lrs: BlockLrs::default(),
            schedule: Schedule::default(),
            seed: 1,
            densify_enabled: true,
            prune_enabled: true,
            densify_fraction: 0.05,
            tau_c: 0.01,
            out_dir: None,
        }
    }
}

pub struct TrainResult {
    pub model: Model,
    pub state: AdamState,
    pub mesh: TriMesh,
    pub log: Vec<LossReport>,
}

/// Fit the model to the posed images.  Per iteration: render one view
/// (round-robin over a seeded per-epoch shuffle), extract the mesh, evaluate
/// the full objective, backpropagate, step; on schedule refresh cull flags,
/// densify, prune, and checkpoint.  Non-finite losses abort with a
/// diagnostic checkpoint.
pub fn train(setup: TrainSetup) -> Result<TrainResult, OptimError> {
    let TrainSetup {
        mut model,
        cameras,
        images,
        weights,
        lrs,
        schedule,
        seed,
        densify_enabled,
        prune_enabled,
        densify_fraction,
        tau_c,
        out_dir,
    } = setup;
    schedule.validate()?;
    if cameras.is_empty() || cameras.len() != images.len() {
        return Err(OptimError::EmptyDataset);
    }
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = match &out_dir {
        Some(dir) => {
            let f = std::fs::File::create(dir.join("loss_log.csv"))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LossReport::csv_header())?;
            Some(w)
        }
        None => None,
    };

    let mut state = AdamState::new(&model);
    let mut contribution = ContributionStats::new(model.complex.n_tets());
    let mut errors = ErrorStats::new(model.complex.n_tets());
    let mut cull = cull_flags(&model.complex, &model.sdf, model.sharpness.s());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    order.shuffle(&mut rng);
    let mut log = Vec::with_capacity(schedule.iterations as usize);

    for i in 0..schedule.iterations {
        let k = i + 1; // 1-based schedule clock
        let at_epoch_start = i as usize % cameras.len();
        if i > 0 && at_epoch_start == 0 {
            order.shuffle(&mut rng);
        }
        let view = order[at_epoch_start];
        let cam = &cameras[view];

        if i > 0 && i % schedule.cull_interval == 0 {
            cull = cull_flags(&model.complex, &model.sdf, model.sharpness.s());
        }
        let cache = RenderCache::build(&model);
        let mut grads = GradSet::zeros(&model);
        let eval = evaluate_view(
            &model,
            &cache,
            cam,
            &images[view],
            &weights,
            Some(&cull),
            true,
            Some(&mut grads),
        )?;
        let report = LossReport::new(i, eval.terms, &weights);
        if !report.total.is_finite() {
            let checkpoint = out_dir.as_ref().map(|d| d.join("diagnostic_nan.tsdf"));
            if let Some(path) = &checkpoint {
                save_checkpoint(path, &Checkpoint { model, state, iteration: i })?;
            }
            return Err(OptimError::NanLoss { iteration: i, checkpoint });
        }
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", report.csv_line())?;
        }
        log.push(report);

        if let Some(records) = &eval.segments {
            contribution.observe(records);
            errors.observe_view(cam, records, &eval.residual);
        }
        adam_step(&mut model, &grads, &mut state, &lrs)?;
        if model
            .sdf
            .values
            .iter()
            .chain(&model.appearance.data)
            .chain(std::iter::once(&model.sharpness.log_s))
            .any(|v| !v.is_finite())
        {
            let checkpoint = out_dir.as_ref().map(|d| d.join("diagnostic_nan.tsdf"));
            if let Some(path) = &checkpoint {
                save_checkpoint(path, &Checkpoint { model, state, iteration: i })?;
            }
            return Err(OptimError::NanLoss { iteration: i, checkpoint });
        }

        let densify_due =
            densify_enabled && Schedule::due(k, schedule.densify_interval, schedule.densify_window);
        let prune_due =
            prune_enabled && Schedule::due(k, schedule.prune_interval, schedule.prune_window);
        if densify_due || prune_due {
            // Stats were recorded against the current grid, so make both
            // decisions now: the idle mask is per vertex and vertex ids
            // survive the insertions below (vertices past its end count
            // busy, exempting the newcomers).
            let idle = prune_due.then(|| idle_vertices(&model.complex, &contribution, tau_c));
            if densify_due {
                let adapted = densify(
                    &model.complex,
                    &model.sdf,
                    &model.appearance,
                    Some(&errors),
                    densify_fraction,
                )?;
                if adapted.changed > 0 {
                    state = state.remap(
                        &adapted.old_to_new,
                        adapted.sdf.values.len(),
                        adapted.appearance.data.len(),
                    );
                    model.complex = adapted.complex;
                    model.sdf = adapted.sdf;
                    model.appearance = adapted.appearance;
                }
            }
            if let Some(idle) = idle {
                let adapted = prune_idle(
                    &model.complex,
                    &model.sdf,
                    &model.appearance,
                    &idle,
                    model.sharpness.s(),
                )?;
                if adapted.changed > 0 {
                    state = state.remap(
                        &adapted.old_to_new,
                        adapted.sdf.values.len(),
                        adapted.appearance.data.len(),
                    );
                    model.complex = adapted.complex;
                    model.sdf = adapted.sdf;
                    model.appearance = adapted.appearance;
                }
            }
            contribution = ContributionStats::new(model.complex.n_tets());
            errors = ErrorStats::new(model.complex.n_tets());
            cull = cull_flags(&model.complex, &model.sdf, model.sharpness.s());
        }

        if k % schedule.checkpoint_interval == 0 {
            if let Some(dir) = &out_dir {
                save_checkpoint(
                    &dir.join(format!("checkpoint_{k:06}.tsdf")),
                    &Checkpoint { model: model.clone_shallow(), state: state.clone(), iteration: k },
                )?;
            }
        }
    }

    if let Some(mut w) = log_file {
        w.flush()?;
    }
    let mesh = marching_tets(&model.complex, &model.sdf.values);
    if let Some(dir) = &out_dir {
        save_checkpoint(
            &dir.join("final.tsdf"),
            &Checkpoint {
                model: model.clone_shallow(),
                state: state.clone(),
                iteration: schedule.iterations,
            },
        )?;
    }
    Ok(TrainResult { model, state, mesh, log })
}

impl Model {
    /// Clone for checkpointing (the name flags the deliberate full copy).
    fn clone_shallow(&self) -> Model {
        Model {
            complex: self.complex.clone(),
            sdf: self.sdf.clone(),
            appearance: self.appearance.clone(),
            sharpness: self.sharpness,
            background: self.background,
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient harness.

/// Discrete structure of one objective evaluation.  A finite-difference
/// probe is only valid when the signature is identical on both sides of the
/// perturbation; otherwise the objective crossed a kink or a combinatorial
/// boundary and the comparison is void.
#[derive(PartialEq)]
struct DiscreteSignature {
    n_segments: Vec<u16>,
    gate: Vec<bool>,
    tri: Vec<u32>,
    mesh_counts: (usize, usize),
    cut_checksum: u64,
    rgb_sign: Vec<i8>,
    mesh_diff_sign: Vec<i8>,
    field: Vec<i8>,
}

impl DiscreteSignature {
    fn of(eval: &ViewEval, reference: &[[f64; 3]]) -> DiscreteSignature {
        let gate: Vec<bool> =
            eval.out.opacity.iter().map(|&o| o > crate::losses::OPACITY_GATE).collect();
        let mut cut_checksum = 0u64;
        for cut in &eval.mesh.provenance {
            cut_checksum = cut_checksum
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(((cut.a as u64) << 32) | cut.b as u64);
        }
        let rgb_sign = eval
            .out
            .color
            .iter()
            .zip(reference)
            .flat_map(|(c, r)| (0..3).map(move |ch| (c[ch] - r[ch]).signum() as i8))
            .collect();
        let mesh_diff_sign = (0..eval.out.depth.len())
            .map(|i| {
                if eval.maps.tri[i] != NO_HIT && gate[i] {
                    (eval.out.depth[i] - eval.maps.depth[i]).signum() as i8
                } else {
                    0
                }
            })
            .collect();
        DiscreteSignature {
            n_segments: eval.out.n_segments.clone(),
            gate,
            tri: eval.maps.tri.clone(),
            mesh_counts: (eval.mesh.positions.len(), eval.mesh.triangles.len()),
            cut_checksum,
            rgb_sign,
            mesh_diff_sign,
            field: eval.field_signature.clone(),
        }
    }
}

/// Worst relative errors per block from one scene's check.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockErrors {
    pub sdf: f64,
    pub appearance: f64,
    pub log_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub scenes: usize,
    /// Parameters whose finite difference was compared.
    pub checked: usize,
    /// Parameters skipped: gradient below threshold or signature changed.
    pub skipped: usize,
    pub worst: BlockErrors,
    /// `(scene, block, index, analytic, fd, relative error)` beyond
    /// tolerance.
    pub failures: Vec<(usize, &'static str, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_GRAD_FLOOR: f64 = 1e-8;

/// A small seeded random scene: irregular grid (8 cube corners plus interior
/// points, ≤ 200 tets), noisy sphere-ish field, random first-order
/// appearance, moderate sharpness, one 8x8 camera, and a noisy reference
/// image with no exact color ties.
pub fn random_check_scene(seed: u64) -> (Model, Camera, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for corner in 0..8 {
        points.push(Vec3::new(
            if corner & 1 == 0 { -1.0 } else { 1.0 },
            if corner & 2 == 0 { -1.0 } else { 1.0 },
            if corner & 4 == 0 { -1.0 } else { 1.0 },
        ));
    }
    for _ in 0..18 {
        points.push(Vec3::new(
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
        ));
    }
    let complex = crate::geometry::delaunay_tetrahedralize(&points).expect("random grid");
    assert!(complex.n_tets() <= 200, "check scene must stay small");

    let center = Vec3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    let radius = rng.random_range(0.45..0.65);
    let values: Vec<f64> = complex
        .vertices
        .iter()
        .map(|p| (p - center).norm() - radius + rng.random_range(-0.08..0.08))
        .collect();
    let sdf = SdfField::new(values, complex.generation);

    let mut appearance = AppearanceField::neutral(&complex, 1, 0.5);
    let stride = appearance.stride();
    let n_coeffs = AppearanceField::n_coeffs(1);
    for t in 0..complex.n_tets() {
        let block = &mut appearance.data[t * stride..(t + 1) * stride];
        for c in block.iter_mut().take(3 * n_coeffs) {
            *c = rng.random_range(-0.3..0.8);
        }
        for g in block.iter_mut().skip(3 * n_coeffs) {
            *g = rng.random_range(-0.2..0.2);
        }
    }

    let sharpness = Sharpness { log_s: rng.random_range(1.7..2.6) };
    let model = Model {
        complex,
        sdf,
        appearance,
        sharpness,
        background: [0.12, 0.1, 0.15],
    };

    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.5..0.5);
    let pos = 2.8 * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    let cam = Camera::look_at("check", pos, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 8, 8, 9.0);

    // The reference never exactly ties a rendered value, keeping the L1 term
    // differentiable at every pixel.  The offsets are kept small so the total
    // loss stays well under one: a finite-difference quotient loses roughly
    // one ulp of the loss across the subtraction, and that noise must stay
    // below the relative tolerance even for gradients near the check floor.
    let cache = RenderCache::build(&model);
    let base = render_view(&model, &cache, &cam, &RenderOptions { cull: None })
        .expect("reference render");
    let reference = base
        .color
        .iter()
        .map(|c| {
            [
                (c[0] + rng.random_range(0.004..0.02)).min(1.0),
                (c[1] - rng.random_range(0.004..0.02)).max(0.0),
                (c[2] + rng.random_range(0.004..0.02)).min(1.0),
            ]
        })
        .collect();
    (model, cam, reference)
}

fn total_loss(
    model: &Model,
    cam: &Camera,
    reference: &[[f64; 3]],
    weights: &LossWeights,
) -> Result<(LossTerms, DiscreteSignature), OptimError> {
    let cache = RenderCache::build(model);
    let eval = evaluate_view(model, &cache, cam, reference, weights, None, false, None)?;
    Ok((eval.terms, DiscreteSignature::of(&eval, reference)))
}

/// Central difference of the weighted total objective, formed term by term.
///
/// Terms a parameter does not influence are evaluated to bitwise-identical
/// values on both sides and cancel exactly, so the quotient's rounding noise
/// scales with each influenced term's own magnitude instead of the grand
/// total's.  This matters near the gradient floor: an appearance coefficient
/// only moves the color terms (~1e-2), while the total also carries the
/// geometric terms (~1e-1), whose last-bit noise alone would exceed the
/// relative tolerance for gradients of a few 1e-8.
fn fd_quotient(hi: &LossTerms, lo: &LossTerms, w: &LossWeights) -> f64 {
    let rgb = (hi.rgb_l1 - lo.rgb_l1) + w.ssim * (hi.rgb_ssim - lo.rgb_ssim);
    let mesh = w.md * (hi.mesh_depth - lo.mesh_depth) + w.mn * (hi.mesh_normal - lo.mesh_normal);
    let field = w.nd * (hi.nd - lo.nd) + w.eik * (hi.eik - lo.eik) + w.curv * (hi.curv - lo.curv);
    (rgb + w.mesh * mesh + w.field * field) / (2.0 * FD_STEP)
}

/// Check the analytic gradient of the total objective against central finite
/// differences on `n_scenes` seeded random scenes.  Parameters whose
/// discrete signature changes under perturbation, or whose gradient is below
/// [`FD_GRAD_FLOOR`], are skipped; everything else must match to
/// [`FD_REL_TOL`] relative error.
pub fn gradient_check(seed: u64, n_scenes: usize) -> Result<GradCheckReport, OptimError> {
    let weights = LossWeights::default();
    let mut report = GradCheckReport { scenes: n_scenes, ..Default::default() };

    for scene in 0..n_scenes {
        let (model, cam, reference) = random_check_scene(seed.wrapping_add(scene as u64));
        let cache = RenderCache::build(&model);
        let mut grads = GradSet::zeros(&model);
        let _ = evaluate_view(
            &model,
            &cache,
            &cam,
            &reference,
            &weights,
            None,
            false,
            Some(&mut grads),
        )?;

        let check = |block: &'static str,
                         index: usize,
                         analytic: f64,
                         model: &mut Model,
                         report: &mut GradCheckReport,
                         write: &mut dyn FnMut(&mut Model, f64)|
         -> Result<(), OptimError> {
            if analytic.abs() <= FD_GRAD_FLOOR {
                report.skipped += 1;
                return Ok(());
            }
            let read = |m: &Model| match block {
                "sdf" => m.sdf.values[index],
                "appearance" => m.appearance.data[index],
                _ => m.sharpness.log_s,
            };
            let theta = read(model);
            write(model, theta + FD_STEP);
            let (hi, sig_hi) = total_loss(model, &cam, &reference, &weights)?;
            write(model, theta - FD_STEP);
            let (lo, sig_lo) = total_loss(model, &cam, &reference, &weights)?;
            write(model, theta);
            if sig_hi != sig_lo {
                report.skipped += 1;
                return Ok(());
            }
            let fd = fd_quotient(&hi, &lo, &weights);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
            report.checked += 1;
            let slot = match block {
                "sdf" => &mut report.worst.sdf,
                "appearance" => &mut report.worst.appearance,
                _ => &mut report.worst.log_s,
            };
            *slot = slot.max(rel);
            if rel >= FD_REL_TOL {
                report.failures.push((scene, block, index, analytic, fd, rel));
            }
            Ok(())
        };

        let mut model = model;
        for j in 0..grads.sdf.len() {
            let g = grads.sdf[j];
            check("sdf", j, g, &mut model, &mut report, &mut |m, v| m.sdf.values[j] = v)?;
        }
        for j in 0..grads.appearance.len() {
            let g = grads.appearance[j];
            check("appearance", j, g, &mut model, &mut report, &mut |m, v| {
                m.appearance.data[j] = v
            })?;
        }
        let g = grads.log_s;
        check("log_s", 0, g, &mut model, &mut report, &mut |m, v| m.sharpness.log_s = v)?;
    }
    Ok(report)
}
