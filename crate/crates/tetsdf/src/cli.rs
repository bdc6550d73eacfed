//! Command-line front door: the `key = value` configuration document, the
//! subcommands (`fit`, `render`, `extract`, `eval`, `gradcheck`,
//! `make-scene`), and exit-code policy.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 64 usage
//! error (unknown flags or malformed invocations).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};

use crate::losses::LossWeights;
use crate::mesh::io::{read_obj, read_ply, write_obj, write_ply};
use crate::mesh::{marching_tets, TriMesh};
use crate::optim::{
    gradient_check, load_checkpoint, train, BlockLrs, OptimError, Schedule, TrainSetup,
};
use crate::render::image_io::write_png;
use crate::render::{render_view, Camera, Model, RenderCache, RenderOptions};
use crate::scenes::{
    camera_rig, chamfer_mesh_sdf, chamfer_meshes, default_light_dir, init_scene, load_posed,
    preset, psnr, render_reference, save_dataset,
};
use crate::Vec3;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// A configuration problem: bad file, bad key, bad value.  Always exits 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Key-value document with `#` comments.  Typed getters remove keys; after
/// extraction, any leftover key is unknown and rejected.
struct RawConfig {
    map: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(ConfigError(format!("line {}: empty key", i + 1)));
            }
            if map.insert(key.to_string(), (i + 1, value.to_string())).is_some() {
                return Err(ConfigError(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(RawConfig { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("bad value for key `{key}`: `{v}`"))),
        }
    }

    fn parsed_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("bad value for key `{key}`: `{v}`"))),
        }
    }

    fn rgb(&mut self, key: &str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<f64> =
                    v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                if parts.len() == 3 && v.split_whitespace().count() == 3 {
                    Ok([parts[0], parts[1], parts[2]])
                } else {
                    Err(ConfigError(format!(
                        "bad value for key `{key}`: `{v}` (want three floats)"
                    )))
                }
            }
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.map.into_iter().next() {
            return Err(ConfigError(format!("unknown key `{key}` (line {line})")));
        }
        Ok(())
    }
}

/// Everything a fitting run needs, parsed and defaulted.  The verbatim text
/// is kept for the provenance copy in the output directory.
#[derive(Debug)]
pub struct Config {
    pub raw: String,
    pub preset: Option<String>,
    pub dataset: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub cameras: usize,
    pub camera_radius: f64,
    pub camera_elevation_deg: f64,
    pub iterations: u64,
    pub weights: LossWeights,
    pub lrs: BlockLrs,
    pub schedule: Schedule,
    pub densify: bool,
    pub prune: bool,
    pub densify_fraction: f64,
    pub tau_c: f64,
    pub sh_degree: u32,
    pub seed: u64,
    pub grid_points: usize,
    pub init_radius: Option<f64>,
    pub background: [f64; 3],
    pub out: PathBuf,
    pub workers: usize,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut raw = RawConfig::parse(text)?;
        let d = LossWeights::default();
        let lr = BlockLrs::default();
        let s = Schedule::default();

        let preset_name: Option<String> = raw.take("preset");
        let dataset: Option<PathBuf> = raw.take("dataset").map(PathBuf::from);
        match (&preset_name, &dataset) {
            (None, None) => {
                return Err(ConfigError(
                    "one of the keys `preset` or `dataset` is required".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError(
                    "keys `preset` and `dataset` are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(name) = &preset_name {
            if preset(name).is_none() {
                return Err(ConfigError(format!(
                    "bad value for key `preset`: `{name}` (known: sphere, box, torus, spherebox)"
                )));
            }
        }

        let iterations = raw.parsed("iterations", s.iterations)?;
        // Default adaptation windows clamp to the run length; explicitly
        // configured windows must fit (validated below).
        let clamp = |v: u64| if iterations > 0 { v.min(iterations) } else { v };
        let schedule = Schedule {
            iterations,
            densify_interval: raw.parsed("densify_interval", s.densify_interval)?,
            densify_window: (
                raw.parsed("densify_from", clamp(s.densify_window.0))?,
                raw.parsed("densify_until", clamp(s.densify_window.1))?,
            ),
            prune_interval: raw.parsed("prune_interval", s.prune_interval)?,
            prune_window: (
                raw.parsed("prune_from", clamp(s.prune_window.0))?,
                raw.parsed("prune_until", clamp(s.prune_window.1))?,
            ),
            cull_interval: raw.parsed("cull_interval", s.cull_interval)?,
            checkpoint_interval: raw.parsed("checkpoint_interval", s.checkpoint_interval)?,
        };
        schedule.validate().map_err(|e| ConfigError(e.to_string()))?;

        let config = Config {
            raw: text.to_string(),
            preset: preset_name,
            dataset,
            width: raw.parsed("width", 128)?,
            height: raw.parsed("height", 128)?,
            cameras: raw.parsed("cameras", 24)?,
            camera_radius: raw.parsed("camera_radius", 2.5)?,
            camera_elevation_deg: raw.parsed("camera_elevation_deg", 20.0)?,
            iterations,
            weights: LossWeights {
                ssim: raw.parsed("lambda_ssim", d.ssim)?,
                mesh: raw.parsed("lambda_mesh", d.mesh)?,
                field: raw.parsed("lambda_field", d.field)?,
                md: raw.parsed("lambda_md", d.md)?,
                mn: raw.parsed("lambda_mn", d.mn)?,
                nd: raw.parsed("lambda_nd", d.nd)?,
                eik: raw.parsed("lambda_eik", d.eik)?,
                curv: raw.parsed("lambda_curv", d.curv)?,
            },
            lrs: BlockLrs {
                sdf: raw.parsed("lr_sdf", lr.sdf)?,
                appearance: raw.parsed("lr_appearance", lr.appearance)?,
                log_s: raw.parsed("lr_log_s", lr.log_s)?,
            },
            schedule,
            densify: raw.parsed("densify", true)?,
            prune: raw.parsed("prune", true)?,
            densify_fraction: raw.parsed("densify_fraction", crate::adapt::DENSIFY_FRACTION)?,
            tau_c: raw.parsed("tau_c", crate::adapt::DEFAULT_TAU_C)?,
            sh_degree: raw.parsed("sh_degree", 1)?,
            seed: raw.parsed("seed", 1)?,
            grid_points: raw.parsed("grid_points", 400)?,
            init_radius: raw.parsed_opt("init_radius")?,
            background: raw.rgb("background", [0.05, 0.05, 0.08])?,
            out: raw.take("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("run")),
            workers: raw.parsed("workers", 0)?,
        };
        raw.finish()?;
        Ok(config)
    }
}

#[derive(Parser)]
#[command(
    name = "tetsdf",
    version,
    about = "Reconstruct a signed-distance surface on an adaptive tetrahedral grid from posed images",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a scene described by a config file; writes checkpoints, the loss
    /// log, and the final mesh into the configured output directory.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render one training view of a checkpointed model to a PNG.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        camera_index: usize,
        /// Config that defines the cameras; defaults to `config.txt` next to
        /// the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract the zero-level-set mesh of a checkpointed model (.obj or .ply
    /// by extension).
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer distance of a mesh against a reference mesh or a built-in
    /// analytic scene.
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, conflicts_with = "gt_sdf")]
        gt_mesh: Option<PathBuf>,
        #[arg(long)]
        gt_sdf: Option<String>,
    },
    /// Compare analytic gradients against finite differences on seeded
    /// random scenes; nonzero exit on any mismatch.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        scenes: usize,
    },
    /// Write a synthetic posed-image dataset for a built-in scene.
    MakeScene {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        cameras: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
    },
}

/// Anything that can go wrong after the command line itself parsed.
enum RunError {
    Config(String),
    Runtime(String),
}

impl RunError {
    fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> RunError {
        RunError::Config(e.0)
    }
}

impl From<OptimError> for RunError {
    fn from(e: OptimError) -> RunError {
        match e {
            OptimError::InvalidSchedule(_) => RunError::Config(e.to_string()),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> RunError {
        RunError::Runtime(e.to_string())
    }
}

impl From<crate::scenes::SceneError> for RunError {
    fn from(e: crate::scenes::SceneError) -> RunError {
        RunError::Runtime(e.to_string())
    }
}

impl From<crate::geometry::GeometryError> for RunError {
    fn from(e: crate::geometry::GeometryError) -> RunError {
        RunError::Runtime(e.to_string())
    }
}

impl From<crate::render::RenderError> for RunError {
    fn from(e: crate::render::RenderError) -> RunError {
        RunError::Runtime(e.to_string())
    }
}

/// Parse `argv` and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Fit { config } => cmd_fit(&config),
        Cmd::Render { checkpoint, camera_index, config, out } => {
            cmd_render(&checkpoint, camera_index, config.as_deref(), out.as_deref())
        }
        Cmd::Extract { checkpoint, out } => cmd_extract(&checkpoint, &out),
        Cmd::Eval { mesh, gt_mesh, gt_sdf } => cmd_eval(&mesh, gt_mesh.as_deref(), gt_sdf.as_deref()),
        Cmd::Gradcheck { seed, scenes } => cmd_gradcheck(seed, scenes),
        Cmd::MakeScene { preset, out, cameras, size } => {
            cmd_make_scene(&preset, &out, cameras, size)
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn read_config_file(path: &Path) -> Result<Config, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(Config::parse(&text)?)
}

/// The cameras and reference images a config describes, plus their solver
/// frame: presets render their analytic scene, datasets come off disk
/// already normalized.
fn load_training_data(
    cfg: &Config,
) -> Result<(Vec<Camera>, Vec<Vec<[f64; 3]>>, [f64; 3]), RunError> {
    if let Some(name) = &cfg.preset {
        let scene = preset(name).expect("validated at parse time");
        let rig = camera_rig(
            cfg.cameras,
            cfg.camera_radius,
            cfg.camera_elevation_deg,
            Vec3::zeros(),
            cfg.width,
            cfg.height,
            1.5 * cfg.width as f64,
        )?;
        let light = default_light_dir();
        let images: Vec<Vec<[f64; 3]>> = rig
            .iter()
            .map(|cam| render_reference(&scene.sdf, cam, scene.background, &light).0)
            .collect();
        Ok((rig, images, scene.background))
    } else {
        let dataset = load_posed(cfg.dataset.as_ref().expect("checked at parse time"))?;
        Ok((dataset.cameras, dataset.images, cfg.background))
    }
}

fn build_initial_model(cfg: &Config, background: [f64; 3]) -> Result<Model, RunError> {
    let init = init_scene(
        Vec3::new(-1.0, -1.0, -1.0),
        Vec3::new(1.0, 1.0, 1.0),
        cfg.grid_points,
        cfg.init_radius,
        cfg.sh_degree,
        cfg.seed,
    )?;
    Ok(Model {
        complex: init.complex,
        sdf: init.sdf,
        appearance: init.appearance,
        sharpness: init.sharpness,
        background,
    })
}

fn configure_workers(workers: usize) -> Result<(), RunError> {
    if workers == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| RunError::Runtime(format!("cannot configure {workers} workers: {e}")))
}

fn cmd_fit(config_path: &Path) -> Result<(), RunError> {
    let cfg = read_config_file(config_path)?;
    configure_workers(cfg.workers)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), &cfg.raw)?;

    let (cameras, images, background) = load_training_data(&cfg)?;
    let model = build_initial_model(&cfg, background)?;

    let mut setup = TrainSetup::new(model, cameras.clone(), images.clone());
    setup.weights = cfg.weights;
    setup.lrs = cfg.lrs;
    setup.schedule = cfg.schedule.clone();
    setup.seed = cfg.seed;
    setup.densify_enabled = cfg.densify;
    setup.prune_enabled = cfg.prune;
    setup.densify_fraction = cfg.densify_fraction;
    setup.tau_c = cfg.tau_c;
    setup.out_dir = Some(cfg.out.clone());

    let result = train(setup)?;

    let obj_path = cfg.out.join("mesh.obj");
    write_obj(&result.mesh, &obj_path)?;
    write_ply(&result.mesh, &cfg.out.join("mesh.ply"))?;
    println!("vertices = {}", result.mesh.positions.len());
    println!("faces = {}", result.mesh.triangles.len());
    println!("mesh_bytes = {}", std::fs::metadata(&obj_path)?.len());
    if let Some(report) = result.log.last() {
        println!("final_total = {}", report.total);
        println!("final_rgb = {}", report.rgb);
    }

    // Final fidelity against the training views.
    let cache = RenderCache::build(&result.model);
    let mut rendered = Vec::new();
    let mut reference = Vec::new();
    for (cam, img) in cameras.iter().zip(&images) {
        let out = render_view(&result.model, &cache, cam, &RenderOptions { cull: None })?;
        rendered.extend_from_slice(&out.color);
        reference.extend_from_slice(img);
    }
    if !rendered.is_empty() {
        println!("psnr = {}", psnr(&rendered, &reference));
    }
    if let Some(name) = &cfg.preset {
        let scene = preset(name).expect("validated at parse time");
        if result.mesh.triangles.is_empty() {
            println!("chamfer = inf  # empty mesh");
        } else {
            let bounds = (Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
            let chamfer = chamfer_mesh_sdf(&result.mesh, &scene.sdf, bounds, cfg.seed)?;
            println!("chamfer = {chamfer}");
        }
    }
    println!("out = {}", cfg.out.display());
    Ok(())
}

/// Cameras for rendering a checkpoint, resolved through the run's config.
fn cameras_for_checkpoint(
    checkpoint: &Path,
    config: Option<&Path>,
) -> Result<Vec<Camera>, RunError> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => {
            let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join("config.txt");
            if !sibling.exists() {
                return Err(RunError::Config(format!(
                    "no --config given and {} does not exist",
                    sibling.display()
                )));
            }
            sibling
        }
    };
    let cfg = read_config_file(&config_path)?;
    Ok(load_training_data(&cfg)?.0)
}

fn cmd_render(
    checkpoint: &Path,
    camera_index: usize,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), RunError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cameras = cameras_for_checkpoint(checkpoint, config)?;
    let Some(cam) = cameras.get(camera_index) else {
        return Err(RunError::Runtime(format!(
            "camera index {camera_index} out of range ({} cameras)",
            cameras.len()
        )));
    };
    let cache = RenderCache::build(&ckpt.model);
    let view = render_view(&ckpt.model, &cache, cam, &RenderOptions { cull: None })?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("render_{camera_index:03}.png")),
    };
    write_png(&out_path, cam.width, cam.height, &view.color)?;
    println!("out = {}", out_path.display());
    Ok(())
}

fn load_mesh(path: &Path) -> Result<TriMesh, RunError> {
    let mesh = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path)?,
        _ => read_obj(path)?,
    };
    Ok(mesh)
}

fn cmd_extract(checkpoint: &Path, out: &Path) -> Result<(), RunError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mesh = marching_tets(&ckpt.model.complex, &ckpt.model.sdf.values);
    match out.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply(&mesh, out)?,
        _ => write_obj(&mesh, out)?,
    }
    println!("vertices = {}", mesh.positions.len());
    println!("faces = {}", mesh.triangles.len());
    println!("mesh_bytes = {}", std::fs::metadata(out)?.len());
    println!("out = {}", out.display());
    Ok(())
}

fn cmd_eval(
    mesh_path: &Path,
    gt_mesh: Option<&Path>,
    gt_sdf: Option<&str>,
) -> Result<(), RunError> {
    let mesh = load_mesh(mesh_path)?;
    let chamfer = match (gt_mesh, gt_sdf) {
        (Some(reference), None) => chamfer_meshes(&mesh, &load_mesh(reference)?, 1)?,
        (None, Some(name)) => {
            let Some(scene) = preset(name) else {
                return Err(RunError::Config(format!(
                    "bad value for `--gt-sdf`: `{name}` (known: sphere, box, torus, spherebox)"
                )));
            };
            let bounds = (Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
            chamfer_mesh_sdf(&mesh, &scene.sdf, bounds, 1)?
        }
        _ => {
            return Err(RunError::Config(
                "exactly one of --gt-mesh or --gt-sdf is required".into(),
            ))
        }
    };
    println!("chamfer = {chamfer}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, scenes: usize) -> Result<(), RunError> {
    let report = gradient_check(seed, scenes)?;
    println!("scenes = {}", report.scenes);
    println!("checked = {}", report.checked);
    println!("skipped = {}", report.skipped);
    println!("max_rel_sdf = {:e}", report.worst.sdf);
    println!("max_rel_appearance = {:e}", report.worst.appearance);
    println!("max_rel_log_s = {:e}", report.worst.log_s);
    if report.passed() {
        return Ok(());
    }
    for (scene, block, index, analytic, fd, rel) in report.failures.iter().take(10) {
        eprintln!(
            "mismatch: scene {scene} {block}[{index}] analytic {analytic:e} vs fd {fd:e} (rel {rel:e})"
        );
    }
    Err(RunError::Runtime(format!(
        "{} gradient components disagree with finite differences",
        report.failures.len()
    )))
}

fn cmd_make_scene(name: &str, out: &Path, cameras: usize, size: u32) -> Result<(), RunError> {
    let Some(scene) = preset(name) else {
        return Err(RunError::Config(format!(
            "bad value for `--preset`: `{name}` (known: sphere, box, torus, spherebox)"
        )));
    };
    let rig = camera_rig(cameras, 2.5, 20.0, Vec3::zeros(), size, size, 1.5 * size as f64)?;
    let light = default_light_dir();
    let images: Vec<Vec<[f64; 3]>> =
        rig.iter().map(|cam| render_reference(&scene.sdf, cam, scene.background, &light).0).collect();
    save_dataset(out, &rig, &images)?;
    println!("cameras = {}", rig.len());
    println!("out = {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(args.iter().map(|s| s.to_string()))
    }

    #[test]
    fn config_defaults_cover_every_key() {
        let cfg = Config::parse("preset = sphere\n").unwrap();
        assert_eq!(cfg.width, 128);
        assert_eq!(cfg.cameras, 24);
        assert_eq!(cfg.iterations, 18_000);
        assert_eq!(cfg.schedule.densify_window, (2_000, 16_000));
        assert_eq!(cfg.schedule.prune_window, (4_000, 15_000));
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.sh_degree, 1);
        assert_eq!(cfg.seed, 1);
        assert!(cfg.densify && cfg.prune);
        assert_eq!(cfg.out, PathBuf::from("run"));
        assert_eq!(cfg.background, [0.05, 0.05, 0.08]);
        assert_eq!(cfg.workers, 0);
        assert!(cfg.init_radius.is_none());
    }

    #[test]
    fn config_windows_follow_short_runs() {
        let cfg = Config::parse("preset = sphere\niterations = 3000\n").unwrap();
        assert_eq!(cfg.schedule.densify_window, (2_000, 3_000));
        assert_eq!(cfg.schedule.prune_window, (3_000, 3_000));
        // An explicit window beyond the run length is a config error.
        let err = Config::parse("preset = sphere\niterations = 100\ndensify_until = 500\n")
            .unwrap_err();
        assert!(err.0.contains("window"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_and_duplicate_keys() {
        let err = Config::parse("preset = sphere\nwobble = 3\n").unwrap_err();
        assert!(err.0.contains("unknown key `wobble`"), "{err}");
        assert!(err.0.contains("line 2"), "{err}");
        let err = Config::parse("preset = sphere\nseed = 1\nseed = 2\n").unwrap_err();
        assert!(err.0.contains("duplicate key `seed`"), "{err}");
        let err = Config::parse("preset = sphere\nseed = banana\n").unwrap_err();
        assert!(err.0.contains("bad value for key `seed`"), "{err}");
    }

    #[test]
    fn config_requires_exactly_one_scene_source() {
        let err = Config::parse("iterations = 5\n").unwrap_err();
        assert!(err.0.contains("`preset` or `dataset`"), "{err}");
        let err = Config::parse("preset = sphere\ndataset = d\n").unwrap_err();
        assert!(err.0.contains("mutually exclusive"), "{err}");
        let err = Config::parse("preset = cube\n").unwrap_err();
        assert!(err.0.contains("bad value for key `preset`"), "{err}");
    }

    #[test]
    fn config_strips_comments_and_whitespace() {
        let cfg = Config::parse(
            "# a fitting run\n  preset = torus   # built-in\n\nseed=7\nbackground = 0 0.5 1\n",
        )
        .unwrap();
        assert_eq!(cfg.preset.as_deref(), Some("torus"));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.background, [0.0, 0.5, 1.0]);
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run_args(&["tetsdf", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_args(&["tetsdf", "gradcheck", "--wat"]), EXIT_USAGE);
        assert_eq!(run_args(&["tetsdf", "extract", "--checkpoint", "x"]), EXIT_USAGE);
        assert_eq!(run_args(&["tetsdf"]), EXIT_USAGE);
        assert_eq!(run_args(&["tetsdf", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "iterations = 5\n").unwrap();
        assert_eq!(run_args(&["tetsdf", "fit", "--config", path.to_str().unwrap()]), EXIT_CONFIG);
        assert_eq!(
            run_args(&["tetsdf", "fit", "--config", dir.path().join("nope.txt").to_str().unwrap()]),
            EXIT_CONFIG
        );
        assert_eq!(
            run_args(&["tetsdf", "make-scene", "--preset", "cube", "--out", "x"]),
            EXIT_CONFIG
        );
        let mesh = dir.path().join("m.obj");
        std::fs::write(&mesh, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(
            run_args(&["tetsdf", "eval", "--mesh", mesh.to_str().unwrap()]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn runtime_errors_exit_3() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.tsdf");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        let out = dir.path().join("m.obj");
        assert_eq!(
            run_args(&[
                "tetsdf",
                "extract",
                "--checkpoint",
                bad.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            EXIT_RUNTIME
        );
    }

    #[test]
    fn pipeline_smoke_fit_extract_eval_render() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(
            run_args(&[
                "tetsdf",
                "make-scene",
                "--preset",
                "sphere",
                "--out",
                data.to_str().unwrap(),
                "--cameras",
                "3",
                "--size",
                "24"
            ]),
            EXIT_OK
        );
        assert!(data.join("cameras.txt").exists());

        let out = dir.path().join("fitrun");
        let config = dir.path().join("fit.txt");
        std::fs::write(
            &config,
            format!(
                "dataset = {}\nout = {}\niterations = 4\ngrid_points = 40\n\
                 checkpoint_interval = 2\ncull_interval = 1\nseed = 3\n",
                data.display(),
                out.display()
            ),
        )
        .unwrap();
        assert_eq!(run_args(&["tetsdf", "fit", "--config", config.to_str().unwrap()]), EXIT_OK);
        assert!(out.join("loss_log.csv").exists());
        assert!(out.join("mesh.obj").exists());
        assert!(out.join("mesh.ply").exists());
        assert_eq!(
            std::fs::read_to_string(out.join("config.txt")).unwrap(),
            std::fs::read_to_string(&config).unwrap(),
            "config must be echoed verbatim"
        );

        let ckpt = out.join("final.tsdf");
        assert!(ckpt.exists());
        let mesh = dir.path().join("extracted.obj");
        assert_eq!(
            run_args(&[
                "tetsdf",
                "extract",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                mesh.to_str().unwrap()
            ]),
            EXIT_OK
        );
        assert!(mesh.exists());

        assert_eq!(
            run_args(&["tetsdf", "eval", "--mesh", mesh.to_str().unwrap(), "--gt-sdf", "sphere"]),
            EXIT_OK
        );
        assert_eq!(
            run_args(&[
                "tetsdf",
                "eval",
                "--mesh",
                mesh.to_str().unwrap(),
                "--gt-mesh",
                out.join("mesh.obj").to_str().unwrap()
            ]),
            EXIT_OK
        );

        assert_eq!(
            run_args(&[
                "tetsdf",
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--camera-index",
                "1"
            ]),
            EXIT_OK
        );
        assert!(out.join("render_001.png").exists());
        // Out-of-range camera: runtime error.
        assert_eq!(
            run_args(&[
                "tetsdf",
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--camera-index",
                "9"
            ]),
            EXIT_RUNTIME
        );
    }
}
