//! Command-line front end. Every subcommand reads and writes the formats of
//! [`crate::io`]; tunables come from defaults, then `--config`, then flags.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, GripperModel};
use crate::geometry::{GraspPose, Vec3};
use crate::graspness::{self, GraspnessField, GridConfig};
use crate::grouping::{self, CylinderSpec};
use crate::io::{self, SceneFile};
use crate::mra::{self, GradCheckConfig};
use crate::normals;
use crate::semantic::{self, CropRegion};
use crate::simscene::{self, CameraConfig, SceneRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            translation: eval::DEFAULT_NMS_TRANSLATION,
            rotation_deg: eval::DEFAULT_NMS_ROTATION_DEG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Seeds sampled for grasp labeling and grouping.
    pub seeds: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { seeds: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MraCheckConfig {
    pub instances: usize,
    pub tolerance: f64,
    #[serde(flatten)]
    pub check: GradCheckConfig,
}

impl Default for MraCheckConfig {
    fn default() -> Self {
        MraCheckConfig {
            instances: 20,
            tolerance: 1e-5,
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsConfig {
    pub count: usize,
    pub radius: f64,
    /// Look-at target.
    pub center: [f64; 3],
}

impl Default for ViewsConfig {
    fn default() -> Self {
        ViewsConfig {
            count: 256,
            radius: 0.5,
            center: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    /// Meters per raw PGM unit when writing depth.
    pub depth_scale: f64,
    pub normal_stride: usize,
    pub sigma_pixel: f64,
    pub sigma_shift: f64,
    pub mask_tolerance: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            depth_scale: 1e-4,
            normal_stride: 1,
            sigma_pixel: 0.0,
            sigma_shift: 0.0,
            mask_tolerance: semantic::DEFAULT_DEPTH_TOLERANCE,
        }
    }
}

/// Every tunable of the pipeline. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub gripper: GripperModel,
    pub label: LabelConfig,
    pub cylinder: CylinderSpec,
    pub nms: NmsConfig,
    pub eval: EvalOptions,
    pub mra: MraCheckConfig,
    pub recipe: SceneRecipe,
    pub camera: CameraConfig,
    pub views: ViewsConfig,
    pub depth: DepthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        self.gripper.validate()?;
        self.cylinder.validate()?;
        self.recipe.validate()?;
        if !(self.nms.translation >= 0.0 && self.nms.rotation_deg >= 0.0) {
            return Err(Error::InvalidArgument("NMS thresholds must be >= 0".into()));
        }
        if !(self.eval.clearance >= 0.0) {
            return Err(Error::InvalidArgument("clearance must be >= 0".into()));
        }
        if !(self.depth.depth_scale > 0.0) || self.depth.normal_stride == 0 {
            return Err(Error::InvalidArgument("depth scale and normal stride must be positive".into()));
        }
        self.camera.intrinsics().validate()
    }
}

#[derive(Debug, Parser)]
#[command(name = "graspkit", version, about = "Grasp labeling, evaluation and synthetic scene tools")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Graspness labels (and optionally grasps) for a scene with normals.
    Label(LabelArgs),
    /// Scene with estimated normals from a depth image.
    Normals(NormalsArgs),
    /// Multi-range cylinder features as a raw f32 tensor.
    Group(GroupArgs),
    /// Finite-difference and simplex checks of the attention kernel.
    MraCheck(MraCheckArgs),
    /// Non-maximum suppression of a grasp list.
    Nms(NmsArgs),
    /// Force-closure AP of a grasp list on a scene.
    Eval(EvalArgs),
    /// Synthetic scene, rendered depth views and viewpoint manifest.
    Simscene(SimsceneArgs),
    /// Quarter-sphere viewpoint manifest.
    Views(ViewsArgs),
    /// Grasps whose centers fall on a segmentation mask.
    FilterMask(FilterMaskArgs),
    /// Gaussian depth noise.
    Noise(NoiseArgs),
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write labeled grasps at the top seeds.
    #[arg(long)]
    pub grasps: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NormalsArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Tensor output; the shape sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MraCheckArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long = "seeds")]
    pub seed_count: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long)]
    pub grasps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "nms-t")]
    pub nms_t: Option<f64>,
    #[arg(long = "nms-r")]
    pub nms_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub grasps: PathBuf,
    /// Full report including per-grasp outcomes.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "top-k")]
    pub top_k: Option<usize>,
    #[arg(long = "nms-t")]
    pub nms_t: Option<f64>,
    #[arg(long = "nms-r")]
    pub nms_r: Option<f64>,
    #[arg(long)]
    pub clearance: Option<f64>,
    #[arg(long, overrides_with = "no_collision")]
    pub collision: bool,
    #[arg(long = "no-collision", overrides_with = "collision")]
    pub no_collision: bool,
}

#[derive(Debug, Args)]
pub struct SimsceneArgs {
    /// Scene recipe JSON; overrides the config's recipe.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of rendered viewpoints.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ViewsArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterMaskArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub grasps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `u_min,v_min,u_max,v_max`: the mask is given in crop coordinates.
    #[arg(long)]
    pub crop: Option<CropRegion>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Meta sidecar for the output; defaults to `<out>.json`.
    #[arg(long = "out-meta")]
    pub out_meta: Option<PathBuf>,
    #[arg(long = "sigma-pixel")]
    pub sigma_pixel: Option<f64>,
    #[arg(long = "sigma-shift")]
    pub sigma_shift: Option<f64>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code: 0 success, 1 usage or validation error,
/// 2 i/o error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            emit(&summary, cli.json);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(summary: &Value, json: bool) {
    let mut out = std::io::stdout().lock();
    if json {
        let _ = writeln!(out, "{summary}");
        return;
    }
    if let Value::Object(map) = summary {
        for (k, v) in map {
            let _ = writeln!(out, "{k}: {v}");
        }
    }
}

/// Runs a parsed command on a thread pool of the requested size.
pub fn execute(cli: &Cli) -> Result<Value> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut config, cli)?;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.command, &config, cli.seed))
}

fn apply_overrides(config: &mut RunConfig, cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Label(a) => set(&mut config.label.seeds, a.seeds),
        Command::Group(a) => set(&mut config.label.seeds, a.seeds),
        Command::Normals(a) => set(&mut config.depth.normal_stride, a.stride),
        Command::MraCheck(a) => {
            set(&mut config.mra.instances, a.instances);
            set(&mut config.mra.check.groups, a.groups);
            set(&mut config.mra.check.seeds, a.seed_count);
            set(&mut config.mra.check.channels, a.channels);
            set(&mut config.mra.check.heads, a.heads);
        }
        Command::Nms(a) => {
            set(&mut config.nms.translation, a.nms_t);
            set(&mut config.nms.rotation_deg, a.nms_r);
        }
        Command::Eval(a) => {
            set(&mut config.eval.top_k, a.top_k);
            set(&mut config.nms.translation, a.nms_t);
            set(&mut config.nms.rotation_deg, a.nms_r);
            set(&mut config.eval.clearance, a.clearance);
            if a.collision {
                config.eval.collision_detection = true;
            }
            if a.no_collision {
                config.eval.collision_detection = false;
            }
        }
        Command::Simscene(a) => {
            if let Some(path) = &a.recipe {
                config.recipe = io::read_json(path)?;
            }
            set(&mut config.views.count, a.views);
            set(&mut config.views.radius, a.radius);
            config.recipe.seed = config.recipe.seed.wrapping_add(cli.seed);
        }
        Command::Views(a) => {
            set(&mut config.views.count, a.count);
            set(&mut config.views.radius, a.radius);
        }
        Command::FilterMask(a) => set(&mut config.depth.mask_tolerance, a.tolerance),
        Command::Noise(a) => {
            set(&mut config.depth.sigma_pixel, a.sigma_pixel);
            set(&mut config.depth.sigma_shift, a.sigma_shift);
        }
    }
    Ok(())
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn dispatch(command: &Command, config: &RunConfig, seed: u64) -> Result<Value> {
    match command {
        Command::Label(a) => label(a, config),
        Command::Normals(a) => normals_cmd(a, config),
        Command::Group(a) => group(a, config),
        Command::MraCheck(_) => mra_check(config, seed),
        Command::Nms(a) => nms(a, config),
        Command::Eval(a) => evaluate(a, config),
        Command::Simscene(a) => simscene_cmd(a, config),
        Command::Views(a) => views(a, config),
        Command::FilterMask(a) => filter_mask(a, config),
        Command::Noise(a) => noise(a, config, seed),
    }
}

fn label(a: &LabelArgs, config: &RunConfig) -> Result<Value> {
    let file = io::read_scene_file(&a.scene)?;
    let scene = file.scene;
    let grid = config.grid.build()?;
    let raw = graspness::compute_raw_graspness(&scene, &grid, &config.gripper)?;
    let field = GraspnessField::from_raw(raw.scores.clone(), scene.object_ids.clone())?;
    let mut summary = json!({
        "points": scene.len(),
        "objects": count_objects(&scene.object_ids),
        "candidates_per_point": grid.len(),
        "max_raw": raw.scores.iter().copied().fold(0.0, f64::max),
        "graspable_points": raw.successes.iter().filter(|s| **s > 0).count(),
    });
    if let Some(path) = &a.grasps {
        let m = config.label.seeds.min(scene.len());
        let views = raw.best_view_vectors(&grid);
        let seeds = graspness::sample_seeds(&field.final_score, &scene, m, Some(&views))?;
        let labeled = graspness::label_grasps(&scene, &grid, &config.gripper, &seeds.indices)?;
        let grasps: Vec<GraspPose> = seeds
            .indices
            .iter()
            .zip(labeled)
            .flat_map(|(&i, gs)| {
                let id = scene.object_ids[i];
                gs.into_iter().map(move |mut g| {
                    g.object_id = Some(id);
                    g
                })
            })
            .collect();
        io::write_grasps(&grasps, path)?;
        summary["seeds"] = json!(seeds.len());
        summary["grasps"] = json!(grasps.len());
    }
    io::write_scene_file(
        &SceneFile {
            scene,
            graspness: Some(field),
        },
        &a.out,
    )?;
    Ok(summary)
}

fn count_objects(ids: &[u32]) -> usize {
    let mut seen: Vec<u32> = ids.iter().copied().filter(|i| *i != 0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn normals_cmd(a: &NormalsArgs, config: &RunConfig) -> Result<Value> {
    let depth = io::read_depth(&a.depth, &a.meta)?;
    let scene = normals::depth_to_scene(&depth, config.depth.normal_stride)?;
    let valid = scene
        .normals
        .as_ref()
        .map_or(0, |n| n.iter().filter(|v| crate::geometry::is_valid_normal(v)).count());
    io::write_scene(&scene, &a.out)?;
    Ok(json!({ "points": scene.len(), "valid_normals": valid }))
}

#[derive(Serialize)]
struct TensorSidecar<'a> {
    dtype: &'static str,
    layout: &'static str,
    groups: usize,
    seeds: usize,
    channels: usize,
    radii: &'a [f64],
    seed_indices: &'a [usize],
    counts: &'a [usize],
}

fn group(a: &GroupArgs, config: &RunConfig) -> Result<Value> {
    let file = io::read_scene_file(&a.scene)?;
    let scene = file.scene;
    let scores = file
        .graspness
        .map_or_else(|| vec![0.0; scene.len()], |g| g.final_score);
    let m = config.label.seeds.min(scene.len());
    let seeds = graspness::sample_seeds(&scores, &scene, m, None)?;
    let groups = grouping::cylinder_group(&scene, &seeds, &config.cylinder)?;
    let features = scene.position_normal_features()?;
    let x = grouping::aggregate_features(&scene, Some(&features), &seeds, &groups)?;
    let bytes: Vec<u8> = x.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    io::write_file(&a.out, &bytes)?;
    let sidecar = TensorSidecar {
        dtype: "f32le",
        layout: "group,seed,channel",
        groups: x.groups,
        seeds: x.seeds,
        channels: x.channels,
        radii: &config.cylinder.radii,
        seed_indices: &seeds.indices,
        counts: &x.counts,
    };
    io::write_json(&sidecar, &sidecar_path(&a.out))?;
    Ok(json!({ "groups": x.groups, "seeds": x.seeds, "channels": x.channels }))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn mra_check(config: &RunConfig, seed: u64) -> Result<Value> {
    let cfg = config.mra.check;
    let mut reports = Vec::with_capacity(config.mra.instances);
    for i in 0..config.mra.instances as u64 {
        reports.push(mra::gradient_check(&cfg, seed.wrapping_add(i))?);
    }
    let max_rel = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let max_simplex = reports.iter().map(|r| r.max_simplex_error).fold(0.0, f64::max);
    let identity = mra::single_range_identity_error(&cfg, seed)?;
    let pass = max_rel < config.mra.tolerance && max_simplex <= 1e-12 && identity == 0.0;
    let summary = json!({
        "instances": reports.len(),
        "entries_per_instance": reports.first().map_or(0, |r| r.entries),
        "max_rel_error": max_rel,
        "max_simplex_error": max_simplex,
        "single_range_identity_error": identity,
        "tolerance": config.mra.tolerance,
        "pass": pass,
    });
    if !pass {
        return Err(Error::InvalidArgument(format!("gradient check failed: {summary}")));
    }
    Ok(summary)
}

fn nms(a: &NmsArgs, config: &RunConfig) -> Result<Value> {
    let grasps = io::read_grasps(&a.grasps)?;
    let kept = eval::grasp_nms(&grasps, config.nms.translation, config.nms.rotation_deg);
    io::write_grasps(&kept, &a.out)?;
    Ok(json!({ "input": grasps.len(), "kept": kept.len() }))
}

fn evaluate(a: &EvalArgs, config: &RunConfig) -> Result<Value> {
    let scene = io::read_scene(&a.scene)?;
    let grasps = io::read_grasps(&a.grasps)?;
    let kept = eval::grasp_nms(&grasps, config.nms.translation, config.nms.rotation_deg);
    let report = eval::evaluate_ap(&kept, &scene, &config.gripper, &config.eval)?;
    if let Some(path) = &a.out {
        io::write_json(&report, path)?;
    }
    Ok(json!({
        "grasps": grasps.len(),
        "after_nms": kept.len(),
        "ap_overall": report.ap_overall,
        "ap_by_friction": report.ap_by_friction,
        "frictions": report.frictions,
        "ap_by_scale": report.ap_by_scale,
    }))
}

#[derive(Serialize)]
struct ViewManifest<'a> {
    viewpoints: &'a simscene::ViewpointSet,
    /// Depth image and meta file per viewpoint, relative to the manifest.
    depth: Vec<[String; 2]>,
    camera: CameraConfig,
}

fn simscene_cmd(a: &SimsceneArgs, config: &RunConfig) -> Result<Value> {
    let sim = simscene::generate_scene(&config.recipe)?;
    let v = &config.views;
    let set = simscene::sample_viewpoints(v.radius, v.count, Vec3::from(v.center))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    io::write_scene(&sim.scene, a.out.join("scene.fgpc"))?;
    io::write_json(&sim.primitives, &a.out.join("primitives.json"))?;
    let cam = config.camera;
    let mut files = Vec::with_capacity(set.poses.len());
    for (i, pose) in set.poses.iter().enumerate() {
        let d = simscene::render_depth(&sim.primitives, pose, cam.intrinsics(), cam.width, cam.height)?;
        let names = [format!("depth_{i:04}.pgm"), format!("depth_{i:04}.json")];
        io::write_depth(&d, config.depth.depth_scale, a.out.join(&names[0]), a.out.join(&names[1]))?;
        files.push(names);
    }
    let manifest = ViewManifest {
        viewpoints: &set,
        depth: files,
        camera: cam,
    };
    io::write_json(&manifest, &a.out.join("views.json"))?;
    Ok(json!({
        "points": sim.scene.len(),
        "objects": count_objects(&sim.scene.object_ids),
        "views": set.poses.len(),
        "min_pairwise_angle_deg": set.min_pairwise_angle_deg,
    }))
}

fn views(a: &ViewsArgs, config: &RunConfig) -> Result<Value> {
    let v = &config.views;
    let set = simscene::sample_viewpoints(v.radius, v.count, Vec3::from(v.center))?;
    if let Some(path) = &a.out {
        io::write_json(&set, path)?;
    }
    Ok(json!({
        "count": set.poses.len(),
        "radius": set.radius,
        "min_pairwise_angle_deg": set.min_pairwise_angle_deg,
    }))
}

fn filter_mask(a: &FilterMaskArgs, config: &RunConfig) -> Result<Value> {
    let depth = io::read_depth(&a.depth, &a.meta)?;
    let mut mask = io::read_mask(&a.mask)?;
    if let Some(region) = &a.crop {
        mask = semantic::crop_and_lift(region, &mask, depth.width, depth.height)?;
    }
    let grasps = io::read_grasps(&a.grasps)?;
    let kept = semantic::filter_by_mask(&grasps, &mask, &depth, config.depth.mask_tolerance)?;
    io::write_grasps(&kept, &a.out)?;
    Ok(json!({ "input": grasps.len(), "kept": kept.len(), "mask_pixels": mask.count() }))
}

fn noise(a: &NoiseArgs, config: &RunConfig, seed: u64) -> Result<Value> {
    let meta = io::read_depth_meta(&a.meta)?;
    let depth = io::read_depth(&a.depth, &a.meta)?;
    let noisy = simscene::apply_depth_noise(&depth, config.depth.sigma_pixel, config.depth.sigma_shift, seed)?;
    let meta_out = a.out_meta.clone().unwrap_or_else(|| sidecar_path(&a.out));
    io::write_depth(&noisy, meta.depth_scale, &a.out, meta_out)?;
    let valid = noisy.depth.iter().filter(|z| **z > 0.0).count();
    Ok(json!({ "pixels": noisy.depth.len(), "valid": valid }))
}
