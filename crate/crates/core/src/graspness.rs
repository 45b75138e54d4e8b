//! Point-wise graspness labels.
//!
//! Raw graspness is the success fraction of a fixed candidate grid
//! (views x in-plane angles x depths) evaluated with the antipodal
//! force-closure and collision tests from [`crate::eval`]. Labels are then
//! min-max normalized within each object before a global min-max pass, so
//! an object whose raw scores are uniformly low still reaches 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{find_contacts, min_friction, GripperBoxes, GripperModel, FRICTION_SWEEP};
use crate::geometry::{
    approach_rotation, fibonacci_sphere, is_valid_normal, to_frame, GraspPose, Mat3, Scene, SeedSet, Vec3,
};
use crate::spatial::PointGrid;

pub const DEFAULT_VIEWS: usize = 60;
pub const DEFAULT_ANGLES: usize = 12;
pub const DEFAULT_DEPTHS: [f64; 4] = [0.01, 0.02, 0.03, 0.04];
pub const DEFAULT_LABEL_FRICTION: f64 = 0.4;

/// Gap left on each side of the contacts when a labeled grasp is narrowed.
pub const WIDTH_MARGIN: f64 = 0.005;

/// Per-point graspness at each labeling stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspnessField {
    pub raw: Vec<f64>,
    pub instance_norm: Vec<f64>,
    pub final_score: Vec<f64>,
    pub object_ids: Vec<u32>,
}

impl GraspnessField {
    pub fn from_raw(raw: Vec<f64>, object_ids: Vec<u32>) -> Result<Self> {
        if raw.len() != object_ids.len() {
            return Err(Error::Shape("raw scores and object ids differ in length".into()));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("raw graspness must be finite and >= 0".into()));
        }
        let instance_norm = normalize_instance(&raw, &object_ids);
        let final_score = normalize_scene(&instance_norm);
        Ok(GraspnessField {
            raw,
            instance_norm,
            final_score,
            object_ids,
        })
    }
}

/// The predefined candidate grasps evaluated at every point.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGraspGrid {
    /// Approach directions (unit vectors).
    pub views: Vec<Vec3>,
    /// In-plane rotations about the approach axis, radians.
    pub angles: Vec<f64>,
    /// Fingertip advance past the point, meters.
    pub depths: Vec<f64>,
    /// Friction coefficient a candidate must close under to count.
    pub friction: f64,
}

impl Default for CandidateGraspGrid {
    fn default() -> Self {
        Self::new(DEFAULT_VIEWS, DEFAULT_ANGLES, DEFAULT_DEPTHS.to_vec(), DEFAULT_LABEL_FRICTION)
    }
}

impl CandidateGraspGrid {
    /// `views` Fibonacci directions and `angles` rotations evenly covering
    /// `[0, pi)` (the jaw is symmetric under a half turn).
    pub fn new(views: usize, angles: usize, depths: Vec<f64>, friction: f64) -> Self {
        CandidateGraspGrid {
            views: fibonacci_sphere(views),
            angles: (0..angles)
                .map(|k| k as f64 * std::f64::consts::PI / angles as f64)
                .collect(),
            depths,
            friction,
        }
    }

    pub fn len(&self) -> usize {
        self.views.len() * self.angles.len() * self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("candidate grid needs V, A, D >= 1".into()));
        }
        if self.views.iter().any(|v| !is_valid_normal(v)) {
            return Err(Error::InvalidArgument("grid views must be unit vectors".into()));
        }
        if self.depths.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument("grid depths must be >= 0".into()));
        }
        if !(self.friction.is_finite() && self.friction > 0.0) {
            return Err(Error::InvalidArgument("label friction must be positive".into()));
        }
        Ok(())
    }

    fn max_depth(&self) -> f64 {
        self.depths.iter().copied().fold(0.0, f64::max)
    }

    /// Candidate `(view, angle, depth)` as a full-width grasp at `center`.
    pub fn candidate(&self, center: Vec3, view: usize, angle: usize, depth: usize, width: f64) -> GraspPose {
        GraspPose {
            center,
            rotation: approach_rotation(&self.views[view], self.angles[angle]),
            width,
            depth: self.depths[depth],
            score: 0.0,
            object_id: None,
        }
    }
}

/// Raw success fractions and, per point, the view with the most successes.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGraspness {
    pub scores: Vec<f64>,
    /// Successful candidates per point (numerator of `scores`).
    pub successes: Vec<u32>,
    pub best_view: Vec<Option<usize>>,
}

impl RawGraspness {
    pub fn best_view_vectors(&self, grid: &CandidateGraspGrid) -> Vec<Option<Vec3>> {
        self.best_view.iter().map(|v| v.map(|i| grid.views[i])).collect()
    }
}

/// Outcome of one grid candidate: the friction-sweep index at which it first
/// closes (if ever), after the collision test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateOutcome {
    pub view: usize,
    pub angle: usize,
    pub depth: usize,
    pub collision: bool,
    /// Contact pair as indices into the scene, when one exists.
    pub contacts: Option<(usize, usize)>,
    /// Index into `sweep` of the smallest friction that closes.
    pub level: Option<usize>,
}

/// Points near `center` with their normals, in ascending scene index so
/// contact ties resolve exactly as a full-scene scan would.
struct Neighborhood {
    indices: Vec<usize>,
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl Neighborhood {
    fn gather(scene: &Scene, normals: &[Vec3], grid: &PointGrid, center: &Vec3, radius: f64) -> Self {
        let indices = grid.within(center, radius);
        Neighborhood {
            points: indices.iter().map(|&i| scene.points[i]).collect(),
            normals: indices.iter().map(|&i| normals[i]).collect(),
            indices,
        }
    }
}

fn evaluate_point(
    hood: &Neighborhood,
    center: &Vec3,
    grid: &CandidateGraspGrid,
    gripper: &GripperModel,
    sweep: &[f64],
    mut visit: impl FnMut(CandidateOutcome),
) {
    let mut local = vec![Vec3::zeros(); hood.points.len()];
    for (vi, view) in grid.views.iter().enumerate() {
        for (ai, angle) in grid.angles.iter().enumerate() {
            let rotation: Mat3 = approach_rotation(view, *angle);
            for (l, p) in local.iter_mut().zip(&hood.points) {
                *l = to_frame(&rotation, center, p);
            }
            let closing = rotation.column(1).into_owned();
            for (di, depth) in grid.depths.iter().enumerate() {
                let boxes = GripperBoxes::new(gripper, gripper.max_width, *depth, 0.0);
                let collision = local.iter().any(|p| boxes.collides(p));
                let contacts = find_contacts(&boxes, &local);
                let level = match (&contacts, collision) {
                    (Some(c), false) => min_friction(c, &local, &hood.normals, &closing, gripper.max_width, sweep),
                    _ => None,
                };
                visit(CandidateOutcome {
                    view: vi,
                    angle: ai,
                    depth: di,
                    collision,
                    contacts: contacts.map(|c| (hood.indices[c.left], hood.indices[c.right])),
                    level,
                });
            }
        }
    }
}

fn require_normals(scene: &Scene) -> Result<&[Vec3]> {
    scene
        .normals
        .as_deref()
        .ok_or_else(|| Error::Missing("scene normals are required for graspness".into()))
}

/// Success fraction over the candidate grid for every point; table points
/// (object id 0) score 0. Candidates use the gripper's full opening width.
pub fn compute_raw_graspness(
    scene: &Scene,
    grid: &CandidateGraspGrid,
    gripper: &GripperModel,
) -> Result<RawGraspness> {
    scene.validate()?;
    grid.validate()?;
    gripper.validate()?;
    let normals = require_normals(scene)?;
    let reach = gripper.reach(grid.max_depth(), 0.0) * (1.0 + 1e-9) + 1e-9;
    let index = PointGrid::new(&scene.points, reach);
    let total = grid.len() as f64;
    let sweep = [grid.friction];
    let per_point: Vec<(u32, Option<usize>)> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            if scene.object_ids[i] == 0 {
                return (0, None);
            }
            let center = scene.points[i];
            let hood = Neighborhood::gather(scene, normals, &index, &center, reach);
            let mut per_view = vec![0u32; grid.views.len()];
            evaluate_point(&hood, &center, grid, gripper, &sweep, |o| {
                if o.level.is_some() {
                    per_view[o.view] += 1;
                }
            });
            let count: u32 = per_view.iter().sum();
            let best = (count > 0).then(|| {
                // first index wins ties
                per_view
                    .iter()
                    .enumerate()
                    .fold((0, 0), |best, (v, c)| if *c > best.1 { (v, *c) } else { best })
                    .0
            });
            (count, best)
        })
        .collect();
    Ok(RawGraspness {
        scores: per_point.iter().map(|(c, _)| *c as f64 / total).collect(),
        successes: per_point.iter().map(|(c, _)| *c).collect(),
        best_view: per_point.into_iter().map(|(_, b)| b).collect(),
    })
}

/// Every candidate at `point`, scored by the friction sweep: a candidate
/// that first closes at sweep index `l` scores `(6 - l) / 6`, anything that
/// collides or never closes scores 0. Grasps keep the full opening width and
/// are centered on the point.
pub fn enumerate_candidates(
    scene: &Scene,
    grid: &CandidateGraspGrid,
    gripper: &GripperModel,
    points: &[usize],
) -> Result<Vec<GraspPose>> {
    Ok(label_points(scene, grid, gripper, points, false)?
        .into_iter()
        .flatten()
        .collect())
}

/// Successful candidates at `points`, narrowed onto their contacts: the
/// center moves to the contact midpoint along the closing axis and the width
/// shrinks to the contact gap plus [`WIDTH_MARGIN`] per side. Scores follow
/// [`enumerate_candidates`]. Output is grouped per input point.
pub fn label_grasps(
    scene: &Scene,
    grid: &CandidateGraspGrid,
    gripper: &GripperModel,
    points: &[usize],
) -> Result<Vec<Vec<GraspPose>>> {
    label_points(scene, grid, gripper, points, true)
}

fn sweep_score(level: Option<usize>) -> f64 {
    level.map_or(0.0, |l| (FRICTION_SWEEP.len() - l) as f64 / FRICTION_SWEEP.len() as f64)
}

fn label_points(
    scene: &Scene,
    grid: &CandidateGraspGrid,
    gripper: &GripperModel,
    points: &[usize],
    refine: bool,
) -> Result<Vec<Vec<GraspPose>>> {
    scene.validate()?;
    grid.validate()?;
    gripper.validate()?;
    let normals = require_normals(scene)?;
    if let Some(i) = points.iter().find(|&&i| i >= scene.len()) {
        return Err(Error::InvalidArgument(format!("point index {i} out of range")));
    }
    let reach = gripper.reach(grid.max_depth(), 0.0) * (1.0 + 1e-9) + 1e-9;
    let index = PointGrid::new(&scene.points, reach);
    Ok(points
        .par_iter()
        .map(|&i| {
            let center = scene.points[i];
            let id = scene.object_ids[i];
            let hood = Neighborhood::gather(scene, normals, &index, &center, reach);
            let mut out = Vec::new();
            evaluate_point(&hood, &center, grid, gripper, &FRICTION_SWEEP, |o| {
                let mut g = grid.candidate(center, o.view, o.angle, o.depth, gripper.max_width);
                g.score = sweep_score(o.level);
                g.object_id = (id != 0).then_some(id);
                if !refine {
                    out.push(g);
                    return;
                }
                let (Some(_), Some((l, r))) = (o.level, o.contacts) else {
                    return;
                };
                let yl = g.to_local(&scene.points[l]).y;
                let yr = g.to_local(&scene.points[r]).y;
                let width = (yr - yl + 2.0 * WIDTH_MARGIN).min(gripper.max_width);
                g.center += g.closing() * ((yl + yr) / 2.0);
                g.width = width;
                let boxes = GripperBoxes::new(gripper, width, g.depth, 0.0);
                let local: Vec<Vec3> = hood.points.iter().map(|p| g.to_local(p)).collect();
                let collision = local.iter().any(|p| boxes.collides(p));
                let level = match (find_contacts(&boxes, &local), collision) {
                    (Some(c), false) => min_friction(&c, &local, &hood.normals, &g.closing(), width, &FRICTION_SWEEP),
                    _ => None,
                };
                g.score = sweep_score(level);
                if g.score > 0.0 {
                    out.push(g);
                }
            });
            out
        })
        .collect())
}

/// Min-max normalization within each object id; background (id 0) maps to 0.
/// A constant object maps to 0 when its value is 0 and to 1 otherwise.
pub fn normalize_instance(raw: &[f64], object_ids: &[u32]) -> Vec<f64> {
    assert_eq!(raw.len(), object_ids.len(), "raw scores and object ids differ in length");
    let mut ranges: std::collections::BTreeMap<u32, (f64, f64)> = std::collections::BTreeMap::new();
    for (s, id) in raw.iter().zip(object_ids) {
        if *id == 0 {
            continue;
        }
        let e = ranges.entry(*id).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(*s);
        e.1 = e.1.max(*s);
    }
    raw.iter()
        .zip(object_ids)
        .map(|(s, id)| {
            if *id == 0 {
                return 0.0;
            }
            let (lo, hi) = ranges[id];
            if hi > lo {
                (s - lo) / (hi - lo)
            } else if hi == 0.0 {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Global min-max normalization; an all-equal input maps to zeros.
pub fn normalize_scene(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// The `m` highest-scoring points (ties by ascending index). Each seed's view
/// is its preferred view when one is given, else the inward normal, else
/// straight down (-z).
pub fn sample_seeds(
    scores: &[f64],
    scene: &Scene,
    m: usize,
    preferred_views: Option<&[Option<Vec3>]>,
) -> Result<SeedSet> {
    if scores.len() != scene.len() {
        return Err(Error::Shape("graspness length differs from point count".into()));
    }
    if m > scene.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {m} seeds from {} points",
            scene.len()
        )));
    }
    if let Some(p) = preferred_views {
        if p.len() != scene.len() {
            return Err(Error::Shape("view table length differs from point count".into()));
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    let views = order
        .iter()
        .map(|&i| {
            if let Some(v) = preferred_views.and_then(|p| p[i]) {
                return v.normalize();
            }
            match scene.normals.as_ref().map(|n| n[i]) {
                Some(n) if is_valid_normal(&n) => -n.normalize(),
                _ => -Vec3::z(),
            }
        })
        .collect();
    Ok(SeedSet { indices: order, views })
}

/// Serializable grid settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub views: usize,
    pub angles: usize,
    pub depths: Vec<f64>,
    pub friction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            views: DEFAULT_VIEWS,
            angles: DEFAULT_ANGLES,
            depths: DEFAULT_DEPTHS.to_vec(),
            friction: DEFAULT_LABEL_FRICTION,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<CandidateGraspGrid> {
        let grid = CandidateGraspGrid::new(self.views, self.angles, self.depths.clone(), self.friction);
        grid.validate()?;
        Ok(grid)
    }
}
