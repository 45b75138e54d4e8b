//! Grasp evaluation: gripper collision detection, antipodal force closure on
//! point clouds, grasp NMS, top-k average precision and width-scale bins.
//!
//! Gripper frame (grasp center at the origin, x = approach, y = closing,
//! z = finger axis), for width `w`, depth `d`, finger length `L`, finger
//! thickness `t`, base depth `b` and finger height `h`:
//!
//! ```text
//! closing region  x in [d-L, d]        |y| <  w/2           |z| <= h/2
//! fingers         x in [d-L, d]        w/2 <= |y| <= w/2+t  |z| <= h/2
//! base            x in [d-L-b, d-L]    |y| <= w/2+t         |z| <= h/2
//! ```
//!
//! Collision boxes are inflated by the clearance on every side; points in the
//! (uninflated) closing region never count as collisions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_between, GraspPose, Scene, Vec3};

/// Friction coefficients swept by the AP protocol.
pub const FRICTION_SWEEP: [f64; 6] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];

pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_NMS_TRANSLATION: f64 = 0.03;
pub const DEFAULT_NMS_ROTATION_DEG: f64 = 30.0;

/// Parallel-jaw gripper geometry, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperModel {
    pub max_width: f64,
    pub finger_length: f64,
    pub finger_thickness: f64,
    pub base_depth: f64,
    /// Extent of fingers and base along the finger axis.
    pub height: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel {
            max_width: 0.10,
            finger_length: 0.06,
            finger_thickness: 0.01,
            base_depth: 0.02,
            height: 0.02,
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.max_width,
            self.finger_length,
            self.finger_thickness,
            self.base_depth,
            self.height,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid gripper model {self:?}")));
        }
        Ok(())
    }

    /// Radius around the grasp center that contains every gripper box for
    /// depths up to `max_depth` and the given clearance.
    pub fn reach(&self, max_depth: f64, clearance: f64) -> f64 {
        let x = (max_depth + clearance).max(self.finger_length + self.base_depth + clearance);
        let y = self.max_width / 2.0 + self.finger_thickness + clearance;
        let z = self.height / 2.0 + clearance;
        (x * x + y * y + z * z).sqrt()
    }
}

/// Axis-aligned box in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl LocalBox {
    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    fn inflate(self, c: f64) -> Self {
        LocalBox {
            min: self.min - Vec3::repeat(c),
            max: self.max + Vec3::repeat(c),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }
}

/// The three collision boxes and the closing region for a width/depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperBoxes {
    pub left_finger: LocalBox,
    pub right_finger: LocalBox,
    pub base: LocalBox,
    pub width: f64,
    pub depth: f64,
    pub finger_length: f64,
    pub half_height: f64,
}

impl GripperBoxes {
    pub fn new(gripper: &GripperModel, width: f64, depth: f64, clearance: f64) -> Self {
        let hw = width / 2.0;
        let t = gripper.finger_thickness;
        let hh = gripper.height / 2.0;
        let tip = depth;
        let root = depth - gripper.finger_length;
        let left_finger = LocalBox {
            min: Vec3::new(root, -hw - t, -hh),
            max: Vec3::new(tip, -hw, hh),
        };
        let right_finger = LocalBox {
            min: Vec3::new(root, hw, -hh),
            max: Vec3::new(tip, hw + t, hh),
        };
        let base = LocalBox {
            min: Vec3::new(root - gripper.base_depth, -hw - t, -hh),
            max: Vec3::new(root, hw + t, hh),
        };
        GripperBoxes {
            left_finger: left_finger.inflate(clearance),
            right_finger: right_finger.inflate(clearance),
            base: base.inflate(clearance),
            width,
            depth,
            finger_length: gripper.finger_length,
            half_height: hh,
        }
    }

    /// Swept volume between the fingers.
    #[inline]
    pub fn in_closing_region(&self, p: &Vec3) -> bool {
        p.x >= self.depth - self.finger_length
            && p.x <= self.depth
            && p.y > -self.width / 2.0
            && p.y < self.width / 2.0
            && p.z >= -self.half_height
            && p.z <= self.half_height
    }

    #[inline]
    pub fn collides(&self, p: &Vec3) -> bool {
        !self.in_closing_region(p)
            && (self.left_finger.contains(p) || self.right_finger.contains(p) || self.base.contains(p))
    }
}

/// Collision test over points already expressed in the gripper frame.
pub fn collides_local(boxes: &GripperBoxes, local: &[Vec3]) -> bool {
    local.iter().any(|p| boxes.collides(p))
}

/// True iff any scene point lies inside a (clearance-inflated) gripper box.
pub fn collision_check(grasp: &GraspPose, scene: &Scene, gripper: &GripperModel, clearance: f64) -> bool {
    let boxes = GripperBoxes::new(gripper, grasp.width, grasp.depth, clearance);
    scene.points.iter().any(|p| boxes.collides(&grasp.to_local(p)))
}

/// Contacts found by the two closing fingers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contacts {
    /// Point first met by the finger at `-w/2` (smallest local y).
    pub left: usize,
    /// Point first met by the finger at `+w/2` (largest local y).
    pub right: usize,
}

/// Finds the contact pair among points in the closing region. `local[i]`
/// must be the gripper-frame coordinates of scene point `i`; ties go to
/// the lower index.
pub fn find_contacts(boxes: &GripperBoxes, local: &[Vec3]) -> Option<Contacts> {
    let mut left: Option<usize> = None;
    let mut right: Option<usize> = None;
    for (i, p) in local.iter().enumerate() {
        if !boxes.in_closing_region(p) {
            continue;
        }
        if left.is_none_or(|l| p.y < local[l].y) {
            left = Some(i);
        }
        if right.is_none_or(|r| p.y > local[r].y) {
            right = Some(i);
        }
    }
    match (left, right) {
        (Some(left), Some(right)) if left != right => Some(Contacts { left, right }),
        _ => None,
    }
}

/// Cosine of the angle between a contact normal's line and the closing axis.
#[inline]
pub fn contact_alignment(normal: &Vec3, closing: &Vec3) -> f64 {
    normal.dot(closing).abs()
}

/// Smallest friction coefficient in `sweep` at which the contact pair holds,
/// or `None` when it fails at every level. Normals are compared to the
/// closing axis as lines, so camera-facing and outward normals behave alike.
pub fn min_friction(
    contacts: &Contacts,
    local: &[Vec3],
    normals: &[Vec3],
    closing: &Vec3,
    width: f64,
    sweep: &[f64],
) -> Option<usize> {
    let sep = (local[contacts.right] - local[contacts.left]).norm();
    if sep > width {
        return None;
    }
    let n_l = &normals[contacts.left];
    let n_r = &normals[contacts.right];
    if *n_l == Vec3::zeros() || *n_r == Vec3::zeros() {
        return None;
    }
    let worst = contact_alignment(n_l, closing).min(contact_alignment(n_r, closing));
    sweep.iter().position(|mu| worst >= friction_cone_cos(*mu))
}

/// `cos(arctan(mu))`.
#[inline]
pub fn friction_cone_cos(mu: f64) -> f64 {
    1.0 / (1.0 + mu * mu).sqrt()
}

fn scene_normals(scene: &Scene) -> Option<&[Vec3]> {
    scene.normals.as_deref()
}

/// Antipodal force-closure test against the point cloud at friction `mu`.
/// A missing contact, missing normals or out-of-cone normal is a failure.
pub fn force_closure(grasp: &GraspPose, scene: &Scene, gripper: &GripperModel, mu: f64) -> bool {
    let Some(normals) = scene_normals(scene) else {
        return false;
    };
    let boxes = GripperBoxes::new(gripper, grasp.width, grasp.depth, 0.0);
    let local: Vec<Vec3> = scene.points.iter().map(|p| grasp.to_local(p)).collect();
    let Some(contacts) = find_contacts(&boxes, &local) else {
        return false;
    };
    min_friction(&contacts, &local, normals, &grasp.closing(), grasp.width, &[mu]).is_some()
}

/// Greedy NMS: by descending score (ties by index), drop a grasp when a
/// retained grasp is both closer than `t_thresh` meters and within
/// `r_thresh_deg` degrees of geodesic rotation.
pub fn grasp_nms(grasps: &[GraspPose], t_thresh: f64, r_thresh_deg: f64) -> Vec<GraspPose> {
    let r_thresh = r_thresh_deg.to_radians();
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&a, &b| grasps[b].score.total_cmp(&grasps[a].score).then(a.cmp(&b)));
    let mut kept: Vec<&GraspPose> = Vec::new();
    for i in order {
        let g = &grasps[i];
        let suppressed = kept.iter().any(|k| {
            (k.center - g.center).norm() < t_thresh
                && rotation_angle_between(&k.rotation, &g.rotation) < r_thresh
        });
        if !suppressed {
            kept.push(g);
        }
    }
    kept.into_iter().cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBin {
    Small,
    Medium,
    Large,
}

/// Small `[0, 4)` cm, Medium `[4, 7)` cm, Large `[7, 10]` cm.
pub fn scale_bin(width: f64) -> Result<ScaleBin> {
    match width {
        w if (0.0..0.04).contains(&w) => Ok(ScaleBin::Small),
        w if (0.04..0.07).contains(&w) => Ok(ScaleBin::Medium),
        w if (0.07..=0.10).contains(&w) => Ok(ScaleBin::Large),
        w => Err(Error::InvalidArgument(format!(
            "grasp width {w} outside the [0, 0.10] m scale range"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub top_k: usize,
    pub clearance: f64,
    pub collision_detection: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            top_k: DEFAULT_TOP_K,
            clearance: 0.0,
            collision_detection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub grasp: crate::io::GraspRecord,
    /// One entry per friction level in [`FRICTION_SWEEP`].
    pub success: Vec<bool>,
    pub collision: bool,
    pub scale: ScaleBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAp {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_overall: f64,
    /// Per-friction AP, aligned with `frictions`.
    pub ap_by_friction: Vec<f64>,
    pub frictions: Vec<f64>,
    /// AP within each width bin over that bin's members of the ranked list;
    /// `None` for an empty bin.
    pub ap_by_scale: ScaleAp,
    pub per_grasp: Vec<GraspOutcome>,
}

/// Mean over `k = 1..=slots` of Precision@k for a ranked success list.
/// Slots past the end of `success` count as failures.
pub fn average_precision(success: &[bool], slots: usize) -> f64 {
    if slots == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for k in 1..=slots {
        if success.get(k - 1).copied().unwrap_or(false) {
            hits += 1;
        }
        total += hits as f64 / k as f64;
    }
    total / slots as f64
}

/// Per-grasp success at every friction level plus the collision flag.
pub fn grasp_outcome(
    grasp: &GraspPose,
    scene: &Scene,
    gripper: &GripperModel,
    options: &EvalOptions,
) -> Result<GraspOutcome> {
    let scale = scale_bin(grasp.width)?;
    let collision = options.collision_detection && collision_check(grasp, scene, gripper, options.clearance);
    let boxes = GripperBoxes::new(gripper, grasp.width, grasp.depth, 0.0);
    let local: Vec<Vec3> = scene.points.iter().map(|p| grasp.to_local(p)).collect();
    let level = match (scene_normals(scene), find_contacts(&boxes, &local)) {
        (Some(normals), Some(c)) => {
            min_friction(&c, &local, normals, &grasp.closing(), grasp.width, &FRICTION_SWEEP)
        }
        _ => None,
    };
    let success = (0..FRICTION_SWEEP.len())
        .map(|i| !collision && level.is_some_and(|l| l <= i))
        .collect();
    Ok(GraspOutcome {
        grasp: grasp.into(),
        success,
        collision,
        scale,
    })
}

fn mean_ap(outcomes: &[&GraspOutcome], slots: usize) -> f64 {
    let per: Vec<f64> = (0..FRICTION_SWEEP.len())
        .map(|i| {
            let s: Vec<bool> = outcomes.iter().map(|o| o.success[i]).collect();
            average_precision(&s, slots)
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Top-k AP over the friction sweep. Grasps are expected to be NMS-filtered
/// already; they are ranked here by descending score (ties by index).
pub fn evaluate_ap(
    grasps: &[GraspPose],
    scene: &Scene,
    gripper: &GripperModel,
    options: &EvalOptions,
) -> Result<EvalReport> {
    use rayon::prelude::*;

    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&a, &b| grasps[b].score.total_cmp(&grasps[a].score).then(a.cmp(&b)));
    order.truncate(options.top_k);
    let per_grasp: Vec<GraspOutcome> = order
        .par_iter()
        .map(|&i| grasp_outcome(&grasps[i], scene, gripper, options))
        .collect::<Result<_>>()?;

    let ap_by_friction: Vec<f64> = (0..FRICTION_SWEEP.len())
        .map(|i| {
            let s: Vec<bool> = per_grasp.iter().map(|o| o.success[i]).collect();
            average_precision(&s, options.top_k)
        })
        .collect();
    let ap_overall = if per_grasp.is_empty() {
        0.0
    } else {
        ap_by_friction.iter().sum::<f64>() / ap_by_friction.len() as f64
    };
    let bin_ap = |bin: ScaleBin| {
        let members: Vec<&GraspOutcome> = per_grasp.iter().filter(|o| o.scale == bin).collect();
        (!members.is_empty()).then(|| mean_ap(&members, members.len()))
    };
    Ok(EvalReport {
        ap_overall,
        ap_by_friction,
        frictions: FRICTION_SWEEP.to_vec(),
        ap_by_scale: ScaleAp {
            small: bin_ap(ScaleBin::Small),
            medium: bin_ap(ScaleBin::Medium),
            large: bin_ap(ScaleBin::Large),
        },
        per_grasp,
    })
}
