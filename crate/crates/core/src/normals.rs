//! Surface normals from organized depth, and the histogram relating grasp
//! quality to the angle between the approach axis and the surface normal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, is_valid_normal, DepthImage, GraspPose, Scene, Vec3};
use crate::spatial::PointGrid;

/// Cross products shorter than this (m^2) are treated as degenerate.
pub const MIN_CROSS_NORM: f64 = 1e-12;

/// Maximum distance between a grasp center and the scene point it is
/// attributed to.
pub const SNAP_RADIUS: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    /// Aligned with the points of [`backproject`]; zero vector when invalid.
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

/// Normal at each back-projected pixel from its four neighbors `stride`
/// pixels away: `(p_right - p_left) x (p_down - p_up)`, normalized and
/// flipped to face the camera. Border pixels, pixels with an invalid
/// neighbor and degenerate cross products get the zero marker.
pub fn estimate_normals(d: &DepthImage, stride: usize) -> Result<NormalField> {
    if stride == 0 {
        return Err(Error::InvalidArgument("normal stride must be >= 1".into()));
    }
    let bp = backproject(d);
    let w = d.width;
    let h = d.height;
    let point_at = |u: usize, v: usize| bp.pixel_to_point[v * w + u].map(|i| bp.points[i]);
    let normals: Vec<Vec3> = bp
        .pixels
        .par_iter()
        .zip(bp.points.par_iter())
        .map(|(&(u, v), p)| {
            if u < stride || v < stride || u + stride >= w || v + stride >= h {
                return Vec3::zeros();
            }
            let (Some(right), Some(left), Some(down), Some(up)) = (
                point_at(u + stride, v),
                point_at(u - stride, v),
                point_at(u, v + stride),
                point_at(u, v - stride),
            ) else {
                return Vec3::zeros();
            };
            let n = (right - left).cross(&(down - up));
            let len = n.norm();
            if len < MIN_CROSS_NORM {
                return Vec3::zeros();
            }
            let n = n / len;
            if n.dot(p) > 0.0 {
                -n
            } else {
                n
            }
        })
        .collect();
    let valid = normals.iter().map(is_valid_normal).collect();
    Ok(NormalField { normals, valid })
}

/// Back-projected scene with estimated normals; every point gets object id 0.
pub fn depth_to_scene(d: &DepthImage, stride: usize) -> Result<Scene> {
    let field = estimate_normals(d, stride)?;
    let points = backproject(d).points;
    let ids = vec![0; points.len()];
    Scene::new(points, ids)?.with_normals(field.normals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleBin {
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_score: Option<f64>,
    /// Grasps from the top 1% by score that land in this bin.
    pub top_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewNormalHistogram {
    pub bin_width_deg: f64,
    pub bins: Vec<AngleBin>,
    /// Grasps used (snapped to a point with a valid normal).
    pub used: usize,
    /// Grasps dropped because no point with a valid normal was within
    /// [`SNAP_RADIUS`].
    pub unmatched: usize,
    /// Indices of bins holding any top-1% grasp.
    pub top_bins: Vec<usize>,
}

impl ViewNormalHistogram {
    /// Bin with the highest mean score (lowest index on ties).
    pub fn best_bin(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in self.bins.iter().enumerate() {
            if let Some(m) = b.mean_score {
                if best.is_none_or(|(_, s)| m > s) {
                    best = Some((i, m));
                }
            }
        }
        best.map(|b| b.0)
    }
}

/// Angle between `approach` and the inward normal `-n`, degrees.
pub fn approach_normal_angle(approach: &Vec3, outward_normal: &Vec3) -> f64 {
    let c = approach.normalize().dot(&(-outward_normal.normalize()));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Mean grasp score per angular bin of the approach-to-inward-normal angle.
/// Each grasp is attributed to the nearest scene point within
/// [`SNAP_RADIUS`] (lowest index on ties).
pub fn view_to_normal_statistics(
    scene: &Scene,
    grasps: &[GraspPose],
    bin_width_deg: f64,
) -> Result<ViewNormalHistogram> {
    if !(bin_width_deg > 0.0 && bin_width_deg <= 180.0) {
        return Err(Error::InvalidArgument(format!("bin width {bin_width_deg} deg")));
    }
    let normals = scene
        .normals
        .as_deref()
        .ok_or_else(|| Error::Missing("scene normals".into()))?;
    let nbins = (180.0 / bin_width_deg).ceil() as usize;
    let mut bins: Vec<AngleBin> = (0..nbins)
        .map(|b| AngleBin {
            lo_deg: b as f64 * bin_width_deg,
            hi_deg: ((b + 1) as f64 * bin_width_deg).min(180.0),
            count: 0,
            mean_score: None,
            top_count: 0,
        })
        .collect();
    if grasps.is_empty() || scene.is_empty() {
        return Ok(ViewNormalHistogram {
            bin_width_deg,
            bins: if grasps.is_empty() { Vec::new() } else { bins },
            used: 0,
            unmatched: grasps.len(),
            top_bins: Vec::new(),
        });
    }
    let index = PointGrid::new(&scene.points, SNAP_RADIUS);
    let assigned: Vec<Option<usize>> = grasps
        .par_iter()
        .map(|g| {
            let near = index.within(&g.center, SNAP_RADIUS);
            let best = near
                .into_iter()
                .map(|i| (i, (scene.points[i] - g.center).norm_squared()))
                .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                    Some((_, bd)) if bd <= d => acc,
                    _ => Some((i, d)),
                })?;
            let n = normals[best.0];
            if !is_valid_normal(&n) {
                return None;
            }
            let angle = approach_normal_angle(&g.approach(), &n);
            Some(((angle / bin_width_deg) as usize).min(nbins - 1))
        })
        .collect();

    let mut sums = vec![0.0; nbins];
    for (g, bin) in grasps.iter().zip(&assigned) {
        if let Some(b) = bin {
            bins[*b].count += 1;
            sums[*b] += g.score;
        }
    }
    for (bin, sum) in bins.iter_mut().zip(&sums) {
        if bin.count > 0 {
            bin.mean_score = Some(sum / bin.count as f64);
        }
    }

    let mut matched: Vec<usize> = (0..grasps.len()).filter(|&i| assigned[i].is_some()).collect();
    matched.sort_by(|&a, &b| grasps[b].score.total_cmp(&grasps[a].score).then(a.cmp(&b)));
    let top_n = matched.len().div_ceil(100);
    for &i in &matched[..top_n] {
        bins[assigned[i].unwrap()].top_count += 1;
    }
    let top_bins = (0..nbins).filter(|&b| bins[b].top_count > 0).collect();
    Ok(ViewNormalHistogram {
        bin_width_deg,
        bins,
        used: matched.len(),
        unmatched: grasps.len() - matched.len(),
        top_bins,
    })
}
