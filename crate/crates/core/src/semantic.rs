//! Mask-based grasp selection and coarse-to-fine crop arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, GraspPose, Mask};

/// Largest allowed gap between a grasp center's depth and the depth map
/// at its pixel, meters.
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.02;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub u_min: usize,
    pub v_min: usize,
    pub u_max: usize,
    pub v_max: usize,
}

impl CropRegion {
    pub fn full(width: usize, height: usize) -> Self {
        CropRegion {
            u_min: 0,
            v_min: 0,
            u_max: width.saturating_sub(1),
            v_max: height.saturating_sub(1),
        }
    }

    pub fn width(&self) -> usize {
        self.u_max + 1 - self.u_min
    }

    pub fn height(&self) -> usize {
        self.v_max + 1 - self.v_min
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.u_min > self.u_max || self.v_min > self.v_max {
            return Err(Error::InvalidArgument(format!("empty crop region {self:?}")));
        }
        if self.u_max >= width || self.v_max >= height {
            return Err(Error::InvalidArgument(format!(
                "crop region {self:?} outside a {width}x{height} image"
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for CropRegion {
    type Err = Error;

    /// Parses `u_min,v_min,u_max,v_max`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("crop '{s}': {e}")))?;
        let [u_min, v_min, u_max, v_max] = parts[..] else {
            return Err(Error::InvalidArgument(format!("crop '{s}' needs four values")));
        };
        Ok(CropRegion {
            u_min,
            v_min,
            u_max,
            v_max,
        })
    }
}

/// Pixel a camera-frame point projects to, rounded to the nearest pixel.
pub fn project_to_pixel(depth: &DepthImage, p: &crate::geometry::Vec3) -> Option<(usize, usize)> {
    let (u, v) = depth.intrinsics.project(p)?;
    let (u, v) = (u.round(), v.round());
    if u < 0.0 || v < 0.0 || u >= depth.width as f64 || v >= depth.height as f64 {
        return None;
    }
    Some((u as usize, v as usize))
}

/// Keeps grasps whose center projects onto an inside-mask pixel whose depth
/// agrees with the center's depth within `tolerance`. Order is preserved.
pub fn filter_by_mask(grasps: &[GraspPose], mask: &Mask, depth: &DepthImage, tolerance: f64) -> Result<Vec<GraspPose>> {
    if (mask.width, mask.height) != (depth.width, depth.height) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but depth is {}x{}",
            mask.width, mask.height, depth.width, depth.height
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!("depth tolerance {tolerance}")));
    }
    let keep: Vec<bool> = grasps
        .par_iter()
        .map(|g| match project_to_pixel(depth, &g.center) {
            Some((u, v)) => {
                let z = depth.at(u, v);
                mask.get(u, v) && z > 0.0 && (g.center.z - z).abs() <= tolerance
            }
            None => false,
        })
        .collect();
    Ok(grasps
        .iter()
        .zip(keep)
        .filter_map(|(g, k)| k.then(|| g.clone()))
        .collect())
}

/// Embeds a mask given in crop coordinates into a `width x height` image.
pub fn crop_and_lift(region: &CropRegion, part_mask: &Mask, width: usize, height: usize) -> Result<Mask> {
    region.validate(width, height)?;
    if (part_mask.width, part_mask.height) != (region.width(), region.height()) {
        return Err(Error::Shape(format!(
            "crop mask is {}x{} but region is {}x{}",
            part_mask.width,
            part_mask.height,
            region.width(),
            region.height()
        )));
    }
    let mut out = Mask::new(width, height, false);
    for v in 0..region.height() {
        for u in 0..region.width() {
            out.set(region.u_min + u, region.v_min + v, part_mask.get(u, v));
        }
    }
    Ok(out)
}

/// Cuts `region` out of a full-size mask.
pub fn crop(mask: &Mask, region: &CropRegion) -> Result<Mask> {
    region.validate(mask.width, mask.height)?;
    let mut out = Mask::new(region.width(), region.height(), false);
    for v in 0..region.height() {
        for u in 0..region.width() {
            out.set(u, v, mask.get(region.u_min + u, region.v_min + v));
        }
    }
    Ok(out)
}

/// The `top_n` highest-scoring grasps, ties broken by input order.
pub fn select_best(grasps: &[GraspPose], top_n: usize) -> Vec<GraspPose> {
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&a, &b| grasps[b].score.total_cmp(&grasps[a].score).then(a.cmp(&b)));
    order.into_iter().take(top_n).map(|i| grasps[i].clone()).collect()
}
