//! Cylinder grouping around seed points at several radii, and max-pooled
//! aggregation into the `G x M x C` multi-range tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{approach_rotation, to_frame, Features, Mat3, Scene, SeedSet, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CylinderSpec {
    /// Strictly ascending, meters.
    pub radii: Vec<f64>,
    pub h_min: f64,
    pub h_max: f64,
    /// Maximum members kept per group.
    pub max_points: usize,
}

impl Default for CylinderSpec {
    fn default() -> Self {
        CylinderSpec {
            radii: vec![0.01, 0.025, 0.05, 0.10],
            h_min: -0.02,
            h_max: 0.04,
            max_points: 64,
        }
    }
}

impl CylinderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("cylinder radii must be positive".into()));
        }
        if self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("cylinder radii must be strictly ascending".into()));
        }
        if !(self.h_min < self.h_max) || !self.h_min.is_finite() || !self.h_max.is_finite() {
            return Err(Error::InvalidArgument("cylinder needs h_min < h_max".into()));
        }
        if self.max_points == 0 {
            return Err(Error::InvalidArgument("cylinder group size K must be >= 1".into()));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.radii.len()
    }
}

/// Member indices per `(range, seed)`: `groups[g][m]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CylinderGroups {
    pub groups: Vec<Vec<Vec<usize>>>,
}

/// Seed frame: origin at the seed, x along the view.
pub fn seed_frame(view: &Vec3) -> Mat3 {
    approach_rotation(view, 0.0)
}

/// Axial coordinate and radial distance of `p` in the cylinder of a seed.
#[inline]
pub fn cylinder_coords(seed: &Vec3, axis: &Vec3, p: &Vec3) -> (f64, f64) {
    let d = p - seed;
    let axial = d.dot(axis);
    let radial = (d - axis * axial).norm();
    (axial, radial)
}

/// Points whose axial coordinate lies in `[h_min, h_max]` and whose radial
/// distance is within `radii[g]`, sorted by radial distance then index and
/// truncated at `K`.
pub fn cylinder_group(scene: &Scene, seeds: &SeedSet, spec: &CylinderSpec) -> Result<CylinderGroups> {
    spec.validate()?;
    seeds.validate(scene.len())?;
    let r_max = *spec.radii.last().unwrap();
    let per_seed: Vec<Vec<Vec<usize>>> = seeds
        .indices
        .par_iter()
        .zip(seeds.views.par_iter())
        .map(|(&si, view)| {
            let seed = scene.points[si];
            let axis = view.normalize();
            let mut members: Vec<(f64, usize)> = scene
                .points
                .iter()
                .enumerate()
                .filter_map(|(j, p)| {
                    let (axial, radial) = cylinder_coords(&seed, &axis, p);
                    (axial >= spec.h_min && axial <= spec.h_max && radial <= r_max).then_some((radial, j))
                })
                .collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            spec.radii
                .iter()
                .map(|r| {
                    members
                        .iter()
                        .take_while(|(radial, _)| radial <= r)
                        .take(spec.max_points)
                        .map(|(_, j)| *j)
                        .collect()
                })
                .collect()
        })
        .collect();
    let groups = (0..spec.groups())
        .map(|g| per_seed.iter().map(|s| s[g].clone()).collect())
        .collect();
    Ok(CylinderGroups { groups })
}

/// `G x M x C` pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRangeFeatures {
    pub groups: usize,
    pub seeds: usize,
    pub channels: usize,
    /// Row-major `[g][m][c]`.
    pub values: Vec<f64>,
    /// Members per `(g, m)` before padding, `[g][m]`.
    pub counts: Vec<usize>,
}

impl MultiRangeFeatures {
    pub fn at(&self, g: usize, m: usize) -> &[f64] {
        let o = (g * self.seeds + m) * self.channels;
        &self.values[o..o + self.channels]
    }
}

/// Each member contributes its feature row followed by its seed-frame
/// coordinates; the group vector is the elementwise max over members, or
/// zeros for an empty group.
pub fn aggregate_features(
    scene: &Scene,
    features: Option<&Features>,
    seeds: &SeedSet,
    groups: &CylinderGroups,
) -> Result<MultiRangeFeatures> {
    let features = features
        .or(scene.features.as_ref())
        .ok_or_else(|| Error::Missing("scene features".into()))?;
    if features.len() != scene.len() {
        return Err(Error::Shape("feature rows differ from point count".into()));
    }
    let g_count = groups.groups.len();
    let m_count = seeds.len();
    if groups.groups.iter().any(|g| g.len() != m_count) {
        return Err(Error::Shape("groups and seeds differ in length".into()));
    }
    let c_in = features.width;
    let channels = c_in + 3;
    let frames: Vec<Mat3> = seeds.views.iter().map(seed_frame).collect();
    let mut values = vec![0.0; g_count * m_count * channels];
    let mut counts = vec![0; g_count * m_count];
    values
        .par_chunks_mut(channels)
        .zip(counts.par_iter_mut())
        .enumerate()
        .for_each(|(gm, (out, count))| {
            let (g, m) = (gm / m_count, gm % m_count);
            let members = &groups.groups[g][m];
            *count = members.len();
            if members.is_empty() {
                return;
            }
            out.fill(f64::NEG_INFINITY);
            let seed = scene.points[seeds.indices[m]];
            for &j in members {
                let local = to_frame(&frames[m], &seed, &scene.points[j]);
                let row = features.row(j).iter().chain(local.iter());
                for (o, v) in out.iter_mut().zip(row) {
                    *o = o.max(*v);
                }
            }
        });
    Ok(MultiRangeFeatures {
        groups: g_count,
        seeds: m_count,
        channels,
        values,
        counts,
    })
}
