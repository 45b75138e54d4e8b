//! Uniform-grid radius queries.

use std::collections::HashMap;

use crate::geometry::Vec3;

pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { points, cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices of points within `radius` of `center`, ascending.
    pub fn within(&self, center: &Vec3, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let lo = Self::key(&(center - Vec3::repeat(radius)), self.cell);
        let hi = Self::key(&(center + Vec3::repeat(radius)), self.cell);
        let mut out = Vec::new();
        for x in lo.0..=hi.0 {
            for y in lo.1..=hi.1 {
                for z in lo.2..=hi.2 {
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        out.extend(
                            ids.iter()
                                .copied()
                                .filter(|&i| (self.points[i] - center).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
