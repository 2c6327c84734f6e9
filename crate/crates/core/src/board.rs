//! Chessboard target geometry and the per-sensor features extracted from it.
//!
//! Board frame: origin at the centre of the inner-corner grid, `x` along the
//! grid columns (the board's width side), `y` along the rows (height side),
//! `z = x × y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardGeometry {
    /// Physical board extent along the grid columns, metres.
    pub width: f64,
    /// Physical board extent along the grid rows, metres.
    pub height: f64,
    pub square_size: f64,
    /// Inner corners as `(cols, rows)`.
    pub inner_corners: (usize, usize),
    /// Board centre relative to the grid centre, board frame, metres.
    #[serde(default)]
    pub grid_centre_offset: [f64; 3],
}

impl Default for BoardGeometry {
    /// 610 × 850 mm board, 95 mm squares, 5 × 7 inner corners.
    fn default() -> Self {
        Self {
            width: 0.610,
            height: 0.850,
            square_size: 0.095,
            inner_corners: (5, 7),
            grid_centre_offset: [0.0; 3],
        }
    }
}

impl BoardGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0 && self.square_size > 0.0) {
            return Err(Error::Config(
                "board width, height and square size must be positive".into(),
            ));
        }
        let (cols, rows) = self.inner_corners;
        if cols < 2 || rows < 2 {
            return Err(Error::Config(
                "board needs at least 2×2 inner corners".into(),
            ));
        }
        if (cols - 1) as f64 * self.square_size > self.width
            || (rows - 1) as f64 * self.square_size > self.height
        {
            return Err(Error::Config(
                "inner-corner grid does not fit inside the board".into(),
            ));
        }
        if self.grid_centre_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid centre offset must be finite".into()));
        }
        Ok(())
    }

    pub fn corner_count(&self) -> usize {
        self.inner_corners.0 * self.inner_corners.1
    }

    /// Board-frame position of inner corner `(col, row)`.
    pub fn grid_point(&self, col: usize, row: usize) -> Vec3 {
        let (cols, rows) = self.inner_corners;
        Vec3::new(
            (col as f64 - (cols - 1) as f64 / 2.0) * self.square_size,
            (row as f64 - (rows - 1) as f64 / 2.0) * self.square_size,
            0.0,
        )
    }

    /// All inner corners, row-major.
    pub fn grid_points(&self) -> Vec<Vec3> {
        let (cols, rows) = self.inner_corners;
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c, r)))
            .map(|(c, r)| self.grid_point(c, r))
            .collect()
    }

    pub fn centre_in_board(&self) -> Vec3 {
        Vec3::from(self.grid_centre_offset)
    }

    /// Physical outline corners in the board frame, counter-clockwise from `(+x, +y)`.
    pub fn outline_in_board(&self) -> [Vec3; 4] {
        let c = self.centre_in_board();
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        [
            c + Vec3::new(hw, hh, 0.0),
            c + Vec3::new(-hw, hh, 0.0),
            c + Vec3::new(-hw, -hh, 0.0),
            c + Vec3::new(hw, -hh, 0.0),
        ]
    }

    /// Physical edge lengths in feature order
    /// `[top-right, bottom-right, bottom-left, top-left]`, metres.
    ///
    /// The diamond is expected with a width side on its top-right.
    pub fn edge_lengths(&self) -> [f64; 4] {
        [self.width, self.height, self.width, self.height]
    }
}

/// Board features in one sensor's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardFeatures {
    /// Unit plane normal, facing the sensor.
    pub normal: Vec3,
    pub centre: Vec3,
    /// Diamond corners `[top, right, bottom, left]` as seen from the sensor.
    pub corners: [Vec3; 4],
    /// `[top-right, bottom-right, bottom-left, top-left]`, metres.
    pub edge_lengths: [f64; 4],
}

impl BoardFeatures {
    pub fn from_corners(normal: Vec3, corners: [Vec3; 4]) -> Self {
        let centre = (corners[0] + corners[1] + corners[2] + corners[3]) / 4.0;
        let edge_lengths = std::array::from_fn(|i| (corners[(i + 1) % 4] - corners[i]).norm());
        Self {
            normal,
            centre,
            corners,
            edge_lengths,
        }
    }

    /// Features of the same board seen in another frame.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            normal: t.rotation.apply(&self.normal),
            centre: t.apply(&self.centre),
            corners: self.corners.map(|c| t.apply(&c)),
            edge_lengths: self.edge_lengths,
        }
    }
}

/// In-plane `(right, up)` axes seen from a sensor looking along `-normal`.
pub(crate) fn view_axes(normal: &Vec3, up_hint: &Vec3) -> Result<(Vec3, Vec3)> {
    let up = up_hint - normal * normal.dot(up_hint);
    let len = up.norm();
    if len < 1e-6 {
        return Err(Error::DegenerateEdges(
            "board plane is perpendicular to the up direction".into(),
        ));
    }
    let up = up / len;
    Ok((up.cross(normal), up))
}

/// Orders four roughly-diamond corners as `[top, right, bottom, left]`.
pub(crate) fn order_diamond(
    corners: [Vec3; 4],
    normal: &Vec3,
    up_hint: &Vec3,
) -> Result<[Vec3; 4]> {
    let (right, up) = view_axes(normal, up_hint)?;
    let centre = (corners[0] + corners[1] + corners[2] + corners[3]) / 4.0;
    let planar: Vec<Vec2> = corners
        .iter()
        .map(|c| Vec2::new((c - centre).dot(&right), (c - centre).dot(&up)))
        .collect();
    let top = (0..4)
        .max_by(|&a, &b| planar[a].y.total_cmp(&planar[b].y))
        .expect("four corners");
    // Clockwise from the top as seen by the sensor.
    let angle_from_top = |i: usize| {
        let a = planar[i].y.atan2(planar[i].x);
        let t = planar[top].y.atan2(planar[top].x);
        (t - a).rem_euclid(std::f64::consts::TAU)
    };
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| angle_from_top(a).total_cmp(&angle_from_top(b)));
    Ok(order.map(|i| corners[i]))
}
