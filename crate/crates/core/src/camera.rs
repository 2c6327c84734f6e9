//! Camera-side board features from detected inner-corner pixels.
//!
//! The board pose comes from a normalized DLT homography between the board
//! plane and the undistorted image plane, decomposed into `[r1 r2 t]` and
//! projected onto the nearest rotation. An optional Gauss-Newton pass
//! refines the pose on grid-corner reprojection.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector6};

use crate::board::{order_diamond, BoardFeatures, BoardGeometry};
use crate::error::{Error, Result};
use crate::geometry::{
    nearest_rotation, CameraIntrinsics, Mat3, RigidTransform, Rotation, Vec2, Vec3,
};

pub const UNDISTORT_MAX_ITERS: usize = 20;
pub const UNDISTORT_TOL: f64 = 1e-10;
const REFINE_MAX_ITERS: usize = 10;

/// Inner-corner pixels, row-major over a `(cols, rows)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerObservations {
    pub pixels: Vec<Vec2>,
    pub grid: (usize, usize),
}

impl CornerObservations {
    pub fn new(pixels: Vec<Vec2>, grid: (usize, usize)) -> Result<Self> {
        if pixels.len() != grid.0 * grid.1 {
            return Err(Error::DegenerateCorners(format!(
                "expected {} corners for a {}x{} grid, got {}",
                grid.0 * grid.1,
                grid.0,
                grid.1,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegenerateCorners("non-finite corner".into()));
        }
        Ok(Self { pixels, grid })
    }

    /// Reads a `u,v` CSV. Grid shape is supplied by the caller.
    pub fn read_csv(path: impl AsRef<Path>, grid: (usize, usize)) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let pixels = read_pixels(f, path)?;
        Self::new(pixels, grid).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let mut w =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = || -> std::io::Result<()> {
            if let Some(c) = comment {
                writeln!(w, "# {c}")?;
            }
            writeln!(w, "u,v")?;
            for p in &self.pixels {
                writeln!(w, "{},{}", p.x, p.y)?;
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))
    }
}

fn read_pixels<R: Read>(reader: R, label: &Path) -> Result<Vec<Vec2>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(label, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["u", "v"] {
        return Err(Error::parse(label, "header must be u,v"));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(label, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(label, format!("record {}: bad value", line + 1)))
        };
        out.push(Vec2::new(num(0)?, num(1)?));
    }
    Ok(out)
}

/// Pixels to undistorted normalized image coordinates.
pub fn undistort_points(obs: &CornerObservations, k: &CameraIntrinsics) -> Result<Vec<Vec2>> {
    obs.pixels
        .iter()
        .map(|px| {
            let d = k.pixel_to_distorted_normalized(px);
            k.distortion
                .undistort(&d, UNDISTORT_MAX_ITERS, UNDISTORT_TOL)
        })
        .collect()
}

/// Similarity that moves points to zero mean and `√2` mean distance.
fn normalizing_transform(pts: &[Vec2]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean_dist > 0.0) {
        return Err(Error::DegenerateCorners("all corners coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * c.x,
        0.0,
        s,
        -s * c.y,
        0.0,
        0.0,
        1.0,
    ))
}

fn apply_h(h: &Matrix3<f64>, p: &Vec2) -> Vec2 {
    let v = h * Vec3::new(p.x, p.y, 1.0);
    Vec2::new(v.x / v.z, v.y / v.z)
}

/// Normalized DLT homography mapping `src` onto `dst`.
pub fn homography_dlt(src: &[Vec2], dst: &[Vec2]) -> Result<Matrix3<f64>> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::DegenerateCorners(format!(
            "homography needs 4 correspondences, got {n}"
        )));
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let s = apply_h(&ts, &src[i]);
        let d = apply_h(&td, &dst[i]);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        let r1 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (smallest, _) = sv[0];
    if sv[1].1 <= 1e-10 * sv[8].1 {
        return Err(Error::DegenerateCorners("corners are collinear".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // A rank-deficient map squashes the grid onto a line.
    if hn.determinant().abs() <= 1e-8 * hn.norm().powi(3) {
        return Err(Error::DegenerateCorners("corners are collinear".into()));
    }
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCorners("normalization is singular".into()))?;
    Ok(td_inv * hn * ts)
}

/// Board-to-camera transform from a plane homography in normalized coordinates.
fn decompose_homography(h: &Matrix3<f64>) -> Result<RigidTransform> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let mut scale = 0.5 * (h1.norm() + h2.norm());
    if !(scale > 0.0) {
        return Err(Error::DegenerateCorners("homography has zero scale".into()));
    }
    if h3.z < 0.0 {
        scale = -scale;
    }
    let r1 = h1 / scale;
    let r2 = h2 / scale;
    let r = nearest_rotation(&Mat3::from_columns(&[r1, r2, r1.cross(&r2)]));
    Ok(RigidTransform::new(
        Rotation::from_matrix_unchecked(r),
        h3 / scale,
    ))
}

fn project_normalized(pose: &RigidTransform, p: &Vec3) -> Vec2 {
    let c = pose.apply(p);
    Vec2::new(c.x / c.z, c.y / c.z)
}

/// Gauss-Newton on normalized-coordinate reprojection of the grid corners.
fn refine_pose(pose: RigidTransform, grid: &[Vec3], observed: &[Vec2]) -> RigidTransform {
    let residuals = |p: &RigidTransform| -> Vec<f64> {
        grid.iter()
            .zip(observed)
            .flat_map(|(g, o)| {
                let r = project_normalized(p, g) - o;
                [r.x, r.y]
            })
            .collect()
    };
    let perturb = |p: &RigidTransform, d: &Vector6<f64>| {
        let w = Vec3::new(d[0], d[1], d[2]);
        RigidTransform::new(
            Rotation::from_rotation_vector(&w).compose(&p.rotation),
            p.translation + Vec3::new(d[3], d[4], d[5]),
        )
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut pose = pose;
    let mut r0 = residuals(&pose);
    for _ in 0..REFINE_MAX_ITERS {
        let m = r0.len();
        let mut jac = DMatrix::<f64>::zeros(m, 6);
        let h = 1e-7;
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = h;
            let rp = residuals(&perturb(&pose, &d));
            d[j] = -h;
            let rm = residuals(&perturb(&pose, &d));
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let r = nalgebra::DVector::from_vec(r0.clone());
        let jtj: Matrix6<f64> = (jac.transpose() * &jac)
            .fixed_view::<6, 6>(0, 0)
            .into_owned();
        let jtr: Vector6<f64> = (jac.transpose() * r).fixed_rows::<6>(0).into_owned();
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let candidate = perturb(&pose, &step);
        let r1 = residuals(&candidate);
        if cost(&r1) > cost(&r0) {
            break;
        }
        pose = candidate;
        r0 = r1;
        if step.norm() < 1e-12 {
            break;
        }
    }
    pose
}

/// Board pose in the camera frame (maps board-frame points to camera frame).
pub fn estimate_board_transform(
    obs: &CornerObservations,
    k: &CameraIntrinsics,
    board: &BoardGeometry,
    refine: bool,
) -> Result<RigidTransform> {
    if obs.pixels.len() < 4 {
        return Err(Error::DegenerateCorners(format!(
            "need at least 4 corners, got {}",
            obs.pixels.len()
        )));
    }
    if obs.grid != board.inner_corners || obs.pixels.len() != board.corner_count() {
        return Err(Error::DegenerateCorners(
            "corner grid does not match board geometry".into(),
        ));
    }
    let image = undistort_points(obs, k)?;
    let grid = board.grid_points();
    let plane: Vec<Vec2> = grid.iter().map(|g| Vec2::new(g.x, g.y)).collect();
    let h = homography_dlt(&plane, &image)?;
    let mut pose = decompose_homography(&h)?;
    if refine {
        pose = refine_pose(pose, &grid, &image);
    }
    if grid.iter().any(|g| pose.apply(g).z <= 0.0) {
        return Err(Error::BehindCamera);
    }
    Ok(pose)
}

/// Board features in the camera frame. Corners and edge lengths come from
/// the physical board outline placed at the recovered pose.
pub fn estimate_board_pose(
    obs: &CornerObservations,
    k: &CameraIntrinsics,
    board: &BoardGeometry,
    refine: bool,
) -> Result<BoardFeatures> {
    let pose = estimate_board_transform(obs, k, board, refine)?;
    Ok(features_from_pose(&pose, board))
}

pub(crate) fn features_from_pose(pose: &RigidTransform, board: &BoardGeometry) -> BoardFeatures {
    let centre = pose.apply(&board.centre_in_board());
    let mut normal = pose.rotation.apply(&Vec3::z());
    if normal.dot(&centre) > 0.0 {
        normal = -normal;
    }
    let outline = board.outline_in_board().map(|c| pose.apply(&c));
    // Image "up" is -y in the camera frame.
    let corners = order_diamond(outline, &normal, &Vec3::new(0.0, -1.0, 0.0)).unwrap_or(outline);
    BoardFeatures::from_corners(normal, corners)
}
