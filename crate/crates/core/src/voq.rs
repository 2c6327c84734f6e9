//! Set-quality scoring for 3-pose calibration sets.
//!
//! `VOQ = κ_LC + e_be`: the worse of the lidar and camera normal-matrix
//! condition numbers plus the set's mean board dimension error in millimetres.
//!
//! Condition numbers use the Frobenius norm, `κ_F(N) = ‖N‖_F · ‖N⁻¹‖_F`,
//! whose minimum for a 3×3 matrix is 3 (an orthonormal set of normals), not
//! 1 as for the spectral norm. Thresholds quoted against other norms should
//! be rescaled accordingly.

use serde::Serialize;

use crate::geometry::{invert3, Mat3};

/// Three poses: normal matrices (one unit normal per row) and per-pose `e_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub indices: [usize; 3],
    pub lidar_normals: Mat3,
    pub camera_normals: Mat3,
    /// Millimetres.
    pub board_errors: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetScore {
    pub kappa_l: f64,
    pub kappa_c: f64,
    pub kappa_lc: f64,
    /// Millimetres.
    pub e_be: f64,
    pub voq: f64,
}

impl SetScore {
    pub fn is_finite(&self) -> bool {
        self.voq.is_finite()
    }
}

/// `‖N‖_F · ‖N⁻¹‖_F`, or `+∞` when `N` is singular.
pub fn condition_number(n: &Mat3) -> f64 {
    match invert3(n) {
        // One square root keeps κ(I) exactly 3.
        Ok(inv) => (n.norm_squared() * inv.norm_squared()).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

pub fn kappa_lc(set: &PoseSet) -> f64 {
    condition_number(&set.lidar_normals).max(condition_number(&set.camera_normals))
}

pub fn average_board_error(set: &PoseSet) -> f64 {
    set.board_errors.iter().sum::<f64>() / 3.0
}

/// Scores a set; `board_error_weight` scales `e_be` (1.0 reproduces plain VOQ).
pub fn voq_weighted(set: &PoseSet, board_error_weight: f64) -> SetScore {
    let kappa_l = condition_number(&set.lidar_normals);
    let kappa_c = condition_number(&set.camera_normals);
    let kappa_lc = kappa_l.max(kappa_c);
    let e_be = average_board_error(set);
    SetScore {
        kappa_l,
        kappa_c,
        kappa_lc,
        e_be,
        voq: kappa_lc + board_error_weight * e_be,
    }
}

pub fn voq(set: &PoseSet) -> SetScore {
    voq_weighted(set, 1.0)
}
