//! Run configuration shared by every command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::board::BoardGeometry;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::lidar::{ExtractionParams, RoiBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub board: BoardGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiBox>,
    /// Added to every lidar range before extraction (VLP-16: -0.030, Baraja: +0.105).
    #[serde(default)]
    pub range_offset_m: f64,
    #[serde(default)]
    pub extraction: ExtractionParams,
    /// Base seed for every RANSAC stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k_sets")]
    pub k_sets: usize,
    /// κ_LC at or above which a selected set is reported as unstable.
    #[serde(default = "default_kappa_warn")]
    pub kappa_warn: f64,
    /// Sets with κ_LC above this are never selected. Disabled when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_prefilter: Option<f64>,
    /// Weight on `e_be` inside VOQ.
    #[serde(default = "default_weight")]
    pub board_error_weight: f64,
    #[serde(default)]
    pub refine: RefineFlags,
    #[serde(default)]
    pub image: ImageSize,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineFlags {
    /// Gauss-Newton over the 6-DOF extrinsic after the closed-form solve.
    pub solver: bool,
    /// Gauss-Newton on corner reprojection after the homography pose.
    pub camera: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageSize {
    fn default() -> Self {
        Self {
            width: 1280,
            height: 720,
        }
    }
}

/// Optional defaults for the command-line directory flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_k_sets() -> usize {
    50
}

fn default_kappa_warn() -> f64 {
    50.0
}

fn default_weight() -> f64 {
    1.0
}

impl Config {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            board: BoardGeometry::default(),
            roi: None,
            range_offset_m: 0.0,
            extraction: ExtractionParams::default(),
            seed: 0,
            k_sets: default_k_sets(),
            kappa_warn: default_kappa_warn(),
            kappa_prefilter: None,
            board_error_weight: default_weight(),
            refine: RefineFlags::default(),
            image: ImageSize::default(),
            paths: Paths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.board.validate()?;
        if let Some(roi) = &self.roi {
            roi.validate()?;
        }
        if !self.range_offset_m.is_finite() {
            return Err(Error::Config("range_offset_m must be finite".into()));
        }
        let e = &self.extraction;
        if !(e.plane.threshold > 0.0 && e.line_threshold > 0.0) {
            return Err(Error::Config(
                "extraction thresholds must be positive".into(),
            ));
        }
        if e.plane.max_iters == 0 || e.line_max_iters == 0 {
            return Err(Error::Config(
                "RANSAC iteration caps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&e.plane.min_inlier_ratio) {
            return Err(Error::Config(
                "plane.min_inlier_ratio must lie in [0, 1]".into(),
            ));
        }
        if !(e.min_edge_angle_deg > 0.0 && e.diamond_tolerance_deg > 0.0) {
            return Err(Error::Config(
                "edge angle tolerances must be positive".into(),
            ));
        }
        if e.up.iter().all(|v| *v == 0.0) || e.up.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "extraction.up must be a finite non-zero vector".into(),
            ));
        }
        if self.k_sets == 0 {
            return Err(Error::Config("k_sets must be at least 1".into()));
        }
        if !(self.kappa_warn > 0.0) {
            return Err(Error::Config("kappa_warn must be positive".into()));
        }
        if let Some(p) = self.kappa_prefilter {
            if !(p >= 3.0) {
                return Err(Error::Config("kappa_prefilter must be at least 3".into()));
            }
        }
        if !(self.board_error_weight >= 0.0 && self.board_error_weight.is_finite()) {
            return Err(Error::Config(
                "board_error_weight must be finite and non-negative".into(),
            ));
        }
        if self.image.width == 0 || self.image.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = Config::new(CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0));
        c.validate().unwrap();
        assert_eq!(c.k_sets, 50);
        assert_eq!(c.kappa_warn, 50.0);
        assert!(c.kappa_prefilter.is_none());
    }

    #[test]
    fn rejects_bad_values() {
        let base = Config::new(CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0));
        let mut c = base.clone();
        c.k_sets = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base.clone();
        c.intrinsics.fx = -1.0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.kappa_prefilter = Some(1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut c = Config::new(CameraIntrinsics::new(900.0, 910.0, 600.0, 350.0));
        c.range_offset_m = -0.03;
        c.kappa_prefilter = Some(20.0);
        let s = serde_json::to_string(&c).unwrap();
        let back: Config = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
