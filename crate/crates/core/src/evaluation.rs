//! Scene-wide reprojection statistics and projected-pointcloud images.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{json, Value};

use crate::board::BoardFeatures;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Vec2};
use crate::pipeline::{sig9, PoseSample};

/// Reprojection error of one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// Centre error, pixels.
    pub pixel: f64,
    /// Centre error scaled to the board depth, centimetres.
    pub metric_cm: f64,
    /// Mean error over the four outline corners, pixels. `None` when a
    /// corner falls behind the camera.
    pub corner_px: Option<f64>,
}

/// Projects the lidar board centre through `t` and compares it with the
/// camera-detected centre.
///
/// `metric_cm = pixel · z_cam / f_mean · 100`, with `z_cam` the camera-frame
/// depth of the camera-detected centre.
pub fn reproject_pose_error(
    t: &RigidTransform,
    k: &CameraIntrinsics,
    lidar: &BoardFeatures,
    camera: &BoardFeatures,
) -> Result<PoseError> {
    let to_cam = t.inverse();
    let from_lidar = k
        .project(&to_cam.apply(&lidar.centre))
        .ok_or(Error::BehindCamera)?;
    let detected = k.project(&camera.centre).ok_or(Error::BehindCamera)?;
    let pixel = (from_lidar - detected).norm();
    let metric_cm = pixel * camera.centre.z / k.mean_focal() * 100.0;
    let mut sum = 0.0;
    let mut corner_px = Some(());
    for (l, c) in lidar.corners.iter().zip(&camera.corners) {
        match (k.project(&to_cam.apply(l)), k.project(c)) {
            (Some(a), Some(b)) => sum += (a - b).norm(),
            _ => corner_px = None,
        }
    }
    Ok(PoseError {
        pixel,
        metric_cm,
        corner_px: corner_px.map(|_| sum / 4.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub error: Option<PoseError>,
    /// Set when the pose was left out of the statistics.
    pub excluded: Option<String>,
}

impl PoseRecord {
    pub fn excluded(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            error: None,
            excluded: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionStats {
    pub per_pose: Vec<PoseRecord>,
    pub mean_px: f64,
    pub std_px: f64,
    pub mean_cm: f64,
    pub std_cm: f64,
    /// Over poses whose four corners all project.
    pub mean_corner_px: f64,
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ReprojectionStats {
    pub fn from_records(per_pose: Vec<PoseRecord>) -> Result<Self> {
        let used: Vec<&PoseError> = per_pose
            .iter()
            .filter(|r| r.excluded.is_none())
            .filter_map(|r| r.error.as_ref())
            .collect();
        if used.is_empty() {
            return Err(Error::AllPosesExcluded);
        }
        let (mean_px, std_px) = mean_std(&used.iter().map(|e| e.pixel).collect::<Vec<_>>());
        let (mean_cm, std_cm) = mean_std(&used.iter().map(|e| e.metric_cm).collect::<Vec<_>>());
        let corners: Vec<f64> = used.iter().filter_map(|e| e.corner_px).collect();
        let mean_corner_px = if corners.is_empty() {
            f64::NAN
        } else {
            mean_std(&corners).0
        };
        Ok(Self {
            per_pose,
            mean_px,
            std_px,
            mean_cm,
            std_cm,
            mean_corner_px,
        })
    }

    pub fn used(&self) -> usize {
        self.per_pose
            .iter()
            .filter(|r| r.excluded.is_none())
            .count()
    }

    /// Header `pose_id,pixel_error_px,metric_error_cm,excluded,reason,corner_error_px`.
    pub fn write_csv<W: Write>(&self, w: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(
            w,
            "pose_id,pixel_error_px,metric_error_cm,excluded,reason,corner_error_px"
        )?;
        for r in &self.per_pose {
            let f = |x: Option<f64>| x.map(|v| sig9(v).to_string()).unwrap_or_default();
            let reason = r
                .excluded
                .as_deref()
                .unwrap_or("")
                .replace([',', '\n'], ";");
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.id,
                f(r.error.map(|e| e.pixel)),
                f(r.error.map(|e| e.metric_cm)),
                r.excluded.is_some(),
                reason,
                f(r.error.and_then(|e| e.corner_px)),
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "poses_used": self.used(),
            "poses_excluded": self.per_pose.len() - self.used(),
            "mean_px": sig9(self.mean_px),
            "std_px": sig9(self.std_px),
            "mean_cm": sig9(self.mean_cm),
            "std_cm": sig9(self.std_cm),
            "mean_corner_px": sig9(self.mean_corner_px),
            "metric_conversion": "cm = px * z_camera / ((fx + fy) / 2) * 100",
        })
    }
}

/// Reprojection error over every pose; behind-camera poses are excluded.
pub fn evaluate_scene(
    t: &RigidTransform,
    k: &CameraIntrinsics,
    poses: &[PoseSample],
) -> Result<ReprojectionStats> {
    let records = poses
        .iter()
        .map(|p| match reproject_pose_error(t, k, &p.lidar, &p.camera) {
            Ok(e) => PoseRecord {
                id: p.id.clone(),
                error: Some(e),
                excluded: None,
            },
            Err(e) => PoseRecord::excluded(&p.id, e.to_string()),
        })
        .collect();
    ReprojectionStats::from_records(records)
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6). The comment goes in the header.
    pub fn write_ppm<W: Write>(&self, w: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        writeln!(w, "P6")?;
        if let Some(c) = comment {
            writeln!(w, "# {}", c.replace('\n', " "))?;
        }
        write!(w, "{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_ppm(&mut w, comment)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), path)
    }

    /// Reads a binary P6 image with maxval 255.
    pub fn from_reader<R: BufRead>(mut r: R, label: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::parse(label, msg);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::io(label, e))? == 0 {
                return Err(bad("truncated PPM header"));
            }
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P6" || tokens.len() != 4 {
            return Err(bad("expected a binary P6 header"));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| bad("bad PPM header number"));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let mut data = vec![0; width as usize * height as usize * 3];
        r.read_exact(&mut data)
            .map_err(|_| bad("truncated PPM data"))?;
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Linear red→blue ramp over `[near, far]`, clamped.
pub fn depth_colour(range: f64, near: f64, far: f64) -> [u8; 3] {
    let s = ((range - near) / (far - near)).clamp(0.0, 1.0);
    [
        (255.0 * (1.0 - s)).round() as u8,
        0,
        (255.0 * s).round() as u8,
    ]
}

pub const DISC_RADIUS_PX: i64 = 2;

/// Draws every in-frustum lidar point as a disc coloured by its lidar range.
/// Far points are drawn first so near ones stay on top.
pub fn render_projection(
    t: &RigidTransform,
    k: &CameraIntrinsics,
    cloud: &PointCloud,
    width: u32,
    height: u32,
    depth_range: (f64, f64),
    background: Option<&Image>,
) -> Result<Image> {
    let mut img = match background {
        Some(bg) if bg.width == width && bg.height == height => bg.clone(),
        Some(bg) => {
            return Err(Error::DegenerateInput(format!(
                "background is {}x{}, expected {width}x{height}",
                bg.width, bg.height
            )))
        }
        None => Image::new(width, height),
    };
    let to_cam = t.inverse();
    let mut hits: Vec<(f64, Vec2)> = cloud
        .points
        .iter()
        .filter_map(|p| {
            let px = k.project(&to_cam.apply(p))?;
            let inside = px.x >= -0.5
                && px.y >= -0.5
                && px.x < width as f64 - 0.5
                && px.y < height as f64 - 0.5;
            inside.then(|| (p.norm(), px))
        })
        .collect();
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let r2 = DISC_RADIUS_PX * DISC_RADIUS_PX;
    for (range, px) in hits {
        let colour = depth_colour(range, depth_range.0, depth_range.1);
        let (cx, cy) = (px.x.round() as i64, px.y.round() as i64);
        for dy in -DISC_RADIUS_PX..=DISC_RADIUS_PX {
            for dx in -DISC_RADIUS_PX..=DISC_RADIUS_PX {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= r2
                    && x >= 0
                    && y >= 0
                    && x < width as i64
                    && y < height as i64
                {
                    img.set(x as u32, y as u32, colour);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation, Vec3};
    use approx::assert_relative_eq;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0)
    }

    fn fronto(centre: Vec3) -> BoardFeatures {
        let n = Vec3::new(0.0, 0.0, -1.0);
        let corners = [
            centre + Vec3::new(0.0, -0.5, 0.0),
            centre + Vec3::new(0.5, 0.0, 0.0),
            centre + Vec3::new(0.0, 0.5, 0.0),
            centre + Vec3::new(-0.5, 0.0, 0.0),
        ];
        BoardFeatures::from_corners(n, corners)
    }

    #[test]
    fn exact_transform_zero_error() {
        let cam = fronto(Vec3::new(0.1, -0.2, 2.0));
        let t = RigidTransform::new(
            Rotation::from_euler(-1.5, 0.1, -1.6),
            Vec3::new(0.1, 0.2, 0.3),
        );
        let lidar = cam.transformed(&t);
        let e = reproject_pose_error(&t, &k(), &lidar, &cam).unwrap();
        assert!(e.pixel < 1e-9 && e.metric_cm < 1e-9 && e.corner_px.unwrap() < 1e-9);
    }

    #[test]
    fn one_centimetre_shift() {
        let cam = fronto(Vec3::new(0.0, 0.0, 2.0));
        let truth = RigidTransform::identity();
        let lidar = cam.transformed(&truth);
        // Estimated transform off by +1 cm in x moves the projected centre by fx·Δx/z.
        let est = RigidTransform::new(Rotation::identity(), Vec3::new(0.01, 0.0, 0.0));
        let e = reproject_pose_error(&est, &k(), &lidar, &cam).unwrap();
        assert_relative_eq!(e.pixel, 5.0, epsilon = 1e-9);
        assert_relative_eq!(e.metric_cm, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn stats_population_std() {
        let rec = |id: &str, px: f64| PoseRecord {
            id: id.into(),
            error: Some(PoseError {
                pixel: px,
                metric_cm: px / 2.0,
                corner_px: Some(px),
            }),
            excluded: None,
        };
        let s = ReprojectionStats::from_records(vec![rec("a", 3.0), rec("b", 3.0)]).unwrap();
        assert_eq!((s.mean_px, s.std_px), (3.0, 0.0));
        let s = ReprojectionStats::from_records(vec![
            rec("a", 1.0),
            rec("b", 3.0),
            PoseRecord::excluded("c", "missing"),
        ])
        .unwrap();
        assert_eq!(
            (s.mean_px, s.std_px, s.mean_cm, s.std_cm),
            (2.0, 1.0, 1.0, 0.5)
        );
        assert_eq!(s.used(), 2);
        assert!(matches!(
            ReprojectionStats::from_records(vec![PoseRecord::excluded("c", "x")]),
            Err(Error::AllPosesExcluded)
        ));
        let mut buf = Vec::new();
        s.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("pose_id,pixel_error_px,metric_error_cm,excluded,reason"));
        assert!(text.contains("c,,,true,missing,"));
    }

    #[test]
    fn behind_camera_is_excluded() {
        let cam = fronto(Vec3::new(0.0, 0.0, 2.0));
        let mut lidar = cam;
        lidar.centre.z = -2.0;
        let pose = PoseSample {
            id: "p".into(),
            lidar,
            camera: cam,
            board_error_mm: 0.0,
        };
        let ok = PoseSample {
            id: "q".into(),
            lidar: cam,
            camera: cam,
            board_error_mm: 0.0,
        };
        let s = evaluate_scene(&RigidTransform::identity(), &k(), &[pose, ok]).unwrap();
        assert_eq!(s.used(), 1);
        assert!(s.per_pose[0].excluded.is_some());
    }

    #[test]
    fn render_empty_and_single() {
        let img = render_projection(
            &RigidTransform::identity(),
            &k(),
            &PointCloud::default(),
            1280,
            720,
            (3.0, 20.0),
            None,
        )
        .unwrap();
        assert!(img.data.iter().all(|&b| b == 0));
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 3.0)]);
        let img = render_projection(
            &RigidTransform::identity(),
            &k(),
            &cloud,
            1280,
            720,
            (3.0, 20.0),
            None,
        )
        .unwrap();
        assert_eq!(img.pixel(640, 360), [255, 0, 0]);
        assert_eq!(img.pixel(642, 360), [255, 0, 0]);
        assert_eq!(img.pixel(643, 360), [0, 0, 0]);
        assert_eq!(img.pixel(642, 362), [0, 0, 0]);
        assert_eq!(depth_colour(20.0, 3.0, 20.0), [0, 0, 255]);
        assert_eq!(depth_colour(50.0, 3.0, 20.0), [0, 0, 255]);
    }

    #[test]
    fn near_points_drawn_last() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 20.0)]);
        let img = render_projection(
            &RigidTransform::identity(),
            &k(),
            &cloud,
            100,
            100,
            (3.0, 20.0),
            None,
        );
        assert!(img.is_ok());
        let k2 = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0);
        let img = render_projection(
            &RigidTransform::identity(),
            &k2,
            &cloud,
            100,
            100,
            (3.0, 20.0),
            None,
        )
        .unwrap();
        assert_eq!(img.pixel(50, 50), [255, 0, 0]);
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2);
        img.set(1, 1, [1, 2, 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf, Some("tool_version=0")).unwrap();
        let back = Image::from_reader(std::io::Cursor::new(buf), Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }
}
