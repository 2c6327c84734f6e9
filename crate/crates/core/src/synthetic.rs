//! Synthetic calibration scenes with known extrinsics.
//!
//! The lidar sits at the origin of a right-handed frame with `x` forward and
//! `z` up; the camera frame has `z` forward and `y` down. Boards are placed
//! as 45° diamonds facing the lidar with varied pitch and yaw. Ring scans
//! include the exact points where each scan line enters and leaves the
//! board, so noiseless extraction reproduces the board edges exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::board::{view_axes, BoardGeometry};
use crate::camera::CornerObservations;
use crate::cloud::PointCloud;
use crate::config::{Config, ImageSize};
use crate::dataset::{prepare_inputs, PoseInput, Role};
use crate::error::{Error, Result};
use crate::geometry::{from_polar, CameraIntrinsics, Mat3, RigidTransform, Rotation, Vec2, Vec3};
use crate::lidar::RoiBox;
use crate::pipeline::{calibrate, with_workers, CalibrationReport, PoseSample};
use crate::rng::{derive_seed, seeded, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Calibration poses.
    pub pose_count: usize,
    /// Held-out evaluation poses.
    pub eval_pose_count: usize,
    pub truth: TruthSpec,
    pub intrinsics: CameraIntrinsics,
    pub image: ImageSize,
    pub board: BoardGeometry,
    /// Board centre distance from the lidar, metres.
    pub range_band_m: [f64; 2],
    /// Half-width of the board-centre azimuth band, degrees.
    pub azimuth_span_deg: f64,
    /// Half-width of the board-centre elevation band, degrees.
    pub elevation_span_deg: f64,
    /// Largest pitch/yaw tilt of the board away from facing the lidar, degrees.
    pub max_pitch_deg: f64,
    pub max_yaw_deg: f64,
    /// In-plane roll jitter around the 45° diamond, degrees.
    pub roll_jitter_deg: f64,
    pub noise: NoiseSpec,
    pub sampling: Sampling,
    pub floor: Option<FloorSpec>,
    /// Every board shares one orientation (degenerate normal matrices).
    pub parallel_boards: bool,
    /// Placement attempts per pose before giving up.
    pub retry_cap: usize,
}

/// Camera→lidar ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    /// Roll, pitch, yaw (intrinsic Z-Y-X), degrees.
    pub euler_deg: [f64; 3],
    pub translation_m: [f64; 3],
}

impl Default for TruthSpec {
    /// Forward-looking camera slightly offset from the lidar.
    fn default() -> Self {
        Self {
            euler_deg: [-88.0, 1.5, -92.5],
            translation_m: [0.08, -0.12, -0.06],
        }
    }
}

impl TruthSpec {
    pub fn transform(&self) -> RigidTransform {
        let [r, p, y] = self.euler_deg.map(f64::to_radians);
        RigidTransform::new(
            Rotation::from_euler(r, p, y),
            Vec3::from(self.translation_m),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian range noise, metres.
    pub range_sigma_m: f64,
    /// Constant added to every measured range, metres.
    pub range_bias_m: f64,
    /// Gaussian noise per pixel coordinate.
    pub pixel_sigma_px: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            range_sigma_m: 0.01,
            range_bias_m: 0.0,
            pixel_sigma_px: 0.5,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            range_sigma_m: 0.0,
            range_bias_m: 0.0,
            pixel_sigma_px: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Sampling {
    /// Spinning multi-beam lidar.
    Rings {
        count: u16,
        spacing_deg: f64,
        azimuth_step_deg: f64,
    },
    /// Uniform angular grid without ring indices.
    Grid { step_deg: f64, half_fov_deg: f64 },
}

impl Default for Sampling {
    /// VLP-16-like.
    fn default() -> Self {
        Sampling::Rings {
            count: 16,
            spacing_deg: 2.0,
            azimuth_step_deg: 0.2,
        }
    }
}

impl Sampling {
    fn elevations(&self) -> Vec<f64> {
        let (n, step) = match *self {
            Sampling::Rings {
                count, spacing_deg, ..
            } => (count as usize, spacing_deg),
            Sampling::Grid {
                step_deg,
                half_fov_deg,
            } => (
                (2.0 * half_fov_deg / step_deg).floor() as usize + 1,
                step_deg,
            ),
        };
        let lo = -(n as f64 - 1.0) / 2.0 * step;
        (0..n)
            .map(|k| (lo + k as f64 * step).to_radians())
            .collect()
    }

    fn azimuth_step(&self) -> f64 {
        match *self {
            Sampling::Rings {
                azimuth_step_deg, ..
            } => azimuth_step_deg.to_radians(),
            Sampling::Grid { step_deg, .. } => step_deg.to_radians(),
        }
    }

    fn has_rings(&self) -> bool {
        matches!(self, Sampling::Rings { .. })
    }
}

/// Horizontal ground plane below the lidar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorSpec {
    /// Lidar height above the floor, metres.
    pub height_m: f64,
    /// Furthest floor return, metres.
    pub max_range_m: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            pose_count: 50,
            eval_pose_count: 0,
            truth: TruthSpec::default(),
            intrinsics: CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0),
            image: ImageSize::default(),
            board: BoardGeometry::default(),
            range_band_m: [2.0, 4.5],
            azimuth_span_deg: 20.0,
            elevation_span_deg: 2.0,
            max_pitch_deg: 35.0,
            max_yaw_deg: 35.0,
            roll_jitter_deg: 0.0,
            noise: NoiseSpec::default(),
            sampling: Sampling::default(),
            floor: None,
            parallel_boards: false,
            retry_cap: 2000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.intrinsics.validate()?;
        self.board.validate()?;
        if self.pose_count < 3 {
            return bad("a scene needs at least 3 calibration poses");
        }
        let [near, far] = self.range_band_m;
        if !(near > 0.0 && far >= near) {
            return bad("range_band_m must be positive and ascending");
        }
        let n = &self.noise;
        if !(n.range_sigma_m >= 0.0 && n.pixel_sigma_px >= 0.0 && n.range_bias_m.is_finite()) {
            return bad("noise levels must be non-negative");
        }
        let angles = [
            self.azimuth_span_deg,
            self.elevation_span_deg,
            self.max_pitch_deg,
            self.max_yaw_deg,
            self.roll_jitter_deg,
        ];
        if angles.iter().any(|a| !(*a >= 0.0 && *a < 90.0)) {
            return bad("angular spans must lie in [0, 90) degrees");
        }
        match self.sampling {
            Sampling::Rings {
                count,
                spacing_deg,
                azimuth_step_deg,
            } => {
                if count < 2 || !(spacing_deg > 0.0) || !(azimuth_step_deg > 0.0) {
                    return bad("ring sampling needs >= 2 rings and positive steps");
                }
            }
            Sampling::Grid {
                step_deg,
                half_fov_deg,
            } => {
                if !(step_deg > 0.0 && half_fov_deg > 0.0 && half_fov_deg < 90.0) {
                    return bad("grid sampling needs a positive step and field of view");
                }
            }
        }
        if let Some(f) = &self.floor {
            if !(f.height_m > 0.0 && f.max_range_m > 0.0) {
                return bad("floor height and range must be positive");
            }
        }
        if self.retry_cap == 0 {
            return bad("retry_cap must be positive");
        }
        Ok(())
    }

    /// Configuration that processes this scene.
    pub fn config(&self) -> Config {
        let mut c = Config::new(self.intrinsics);
        c.board = self.board;
        c.seed = self.seed;
        c.image = self.image;
        if let Some(f) = &self.floor {
            let far = self.range_band_m[1] + 1.5;
            c.roi = Some(RoiBox {
                min: [0.1, -far, -f.height_m + 0.1],
                max: [far, far, far],
            });
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPose {
    pub role: Role,
    /// Board frame → lidar frame.
    pub board_to_lidar: RigidTransform,
    pub input: PoseInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub truth: RigidTransform,
    pub poses: Vec<SyntheticPose>,
}

impl SyntheticScene {
    pub fn inputs(&self, role: Role) -> Vec<PoseInput> {
        self.poses
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.input.clone())
            .collect()
    }
}

fn uniform(rng: &mut SeededRng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..=half)
    }
}

/// Board placement: returns board→lidar.
fn sample_placement(
    spec: &SceneSpec,
    rng: &mut SeededRng,
    fixed_orientation: Option<&Rotation>,
) -> RigidTransform {
    let [near, far] = spec.range_band_m;
    let range = if far > near {
        rng.random_range(near..=far)
    } else {
        near
    };
    let az = uniform(rng, spec.azimuth_span_deg.to_radians());
    let el = uniform(rng, spec.elevation_span_deg.to_radians());
    let yaw = uniform(rng, spec.max_yaw_deg.to_radians());
    let pitch = uniform(rng, spec.max_pitch_deg.to_radians());
    let roll = uniform(rng, spec.roll_jitter_deg.to_radians());
    let centre = from_polar(range, az, el).expect("range is positive");
    let rotation = match fixed_orientation {
        Some(r) => *r,
        None => {
            let view = centre.normalize();
            let side = Vec3::z().cross(&view).normalize();
            let normal = Rotation::from_axis_angle(&Vec3::z(), yaw)
                .compose(&Rotation::from_axis_angle(&side, pitch))
                .apply(&-view);
            let (right, up) = view_axes(&normal, &Vec3::z()).expect("board is never horizontal");
            // Width side on the diamond's top-right edge.
            let x = Rotation::from_axis_angle(&normal, roll).apply(&((right - up) / 2f64.sqrt()));
            let y = normal.cross(&x);
            Rotation::from_matrix(&Mat3::from_columns(&[x, y, normal]))
        }
    };
    let offset = rotation.apply(&Vec3::from(spec.board.grid_centre_offset));
    RigidTransform::new(rotation, centre - offset)
}

/// Where a ray from the lidar origin meets the board, if it does.
struct BoardHit<'a> {
    pose: &'a RigidTransform,
    board: &'a BoardGeometry,
    normal: Vec3,
}

impl BoardHit<'_> {
    fn distance(&self, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom >= -1e-12 {
            return None;
        }
        let s = self.normal.dot(&self.pose.translation) / denom;
        if s <= 0.0 {
            return None;
        }
        let local = self.pose.inverse().apply(&(dir * s)) - self.board.centre_in_board();
        (local.x.abs() <= self.board.width / 2.0 && local.y.abs() <= self.board.height / 2.0)
            .then_some(s)
    }
}

fn ray(az: f64, el: f64) -> Vec3 {
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Boundary azimuth between `outside` and `inside` by bisection; returns a
/// value on the inside.
fn bisect(hit: &BoardHit, el: f64, mut outside: f64, mut inside: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (outside + inside);
        if mid == outside || mid == inside {
            break;
        }
        if hit.distance(&ray(mid, el)).is_some() {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    inside
}

/// Noise-free scan: `(direction, range, ring)` per return.
fn scan_board(spec: &SceneSpec, pose: &RigidTransform) -> Vec<(Vec3, f64, u16)> {
    let board = &spec.board;
    let hit = BoardHit {
        pose,
        board,
        normal: pose.rotation.apply(&Vec3::z()),
    };
    let outline = board.outline_in_board().map(|c| pose.apply(&c));
    let azs = outline.map(|c| c.y.atan2(c.x));
    let margin = 0.5f64.to_radians();
    let lo = azs.iter().copied().fold(f64::INFINITY, f64::min) - margin;
    let hi = azs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin;
    let step = spec.sampling.azimuth_step();
    let scan_step = 0.02f64.to_radians();
    let mut out = Vec::new();
    for (ring, el) in spec.sampling.elevations().into_iter().enumerate() {
        let n = ((hi - lo) / scan_step).ceil() as usize;
        let mut first = None;
        let mut last = None;
        let mut prev_in = false;
        for i in 0..=n {
            let az = lo + i as f64 * scan_step;
            let is_in = hit.distance(&ray(az, el)).is_some();
            if is_in && !prev_in && first.is_none() {
                first = Some(bisect(&hit, el, az - scan_step, az));
            }
            if !is_in && prev_in {
                last = Some(bisect(&hit, el, az, az - scan_step));
            }
            prev_in = is_in;
        }
        let (Some(a), Some(b)) = (first, last) else {
            continue;
        };
        let mut azimuths = vec![a];
        let k0 = (a / step).floor() as i64 + 1;
        let k1 = (b / step).ceil() as i64 - 1;
        azimuths.extend(
            (k0..=k1)
                .map(|k| k as f64 * step)
                .filter(|&x| x > a && x < b),
        );
        azimuths.push(b);
        for az in azimuths {
            let d = ray(az, el);
            if let Some(s) = hit.distance(&d) {
                out.push((d, s, ring as u16));
            }
        }
    }
    out
}

/// Uniform angular grid over the board.
fn scan_grid(spec: &SceneSpec, pose: &RigidTransform) -> Vec<(Vec3, f64, u16)> {
    let hit = BoardHit {
        pose,
        board: &spec.board,
        normal: pose.rotation.apply(&Vec3::z()),
    };
    let step = spec.sampling.azimuth_step();
    let outline = spec.board.outline_in_board().map(|c| pose.apply(&c));
    let azs = outline.map(|c| c.y.atan2(c.x));
    let lo = (azs.iter().copied().fold(f64::INFINITY, f64::min) / step).floor() as i64;
    let hi = (azs.iter().copied().fold(f64::NEG_INFINITY, f64::max) / step).ceil() as i64;
    let mut out = Vec::new();
    for el in spec.sampling.elevations() {
        for k in lo..=hi {
            let d = ray(k as f64 * step, el);
            if let Some(s) = hit.distance(&d) {
                out.push((d, s, 0));
            }
        }
    }
    out
}

fn scan_floor(spec: &SceneSpec, floor: &FloorSpec, pose: &RigidTransform) -> Vec<(Vec3, f64, u16)> {
    let hit = BoardHit {
        pose,
        board: &spec.board,
        normal: pose.rotation.apply(&Vec3::z()),
    };
    let step = spec.sampling.azimuth_step();
    let half = (45.0f64.to_radians() / step).round() as i64;
    let mut out = Vec::new();
    for (ring, el) in spec.sampling.elevations().into_iter().enumerate() {
        if el >= -1e-6 {
            continue;
        }
        let s = floor.height_m / (-el).sin();
        if s > floor.max_range_m {
            continue;
        }
        for k in -half..=half {
            let d = ray(k as f64 * step, el);
            if hit.distance(&d).is_some_and(|b| b < s) {
                continue;
            }
            out.push((d, s, ring as u16));
        }
    }
    out
}

/// Number of ring endpoints on each outline edge (board frame ±x, ±y sides).
fn edge_support(spec: &SceneSpec, pose: &RigidTransform, scan: &[(Vec3, f64, u16)]) -> usize {
    let board = &spec.board;
    let inv = pose.inverse();
    let mut counts = [0usize; 4];
    let mut i = 0;
    while i < scan.len() {
        let ring = scan[i].2;
        let mut j = i;
        while j + 1 < scan.len() && scan[j + 1].2 == ring {
            j += 1;
        }
        for &k in &[i, j] {
            let local = inv.apply(&(scan[k].0 * scan[k].1)) - board.centre_in_board();
            let gaps = [
                board.width / 2.0 - local.x,
                board.width / 2.0 + local.x,
                board.height / 2.0 - local.y,
                board.height / 2.0 + local.y,
            ];
            let side = (0..4)
                .min_by(|&a, &b| gaps[a].total_cmp(&gaps[b]))
                .expect("four sides");
            counts[side] += 1;
        }
        i = j + 1;
    }
    counts.into_iter().min().unwrap_or(0)
}

fn camera_sees(spec: &SceneSpec, board_to_camera: &RigidTransform) -> Option<Vec<Vec2>> {
    let k = &spec.intrinsics;
    let margin = 10.0;
    let in_frame = |p: &Vec2| {
        p.x >= margin
            && p.y >= margin
            && p.x <= spec.image.width as f64 - margin
            && p.y <= spec.image.height as f64 - margin
    };
    let normal = board_to_camera.rotation.apply(&Vec3::z());
    let centre = board_to_camera.apply(&spec.board.centre_in_board());
    // Reject grazing views.
    if normal.dot(&centre).abs() < 0.35 * centre.norm() {
        return None;
    }
    for c in spec.board.outline_in_board() {
        let p = board_to_camera.apply(&c);
        if p.z < 0.2 || !k.project(&p).is_some_and(|px| in_frame(&px)) {
            return None;
        }
    }
    spec.board
        .grid_points()
        .iter()
        .map(|g| k.project(&board_to_camera.apply(g)).filter(in_frame))
        .collect()
}

fn lidar_sees(spec: &SceneSpec, pose: &RigidTransform) -> bool {
    let outline = spec.board.outline_in_board().map(|c| pose.apply(&c));
    if let Some(f) = &spec.floor {
        if outline.iter().any(|c| c.z < -f.height_m + 0.2) {
            return false;
        }
    }
    let els = spec.sampling.elevations();
    let (lo, hi) = (els[0], els[els.len() - 1]);
    let el = |c: &Vec3| c.z.atan2(c.xy().norm());
    outline.iter().all(|c| el(c) > lo && el(c) < hi)
}

/// Generates a scene. Identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let truth = spec.truth.transform();
    let camera_from_lidar = truth.inverse();
    let total = spec.pose_count + spec.eval_pose_count;
    let mut poses = Vec::with_capacity(total);
    let mut fixed: Option<Rotation> = None;
    for index in 0..total {
        let pose_seed = derive_seed(spec.seed, index as u64);
        let mut placement_rng = seeded(derive_seed(pose_seed, 0));
        let mut found = None;
        for _ in 0..spec.retry_cap {
            let pose = sample_placement(spec, &mut placement_rng, fixed.as_ref());
            if !lidar_sees(spec, &pose) {
                continue;
            }
            let board_to_camera = camera_from_lidar.compose(&pose);
            let Some(pixels) = camera_sees(spec, &board_to_camera) else {
                continue;
            };
            let scan = if spec.sampling.has_rings() {
                let scan = scan_board(spec, &pose);
                if edge_support(spec, &pose, &scan) < 3 {
                    continue;
                }
                scan
            } else {
                let scan = scan_grid(spec, &pose);
                if scan.len() < 30 {
                    continue;
                }
                scan
            };
            found = Some((pose, pixels, scan));
            break;
        }
        let Some((pose, pixels, mut scan)) = found else {
            return Err(Error::Generation(format!(
                "pose {index}: no valid placement within {} attempts",
                spec.retry_cap
            )));
        };
        if spec.parallel_boards && fixed.is_none() {
            fixed = Some(pose.rotation);
        }
        if let Some(f) = &spec.floor {
            scan.extend(scan_floor(spec, f, &pose));
        }

        // Noise draws are taken in the same order whatever the bias, so
        // scenes differing only in bias share one noise realization.
        let mut range_rng = seeded(derive_seed(pose_seed, 1));
        let mut points = Vec::with_capacity(scan.len());
        let mut rings = Vec::with_capacity(scan.len());
        for (d, s, ring) in &scan {
            let z: f64 = range_rng.sample(StandardNormal);
            let range = s + spec.noise.range_bias_m + spec.noise.range_sigma_m * z;
            if range > 0.0 {
                points.push(d * range);
                rings.push(*ring);
            }
        }
        let cloud = if spec.sampling.has_rings() {
            PointCloud::with_rings(points, rings)
        } else {
            PointCloud::new(points)
        };

        let mut pixel_rng = seeded(derive_seed(pose_seed, 2));
        let noisy: Vec<Vec2> = pixels
            .iter()
            .map(|p| {
                let dx: f64 = pixel_rng.sample(StandardNormal);
                let dy: f64 = pixel_rng.sample(StandardNormal);
                p + Vec2::new(dx, dy) * spec.noise.pixel_sigma_px
            })
            .collect();
        let corners = CornerObservations::new(noisy, spec.board.inner_corners)?;
        let role = if index < spec.pose_count {
            Role::Calibration
        } else {
            Role::Evaluation
        };
        poses.push(SyntheticPose {
            role,
            board_to_lidar: pose,
            input: PoseInput {
                id: format!("pose_{index:03}"),
                cloud,
                corners,
            },
        });
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        truth,
        poses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndToEnd {
    pub report: CalibrationReport,
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
    /// Calibration poses whose extraction failed.
    pub failed_poses: Vec<String>,
}

/// Error of an estimate against the truth: geodesic angle (deg), translation distance (m).
pub fn transform_error(estimate: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    (
        estimate.rotation.angle_to(&truth.rotation).to_degrees(),
        (estimate.translation - truth.translation).norm(),
    )
}

/// Feature extraction for every pose of `role`; failing poses are skipped.
pub fn scene_samples(
    scene: &SyntheticScene,
    role: Role,
    config: &Config,
) -> (Vec<PoseSample>, Vec<String>) {
    let (ok, failed) = prepare_inputs(&scene.inputs(role), config);
    for (id, e) in &failed {
        log::warn!("pose {id} excluded: {e}");
    }
    (ok, failed.into_iter().map(|(id, _)| id).collect())
}

/// Full pipeline on the calibration poses of a scene.
pub fn run_end_to_end(
    scene: &SyntheticScene,
    config: &Config,
    workers: Option<usize>,
) -> Result<EndToEnd> {
    with_workers(workers, || {
        let (samples, failed_poses) = scene_samples(scene, Role::Calibration, config);
        let report = calibrate(&samples, config)?;
        let (rotation_error_deg, translation_error_m) =
            transform_error(&report.transform, &scene.truth);
        Ok(EndToEnd {
            report,
            rotation_error_deg,
            translation_error_m,
            failed_poses,
        })
    })?
}
