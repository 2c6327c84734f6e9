//! Pose preparation, exhaustive 3-pose scoring, top-K selection, per-set
//! solving and aggregation into a single extrinsic estimate.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::board::BoardFeatures;
use crate::camera::{estimate_board_pose, CornerObservations};
use crate::cloud::PointCloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, rows_to_mat3, Mat3, RigidTransform, Rotation, Vec3};
use crate::lidar::{apply_range_offset, board_dimension_error, crop_roi, extract_board_features};
use crate::rng::derive_seed;
use crate::solver::{solve_set, SetSolution};
use crate::voq::{voq_weighted, PoseSet, SetScore};

pub const CONVENTION: &str = "p_lidar = R * p_camera + t";

/// Z-score beyond which a per-set solution is discarded.
pub const Z_REJECT: f64 = 2.0;

/// One synchronized board observation by both sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub id: String,
    pub lidar: BoardFeatures,
    pub camera: BoardFeatures,
    /// `e_dim`, millimetres.
    pub board_error_mm: f64,
}

/// RANSAC seed for a pose, stable under adding or removing other poses.
pub fn pose_seed(base: u64, id: &str) -> u64 {
    // FNV-1a over the id bytes.
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    derive_seed(base, h)
}

/// Offset correction, ROI crop and feature extraction for both sensors.
pub fn prepare_pose(
    id: &str,
    cloud: &PointCloud,
    corners: &CornerObservations,
    config: &Config,
) -> Result<PoseSample> {
    let cloud = apply_range_offset(cloud, config.range_offset_m);
    let cloud = match &config.roi {
        Some(roi) => crop_roi(&cloud, roi)?,
        None => cloud,
    };
    let lidar = extract_board_features(&cloud, &config.extraction, pose_seed(config.seed, id))?;
    let camera = estimate_board_pose(
        corners,
        &config.intrinsics,
        &config.board,
        config.refine.camera,
    )?;
    let board_error_mm = board_dimension_error(&lidar, &config.board);
    Ok(PoseSample {
        id: id.to_string(),
        lidar,
        camera,
        board_error_mm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredSet {
    /// Ascending pose indices.
    pub indices: [usize; 3],
    pub score: SetScore,
}

pub fn pose_set(poses: &[PoseSample], indices: [usize; 3]) -> PoseSet {
    let [a, b, c] = indices.map(|i| &poses[i]);
    PoseSet {
        indices,
        lidar_normals: rows_to_mat3([a.lidar.normal, b.lidar.normal, c.lidar.normal]),
        camera_normals: rows_to_mat3([a.camera.normal, b.camera.normal, c.camera.normal]),
        board_errors: [a.board_error_mm, b.board_error_mm, c.board_error_mm],
    }
}

/// All `i < j < k` triples in lexicographic order.
pub fn triples(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) * n.saturating_sub(2) / 6);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Scores every 3-pose subset, in lexicographic index order.
pub fn enumerate_and_score(
    poses: &[PoseSample],
    board_error_weight: f64,
) -> Result<Vec<ScoredSet>> {
    if poses.len() < 3 {
        return Err(Error::TooFewPoses {
            need: 3,
            got: poses.len(),
        });
    }
    Ok(triples(poses.len())
        .into_par_iter()
        .map(|indices| ScoredSet {
            indices,
            score: voq_weighted(&pose_set(poses, indices), board_error_weight),
        })
        .collect())
}

/// VOQ, then κ_LC, then indices. Non-finite scores sort last.
pub fn rank_order(a: &ScoredSet, b: &ScoredSet) -> Ordering {
    a.score
        .voq
        .total_cmp(&b.score.voq)
        .then(a.score.kappa_lc.total_cmp(&b.score.kappa_lc))
        .then(a.indices.cmp(&b.indices))
}

/// The `k` lowest-VOQ finite sets. Sets above `kappa_prefilter` are skipped.
pub fn select_top_k(
    scores: &[ScoredSet],
    k: usize,
    kappa_prefilter: Option<f64>,
) -> Result<Vec<ScoredSet>> {
    let mut finite: Vec<ScoredSet> = scores
        .iter()
        .filter(|s| s.score.is_finite())
        .filter(|s| kappa_prefilter.is_none_or(|p| s.score.kappa_lc <= p))
        .copied()
        .collect();
    if finite.is_empty() {
        return Err(Error::NoFiniteSets);
    }
    finite.sort_by(rank_order);
    if finite.len() < k {
        log::warn!(
            "only {} sets have a finite VOQ; using all of them instead of {k}",
            finite.len()
        );
    }
    finite.truncate(k);
    Ok(finite)
}

/// Result of z-score filtering and averaging per-set transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub transform: RigidTransform,
    /// Roll, pitch, yaw in degrees; x, y, z in metres.
    pub stddev: [f64; 6],
    /// Component-wise mean of survivor Euler angles, degrees.
    pub euler_mean_deg: [f64; 3],
    /// Per input: `None` if kept, otherwise the rejection reason.
    pub rejected: Vec<Option<String>>,
    pub warnings: Vec<String>,
}

const COMPONENTS: [&str; 6] = ["roll", "pitch", "yaw", "x", "y", "z"];

fn wrap_near(angle: f64, reference: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let d = (angle - reference + PI).rem_euclid(TAU) - PI;
    reference + d
}

/// `(roll, pitch, yaw, x, y, z)` with angles unwrapped next to `reference`.
fn components(t: &RigidTransform, reference: Option<&[f64; 6]>) -> [f64; 6] {
    let (r, p, y) = t.rotation.euler();
    let mut c = [r, p, y, t.translation.x, t.translation.y, t.translation.z];
    if let Some(reference) = reference {
        for i in 0..3 {
            c[i] = wrap_near(c[i], reference[i]);
        }
    }
    c
}

/// Mean taken as offsets from the first sample, so equal inputs give that exact value.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let r = values[0];
    let mean = r + values.iter().map(|v| v - r).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn chordal_mean(rotations: &[&Rotation]) -> Rotation {
    let first = rotations[0];
    if rotations.iter().all(|r| r.matrix() == first.matrix()) {
        return *first;
    }
    let sum = rotations
        .iter()
        .fold(Mat3::zeros(), |acc, r| acc + r.matrix());
    Rotation::from_matrix(&nearest_rotation(&sum))
}

/// Single-pass z-score filter (any component beyond 2σ) then chordal
/// rotation mean and arithmetic translation mean over the survivors.
pub fn aggregate(solutions: &[RigidTransform]) -> Result<Aggregate> {
    if solutions.is_empty() {
        return Err(Error::AggregationCollapsed(
            "no per-set solutions to aggregate".into(),
        ));
    }
    let reference = components(&solutions[0], None);
    let comps: Vec<[f64; 6]> = solutions
        .iter()
        .map(|s| components(s, Some(&reference)))
        .collect();
    let stats: Vec<(f64, f64)> = (0..6)
        .map(|j| mean_std(&comps.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .collect();
    let rejected: Vec<Option<String>> = comps
        .iter()
        .map(|c| {
            (0..6).find_map(|j| {
                let (mean, std) = stats[j];
                let dev = c[j] - mean;
                let z = if dev == 0.0 { 0.0 } else { dev / std };
                (z.abs() > Z_REJECT).then(|| format!("z-score {z:.2} on {}", COMPONENTS[j]))
            })
        })
        .collect();
    let survivors: Vec<usize> = (0..solutions.len())
        .filter(|&i| rejected[i].is_none())
        .collect();
    if survivors.is_empty() {
        return Err(Error::AggregationCollapsed(
            "every solution failed the z-score filter".into(),
        ));
    }
    let mut warnings = Vec::new();
    if survivors.len() < 2 {
        let msg = format!(
            "only {} solution survived filtering; reporting it with zero spread",
            survivors.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
        let s = &comps[survivors[0]];
        return Ok(Aggregate {
            transform: solutions[survivors[0]],
            stddev: [0.0; 6],
            euler_mean_deg: [s[0].to_degrees(), s[1].to_degrees(), s[2].to_degrees()],
            rejected,
            warnings,
        });
    }
    let kept: Vec<[f64; 6]> = survivors.iter().map(|&i| comps[i]).collect();
    let kept_stats: Vec<(f64, f64)> = (0..6)
        .map(|j| mean_std(&kept.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .collect();
    let rotation = chordal_mean(
        &survivors
            .iter()
            .map(|&i| &solutions[i].rotation)
            .collect::<Vec<_>>(),
    );
    let translation = Vec3::new(kept_stats[3].0, kept_stats[4].0, kept_stats[5].0);
    let mut stddev = [0.0; 6];
    for j in 0..6 {
        stddev[j] = if j < 3 {
            kept_stats[j].1.to_degrees()
        } else {
            kept_stats[j].1
        };
    }
    Ok(Aggregate {
        transform: RigidTransform::new(rotation, translation),
        stddev,
        euler_mean_deg: [0, 1, 2].map(|j| kept_stats[j].0.to_degrees()),
        rejected,
        warnings,
    })
}

/// Tool version and configuration digest stamped onto outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!(
            "tool_version={} config_hash={}",
            self.tool_version, self.config_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetRecord {
    pub indices: [usize; 3],
    pub score: SetScore,
    pub solution: Option<SetSolution>,
    /// `None` when the set contributed to the final estimate.
    pub rejection: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub transform: RigidTransform,
    pub stddev: [f64; 6],
    pub euler_mean_deg: [f64; 3],
    /// Average VOQ over the selected sets.
    pub mean_voq: f64,
    pub scored_sets: usize,
    pub pose_ids: Vec<String>,
    pub board_errors_mm: Vec<f64>,
    /// Selected sets in rank order.
    pub sets: Vec<SetRecord>,
    pub warnings: Vec<String>,
    pub config: Config,
    pub provenance: Option<Provenance>,
}

/// Runs `f` on a dedicated pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Score, select, solve and aggregate.
pub fn calibrate(poses: &[PoseSample], config: &Config) -> Result<CalibrationReport> {
    let scores = enumerate_and_score(poses, config.board_error_weight)?;
    let selected = select_top_k(&scores, config.k_sets, config.kappa_prefilter)?;
    let mut warnings = Vec::new();
    if selected.len() < config.k_sets {
        warnings.push(format!(
            "only {} finite-VOQ sets available, fewer than k_sets = {}",
            selected.len(),
            config.k_sets
        ));
    }
    let unstable = selected
        .iter()
        .filter(|s| s.score.kappa_lc >= config.kappa_warn)
        .count();
    if unstable > 0 {
        let msg = format!(
            "{unstable} selected sets have kappa_LC >= {}",
            config.kappa_warn
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let solved: Vec<Result<SetSolution>> = selected
        .par_iter()
        .map(|s| {
            let [a, b, c] = s.indices.map(|i| &poses[i]);
            solve_set(
                &[a.lidar, b.lidar, c.lidar],
                &[a.camera, b.camera, c.camera],
                config.refine.solver,
            )
        })
        .collect();

    let mut records: Vec<SetRecord> = selected
        .iter()
        .zip(&solved)
        .map(|(s, r)| SetRecord {
            indices: s.indices,
            score: s.score,
            solution: r.as_ref().ok().copied(),
            rejection: r.as_ref().err().map(|e| format!("solve failed: {e}")),
        })
        .collect();

    // Reduce in index order so the result does not depend on ranking ties.
    let mut order: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].solution.is_some())
        .collect();
    order.sort_by_key(|&i| records[i].indices);
    let transforms: Vec<RigidTransform> = order
        .iter()
        .map(|&i| records[i].solution.expect("filtered").transform)
        .collect();
    let agg = aggregate(&transforms)?;
    for (&i, reason) in order.iter().zip(&agg.rejected) {
        records[i].rejection = reason.clone();
    }
    warnings.extend(agg.warnings.iter().cloned());

    let mean_voq = selected.iter().map(|s| s.score.voq).sum::<f64>() / selected.len() as f64;
    Ok(CalibrationReport {
        transform: agg.transform,
        stddev: agg.stddev,
        euler_mean_deg: agg.euler_mean_deg,
        mean_voq,
        scored_sets: scores.len(),
        pose_ids: poses.iter().map(|p| p.id.clone()).collect(),
        board_errors_mm: poses.iter().map(|p| p.board_error_mm).collect(),
        sets: records,
        warnings,
        config: config.clone(),
        provenance: None,
    })
}

/// Rounds to 9 significant digits; non-finite values become `null`.
pub fn sig9(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let r: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    // Avoid emitting "-0.0".
    json!(if r == 0.0 { 0.0 } else { r })
}

fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| sig9(x)).collect())
}

fn matrix_rows(m: &Mat3) -> Vec<f64> {
    (0..3)
        .flat_map(|r| (0..3).map(move |c| m[(r, c)]))
        .collect()
}

fn euler_deg(r: &Rotation) -> [f64; 3] {
    let (a, b, c) = r.euler();
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

impl CalibrationReport {
    pub fn sets_used(&self) -> impl Iterator<Item = &SetRecord> {
        self.sets.iter().filter(|s| s.rejection.is_none())
    }

    pub fn sets_rejected(&self) -> impl Iterator<Item = &SetRecord> {
        self.sets.iter().filter(|s| s.rejection.is_some())
    }

    pub fn to_json(&self) -> Value {
        let t = &self.transform;
        let inv = t.inverse();
        let q = t.rotation.quaternion();
        let sets: Vec<Value> = self
            .sets
            .iter()
            .enumerate()
            .map(|(rank, s)| {
                let sol = s.solution.as_ref();
                json!({
                    "rank": rank,
                    "indices": s.indices,
                    "poses": s.indices.map(|i| self.pose_ids[i].as_str()),
                    "kappa_L": sig9(s.score.kappa_l),
                    "kappa_C": sig9(s.score.kappa_c),
                    "kappa_LC": sig9(s.score.kappa_lc),
                    "e_be_mm": sig9(s.score.e_be),
                    "voq": sig9(s.score.voq),
                    "status": if s.rejection.is_none() { "used" } else { "rejected" },
                    "reason": s.rejection,
                    "euler_deg": sol.map(|x| nums(&euler_deg(&x.transform.rotation))),
                    "translation_m": sol.map(|x| nums(x.transform.translation.as_slice())),
                    "residual_normal_angle_rad": sol.map(|x| sig9(x.residual_normal_angle)),
                    "residual_centre_m": sol.map(|x| sig9(x.residual_centre)),
                })
            })
            .collect();
        let poses: Vec<Value> = self
            .pose_ids
            .iter()
            .zip(&self.board_errors_mm)
            .map(|(id, e)| json!({ "id": id, "e_dim_mm": sig9(*e) }))
            .collect();
        let mut out = json!({
            "convention": CONVENTION,
            "euler_convention": "intrinsic Z-Y-X: R = Rz(yaw) * Ry(pitch) * Rx(roll)",
            "rotation_matrix": nums(&matrix_rows(t.rotation.matrix())),
            "quaternion": nums(&q),
            "euler_deg": nums(&euler_deg(&t.rotation)),
            "euler_mean_deg": nums(&self.euler_mean_deg),
            "translation_m": nums(t.translation.as_slice()),
            "inverse": {
                "convention": "p_camera = R * p_lidar + t",
                "rotation_matrix": nums(&matrix_rows(inv.rotation.matrix())),
                "translation_m": nums(inv.translation.as_slice()),
            },
            "stddev": nums(&self.stddev),
            "stddev_components": ["roll_deg", "pitch_deg", "yaw_deg", "x_m", "y_m", "z_m"],
            "mean_voq": sig9(self.mean_voq),
            "scored_sets": self.scored_sets,
            "sets_used": self.sets_used().count(),
            "sets_rejected": self.sets_rejected().count(),
            "poses": poses,
            "sets": sets,
            "warnings": self.warnings,
            "config": serde_json::to_value(&self.config).expect("config serializes"),
        });
        if let Some(p) = &self.provenance {
            out["tool_version"] = json!(p.tool_version);
            out["config_hash"] = json!(p.config_hash);
        }
        out
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Reads the final transform back from a report's JSON.
pub fn transform_from_json(v: &Value) -> Result<RigidTransform> {
    let numbers = |key: &str, n: usize| -> Result<Vec<f64>> {
        let arr = v[key].as_array().filter(|a| a.len() == n).ok_or_else(|| {
            Error::DegenerateInput(format!("calibration JSON lacks a {n}-number `{key}`"))
        })?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::DegenerateInput(format!("`{key}` holds a non-number")))
            })
            .collect()
    };
    if v["convention"] != CONVENTION {
        return Err(Error::DegenerateInput(format!(
            "calibration JSON must use `{CONVENTION}`"
        )));
    }
    let m = numbers("rotation_matrix", 9)?;
    let t = numbers("translation_m", 3)?;
    Ok(RigidTransform::new(
        Rotation::from_matrix(&Mat3::from_row_slice(&m)),
        Vec3::new(t[0], t[1], t[2]),
    ))
}

fn fmt_num(x: f64) -> String {
    match sig9(x) {
        Value::Null if x.is_nan() => "nan".into(),
        Value::Null if x > 0.0 => "inf".into(),
        Value::Null => "-inf".into(),
        v => v.to_string(),
    }
}

/// Writes every scored set sorted by VOQ.
/// `set_id` is the set's position in lexicographic enumeration.
pub fn write_assessment_csv<W: Write>(
    w: &mut W,
    scores: &[ScoredSet],
    pose_ids: &[String],
    comment: Option<&str>,
) -> std::io::Result<()> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_order(&scores[a], &scores[b]));
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(
        w,
        "set_id,pose_i,pose_j,pose_k,kappa_L,kappa_C,kappa_LC,e_be_mm,voq"
    )?;
    for i in order {
        let s = &scores[i];
        let [a, b, c] = s.indices.map(|k| pose_ids[k].as_str());
        writeln!(
            w,
            "{i},{a},{b},{c},{},{},{},{},{}",
            fmt_num(s.score.kappa_l),
            fmt_num(s.score.kappa_c),
            fmt_num(s.score.kappa_lc),
            fmt_num(s.score.e_be),
            fmt_num(s.score.voq),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::board::BoardFeatures;
    use crate::geometry::CameraIntrinsics;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample(id: usize, normal: Vec3, e: f64) -> PoseSample {
        let n = normal.normalize();
        let f = BoardFeatures {
            normal: n,
            centre: -n * 3.0,
            corners: [Vec3::zeros(); 4],
            edge_lengths: [0.0; 4],
        };
        PoseSample {
            id: format!("p{id}"),
            lidar: f,
            camera: f,
            board_error_mm: e,
        }
    }

    fn varied(n: usize) -> Vec<PoseSample> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.37;
                sample(
                    i,
                    Vec3::new(-1.0, 0.4 * a.sin(), 0.3 * (1.7 * a).cos()),
                    i as f64,
                )
            })
            .collect()
    }

    #[test]
    fn set_counts() {
        assert_eq!(triples(3).len(), 1);
        assert_eq!(triples(10).len(), 120);
        assert_eq!(triples(50).len(), 19600);
        assert_eq!(enumerate_and_score(&varied(10), 1.0).unwrap().len(), 120);
        assert!(matches!(
            enumerate_and_score(&varied(2), 1.0),
            Err(Error::TooFewPoses { need: 3, got: 2 })
        ));
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let s = enumerate_and_score(&varied(6), 1.0).unwrap();
        let idx: Vec<[usize; 3]> = s.iter().map(|x| x.indices).collect();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(idx, sorted);
        assert_eq!(idx[0], [0, 1, 2]);
    }

    fn scored(indices: [usize; 3], voq: f64, kappa: f64) -> ScoredSet {
        ScoredSet {
            indices,
            score: SetScore {
                kappa_l: kappa,
                kappa_c: kappa,
                kappa_lc: kappa,
                e_be: voq - kappa,
                voq,
            },
        }
    }

    #[test]
    fn top_k_tiebreaks() {
        let s = vec![
            scored([0, 1, 3], 5.0, 4.0),
            scored([0, 1, 2], 5.0, 4.0),
            scored([1, 2, 3], 5.0, 3.5),
            scored([0, 2, 3], 4.0, 4.0),
            scored([0, 1, 4], f64::INFINITY, f64::INFINITY),
        ];
        let top = select_top_k(&s, 3, None).unwrap();
        let idx: Vec<_> = top.iter().map(|x| x.indices).collect();
        assert_eq!(idx, vec![[0, 2, 3], [1, 2, 3], [0, 1, 2]]);
        // k beyond the finite count returns every finite set.
        assert_eq!(select_top_k(&s, 50, None).unwrap().len(), 4);
        assert_eq!(select_top_k(&s, 50, Some(3.9)).unwrap().len(), 1);
        let inf = vec![scored([0, 1, 2], f64::INFINITY, f64::INFINITY)];
        assert!(matches!(
            select_top_k(&inf, 5, None),
            Err(Error::NoFiniteSets)
        ));
    }

    fn tf(euler: (f64, f64, f64), t: [f64; 3]) -> RigidTransform {
        RigidTransform::new(
            Rotation::from_euler(euler.0, euler.1, euler.2),
            Vec3::from(t),
        )
    }

    #[test]
    fn identical_solutions() {
        let t = tf((0.1, -0.2, 0.3), [0.1, 0.2, -0.3]);
        let a = aggregate(&vec![t; 50]).unwrap();
        assert_eq!(a.transform, t);
        assert_eq!(a.stddev, [0.0; 6]);
        assert!(a.rejected.iter().all(|r| r.is_none()));
    }

    #[test]
    fn gross_outlier_rejected() {
        let t = tf((-1.5, 0.02, -1.6), [0.12, -0.25, -0.1]);
        let mut sols = vec![t; 49];
        let mut out = t;
        out.translation.x += 1.0;
        sols.insert(17, out);
        let a = aggregate(&sols).unwrap();
        assert_eq!(a.transform, t);
        assert_eq!(a.rejected.iter().filter(|r| r.is_some()).count(), 1);
        assert!(a.rejected[17].as_deref().unwrap().contains("on x"));
        assert_eq!(a.stddev, [0.0; 6]);
    }

    #[test]
    fn single_solution_warns() {
        let t = tf((0.0, 0.0, 0.0), [1.0, 0.0, 0.0]);
        let a = aggregate(&[t]).unwrap();
        assert_eq!(a.transform, t);
        assert_eq!(a.warnings.len(), 1);
        assert!(matches!(
            aggregate(&[]),
            Err(Error::AggregationCollapsed(_))
        ));
    }

    #[test]
    fn yaw_seam_is_unwrapped() {
        let pi = std::f64::consts::PI;
        let sols: Vec<_> = [pi - 0.01, -pi + 0.01, pi - 0.005, -pi + 0.005]
            .iter()
            .map(|&y| tf((0.0, 0.0, y), [0.0; 3]))
            .collect();
        let a = aggregate(&sols).unwrap();
        assert!(a.stddev[2] < 1.0, "{:?}", a.stddev);
        assert_relative_eq!(a.transform.rotation.euler().2.abs(), pi, epsilon = 1e-9);
    }

    #[test]
    fn sig9_rounding() {
        assert_eq!(sig9(1.234567891234), json!(1.23456789));
        assert_eq!(sig9(-0.0), json!(0.0));
        assert_eq!(sig9(f64::INFINITY), Value::Null);
        assert_eq!(sig9(3.0), json!(3.0));
    }

    #[test]
    fn calibrate_exact_on_consistent_samples() {
        let truth = tf((-1.55, 0.03, -1.6), [0.1, -0.2, 0.05]);
        let inv = truth.inverse();
        let poses: Vec<PoseSample> = varied(8)
            .into_iter()
            .map(|mut p| {
                p.camera = p.lidar.transformed(&inv);
                p
            })
            .collect();
        let config = Config::new(CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0));
        let r = calibrate(&poses, &config).unwrap();
        assert_eq!(r.scored_sets, 56);
        assert_eq!(r.sets.len(), 50);
        assert!(r.transform.rotation.angle_to(&truth.rotation) < 1e-9);
        assert!((r.transform.translation - truth.translation).norm() < 1e-9);
        let v = r.to_json();
        assert_eq!(v["convention"], CONVENTION);
        let back = transform_from_json(&v).unwrap();
        assert!(back.rotation.angle_to(&truth.rotation) < 1e-8);
        assert!((back.translation - truth.translation).norm() < 1e-8);
        assert_eq!(v["rotation_matrix"].as_array().unwrap().len(), 9);
        assert_eq!(
            v["sets_used"].as_u64().unwrap() + v["sets_rejected"].as_u64().unwrap(),
            50
        );
    }

    #[test]
    fn assessment_csv_sorted() {
        let poses = varied(5);
        let s = enumerate_and_score(&poses, 1.0).unwrap();
        let ids: Vec<String> = poses.iter().map(|p| p.id.clone()).collect();
        let mut buf = Vec::new();
        write_assessment_csv(&mut buf, &s, &ids, Some("x")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[1],
            "set_id,pose_i,pose_j,pose_k,kappa_L,kappa_C,kappa_LC,e_be_mm,voq"
        );
        assert_eq!(lines.len(), 2 + 10);
        let voqs: Vec<f64> = lines[2..]
            .iter()
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert!(voqs.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest! {
        #[test]
        fn top_k_is_a_lower_set(voqs in proptest::collection::vec(3.0f64..100.0, 4..60), k in 1usize..20) {
            let s: Vec<ScoredSet> = voqs.iter().enumerate().map(|(i, &v)| scored([i, i + 1, i + 2], v, 3.0)).collect();
            let top = select_top_k(&s, k, None).unwrap();
            prop_assert!(top.windows(2).all(|w| w[0].score.voq <= w[1].score.voq));
            let worst = top.last().unwrap().score.voq;
            for x in &s {
                if !top.iter().any(|t| t.indices == x.indices) {
                    prop_assert!(x.score.voq >= worst);
                }
            }
        }

        #[test]
        fn aggregate_is_proper_rotation(angles in proptest::collection::vec(proptest::array::uniform3(-3.0f64..3.0), 2..20)) {
            let sols: Vec<_> = angles.iter().map(|a| tf((a[0], a[1] / 2.0, a[2]), [a[0], a[1], a[2]])).collect();
            let a = aggregate(&sols).unwrap();
            let m = a.transform.rotation.matrix();
            prop_assert!((m.transpose() * m - Mat3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
