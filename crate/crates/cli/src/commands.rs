use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::json;
use sha2::{Digest, Sha256};

use voqcal_core::config::Config;
use voqcal_core::dataset::{
    load_pose, load_samples, read_index, write_pose_directory, Prepared, Role,
};
use voqcal_core::evaluation::{
    render_projection, reproject_pose_error, Image, PoseRecord, ReprojectionStats,
};
use voqcal_core::lidar::apply_range_offset;
use voqcal_core::pipeline::{
    calibrate as run_calibration, enumerate_and_score, prepare_pose, rank_order, sig9,
    transform_from_json, with_workers, write_assessment_csv, PoseSample, Provenance,
};
use voqcal_core::synthetic::{generate_scene, SceneSpec};
use voqcal_core::{Error, ErrorKind};

use crate::{Common, EvaluateArgs, ProjectArgs, RunArgs, SimulateArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// An error with the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: e.into(),
    }
}

fn data_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_DATA,
        error: e.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Config file plus command-line overrides, with its provenance stamp.
struct Loaded {
    config: Config,
    provenance: Provenance,
}

fn provenance_of<T: serde::Serialize>(value: &T) -> Provenance {
    let canonical = serde_json::to_vec(value).expect("config serializes");
    Provenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hex::encode(Sha256::digest(&canonical)),
    }
}

fn load_config(common: &Common, k: Option<usize>, refine: bool) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("cannot read config {}", common.config.display()))
        .map_err(config_error)?;
    let mut config: Config = toml::from_str(&text)
        .with_context(|| format!("invalid config {}", common.config.display()))
        .map_err(config_error)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(k) = k {
        config.k_sets = k;
    }
    if refine {
        config.refine.solver = true;
    }
    config.validate()?;
    let provenance = provenance_of(&config);
    Ok(Loaded { config, provenance })
}

fn data_dir(common: &Common, config: &Config) -> Result<PathBuf, Failure> {
    common
        .data
        .clone()
        .or_else(|| config.paths.data.clone())
        .ok_or_else(|| config_error(anyhow!("no data directory: pass --data or set paths.data")))
}

fn out_dir(out: Option<&PathBuf>, config: &Config) -> Result<PathBuf, Failure> {
    let dir = out
        .cloned()
        .or_else(|| config.paths.out.clone())
        .ok_or_else(|| config_error(anyhow!("no output directory: pass --out or set paths.out")))?;
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(data_error)?;
    Ok(dir)
}

fn write_file(path: &Path, body: &[u8]) -> CmdResult {
    fs::write(path, body)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(data_error)
}

fn pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, Failure> + Send,
) -> Result<T, Failure> {
    with_workers(workers, f)?
}

/// Extracts calibration poses; failures are reported and skipped.
fn calibration_samples(dir: &Path, config: &Config) -> Result<Prepared, Failure> {
    let (samples, failed) = load_samples(dir, Role::Calibration, config)?;
    for (id, e) in &failed {
        log::warn!("pose {id} excluded: {e}");
    }
    log::info!(
        "{} calibration poses usable, {} excluded",
        samples.len(),
        failed.len()
    );
    Ok((samples, failed))
}

fn write_pose_table(
    path: &Path,
    samples: &[PoseSample],
    failed: &[(String, Error)],
    comment: &str,
) -> CmdResult {
    let mut body = format!("# {comment}\npose_id,e_dim_mm,status,reason\n");
    for s in samples {
        body.push_str(&format!("{},{},used,\n", s.id, sig9(s.board_error_mm)));
    }
    for (id, e) in failed {
        body.push_str(&format!(
            "{id},,excluded,{}\n",
            e.to_string().replace([',', '\n'], ";")
        ));
    }
    write_file(path, body.as_bytes())
}

pub fn assess(args: &RunArgs) -> CmdResult {
    let Loaded { config, provenance } = load_config(&args.common, args.k, args.refine)?;
    let data = data_dir(&args.common, &config)?;
    let out = out_dir(args.common.out.as_ref(), &config)?;
    pool(args.common.workers, || {
        let (samples, failed) = calibration_samples(&data, &config)?;
        let scores = enumerate_and_score(&samples, config.board_error_weight)?;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let mut csv = Vec::new();
        write_assessment_csv(&mut csv, &scores, &ids, Some(&provenance.comment()))
            .map_err(data_error)?;
        write_file(&out.join("assessment.csv"), &csv)?;
        write_pose_table(
            &out.join("poses.csv"),
            &samples,
            &failed,
            &provenance.comment(),
        )?;

        let best = scores
            .iter()
            .min_by(|a, b| rank_order(a, b))
            .expect("at least one set");
        let unstable = scores
            .iter()
            .filter(|s| s.score.kappa_lc >= config.kappa_warn)
            .count();
        let stdout = std::io::stdout();
        let mut w = stdout.lock();
        let mut summary = || -> std::io::Result<()> {
            writeln!(w, "sets scored: {}", scores.len())?;
            writeln!(
                w,
                "best VOQ: {:.4} (poses {}, {}, {})",
                best.score.voq, ids[best.indices[0]], ids[best.indices[1]], ids[best.indices[2]]
            )?;
            writeln!(w, "sets with kappa_LC >= {}: {unstable}", config.kappa_warn)?;
            writeln!(w, "pose        e_dim_mm")?;
            for s in &samples {
                writeln!(w, "{:<12}{:>8.2}", s.id, s.board_error_mm)?;
            }
            for (id, e) in &failed {
                writeln!(w, "{id:<12}excluded: {e}")?;
            }
            Ok(())
        };
        summary().map_err(data_error)
    })
}

pub fn calibrate(args: &RunArgs) -> CmdResult {
    let Loaded { config, provenance } = load_config(&args.common, args.k, args.refine)?;
    let data = data_dir(&args.common, &config)?;
    let out = out_dir(args.common.out.as_ref(), &config)?;
    let report = pool(args.common.workers, || {
        let (samples, failed) = calibration_samples(&data, &config)?;
        write_pose_table(
            &out.join("poses.csv"),
            &samples,
            &failed,
            &provenance.comment(),
        )?;
        let mut report = run_calibration(&samples, &config)?;
        report.provenance = Some(provenance.clone());
        Ok(report)
    })?;
    write_file(
        &out.join("calibration.json"),
        report.to_json_string().as_bytes(),
    )?;
    let (roll, pitch, yaw) = report.transform.rotation.euler();
    let t = report.transform.translation;
    log::info!(
        "roll/pitch/yaw = {:.4}/{:.4}/{:.4} deg, t = ({:.4}, {:.4}, {:.4}) m, {} of {} sets used",
        roll.to_degrees(),
        pitch.to_degrees(),
        yaw.to_degrees(),
        t.x,
        t.y,
        t.z,
        report.sets_used().count(),
        report.sets.len()
    );
    Ok(())
}

fn read_transform(path: &Path) -> Result<voqcal_core::geometry::RigidTransform, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read calibration {}", path.display()))
        .map_err(data_error)?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("invalid calibration JSON {}", path.display()))
        .map_err(data_error)?;
    transform_from_json(&v)
        .with_context(|| format!("invalid calibration {}", path.display()))
        .map_err(data_error)
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let Loaded { config, provenance } = load_config(&args.common, None, false)?;
    let data = data_dir(&args.common, &config)?;
    let out = out_dir(args.common.out.as_ref(), &config)?;
    let transform = read_transform(&args.calibration)?;
    let entries: Vec<String> = read_index(&data)?
        .into_iter()
        .filter(|e| e.role == Role::Evaluation)
        .map(|e| e.id)
        .collect();
    if entries.is_empty() {
        return Err(data_error(anyhow!(
            "{} lists no evaluation poses",
            data.display()
        )));
    }
    let stats = pool(args.common.workers, || {
        use rayon::prelude::*;
        let records: Vec<PoseRecord> = entries
            .par_iter()
            .map(|id| {
                let sample = load_pose(&data, id, config.board.inner_corners)
                    .and_then(|p| prepare_pose(id, &p.cloud, &p.corners, &config));
                match sample.and_then(|s| {
                    reproject_pose_error(&transform, &config.intrinsics, &s.lidar, &s.camera)
                }) {
                    Ok(e) => PoseRecord {
                        id: id.clone(),
                        error: Some(e),
                        excluded: None,
                    },
                    Err(e) => {
                        log::warn!("evaluation pose {id} excluded: {e}");
                        PoseRecord::excluded(id, e.to_string())
                    }
                }
            })
            .collect();
        Ok(ReprojectionStats::from_records(records)?)
    })?;
    let mut csv = Vec::new();
    stats
        .write_csv(&mut csv, Some(&provenance.comment()))
        .map_err(data_error)?;
    write_file(&out.join("evaluation.csv"), &csv)?;
    let mut summary = stats.summary_json();
    summary["tool_version"] = json!(provenance.tool_version);
    summary["config_hash"] = json!(provenance.config_hash);
    let mut body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    body.push('\n');
    write_file(&out.join("evaluation_summary.json"), body.as_bytes())?;
    println!(
        "{} poses: mean {:.3} px (std {:.3}), mean {:.3} cm (std {:.3})",
        stats.used(),
        stats.mean_px,
        stats.std_px,
        stats.mean_cm,
        stats.std_cm
    );
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let mut spec: SceneSpec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read scene spec {}", path.display()))
                .map_err(config_error)?;
            toml::from_str(&text)
                .with_context(|| format!("invalid scene spec {}", path.display()))
                .map_err(config_error)?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    let config = spec.config();
    let provenance = provenance_of(&config);
    let comment = provenance.comment();
    let poses: Vec<(Role, &voqcal_core::dataset::PoseInput)> =
        scene.poses.iter().map(|p| (p.role, &p.input)).collect();
    write_pose_directory(&args.out, &poses, Some(&comment))?;

    let config_toml = toml::to_string(&config).map_err(config_error)?;
    write_file(
        &args.out.join("config.toml"),
        format!("# {comment}\n{config_toml}").as_bytes(),
    )?;
    let spec_toml = toml::to_string(&spec).map_err(config_error)?;
    write_file(
        &args.out.join("scene.toml"),
        format!("# {comment}\n{spec_toml}").as_bytes(),
    )?;
    let truth = &scene.truth;
    let (roll, pitch, yaw) = truth.rotation.euler();
    let m = truth.rotation.matrix();
    let truth_json = json!({
        "tool_version": provenance.tool_version,
        "config_hash": provenance.config_hash,
        "convention": voqcal_core::pipeline::CONVENTION,
        "rotation_matrix": (0..9).map(|i| m[(i / 3, i % 3)]).collect::<Vec<_>>(),
        "quaternion": truth.rotation.quaternion(),
        "euler_deg": [roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()],
        "translation_m": truth.translation.as_slice(),
    });
    let mut body = serde_json::to_string_pretty(&truth_json).expect("truth serializes");
    body.push('\n');
    write_file(&args.out.join("truth.json"), body.as_bytes())?;
    log::info!(
        "wrote {} poses to {}",
        scene.poses.len(),
        args.out.display()
    );
    Ok(())
}

pub fn project(args: &ProjectArgs) -> CmdResult {
    let Loaded { config, provenance } = load_config(&args.common, None, false)?;
    let out = out_dir(args.common.out.as_ref(), &config)?;
    let transform = read_transform(&args.calibration)?;
    let cloud = match (&args.cloud, &args.pose) {
        (Some(path), _) => voqcal_core::cloud::PointCloud::read_csv(path)?,
        (None, Some(id)) => {
            let data = data_dir(&args.common, &config)?;
            load_pose(&data, id, config.board.inner_corners)?.cloud
        }
        (None, None) => return Err(config_error(anyhow!("pass --cloud PATH or --pose ID"))),
    };
    let cloud = apply_range_offset(&cloud, config.range_offset_m);
    let background = args.image.as_ref().map(Image::read_ppm).transpose()?;
    let (near, far) = (args.depth_range[0], args.depth_range[1]);
    if !(near >= 0.0 && far > near) {
        return Err(config_error(anyhow!(
            "depth range must satisfy 0 <= near < far"
        )));
    }
    let img = render_projection(
        &transform,
        &config.intrinsics,
        &cloud,
        config.image.width,
        config.image.height,
        (near, far),
        background.as_ref(),
    )
    .map_err(data_error)?;
    let path = out.join("projection.ppm");
    img.save_ppm(&path, Some(&provenance.comment()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
