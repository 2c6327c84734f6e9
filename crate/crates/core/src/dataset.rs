//! Pose directories: `poses.csv` (`pose_id,role`) plus one folder per pose
//! holding `cloud.csv` and `corners.csv`.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CornerObservations;
use crate::cloud::PointCloud;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{prepare_pose, PoseSample};

pub const INDEX_FILE: &str = "poses.csv";
pub const CLOUD_FILE: &str = "cloud.csv";
pub const CORNERS_FILE: &str = "corners.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Calibration,
    Evaluation,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Calibration => "calibration",
            Role::Evaluation => "evaluation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub role: Role,
}

/// Raw inputs of one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseInput {
    pub id: String,
    pub cloud: PointCloud,
    pub corners: CornerObservations,
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            other => Error::parse(&path, format!("{other:?}")),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(&path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["pose_id", "role"] {
        return Err(Error::parse(&path, "header must be pose_id,role"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(&path, e.to_string()))?;
        let id = rec[0].to_string();
        let role = match &rec[1] {
            "calibration" => Role::Calibration,
            "evaluation" => Role::Evaluation,
            other => {
                return Err(Error::parse(
                    &path,
                    format!("unknown role `{other}` for pose `{id}`"),
                ))
            }
        };
        let valid_id = !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']);
        if !valid_id {
            return Err(Error::parse(&path, format!("invalid pose id `{id}`")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse(&path, format!("duplicate pose id `{id}`")));
        }
        out.push(IndexEntry { id, role });
    }
    Ok(out)
}

pub fn load_pose(dir: &Path, id: &str, grid: (usize, usize)) -> Result<PoseInput> {
    let pose_dir = dir.join(id);
    Ok(PoseInput {
        id: id.to_string(),
        cloud: PointCloud::read_csv(pose_dir.join(CLOUD_FILE))?,
        corners: CornerObservations::read_csv(pose_dir.join(CORNERS_FILE), grid)?,
    })
}

/// Extracted poses, and the ids that failed with their errors.
pub type Prepared = (Vec<PoseSample>, Vec<(String, Error)>);

/// Loads and extracts every pose with the given role. Failures are returned
/// alongside the successes, in index order.
pub fn load_samples(dir: &Path, role: Role, config: &Config) -> Result<Prepared> {
    let ids: Vec<String> = read_index(dir)?
        .into_iter()
        .filter(|e| e.role == role)
        .map(|e| e.id)
        .collect();
    let results: Vec<Result<PoseSample>> = ids
        .par_iter()
        .map(|id| {
            let input = load_pose(dir, id, config.board.inner_corners)?;
            prepare_pose(id, &input.cloud, &input.corners, config)
        })
        .collect();
    Ok(split_results(ids, results))
}

/// Extracts features from in-memory inputs, keeping successes and failures apart.
pub fn prepare_inputs(inputs: &[PoseInput], config: &Config) -> Prepared {
    let results: Vec<Result<PoseSample>> = inputs
        .par_iter()
        .map(|p| prepare_pose(&p.id, &p.cloud, &p.corners, config))
        .collect();
    split_results(inputs.iter().map(|p| p.id.clone()).collect(), results)
}

fn split_results(ids: Vec<String>, results: Vec<Result<PoseSample>>) -> Prepared {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in ids.into_iter().zip(results) {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => failed.push((id, e)),
        }
    }
    (ok, failed)
}

/// Writes poses and the index. Existing files are overwritten.
pub fn write_pose_directory(
    dir: &Path,
    poses: &[(Role, &PoseInput)],
    comment: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index: PathBuf = dir.join(INDEX_FILE);
    let mut body = String::new();
    if let Some(c) = comment {
        body.push_str(&format!("# {c}\n"));
    }
    body.push_str("pose_id,role\n");
    for (role, p) in poses {
        let pose_dir = dir.join(&p.id);
        std::fs::create_dir_all(&pose_dir).map_err(|e| Error::io(&pose_dir, e))?;
        p.cloud.write_csv(pose_dir.join(CLOUD_FILE), comment)?;
        p.corners.write_csv(pose_dir.join(CORNERS_FILE), comment)?;
        body.push_str(&format!("{},{}\n", p.id, role.as_str()));
    }
    let mut f = std::fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    f.write_all(body.as_bytes())
        .map_err(|e| Error::io(&index, e))
}
