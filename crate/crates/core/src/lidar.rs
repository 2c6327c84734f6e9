//! Lidar-side board extraction.
//!
//! The board is expected as a 45° diamond. Extraction runs: RANSAC plane,
//! projection onto the plane, grouping of boundary points into the four
//! diamond edges, one RANSAC line per edge, and corners from adjacent line
//! intersections.
//!
//! With ring indices, each ring's left and right endpoints form two chains
//! that are split where the upper edge turns into the lower one. Unordered
//! clouds use a band around the 2D convex hull, split into angular sectors
//! at the extreme points.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::board::{view_axes, BoardFeatures, BoardGeometry};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::rng::{derive_seed, distinct_indices, seeded};

/// Axis-aligned crop box in the lidar frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RoiBox {
    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(Error::Config(
                "roi min must be below max on every axis".into(),
            ))
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Adds `offset` metres to every point's range, keeping its direction.
/// Points whose corrected range is not positive are dropped.
pub fn apply_range_offset(cloud: &PointCloud, offset: f64) -> PointCloud {
    if offset == 0.0 {
        return cloud.clone();
    }
    let keep: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let r = p.norm();
            r > 0.0 && r + offset > 0.0
        })
        .map(|(i, _)| i)
        .collect();
    let mut out = cloud.select(&keep);
    for p in &mut out.points {
        let r = p.norm();
        *p *= (r + offset) / r;
    }
    out
}

pub fn crop_roi(cloud: &PointCloud, roi: &RoiBox) -> Result<PointCloud> {
    let out = cloud.filter_indexed(|_, p| roi.contains(p));
    if out.is_empty() {
        return Err(Error::NoPointsInRoi);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneParams {
    pub threshold: f64,
    pub max_iters: usize,
    pub min_inlier_ratio: f64,
}

impl Default for PlaneParams {
    fn default() -> Self {
        Self {
            threshold: 0.03,
            max_iters: 500,
            min_inlier_ratio: 0.6,
        }
    }
}

/// Plane `normal · p + d = 0`, normal facing the sensor origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub normal: Vec3,
    pub d: f64,
    pub inliers: Vec<usize>,
}

impl PlaneFit {
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.d
    }
}

const RANSAC_CONFIDENCE: f64 = 0.999;

fn adaptive_iterations(inlier_ratio: f64, sample_size: i32, cap: usize) -> usize {
    let good = inlier_ratio.powi(sample_size);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Centroid and eigen-decomposition of the scatter matrix.
fn principal_axes(
    points: impl Iterator<Item = Vec3> + Clone,
) -> (Vec3, SymmetricEigen<f64, nalgebra::U3>) {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    (centroid, SymmetricEigen::new(cov / n))
}

fn smallest_axis(eig: &SymmetricEigen<f64, nalgebra::U3>) -> Vec3 {
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).into_owned().normalize()
}

/// Seeded RANSAC plane fit with a least-squares refit on the consensus set.
pub fn fit_plane_ransac(cloud: &PointCloud, params: &PlaneParams, seed: u64) -> Result<PlaneFit> {
    let pts = &cloud.points;
    let n = pts.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "plane fit needs 3 points, got {n}"
        )));
    }
    let (_, eig) = principal_axes(pts.iter().copied());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1] <= 1e-12 * ev[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateInput("points are collinear".into()));
    }

    let mut rng = seeded(seed);
    let mut best: Option<(usize, Vec3, f64)> = None;
    let mut needed = params.max_iters.max(1);
    let mut iter = 0;
    while iter < needed {
        iter += 1;
        let [a, b, c] = distinct_indices::<3>(&mut rng, n);
        let cross = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
        let len = cross.norm();
        if len < 1e-12 {
            continue;
        }
        let normal = cross / len;
        let d = -normal.dot(&pts[a]);
        let count = pts
            .iter()
            .filter(|p| (normal.dot(p) + d).abs() <= params.threshold)
            .count();
        if best.as_ref().is_none_or(|(bc, _, _)| count > *bc) {
            best = Some((count, normal, d));
            needed = adaptive_iterations(count as f64 / n as f64, 3, params.max_iters.max(1));
        }
    }
    let (_, normal, d) =
        best.ok_or_else(|| Error::DegenerateInput("no non-degenerate sample".into()))?;

    let mut inliers: Vec<usize> = (0..n)
        .filter(|&i| (normal.dot(&pts[i]) + d).abs() <= params.threshold)
        .collect();
    let mut normal = normal;
    let mut d = d;
    if inliers.len() >= 3 {
        let (centroid, eig) = principal_axes(inliers.iter().map(|&i| pts[i]));
        normal = smallest_axis(&eig);
        d = -normal.dot(&centroid);
        inliers = (0..n)
            .filter(|&i| (normal.dot(&pts[i]) + d).abs() <= params.threshold)
            .collect();
    }
    if d < 0.0 {
        normal = -normal;
        d = -d;
    }
    let ratio = inliers.len() as f64 / n as f64;
    if ratio < params.min_inlier_ratio {
        return Err(Error::PlaneNotFound {
            ratio,
            min: params.min_inlier_ratio,
        });
    }
    Ok(PlaneFit { normal, d, inliers })
}

/// 2D line through `point` with unit direction `dir`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2 {
    pub point: Vec2,
    pub dir: Vec2,
}

impl Line2 {
    pub fn distance(&self, p: &Vec2) -> f64 {
        let d = p - self.point;
        (d.x * self.dir.y - d.y * self.dir.x).abs()
    }

    /// Intersection with another line; `None` when parallel.
    pub fn intersect(&self, other: &Line2) -> Option<Vec2> {
        let m = Matrix2::new(self.dir.x, -other.dir.x, self.dir.y, -other.dir.y);
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let s = m.try_inverse()? * (other.point - self.point);
        Some(self.point + self.dir * s.x)
    }

    /// Total-least-squares line through at least two points.
    pub fn fit(points: &[Vec2]) -> Option<Line2> {
        if points.len() < 2 {
            return None;
        }
        let n = points.len() as f64;
        let c = points.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
        let mut cov = Matrix2::zeros();
        for p in points {
            let d = p - c;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let dir = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        let len = dir.norm();
        if !(len > 0.0) || eig.eigenvalues.max() <= 0.0 {
            return None;
        }
        Some(Line2 {
            point: c,
            dir: dir / len,
        })
    }
}

/// Seeded RANSAC line fit. Small inputs are searched exhaustively.
pub fn fit_line_ransac(
    points: &[Vec2],
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Option<Line2> {
    fit_line_ransac_with(points, threshold, max_iters, seed, |_| true)
}

/// As [`fit_line_ransac`], considering only candidate lines that pass `accept`.
pub fn fit_line_ransac_with(
    points: &[Vec2],
    threshold: f64,
    max_iters: usize,
    seed: u64,
    accept: impl Fn(&Line2) -> bool,
) -> Option<Line2> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let score = |a: usize, b: usize| -> Option<(usize, Line2)> {
        let dir = points[b] - points[a];
        let len = dir.norm();
        if len < 1e-12 {
            return None;
        }
        let line = Line2 {
            point: points[a],
            dir: dir / len,
        };
        if !accept(&line) {
            return None;
        }
        Some((
            points
                .iter()
                .filter(|p| line.distance(p) <= threshold)
                .count(),
            line,
        ))
    };
    let mut best: Option<(usize, Line2)> = None;
    let mut consider = |cand: Option<(usize, Line2)>| {
        if let Some((c, l)) = cand {
            if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
                best = Some((c, l));
            }
        }
    };
    if n * (n - 1) / 2 <= max_iters {
        for a in 0..n {
            for b in a + 1..n {
                consider(score(a, b));
            }
        }
    } else {
        let mut rng = seeded(seed);
        for _ in 0..max_iters {
            let [a, b] = distinct_indices::<2>(&mut rng, n);
            consider(score(a, b));
        }
    }
    let (_, line) = best?;
    let inliers: Vec<Vec2> = points
        .iter()
        .filter(|p| line.distance(p) <= threshold)
        .copied()
        .collect();
    Line2::fit(&inliers).or(Some(line))
}

/// How boundary points are chosen from the plane inliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMethod {
    /// Ring extremes when ring indices exist, convex hull otherwise.
    #[default]
    Auto,
    Rings,
    Hull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionParams {
    pub plane: PlaneParams,
    pub line_threshold: f64,
    pub line_max_iters: usize,
    pub boundary: BoundaryMethod,
    /// Minimum angle between adjacent edge lines, degrees.
    pub min_edge_angle_deg: f64,
    /// Allowed deviation of each edge from 45° to the up axis, degrees.
    pub diamond_tolerance_deg: f64,
    /// Sensor "up" direction used to name the diamond corners.
    pub up: [f64; 3],
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            plane: PlaneParams::default(),
            line_threshold: 0.02,
            line_max_iters: 200,
            boundary: BoundaryMethod::Auto,
            min_edge_angle_deg: 10.0,
            diamond_tolerance_deg: 20.0,
            up: [0.0, 0.0, 1.0],
        }
    }
}

/// Andrew's monotone chain; keeps points lying on hull edges.
fn convex_hull(points: &[Vec2]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
    });
    idx.dedup_by(|a, b| points[*a] == points[*b]);
    if idx.len() < 3 {
        return idx;
    }
    let scale = points
        .iter()
        .map(|p| p.amax())
        .fold(0.0, f64::max)
        .max(1e-300);
    let eps = 1e-12 * scale * scale;
    let cross = |o: usize, a: usize, b: usize| {
        let (o, a, b) = (points[o], points[a], points[b]);
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) < -eps
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull.sort_unstable();
    hull.dedup();
    hull
}

/// Points within `band` of the hull outline. Hull vertices alone are too
/// sparse on staircase-like edges of gridded scans.
fn hull_band(points: &[Vec2], hull: &[usize], band: f64) -> Vec<usize> {
    if hull.len() < 3 {
        return hull.to_vec();
    }
    let centre = hull.iter().fold(Vec2::zeros(), |a, &i| a + points[i]) / hull.len() as f64;
    let mut ring: Vec<usize> = hull.to_vec();
    ring.sort_by(|&a, &b| {
        let pa = points[a] - centre;
        let pb = points[b] - centre;
        pa.y.atan2(pa.x).total_cmp(&pb.y.atan2(pb.x))
    });
    let seg_dist = |p: &Vec2, a: &Vec2, b: &Vec2| {
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (a + ab * t)).norm()
    };
    (0..points.len())
        .filter(|&i| {
            (0..ring.len()).any(|k| {
                let a = &points[ring[k]];
                let b = &points[ring[(k + 1) % ring.len()]];
                seg_dist(&points[i], a, b) <= band
            })
        })
        .collect()
}

/// Left and right endpoints of every ring with at least two points, each
/// list ordered top to bottom.
fn ring_chains(planar: &[Vec2], rings: &[u16]) -> (Vec<Vec2>, Vec<Vec2>) {
    let mut by_ring: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for (i, &r) in rings.iter().enumerate() {
        let e = by_ring.entry(r).or_insert((i, i));
        if planar[i].x < planar[e.0].x {
            e.0 = i;
        }
        if planar[i].x > planar[e.1].x {
            e.1 = i;
        }
    }
    // A single return sits at a corner and belongs to neither side.
    let mut ends: Vec<(Vec2, Vec2)> = by_ring
        .values()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| (planar[a], planar[b]))
        .collect();
    ends.sort_by(|a, b| (b.0.y + b.1.y).total_cmp(&(a.0.y + a.1.y)));
    ends.into_iter().unzip()
}

/// Splits a top-to-bottom chain of endpoints into its upper and lower edge
/// at the break with the smallest total line residual.
fn split_chain(
    chain: &[Vec2],
    side: &'static str,
    accept: impl Fn(&Line2) -> bool,
) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
    if chain.len() < 4 {
        return Err(Error::InsufficientEdgePoints {
            edge: side,
            count: chain.len(),
        });
    }
    let residual = |pts: &[Vec2]| -> Option<f64> {
        let l = Line2::fit(pts).filter(|l| accept(l))?;
        Some(pts.iter().map(|p| l.distance(p).powi(2)).sum())
    };
    let mut best: Option<(f64, usize)> = None;
    for k in 2..=chain.len() - 2 {
        if let (Some(a), Some(b)) = (residual(&chain[..k]), residual(&chain[k..])) {
            if best.is_none_or(|(c, _)| a + b < c) {
                best = Some((a + b, k));
            }
        }
    }
    let (_, k) = best.ok_or_else(|| {
        Error::DegenerateEdges(format!(
            "{side} boundary does not split into two diamond edges"
        ))
    })?;
    Ok((chain[..k].to_vec(), chain[k..].to_vec()))
}

const EDGE_NAMES: [&str; 4] = ["top-right", "bottom-right", "bottom-left", "top-left"];

/// Splits boundary points into the four diamond edges by their angle around
/// `centre`, using the extreme points in each view direction as sector limits.
/// Groups follow `EDGE_NAMES` order.
fn group_edges(boundary: &[Vec2], centre: &Vec2) -> Result<[Vec<Vec2>; 4]> {
    let arg = |f: fn(&Vec2) -> f64, max: bool| {
        let it = boundary.iter();
        let cmp = |a: &&Vec2, b: &&Vec2| f(a).total_cmp(&f(b));
        if max { it.max_by(cmp) } else { it.min_by(cmp) }
            .copied()
            .expect("non-empty boundary")
    };
    let top = arg(|p| p.y, true);
    let bottom = arg(|p| p.y, false);
    let right = arg(|p| p.x, true);
    let left = arg(|p| p.x, false);
    let angle = |p: &Vec2| (p.y - centre.y).atan2(p.x - centre.x);
    let base = angle(&right);
    let ccw = |p: &Vec2| (angle(p) - base).rem_euclid(std::f64::consts::TAU);
    let (a_top, a_left, a_bottom) = (ccw(&top), ccw(&left), ccw(&bottom));
    if !(0.0 < a_top && a_top < a_left && a_left < a_bottom) {
        return Err(Error::DegenerateEdges(
            "boundary is not diamond shaped".into(),
        ));
    }
    let mut groups: [Vec<Vec2>; 4] = Default::default();
    for p in boundary {
        let a = ccw(p);
        let g = if a < a_top {
            0
        } else if a < a_left {
            3
        } else if a < a_bottom {
            2
        } else {
            1
        };
        groups[g].push(*p);
    }
    Ok(groups)
}

fn acute_angle(a: &Vec2, b: &Vec2) -> f64 {
    a.dot(b).abs().clamp(0.0, 1.0).acos()
}

/// Extracts normal, corners, centre and edge lengths of the diamond board.
///
/// Input should already be cropped to the board region and range-corrected.
pub fn extract_board_features(
    cloud: &PointCloud,
    params: &ExtractionParams,
    seed: u64,
) -> Result<BoardFeatures> {
    if cloud.is_empty() {
        return Err(Error::DegenerateInput("empty cloud".into()));
    }
    let plane = fit_plane_ransac(cloud, &params.plane, seed)?;
    let normal = plane.normal;
    let (right, up) = view_axes(&normal, &Vec3::from(params.up))?;

    let inlier_pts: Vec<Vec3> = plane.inliers.iter().map(|&i| cloud.points[i]).collect();
    let mean = inlier_pts.iter().fold(Vec3::zeros(), |a, p| a + p) / inlier_pts.len() as f64;
    let origin = mean - normal * plane.distance(&mean);
    let planar: Vec<Vec2> = inlier_pts
        .iter()
        .map(|p| Vec2::new((p - origin).dot(&right), (p - origin).dot(&up)))
        .collect();

    let use_rings = match params.boundary {
        BoundaryMethod::Hull => false,
        BoundaryMethod::Rings => {
            if cloud.ring.is_none() {
                return Err(Error::DegenerateInput(
                    "ring boundary requested but cloud has no rings".into(),
                ));
            }
            true
        }
        BoundaryMethod::Auto => cloud.ring.is_some(),
    };
    // Near a corner, two endpoints of adjacent rings can line up with each
    // other better than with their edge; only diamond-like lines count.
    let diamond_like = |l: &Line2| {
        (acute_angle(&l.dir, &Vec2::y()).to_degrees() - 45.0).abs() <= params.diamond_tolerance_deg
    };
    let (boundary, groups) = if use_rings {
        let rings = cloud.ring.as_ref().expect("checked above");
        let inlier_rings: Vec<u16> = plane.inliers.iter().map(|&i| rings[i]).collect();
        let (left, right) = ring_chains(&planar, &inlier_rings);
        let (tr, br) = split_chain(&right, "right", diamond_like)?;
        let (tl, bl) = split_chain(&left, "left", diamond_like)?;
        let boundary: Vec<Vec2> = left.into_iter().chain(right).collect();
        (boundary, [tr, br, bl, tl])
    } else {
        let band = hull_band(&planar, &convex_hull(&planar), params.line_threshold);
        let boundary: Vec<Vec2> = band.iter().map(|&i| planar[i]).collect();
        if boundary.len() < 8 {
            return Err(Error::InsufficientEdgePoints {
                edge: "boundary",
                count: boundary.len(),
            });
        }
        let centre2 = planar.iter().fold(Vec2::zeros(), |a, p| a + p) / planar.len() as f64;
        let groups = group_edges(&boundary, &centre2)?;
        (boundary, groups)
    };
    let mut lines = [Line2 {
        point: Vec2::zeros(),
        dir: Vec2::x(),
    }; 4];
    for (g, pts) in groups.iter().enumerate() {
        if pts.len() < 2 {
            return Err(Error::InsufficientEdgePoints {
                edge: EDGE_NAMES[g],
                count: pts.len(),
            });
        }
        lines[g] = fit_line_ransac_with(
            pts,
            params.line_threshold,
            params.line_max_iters,
            derive_seed(seed, g as u64 + 1),
            diamond_like,
        )
        .ok_or(Error::InsufficientEdgePoints {
            edge: EDGE_NAMES[g],
            count: pts.len(),
        })?;
    }

    // Points near a corner can land in the neighbouring sector; hand each
    // boundary point to its nearest line and refit.
    for _ in 0..2 {
        let mut assigned: [Vec<Vec2>; 4] = Default::default();
        for p in &boundary {
            let (g, dist) = lines
                .iter()
                .enumerate()
                .map(|(g, l)| (g, l.distance(p)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("four lines");
            if dist <= params.line_threshold {
                assigned[g].push(*p);
            }
        }
        for g in 0..4 {
            if let Some(l) = Line2::fit(&assigned[g]) {
                lines[g] = l;
            }
        }
    }

    let min_edge = params.min_edge_angle_deg.to_radians();
    for g in 0..4 {
        if acute_angle(&lines[g].dir, &lines[(g + 1) % 4].dir) < min_edge {
            return Err(Error::DegenerateEdges(format!(
                "{} and {} edges are nearly parallel",
                EDGE_NAMES[g],
                EDGE_NAMES[(g + 1) % 4]
            )));
        }
        let tilt = acute_angle(&lines[g].dir, &Vec2::y()).to_degrees();
        if (tilt - 45.0).abs() > params.diamond_tolerance_deg {
            return Err(Error::DegenerateEdges(format!(
                "{} edge is {:.1}° from vertical; board is not held as a diamond",
                EDGE_NAMES[g], tilt
            )));
        }
    }

    let [tr, br, bl, tl] = lines;
    let meet = |a: &Line2, b: &Line2| {
        a.intersect(b)
            .ok_or_else(|| Error::DegenerateEdges("adjacent edge lines do not intersect".into()))
    };
    let corners2 = [
        meet(&tl, &tr)?,
        meet(&tr, &br)?,
        meet(&br, &bl)?,
        meet(&bl, &tl)?,
    ];
    let corners = corners2.map(|c| origin + right * c.x + up * c.y);
    Ok(BoardFeatures::from_corners(normal, corners))
}

/// Sum of absolute edge-length errors against the physical board, millimetres.
pub fn board_dimension_error(features: &BoardFeatures, board: &BoardGeometry) -> f64 {
    dimension_error_mm(&features.edge_lengths, &board.edge_lengths())
}

pub(crate) fn dimension_error_mm(measured: &[f64; 4], physical: &[f64; 4]) -> f64 {
    measured
        .iter()
        .zip(physical)
        .map(|(l, m)| (l - m).abs() * 1000.0)
        .sum()
}
