//! Camera→lidar extrinsics from a single 3-pose set.
//!
//! Rotation aligns the camera normals onto the lidar normals (orthogonal
//! Procrustes); translation aligns the board centres with the rotation fixed.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::board::BoardFeatures;
use crate::error::{Error, Result};
use crate::geometry::{
    invert3, nearest_rotation, rows_to_mat3, Mat3, RigidTransform, Rotation, Vec3,
};

const REFINE_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetSolution {
    pub transform: RigidTransform,
    /// Largest angle between `R·n_C` and `n_L` over the set, radians.
    pub residual_normal_angle: f64,
    /// Largest `‖R·c_C + t − c_L‖` over the set, metres.
    pub residual_centre: f64,
}

/// Rotation minimizing `‖R·N_Cᵀ − N_Lᵀ‖_F` (rows of each matrix are normals).
pub fn solve_rotation(camera_normals: &Mat3, lidar_normals: &Mat3) -> Result<Rotation> {
    if invert3(camera_normals).is_err() || invert3(lidar_normals).is_err() {
        return Err(Error::DegenerateNormalMatrix);
    }
    let cross_cov = lidar_normals.transpose() * camera_normals;
    Ok(Rotation::from_matrix_unchecked(nearest_rotation(
        &cross_cov,
    )))
}

/// `t = mean(c_L − R·c_C)`. With `R` fixed this is also the least-squares fit.
pub fn solve_translation(
    r: &Rotation,
    centres_camera: &[Vec3; 3],
    centres_lidar: &[Vec3; 3],
) -> Vec3 {
    centres_camera
        .iter()
        .zip(centres_lidar)
        .fold(Vec3::zeros(), |acc, (c, l)| acc + (l - r.apply(c)))
        / 3.0
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn residuals(
    t: &RigidTransform,
    lidar: &[BoardFeatures; 3],
    camera: &[BoardFeatures; 3],
) -> (f64, f64) {
    let mut angle: f64 = 0.0;
    let mut centre: f64 = 0.0;
    for (l, c) in lidar.iter().zip(camera) {
        angle = angle.max(angle_between(&t.rotation.apply(&c.normal), &l.normal));
        centre = centre.max((t.apply(&c.centre) - l.centre).norm());
    }
    (angle, centre)
}

/// Stacked residual: per pose, the rotation vector taking `R·n_C` onto `n_L`
/// (norm = misalignment angle) followed by the centre offset.
fn stacked_residual(
    t: &RigidTransform,
    lidar: &[BoardFeatures; 3],
    camera: &[BoardFeatures; 3],
) -> DVector<f64> {
    let mut out = DVector::zeros(18);
    for (i, (l, c)) in lidar.iter().zip(camera).enumerate() {
        let rn = t.rotation.apply(&c.normal);
        let axis = rn.cross(&l.normal);
        let s = axis.norm();
        let theta = s.atan2(rn.dot(&l.normal));
        let rv = if s > 1e-12 { axis * (theta / s) } else { axis };
        let dc = t.apply(&c.centre) - l.centre;
        for k in 0..3 {
            out[6 * i + k] = rv[k];
            out[6 * i + 3 + k] = dc[k];
        }
    }
    out
}

/// Gauss-Newton over the 6-DOF transform, squared angle (rad²) plus squared
/// centre distance (m²), equal weights.
pub fn refine_transform(
    initial: RigidTransform,
    lidar: &[BoardFeatures; 3],
    camera: &[BoardFeatures; 3],
) -> RigidTransform {
    let perturb = |t: &RigidTransform, d: &Vector6<f64>| {
        RigidTransform::new(
            Rotation::from_rotation_vector(&Vec3::new(d[0], d[1], d[2])).compose(&t.rotation),
            t.translation + Vec3::new(d[3], d[4], d[5]),
        )
    };
    let mut current = initial;
    let mut r = stacked_residual(&current, lidar, camera);
    for _ in 0..REFINE_MAX_ITERS {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(18, 6);
        for j in 0..6 {
            let mut d = Vector6::zeros();
            d[j] = h;
            let rp = stacked_residual(&perturb(&current, &d), lidar, camera);
            d[j] = -h;
            let rm = stacked_residual(&perturb(&current, &d), lidar, camera);
            jac.set_column(j, &((rp - rm) / (2.0 * h)));
        }
        let jtj: Matrix6<f64> = (jac.transpose() * &jac)
            .fixed_view::<6, 6>(0, 0)
            .into_owned();
        let jtr: Vector6<f64> = (jac.transpose() * &r).fixed_rows::<6>(0).into_owned();
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let candidate = perturb(&current, &step);
        let r_new = stacked_residual(&candidate, lidar, camera);
        if r_new.norm_squared() >= r.norm_squared() {
            break;
        }
        current = candidate;
        r = r_new;
        if step.norm() < 1e-14 {
            break;
        }
    }
    current
}

/// Rotation then translation for one set; optional local refinement.
pub fn solve_set(
    lidar: &[BoardFeatures; 3],
    camera: &[BoardFeatures; 3],
    refine: bool,
) -> Result<SetSolution> {
    let n_l = rows_to_mat3([lidar[0].normal, lidar[1].normal, lidar[2].normal]);
    let n_c = rows_to_mat3([camera[0].normal, camera[1].normal, camera[2].normal]);
    let rotation = solve_rotation(&n_c, &n_l)?;
    let translation = solve_translation(
        &rotation,
        &[camera[0].centre, camera[1].centre, camera[2].centre],
        &[lidar[0].centre, lidar[1].centre, lidar[2].centre],
    );
    let mut transform = RigidTransform::new(rotation, translation);
    if refine {
        transform = refine_transform(transform, lidar, camera);
    }
    let (residual_normal_angle, residual_centre) = residuals(&transform, lidar, camera);
    Ok(SetSolution {
        transform,
        residual_normal_angle,
        residual_centre,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::Rng;

    fn feature(normal: Vec3, centre: Vec3) -> BoardFeatures {
        BoardFeatures {
            normal,
            centre,
            corners: [centre; 4],
            edge_lengths: [0.0; 4],
        }
    }

    fn consistent_set(truth: &RigidTransform) -> ([BoardFeatures; 3], [BoardFeatures; 3]) {
        let cam = [
            feature(
                Vec3::new(0.2, 0.1, -1.0).normalize(),
                Vec3::new(-0.4, 0.1, 2.0),
            ),
            feature(
                Vec3::new(-0.5, 0.0, -1.0).normalize(),
                Vec3::new(0.5, -0.2, 3.0),
            ),
            feature(
                Vec3::new(0.0, 0.6, -1.0).normalize(),
                Vec3::new(0.0, 0.3, 2.5),
            ),
        ];
        let lid = cam.map(|c| c.transformed(truth));
        (lid, cam)
    }

    fn truth() -> RigidTransform {
        RigidTransform::new(
            Rotation::from_euler(-1.58, 0.02, -1.55),
            Vec3::new(0.12, -0.05, -0.2),
        )
    }

    /// Horn's closed form: maximizes Σ n_L·(R n_C) via the top eigenvector of a
    /// 4×4 symmetric matrix built from the cross-covariance.
    fn horn_rotation(n_c: &Mat3, n_l: &Mat3) -> Mat3 {
        let s = n_c.transpose() * n_l; // Σ c lᵀ
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        #[rustfmt::skip]
        let k = Matrix4::new(
            sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
            syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
            szx - sxz,       sxy + syx,       -sxx + syy - szz, syz + szy,
            sxy - syx,       szx + sxz,       syz + szy,       -sxx - syy + szz,
        );
        let eig = nalgebra::SymmetricEigen::new(k);
        let q = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
        *Rotation::from_quaternion(q[0], q[1], q[2], q[3]).matrix()
    }

    fn objective(r: &Mat3, n_c: &Mat3, n_l: &Mat3) -> f64 {
        (r * n_c.transpose() - n_l.transpose()).norm_squared()
    }

    #[test]
    fn exact_consistency_recovers_rotation() {
        let r_true = Rotation::from_euler(0.3, -0.2, 1.1);
        let n_c = Mat3::identity();
        let n_l = rows_to_mat3([
            r_true.apply(&Vec3::x()),
            r_true.apply(&Vec3::y()),
            r_true.apply(&Vec3::z()),
        ]);
        let r = solve_rotation(&n_c, &n_l).unwrap();
        assert!((r.matrix() - r_true.matrix()).amax() < 1e-9);
        let same = solve_rotation(&n_l, &n_l).unwrap();
        assert!((same.matrix() - Mat3::identity()).amax() < 1e-9);
    }

    #[test]
    fn singular_normals_rejected() {
        let n = rows_to_mat3([Vec3::x(), Vec3::x(), Vec3::z()]);
        assert!(matches!(
            solve_rotation(&n, &Mat3::identity()),
            Err(Error::DegenerateNormalMatrix)
        ));
        assert!(matches!(
            solve_rotation(&Mat3::identity(), &n),
            Err(Error::DegenerateNormalMatrix)
        ));
    }

    #[test]
    fn noisy_normals_match_brute_force_grid() {
        let mut rng = seeded(21);
        let r_true = Rotation::from_euler(0.2, 0.1, -0.3);
        let n_c = rows_to_mat3([
            Vec3::new(0.3, 0.1, -1.0).normalize(),
            Vec3::new(-0.6, 0.2, -1.0).normalize(),
            Vec3::new(0.1, -0.7, -1.0).normalize(),
        ]);
        let rows: Vec<Vec3> = (0..3)
            .map(|i| {
                let n = r_true.apply(&n_c.row(i).transpose());
                let axis = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                Rotation::from_axis_angle(&axis.cross(&n), 1f64.to_radians()).apply(&n)
            })
            .collect();
        let n_l = rows_to_mat3([rows[0], rows[1], rows[2]]);
        let solved = solve_rotation(&n_c, &n_l).unwrap();

        // Brute-force oracle: rotation vectors on a grid around the truth,
        // refined once on a finer grid around the coarse winner.
        let search = |centre: Vec3, half: f64, steps: i32| {
            let mut best = (f64::INFINITY, centre);
            let h = half / steps as f64;
            for i in -steps..=steps {
                for j in -steps..=steps {
                    for k in -steps..=steps {
                        let w = centre + Vec3::new(i as f64, j as f64, k as f64) * h;
                        let r = Rotation::from_rotation_vector(&w);
                        let f = objective(r.matrix(), &n_c, &n_l);
                        if f < best.0 {
                            best = (f, w);
                        }
                    }
                }
            }
            best.1
        };
        let coarse = search(r_true.rotation_vector(), 0.06, 12);
        let step = 0.06 / 12.0;
        let fine = search(coarse, step, 10);
        let fine_step = step / 10.0;
        let oracle = Rotation::from_rotation_vector(&fine);
        assert!(
            solved.angle_to(&oracle) < 2.0 * fine_step,
            "{}",
            solved.angle_to(&oracle)
        );
        assert!(
            objective(solved.matrix(), &n_c, &n_l)
                <= objective(oracle.matrix(), &n_c, &n_l) + 1e-12
        );
    }

    #[test]
    fn matches_quaternion_formulation() {
        let mut rng = seeded(5);
        for _ in 0..200 {
            let rows: Vec<Vec3> = (0..6)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                    .normalize()
                })
                .collect();
            let n_c = rows_to_mat3([rows[0], rows[1], rows[2]]);
            let n_l = rows_to_mat3([rows[3], rows[4], rows[5]]);
            if n_c.determinant().abs() < 0.05 || n_l.determinant().abs() < 0.05 {
                continue;
            }
            let r = solve_rotation(&n_c, &n_l).unwrap();
            let h = horn_rotation(&n_c, &n_l);
            // Compare objectives first; the matrices match when the optimum is unique.
            let (fa, fb) = (objective(r.matrix(), &n_c, &n_l), objective(&h, &n_c, &n_l));
            assert!((fa - fb).abs() < 1e-9, "{fa} vs {fb}");
            let svd = (n_l.transpose() * n_c).svd(false, false);
            let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
            s.sort_by(|a, b| a.total_cmp(b));
            if s[0] + s[1] > 1e-3 {
                assert!((r.matrix() - h).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn always_proper_rotation() {
        // Camera normals that are a reflection of the lidar ones.
        let n_l = Mat3::identity();
        let n_c = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let r = solve_rotation(&n_c, &n_l).unwrap();
        assert_relative_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn translation_examples() {
        let c = [
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.0, 3.0),
            Vec3::new(0.0, 1.0, 2.5),
        ];
        let l = c.map(|p| p + Vec3::x());
        assert_eq!(solve_translation(&Rotation::identity(), &c, &l), Vec3::x());
        let t = truth();
        let l = c.map(|p| t.apply(&p));
        assert_relative_eq!(
            solve_translation(&t.rotation, &c, &l),
            t.translation,
            epsilon = 1e-12
        );
    }

    #[test]
    fn noiseless_set_is_exact() {
        let t = truth();
        let (lid, cam) = consistent_set(&t);
        for refine in [false, true] {
            let s = solve_set(&lid, &cam, refine).unwrap();
            assert!(s.residual_normal_angle < 1e-9);
            assert!(s.residual_centre < 1e-9);
            assert!(s.transform.rotation.angle_to(&t.rotation) < 1e-9);
            assert!((s.transform.translation - t.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn parallel_boards_fail() {
        let n = Vec3::new(0.0, 0.0, -1.0);
        let cam = [
            feature(n, Vec3::new(0.0, 0.0, 2.0)),
            feature(n, Vec3::new(0.5, 0.0, 3.0)),
            feature(n, Vec3::new(0.0, 0.5, 4.0)),
        ];
        let lid = cam.map(|c| c.transformed(&truth()));
        assert!(matches!(
            solve_set(&lid, &cam, false),
            Err(Error::DegenerateNormalMatrix)
        ));
    }

    #[test]
    fn equivariant_under_lidar_motion() {
        let t = truth();
        let (lid, cam) = consistent_set(&t);
        let motion = RigidTransform::new(
            Rotation::from_euler(0.1, 0.4, -0.7),
            Vec3::new(1.0, -2.0, 0.5),
        );
        let moved = lid.map(|f| f.transformed(&motion));
        let a = solve_set(&lid, &cam, false).unwrap().transform;
        let b = solve_set(&moved, &cam, false).unwrap().transform;
        let expected = motion.compose(&a);
        assert!(b.rotation.angle_to(&expected.rotation) < 1e-9);
        assert!((b.translation - expected.translation).norm() < 1e-9);
    }

    #[test]
    fn refinement_reduces_cost_on_noisy_set() {
        let t = truth();
        let (mut lid, cam) = consistent_set(&t);
        lid[0].normal = Rotation::from_axis_angle(&Vec3::z(), 0.02).apply(&lid[0].normal);
        lid[1].centre += Vec3::new(0.01, -0.01, 0.0);
        let plain = solve_set(&lid, &cam, false).unwrap();
        let refined = solve_set(&lid, &cam, true).unwrap();
        let cost = |s: &SetSolution| stacked_residual(&s.transform, &lid, &cam).norm_squared();
        assert!(cost(&refined) <= cost(&plain));
    }
}
