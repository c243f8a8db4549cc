//! SE(3) helpers on top of `nalgebra::Isometry3`.
//!
//! Twists are ordered `(rho, phi)`: translational part first, rotational
//! part second. Perturbations are applied on the left, `T <- Exp(delta) * T`.

use nalgebra::{Isometry3, Matrix3, Matrix6, Quaternion, Translation3, UnitQuaternion, Vector3, Vector6};

pub type Pose = Isometry3<f64>;

/// Skew-symmetric matrix of `v`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = hat(phi);
    let w2 = w * w;
    if theta2 < 1e-12 {
        return Matrix3::identity() + 0.5 * w + w2 / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * w + b * w2
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = hat(phi);
    let w2 = w * w;
    if theta2 < 1e-12 {
        return Matrix3::identity() - 0.5 * w + w2 / 12.0;
    }
    let theta = theta2.sqrt();
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * w + c * w2
}

/// Exponential map from a twist to a rigid transform.
pub fn exp(xi: &Vector6<f64>) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let rot = UnitQuaternion::from_scaled_axis(phi);
    let t = so3_left_jacobian(&phi) * rho;
    Isometry3::from_parts(Translation3::from(t), rot)
}

/// Logarithm map, inverse of [`exp`].
pub fn log(pose: &Pose) -> Vector6<f64> {
    let phi = pose.rotation.scaled_axis();
    let rho = so3_left_jacobian_inv(&phi) * pose.translation.vector;
    Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
}

/// Adjoint of `pose` acting on `(rho, phi)` twists.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation.to_rotation_matrix().into_inner();
    let t = hat(&pose.translation.vector) * r;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&t);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

/// Small adjoint `ad(xi)`.
pub fn ad(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = hat(&Vector3::new(xi[0], xi[1], xi[2]));
    let phi = hat(&Vector3::new(xi[3], xi[4], xi[5]));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&rho);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&phi);
    m
}

/// Inverse right Jacobian, truncated Bernoulli series in `ad(xi)`.
///
/// Accurate to fourth order, which is ample for pose-graph residuals.
pub fn right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let a = ad(xi);
    let a2 = a * a;
    let a4 = a2 * a2;
    Matrix6::identity() + 0.5 * a + a2 / 12.0 - a4 / 720.0
}

/// Geodesic rotation angle of `pose` in radians.
pub fn rotation_angle(pose: &Pose) -> f64 {
    pose.rotation.angle()
}

/// Checks that the pose is finite and its rotation is a unit quaternion.
pub fn is_valid(pose: &Pose) -> bool {
    let q = pose.rotation.quaternion();
    let finite = pose.translation.vector.iter().all(|v| v.is_finite())
        && q.coords.iter().all(|v| v.is_finite());
    finite && (q.norm() - 1.0).abs() < 1e-9
}

/// Builds a pose from `[tx, ty, tz, qx, qy, qz, qw]`, normalizing the quaternion.
pub fn from_array7(v: &[f64; 7]) -> Option<Pose> {
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    let n = q.norm();
    if !(n.is_finite() && n > 1e-12) || v[..3].iter().any(|x| !x.is_finite()) {
        return None;
    }
    // keep already-normalized input bit-exact so text round trips are lossless
    let rot = if (n - 1.0).abs() < 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    Some(Isometry3::from_parts(Translation3::new(v[0], v[1], v[2]), rot))
}

/// Pose as `[tx, ty, tz, qx, qy, qz, qw]`.
pub fn to_array7(p: &Pose) -> [f64; 7] {
    let t = p.translation.vector;
    let q = p.rotation.quaternion();
    [t.x, t.y, t.z, q.i, q.j, q.k, q.w]
}

/// Pose from a translation and a yaw angle about +z.
pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    Isometry3::from_parts(
        Translation3::new(x, y, z),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn twist(v: [f64; 6]) -> Vector6<f64> {
        Vector6::from_row_slice(&v)
    }

    #[test]
    fn exp_of_pure_translation() {
        let p = exp(&twist([1.0, -2.0, 0.5, 0.0, 0.0, 0.0]));
        assert_eq!(p.translation.vector, Vector3::new(1.0, -2.0, 0.5));
        assert_eq!(rotation_angle(&p), 0.0);
    }

    #[test]
    fn adjoint_moves_twists() {
        let t = exp(&twist([0.3, -0.1, 0.2, 0.1, 0.4, -0.2]));
        let xi = twist([0.01, 0.02, -0.03, 0.02, -0.01, 0.005]);
        let lhs = t * exp(&xi) * t.inverse();
        let rhs = exp(&(adjoint(&t) * xi));
        assert_relative_eq!(lhs.to_homogeneous(), rhs.to_homogeneous(), epsilon = 1e-12);
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        let xi = twist([0.2, -0.1, 0.3, 0.05, -0.08, 0.1]);
        let base = exp(&xi);
        let jinv = right_jacobian_inv(&xi);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = log(&(base * exp(&d)));
            let minus = log(&(base * exp(&-d)));
            let col = (plus - minus) / (2.0 * h);
            for r in 0..6 {
                assert!((col[r] - jinv[(r, k)]).abs() < 1e-5, "col {k} row {r}");
            }
        }
    }

    proptest! {
        #[test]
        fn log_inverts_exp(v in proptest::array::uniform6(-1.0f64..1.0)) {
            let xi = twist(v);
            let back = log(&exp(&xi));
            prop_assert!((back - xi).norm() < 1e-9);
        }

        #[test]
        fn array7_round_trip(v in proptest::array::uniform6(-2.0f64..2.0)) {
            let p = exp(&twist(v));
            let q = from_array7(&to_array7(&p)).unwrap();
            prop_assert!((p.to_homogeneous() - q.to_homogeneous()).norm() < 1e-12);
        }
    }
}
