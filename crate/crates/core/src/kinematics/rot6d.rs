//! Continuous 6D rotation encoding: the first two columns of a rotation
//! matrix, decoded by Gram-Schmidt with the third column from a cross product.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Rot6 = [f64; 6];

pub const IDENTITY_6D: Rot6 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Halves shorter than this (or a residual after orthogonalization shorter
/// than this) are treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Orthonormality tolerance accepted by [`matrix_to_rot6d`].
pub const ORTHONORMAL_TOL: f64 = 1e-5;

pub fn rot6d_to_matrix(r: &Rot6) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_EPS) || !(a2.norm() > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation(format!("near-zero half in {r:?}")));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    if !(nu > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation(format!("parallel halves in {r:?}")));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Extract the 6D encoding without validating orthonormality.
pub fn columns_6d(m: &Matrix3<f64>) -> Rot6 {
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rot6> {
    let err = orthonormality_error(m);
    if !(err <= ORTHONORMAL_TOL) {
        return Err(Error::NotARotation(err));
    }
    Ok(columns_6d(m))
}

/// Max-abs deviation of `MᵀM` from identity, also folding in `|det − 1|`.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    let e = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    e.max((m.determinant() - 1.0).abs())
}

/// Project an arbitrary (non-degenerate) 6-vector back onto the rotation manifold.
pub fn orthonormalize_6d(r: &Rot6) -> Result<Rot6> {
    rot6d_to_matrix(r).map(|m| columns_6d(&m))
}

/// Rotation about the world vertical axis.
pub fn yaw_matrix(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation angle of a rotation matrix, in radians.
pub fn rotation_angle(m: &Matrix3<f64>) -> f64 {
    ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn identity_and_scale() {
        let id = Matrix3::identity();
        assert_eq!(rot6d_to_matrix(&IDENTITY_6D).unwrap(), id);
        let m = rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert!(max_abs(&(m - id)) < 1e-15);
        assert_eq!(matrix_to_rot6d(&id).unwrap(), IDENTITY_6D);
    }

    #[test]
    fn yaw_90_columns() {
        // Rz(90°) = [[0,-1,0],[1,0,0],[0,0,1]]: columns (0,1,0) and (-1,0,0).
        let r = matrix_to_rot6d(&yaw_matrix(std::f64::consts::FRAC_PI_2)).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_round_trip_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = random_rotation(&mut rng);
            let r = columns_6d(&m);
            let back = rot6d_to_matrix(&r).unwrap();
            assert!(max_abs(&(back - m)) < 1e-10);
            let r2 = matrix_to_rot6d(&back).unwrap();
            for (a, b) in r.iter().zip(r2) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 1e-9, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(matrix_to_rot6d(&m), Err(Error::NotARotation(_))));
        let s = Matrix3::identity() * 1.01;
        assert!(matches!(matrix_to_rot6d(&s), Err(Error::NotARotation(_))));
    }

    proptest::proptest! {
        #[test]
        fn decoded_is_orthonormal(v in proptest::array::uniform6(-10.0f64..10.0)) {
            if let Ok(m) = rot6d_to_matrix(&v) {
                proptest::prop_assert!(orthonormality_error(&m) < 1e-6);
            }
        }
    }
}
