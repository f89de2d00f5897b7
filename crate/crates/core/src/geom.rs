//! Rigid transforms, camera poses and intrinsics.
//!
//! Conventions, fixed repo-wide:
//! - Camera-to-world poses. The camera looks along its local `-z` axis with
//!   `x` right and `y` up (Blender/NeRF-synthetic convention).
//! - 4x4 matrices serialize as 16 row-major floats.
//! - Rotations are proper (det = +1) and orthonormal to 1e-9.

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for rotation validity checks.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rigid transform `x -> R x + t`, scale fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    /// Checks orthonormality and determinant within [`ROTATION_TOL`].
    pub fn validate(&self) -> Result<()> {
        validate_rotation(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Left-multiplies a camera pose: the camera frame is unchanged, its
    /// placement in the world is transformed.
    pub fn apply_to_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * pose.rotation,
            center: self.apply(&pose.center),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 16-float serialization of the homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::invalid(format!("expected 16 floats, got {}", v.len())));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        RigidTransform::new(rotation, translation)
    }

    /// Samples a rotation uniform on SO(3) (unit-quaternion method) and a
    /// translation uniform in `[-max_t, max_t]^3`.
    pub fn sample<R: Rng>(rng: &mut R, max_t: f64) -> RigidTransform {
        let rotation = sample_uniform_rotation(rng);
        let translation = Vector3::new(
            rng.random_range(-max_t..=max_t),
            rng.random_range(-max_t..=max_t),
            rng.random_range(-max_t..=max_t),
        );
        RigidTransform { rotation, translation }
    }
}

pub fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ROTATION_TOL {
        return Err(Error::invalid(format!("rotation not orthonormal (err {err:.3e})")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::invalid(format!("rotation determinant {det} != +1")));
    }
    Ok(())
}

/// Uniform rotation via Shoemake's subgroup algorithm on unit quaternions.
pub fn sample_uniform_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let u3: f64 = rng.random_range(0.0..1.0);
    let two_pi = std::f64::consts::TAU;
    let q = nalgebra::Quaternion::new(
        (1.0 - u1).sqrt() * (two_pi * u2).sin(),
        (1.0 - u1).sqrt() * (two_pi * u2).cos(),
        u1.sqrt() * (two_pi * u3).sin(),
        u1.sqrt() * (two_pi * u3).cos(),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Geodesic angle (radians) between a rotation and the identity.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Rotation by `angle` radians about `axis`.
pub fn rotation_about_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        validate_rotation(&self.rotation)
    }

    /// Builds a pose at `center` looking at `target`, with `up` as the
    /// approximate world up direction.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("camera center coincides with look-at target"));
        }
        let z = -forward.normalize(); // camera looks along -z
        let mut x = up.cross(&z);
        if x.norm() < 1e-9 {
            // up parallel to view direction; pick any perpendicular
            x = Vector3::new(1.0, 0.0, 0.0).cross(&z);
            if x.norm() < 1e-9 {
                x = Vector3::new(0.0, 1.0, 0.0).cross(&z);
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(CameraPose { rotation: Matrix3::from_columns(&[x, y, z]), center })
    }

    /// Direction (world frame, unit) of the ray through pixel `(u, v)`;
    /// `u`/`v` are continuous pixel coordinates (center of pixel i is i+0.5).
    pub fn pixel_ray(&self, intr: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -1.0);
        (self.rotation * d_cam).normalize()
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        RigidTransform { rotation: self.rotation, translation: self.center }.to_row_major()
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        let t = RigidTransform::from_row_major(v)?;
        Ok(CameraPose { rotation: t.rotation, center: t.translation })
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 {
            return Err(Error::invalid("cx outside image"));
        }
        if self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(Error::invalid("cy outside image"));
        }
        Ok(())
    }

    /// Centered intrinsics for a square-ish image with the given focal length.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = RigidTransform::sample(&mut rng, 0.5);
            let round = t.inverse().compose(&t);
            assert!((round.rotation - Matrix3::identity()).abs().max() < 1e-12);
            assert!(round.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn row_major_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let t = RigidTransform::sample(&mut rng, 0.5);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-15);
        assert!((back.translation - t.translation).norm() < 1e-15);
    }

    #[test]
    fn sampled_rotations_are_valid() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = sample_uniform_rotation(&mut rng);
            validate_rotation(&r).unwrap();
        }
    }

    #[test]
    fn look_at_points_camera_minus_z_at_target() {
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        pose.validate().unwrap();
        let fwd = pose.rotation * Vector3::new(0.0, 0.0, -1.0);
        assert!((fwd - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn mean_uniform_rotation_angle_matches_expectation() {
        // E[theta] for uniform SO(3) is pi/2 + 2/pi ≈ 126.47 degrees.
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| rotation_angle(&sample_uniform_rotation(&mut rng)).to_degrees())
            .sum::<f64>()
            / n as f64;
        let expected = (std::f64::consts::FRAC_PI_2 + 2.0 / std::f64::consts::PI).to_degrees();
        assert!((mean - expected).abs() < 3.0, "mean angle {mean} vs {expected}");
    }
}
