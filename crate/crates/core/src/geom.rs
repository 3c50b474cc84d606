//! SE(3)/SO(3) algebra, the 6D rotation representation and velocity computation.
//!
//! # Conventions
//!
//! - Right-handed world frame, `+y` up.
//! - Poses are world-from-camera: `p_world = R * p_cam + t`.
//! - The camera looks along `-z` of its body frame, so a push-in is a negative
//!   body-frame `z` velocity.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Hard cap on the number of frames in a trajectory.
pub const MAX_FRAMES: usize = 300;

const ORTHO_TOL: f64 = 1e-6;

/// Rigid camera pose, world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// `self * other`.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Checks the rotation invariants at the given tolerance.
    pub fn validate(&self, tol: f64) -> Result<()> {
        check_rotation(&self.rotation, tol)
    }
}

pub fn se3_compose(a: &Se3Pose, b: &Se3Pose) -> Se3Pose {
    a.compose(b)
}

pub fn se3_inverse(a: &Se3Pose) -> Se3Pose {
    a.inverse()
}

/// Orthonormality deviation `||R^T R - I||_F` and determinant.
pub fn rotation_deviation(r: &Matrix3<f64>) -> (f64, f64) {
    ((r.transpose() * r - Matrix3::identity()).norm(), r.determinant())
}

pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    let (deviation, det) = rotation_deviation(r);
    if !(deviation < tol && (det - 1.0).abs() <= tol) {
        return Err(Error::InvalidRotation { deviation, det });
    }
    Ok(())
}

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

pub fn rot_to_6d(r: &Matrix3<f64>) -> Result<Rot6D> {
    check_rotation(r, ORTHO_TOL)?;
    Ok(Rot6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]))
}

/// Gram-Schmidt reconstruction: normalize the first column, orthogonalize the
/// second against it, complete with a cross product.
pub fn rot_from_6d(d: &Rot6D) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(d.0[0], d.0[1], d.0[2]);
    let a2 = Vector3::new(d.0[3], d.0[4], d.0[5]);
    if !(a1.iter().chain(a2.iter()).all(|v| v.is_finite())) {
        return Err(Error::Degenerate6d("non-finite component"));
    }
    let n1 = a1.norm();
    if n1 <= 1e-9 {
        return Err(Error::Degenerate6d("first column has zero norm"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 <= 1e-9 * a2.norm().max(1.0) {
        return Err(Error::Degenerate6d("columns are parallel or second is zero"));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Instantaneous rigid-body velocity expressed in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    /// m/s
    pub linear: Vector3<f64>,
    /// rad/s
    pub angular: Vector3<f64>,
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// SO(3) logarithm as a rotation vector.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let asym = vee(&(r - r.transpose())) * 0.5; // sin(theta) * axis
    if theta < 1e-6 {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        return asym * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the antisymmetric part vanishes; read the axis off (R + I) / 2 = a a^T.
        let b = (r + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut axis = b.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&asym) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    asym * (theta / theta.sin())
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// SE(3) logarithm `(v, w)` with `v = V^-1 t`.
pub fn se3_log(p: &Se3Pose) -> Twist {
    let w = so3_log(&p.rotation);
    let theta = w.norm();
    let k = skew(&w);
    let coeff = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
    Twist {
        linear: v_inv * p.translation,
        angular: w,
    }
}

pub fn se3_exp(t: &Twist) -> Se3Pose {
    let w = t.angular;
    let theta = w.norm();
    let k = skew(&w);
    let (a, b) = if theta < 1e-6 {
        (0.5 - theta * theta / 24.0, 1.0 / 6.0 - theta * theta / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    let v = Matrix3::identity() + k * a + k * k * b;
    Se3Pose::new(so3_exp(&w), v * t.linear)
}

/// Adjoint action of `p` on a twist.
pub fn adjoint(p: &Se3Pose, t: &Twist) -> Twist {
    let angular = p.rotation * t.angular;
    let linear = p.rotation * t.linear + skew(&p.translation) * angular;
    Twist { linear, angular }
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

/// Timed sequence of camera poses.
///
/// Raw shots may exceed [`MAX_FRAMES`]; the cap is enforced where a trajectory
/// enters a model (see [`CameraTrajectory::check_model_length`]).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub fps: f64,
    pub poses: Vec<Se3Pose>,
    pub mask: Vec<bool>,
}

impl CameraTrajectory {
    /// All frames valid.
    pub fn new(fps: f64, poses: Vec<Se3Pose>) -> Result<Self> {
        let mask = vec![true; poses.len()];
        Self::with_mask(fps, poses, mask)
    }

    pub fn with_mask(fps: f64, poses: Vec<Se3Pose>, mask: Vec<bool>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Trajectory(format!("fps must be positive, got {fps}")));
        }
        if poses.is_empty() {
            return Err(Error::Trajectory("empty trajectory".into()));
        }
        if mask.len() != poses.len() {
            return Err(Error::Trajectory(format!(
                "mask length {} != pose count {}",
                mask.len(),
                poses.len()
            )));
        }
        Ok(Self { fps, poses, mask })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn check_model_length(&self) -> Result<()> {
        if self.len() > MAX_FRAMES {
            return Err(Error::Trajectory(format!(
                "{} frames exceeds the {MAX_FRAMES}-frame cap; crop first",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::with_mask(
            self.fps,
            self.poses[start..start + len].to_vec(),
            self.mask[start..start + len].to_vec(),
        )
    }
}

/// Per-frame hip centers, optionally with mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterTrajectory {
    pub fps: f64,
    pub hips: Vec<Vector3<f64>>,
    pub vertices: Option<Vec<Vec<Vector3<f64>>>>,
}

impl CharacterTrajectory {
    pub fn new(fps: f64, hips: Vec<Vector3<f64>>) -> Self {
        Self {
            fps,
            hips,
            vertices: None,
        }
    }

    pub fn len(&self) -> usize {
        self.hips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hips.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            fps: self.fps,
            hips: self.hips[start..start + len].to_vec(),
            vertices: self
                .vertices
                .as_ref()
                .map(|v| v[start..start + len].to_vec()),
        }
    }
}

/// Twist between consecutive frames, `log(pose_i^-1 pose_{i+1}) * fps`.
/// Returns `N - 1` twists.
pub fn body_velocity(traj: &CameraTrajectory) -> Result<Vec<Twist>> {
    if traj.len() < 2 {
        return Err(Error::Trajectory("body velocity needs at least 2 frames".into()));
    }
    Ok(traj
        .poses
        .windows(2)
        .map(|w| {
            let rel = w[0].inverse().compose(&w[1]);
            let t = se3_log(&rel);
            Twist {
                linear: t.linear * traj.fps,
                angular: t.angular * traj.fps,
            }
        })
        .collect())
}

/// Forward differences scaled by fps (`N - 1` values).
pub fn linear_velocity(points: &[Vector3<f64>], fps: f64) -> Result<Vec<Vector3<f64>>> {
    if points.len() < 2 {
        return Err(Error::Trajectory("linear velocity needs at least 2 points".into()));
    }
    Ok(points.windows(2).map(|w| (w[1] - w[0]) * fps).collect())
}

/// Pads an `N - 1` velocity sequence to `N` by repeating the last value.
pub fn extend_last<T: Clone>(mut v: Vec<T>) -> Vec<T> {
    if let Some(last) = v.last().cloned() {
        v.push(last);
    }
    v
}
