//! SE(3) rigid transforms, 4-DoF ground poses, pinhole projection and the
//! Huber norm.
//!
//! Conventions: twists store the translational coordinates first and the
//! rotational coordinates last; yaw angles are normalized to `(-pi, pi]`;
//! the camera looks down +z with +x right and +y down, so the ground plane
//! is the x-z plane.

use core::fmt;
use core::ops::Mul;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeometryError {
    /// `se3_log` at a rotation angle of pi is not uniquely defined.
    RotationAngleAtPi,
    /// Projection or backprojection with depth <= 0.
    NonPositiveDepth,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::RotationAngleAtPi => {
                write!(f, "rotation angle at pi: logarithm is not unique")
            }
            GeometryError::NonPositiveDepth => write!(f, "depth must be positive"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for GeometryError {}

/// Element of se(3): translational coordinates first, rotational last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist(Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn translational(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn rotational(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid body transformation in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Closed-form exponential map from se(3).
    pub fn exp(twist: &Twist) -> Self {
        let v = twist.translational();
        let w = twist.rotational();
        let theta = w.norm();
        let wx = skew(&w);
        let (rotation, jac) = if theta < 1e-10 {
            // second-order series; V ~= I + W/2 + W^2/6
            (
                Matrix3::identity() + wx + wx * wx * 0.5,
                Matrix3::identity() + wx * 0.5 + wx * wx * (1.0 / 6.0),
            )
        } else {
            let t2 = theta * theta;
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / t2;
            let c = (theta - theta.sin()) / (t2 * theta);
            (
                Matrix3::identity() + wx * a + wx * wx * b,
                Matrix3::identity() + wx * b + wx * wx * c,
            )
        };
        RigidTransform {
            rotation,
            translation: jac * v,
        }
    }

    /// Logarithmic map to se(3). Fails for rotation angles at pi, where the
    /// axis is not unique.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let theta = self.rotation_angle();
        if theta > core::f64::consts::PI - 1e-6 {
            return Err(GeometryError::RotationAngleAtPi);
        }
        let w = if theta < 1e-10 {
            let r = &self.rotation;
            Vector3::new(
                (r[(2, 1)] - r[(1, 2)]) * 0.5,
                (r[(0, 2)] - r[(2, 0)]) * 0.5,
                (r[(1, 0)] - r[(0, 1)]) * 0.5,
            )
        } else {
            let s = theta / (2.0 * theta.sin());
            let r = &self.rotation;
            Vector3::new(
                (r[(2, 1)] - r[(1, 2)]) * s,
                (r[(0, 2)] - r[(2, 0)]) * s,
                (r[(1, 0)] - r[(0, 1)]) * s,
            )
        };
        let wx = skew(&w);
        let v_inv = if theta < 1e-10 {
            Matrix3::identity() - wx * 0.5 + wx * wx * (1.0 / 12.0)
        } else {
            let half = theta * 0.5;
            let cot = half / half.tan();
            Matrix3::identity() - wx * 0.5 + wx * wx * ((1.0 - cot) / (theta * theta))
        };
        Ok(Twist::new(v_inv * self.translation, w))
    }

    /// Deviation of the rotation block from orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        *self * *rhs
    }
}

/// Normalize an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > core::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Translation plus yaw about the gravity (camera y) axis.
///
/// Used for the camera-from-object transform of gravity-aligned boxes;
/// converts losslessly to [`RigidTransform`] with zero roll and pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose4DoF {
    pub translation: Vector3<f64>,
    pub yaw: f64,
}

impl Pose4DoF {
    pub fn new(translation: Vector3<f64>, yaw: f64) -> Self {
        Pose4DoF {
            translation,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Pose4DoF {
            translation: Vector3::zeros(),
            yaw: 0.0,
        }
    }

    /// Rotation by `yaw` about the y axis; x-z plane is the ground plane.
    pub fn to_rigid(&self) -> RigidTransform {
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        let rotation = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        RigidTransform {
            rotation,
            translation: self.translation,
        }
    }

    /// Extract translation and yaw from a roll/pitch-free transform.
    pub fn from_rigid(t: &RigidTransform) -> Self {
        let yaw = t.rotation[(0, 2)].atan2(t.rotation[(0, 0)]);
        Pose4DoF {
            translation: t.translation,
            yaw: wrap_angle(yaw),
        }
    }
}

/// Pinhole camera without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Intrinsics of the next-coarser pyramid level (2x2-average
    /// downsampling; pixel centers shift by half the coarse pixel).
    pub fn halved(&self) -> Self {
        CameraIntrinsics {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx + 0.5) * 0.5 - 0.5,
            cy: (self.cy + 0.5) * 0.5 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn backproject(
        &self,
        uv: &Vector2<f64>,
        depth: f64,
    ) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(Vector3::new(
            (uv.x - self.cx) / self.fx * depth,
            (uv.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Jacobian of `project` with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }
}

/// Huber norm with threshold `delta`: quadratic inside, linear outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Huber {
    pub delta: f64,
}

impl Huber {
    pub fn new(delta: f64) -> Self {
        debug_assert!(delta > 0.0);
        Huber { delta }
    }

    pub fn cost(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.delta {
            0.5 * r * r
        } else {
            self.delta * (a - 0.5 * self.delta)
        }
    }

    /// IRLS weight: 1 inside the quadratic zone, delta/|r| outside.
    pub fn weight(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.delta {
            1.0
        } else {
            self.delta / a
        }
    }
}
