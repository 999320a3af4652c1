//! Rigid-body poses on SE(3).
//!
//! Twists are ordered `(omega, v)` throughout: rotation first, translation
//! second. Perturbations are applied on the left, `p <- exp(delta) * p`.
//! Trajectory poses are camera-to-world transforms.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6, SVD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this angle the trigonometric coefficients switch to series.
const SERIES_ANGLE: f64 = 1e-2;
/// Logarithms closer than this to a half turn are rejected.
const LOG_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Orthonormality and handedness within `1e-9`.
    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(err <= 1e-9) || !((self.rotation.determinant() - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid("pose rotation is not a proper rotation matrix"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Adjoint in `(omega, v)` ordering: `p exp(xi) p^-1 = exp(Ad xi)`.
    pub fn adjoint(&self) -> Mat6 {
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Re-projects the rotation onto SO(3) (polar decomposition).
    pub fn orthonormalized(&self) -> Pose {
        let svd = SVD::new(self.rotation, true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major homogeneous 4x4.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64]) -> Result<Pose> {
        if m.len() != 16 {
            return Err(Error::format(format!("pose matrix needs 16 values, got {}", m.len())));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::format("pose matrix bottom row must be 0 0 0 1"));
        }
        Pose::new(
            Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            Vec3::new(m[3], m[7], m[11]),
        )
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Tangent vector of SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.omega[0],
            self.omega[1],
            self.omega[2],
            self.v[0],
            self.v[1],
            self.v[2],
        )
    }

    pub fn from_vector(xi: &Vec6) -> Self {
        Self {
            omega: Vec3::new(xi[0], xi[1], xi[2]),
            v: Vec3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist {
            omega: self.omega * s,
            v: self.v * s,
        }
    }
}

pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (
            s / theta,
            2.0 * half * half / (theta * theta),
            (theta - s) / (theta * theta * theta),
        )
    }
}

pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let (a, b, _) = rodrigues_coefficients(theta);
    let k = hat(w);
    Mat3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`; fails within `1e-6` of a half turn.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    let axis2 = vee(&(r - r.transpose()));
    let s = 0.5 * axis2.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(Error::range(format!(
            "rotation angle {theta} too close to pi for a unique logarithm"
        )));
    }
    let scale = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    } else {
        0.5 * theta / theta.sin()
    };
    Ok(axis2 * scale)
}

/// Left Jacobian of SO(3), `J = I + b W + c W^2`.
pub fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let (_, b, c) = rodrigues_coefficients(theta);
    let k = hat(w);
    Mat3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inverse(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let d = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (s, c) = theta.sin_cos();
        1.0 / (theta * theta) - s / (2.0 * theta * (1.0 - c))
    };
    let k = hat(w);
    Mat3::identity() - k * 0.5 + k * k * d
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose {
        rotation: so3_exp(&xi.omega),
        translation: so3_left_jacobian(&xi.omega) * xi.v,
    }
}

pub fn se3_log(p: &Pose) -> Result<Twist> {
    let omega = so3_log(&p.rotation)?;
    let v = so3_left_jacobian_inverse(&omega) * p.translation;
    Ok(Twist { omega, v })
}

/// Coupling block of the SE(3) left Jacobian (translation row, rotation column).
fn se3_q_block(omega: &Vec3, v: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        let t5 = t4 * theta;
        let c1 = (theta - s) / t3;
        let c2 = (0.5 * t2 + c - 1.0) / t4;
        let e = (theta - s - t3 / 6.0) / t5;
        (c1, c2, 0.5 * (c2 + 3.0 * e))
    };
    let w = hat(omega);
    let r = hat(v);
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    let ww = w * w;
    r * 0.5
        + (wr + rw + wrw) * c1
        + (ww * r + rw * w - wrw * 3.0) * c2
        + (wrw * w + w * wrw) * c3
}

/// Left Jacobian: `exp(xi + d) ~= exp(J_l(xi) d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Mat6 {
    let j = so3_left_jacobian(&xi.omega);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&se3_q_block(&xi.omega, &xi.v));
    out
}

/// Right Jacobian: `exp(xi + d) ~= exp(xi) exp(J_r(xi) d)`.
pub fn se3_right_jacobian(xi: &Twist) -> Mat6 {
    se3_left_jacobian(&xi.scaled(-1.0))
}

/// Constant-velocity motion between two camera poses over one exposure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySegment {
    pub start: Pose,
    pub end: Pose,
    /// Exposure length in readout ticks.
    pub duration: f64,
}

impl TrajectorySegment {
    pub fn new(start: Pose, end: Pose, duration: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid("segment duration must be positive"));
        }
        Ok(Self {
            start,
            end,
            duration,
        })
    }

    pub fn stationary(pose: Pose, duration: f64) -> Result<Self> {
        Self::new(pose, pose, duration)
    }

    /// `log(start^-1 end)`.
    pub fn relative_twist(&self) -> Result<Twist> {
        se3_log(&self.start.inverse().compose(&self.end))
    }

    /// Pose at tick `t` in `[0, duration]`.
    pub fn interpolate(&self, t: f64) -> Result<Pose> {
        self.check_time(t)?;
        if t == 0.0 {
            return Ok(self.start);
        }
        self.pose_at_fraction(t / self.duration)
    }

    /// Pose at normalised time `s`; values outside `[0, 1]` extrapolate the
    /// constant-velocity motion.
    pub fn pose_at_fraction(&self, s: f64) -> Result<Pose> {
        let d = self.relative_twist()?;
        Ok(self.start.compose(&se3_exp(&d.scaled(s))))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::range(format!(
                "time {t} outside segment [0, {}]",
                self.duration
            )));
        }
        Ok(())
    }

    /// Jacobians of the left-perturbation twist of `T(t)` with respect to
    /// left perturbations of the start and end poses.
    pub fn interpolation_jacobians(&self, t: f64) -> Result<(Mat6, Mat6)> {
        self.check_time(t)?;
        let s = t / self.duration;
        let d = self.relative_twist()?;
        let pose = self.start.compose(&se3_exp(&d.scaled(s)));
        let jr_d_inv = se3_right_jacobian(&d)
            .try_inverse()
            .ok_or_else(|| Error::range("singular trajectory Jacobian"))?;
        let d_end = pose.adjoint()
            * se3_right_jacobian(&d.scaled(s))
            * jr_d_inv
            * self.end.inverse().adjoint()
            * s;
        Ok((Mat6::identity() - d_end, d_end))
    }

    /// The same motion traversed backwards.
    pub fn reversed(&self) -> TrajectorySegment {
        TrajectorySegment {
            start: self.end,
            end: self.start,
            duration: self.duration,
        }
    }
}

/// Random pose perturbation at a fractional `level`.
///
/// Per axis translation noise has standard deviation `level * scene_diag * 0.05`;
/// the rotation is pre-multiplied by a turn about a uniformly random axis whose
/// angle has standard deviation `level * pi / 6`.
pub fn perturb_pose<R: Rng + ?Sized>(p: &Pose, level: f64, scene_diag: f64, rng: &mut R) -> Result<Pose> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::range(format!("perturbation level {level} outside [0, 1]")));
    }
    let sigma_t = level * scene_diag * 0.05;
    let sigma_r = level * std::f64::consts::FRAC_PI_6;
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let dt = Vec3::new(normal(), normal(), normal()) * sigma_t;
    let axis = loop {
        let a = Vec3::new(normal(), normal(), normal());
        let n = a.norm();
        if n > 1e-12 {
            break a / n;
        }
    };
    let angle = normal() * sigma_r;
    Ok(Pose {
        rotation: so3_exp(&(axis * angle)) * p.rotation,
        translation: p.translation + dt,
    })
}

/// Rigid transform `(R, t)` minimising `sum |R a_i + t - b_i|^2`.
///
/// When the points are (nearly) collinear the rotation is undetermined and
/// only the centroid offset is used.
pub fn align_rigid(source: &[Vec3], target: &[Vec3]) -> Result<(Mat3, Vec3)> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::shape("alignment needs equally many points (>= 1)"));
    }
    let n = source.len() as f64;
    let mu_s = source.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mu_t = target.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Mat3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - mu_s) * (t - mu_t).transpose();
    }
    let svd = SVD::new(h, true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let rotation = if sv[0] <= 1e-12 || sv[1] <= 1e-9 * sv[0] {
        Mat3::identity()
    } else {
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let v = vt.transpose();
        let mut fix = Mat3::identity();
        fix[(2, 2)] = (v * u.transpose()).determinant().signum();
        v * fix * u.transpose()
    };
    Ok((rotation, mu_t - rotation * mu_s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    /// Mean per-pose L1 distance between camera positions.
    pub translation_mae: f64,
    /// Mean geodesic angle between orientations, radians.
    pub rotation_rad: f64,
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Errors between camera-to-world pose sequences after removing the global
/// rigid gauge from the estimate.
pub fn pose_errors(estimated: &[Pose], reference: &[Pose]) -> Result<PoseErrors> {
    if estimated.len() != reference.len() || estimated.is_empty() {
        return Err(Error::shape(format!(
            "pose sequences differ in length ({} vs {})",
            estimated.len(),
            reference.len()
        )));
    }
    let src: Vec<Vec3> = estimated.iter().map(|p| p.translation).collect();
    let dst: Vec<Vec3> = reference.iter().map(|p| p.translation).collect();
    let (r, t) = align_rigid(&src, &dst)?;
    let n = estimated.len() as f64;
    let mut trans = 0.0;
    let mut rot = 0.0;
    for (e, g) in estimated.iter().zip(reference) {
        let pos = r * e.translation + t;
        trans += (pos - g.translation).abs().sum();
        rot += rotation_angle(&((r * e.rotation).transpose() * g.rotation));
    }
    Ok(PoseErrors {
        translation_mae: trans / n,
        rotation_rad: rot / n,
    })
}
