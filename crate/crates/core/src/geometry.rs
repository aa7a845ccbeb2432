//! Core 2D/3D geometric types: camera model, rigid poses, ellipses and their
//! Gaussian interpretation, ellipsoids and dual quadrics, axis-aligned boxes.
//!
//! Conventions:
//! - [`Pose`] maps world coordinates into the camera frame (camera-from-world),
//!   so the projection matrix is `K [R | t]`.
//! - An ellipse with semi-axes `(a, b)` and angle `θ` corresponds to the
//!   Gaussian with covariance `U diag(a², b²) Uᵀ`, `U` the rotation by `θ`.
//!   The major axis points along `(cos θ, sin θ)`.
//! - Ellipse angles live in `[-π/2, π/2)`, major axis first; circles report 0.
//! - Dual quadrics are stored with the `(3, 3)` entry normalized to `-1`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{
    Matrix2, Matrix3, Matrix3x4, Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector2,
    Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

/// Errors raised by geometric constructions and conversions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("ellipse fit needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("fitted conic is not an ellipse")]
    DegenerateFit,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dual quadric does not describe a real ellipsoid")]
    NotAnEllipsoid,
    #[error("point or quadric lies behind the camera")]
    BehindCamera,
    #[error("projected conic is not an ellipse")]
    DegenerateConic,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Tolerance used when validating rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

/// Pinhole camera intrinsics.
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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidParameter("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidParameter("image size must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidParameter("principal point must be finite"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Projects a camera-frame point. The caller guarantees positive depth.
    #[inline]
    pub fn project(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        let iz = 1.0 / pc.z;
        Vector2::new(self.fx * pc.x * iz + self.cx, self.fy * pc.y * iz + self.cy)
    }

    /// Back-projects a pixel at the given depth into the camera frame.
    pub fn backproject(&self, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (uv.x - self.cx) / self.fx * depth,
            (uv.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// True when the pixel lies inside the image shrunk by `margin` pixels.
    pub fn contains(&self, uv: &Vector2<f64>, margin: f64) -> bool {
        uv.x >= margin
            && uv.y >= margin
            && uv.x <= self.width as f64 - 1.0 - margin
            && uv.y <= self.height as f64 - 1.0 - margin
    }
}

/// Rigid transform mapping world coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a rotation matrix, rejecting non-rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ROTATION_TOL || rotation.determinant() <= 0.0 {
            return Err(GeometryError::InvalidParameter("rotation is not orthonormal with det +1"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidParameter("translation must be finite"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    /// Pose of a camera located at `center` (world frame) with orientation
    /// `world_from_camera`.
    pub fn from_camera_center(world_from_camera: &Matrix3<f64>, center: &Vector3<f64>) -> Self {
        let rotation = world_from_camera.transpose();
        Self { rotation, translation: -(rotation * center) }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera position in world coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// SE(3) exponential of a twist `(ρ, φ)` (translation part first).
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(phi).to_rotation_matrix().into_inner();
        Self { rotation, translation: so3_left_jacobian(&phi) * rho }
    }

    /// SE(3) logarithm, inverse of [`Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let phi = self.quaternion().scaled_axis();
        let jinv = so3_left_jacobian(&phi)
            .try_inverse()
            .unwrap_or_else(Matrix3::identity);
        let rho = jinv * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Left-multiplicative update `exp(δ) ∘ self`.
    pub fn retract_left(&self, delta: &Vector6<f64>) -> Self {
        Pose::exp(delta).compose(self).renormalized()
    }

    /// Re-projects the rotation onto SO(3) to stop drift under repeated updates.
    pub fn renormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let mut rotation = u * v_t;
        if rotation.determinant() < 0.0 {
            rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)) * v_t;
        }
        Self { rotation, translation: self.translation }
    }

    pub fn projection_matrix(&self, k: &Intrinsics) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        k.matrix() * rt
    }

    /// Geodesic rotation distance (radians) and translation distance between
    /// the two camera centers.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        (c.acos(), (self.camera_center() - other.camera_center()).norm())
    }
}

/// Left Jacobian of SO(3), `V` in the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = phi.cross_matrix();
    if theta2 < 1e-12 {
        return Matrix3::identity() + 0.5 * w + w * w / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * w + b * w * w
}

/// 2D ellipse: center, semi-axes (major first) and orientation of the major axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse2D {
    pub center: Vector2<f64>,
    pub semi_axes: Vector2<f64>,
    pub angle: f64,
}

/// Wraps an angle into `[-π/2, π/2)`.
fn wrap_half_pi(angle: f64) -> f64 {
    let mut a = (angle + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if a >= FRAC_PI_2 {
        a -= PI;
    }
    a
}

impl Ellipse2D {
    /// Builds a canonical ellipse: axes are reordered major-first and the
    /// angle wrapped to `[-π/2, π/2)`.
    pub fn new(center: Vector2<f64>, semi_axes: Vector2<f64>, angle: f64) -> Result<Self> {
        let (a, b) = (semi_axes[0], semi_axes[1]);
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(GeometryError::InvalidParameter("ellipse semi-axes must be positive"));
        }
        if !angle.is_finite() || !center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidParameter("ellipse parameters must be finite"));
        }
        let (major, minor, angle) = if b > a { (b, a, angle + FRAC_PI_2) } else { (a, b, angle) };
        let angle = if (major - minor) <= 1e-12 * major { 0.0 } else { wrap_half_pi(angle) };
        Ok(Self { center, semi_axes: Vector2::new(major, minor), angle })
    }

    /// Ellipse whose Gaussian covariance is `shape` (eigenvalues are the
    /// squared semi-axes).
    pub fn from_shape(center: Vector2<f64>, shape: &Matrix2<f64>) -> Result<Self> {
        let (l1, l2, angle) = sym2_eigen(shape)?;
        Self::new(center, Vector2::new(l1.sqrt(), l2.sqrt()), angle)
    }

    /// Ellipse described by a point-conic matrix `xᵀ C x = 0`.
    pub fn from_conic_matrix(c: &Matrix3<f64>) -> Result<Self> {
        let a2 = c.fixed_view::<2, 2>(0, 0).into_owned();
        let b = Vector2::new(c[(0, 2)], c[(1, 2)]);
        let inv = a2.try_inverse().ok_or(GeometryError::DegenerateFit)?;
        let center = -(inv * b);
        let f0 = c[(2, 2)] + b.dot(&center);
        if f0 == 0.0 || !f0.is_finite() {
            return Err(GeometryError::DegenerateFit);
        }
        let m = a2 / (-f0);
        let shape = m.try_inverse().ok_or(GeometryError::DegenerateFit)?;
        Self::from_shape(center, &symmetrize2(&shape)).map_err(|_| GeometryError::DegenerateFit)
    }

    /// Unit vector along the major axis.
    pub fn major_direction(&self) -> Vector2<f64> {
        Vector2::new(self.angle.cos(), self.angle.sin())
    }

    /// Point on the outline at parameter `t` (radians).
    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        let (s, c) = self.angle.sin_cos();
        let x = self.semi_axes[0] * t.cos();
        let y = self.semi_axes[1] * t.sin();
        self.center + Vector2::new(c * x - s * y, s * x + c * y)
    }

    /// `n` points evenly spaced in the outline parameter.
    pub fn sample_outline(&self, n: usize) -> Vec<Vector2<f64>> {
        (0..n).map(|i| self.point_at(2.0 * PI * i as f64 / n as f64)).collect()
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.angle.sin_cos();
        let u = (c * d.x + s * d.y) / self.semi_axes[0];
        let v = (-s * d.x + c * d.y) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_axes[0] * self.semi_axes[1]
    }

    /// Axis-aligned ellipse inscribed in a box.
    pub fn inscribed_in(b: &BBox) -> Result<Self> {
        let c = (b.min + b.max) * 0.5;
        let h = (b.max - b.min) * 0.5;
        Self::new(c, h, 0.0)
    }
}

/// 2D Gaussian with symmetric positive-definite covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

impl Gaussian2D {
    pub fn new(mean: Vector2<f64>, covariance: Matrix2<f64>) -> Result<Self> {
        let covariance = symmetrize2(&covariance);
        if !is_spd2(&covariance) {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Ok(Self { mean, covariance })
    }
}

#[inline]
fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

#[inline]
fn is_spd2(m: &Matrix2<f64>) -> bool {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    m[(0, 0)] > 0.0 && det > 0.0 && det.is_finite()
}

/// Closed-form eigen-decomposition of a symmetric 2×2 SPD matrix: returns
/// `(λ_max, λ_min, angle of the λ_max eigenvector)`.
fn sym2_eigen(m: &Matrix2<f64>) -> Result<(f64, f64, f64)> {
    let m = symmetrize2(m);
    if !is_spd2(&m) {
        return Err(GeometryError::NotPositiveDefinite);
    }
    let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + d);
    let r = (0.5 * (a - d)).hypot(b);
    let l1 = mid + r;
    let l2 = (a * d - b * b) / l1;
    let angle = 0.5 * (2.0 * b).atan2(a - d);
    Ok((l1, l2, angle))
}

/// Gaussian interpretation of an ellipse: mean at the center, covariance
/// `U diag(α², β²) Uᵀ`.
pub fn ellipse_to_gaussian(e: &Ellipse2D) -> Gaussian2D {
    let (s, c) = e.angle.sin_cos();
    let a2 = e.semi_axes[0] * e.semi_axes[0];
    let b2 = e.semi_axes[1] * e.semi_axes[1];
    let xx = c * c * a2 + s * s * b2;
    let yy = s * s * a2 + c * c * b2;
    let xy = c * s * (a2 - b2);
    Gaussian2D { mean: e.center, covariance: Matrix2::new(xx, xy, xy, yy) }
}

/// Inverse of [`ellipse_to_gaussian`].
pub fn gaussian_to_ellipse(g: &Gaussian2D) -> Result<Ellipse2D> {
    Ellipse2D::from_shape(g.mean, &g.covariance)
}

/// Principal square root of a 2×2 SPD matrix, closed form.
pub fn sqrtm_spd2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let m = symmetrize2(m);
    if !is_spd2(&m) {
        return Err(GeometryError::NotPositiveDefinite);
    }
    let s = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)]).sqrt();
    let t = (m[(0, 0)] + m[(1, 1)] + 2.0 * s).sqrt();
    Ok((m + Matrix2::identity() * s) / t)
}

/// Least-squares ellipse fit under the ellipse-specific constraint
/// `4ac - b² = 1`, solved through the reduced 3×3 eigenproblem on
/// centroid-shifted, isotropically scaled coordinates.
pub fn fit_ellipse(contour: &[Vector2<f64>]) -> Result<Ellipse2D> {
    let n = contour.len();
    if n < 5 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let centroid = contour.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n as f64;
    let mean_dist = contour.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(GeometryError::DegenerateFit);
    }
    let scale = std::f64::consts::SQRT_2 / mean_dist;

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in contour {
        let q = (p - centroid) * scale;
        let quad = Vector3::new(q.x * q.x, q.x * q.y, q.y * q.y);
        let lin = Vector3::new(q.x, q.y, 1.0);
        s1 += quad * quad.transpose();
        s2 += quad * lin.transpose();
        s3 += lin * lin.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(GeometryError::DegenerateFit)?;
    let t = -(s3_inv * s2.transpose());
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the reduced constraint matrix.
    let reduced = Matrix3::from_rows(&[m.row(2) * 0.5, -m.row(1), m.row(0) * 0.5]);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for ev in reduced.complex_eigenvalues().iter() {
        if ev.im.abs() > 1e-9 * (1.0 + ev.re.abs()) {
            continue;
        }
        let shifted = reduced - Matrix3::identity() * ev.re;
        let svd = shifted.svd(false, true);
        let v_t = match svd.v_t {
            Some(v) => v,
            None => continue,
        };
        let (imin, _) = svd.singular_values.argmin();
        let v: Vector3<f64> = v_t.row(imin).transpose();
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 {
            let score = ev.re.abs();
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, v));
            }
        }
    }
    let (_, quad) = best.ok_or(GeometryError::DegenerateFit)?;
    let lin = t * quad;
    let conic_n = Matrix3::new(
        quad[0],
        quad[1] * 0.5,
        lin[0] * 0.5,
        quad[1] * 0.5,
        quad[2],
        lin[1] * 0.5,
        lin[0] * 0.5,
        lin[1] * 0.5,
        lin[2],
    );
    let h = Matrix3::new(
        scale,
        0.0,
        -scale * centroid.x,
        0.0,
        scale,
        -scale * centroid.y,
        0.0,
        0.0,
        1.0,
    );
    let conic = h.transpose() * conic_n * h;
    Ellipse2D::from_conic_matrix(&conic)
}

/// Ellipsoid landmark: center, semi-axes and orientation (world-from-body).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vector3<f64>, semi_axes: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self> {
        if !semi_axes.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(GeometryError::InvalidParameter("ellipsoid semi-axes must be positive"));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidParameter("ellipsoid center must be finite"));
        }
        Pose::new(rotation, Vector3::zeros())?;
        Ok(Self { center, semi_axes, rotation })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(center, Vector3::repeat(radius), Matrix3::identity())
    }

    /// `R diag(a², b², c²) Rᵀ`: orientation-independent description of the shape.
    pub fn shape_matrix(&self) -> Matrix3<f64> {
        let d = Matrix3::from_diagonal(&self.semi_axes.component_mul(&self.semi_axes));
        self.rotation * d * self.rotation.transpose()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        local.component_div(&self.semi_axes).norm_squared() <= 1.0
    }

    /// Applies a rigid world transform `T` (points map as `T p`).
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            center: t.transform(&self.center),
            semi_axes: self.semi_axes,
            rotation: t.rotation() * self.rotation,
        }
    }

    /// Ray parameter of the first intersection of `origin + s·dir` with the
    /// surface, if any (`s > 0`).
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let rt = self.rotation.transpose();
        let o = (rt * (origin - self.center)).component_div(&self.semi_axes);
        let d = (rt * dir).component_div(&self.semi_axes);
        let a = d.norm_squared();
        let b = 2.0 * o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let s0 = (-b - sq) / (2.0 * a);
        let s1 = (-b + sq) / (2.0 * a);
        if s0 > 0.0 {
            Some(s0)
        } else if s1 > 0.0 {
            Some(s1)
        } else {
            None
        }
    }
}

/// Symmetric 4×4 dual quadric, scale-normalized so that `Q[3,3] = -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric {
    matrix: Matrix4<f64>,
}

impl DualQuadric {
    /// Symmetrizes and normalizes the given matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let mut sym = (m + m.transpose()) * 0.5;
        let w = sym[(3, 3)];
        if w != 0.0 {
            sym /= -w;
        }
        Self { matrix: sym }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }
}

/// `T diag(a², b², c², -1) Tᵀ` with `T` the homogeneous placement of the ellipsoid.
pub fn ellipsoid_to_dual_quadric(e: &Ellipsoid) -> DualQuadric {
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&e.rotation);
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&e.center);
    let a2 = e.semi_axes.component_mul(&e.semi_axes);
    let d = Matrix4::from_diagonal(&nalgebra::Vector4::new(a2.x, a2.y, a2.z, -1.0));
    DualQuadric::from_matrix(&(t * d * t.transpose()))
}

/// Inverse of [`ellipsoid_to_dual_quadric`]. Semi-axes come out sorted in
/// descending order with a deterministic sign convention on the rotation.
pub fn dual_quadric_to_ellipsoid(q: &DualQuadric) -> Result<Ellipsoid> {
    let m = q.matrix();
    if m[(3, 3)] == 0.0 || !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NotAnEllipsoid);
    }
    let m = m / (-m[(3, 3)]);
    let center = -Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let shape = m.fixed_view::<3, 3>(0, 0).into_owned() + center * center.transpose();
    let shape = (shape + shape.transpose()) * 0.5;
    let eig = SymmetricEigen::new(shape);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    if eig.eigenvalues[order[2]] <= 0.0 {
        return Err(GeometryError::NotAnEllipsoid);
    }
    let mut rotation = Matrix3::zeros();
    let mut axes = Vector3::zeros();
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let (imax, _) = v.iamax_full();
        if v[imax] < 0.0 {
            v = -v;
        }
        rotation.set_column(col, &v);
        axes[col] = eig.eigenvalues[i].sqrt();
    }
    if rotation.determinant() < 0.0 {
        let c = -rotation.column(2).into_owned();
        rotation.set_column(2, &c);
    }
    Ellipsoid::new(center, axes, rotation).map_err(|_| GeometryError::NotAnEllipsoid)
}

/// Projects a dual quadric into the image and returns the Gaussian whose
/// covariance is the shape matrix of the projected ellipse.
pub fn project_dual_quadric_gaussian(q: &DualQuadric, pose: &Pose, k: &Intrinsics) -> Result<Gaussian2D> {
    let m = q.matrix();
    if m[(3, 3)] == 0.0 {
        return Err(GeometryError::DegenerateConic);
    }
    let center = -Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]) / (-m[(3, 3)]);
    if pose.transform(&center).z <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    let p = pose.projection_matrix(k);
    let c = p * m * p.transpose();
    let w = c[(2, 2)];
    let scale = c.abs().max();
    if !(w < -1e-14 * scale) {
        return Err(GeometryError::DegenerateConic);
    }
    let c = c / (-w);
    let mean = -Vector2::new(c[(0, 2)], c[(1, 2)]);
    let shape = c.fixed_view::<2, 2>(0, 0).into_owned() + mean * mean.transpose();
    Gaussian2D::new(mean, shape).map_err(|_| GeometryError::DegenerateConic)
}

/// Projects a dual quadric as `C* = P Q* Pᵀ`, `P = K [R | t]`, and converts the
/// dual conic to an ellipse.
pub fn project_dual_quadric(q: &DualQuadric, pose: &Pose, k: &Intrinsics) -> Result<Ellipse2D> {
    let g = project_dual_quadric_gaussian(q, pose, k)?;
    gaussian_to_ellipse(&g).map_err(|_| GeometryError::DegenerateConic)
}

/// Pinhole projection of a world point.
pub fn project_point(p: &Vector3<f64>, pose: &Pose, k: &Intrinsics) -> Result<Vector2<f64>> {
    let pc = pose.transform(p);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    Ok(k.project(&pc))
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl BBox {
    pub fn new(min: Vector2<f64>, max: Vector2<f64>) -> Result<Self> {
        if min.x > max.x || min.y > max.y {
            return Err(GeometryError::InvalidParameter("box min must not exceed max"));
        }
        Ok(Self { min, max })
    }

    /// Tight box around a point set; `None` for an empty set.
    pub fn from_points(points: &[Vector2<f64>]) -> Option<Self> {
        let first = points.first()?;
        let (min, max) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Some(Self { min, max })
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x).max(0.0) * (self.max.y - self.min.y).max(0.0)
    }
}

/// Tight axis-aligned box of an ellipse.
pub fn ellipse_bbox(e: &Ellipse2D) -> BBox {
    let (s, c) = e.angle.sin_cos();
    let (a, b) = (e.semi_axes[0], e.semi_axes[1]);
    let hx = (a * a * c * c + b * b * s * s).sqrt();
    let hy = (a * a * s * s + b * b * c * c).sqrt();
    BBox { min: e.center - Vector2::new(hx, hy), max: e.center + Vector2::new(hx, hy) }
}

/// Intersection over union of two boxes.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let lo = a.min.sup(&b.min);
    let hi = a.max.inf(&b.max);
    let inter = (hi.x - lo.x).max(0.0) * (hi.y - lo.y).max(0.0);
    if inter <= 0.0 {
        return if a == b && a.area() == 0.0 { 1.0 } else { 0.0 };
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Orthogonal point-to-ellipse distance by dense parametric search plus
    /// Newton refinement, independent of the conic algebra in the fit.
    fn ellipse_distance(e: &Ellipse2D, p: &Vector2<f64>) -> f64 {
        let n = 720;
        let mut best_t = 0.0;
        let mut best = f64::INFINITY;
        for i in 0..n {
            let t = 2.0 * PI * i as f64 / n as f64;
            let d = (e.point_at(t) - p).norm();
            if d < best {
                best = d;
                best_t = t;
            }
        }
        let mut t = best_t;
        for _ in 0..20 {
            let h = 1e-5;
            let f = |t: f64| (e.point_at(t) - p).norm_squared();
            let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
            let d2 = (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h);
            if d2 <= 0.0 {
                break;
            }
            t -= d1 / d2;
        }
        (e.point_at(t) - p).norm().min(best)
    }

    fn reference_ellipse() -> Ellipse2D {
        Ellipse2D::new(Vector2::new(100.0, 80.0), Vector2::new(30.0, 10.0), 0.4).unwrap()
    }

    #[test]
    fn fit_recovers_exact_samples() {
        let truth = reference_ellipse();
        let fit = fit_ellipse(&truth.sample_outline(64)).unwrap();
        assert_relative_eq!(fit.center, truth.center, max_relative = 1e-6);
        assert_relative_eq!(fit.semi_axes, truth.semi_axes, max_relative = 1e-6);
        assert_relative_eq!(fit.angle, truth.angle, max_relative = 1e-6);
    }

    #[test]
    fn fit_rejects_too_few_points() {
        let pts = reference_ellipse().sample_outline(4);
        assert_eq!(fit_ellipse(&pts), Err(GeometryError::TooFewPoints(4)));
    }

    #[test]
    fn fit_rejects_collinear_points() {
        let pts: Vec<_> = (0..10).map(|i| Vector2::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert_eq!(fit_ellipse(&pts), Err(GeometryError::DegenerateFit));
    }

    #[test]
    fn fit_tolerates_pixel_noise() {
        let truth = reference_ellipse();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let pts: Vec<_> = truth
            .sample_outline(64)
            .into_iter()
            .map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let fit = fit_ellipse(&pts).unwrap();
        assert_relative_eq!(fit.center, truth.center, max_relative = 0.02);
        assert_relative_eq!(fit.semi_axes, truth.semi_axes, max_relative = 0.02);
        assert_relative_eq!(fit.angle, truth.angle, max_relative = 0.02);
        let rms = (pts.iter().map(|p| ellipse_distance(&fit, p).powi(2)).sum::<f64>()
            / pts.len() as f64)
            .sqrt();
        assert!(rms <= 2.0 * 0.5, "residual rms {rms}");
    }

    #[test]
    fn gaussian_examples() {
        let e = Ellipse2D::new(Vector2::zeros(), Vector2::new(2.0, 1.0), 0.0).unwrap();
        assert_relative_eq!(ellipse_to_gaussian(&e).covariance, Matrix2::new(4.0, 0.0, 0.0, 1.0));

        let circle = Ellipse2D::new(Vector2::new(3.0, 4.0), Vector2::new(2.5, 2.5), 1.1).unwrap();
        assert_relative_eq!(
            ellipse_to_gaussian(&circle).covariance,
            Matrix2::identity() * 6.25,
            epsilon = 1e-12
        );

        let e = Ellipse2D::new(Vector2::zeros(), Vector2::new(3.0, 1.0), PI / 4.0).unwrap();
        assert_relative_eq!(
            ellipse_to_gaussian(&e).covariance,
            Matrix2::new(5.0, 4.0, 4.0, 5.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_to_ellipse_examples() {
        let g = Gaussian2D::new(Vector2::zeros(), Matrix2::new(4.0, 0.0, 0.0, 1.0)).unwrap();
        let e = gaussian_to_ellipse(&g).unwrap();
        assert_relative_eq!(e.semi_axes, Vector2::new(2.0, 1.0), epsilon = 1e-12);
        assert_eq!(e.angle, 0.0);

        let g = Gaussian2D::new(Vector2::zeros(), Matrix2::identity()).unwrap();
        let e = gaussian_to_ellipse(&g).unwrap();
        assert_relative_eq!(e.semi_axes, Vector2::new(1.0, 1.0), epsilon = 1e-12);
        assert_eq!(e.angle, 0.0);

        let g = Gaussian2D::new(Vector2::zeros(), Matrix2::new(5.0, 4.0, 4.0, 5.0)).unwrap();
        let e = gaussian_to_ellipse(&g).unwrap();
        assert_relative_eq!(e.semi_axes, Vector2::new(3.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(e.angle, PI / 4.0, epsilon = 1e-12);

        let bad = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        assert_eq!(Gaussian2D::new(Vector2::zeros(), bad), Err(GeometryError::NotPositiveDefinite));
    }

    #[test]
    fn angle_canonicalization() {
        let e = Ellipse2D::new(Vector2::zeros(), Vector2::new(1.0, 2.0), 0.0).unwrap();
        assert_eq!(e.semi_axes, Vector2::new(2.0, 1.0));
        assert_relative_eq!(e.angle, -FRAC_PI_2);
        let e = Ellipse2D::new(Vector2::zeros(), Vector2::new(2.0, 1.0), FRAC_PI_2).unwrap();
        assert_relative_eq!(e.angle, -FRAC_PI_2);
        let e = Ellipse2D::new(Vector2::zeros(), Vector2::new(2.0, 1.0), 3.0 * PI + 0.1).unwrap();
        assert_relative_eq!(e.angle, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sqrtm_examples() {
        assert_relative_eq!(sqrtm_spd2(&Matrix2::identity()).unwrap(), Matrix2::identity());
        assert_relative_eq!(
            sqrtm_spd2(&Matrix2::new(4.0, 0.0, 0.0, 9.0)).unwrap(),
            Matrix2::new(2.0, 0.0, 0.0, 3.0),
            epsilon = 1e-14
        );
        let m = Matrix2::new(5.0, 4.0, 4.0, 5.0);
        let r = sqrtm_spd2(&m).unwrap();
        assert_relative_eq!(r * r, m, epsilon = 1e-10);
        assert!(sqrtm_spd2(&Matrix2::new(-1.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn dual_quadric_examples() {
        let unit = Ellipsoid::sphere(Vector3::zeros(), 1.0).unwrap();
        let q = ellipsoid_to_dual_quadric(&unit);
        assert_relative_eq!(
            *q.matrix(),
            Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, 1.0, 1.0, -1.0))
        );

        let shifted = Ellipsoid::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap();
        let q = ellipsoid_to_dual_quadric(&shifted);
        // T diag(1,1,1,-1) Tᵀ with T = [I c; 0 1] evaluated explicitly.
        #[rustfmt::skip]
        let expected = Matrix4::new(
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0 - 25.0, -5.0,
            0.0, 0.0, -5.0, -1.0,
        );
        assert_relative_eq!(*q.matrix(), expected, epsilon = 1e-12);
        assert_eq!(q.matrix()[(3, 3)], -1.0);
    }

    #[test]
    fn dual_quadric_rejects_non_ellipsoid() {
        let m = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, 1.0, -1.0));
        assert_eq!(
            dual_quadric_to_ellipsoid(&DualQuadric::from_matrix(&m)),
            Err(GeometryError::NotAnEllipsoid)
        );
        let zero_w = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, 1.0, 1.0, 0.0));
        assert!(dual_quadric_to_ellipsoid(&DualQuadric::from_matrix(&zero_w)).is_err());
    }

    #[test]
    fn sphere_projection_matches_silhouette_cone() {
        let q = ellipsoid_to_dual_quadric(&Ellipsoid::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap());
        let e = project_dual_quadric(&q, &Pose::identity(), &cam()).unwrap();
        let expected = 500.0 * 1.0 / (25.0f64 - 1.0).sqrt();
        assert_relative_eq!(e.center, Vector2::new(320.0, 240.0), epsilon = 1e-9);
        assert_relative_eq!(e.semi_axes[0], expected, epsilon = 1e-6);
        assert_relative_eq!(e.semi_axes[1], expected, epsilon = 1e-6);
        assert!((expected - 102.06).abs() < 0.01);
    }

    #[test]
    fn projection_behind_camera() {
        let q = ellipsoid_to_dual_quadric(&Ellipsoid::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap());
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
        assert_eq!(project_dual_quadric(&q, &pose, &cam()), Err(GeometryError::BehindCamera));
        assert_eq!(
            project_point(&Vector3::new(0.0, 0.0, 5.0), &pose, &cam()),
            Err(GeometryError::BehindCamera)
        );
    }

    #[test]
    fn camera_inside_quadric_is_degenerate() {
        let q = ellipsoid_to_dual_quadric(&Ellipsoid::sphere(Vector3::new(0.0, 0.0, 0.5), 1.0).unwrap());
        assert_eq!(
            project_dual_quadric(&q, &Pose::identity(), &cam()),
            Err(GeometryError::DegenerateConic)
        );
    }

    #[test]
    fn roll_rotates_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = cam();
        for _ in 0..50 {
            let axis = Vector3::new(rng.random::<f64>(), rng.random(), rng.random()) - Vector3::repeat(0.5);
            let rot = UnitQuaternion::from_scaled_axis(axis * 2.0).to_rotation_matrix().into_inner();
            let ell = Ellipsoid::new(
                Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(4.0..8.0)),
                Vector3::new(rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)),
                rot,
            )
            .unwrap();
            let q = ellipsoid_to_dual_quadric(&ell);
            let gamma: f64 = rng.random_range(-PI..PI);
            let roll = UnitQuaternion::from_scaled_axis(Vector3::z() * gamma).to_rotation_matrix().into_inner();
            let base = Pose::identity();
            let rolled = Pose::new(roll, Vector3::zeros()).unwrap();
            let g0 = project_dual_quadric_gaussian(&q, &base, &k).unwrap();
            let g1 = project_dual_quadric_gaussian(&q, &rolled, &k).unwrap();
            let r2 = roll.fixed_view::<2, 2>(0, 0).into_owned();
            let pp = Vector2::new(k.cx, k.cy);
            assert_relative_eq!(g1.mean, pp + r2 * (g0.mean - pp), epsilon = 1e-9);
            assert_relative_eq!(
                g1.covariance,
                r2 * g0.covariance * r2.transpose(),
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(Vector2::new(0.0, 0.0), Vector2::new(2.0, 2.0)).unwrap();
        let b = BBox::new(Vector2::new(1.0, 1.0), Vector2::new(3.0, 3.0)).unwrap();
        let far = BBox::new(Vector2::new(5.0, 5.0), Vector2::new(6.0, 6.0)).unwrap();
        assert_eq!(bbox_iou(&a, &a), 1.0);
        assert_eq!(bbox_iou(&a, &far), 0.0);
        // Rasterized oracle: count unit cells covered by both / either box.
        let covered = |bb: &BBox, x: f64, y: f64| x >= bb.min.x && x < bb.max.x && y >= bb.min.y && y < bb.max.y;
        let steps = 300;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..steps {
            for j in 0..steps {
                let x = 3.0 * (i as f64 + 0.5) / steps as f64;
                let y = 3.0 * (j as f64 + 0.5) / steps as f64;
                let (ia, ib) = (covered(&a, x, y), covered(&b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        let raster = inter as f64 / union as f64;
        assert_relative_eq!(raster, 1.0 / 7.0, epsilon = 1e-9);
        assert_relative_eq!(bbox_iou(&a, &b), raster, epsilon = 1e-12);
    }

    #[test]
    fn ellipse_bbox_matches_dense_outline() {
        let e = reference_ellipse();
        let b = ellipse_bbox(&e);
        let dense = BBox::from_points(&e.sample_outline(20000)).unwrap();
        assert_relative_eq!(b.min, dense.min, epsilon = 1e-3);
        assert_relative_eq!(b.max, dense.max, epsilon = 1e-3);
    }

    #[test]
    fn pose_exp_log_and_inverse() {
        let xi = Vector6::new(0.3, -0.2, 1.0, 0.1, 0.5, -0.4);
        let p = Pose::exp(&xi);
        assert_relative_eq!(p.log(), xi, epsilon = 1e-12);
        let id = p.compose(&p.inverse());
        assert_relative_eq!(*id.rotation(), Matrix3::identity(), epsilon = 1e-9);
        assert_relative_eq!(*id.translation(), Vector3::zeros(), epsilon = 1e-9);
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
    }
}
