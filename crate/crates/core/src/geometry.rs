//! Camera model, quaternion algebra, 3D covariance construction and
//! perspective projection of Gaussians to screen space.
//!
//! Every forward map here has a hand-written adjoint. The projection follows
//! the usual EWA splatting approximation: the 2D covariance is
//! `J W Σ Wᵀ Jᵀ` where `W` is the world-to-camera rotation and `J` the
//! Jacobian of the pinhole map at the camera-space mean.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splats with camera-space depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Added to the diagonal of every 2D covariance (px²); keeps splats at least
/// about a pixel wide.
pub const COV2D_BLUR: f64 = 0.3;

const DEGENERATE_QUAT_NORM: f64 = 1e-12;

/// Pinhole camera with an OpenCV-style frame: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rows of the world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn new(
        width: u32,
        height: u32,
        [fx, fy, cx, cy]: [f64; 4],
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        fov_x: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera up vector parallel to view".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let f = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self::new(
            width,
            height,
            [f, f, width as f64 / 2.0, height as f64 / 2.0],
            mat3_to_rows(&r),
            [t.x, t.y, t.z],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let r = self.world_rotation();
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if !(err <= 1e-9) || r.determinant() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        Ok(())
    }

    pub fn world_rotation(&self) -> Matrix3<f64> {
        rows_to_mat3(&self.rotation)
    }

    pub fn world_translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.world_rotation() * x + self.world_translation()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.world_rotation().transpose() * self.world_translation())
    }
}

pub(crate) fn rows_to_mat3(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(
        rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0], rows[2][1], rows[2][2],
    )
}

pub(crate) fn mat3_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

/// Unnormalized rotation parameter, `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > DEGENERATE_QUAT_NORM) {
            return Err(Error::InvalidParameter(format!("quaternion norm {n:e} is degenerate")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }
}

fn unit_quat_to_rotmat(q: &Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of `q / |q|`.
pub fn quat_to_rotmat(q: &Quaternion) -> Result<Matrix3<f64>> {
    Ok(unit_quat_to_rotmat(&q.normalized()?))
}

/// Adjoint of [`quat_to_rotmat`]: maps `dL/dR` to `dL/dq` for the raw
/// (unnormalized) quaternion.
pub fn quat_to_rotmat_backward(q: &Quaternion, d_r: &Matrix3<f64>) -> Result<[f64; 4]> {
    let n = q.norm();
    let u = q.normalized()?;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let Quaternion { w, x, y, z } = u;
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let du = [dw, dx, dy, dz];
    Ok(normalize_backward(&u.to_array(), n, &du))
}

/// Adjoint of `v ↦ v / |v|` given the unit vector and the original norm.
pub(crate) fn normalize_backward(unit: &[f64; 4], norm: f64, d_unit: &[f64; 4]) -> [f64; 4] {
    let dot: f64 = unit.iter().zip(d_unit).map(|(a, b)| a * b).sum();
    std::array::from_fn(|i| (d_unit[i] - unit[i] * dot) / norm)
}

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(q: &Quaternion, log_scale: &Vector3<f64>) -> Result<Covariance3> {
    if !log_scale.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidParameter("non-finite log-scale".into()));
    }
    let r = quat_to_rotmat(q)?;
    let d = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * d * r.transpose();
    // Exact symmetry regardless of rounding in the triple product.
    Ok(Covariance3((sigma + sigma.transpose()) * 0.5))
}

/// Projected Gaussian in pixel space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Perspective Jacobian of `(u, v)` w.r.t. the camera-space point.
fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// Project a world-space Gaussian. `None` means the splat is culled by the
/// near plane and contributes nothing.
pub fn project_gaussian(x: &Vector3<f64>, sigma: &Covariance3, cam: &Camera) -> Option<Splat2D> {
    let p = cam.to_camera(x);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let m = projection_jacobian(cam, &p) * cam.world_rotation();
    let cov = m * sigma.0 * m.transpose();
    let cov = (cov + cov.transpose()) * 0.5 + Matrix2::identity() * COV2D_BLUR;
    Some(Splat2D {
        mean2d: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        cov2d: cov,
        depth: p.z,
    })
}

/// Learnable geometric parameters of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianGeometry {
    pub position: Vector3<f64>,
    pub rotation: Quaternion,
    pub log_scale: Vector3<f64>,
}

/// Saved values from [`project_forward`] needed by [`project_backward`].
#[derive(Clone, Debug)]
pub struct ProjectionContext {
    rotation: Quaternion,
    rot: Matrix3<f64>,
    scales_sq: Vector3<f64>,
    sigma: Matrix3<f64>,
    cam_point: Vector3<f64>,
    view: Matrix3<f64>,
    fx: f64,
    fy: f64,
    visible: bool,
}

impl ProjectionContext {
    pub fn is_visible(&self) -> bool {
        self.visible
    }
}

/// Gradients w.r.t. one Gaussian's geometric parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryGrad {
    pub position: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
}

/// Covariance construction followed by projection, keeping the context for
/// the backward pass.
pub fn project_forward(g: &GaussianGeometry, cam: &Camera) -> Result<(Option<Splat2D>, ProjectionContext)> {
    let rot = quat_to_rotmat(&g.rotation)?;
    let scales_sq = g.log_scale.map(|s| (2.0 * s).exp());
    let sigma = build_covariance(&g.rotation, &g.log_scale)?;
    let splat = project_gaussian(&g.position, &sigma, cam);
    let ctx = ProjectionContext {
        rotation: g.rotation,
        rot,
        scales_sq,
        sigma: sigma.0,
        cam_point: cam.to_camera(&g.position),
        view: cam.world_rotation(),
        fx: cam.fx,
        fy: cam.fy,
        visible: splat.is_some(),
    };
    Ok((splat, ctx))
}

/// Adjoint of [`project_forward`].
///
/// `d_cov2d` is the gradient w.r.t. every entry of the 2D covariance
/// (`dL = Σ_ab G_ab dΣ'_ab`); it is symmetrized before use.
pub fn project_backward(
    ctx: &ProjectionContext,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> Result<GeometryGrad> {
    if !ctx.visible {
        if d_mean2d.iter().chain(d_cov2d.iter()).any(|v| *v != 0.0) {
            return Err(Error::Contract(
                "culled splat received a non-zero upstream gradient".into(),
            ));
        }
        return Ok(GeometryGrad::default());
    }
    let p = ctx.cam_point;
    let (fx, fy) = (ctx.fx, ctx.fy);
    let iz = 1.0 / p.z;
    let jac = Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz * iz, 0.0, fy * iz, -fy * p.y * iz * iz);
    let m = jac * ctx.view;
    let g = (d_cov2d + d_cov2d.transpose()) * 0.5;

    let d_sigma = m.transpose() * g * m;
    let d_m = 2.0 * g * m * ctx.sigma;
    let d_j = d_m * ctx.view.transpose();

    // Mean: the Jacobian of (u, v) is `jac` itself.
    let mut d_p = jac.transpose() * d_mean2d;
    d_p.x += d_j[(0, 2)] * (-fx * iz * iz);
    d_p.y += d_j[(1, 2)] * (-fy * iz * iz);
    d_p.z += d_j[(0, 0)] * (-fx * iz * iz)
        + d_j[(0, 2)] * (2.0 * fx * p.x * iz * iz * iz)
        + d_j[(1, 1)] * (-fy * iz * iz)
        + d_j[(1, 2)] * (2.0 * fy * p.y * iz * iz * iz);
    let d_position = ctx.view.transpose() * d_p;

    // Σ = R D Rᵀ, D = diag(exp(2s)).
    let d = Matrix3::from_diagonal(&ctx.scales_sq);
    let d_rot = 2.0 * d_sigma * ctx.rot * d;
    let inner = ctx.rot.transpose() * d_sigma * ctx.rot;
    let d_log_scale = Vector3::from_fn(|k, _| 2.0 * ctx.scales_sq[k] * inner[(k, k)]);
    let d_rotation = quat_to_rotmat_backward(&ctx.rotation, &d_rot)?;

    Ok(GeometryGrad {
        position: d_position,
        rotation: d_rotation,
        log_scale: d_log_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(cx: f64, cy: f64) -> Camera {
        Camera::new(
            100,
            100,
            [100.0, 100.0, cx, cy],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 0.0],
        )
        .unwrap()
    }

    fn random_quat(rng: &mut impl Rng) -> Quaternion {
        Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn rotmat_examples() {
        let r = quat_to_rotmat(&Quaternion::IDENTITY).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = quat_to_rotmat(&Quaternion::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(r, Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0));
        assert!(matches!(
            quat_to_rotmat(&Quaternion::new(0.0, 0.0, 0.0, 1e-13)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn rotmat_matches_axis_angle_reference() {
        // Independent route: Rodrigues' formula from the quaternion's axis-angle form.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let u = q.normalized().unwrap();
            let angle = 2.0 * u.w.clamp(-1.0, 1.0).acos();
            let axis = Vector3::new(u.x, u.y, u.z);
            let s = axis.norm();
            let reference = if s < 1e-12 {
                Matrix3::identity()
            } else {
                let k = axis / s;
                let kx = k.cross_matrix();
                Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
            };
            let r = quat_to_rotmat(&q).unwrap();
            assert!((r - reference).amax() < 1e-12);
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
            assert!((quat_to_rotmat(&neg).unwrap() - r).amax() <= 1e-12);
        }
    }

    #[test]
    fn covariance_examples() {
        let c = build_covariance(&Quaternion::IDENTITY, &Vector3::zeros()).unwrap();
        assert_eq!(c.0, Matrix3::identity());
        let c = build_covariance(&Quaternion::IDENTITY, &Vector3::new(2f64.ln(), 0.0, 0.0)).unwrap();
        assert!((c.0 - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).amax() < 1e-14);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            let s = Vector3::from_fn(|_, _| rng.random_range(-2.0..1.0));
            let c = build_covariance(&q, &s).unwrap();
            assert!((c.0 - c.0.transpose()).amax() <= 1e-12);
            let mut eig: Vec<f64> = c.0.symmetric_eigenvalues().iter().copied().collect();
            let mut expected: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-9, "{eig:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn projection_on_axis() {
        let cam = axis_camera(50.0, 50.0);
        let sigma = Covariance3(Matrix3::identity() * 0.01);
        let s = project_gaussian(&Vector3::new(0.0, 0.0, 1.0), &sigma, &cam).unwrap();
        assert_eq!(s.mean2d, Vector2::new(50.0, 50.0));
        // fx² σ² / z² = 100² · 0.01 = 100.
        let expected = Matrix2::identity() * (100.0 + COV2D_BLUR);
        assert!((s.cov2d - expected).amax() < 1e-12);
        assert_eq!(s.depth, 1.0);
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, 0.0), &sigma, &cam).is_none());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, -1.0), &sigma, &cam).is_none());
    }

    #[test]
    fn projection_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 3.0);
            let sigma = build_covariance(&random_quat(&mut rng), &Vector3::new(-1.0, -1.5, -2.0)).unwrap();
            let (a, b) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let s0 = project_gaussian(&x, &sigma, &axis_camera(50.0, 50.0)).unwrap();
            let s1 = project_gaussian(&x, &sigma, &axis_camera(50.0 + a, 50.0 + b)).unwrap();
            assert!(((s1.mean2d - s0.mean2d) - Vector2::new(a, b)).amax() < 1e-12);
            assert_eq!(s1.cov2d, s0.cov2d);
        }
    }

    #[test]
    fn camera_validation() {
        let bad = Camera::new(
            10,
            10,
            [10.0, 10.0, 5.0, 5.0],
            [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(bad.is_err());
        let cam = Camera::look_at(Vector3::new(4.0, 0.0, 1.0), Vector3::zeros(), Vector3::z(), 32, 32, 0.8).unwrap();
        // The target projects to the principal point.
        let p = cam.to_camera(&Vector3::zeros());
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((cam.center() - Vector3::new(4.0, 0.0, 1.0)).amax() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let g = GaussianGeometry {
            position: Vector3::new(0.1, -0.2, 2.0),
            rotation: Quaternion::new(0.9, 0.1, 0.2, -0.3),
            log_scale: Vector3::new(-1.0, -2.0, -1.5),
        };
        let (_, ctx) = project_forward(&g, &axis_camera(50.0, 50.0)).unwrap();
        let grad = project_backward(&ctx, &Vector2::zeros(), &Matrix2::zeros()).unwrap();
        assert_eq!(grad, GeometryGrad::default());
    }

    #[test]
    fn culled_context_rejects_gradient() {
        let g = GaussianGeometry {
            position: Vector3::new(0.0, 0.0, -1.0),
            rotation: Quaternion::IDENTITY,
            log_scale: Vector3::zeros(),
        };
        let (splat, ctx) = project_forward(&g, &axis_camera(50.0, 50.0)).unwrap();
        assert!(splat.is_none());
        assert!(project_backward(&ctx, &Vector2::zeros(), &Matrix2::zeros()).is_ok());
        assert!(matches!(
            project_backward(&ctx, &Vector2::new(1.0, 0.0), &Matrix2::zeros()),
            Err(Error::Contract(_))
        ));
    }
}
