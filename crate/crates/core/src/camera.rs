//! One perspective camera per image, shared by every face in it.
//!
//! Camera frame: x right, y down, z forward (points in front have z > 0).
//! Integer pixel `(i, j)` samples the continuous coordinate `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Focal length in pixels for a 224-pixel frame.
pub const DEFAULT_FOCAL_224: f64 = 1015.0;

/// Transformed depths at or below this are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Validated constructor: focal > 0 and both dimensions positive multiples of 32.
    pub fn new(focal: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Intrinsics {
            focal,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Focal length `focal_224` scaled from a 224-pixel frame to `min(width, height)`.
    pub fn with_frame_focal(focal_224: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(focal_224 * width.min(height) as f64 / 224.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {}",
                self.focal
            )));
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "image {name} must be a positive multiple of 32, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Per-face rigid pose: axis-angle rotation, translation code `(d_x, d_y, d_z)`,
/// and the face's image-plane center `(c_x, c_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Vector3<f64>,
    pub trans_code: Vector3<f64>,
    pub face_center: Vector2<f64>,
}

impl Pose {
    pub fn new(rot: Vector3<f64>, trans_code: Vector3<f64>, face_center: Vector2<f64>) -> Self {
        Pose {
            rot,
            trans_code,
            face_center,
        }
    }
}

pub fn intrinsic_matrix(intr: &Intrinsics) -> Matrix3<f64> {
    let c = intr.principal_point();
    Matrix3::new(
        intr.focal, 0.0, c.x, //
        0.0, intr.focal, c.y, //
        0.0, 0.0, 1.0,
    )
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2` and their
/// derivatives divided by `t`, with series expansions near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
        let da = -1.0 / 3.0 + t2 / 30.0;
        let db = -1.0 / 12.0 + t2 / 180.0;
        (a, b, da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Exponential map `so(3) -> SO(3)`.
pub fn rotation_from_axis_angle(rot: &Vector3<f64>) -> Matrix3<f64> {
    let theta = rot.norm();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = skew(rot);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives `dR/d rot_i` of the exponential map.
pub fn rotation_jacobian(rot: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = rot.norm();
    let (a, b, da, db) = rodrigues_coeffs(theta);
    let k = skew(rot);
    let k2 = k * k;
    std::array::from_fn(|i| {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let ei = skew(&e);
        ei * a + (ei * k + k * ei) * b + k * (da * rot[i]) + k2 * (db * rot[i])
    })
}

/// Logarithm map `SO(3) -> so(3)`, returning a vector with norm in `[0, pi]`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return w * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi: axis from the symmetric part.
        let s = (r + Matrix3::identity()) * 0.5;
        let i = (0..3)
            .max_by(|&a, &b| s[(a, a)].total_cmp(&s[(b, b)]))
            .unwrap();
        let mut axis = s.column(i).into_owned();
        axis /= axis.norm();
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Geodesic angle between two rotations, in radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Yaw (rotation about the camera's vertical axis) of `R = Ry(yaw) Rx(pitch) Rz(roll)`.
pub fn yaw_of(r: &Matrix3<f64>) -> f64 {
    r[(0, 2)].atan2(r[(2, 2)])
}

/// `R = Ry(yaw) * Rx(pitch) * Rz(roll)`.
pub fn rotation_from_euler(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let ry = rotation_from_axis_angle(&Vector3::new(0.0, yaw, 0.0));
    let rx = rotation_from_axis_angle(&Vector3::new(pitch, 0.0, 0.0));
    let rz = rotation_from_axis_angle(&Vector3::new(0.0, 0.0, roll));
    ry * rx * rz
}

/// Camera-space translation from the translation code and face center.
pub fn decode_translation(pose: &Pose, intr: &Intrinsics) -> Result<Vector3<f64>> {
    let d = pose.trans_code;
    if !(d.z > 0.0) {
        return Err(Error::NonpositiveDepth(d.z));
    }
    let c = pose.face_center;
    let p = intr.principal_point();
    Ok(Vector3::new(
        d.z * (d.x + c.x - p.x) / intr.focal,
        d.z * (d.y + c.y - p.y) / intr.focal,
        d.z,
    ))
}

/// Adjoint of [`decode_translation`] with respect to the translation code.
pub fn decode_translation_backward(
    pose: &Pose,
    intr: &Intrinsics,
    grad_t: &Vector3<f64>,
) -> Vector3<f64> {
    let d = pose.trans_code;
    let c = pose.face_center;
    let p = intr.principal_point();
    let f = intr.focal;
    Vector3::new(
        grad_t.x * d.z / f,
        grad_t.y * d.z / f,
        grad_t.x * (d.x + c.x - p.x) / f + grad_t.y * (d.y + c.y - p.y) / f + grad_t.z,
    )
}

/// Pixel coordinates and camera depth of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub uv: Vector2<f64>,
    pub depth: f64,
}

/// Projects camera-space points through `K`.
pub fn project_camera_points(points: &[Vector3<f64>], intr: &Intrinsics) -> Result<Vec<Projected>> {
    let c = intr.principal_point();
    points
        .iter()
        .enumerate()
        .map(|(index, x)| {
            if !(x.z > MIN_DEPTH) {
                return Err(Error::BehindCamera { index, z: x.z });
            }
            Ok(Projected {
                uv: Vector2::new(intr.focal * x.x / x.z + c.x, intr.focal * x.y / x.z + c.y),
                depth: x.z,
            })
        })
        .collect()
}

/// Gradient of a camera-space point given the gradient of its pixel
/// coordinates.
pub fn project_point_backward(x: &Vector3<f64>, intr: &Intrinsics, grad_uv: &Vector2<f64>) -> Vector3<f64> {
    let f = intr.focal;
    let iz = 1.0 / x.z;
    Vector3::new(
        grad_uv.x * f * iz,
        grad_uv.y * f * iz,
        -(grad_uv.x * f * x.x + grad_uv.y * f * x.y) * iz * iz,
    )
}

/// `p ~ K (R X + t)` for model-space points.
pub fn project(points: &[Vector3<f64>], pose: &Pose, intr: &Intrinsics) -> Result<Vec<Projected>> {
    let r = rotation_from_axis_angle(&pose.rot);
    let t = decode_translation(pose, intr)?;
    let cam: Vec<Vector3<f64>> = points.iter().map(|x| r * x + t).collect();
    project_camera_points(&cam, intr)
}

/// Inverse of [`project`] for a pixel with known camera depth.
pub fn unproject(p: &Projected, pose: &Pose, intr: &Intrinsics) -> Result<Vector3<f64>> {
    let r = rotation_from_axis_angle(&pose.rot);
    let t = decode_translation(pose, intr)?;
    let c = intr.principal_point();
    let cam = Vector3::new(
        (p.uv.x - c.x) * p.depth / intr.focal,
        (p.uv.y - c.y) * p.depth / intr.focal,
        p.depth,
    );
    Ok(r.transpose() * (cam - t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn intr512() -> Intrinsics {
        Intrinsics::new(512.0, 512, 512).unwrap()
    }

    fn centered(d: Vector3<f64>, intr: &Intrinsics) -> Pose {
        Pose::new(Vector3::zeros(), d, intr.principal_point())
    }

    #[test]
    fn intrinsic_matrix_examples() {
        let k = intrinsic_matrix(&intr512());
        assert_eq!(
            k,
            Matrix3::new(512.0, 0.0, 256.0, 0.0, 512.0, 256.0, 0.0, 0.0, 1.0)
        );
        let tiny = Intrinsics {
            focal: 1.0,
            width: 2,
            height: 2,
        };
        assert_eq!(
            intrinsic_matrix(&tiny),
            Matrix3::new(1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0)
        );
        for f in [1.0, 37.5, 1015.0] {
            let k = intrinsic_matrix(&Intrinsics::new(f, 64, 96).unwrap());
            assert!((k.determinant() - f * f).abs() < 1e-9 * f * f);
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 32, 32).is_err());
        assert!(Intrinsics::new(100.0, 33, 32).is_err());
        assert!(Intrinsics::new(100.0, 32, 0).is_err());
        let f = Intrinsics::with_frame_focal(DEFAULT_FOCAL_224, 448, 448).unwrap();
        assert!((f.focal - 2030.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_from_axis_angle(&Vector3::zeros()), Matrix3::identity());
        let r = rotation_from_axis_angle(&Vector3::new(PI, 0.0, 0.0));
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!((r - expected).abs().max() < 1e-12);
    }

    #[test]
    fn tiny_rotation_uses_series() {
        let v = Vector3::new(3e-9, -1e-9, 2e-9);
        let r = rotation_from_axis_angle(&v);
        let first_order = Matrix3::identity() + skew(&v);
        assert!((r - first_order).abs().max() < 1e-16);
    }

    #[test]
    fn decode_translation_examples() {
        let intr = intr512();
        let t = decode_translation(&centered(Vector3::new(0.0, 0.0, 5.0), &intr), &intr).unwrap();
        assert_eq!(t, Vector3::new(0.0, 0.0, 5.0));
        for f in [100.0, 512.0, 2000.0] {
            let intr = Intrinsics::new(f, 512, 512).unwrap();
            let pose = Pose::new(
                Vector3::zeros(),
                Vector3::new(0.0, 0.0, 2.0),
                Vector2::new(256.0 + f, 256.0),
            );
            let t = decode_translation(&pose, &intr).unwrap();
            assert!((t - Vector3::new(2.0, 0.0, 2.0)).norm() < 1e-12);
        }
        let bad = centered(Vector3::new(0.0, 0.0, 0.0), &intr);
        assert!(matches!(
            decode_translation(&bad, &intr),
            Err(Error::NonpositiveDepth(_))
        ));
    }

    #[test]
    fn project_examples() {
        let intr = intr512();
        let pose = centered(Vector3::new(0.0, 0.0, 5.0), &intr);
        let p = project(&[Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)], &pose, &intr).unwrap();
        assert_eq!(p[0].uv, Vector2::new(256.0, 256.0));
        assert_eq!(p[0].depth, 5.0);
        assert!((p[1].uv - Vector2::new(358.4, 256.0)).norm() < 1e-12);
        let behind = project(&[Vector3::new(0.0, 0.0, -6.0)], &pose, &intr);
        assert!(matches!(behind, Err(Error::BehindCamera { index: 0, .. })));
    }

    #[test]
    fn shared_camera_translates_silhouettes() {
        let intr = intr512();
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|i| {
                let a = i as f64 * 0.37;
                Vector3::new(a.cos(), (1.3 * a).sin(), 0.5 * (0.7 * a).cos())
            })
            .collect();
        let rot = Vector3::new(0.1, -0.4, 0.05);
        let d = Vector3::new(0.0, 0.0, 12.0);
        let a = project(&pts, &Pose::new(rot, d, Vector2::new(200.0, 220.0)), &intr).unwrap();
        let b = project(&pts, &Pose::new(rot, d, Vector2::new(260.0, 180.0)), &intr).unwrap();
        // Under perspective the shift is exact at depth d_z and scales as d_z / z elsewhere.
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.depth, pb.depth);
            let shift = pb.uv - pa.uv;
            let expected = Vector2::new(60.0, -40.0) * (d.z / pa.depth);
            assert!((shift - expected).norm() < 1e-6);
        }
        let origin = [Vector3::zeros()];
        let a = project(&origin, &Pose::new(rot, d, Vector2::new(200.0, 220.0)), &intr).unwrap();
        let b = project(&origin, &Pose::new(rot, d, Vector2::new(260.0, 180.0)), &intr).unwrap();
        assert!((b[0].uv - a[0].uv - Vector2::new(60.0, -40.0)).norm() < 1e-9);
    }

    #[test]
    fn halving_depth_doubles_projected_size() {
        let intr = intr512();
        let pts: Vec<Vector3<f64>> = (0..64)
            .map(|i| {
                let a = i as f64 * 0.7;
                Vector3::new(a.cos(), a.sin(), 0.3 * (2.0 * a).sin())
            })
            .collect();
        let diag = |dz: f64| {
            let p = project(&pts, &centered(Vector3::new(0.0, 0.0, dz), &intr), &intr).unwrap();
            let (mut lo, mut hi) = (Vector2::repeat(f64::MAX), Vector2::repeat(f64::MIN));
            for q in &p {
                lo = lo.inf(&q.uv);
                hi = hi.sup(&q.uv);
            }
            (hi - lo).norm()
        };
        // Radius 1 at depth >= 12 subtends less than 10 degrees.
        let ratio = diag(12.0) / diag(24.0);
        assert!((ratio - 2.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn euler_and_log_roundtrip() {
        let r = rotation_from_euler(0.8, -0.1, 0.05);
        assert!((yaw_of(&r) - 0.8).abs() < 0.02);
        let v = axis_angle_from_rotation(&r);
        assert!((rotation_from_axis_angle(&v) - r).abs().max() < 1e-12);
        let near_pi = rotation_from_axis_angle(&Vector3::new(0.0, PI - 1e-9, 0.0));
        let w = axis_angle_from_rotation(&near_pi);
        assert!((rotation_from_axis_angle(&w) - near_pi).abs().max() < 1e-7);
    }

    fn fd_rotation_check(v: Vector3<f64>) {
        let jac = rotation_jacobian(&v);
        let h = 1e-6;
        for i in 0..3 {
            let mut vp = v;
            let mut vm = v;
            vp[i] += h;
            vm[i] -= h;
            let fd = (rotation_from_axis_angle(&vp) - rotation_from_axis_angle(&vm)) / (2.0 * h);
            assert!((fd - jac[i]).abs().max() < 1e-8, "component {i} at {v:?}");
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        fd_rotation_check(Vector3::zeros());
        fd_rotation_check(Vector3::new(1e-5, -2e-5, 3e-6));
        fd_rotation_check(Vector3::new(0.3, -1.2, 0.7));
        fd_rotation_check(Vector3::new(2.0, 1.0, -0.5));
    }

    #[test]
    fn translation_backward_matches_fd() {
        let intr = Intrinsics::new(800.0, 256, 192).unwrap();
        let pose = Pose::new(Vector3::zeros(), Vector3::new(3.0, -7.0, 9.0), Vector2::new(40.0, 170.0));
        let g = Vector3::new(0.3, -1.1, 0.7);
        let an = decode_translation_backward(&pose, &intr, &g);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = pose;
            let mut m = pose;
            p.trans_code[i] += h;
            m.trans_code[i] -= h;
            let fd = (decode_translation(&p, &intr).unwrap() - decode_translation(&m, &intr).unwrap())
                .dot(&g)
                / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn rotations_are_orthonormal(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let r = rotation_from_axis_angle(&Vector3::new(x, y, z));
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(err < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn unproject_inverts_project(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            rx in -1.0..1.0f64, ry in -1.0..1.0f64, dz in 4.0..40.0f64,
            cx in 0.0..512.0f64, cy in 0.0..512.0f64,
        ) {
            let intr = intr512();
            let pose = Pose::new(Vector3::new(rx, ry, 0.2), Vector3::new(1.5, -2.0, dz), Vector2::new(cx, cy));
            let pt = Vector3::new(x, y, z);
            let p = project(&[pt], &pose, &intr).unwrap()[0];
            let back = unproject(&p, &pose, &intr).unwrap();
            prop_assert!((back - pt).norm() <= 1e-9 * pt.norm().max(1.0));
        }
    }
}
