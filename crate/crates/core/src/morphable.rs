//! Decoding face parameters into a posed, colored mesh, and the exact adjoint
//! of that decoding.

use std::io::{self, Write};

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::assets::{BasisBundle, ALB_DIM, EXP_DIM, ID_DIM};
use crate::camera::{self, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::shading::{self, ShCoeffs, ILLUM_DIM};

/// Widths of the coefficient blocks. The standard layout gives 258 parameters:
/// center score, 80 identity, 64 expression, 80 albedo, 3 rotation,
/// 3 translation code, 27 illumination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub id: usize,
    pub exp: usize,
    pub alb: usize,
}

impl ParamLayout {
    pub const STANDARD: ParamLayout = ParamLayout {
        id: ID_DIM,
        exp: EXP_DIM,
        alb: ALB_DIM,
    };

    pub fn of(bundle: &BasisBundle) -> Self {
        ParamLayout {
            id: bundle.id_dim(),
            exp: bundle.exp_dim(),
            alb: bundle.alb_dim(),
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.id + self.exp + self.alb + 6 + ILLUM_DIM
    }

    pub fn id_offset(&self) -> usize {
        1
    }

    pub fn exp_offset(&self) -> usize {
        1 + self.id
    }

    pub fn alb_offset(&self) -> usize {
        1 + self.id + self.exp
    }

    pub fn rot_offset(&self) -> usize {
        1 + self.id + self.exp + self.alb
    }

    pub fn trans_offset(&self) -> usize {
        self.rot_offset() + 3
    }

    pub fn illum_offset(&self) -> usize {
        self.rot_offset() + 6
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub center_score: f64,
    pub id: Vec<f64>,
    pub exp: Vec<f64>,
    pub alb: Vec<f64>,
    pub pose: Pose,
    pub illum: ShCoeffs,
}

impl FaceParams {
    /// Mean face, no rotation, `d = (0, 0, depth)`, neutral light.
    pub fn neutral(layout: ParamLayout, face_center: Vector2<f64>, depth: f64) -> Self {
        FaceParams {
            center_score: 0.0,
            id: vec![0.0; layout.id],
            exp: vec![0.0; layout.exp],
            alb: vec![0.0; layout.alb],
            pose: Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, depth), face_center),
            illum: shading::neutral_illumination(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            id: self.id.len(),
            exp: self.exp.len(),
            alb: self.alb.len(),
        }
    }

    /// Parameters in canonical order (the face center is not a parameter).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout().dim());
        v.push(self.center_score);
        v.extend_from_slice(&self.id);
        v.extend_from_slice(&self.exp);
        v.extend_from_slice(&self.alb);
        v.extend(self.pose.rot.iter());
        v.extend(self.pose.trans_code.iter());
        v.extend_from_slice(&self.illum);
        v
    }

    pub fn from_flat(layout: ParamLayout, flat: &[f64], face_center: Vector2<f64>) -> Result<Self> {
        if flat.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                field: "flat parameters".into(),
                expected: layout.dim(),
                got: flat.len(),
            });
        }
        let r = layout.rot_offset();
        let t = layout.trans_offset();
        Ok(FaceParams {
            center_score: flat[0],
            id: flat[layout.id_offset()..layout.exp_offset()].to_vec(),
            exp: flat[layout.exp_offset()..layout.alb_offset()].to_vec(),
            alb: flat[layout.alb_offset()..r].to_vec(),
            pose: Pose::new(
                Vector3::new(flat[r], flat[r + 1], flat[r + 2]),
                Vector3::new(flat[t], flat[t + 1], flat[t + 2]),
                face_center,
            ),
            illum: flat[layout.illum_offset()..].try_into().unwrap(),
        })
    }

    fn check_layout(&self, bundle: &BasisBundle) -> Result<()> {
        for (field, expected, got) in [
            ("id", bundle.id_dim(), self.id.len()),
            ("exp", bundle.exp_dim(), self.exp.len()),
            ("alb", bundle.alb_dim(), self.alb.len()),
        ] {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    field: field.into(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }
}

/// Gradient with respect to one face's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub center_score: f64,
    pub id: Vec<f64>,
    pub exp: Vec<f64>,
    pub alb: Vec<f64>,
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
    pub illum: ShCoeffs,
}

impl ParamGrad {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParamGrad {
            center_score: 0.0,
            id: vec![0.0; layout.id],
            exp: vec![0.0; layout.exp],
            alb: vec![0.0; layout.alb],
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
            illum: [0.0; ILLUM_DIM],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = vec![self.center_score];
        v.extend_from_slice(&self.id);
        v.extend_from_slice(&self.exp);
        v.extend_from_slice(&self.alb);
        v.extend(self.rot.iter());
        v.extend(self.trans.iter());
        v.extend_from_slice(&self.illum);
        v
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        self.center_score += other.center_score;
        add_slice(&mut self.id, &other.id);
        add_slice(&mut self.exp, &other.exp);
        add_slice(&mut self.alb, &other.alb);
        self.rot += other.rot;
        self.trans += other.trans;
        add_slice(&mut self.illum, &other.illum);
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|&g| g == 0.0)
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFace {
    pub shape_model: Vec<Vector3<f64>>,
    pub shape_cam: Vec<Vector3<f64>>,
    /// Clamped to `[0, 1]`.
    pub albedo: Vec<[f64; 3]>,
    /// Unit vertex normals in camera space.
    pub normals: Vec<Vector3<f64>>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    albedo_raw: Vec<[f64; 3]>,
    // Unnormalized area-weighted normal sums.
    normal_sums: Vec<Vector3<f64>>,
}

/// Gradients with respect to the fields of a [`DecodedFace`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGrad {
    pub shape_cam: Vec<Vector3<f64>>,
    pub albedo: Vec<[f64; 3]>,
    pub normals: Vec<Vector3<f64>>,
}

impl DecodedGrad {
    pub fn zeros(n: usize) -> Self {
        DecodedGrad {
            shape_cam: vec![Vector3::zeros(); n],
            albedo: vec![[0.0; 3]; n],
            normals: vec![Vector3::zeros(); n],
        }
    }
}

fn planar_to_points(planar: &[f64], n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|v| Vector3::new(planar[v], planar[n + v], planar[2 * n + v]))
        .collect()
}

pub fn decode(params: &FaceParams, bundle: &BasisBundle, intr: &Intrinsics) -> Result<DecodedFace> {
    params.check_layout(bundle)?;
    let n = bundle.vertex_count;

    let mut shape: Vec<f64> = bundle.mean_shape.iter().map(|&x| x as f64).collect();
    bundle.id_basis.accumulate(&params.id, &mut shape);
    bundle.exp_basis.accumulate(&params.exp, &mut shape);
    let shape_model = planar_to_points(&shape, n);

    let mut alb: Vec<f64> = bundle.mean_albedo.iter().map(|&x| x as f64).collect();
    bundle.alb_basis.accumulate(&params.alb, &mut alb);
    let albedo_raw: Vec<[f64; 3]> = (0..n)
        .map(|v| [alb[v], alb[n + v], alb[2 * n + v]])
        .collect();
    let albedo = albedo_raw
        .iter()
        .map(|a| a.map(|c| c.clamp(0.0, 1.0)))
        .collect();

    let rotation = camera::rotation_from_axis_angle(&params.pose.rot);
    let translation = camera::decode_translation(&params.pose, intr)?;
    let shape_cam: Vec<Vector3<f64>> = shape_model
        .iter()
        .map(|x| rotation * x + translation)
        .collect();

    let mut normal_sums = vec![Vector3::zeros(); n];
    for t in &bundle.triangles {
        let [a, b, c] = t.map(|i| i as usize);
        let m = (shape_cam[b] - shape_cam[a]).cross(&(shape_cam[c] - shape_cam[a]));
        normal_sums[a] += m;
        normal_sums[b] += m;
        normal_sums[c] += m;
    }
    let normals = normal_sums
        .iter()
        .map(|m| {
            let len = m.norm();
            if len > 0.0 {
                m / len
            } else {
                Vector3::new(0.0, 0.0, -1.0)
            }
        })
        .collect();

    Ok(DecodedFace {
        shape_model,
        shape_cam,
        albedo,
        normals,
        rotation,
        translation,
        albedo_raw,
        normal_sums,
    })
}

/// Exact adjoint of [`decode`]: maps gradients on camera-space vertices,
/// clamped albedo and normals back to the parameters.
pub fn decode_backward(
    grad: &DecodedGrad,
    params: &FaceParams,
    face: &DecodedFace,
    bundle: &BasisBundle,
    intr: &Intrinsics,
) -> Result<ParamGrad> {
    params.check_layout(bundle)?;
    let n = bundle.vertex_count;
    for (field, got) in [
        ("shape_cam", grad.shape_cam.len()),
        ("albedo", grad.albedo.len()),
        ("normals", grad.normals.len()),
    ] {
        if got != n {
            return Err(Error::DimensionMismatch {
                field: field.into(),
                expected: n,
                got,
            });
        }
    }
    let mut out = ParamGrad::zeros(params.layout());

    // Normals: n = m / |m|, m = sum of incident (b - a) x (c - a).
    let mut g_cam = grad.shape_cam.clone();
    let g_sum: Vec<Vector3<f64>> = face
        .normal_sums
        .iter()
        .zip(&face.normals)
        .zip(&grad.normals)
        .map(|((m, nrm), g)| {
            let len = m.norm();
            if len > 0.0 {
                (g - nrm * nrm.dot(g)) / len
            } else {
                Vector3::zeros()
            }
        })
        .collect();
    for t in &bundle.triangles {
        let [a, b, c] = t.map(|i| i as usize);
        let gm = g_sum[a] + g_sum[b] + g_sum[c];
        if gm == Vector3::zeros() {
            continue;
        }
        let (pa, pb, pc) = (face.shape_cam[a], face.shape_cam[b], face.shape_cam[c]);
        let e1 = pb - pa;
        let e2 = pc - pa;
        // d/de1 <gm, e1 x e2> = e2 x gm ; d/de2 = gm x e1
        let ge1 = e2.cross(&gm);
        let ge2 = gm.cross(&e1);
        g_cam[b] += ge1;
        g_cam[c] += ge2;
        g_cam[a] -= ge1 + ge2;
    }

    // Rigid transform.
    let mut g_rot_mat = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    let rt = face.rotation.transpose();
    let mut g_model = vec![0.0; 3 * n];
    for (v, g) in g_cam.iter().enumerate() {
        g_t += g;
        g_rot_mat += g * face.shape_model[v].transpose();
        let gm = rt * g;
        g_model[v] = gm.x;
        g_model[n + v] = gm.y;
        g_model[2 * n + v] = gm.z;
    }
    let jac = camera::rotation_jacobian(&params.pose.rot);
    for i in 0..3 {
        out.rot[i] = g_rot_mat.component_mul(&jac[i]).sum();
    }
    out.trans = camera::decode_translation_backward(&params.pose, intr, &g_t);
    out.id = bundle.id_basis.transpose_mul(&g_model);
    out.exp = bundle.exp_basis.transpose_mul(&g_model);

    let mut g_alb = vec![0.0; 3 * n];
    for (v, (g, raw)) in grad.albedo.iter().zip(&face.albedo_raw).enumerate() {
        for c in 0..3 {
            if (0.0..=1.0).contains(&raw[c]) {
                g_alb[c * n + v] = g[c];
            }
        }
    }
    out.alb = bundle.alb_basis.transpose_mul(&g_alb);
    Ok(out)
}

/// Pixel positions of the 68 landmark vertices.
pub fn project_landmarks(
    face: &DecodedFace,
    bundle: &BasisBundle,
    intr: &Intrinsics,
) -> Result<Vec<Vector2<f64>>> {
    let pts: Vec<Vector3<f64>> = bundle
        .landmark_indices
        .iter()
        .map(|&i| face.shape_cam[i as usize])
        .collect();
    Ok(camera::project_camera_points(&pts, intr)?
        .into_iter()
        .map(|p| p.uv)
        .collect())
}

/// Wavefront OBJ with per-vertex colors as `v x y z r g b`.
pub fn write_obj<W: Write>(
    mut w: W,
    positions: &[Vector3<f64>],
    colors: &[[f64; 3]],
    triangles: &[[u32; 3]],
) -> io::Result<()> {
    for (p, c) in positions.iter().zip(colors) {
        writeln!(w, "v {} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2])?;
    }
    for t in triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::synth_bundle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(1160.0, 256, 256).unwrap()
    }

    fn random_params(bundle: &BasisBundle, rng: &mut ChaCha8Rng) -> FaceParams {
        let layout = ParamLayout::of(bundle);
        let mut p = FaceParams::neutral(layout, Vector2::new(120.0, 140.0), 14.0);
        p.id.iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.5));
        p.exp.iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.5));
        p.alb.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        p.pose.rot = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.3..0.3),
        );
        p.pose.trans_code = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(10.0..20.0));
        p
    }

    #[test]
    fn mean_face_decodes_to_mean() {
        let bundle = synth_bundle(1, 64).unwrap();
        let p = FaceParams::neutral(ParamLayout::of(&bundle), intr().principal_point(), 10.0);
        let face = decode(&p, &bundle, &intr()).unwrap();
        for v in 0..bundle.vertex_count {
            assert_eq!(face.shape_model[v], bundle.mean_vertex(v));
            for c in 0..3 {
                assert_eq!(face.albedo[v][c], bundle.mean_albedo[c * 64 + v] as f64);
            }
            assert!((face.normals[v].norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_identity_coefficient_adds_first_column() {
        let bundle = synth_bundle(1, 64).unwrap();
        let mut p = FaceParams::neutral(ParamLayout::of(&bundle), intr().principal_point(), 10.0);
        p.id[0] = 1.0;
        let face = decode(&p, &bundle, &intr()).unwrap();
        let col = bundle.id_basis.column(0);
        for v in 0..64 {
            let d = face.shape_model[v] - bundle.mean_vertex(v);
            for c in 0..3 {
                assert!((d[c] - col[c * 64 + v] as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearity_in_coefficients() {
        let bundle = synth_bundle(2, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = ParamLayout::of(&bundle);
        let base = FaceParams::neutral(layout, intr().principal_point(), 10.0);
        let mut one = base.clone();
        one.id.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let mut two = base.clone();
        two.id = one.id.iter().map(|x| 2.0 * x).collect();
        let f0 = decode(&base, &bundle, &intr()).unwrap();
        let f1 = decode(&one, &bundle, &intr()).unwrap();
        let f2 = decode(&two, &bundle, &intr()).unwrap();
        for v in 0..64 {
            let lhs = f2.shape_model[v] - f0.shape_model[v];
            let rhs = (f1.shape_model[v] - f0.shape_model[v]) * 2.0;
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn rigid_transform_preserves_distances() {
        let bundle = synth_bundle(2, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&bundle, &mut rng);
        let face = decode(&p, &bundle, &intr()).unwrap();
        for (a, b) in [(0, 5), (3, 60), (17, 42)] {
            let dm = (face.shape_model[a] - face.shape_model[b]).norm();
            let dc = (face.shape_cam[a] - face.shape_cam[b]).norm();
            assert!((dm - dc).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let bundle = synth_bundle(2, 64).unwrap();
        let mut p = FaceParams::neutral(ParamLayout::of(&bundle), intr().principal_point(), 10.0);
        p.exp.pop();
        assert!(matches!(
            decode(&p, &bundle, &intr()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let bundle = synth_bundle(2, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&bundle, &mut rng);
        let face = decode(&p, &bundle, &intr()).unwrap();
        let g = decode_backward(&DecodedGrad::zeros(64), &p, &face, &bundle, &intr()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn saturated_albedo_passes_no_gradient() {
        let bundle = synth_bundle(2, 64).unwrap();
        let mut p = FaceParams::neutral(ParamLayout::of(&bundle), intr().principal_point(), 10.0);
        p.alb[0] = 1e4; // drives many entries out of range
        let face = decode(&p, &bundle, &intr()).unwrap();
        let mut g = DecodedGrad::zeros(64);
        let mut saturated = 0;
        for v in 0..64 {
            for c in 0..3 {
                if !(0.0..=1.0).contains(&face.albedo_raw[v][c]) {
                    g.albedo[v][c] = 1.0;
                    saturated += 1;
                }
            }
        }
        assert!(saturated > 0);
        let out = decode_backward(&g, &p, &face, &bundle, &intr()).unwrap();
        assert!(out.alb.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_gradient_is_basis_transpose() {
        let bundle = synth_bundle(4, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&bundle, &mut rng);
        p.pose.rot = Vector3::zeros();
        let face = decode(&p, &bundle, &intr()).unwrap();
        let mut g = DecodedGrad::zeros(64);
        for v in 0..64 {
            g.shape_cam[v] = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let out = decode_backward(&g, &p, &face, &bundle, &intr()).unwrap();
        let mut planar = vec![0.0; 192];
        for v in 0..64 {
            for c in 0..3 {
                planar[c * 64 + v] = g.shape_cam[v][c];
            }
        }
        let expected = bundle.id_basis.transpose_mul(&planar);
        for (a, b) in out.id.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn obj_export_format() {
        let pos = [Vector3::new(0.0, 1.0, 2.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 1.0)];
        let col = [[1.0, 0.5, 0.0], [0.0, 0.0, 0.0], [0.25, 0.25, 0.25]];
        let mut out = Vec::new();
        write_obj(&mut out, &pos, &col, &[[0, 1, 2]]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "v 0 1 2 1 0.5 0\nv 1 0 0 0 0 0\nv 0 0 1 0.25 0.25 0.25\nf 1 2 3\n"
        );
    }
}
