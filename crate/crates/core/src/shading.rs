//! Three-band spherical-harmonics irradiance shading of per-vertex albedo.
//!
//! Illumination is a 9x3 matrix stored row-major as 27 values:
//! `sh[k * 3 + c]` is the weight of basis function `k` for channel `c`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SH_COUNT: usize = 9;
pub const ILLUM_DIM: usize = 27;

pub const Y0: f64 = 0.282_094_791_773_878_14;
pub const Y1: f64 = 0.488_602_511_902_919_9;
pub const Y2_XY: f64 = 1.092_548_430_592_079_2;
pub const Y2_ZZ: f64 = 0.315_391_565_252_520_05;
pub const Y2_XX_YY: f64 = 0.546_274_215_296_039_6;

pub type ShCoeffs = [f64; ILLUM_DIM];

/// Band-0 gray light for which shading reproduces albedo exactly.
pub fn neutral_illumination() -> ShCoeffs {
    let mut sh = [0.0; ILLUM_DIM];
    sh[..3].fill(1.0 / Y0);
    sh
}

pub fn sh_basis(normal: &Vector3<f64>) -> Result<[f64; SH_COUNT]> {
    let len = normal.norm();
    if (len - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitNormal(len));
    }
    Ok(sh_basis_unchecked(normal))
}

pub fn sh_basis_unchecked(n: &Vector3<f64>) -> [f64; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Y0,
        Y1 * y,
        Y1 * z,
        Y1 * x,
        Y2_XY * x * y,
        Y2_XY * y * z,
        Y2_ZZ * (3.0 * z * z - 1.0),
        Y2_XY * x * z,
        Y2_XX_YY * (x * x - y * y),
    ]
}

/// `d Y_k / d n` for each basis function.
pub fn sh_basis_gradient(n: &Vector3<f64>) -> [Vector3<f64>; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vector3::zeros(),
        Vector3::new(0.0, Y1, 0.0),
        Vector3::new(0.0, 0.0, Y1),
        Vector3::new(Y1, 0.0, 0.0),
        Vector3::new(Y2_XY * y, Y2_XY * x, 0.0),
        Vector3::new(0.0, Y2_XY * z, Y2_XY * y),
        Vector3::new(0.0, 0.0, 6.0 * Y2_ZZ * z),
        Vector3::new(Y2_XY * z, 0.0, Y2_XY * x),
        Vector3::new(2.0 * Y2_XX_YY * x, -2.0 * Y2_XX_YY * y, 0.0),
    ]
}

fn irradiance(basis: &[f64; SH_COUNT], sh: &ShCoeffs) -> [f64; 3] {
    let mut e = [0.0; 3];
    for (k, y) in basis.iter().enumerate() {
        for (c, ec) in e.iter_mut().enumerate() {
            *ec += y * sh[k * 3 + c];
        }
    }
    e
}

/// Lambertian SH shading, clamped to `[0, 1]` per channel.
pub fn shade(albedo: &[f64; 3], normal: &Vector3<f64>, sh: &ShCoeffs) -> [f64; 3] {
    let e = irradiance(&sh_basis_unchecked(normal), sh);
    std::array::from_fn(|c| (albedo[c] * e[c]).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadeGrad {
    pub albedo: [f64; 3],
    pub normal: Vector3<f64>,
    pub sh: ShCoeffs,
}

/// Adjoint of [`shade`]; channels whose pre-clamp value leaves `[0, 1]` pass
/// no gradient.
pub fn shade_backward(
    grad_rgb: &[f64; 3],
    albedo: &[f64; 3],
    normal: &Vector3<f64>,
    sh: &ShCoeffs,
) -> ShadeGrad {
    let mut out = ShadeGrad {
        albedo: [0.0; 3],
        normal: Vector3::zeros(),
        sh: [0.0; ILLUM_DIM],
    };
    shade_backward_into(grad_rgb, albedo, normal, sh, &mut out.albedo, &mut out.normal, &mut out.sh);
    out
}

/// Accumulating form of [`shade_backward`].
pub(crate) fn shade_backward_into(
    grad_rgb: &[f64; 3],
    albedo: &[f64; 3],
    normal: &Vector3<f64>,
    sh: &ShCoeffs,
    grad_albedo: &mut [f64; 3],
    grad_normal: &mut Vector3<f64>,
    grad_sh: &mut ShCoeffs,
) {
    let basis = sh_basis_unchecked(normal);
    let e = irradiance(&basis, sh);
    let mut grad_e = [0.0; 3];
    for c in 0..3 {
        let pre = albedo[c] * e[c];
        if !(0.0..=1.0).contains(&pre) || grad_rgb[c] == 0.0 {
            continue;
        }
        grad_albedo[c] += grad_rgb[c] * e[c];
        grad_e[c] = grad_rgb[c] * albedo[c];
    }
    if grad_e == [0.0; 3] {
        return;
    }
    let dbasis = sh_basis_gradient(normal);
    for k in 0..SH_COUNT {
        let mut g_basis = 0.0;
        for c in 0..3 {
            grad_sh[k * 3 + c] += grad_e[c] * basis[k];
            g_basis += grad_e[c] * sh[k * 3 + c];
        }
        *grad_normal += dbasis[k] * g_basis;
    }
}
