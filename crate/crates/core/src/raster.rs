//! Deterministic software rasterizer with a defined gradient contract.
//!
//! Forward: z-buffered triangle fill with perspective-correct barycentric
//! color interpolation, top-left fill rule, and back-face culling. Depth ties
//! resolve to the smaller `(face, triangle)` index, so every pixel's winner is
//! a pure function of the input regardless of how rows are scheduled.
//!
//! Backward: color gradients are the exact adjoint of the interpolation.
//! Position and depth gradients differentiate the perspective-correct weights
//! of the covering triangle with visibility held fixed; silhouettes and
//! occlusion boundaries carry no gradient.

use rayon::prelude::*;

use crate::assets::BasisBundle;
use crate::camera::{self, Intrinsics};
use crate::error::{Error, Result};
use crate::fitter::Scene;
use crate::imaging::{Image, Mask};
use crate::morphable::{self, DecodedFace};
use crate::shading;

/// Rows per parallel work unit. Fixed so reduction order never depends on
/// the thread count.
const BAND_ROWS: usize = 16;

/// One face ready for rasterization: projected vertices, camera depths, and
/// shaded vertex colors.
#[derive(Debug, Clone)]
pub struct ScreenMesh<'a> {
    pub positions: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub triangles: &'a [[u32; 3]],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB.
    pub rgb: Vec<f64>,
    pub mask: Vec<bool>,
    /// Camera depth, `+inf` where empty.
    pub depth: Vec<f64>,
    /// `(face index, triangle index)` of the visible fragment.
    pub tri_id: Vec<Option<(u32, u32)>>,
    /// Perspective-correct barycentric weights of the visible fragment.
    pub bary: Vec<[f64; 3]>,
}

impl RenderOutput {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        RenderOutput {
            width,
            height,
            rgb: vec![0.0; 3 * n],
            mask: vec![false; n],
            depth: vec![f64::INFINITY; n],
            tri_id: vec![None; n],
            bary: vec![[0.0; 3]; n],
        }
    }

    pub fn image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }

    pub fn coverage(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.mask.clone(),
        }
    }

    /// Depth normalized to 8 bits over the covered range (far = dark), for debugging.
    pub fn depth_pgm_bytes(&self) -> Vec<u8> {
        let finite = self.depth.iter().copied().filter(|d| d.is_finite());
        let (lo, hi) = finite.fold((f64::MAX, f64::MIN), |(lo, hi), d| (lo.min(d), hi.max(d)));
        self.depth
            .iter()
            .map(|&d| {
                if !d.is_finite() {
                    0
                } else if hi > lo {
                    (255.0 - 200.0 * (d - lo) / (hi - lo)).round() as u8
                } else {
                    255
                }
            })
            .collect()
    }
}

/// Signed double area of `(a, b, c)`; positive when counter-clockwise in a
/// y-up frame.
#[inline]
fn edge(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Adds `g * dE(a, b, c)/d{a, b, c}` to the given slots.
#[inline]
fn edge_backward(
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    g: f64,
    ga: &mut [f64; 2],
    gb: &mut [f64; 2],
    gc: Option<&mut [f64; 2]>,
) {
    ga[0] += g * (b[1] - c[1]);
    ga[1] += g * (c[0] - b[0]);
    gb[0] += g * (c[1] - a[1]);
    gb[1] += g * (a[0] - c[0]);
    if let Some(gc) = gc {
        gc[0] += g * (a[1] - b[1]);
        gc[1] += g * (b[0] - a[0]);
    }
}

#[derive(Debug, Clone)]
struct TriSetup {
    face: u32,
    tri: u32,
    p: [[f64; 2]; 3],
    z: [f64; 3],
    area: f64,
    top_left: [bool; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Edge functions `e_k` (edge opposite vertex `k`) at pixel center `x`.
#[inline]
fn edge_values(p: &[[f64; 2]; 3], x: [f64; 2]) -> [f64; 3] {
    [edge(p[1], p[2], x), edge(p[2], p[0], x), edge(p[0], p[1], x)]
}

fn setup_triangles(meshes: &[ScreenMesh], width: u32, height: u32) -> Vec<TriSetup> {
    let mut out = Vec::new();
    for (f, mesh) in meshes.iter().enumerate() {
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let idx = tri.map(|i| i as usize);
            let p = idx.map(|i| mesh.positions[i]);
            let z = idx.map(|i| mesh.depths[i]);
            if z.iter().any(|&d| !(d > 0.0 && d.is_finite()))
                || p.iter().flatten().any(|v| !v.is_finite())
            {
                continue;
            }
            let area = edge(p[0], p[1], p[2]);
            // Front faces wind clockwise on the y-down screen; cull the rest.
            if !(area < 0.0) {
                continue;
            }
            let min_x = p.iter().map(|q| q[0]).fold(f64::MAX, f64::min);
            let max_x = p.iter().map(|q| q[0]).fold(f64::MIN, f64::max);
            let min_y = p.iter().map(|q| q[1]).fold(f64::MAX, f64::min);
            let max_y = p.iter().map(|q| q[1]).fold(f64::MIN, f64::max);
            let x0 = (min_x - 0.5).ceil().max(0.0);
            let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
            let y0 = (min_y - 0.5).ceil().max(0.0);
            let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let top_left = std::array::from_fn(|k| {
                let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
                // Inward normal of the edge for clockwise winding.
                let gx = b[1] - a[1];
                let gy = -(b[0] - a[0]);
                gx > 0.0 || (gx == 0.0 && gy > 0.0)
            });
            out.push(TriSetup {
                face: f as u32,
                tri: t as u32,
                p,
                z,
                area,
                top_left,
                x0: x0 as usize,
                x1: x1 as usize,
                y0: y0 as usize,
                y1: y1 as usize,
            });
        }
    }
    out
}

#[inline]
fn covers(tri: &TriSetup, e: &[f64; 3]) -> bool {
    (0..3).all(|k| {
        // Interior has e_k < 0 for clockwise triangles.
        let v = -e[k];
        v > 0.0 || (v == 0.0 && tri.top_left[k])
    })
}

/// Screen-space and perspective-correct weights at a covered pixel.
#[inline]
fn weights(tri: &TriSetup, e: &[f64; 3]) -> ([f64; 3], [f64; 3], f64) {
    let lambda = e.map(|v| v / tri.area);
    let q: [f64; 3] = std::array::from_fn(|k| lambda[k] / tri.z[k]);
    let sum = q[0] + q[1] + q[2];
    (lambda, q.map(|v| v / sum), sum)
}

#[inline]
fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

pub fn rasterize(meshes: &[ScreenMesh], intr: &Intrinsics) -> RenderOutput {
    let (width, height) = (intr.width, intr.height);
    let w = width as usize;
    let h = height as usize;
    let tris = setup_triangles(meshes, width, height);

    let mut out = RenderOutput::empty(width, height);
    out.rgb
        .par_chunks_mut(3 * BAND_ROWS * w)
        .zip(out.mask.par_chunks_mut(BAND_ROWS * w))
        .zip(out.depth.par_chunks_mut(BAND_ROWS * w))
        .zip(out.tri_id.par_chunks_mut(BAND_ROWS * w))
        .zip(out.bary.par_chunks_mut(BAND_ROWS * w))
        .enumerate()
        .for_each(|(b, ((((rgb, mask), depth_buf), tri_id), bary_buf))| {
            let y0 = b * BAND_ROWS;
            let y1 = (y0 + BAND_ROWS).min(h);
            for tri in tris.iter().filter(|t| t.y1 >= y0 && t.y0 < y1) {
                for y in tri.y0.max(y0)..=tri.y1.min(y1 - 1) {
                    for x in tri.x0..=tri.x1 {
                        let e = edge_values(&tri.p, pixel_center(x, y));
                        if !covers(tri, &e) {
                            continue;
                        }
                        let (_, bary, sum) = weights(tri, &e);
                        let depth = 1.0 / sum;
                        let i = (y - y0) * w + x;
                        let id = (tri.face, tri.tri);
                        let wins = match tri_id[i] {
                            None => true,
                            Some(cur) => depth < depth_buf[i] || (depth == depth_buf[i] && id < cur),
                        };
                        if wins {
                            depth_buf[i] = depth;
                            tri_id[i] = Some(id);
                            bary_buf[i] = bary;
                            mask[i] = true;
                        }
                    }
                }
            }
            for (i, id) in tri_id.iter().enumerate() {
                if let Some((f, t)) = *id {
                    let mesh = &meshes[f as usize];
                    let tri = mesh.triangles[t as usize];
                    let b = bary_buf[i];
                    for c in 0..3 {
                        rgb[3 * i + c] = (0..3).map(|k| b[k] * mesh.colors[tri[k] as usize][c]).sum();
                    }
                }
            }
        });
    out
}

/// Gradients with respect to one [`ScreenMesh`]'s per-vertex inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrad {
    pub colors: Vec<[f64; 3]>,
    pub positions: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
}

impl MeshGrad {
    pub fn zeros(n: usize) -> Self {
        MeshGrad {
            colors: vec![[0.0; 3]; n],
            positions: vec![[0.0; 2]; n],
            depths: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy)]
struct PixelGrad {
    face: u32,
    verts: [u32; 3],
    colors: [[f64; 3]; 3],
    positions: [[f64; 2]; 3],
    depths: [f64; 3],
}

fn check_buffers(grad_rgb: &[f64], out: &RenderOutput, meshes: &[ScreenMesh]) -> Result<()> {
    let n = out.width as usize * out.height as usize;
    if grad_rgb.len() != 3 * n || out.tri_id.len() != n {
        return Err(Error::BufferMismatch(format!(
            "gradient has {} entries for {} pixels",
            grad_rgb.len(),
            n
        )));
    }
    for (f, t) in out.tri_id.iter().flatten() {
        let ok = meshes
            .get(*f as usize)
            .is_some_and(|m| (*t as usize) < m.triangles.len());
        if !ok {
            return Err(Error::BufferMismatch(format!(
                "pixel references face {f} triangle {t}"
            )));
        }
    }
    Ok(())
}

pub fn rasterize_backward(
    grad_rgb: &[f64],
    out: &RenderOutput,
    meshes: &[ScreenMesh],
) -> Result<Vec<MeshGrad>> {
    check_buffers(grad_rgb, out, meshes)?;
    let w = out.width as usize;
    let h = out.height as usize;

    let per_pixel: Vec<Vec<PixelGrad>> = (0..h)
        .step_by(BAND_ROWS)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&y0| {
            let y1 = (y0 + BAND_ROWS).min(h);
            let mut band = Vec::new();
            for y in y0..y1 {
                for x in 0..w {
                    band.extend(pixel_backward(grad_rgb, out, meshes, y * w + x, x, y));
                }
            }
            band
        })
        .collect();

    let mut grads: Vec<MeshGrad> = meshes.iter().map(|m| MeshGrad::zeros(m.colors.len())).collect();
    for px in per_pixel.iter().flatten() {
        let g = &mut grads[px.face as usize];
        for k in 0..3 {
            let v = px.verts[k] as usize;
            for c in 0..3 {
                g.colors[v][c] += px.colors[k][c];
            }
            g.positions[v][0] += px.positions[k][0];
            g.positions[v][1] += px.positions[k][1];
            g.depths[v] += px.depths[k];
        }
    }
    Ok(grads)
}

fn pixel_backward(
    grad_rgb: &[f64],
    out: &RenderOutput,
    meshes: &[ScreenMesh],
    i: usize,
    x: usize,
    y: usize,
) -> Option<PixelGrad> {
    let (f, t) = out.tri_id[i]?;
    let g = [grad_rgb[3 * i], grad_rgb[3 * i + 1], grad_rgb[3 * i + 2]];
    if g == [0.0; 3] {
        return None;
    }
    let mesh = &meshes[f as usize];
    let verts = mesh.triangles[t as usize];
    let idx = verts.map(|v| v as usize);
    let p = idx.map(|v| mesh.positions[v]);
    let z = idx.map(|v| mesh.depths[v]);
    let col = idx.map(|v| mesh.colors[v]);
    let area = edge(p[0], p[1], p[2]);
    let e = edge_values(&p, pixel_center(x, y));
    let lambda = e.map(|v| v / area);
    let q: [f64; 3] = std::array::from_fn(|k| lambda[k] / z[k]);
    let sum = q[0] + q[1] + q[2];
    let b = q.map(|v| v / sum);

    let mut px = PixelGrad {
        face: f,
        verts,
        colors: [[0.0; 3]; 3],
        positions: [[0.0; 2]; 3],
        depths: [0.0; 3],
    };
    let mut g_b = [0.0; 3];
    for k in 0..3 {
        for c in 0..3 {
            px.colors[k][c] = b[k] * g[c];
            g_b[k] += g[c] * col[k][c];
        }
    }
    let mean = b[0] * g_b[0] + b[1] * g_b[1] + b[2] * g_b[2];
    let g_q = g_b.map(|gb| (gb - mean) / sum);
    let g_lambda: [f64; 3] = std::array::from_fn(|k| g_q[k] / z[k]);
    for k in 0..3 {
        px.depths[k] = -g_q[k] * lambda[k] / (z[k] * z[k]);
    }
    let g_e = g_lambda.map(|gl| gl / area);
    let g_area = -(0..3).map(|k| g_lambda[k] * lambda[k]).sum::<f64>() / area;

    let [mut g0, mut g1, mut g2] = [[0.0; 2]; 3];
    let xc = pixel_center(x, y);
    edge_backward(p[1], p[2], xc, g_e[0], &mut g1, &mut g2, None);
    edge_backward(p[2], p[0], xc, g_e[1], &mut g2, &mut g0, None);
    edge_backward(p[0], p[1], xc, g_e[2], &mut g0, &mut g1, None);
    edge_backward(p[0], p[1], p[2], g_area, &mut g0, &mut g1, Some(&mut g2));
    px.positions = [g0, g1, g2];
    Some(px)
}

/// Pixels whose center lies at least `margin` pixels inside its covering
/// triangle and whose neighborhood of that radius is covered by the same face.
pub fn interior_mask(out: &RenderOutput, meshes: &[ScreenMesh], margin: f64) -> Mask {
    let w = out.width as usize;
    let h = out.height as usize;
    let r = margin.ceil() as isize;
    let mut mask = Mask::new(out.width, out.height, false);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some((f, t)) = out.tri_id[i] else { continue };
            let mesh = &meshes[f as usize];
            let p = mesh.triangles[t as usize].map(|v| mesh.positions[v as usize]);
            let e = edge_values(&p, pixel_center(x, y));
            let far_from_edges = (0..3).all(|k| {
                let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                e[k].abs() / len >= margin
            });
            if !far_from_edges {
                continue;
            }
            let same_face = (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        return false;
                    }
                    out.tri_id[ny as usize * w + nx as usize].is_some_and(|(g, _)| g == f)
                })
            });
            mask.data[i] = same_face;
        }
    }
    mask
}

/// Per-face intermediate values of a scene render, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FaceRender {
    pub decoded: DecodedFace,
    pub colors: Vec<[f64; 3]>,
    pub screen: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SceneRender {
    pub output: RenderOutput,
    pub faces: Vec<FaceRender>,
}

impl SceneRender {
    pub fn meshes<'a>(&self, bundle: &'a BasisBundle) -> Vec<ScreenMesh<'a>> {
        self.faces
            .iter()
            .map(|f| ScreenMesh {
                positions: f.screen.clone(),
                depths: f.depths.clone(),
                colors: f.colors.clone(),
                triangles: &bundle.triangles,
            })
            .collect()
    }
}

/// Decode, shade and project every face of the scene (in parallel, order
/// preserved).
pub fn prepare_faces(scene: &Scene, bundle: &BasisBundle) -> Result<Vec<FaceRender>> {
    scene
        .faces
        .par_iter()
        .map(|params| {
            let decoded = morphable::decode(params, bundle, &scene.intr)?;
            let colors = decoded
                .albedo
                .iter()
                .zip(&decoded.normals)
                .map(|(a, n)| shading::shade(a, n, &params.illum))
                .collect();
            let projected = camera::project_camera_points(&decoded.shape_cam, &scene.intr)?;
            Ok(FaceRender {
                colors,
                screen: projected.iter().map(|p| [p.uv.x, p.uv.y]).collect(),
                depths: projected.iter().map(|p| p.depth).collect(),
                decoded,
            })
        })
        .collect()
}

pub fn render_scene_full(scene: &Scene, bundle: &BasisBundle) -> Result<SceneRender> {
    scene.intr.validate()?;
    let faces = prepare_faces(scene, bundle)?;
    let render = SceneRender {
        output: RenderOutput::empty(scene.intr.width, scene.intr.height),
        faces,
    };
    let meshes = render.meshes(bundle);
    let output = rasterize(&meshes, &scene.intr);
    Ok(SceneRender { output, ..render })
}

/// Decode, shade, project and rasterize every face with the shared camera.
pub fn render_scene(scene: &Scene, bundle: &BasisBundle) -> Result<RenderOutput> {
    Ok(render_scene_full(scene, bundle)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    static ONE_TRI: [[u32; 3]; 1] = [[0, 1, 2]];

    fn intr(w: u32, h: u32) -> Intrinsics {
        Intrinsics {
            focal: 100.0,
            width: w,
            height: h,
        }
    }

    fn tri_mesh(p: [[f64; 2]; 3], z: [f64; 3], c: [[f64; 3]; 3]) -> ScreenMesh<'static> {
        ScreenMesh {
            positions: p.to_vec(),
            depths: z.to_vec(),
            colors: c.to_vec(),
            triangles: &ONE_TRI,
        }
    }

    const RGB: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn centroid_pixel_is_equal_mix() {
        // Clockwise on screen, centroid exactly at pixel center (31.5, 31.5).
        let p = [[31.5, -59.5], [31.5 + 78.0, 31.5 + 45.5], [31.5 - 78.0, 31.5 + 45.5]];
        let p = [p[0], p[2], p[1]];
        let m = tri_mesh(p, [4.0; 3], RGB);
        let out = rasterize(&[m], &intr(64, 64));
        let i = 31 * 64 + 31;
        assert!(out.mask[i]);
        for c in 0..3 {
            assert!((out.rgb[3 * i + c] - 1.0 / 3.0).abs() < 1e-6, "{:?}", &out.rgb[3 * i..3 * i + 3]);
        }
    }

    #[test]
    fn counter_clockwise_triangles_are_culled() {
        let p = [[0.0, 0.0], [64.0, 0.0], [0.0, 64.0]];
        let front = rasterize(&[tri_mesh([p[0], p[2], p[1]], [3.0; 3], RGB)], &intr(32, 32));
        let back = rasterize(&[tri_mesh(p, [3.0; 3], RGB)], &intr(32, 32));
        assert!(front.mask.iter().any(|&m| m));
        assert!(back.mask.iter().all(|&m| !m));
    }

    #[test]
    fn empty_input_renders_black() {
        let out = rasterize(&[], &intr(32, 32));
        assert!(out.mask.iter().all(|&m| !m));
        assert!(out.rgb.iter().all(|&v| v == 0.0));
        assert!(out.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn occluded_face_changes_nothing() {
        let front = tri_mesh([[2.0, 2.0], [2.0, 60.0], [60.0, 2.0]], [2.0; 3], RGB);
        let behind = tri_mesh([[10.0, 10.0], [10.0, 30.0], [30.0, 10.0]], [5.0; 3], [[0.5; 3]; 3]);
        let alone = rasterize(&[front.clone()], &intr(64, 64));
        let both = rasterize(&[front, behind], &intr(64, 64));
        assert_eq!(alone, both);
    }

    #[test]
    fn shared_edge_pixels_are_filled_exactly_once() {
        // A square split along its diagonal; the diagonal passes through pixel centers.
        static QUAD: [[u32; 3]; 2] = [[0, 2, 1], [0, 3, 2]];
        let m = ScreenMesh {
            positions: vec![[0.5, 0.5], [20.5, 0.5], [20.5, 20.5], [0.5, 20.5]],
            depths: vec![3.0; 4],
            colors: vec![[1.0; 3]; 4],
            triangles: &QUAD,
        };
        let out = rasterize(&[m.clone()], &intr(32, 32));
        let single = |t: u32| {
            let mm = ScreenMesh {
                triangles: &QUAD[t as usize..t as usize + 1],
                ..m.clone()
            };
            rasterize(&[mm], &intr(32, 32)).mask
        };
        let (a, b) = (single(0), single(1));
        for i in 0..a.len() {
            assert!(!(a[i] && b[i]), "pixel {i} drawn twice");
            assert_eq!(out.mask[i], a[i] || b[i]);
        }
    }

    #[test]
    fn depth_tie_prefers_lower_face_index() {
        let p = [[2.0, 2.0], [2.0, 30.0], [30.0, 2.0]];
        let a = tri_mesh(p, [4.0; 3], [[1.0, 0.0, 0.0]; 3]);
        let b = tri_mesh(p, [4.0; 3], [[0.0, 1.0, 0.0]; 3]);
        let out = rasterize(&[a.clone(), b.clone()], &intr(32, 32));
        let i = 5 * 32 + 5;
        assert_eq!(out.tri_id[i], Some((0, 0)));
        let out = rasterize(&[b, a], &intr(32, 32));
        assert_eq!(out.tri_id[i], Some((0, 0)));
        assert_eq!(out.rgb[3 * i + 1], 1.0);
    }

    #[test]
    fn barycentrics_are_a_partition_of_unity() {
        let m = tri_mesh([[1.0, 3.0], [7.0, 60.0], [61.0, 10.0]], [2.0, 9.0, 4.0], RGB);
        let out = rasterize(&[m], &intr(64, 64));
        for (i, b) in out.bary.iter().enumerate() {
            if out.mask[i] {
                assert!(b.iter().all(|&v| v >= -1e-9));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(out.depth[i].is_finite());
            } else {
                assert!(out.tri_id[i].is_none() && out.depth[i].is_infinite());
            }
        }
    }

    fn random_mesh(rng: &mut ChaCha8Rng) -> ScreenMesh<'static> {
        let p = [
            [rng.random_range(2.0..20.0), rng.random_range(2.0..20.0)],
            [rng.random_range(2.0..20.0), rng.random_range(44.0..62.0)],
            [rng.random_range(44.0..62.0), rng.random_range(2.0..20.0)],
        ];
        let z = [rng.random_range(2.0..6.0), rng.random_range(2.0..6.0), rng.random_range(2.0..6.0)];
        let c: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0)));
        tri_mesh(p, z, c)
    }

    fn weighted_sum(out: &RenderOutput, g: &[f64]) -> f64 {
        out.rgb.iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn color_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_mesh(&mut rng);
        let it = intr(64, 64);
        let out = rasterize(&[m.clone()], &it);
        let g: Vec<f64> = (0..out.rgb.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an = rasterize_backward(&g, &out, &[m.clone()]).unwrap();
        let h = 1e-4;
        for v in 0..3 {
            for c in 0..3 {
                let (mut mp, mut mm) = (m.clone(), m.clone());
                mp.colors[v][c] += h;
                mm.colors[v][c] -= h;
                let fd = (weighted_sum(&rasterize(&[mp], &it), &g)
                    - weighted_sum(&rasterize(&[mm], &it), &g))
                    / (2.0 * h);
                let a = an[0].colors[v][c];
                assert!((fd - a).abs() / a.abs().max(1e-8) < 1e-5, "{fd} vs {a}");
            }
        }
    }

    #[test]
    fn position_gradient_matches_fd_on_interior_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let it = intr(64, 64);
        for _ in 0..10 {
            let m = random_mesh(&mut rng);
            let out = rasterize(&[m.clone()], &it);
            let interior = interior_mask(&out, &[m.clone()], 2.0);
            let g: Vec<f64> = (0..out.rgb.len())
                .map(|i| if interior.data[i / 3] { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let an = rasterize_backward(&g, &out, &[m.clone()]).unwrap();
            let h = 1e-3;
            for v in 0..3 {
                for d in 0..3 {
                    let perturb = |s: f64| {
                        let mut mm = m.clone();
                        if d < 2 {
                            mm.positions[v][d] += s;
                        } else {
                            mm.depths[v] += s;
                        }
                        weighted_sum(&rasterize(&[mm], &it), &g)
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let a = if d < 2 { an[0].positions[v][d] } else { an[0].depths[v] };
                    assert!((fd - a).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-3, "v{v} d{d}: {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn uncovered_pixels_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mesh(&mut rng);
        let out = rasterize(&[m.clone()], &intr(64, 64));
        let g: Vec<f64> = (0..out.rgb.len()).map(|i| if out.mask[i / 3] { 0.0 } else { 1.0 }).collect();
        let an = rasterize_backward(&g, &out, &[m]).unwrap();
        assert_eq!(an[0], MeshGrad::zeros(3));
    }

    #[test]
    fn buffer_mismatch_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mesh(&mut rng);
        let out = rasterize(&[m.clone()], &intr(64, 64));
        assert!(matches!(
            rasterize_backward(&[0.0; 3], &out, &[m]),
            Err(Error::BufferMismatch(_))
        ));
        assert!(matches!(
            rasterize_backward(&vec![0.0; out.rgb.len()], &out, &[]),
            Err(Error::BufferMismatch(_))
        ));
    }

    #[test]
    fn gradient_sign_predicts_color_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let it = intr(64, 64);
        let (mut agree, mut total) = (0, 0);
        while total < 1000 {
            let m = random_mesh(&mut rng);
            let out = rasterize(&[m.clone()], &it);
            let interior = interior_mask(&out, &[m.clone()], 2.0);
            let pix: Vec<usize> = (0..interior.data.len()).filter(|&i| interior.data[i]).collect();
            if pix.is_empty() {
                continue;
            }
            let i = pix[rng.random_range(0..pix.len())];
            let c = rng.random_range(0..3);
            let mut g = vec![0.0; out.rgb.len()];
            g[3 * i + c] = 1.0;
            let an = rasterize_backward(&g, &out, &[m.clone()]).unwrap();
            let v = rng.random_range(0..3);
            let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let predicted = an[0].positions[v][0] * dir[0] + an[0].positions[v][1] * dir[1];
            let mut mm = m.clone();
            mm.positions[v][0] += 1e-3 * dir[0];
            mm.positions[v][1] += 1e-3 * dir[1];
            let moved = rasterize(&[mm], &it).rgb[3 * i + c] - out.rgb[3 * i + c];
            if predicted.abs() < 1e-9 && moved.abs() < 1e-12 {
                agree += 1;
            } else if predicted.signum() == moved.signum() {
                agree += 1;
            }
            total += 1;
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }
}
