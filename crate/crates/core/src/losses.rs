//! The fitting objective: center focal loss, masked l2,1 photometric loss,
//! perception loss, weighted landmark loss and the two regularizers, each with
//! its gradient, plus their weighted total with gradients for every face.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assets::BasisBundle;
use crate::camera;
use crate::detect::Heatmap;
use crate::error::{Error, Result};
use crate::fitter::Scene;
use crate::imaging::{Image, Mask};
use crate::morphable::{self, DecodedGrad, FaceParams, ParamGrad};
use crate::raster::{self, FaceRender, RenderOutput};
use crate::shading::{self, ILLUM_DIM};

const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub c: f64,
    pub pix: f64,
    pub per: f64,
    pub lan: f64,
    pub norm: f64,
    pub var: f64,
    pub id: f64,
    pub exp: f64,
    pub alb: f64,
    pub gamma: f64,
    pub omega_mouthnose: f64,
    pub omega_other: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c: 1.0,
            pix: 100.0,
            per: 0.01,
            lan: 0.1,
            norm: 1e-4,
            var: 1e-3,
            id: 1.0,
            exp: 0.8,
            alb: 0.0017,
            gamma: 2.0,
            omega_mouthnose: 20.0,
            omega_other: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("c", self.c),
            ("pix", self.pix),
            ("per", self.per),
            ("lan", self.lan),
            ("norm", self.norm),
            ("var", self.var),
            ("id", self.id),
            ("exp", self.exp),
            ("alb", self.alb),
            ("gamma", self.gamma),
            ("omega_mouthnose", self.omega_mouthnose),
            ("omega_other", self.omega_other),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Per-landmark weight from the mouth/nose mask.
    pub fn omega(&self, mask: &[bool]) -> Vec<f64> {
        mask.iter()
            .map(|&m| if m { self.omega_mouthnose } else { self.omega_other })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub c: f64,
    pub pix: f64,
    pub per: f64,
    pub lan: f64,
    pub norm: f64,
    pub var: f64,
    pub reg: f64,
    pub total: f64,
}

/// Which terms of the total loss are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub c: bool,
    pub pix: bool,
    pub per: bool,
    pub lan: bool,
    pub norm: bool,
    pub var: bool,
}

impl ActiveTerms {
    pub const ALL: ActiveTerms = ActiveTerms {
        c: true,
        pix: true,
        per: true,
        lan: true,
        norm: true,
        var: true,
    };
    /// Alignment stage: landmarks and regularizers.
    pub const STAGE1: ActiveTerms = ActiveTerms {
        c: false,
        pix: false,
        per: false,
        lan: true,
        norm: true,
        var: true,
    };
    /// Photometric stage: everything except the center term.
    pub const STAGE2: ActiveTerms = ActiveTerms {
        c: false,
        ..ActiveTerms::ALL
    };
}

/// 68 landmark positions with per-point visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    pub fn all_visible(points: Vec<Vector2<f64>>) -> Self {
        let visible = vec![true; points.len()];
        LandmarkSet { points, visible }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CropBox {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    /// Bounds of `points` padded by 10% per side and clipped to the frame.
    pub fn around(points: &[[f64; 2]], width: u32, height: u32) -> CropBox {
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if points.is_empty() {
            return CropBox { x0: 0, y0: 0, x1: 0, y1: 0 };
        }
        let pad = [(hi[0] - lo[0]) * 0.1, (hi[1] - lo[1]) * 0.1];
        let clip = |v: f64, max: u32| v.clamp(0.0, max as f64) as u32;
        CropBox {
            x0: clip((lo[0] - pad[0]).floor(), width),
            y0: clip((lo[1] - pad[1]).floor(), height),
            x1: clip((hi[0] + pad[0]).ceil(), width),
            y1: clip((hi[1] + pad[1]).ceil(), height),
        }
    }
}

/// Everything observed about one image.
#[derive(Debug, Clone)]
pub struct Observations {
    pub image: Image,
    pub skin_mask: Mask,
    /// One set per face, in scene order.
    pub landmarks: Vec<LandmarkSet>,
    /// Ground-truth face centers in pixels, for the center term.
    pub centers: Vec<Vector2<f64>>,
    /// Predicted center scores; the center term is skipped when absent.
    pub heatmap: Option<Heatmap>,
    /// Fixed perception crops; when absent they follow the projected meshes.
    pub crop_boxes: Option<Vec<CropBox>>,
}

// ---------------------------------------------------------------------------
// Center focal loss

fn focal_term(p: f64, gamma: f64) -> (f64, f64) {
    // f(p) = -(1 - p)^gamma ln p and df/dp.
    let q = 1.0 - p;
    let value = -q.powf(gamma) * p.ln();
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
    (value, dq - q.powf(gamma) / p)
}

/// Focal loss of a predicted grid against positive cells `(row, col)`, with
/// its gradient over the grid values.
pub fn center_focal_loss_grad(
    pred: &Heatmap,
    gt_cells: &[(usize, usize)],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if gt_cells.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    pred.validate()?;
    let mut positive = vec![false; pred.data.len()];
    for &(r, c) in gt_cells {
        if r >= pred.rows || c >= pred.cols {
            return Err(Error::InvalidArgument(format!(
                "center cell ({r}, {c}) outside the {}x{} grid",
                pred.rows, pred.cols
            )));
        }
        positive[r * pred.cols + c] = true;
    }
    let n = gt_cells.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (i, &raw) in pred.data.iter().enumerate() {
        let d = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = raw == d;
        let (p, sign) = if positive[i] { (d, 1.0) } else { (1.0 - d, -1.0) };
        let (v, dv) = focal_term(p, gamma);
        loss += v;
        if inside {
            grad[i] = sign * dv / n;
        }
    }
    Ok((loss / n, grad))
}

pub fn center_focal_loss(pred: &Heatmap, gt_cells: &[(usize, usize)], gamma: f64) -> Result<f64> {
    Ok(center_focal_loss_grad(pred, gt_cells, gamma)?.0)
}

// ---------------------------------------------------------------------------
// Photometric l2,1

fn check_frame(w: u32, h: u32, what: &str, w2: u32, h2: u32) -> Result<()> {
    if (w, h) != (w2, h2) {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {w2}x{h2}, render is {w}x{h}"
        )));
    }
    Ok(())
}

/// Mean per-pixel RGB distance over `skin & rendered.mask`, with its gradient
/// over the rendered RGB buffer.
pub fn pixel_l21_loss_grad(
    rendered: &RenderOutput,
    target: &Image,
    skin_mask: &Mask,
) -> Result<(f64, Vec<f64>)> {
    check_frame(rendered.width, rendered.height, "target", target.width, target.height)?;
    check_frame(rendered.width, rendered.height, "skin mask", skin_mask.width, skin_mask.height)?;
    let count = rendered
        .mask
        .iter()
        .zip(&skin_mask.data)
        .filter(|(a, b)| **a && **b)
        .count();
    let mut grad = vec![0.0; rendered.rgb.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..rendered.mask.len() {
        if !(rendered.mask[i] && skin_mask.data[i]) {
            continue;
        }
        let d: [f64; 3] = std::array::from_fn(|c| rendered.rgb[3 * i + c] - target.data[3 * i + c]);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        sum += norm;
        if norm > 0.0 {
            for c in 0..3 {
                grad[3 * i + c] = d[c] / norm * inv;
            }
        }
    }
    Ok((sum * inv, grad))
}

pub fn pixel_l21_loss(rendered: &RenderOutput, target: &Image, skin_mask: &Mask) -> Result<f64> {
    Ok(pixel_l21_loss_grad(rendered, target, skin_mask)?.0)
}

// ---------------------------------------------------------------------------
// Perception

/// Maps an image crop to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, crop: &Image) -> Result<Vec<f64>>;

    /// Gradient over the crop's RGB values given the gradient over features.
    fn backward(&self, crop: &Image, grad_features: &[f64]) -> Result<Vec<f64>>;
}

/// Stand-in extractor: grayscale `(r + g + b) / 3` mean-pooled onto a
/// `grid x grid` lattice and scaled to unit length (all zeros if the pooled
/// vector is zero).
#[derive(Debug, Clone, Copy)]
pub struct MeanPoolExtractor {
    pub grid: usize,
}

impl Default for MeanPoolExtractor {
    fn default() -> Self {
        MeanPoolExtractor { grid: 8 }
    }
}

impl MeanPoolExtractor {
    fn cell_of(&self, crop: &Image) -> Vec<usize> {
        let (w, h) = (crop.width as usize, crop.height as usize);
        let g = self.grid;
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                (y * g / h) * g + x * g / w
            })
            .collect()
    }

    fn pooled(&self, crop: &Image) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let cells = self.cell_of(crop);
        let mut sum = vec![0.0; self.grid * self.grid];
        let mut count = vec![0.0; self.grid * self.grid];
        for (i, &k) in cells.iter().enumerate() {
            sum[k] += (crop.data[3 * i] + crop.data[3 * i + 1] + crop.data[3 * i + 2]) / 3.0;
            count[k] += 1.0;
        }
        let pooled = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0.0 { s / c } else { 0.0 })
            .collect();
        (pooled, count, cells)
    }
}

impl FeatureExtractor for MeanPoolExtractor {
    fn features(&self, crop: &Image) -> Result<Vec<f64>> {
        if self.grid == 0 {
            return Err(Error::Extractor("grid size must be positive".into()));
        }
        let (p, _, _) = self.pooled(crop);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if norm > 0.0 { p.iter().map(|v| v / norm).collect() } else { p })
    }

    fn backward(&self, crop: &Image, grad_features: &[f64]) -> Result<Vec<f64>> {
        if grad_features.len() != self.grid * self.grid {
            return Err(Error::Extractor(format!(
                "expected {} feature gradients, got {}",
                self.grid * self.grid,
                grad_features.len()
            )));
        }
        let (p, count, cells) = self.pooled(crop);
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; crop.data.len()]);
        }
        let f: Vec<f64> = p.iter().map(|v| v / norm).collect();
        let fg: f64 = f.iter().zip(grad_features).map(|(a, b)| a * b).sum();
        let g_pool: Vec<f64> = f
            .iter()
            .zip(grad_features)
            .map(|(fi, gi)| (gi - fi * fg) / norm)
            .collect();
        let mut out = vec![0.0; crop.data.len()];
        for (i, &k) in cells.iter().enumerate() {
            let g = g_pool[k] / count[k] / 3.0;
            out[3 * i..3 * i + 3].fill(g);
        }
        Ok(out)
    }
}

/// Copies `bx` out of `rgb`, zeroing pixels where `keep` is false.
fn crop(rgb: &[f64], width: u32, bx: &CropBox, keep: &[bool]) -> Image {
    let mut out = Image::new(bx.x1 - bx.x0, bx.y1 - bx.y0);
    let mut o = 0;
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            let i = (y * width + x) as usize;
            if keep[i] {
                out.data[o..o + 3].copy_from_slice(&rgb[3 * i..3 * i + 3]);
            }
            o += 3;
        }
    }
    out
}

/// Mean squared feature distance between rendered and target crops, one crop
/// per face, restricted to `skin & rendered.mask`. Returns the gradient over
/// the rendered RGB buffer.
pub fn perception_loss_grad(
    rendered: &RenderOutput,
    target: &Image,
    skin_mask: &Mask,
    boxes: &[CropBox],
    extractor: &dyn FeatureExtractor,
) -> Result<(f64, Vec<f64>)> {
    check_frame(rendered.width, rendered.height, "target", target.width, target.height)?;
    check_frame(rendered.width, rendered.height, "skin mask", skin_mask.width, skin_mask.height)?;
    let mut grad = vec![0.0; rendered.rgb.len()];
    if boxes.is_empty() {
        return Ok((0.0, grad));
    }
    let keep: Vec<bool> = rendered.mask.iter().zip(&skin_mask.data).map(|(a, b)| *a && *b).collect();
    let n = boxes.len() as f64;
    let per_face: Vec<(f64, Option<Vec<f64>>)> = boxes
        .par_iter()
        .map(|bx| {
            if bx.is_empty() {
                return Ok((0.0, None));
            }
            let r = crop(&rendered.rgb, rendered.width, bx, &keep);
            let t = crop(&target.data, target.width, bx, &keep);
            let fr = extractor.features(&r)?;
            let ft = extractor.features(&t)?;
            if fr.len() != ft.len() {
                return Err(Error::Extractor("feature lengths differ".into()));
            }
            let diff: Vec<f64> = fr.iter().zip(&ft).map(|(a, b)| a - b).collect();
            let value = diff.iter().map(|d| d * d).sum::<f64>();
            let g_feat: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
            Ok((value, Some(extractor.backward(&r, &g_feat)?)))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (bx, (value, g)) in boxes.iter().zip(per_face) {
        total += value;
        let Some(g) = g else { continue };
        let mut o = 0;
        for y in bx.y0..bx.y1 {
            for x in bx.x0..bx.x1 {
                let i = (y * rendered.width + x) as usize;
                if keep[i] {
                    for c in 0..3 {
                        grad[3 * i + c] += g[o + c];
                    }
                }
                o += 3;
            }
        }
    }
    Ok((total / n, grad))
}

pub fn perception_loss(
    rendered: &RenderOutput,
    target: &Image,
    skin_mask: &Mask,
    boxes: &[CropBox],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    Ok(perception_loss_grad(rendered, target, skin_mask, boxes, extractor)?.0)
}

// ---------------------------------------------------------------------------
// Landmarks

/// Weighted squared reprojection error, normalized per face by the sum of
/// visible weights and averaged over faces. Returns gradients over the
/// projected points.
pub fn landmark_loss_grad(
    projected: &[Vec<Vector2<f64>>],
    gt: &[LandmarkSet],
    omega: &[f64],
) -> Result<(f64, Vec<Vec<Vector2<f64>>>)> {
    if projected.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} projected landmark sets, {} ground-truth sets",
            projected.len(),
            gt.len()
        )));
    }
    let n = projected.len();
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for (q, g) in projected.iter().zip(gt) {
        if q.len() != omega.len() || g.points.len() != omega.len() || g.visible.len() != omega.len() {
            return Err(Error::ShapeMismatch(format!(
                "landmark sets must have {} points",
                omega.len()
            )));
        }
        let norm: f64 = omega.iter().zip(&g.visible).filter(|(_, v)| **v).map(|(w, _)| w).sum();
        let mut grad = vec![Vector2::zeros(); q.len()];
        if norm > 0.0 {
            let mut face = 0.0;
            for j in 0..q.len() {
                if !g.visible[j] {
                    continue;
                }
                let d = q[j] - g.points[j];
                face += omega[j] * d.norm_squared();
                grad[j] = d * (2.0 * omega[j] / norm / n as f64);
            }
            total += face / norm;
        }
        grads.push(grad);
    }
    Ok((if n > 0 { total / n as f64 } else { 0.0 }, grads))
}

pub fn landmark_loss(projected: &[Vec<Vector2<f64>>], gt: &[LandmarkSet], omega: &[f64]) -> Result<f64> {
    Ok(landmark_loss_grad(projected, gt, omega)?.0)
}

// ---------------------------------------------------------------------------
// Regularizers

/// Mean over faces of the weighted squared coefficient norms. Gradients are
/// returned as `(id, exp, alb)` per face.
pub fn coefficient_prior_grad(
    params: &[FaceParams],
    w: &LossWeights,
) -> (f64, Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
    if params.is_empty() {
        return (0.0, Vec::new());
    }
    let n = params.len() as f64;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let scaled = |v: &[f64], l: f64| v.iter().map(|x| 2.0 * l * x / n).collect::<Vec<_>>();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(params.len());
    for p in params {
        total += w.id * sq(&p.id) + w.exp * sq(&p.exp) + w.alb * sq(&p.alb);
        grads.push((scaled(&p.id, w.id), scaled(&p.exp, w.exp), scaled(&p.alb, w.alb)));
    }
    (total / n, grads)
}

pub fn coefficient_prior(params: &[FaceParams], w: &LossWeights) -> f64 {
    coefficient_prior_grad(params, w).0
}

/// Mean over faces of the summed per-channel population variance of the
/// albedo over `region`, with gradients over each face's albedo.
pub fn albedo_flatten_loss_grad(
    albedo: &[&[[f64; 3]]],
    region: &[u32],
) -> Result<(f64, Vec<Vec<[f64; 3]>>)> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let n = albedo.len();
    let m = region.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for a in albedo {
        let mut g = vec![[0.0; 3]; a.len()];
        for c in 0..3 {
            let mean = region.iter().map(|&v| a[v as usize][c]).sum::<f64>() / m;
            let var = region.iter().map(|&v| (a[v as usize][c] - mean).powi(2)).sum::<f64>() / m;
            total += var;
            for &v in region {
                g[v as usize][c] += 2.0 * (a[v as usize][c] - mean) / m / n as f64;
            }
        }
        grads.push(g);
    }
    Ok((if n > 0 { total / n as f64 } else { 0.0 }, grads))
}

pub fn albedo_flatten_loss(albedo: &[&[[f64; 3]]], region: &[u32]) -> Result<f64> {
    Ok(albedo_flatten_loss_grad(albedo, region)?.0)
}

// ---------------------------------------------------------------------------
// Total

/// Perception crop per face: the fixed boxes if given, else padded projected bounds.
pub fn crop_boxes(obs: &Observations, faces: &[FaceRender], width: u32, height: u32) -> Result<Vec<CropBox>> {
    match &obs.crop_boxes {
        Some(b) if b.len() != faces.len() => Err(Error::ShapeMismatch(format!(
            "{} crop boxes for {} faces",
            b.len(),
            faces.len()
        ))),
        Some(b) => Ok(b.clone()),
        None => Ok(faces.iter().map(|f| CropBox::around(&f.screen, width, height)).collect()),
    }
}

/// Forward value and per-face gradients of the weighted objective.
pub fn total_loss(
    scene: &Scene,
    bundle: &BasisBundle,
    obs: &Observations,
    weights: &LossWeights,
    active: ActiveTerms,
    extractor: &dyn FeatureExtractor,
) -> Result<(LossBreakdown, Vec<ParamGrad>)> {
    evaluate(scene, bundle, obs, weights, active, extractor, true)
}

/// Forward value only.
pub fn total_loss_value(
    scene: &Scene,
    bundle: &BasisBundle,
    obs: &Observations,
    weights: &LossWeights,
    active: ActiveTerms,
    extractor: &dyn FeatureExtractor,
) -> Result<LossBreakdown> {
    Ok(evaluate(scene, bundle, obs, weights, active, extractor, false)?.0)
}

fn evaluate(
    scene: &Scene,
    bundle: &BasisBundle,
    obs: &Observations,
    weights: &LossWeights,
    active: ActiveTerms,
    extractor: &dyn FeatureExtractor,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<ParamGrad>)> {
    weights.validate()?;
    let intr = &scene.intr;
    let n = scene.faces.len();
    let on = |flag: bool, lambda: f64| flag && lambda > 0.0;
    let use_c = on(active.c, weights.c) && obs.heatmap.is_some();
    let use_pix = on(active.pix, weights.pix);
    let use_per = on(active.per, weights.per);
    let use_lan = on(active.lan, weights.lan);
    let use_norm = on(active.norm, weights.norm);
    let use_var = on(active.var, weights.var);

    let faces = raster::prepare_faces(scene, bundle)?;
    let mut b = LossBreakdown::default();
    let mut face_grads: Vec<DecodedGrad> = (0..n).map(|_| DecodedGrad::zeros(bundle.vertex_count)).collect();
    let mut illum_grads = vec![[0.0; ILLUM_DIM]; n];
    let mut out: Vec<ParamGrad> = scene.faces.iter().map(|f| ParamGrad::zeros(f.layout())).collect();

    if use_pix || use_per {
        let meshes: Vec<raster::ScreenMesh> = faces
            .iter()
            .map(|f| raster::ScreenMesh {
                positions: f.screen.clone(),
                depths: f.depths.clone(),
                colors: f.colors.clone(),
                triangles: &bundle.triangles,
            })
            .collect();
        let rendered = raster::rasterize(&meshes, intr);
        let mut grad_rgb = vec![0.0; rendered.rgb.len()];
        if use_pix {
            let (v, g) = pixel_l21_loss_grad(&rendered, &obs.image, &obs.skin_mask)?;
            b.pix = v;
            grad_rgb.iter_mut().zip(&g).for_each(|(a, g)| *a += weights.pix * g);
        }
        if use_per {
            let boxes = crop_boxes(obs, &faces, intr.width, intr.height)?;
            let (v, g) = perception_loss_grad(&rendered, &obs.image, &obs.skin_mask, &boxes, extractor)?;
            b.per = v;
            grad_rgb.iter_mut().zip(&g).for_each(|(a, g)| *a += weights.per * g);
        }
        if want_grad {
            let mesh_grads = raster::rasterize_backward(&grad_rgb, &rendered, &meshes)?;
            let per_face: Vec<(DecodedGrad, [f64; ILLUM_DIM])> = faces
                .par_iter()
                .zip(&mesh_grads)
                .zip(&scene.faces)
                .map(|((f, mg), params)| screen_backward(f, mg, params, intr))
                .collect();
            for (k, (g, sh)) in per_face.into_iter().enumerate() {
                face_grads[k] = g;
                illum_grads[k] = sh;
            }
        }
    }

    if use_lan {
        let projected: Vec<Vec<Vector2<f64>>> = faces
            .iter()
            .map(|f| morphable::project_landmarks(&f.decoded, bundle, intr))
            .collect::<Result<_>>()?;
        let omega = weights.omega(&bundle.mouthnose_mask);
        let (v, g) = landmark_loss_grad(&projected, &obs.landmarks, &omega)?;
        b.lan = v;
        if want_grad {
            for (k, gk) in g.iter().enumerate() {
                let cam = &faces[k].decoded.shape_cam;
                for (j, &vi) in bundle.landmark_indices.iter().enumerate() {
                    let gp = gk[j] * weights.lan;
                    if gp != Vector2::zeros() {
                        face_grads[k].shape_cam[vi as usize] += camera::project_point_backward(&cam[vi as usize], intr, &gp);
                    }
                }
            }
        }
    }

    if use_var {
        let albedo: Vec<&[[f64; 3]]> = faces.iter().map(|f| f.decoded.albedo.as_slice()).collect();
        let (v, g) = albedo_flatten_loss_grad(&albedo, &bundle.skin_region)?;
        b.var = v;
        if want_grad {
            for (k, gk) in g.iter().enumerate() {
                for (dst, src) in face_grads[k].albedo.iter_mut().zip(gk) {
                    for c in 0..3 {
                        dst[c] += weights.var * src[c];
                    }
                }
            }
        }
    }

    if want_grad {
        let decoded: Vec<ParamGrad> = face_grads
            .par_iter()
            .zip(&faces)
            .zip(&scene.faces)
            .map(|((g, f), params)| morphable::decode_backward(g, params, &f.decoded, bundle, intr))
            .collect::<Result<_>>()?;
        for (k, g) in decoded.iter().enumerate() {
            out[k].add_assign(g);
            for (dst, src) in out[k].illum.iter_mut().zip(&illum_grads[k]) {
                *dst += src;
            }
        }
    }

    if use_norm {
        let (v, g) = coefficient_prior_grad(&scene.faces, weights);
        b.norm = v;
        if want_grad {
            for (k, (gi, ge, ga)) in g.iter().enumerate() {
                let add = |dst: &mut [f64], src: &[f64]| {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += weights.norm * s)
                };
                add(&mut out[k].id, gi);
                add(&mut out[k].exp, ge);
                add(&mut out[k].alb, ga);
            }
        }
    }

    if use_c {
        let hm = obs.heatmap.as_ref().expect("checked above");
        let mut pred = hm.clone();
        let mut writer = vec![None; pred.data.len()];
        for (k, f) in scene.faces.iter().enumerate() {
            let (r, c) = pred.cell_of(f.pose.face_center);
            let i = r * pred.cols + c;
            pred.data[i] = f.center_score;
            writer[i] = Some(k);
        }
        let gt: Vec<(usize, usize)> = obs.centers.iter().map(|c| pred.cell_of(*c)).collect();
        let (v, g) = center_focal_loss_grad(&pred, &gt, weights.gamma)?;
        b.c = v;
        if want_grad {
            for (i, k) in writer.iter().enumerate() {
                if let Some(k) = k {
                    out[*k].center_score += weights.c * g[i];
                }
            }
        }
    }

    b.reg = weights.norm * b.norm + weights.var * b.var;
    b.total = weights.c * b.c + weights.pix * b.pix + weights.per * b.per + weights.lan * b.lan + b.reg;
    Ok((b, out))
}

/// Chains rasterizer gradients through projection and shading into
/// decoded-face gradients and the illumination gradient.
fn screen_backward(
    f: &FaceRender,
    mg: &raster::MeshGrad,
    params: &FaceParams,
    intr: &camera::Intrinsics,
) -> (DecodedGrad, [f64; ILLUM_DIM]) {
    let nv = f.colors.len();
    let mut g = DecodedGrad::zeros(nv);
    let mut sh = [0.0; ILLUM_DIM];
    for v in 0..nv {
        let gc = mg.colors[v];
        if gc != [0.0; 3] {
            shading::shade_backward_into(
                &gc,
                &f.decoded.albedo[v],
                &f.decoded.normals[v],
                &params.illum,
                &mut g.albedo[v],
                &mut g.normals[v],
                &mut sh,
            );
        }
        let gp = Vector2::new(mg.positions[v][0], mg.positions[v][1]);
        let x = &f.decoded.shape_cam[v];
        g.shape_cam[v] += camera::project_point_backward(x, intr, &gp) + Vector3::new(0.0, 0.0, mg.depths[v]);
    }
    (g, sh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.c, w.pix, w.per, w.lan), (1.0, 100.0, 0.01, 0.1));
        assert_eq!((w.id, w.exp, w.alb), (1.0, 0.8, 0.0017));
        assert_eq!((w.norm, w.var, w.gamma), (1e-4, 1e-3, 2.0));
        assert_eq!((w.omega_mouthnose, w.omega_other), (20.0, 1.0));
    }

    #[test]
    fn focal_half_grid_is_ln2() {
        let hm = Heatmap { rows: 2, cols: 2, stride: 8, data: vec![0.5; 4] };
        let l = center_focal_loss(&hm, &[(0, 1)], 2.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        let mut hm = Heatmap { rows: 3, cols: 3, stride: 8, data: vec![0.0; 9] };
        hm.data[4] = 1.0;
        assert!(center_focal_loss(&hm, &[(1, 1)], 2.0).unwrap() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let data = vec![0.2, 0.7, 0.4, 0.9];
        let hm = Heatmap { rows: 2, cols: 2, stride: 8, data: data.clone() };
        let ce = -(data[1] as f64).ln() - (1.0 - data[0]).ln() - (1.0 - data[2]).ln() - (1.0 - data[3]).ln();
        let l = center_focal_loss(&hm, &[(0, 1)], 0.0).unwrap();
        assert!((l - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_errors() {
        let hm = Heatmap { rows: 1, cols: 2, stride: 8, data: vec![0.5, 1.5] };
        assert!(matches!(center_focal_loss(&hm, &[], 2.0), Err(Error::EmptyGroundTruth)));
        assert!(matches!(
            center_focal_loss(&hm, &[(0, 0)], 2.0),
            Err(Error::ProbabilityOutOfRange { cell: 1, .. })
        ));
    }

    #[test]
    fn focal_gradient_matches_fd() {
        let data = vec![0.2, 0.7, 0.4, 0.9, 0.05, 0.5];
        let hm = Heatmap { rows: 2, cols: 3, stride: 8, data };
        let gt = [(0, 1), (1, 2)];
        let (_, g) = center_focal_loss_grad(&hm, &gt, 2.0).unwrap();
        for i in 0..6 {
            let (mut a, mut b) = (hm.clone(), hm.clone());
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            let fd = (center_focal_loss(&a, &gt, 2.0).unwrap() - center_focal_loss(&b, &gt, 2.0).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() / fd.abs().max(1e-6) < 1e-5, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn flat_render(w: u32, h: u32, rgb: [f64; 3]) -> RenderOutput {
        let mut r = RenderOutput::empty(w, h);
        r.mask.fill(true);
        for px in r.rgb.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    #[test]
    fn l21_examples() {
        let r = flat_render(5, 2, [0.5, 0.2, 0.1]);
        let target = r.image();
        let all = Mask::new(5, 2, true);
        assert_eq!(pixel_l21_loss(&r, &target, &all).unwrap(), 0.0);
        let mut shifted = target.clone();
        for px in shifted.data.chunks_exact_mut(3) {
            px[0] -= 0.3;
        }
        assert!((pixel_l21_loss(&r, &shifted, &all).unwrap() - 0.3).abs() < 1e-12);
        let (v, g) = pixel_l21_loss_grad(&r, &shifted, &Mask::new(5, 2, false)).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(matches!(
            pixel_l21_loss(&r, &Image::new(4, 2), &all),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn perception_orthogonal_features_give_two() {
        // Two crops whose pooled grayscale patterns have disjoint support.
        let (w, h) = (16u32, 16u32);
        let mut r = RenderOutput::empty(w, h);
        r.mask.fill(true);
        let mut target = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if x < 8 {
                    r.rgb[3 * i..3 * i + 3].fill(0.6);
                } else {
                    target.data[3 * i..3 * i + 3].fill(0.6);
                }
            }
        }
        let boxes = [CropBox { x0: 0, y0: 0, x1: w, y1: h }];
        let ex = MeanPoolExtractor::default();
        let mask = Mask::new(w, h, true);
        let l = perception_loss(&r, &target, &mask, &boxes, &ex).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        assert_eq!(perception_loss(&r, &r.image(), &mask, &boxes, &ex).unwrap(), 0.0);
        let twice = [boxes[0], boxes[0]];
        assert!((perception_loss(&r, &target, &mask, &twice, &ex).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn perception_gradient_matches_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (20u32, 12u32);
        let mut r = RenderOutput::empty(w, h);
        r.mask.fill(true);
        r.rgb.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let mut t = Image::new(w, h);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let boxes = [CropBox { x0: 1, y0: 2, x1: 19, y1: 12 }, CropBox { x0: 0, y0: 0, x1: 9, y1: 7 }];
        let ex = MeanPoolExtractor::default();
        let mask = Mask::new(w, h, true);
        let (_, g) = perception_loss_grad(&r, &t, &mask, &boxes, &ex).unwrap();
        for i in (0..r.rgb.len()).step_by(7) {
            let (mut a, mut b) = (r.clone(), r.clone());
            a.rgb[i] += 1e-5;
            b.rgb[i] -= 1e-5;
            let fd = (perception_loss(&a, &t, &mask, &boxes, &ex).unwrap()
                - perception_loss(&b, &t, &mask, &boxes, &ex).unwrap())
                / 2e-5;
            assert!((fd - g[i]).abs() < 1e-7 + 1e-5 * fd.abs(), "{i}: {fd} vs {}", g[i]);
        }
    }

    fn landmarks(n: usize) -> Vec<Vector2<f64>> {
        (0..n).map(|j| Vector2::new(j as f64, 2.0 * j as f64)).collect()
    }

    #[test]
    fn landmark_examples() {
        let gt = vec![LandmarkSet::all_visible(landmarks(68))];
        let mut mask = vec![false; 68];
        mask[50] = true;
        let ones = vec![1.0; 68];
        assert_eq!(landmark_loss(&[landmarks(68)], &gt, &ones).unwrap(), 0.0);
        let mut off = landmarks(68);
        off[3] += Vector2::new(3.0, 4.0);
        assert!((landmark_loss(&[off], &gt, &ones).unwrap() - 25.0 / 68.0).abs() < 1e-12);

        let w = LossWeights::default();
        let omega = w.omega(&mask);
        let mut a = landmarks(68);
        a[3] += Vector2::new(3.0, 4.0);
        let mut b = landmarks(68);
        b[50] += Vector2::new(3.0, 4.0);
        let la = landmark_loss(&[a], &gt, &omega).unwrap();
        let lb = landmark_loss(&[b], &gt, &omega).unwrap();
        assert!((lb / la - 20.0).abs() < 1e-12);
    }

    #[test]
    fn invisible_landmarks_are_skipped() {
        let mut gt = LandmarkSet::all_visible(landmarks(68));
        gt.visible.fill(false);
        let mut q = landmarks(68);
        q[0].x += 10.0;
        let (v, g) = landmark_loss_grad(&[q], &[gt], &[1.0; 68]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g[0].iter().all(|p| *p == Vector2::zeros()));
    }

    #[test]
    fn prior_examples() {
        let layout = crate::morphable::ParamLayout::STANDARD;
        let w = LossWeights::default();
        let mut p = FaceParams::neutral(layout, Vector2::new(1.0, 1.0), 10.0);
        assert_eq!(coefficient_prior(&[p.clone()], &w), 0.0);
        p.id[0] = 1.0;
        assert_eq!(coefficient_prior(&[p.clone()], &w), 1.0);
        p.id[0] = 0.0;
        p.exp[0] = 2.0;
        assert!((coefficient_prior(&[p.clone()], &w) - 3.2).abs() < 1e-12);
        assert!((coefficient_prior(&[p.clone(), p], &w) - 3.2).abs() < 1e-12);
    }

    #[test]
    fn albedo_variance_examples() {
        let a = vec![[0.0, 0.3, 0.3], [1.0, 0.3, 0.3], [0.5, 0.5, 0.5]];
        assert!((albedo_flatten_loss(&[&a], &[0, 1]).unwrap() - 0.25).abs() < 1e-12);
        let flat = vec![[0.4; 3]; 3];
        assert!(albedo_flatten_loss(&[&flat], &[0, 1, 2]).unwrap() < 1e-30);
        let scaled: Vec<[f64; 3]> = a.iter().map(|v| [v[0] * 0.5, v[1], v[2]]).collect();
        assert!((albedo_flatten_loss(&[&scaled], &[0, 1]).unwrap() - 0.0625).abs() < 1e-12);
        assert!(matches!(albedo_flatten_loss(&[&a], &[]), Err(Error::EmptyRegion)));
    }
}
