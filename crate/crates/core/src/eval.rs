//! Alignment metrics (NME, CED), yaw-bucketed evaluation records, synthetic
//! multi-face scenes, and the joint-versus-per-face cost benchmark.

use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assets::BasisBundle;
use crate::camera::{self, Intrinsics, DEFAULT_FOCAL_224};
use crate::error::{Error, Result};
use crate::fitter::Scene;
use crate::imaging::{Image, Mask};
use crate::losses::{self, ActiveTerms, CropBox, FeatureExtractor, LandmarkSet, LossWeights, Observations};
use crate::morphable::{self, FaceParams, ParamLayout};
use crate::raster;
use crate::shading::{self, Y0};

/// Mean point distance divided by `norm`, in percent.
pub fn nme_with_norm(pred: &[Vector2<f64>], gt: &[Vector2<f64>], norm: f64) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} ground-truth points", pred.len(), gt.len())));
    }
    if !(norm > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    Ok(100.0 * sum / pred.len() as f64 / norm)
}

/// `sqrt(w * h)` of the bounding box of `points`.
pub fn bbox_norm(points: &[Vector2<f64>]) -> f64 {
    let (mut lo, mut hi) = (Vector2::repeat(f64::MAX), Vector2::repeat(f64::MIN));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if points.is_empty() {
        return 0.0;
    }
    ((hi.x - lo.x) * (hi.y - lo.y)).max(0.0).sqrt()
}

/// NME normalized by the ground-truth landmark bounding box.
pub fn nme(pred: &[Vector2<f64>], gt: &[Vector2<f64>]) -> Result<f64> {
    nme_with_norm(pred, gt, bbox_norm(gt))
}

/// Fraction of errors at or below each threshold.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let count = sorted.partition_point(|&e| e <= t);
            (t, count as f64 / sorted.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum YawBucket {
    /// `[0, 30)` degrees.
    Low,
    /// `[30, 60)` degrees.
    Mid,
    /// `[60, 90]` degrees.
    High,
}

impl YawBucket {
    pub fn of_degrees(yaw: f64) -> Self {
        let a = yaw.abs();
        if a < 30.0 {
            YawBucket::Low
        } else if a < 60.0 {
            YawBucket::Mid
        } else {
            YawBucket::High
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            YawBucket::Low => "0-30",
            YawBucket::Mid => "30-60",
            YawBucket::High => "60-90",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub nme68: f64,
    pub nme_dense: f64,
    pub yaw_bucket: YawBucket,
}

/// Projected landmarks and all projected vertices of one face.
pub fn project_face(face: &FaceParams, bundle: &BasisBundle, intr: &Intrinsics) -> Result<(Vec<Vector2<f64>>, Vec<Vector2<f64>>)> {
    let decoded = morphable::decode(face, bundle, intr)?;
    let lm = morphable::project_landmarks(&decoded, bundle, intr)?;
    let dense = camera::project_camera_points(&decoded.shape_cam, intr)?
        .into_iter()
        .map(|p| p.uv)
        .collect();
    Ok((lm, dense))
}

/// Compares faces pairwise by index.
/// For each ground-truth face, the index of the fitted face paired with it.
/// Pairs are formed greedily by ascending distance between face centers.
pub fn match_faces(fitted: &Scene, truth: &Scene) -> Vec<usize> {
    let mut pairs = Vec::with_capacity(fitted.faces.len() * truth.faces.len());
    for (i, f) in fitted.faces.iter().enumerate() {
        for (j, t) in truth.faces.iter().enumerate() {
            pairs.push(((f.pose.face_center - t.pose.face_center).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used = vec![false; fitted.faces.len()];
    let mut out = vec![usize::MAX; truth.faces.len()];
    for (_, i, j) in pairs {
        if !used[i] && out[j] == usize::MAX {
            used[i] = true;
            out[j] = i;
        }
    }
    out
}

/// Per ground-truth face, in truth order. Fitted faces are paired by [`match_faces`].
pub fn evaluate_scene(fitted: &Scene, truth: &Scene, bundle: &BasisBundle) -> Result<Vec<EvalRecord>> {
    if fitted.faces.len() != truth.faces.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fitted faces vs {} ground-truth faces",
            fitted.faces.len(),
            truth.faces.len()
        )));
    }
    match_faces(fitted, truth)
        .into_iter()
        .zip(&truth.faces)
        .map(|(fi, t)| {
            let f = &fitted.faces[fi];
            let (lf, df) = project_face(f, bundle, &fitted.intr)?;
            let (lt, dt) = project_face(t, bundle, &truth.intr)?;
            let norm = bbox_norm(&lt);
            let yaw = camera::yaw_of(&camera::rotation_from_axis_angle(&t.pose.rot)).to_degrees();
            Ok(EvalRecord {
                nme68: nme_with_norm(&lf, &lt, norm)?,
                nme_dense: nme_with_norm(&df, &dt, norm)?,
                yaw_bucket: YawBucket::of_degrees(yaw),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Coefficients are standard normal truncated to this magnitude.
    pub coeff_bound: f64,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Face width range as a fraction of `min(w, h) / sqrt(n)`.
    pub min_face_frac: f64,
    pub max_face_frac: f64,
    pub max_iou: f64,
    pub max_retries: usize,
    /// Frame border kept free of faces, in pixels.
    pub margin_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            coeff_bound: 2.0,
            max_yaw_deg: 80.0,
            max_pitch_deg: 10.0,
            max_roll_deg: 10.0,
            min_face_frac: 0.35,
            max_face_frac: 0.5,
            max_iou: 0.3,
            max_retries: 1000,
            margin_px: 2.0,
        }
    }
}

/// A rendered synthetic image with everything needed to score a fit.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image: Image,
    pub skin_mask: Mask,
    pub landmarks: Vec<LandmarkSet>,
    pub centers: Vec<Vector2<f64>>,
    pub scene: Scene,
}

impl SynthScene {
    pub fn observations(&self) -> Observations {
        Observations {
            image: self.image.clone(),
            skin_mask: self.skin_mask.clone(),
            landmarks: self.landmarks.clone(),
            centers: self.centers.clone(),
            heatmap: None,
            crop_boxes: None,
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= bound {
            return v;
        }
    }
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

fn random_illumination(rng: &mut ChaCha8Rng) -> shading::ShCoeffs {
    let mut sh = [0.0; shading::ILLUM_DIM];
    let base = rng.random_range(0.85..1.05);
    for c in 0..3 {
        sh[c] = (base + rng.random_range(-0.05..0.05)) / Y0;
    }
    for k in 1..shading::SH_COUNT {
        let amp = if k < 4 { 0.25 } else { 0.08 };
        let v = rng.random_range(-amp..amp);
        for c in 0..3 {
            sh[k * 3 + c] = v + rng.random_range(-0.02..0.02);
        }
    }
    sh
}

/// Random faces placed without heavy overlap and rendered with the shared camera.
pub fn synth_scene(
    seed: u64,
    n_faces: usize,
    width: u32,
    height: u32,
    bundle: &BasisBundle,
    config: &SynthConfig,
) -> Result<SynthScene> {
    if !(1..=10).contains(&n_faces) {
        return Err(Error::InvalidArgument(format!("n_faces must be in 1..=10, got {n_faces}")));
    }
    let intr = Intrinsics::with_frame_focal(DEFAULT_FOCAL_224, width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ParamLayout::of(bundle);
    let model_width = {
        let n = bundle.vertex_count;
        let xs = &bundle.mean_shape[..n];
        let lo = xs.iter().copied().fold(f32::MAX, f32::min);
        let hi = xs.iter().copied().fold(f32::MIN, f32::max);
        (hi - lo) as f64
    };
    let span = width.min(height) as f64 / (n_faces as f64).sqrt();

    let mut faces: Vec<FaceParams> = Vec::with_capacity(n_faces);
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    let mut attempts = 0;
    while faces.len() < n_faces {
        if attempts >= config.max_retries {
            return Err(Error::PlacementFailure(attempts));
        }
        attempts += 1;
        let draw = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len).map(|_| truncated_normal(rng, config.coeff_bound)).collect()
        };
        let id = draw(layout.id, &mut rng);
        let exp = draw(layout.exp, &mut rng);
        let alb = draw(layout.alb, &mut rng);
        let yaw = rng.random_range(-config.max_yaw_deg..=config.max_yaw_deg).to_radians();
        let pitch = rng.random_range(-config.max_pitch_deg..=config.max_pitch_deg).to_radians();
        let roll = rng.random_range(-config.max_roll_deg..=config.max_roll_deg).to_radians();
        let rot = camera::axis_angle_from_rotation(&camera::rotation_from_euler(yaw, pitch, roll));
        let face_px = span * rng.random_range(config.min_face_frac..=config.max_face_frac);
        let depth = intr.focal * model_width / face_px;
        let center = Vector2::new(
            rng.random_range(0.0..width as f64),
            rng.random_range(0.0..height as f64),
        );
        let face = FaceParams {
            center_score: 1.0,
            id,
            exp,
            alb,
            pose: camera::Pose::new(rot, Vector3::new(0.0, 0.0, depth), center),
            illum: random_illumination(&mut rng),
        };
        let (_, dense) = project_face(&face, bundle, &intr)?;
        let (mut lo, mut hi) = (Vector2::repeat(f64::MAX), Vector2::repeat(f64::MIN));
        for p in &dense {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let m = config.margin_px;
        if lo.x < m || lo.y < m || hi.x > width as f64 - m || hi.y > height as f64 - m {
            continue;
        }
        let bx = [lo.x, lo.y, hi.x, hi.y];
        if boxes.iter().any(|b| iou(b, &bx) >= config.max_iou) {
            continue;
        }
        boxes.push(bx);
        faces.push(face);
    }

    let scene = Scene { intr, faces };
    let render = raster::render_scene(&scene, bundle)?;
    let landmarks = scene
        .faces
        .iter()
        .map(|f| Ok(LandmarkSet::all_visible(project_face(f, bundle, &intr)?.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthScene {
        image: render.image(),
        skin_mask: render.coverage(),
        landmarks,
        centers: scene.faces.iter().map(|f| f.pose.face_center).collect(),
        scene,
    })
}

/// One benchmark row: median seconds for the joint pass and for the sum of
/// per-face passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub t_joint: f64,
    pub t_perface: f64,
}

const CROP_SIZE: u32 = 224;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Bilinear resize of an RGB crop.
fn resize_rgb(img: &Image, size: u32) -> Image {
    let buf: image::Rgb32FImage = image::ImageBuffer::from_raw(
        img.width,
        img.height,
        img.data.iter().map(|&v| v as f32).collect(),
    )
    .expect("buffer length matches dimensions");
    let out = image::imageops::resize(&buf, size, size, image::imageops::FilterType::Triangle);
    Image {
        width: size,
        height: size,
        data: out.into_raw().into_iter().map(|v| v as f64).collect(),
    }
}

fn crop_image(img: &Image, bx: &CropBox) -> Image {
    let mut out = Image::new(bx.x1 - bx.x0, bx.y1 - bx.y0);
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            out.set_pixel(x - bx.x0, y - bx.y0, img.pixel(x, y));
        }
    }
    out
}

/// Forward render plus loss and gradients for one scene.
fn loss_pass(
    scene: &Scene,
    bundle: &BasisBundle,
    obs: &Observations,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<()> {
    losses::total_loss(scene, bundle, obs, weights, ActiveTerms::STAGE2, extractor)?;
    Ok(())
}

/// Times one joint render+loss pass over the whole scene against a per-face
/// pipeline that crops and resizes each face to 224x224 and runs its own pass.
pub fn bench_shared_decoder(
    sizes: &[usize],
    bundle: &BasisBundle,
    width: u32,
    height: u32,
    runs: usize,
    seed: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<BenchRow>> {
    let weights = LossWeights::default();
    let runs = runs.max(5);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n == 0 {
            return Err(Error::InvalidArgument("scene size must be >= 1".into()));
        }
        let synth = synth_scene(seed.wrapping_add(n as u64), n, width, height, bundle, &SynthConfig::default())?;
        let obs = synth.observations();
        let mut joint = Vec::with_capacity(runs);
        let mut perface = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            loss_pass(&synth.scene, bundle, &obs, &weights, extractor)?;
            joint.push(t0.elapsed().as_secs_f64());

            let t0 = Instant::now();
            for (k, face) in synth.scene.faces.iter().enumerate() {
                let (_, dense) = project_face(face, bundle, &synth.scene.intr)?;
                let pts: Vec<[f64; 2]> = dense.iter().map(|p| [p.x, p.y]).collect();
                let bx = CropBox::around(&pts, width, height);
                let side = (bx.x1 - bx.x0).max(bx.y1 - bx.y0).max(1) as f64;
                let scale = CROP_SIZE as f64 / side;
                let crop = resize_rgb(&crop_image(&synth.image, &bx), CROP_SIZE);
                let mask_crop = {
                    let m = &synth.skin_mask;
                    let mut out = Mask::new(CROP_SIZE, CROP_SIZE, false);
                    for y in 0..CROP_SIZE {
                        for x in 0..CROP_SIZE {
                            let sx = (bx.x0 as f64 + (x as f64 + 0.5) / scale).min(width as f64 - 1.0) as u32;
                            let sy = (bx.y0 as f64 + (y as f64 + 0.5) / scale).min(height as f64 - 1.0) as u32;
                            out.data[(y * CROP_SIZE + x) as usize] = m.get(sx, sy);
                        }
                    }
                    out
                };
                let intr = Intrinsics {
                    focal: synth.scene.intr.focal * scale,
                    width: CROP_SIZE,
                    height: CROP_SIZE,
                };
                let mut f = face.clone();
                f.pose.face_center = (face.pose.face_center - Vector2::new(bx.x0 as f64, bx.y0 as f64)) * scale;
                let lm: Vec<Vector2<f64>> = synth.landmarks[k]
                    .points
                    .iter()
                    .map(|p| (p - Vector2::new(bx.x0 as f64, bx.y0 as f64)) * scale)
                    .collect();
                let single = Scene { intr, faces: vec![f] };
                let obs_k = Observations {
                    image: crop,
                    skin_mask: mask_crop,
                    landmarks: vec![LandmarkSet::all_visible(lm)],
                    centers: vec![single.faces[0].pose.face_center],
                    heatmap: None,
                    crop_boxes: None,
                };
                loss_pass(&single, bundle, &obs_k, &weights, extractor)?;
            }
            perface.push(t0.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            n,
            t_joint: median(joint),
            t_perface: median(perface),
        });
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

pub fn write_bench_csv<W: std::io::Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "n,t_joint,t_perface")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6}", r.n, r.t_joint, r.t_perface)?;
    }
    Ok(())
}

pub fn write_ced_csv<W: std::io::Write>(mut w: W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "threshold,fraction")?;
    for (t, f) in curve {
        writeln!(w, "{t},{f}")?;
    }
    Ok(())
}

pub fn write_nme_csv<W: std::io::Write>(mut w: W, records: &[EvalRecord]) -> std::io::Result<()> {
    writeln!(w, "face,nme68,nme_dense,yaw_bucket")?;
    for (k, r) in records.iter().enumerate() {
        writeln!(w, "{k},{:.6},{:.6},{}", r.nme68, r.nme_dense, r.yaw_bucket.label())?;
    }
    Ok(())
}
