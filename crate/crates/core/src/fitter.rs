//! Stage-wise joint fitting of every face in a scene under one camera:
//! landmark alignment first, then the photometric objective.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::assets::BasisBundle;
use crate::camera::{self, Intrinsics};
use crate::detect::{self, Heatmap};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::landmarks::{LEFT_EYE_OUTER, RIGHT_EYE_OUTER};
use crate::losses::{self, ActiveTerms, FeatureExtractor, LandmarkSet, LossBreakdown, LossWeights, Observations};
use crate::morphable::{FaceParams, ParamGrad, ParamLayout};

/// Shared intrinsics and the faces seen through them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub intr: Intrinsics,
    pub faces: Vec<FaceParams>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.intr.validate()?;
        for f in &self.faces {
            if !(f.pose.trans_code.z > 0.0) {
                return Err(Error::NonpositiveDepth(f.pose.trans_code.z));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub step_size: f64,
    /// Fraction of each stage after which the step is multiplied by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Step multiplier for rotation and translation code.
    pub pose_step_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Initial `d_z` when no landmarks are available.
    pub default_depth: f64,
    pub min_depth: f64,
    /// All faces share one illumination (gradients are summed across faces).
    pub shared_illumination: bool,
    pub peak_threshold: f64,
    pub max_faces: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            stage1_iters: 300,
            stage2_iters: 500,
            step_size: 0.01,
            decay_at: 0.75,
            decay_factor: 0.1,
            convergence_tol: 1e-6,
            convergence_window: 20,
            pose_step_scale: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            default_depth: 25.0,
            min_depth: 0.05,
            shared_illumination: false,
            peak_threshold: detect::DEFAULT_THRESHOLD,
            max_faces: 10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("pose_step_scale", self.pose_step_scale),
            ("default_depth", self.default_depth),
            ("min_depth", self.min_depth),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Bias-corrected first/second moment optimizer over a flat vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// `x -= step * scale_i * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], step: f64, scale: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= step * scale[i] * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Initial scene: mean face, no rotation, `d = (0, 0, d_z)`, neutral light.
/// With landmarks, `d_z` makes the projected mean-face outer-eye-corner
/// distance match the observed one.
pub fn init_scene(
    centers: &[Vector2<f64>],
    landmarks: Option<&[LandmarkSet]>,
    intr: &Intrinsics,
    bundle: &BasisBundle,
    config: &FitConfig,
) -> Result<Scene> {
    let layout = ParamLayout::of(bundle);
    let model_iod = (bundle.mean_vertex(bundle.landmark_indices[RIGHT_EYE_OUTER] as usize)
        - bundle.mean_vertex(bundle.landmark_indices[LEFT_EYE_OUTER] as usize))
    .xy()
    .norm();
    let mut faces = Vec::with_capacity(centers.len());
    for (k, c) in centers.iter().enumerate() {
        if !(c.x >= 0.0 && c.y >= 0.0 && c.x < intr.width as f64 && c.y < intr.height as f64) {
            return Err(Error::OutOfFrame {
                x: c.x,
                y: c.y,
                w: intr.width,
                h: intr.height,
            });
        }
        let mut depth = config.default_depth;
        if let Some(set) = landmarks.and_then(|l| l.get(k)) {
            let (a, b) = (RIGHT_EYE_OUTER, LEFT_EYE_OUTER);
            if set.visible.get(a) == Some(&true) && set.visible.get(b) == Some(&true) {
                let px = (set.points[a] - set.points[b]).norm();
                if px > 0.0 && model_iod > 0.0 {
                    depth = intr.focal * model_iod / px;
                }
            }
        }
        faces.push(FaceParams::neutral(layout, *c, depth));
    }
    Ok(Scene {
        intr: *intr,
        faces,
    })
}

/// Optimization coordinates: canonical order with `d_z` replaced by `ln d_z`.
fn to_opt(face: &FaceParams) -> Vec<f64> {
    let mut x = face.to_flat();
    let iz = face.layout().trans_offset() + 2;
    x[iz] = x[iz].ln();
    x
}

fn from_opt(x: &[f64], template: &FaceParams, min_depth: f64) -> Result<FaceParams> {
    let layout = template.layout();
    let mut flat = x.to_vec();
    let iz = layout.trans_offset() + 2;
    flat[iz] = flat[iz].exp().max(min_depth);
    FaceParams::from_flat(layout, &flat, template.pose.face_center)
}

fn grad_to_opt(g: &ParamGrad, face: &FaceParams) -> Vec<f64> {
    let mut flat = g.to_flat();
    let iz = face.layout().trans_offset() + 2;
    flat[iz] *= face.pose.trans_code.z;
    flat
}

fn step_scales(layout: ParamLayout, pose_scale: f64) -> Vec<f64> {
    let mut s = vec![1.0; layout.dim()];
    for v in &mut s[layout.rot_offset()..layout.illum_offset()] {
        *v = pose_scale;
    }
    s
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub scene: Scene,
    /// Loss at each iterate, followed by the loss of the returned scene.
    pub trace: Vec<LossBreakdown>,
    /// Iteration at which the loss became non-finite, if it did.
    pub diverged: Option<usize>,
}

/// Runs `iters` Adam iterations on all faces jointly and returns the best
/// iterate seen.
pub fn fit_stage(
    scene: &Scene,
    bundle: &BasisBundle,
    obs: &Observations,
    weights: &LossWeights,
    active: ActiveTerms,
    iters: usize,
    config: &FitConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<StageResult> {
    config.validate()?;
    scene.validate()?;
    if iters == 0 || scene.faces.is_empty() {
        let trace = if scene.faces.is_empty() {
            Vec::new()
        } else {
            vec![losses::total_loss_value(scene, bundle, obs, weights, active, extractor)?]
        };
        return Ok(StageResult {
            scene: scene.clone(),
            trace,
            diverged: None,
        });
    }

    let layout = ParamLayout::of(bundle);
    let dim = layout.dim();
    let n = scene.faces.len();
    let mut x: Vec<f64> = scene.faces.iter().flat_map(to_opt).collect();
    let scales: Vec<f64> = (0..n).flat_map(|_| step_scales(layout, config.pose_step_scale)).collect();
    let mut adam = Adam::new(x.len(), config.beta1, config.beta2, config.epsilon);
    let decay_iter = (config.decay_at * iters as f64).floor() as usize;
    let mut step_mult = 1.0;

    let mut current = scene.clone();
    let mut best: Option<(f64, Scene, LossBreakdown)> = None;
    let mut trace = Vec::with_capacity(iters + 1);
    let mut diverged = None;

    for it in 0..iters {
        let (b, grads) = match losses::total_loss(&current, bundle, obs, weights, active, extractor) {
            Ok(v) => v,
            Err(Error::BehindCamera { .. }) if best.is_some() => {
                // Step pushed geometry behind the camera: return to the best
                // iterate with a smaller step.
                let (_, s, _) = best.as_ref().expect("checked");
                current = s.clone();
                x = current.faces.iter().flat_map(to_opt).collect();
                step_mult *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !b.total.is_finite() {
            diverged = Some(it);
            break;
        }
        trace.push(b);
        if best.as_ref().is_none_or(|(l, _, _)| b.total < *l) {
            best = Some((b.total, current.clone(), b));
        }
        if it >= config.convergence_window {
            let prev = trace[trace.len() - 1 - config.convergence_window].total;
            if (prev - b.total).abs() <= config.convergence_tol * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }

        let mut g: Vec<f64> = grads
            .iter()
            .zip(&current.faces)
            .flat_map(|(g, f)| grad_to_opt(g, f))
            .collect();
        if config.shared_illumination && n > 1 {
            let off = layout.illum_offset();
            for c in 0..crate::shading::ILLUM_DIM {
                let sum: f64 = (0..n).map(|k| g[k * dim + off + c]).sum();
                for k in 0..n {
                    g[k * dim + off + c] = sum;
                }
            }
        }
        let lr = config.step_size * step_mult * if it >= decay_iter { config.decay_factor } else { 1.0 };
        adam.step(&mut x, &g, lr, &scales);
        let iz = layout.trans_offset() + 2;
        for k in 0..n {
            let z = &mut x[k * dim + iz];
            *z = z.max(config.min_depth.ln());
        }
        current.faces = current
            .faces
            .iter()
            .enumerate()
            .map(|(k, f)| from_opt(&x[k * dim..(k + 1) * dim], f, config.min_depth))
            .collect::<Result<_>>()?;
    }

    let (scene_out, last) = match best {
        Some((_, s, b)) => (s, b),
        None => {
            let b = losses::total_loss_value(scene, bundle, obs, weights, active, extractor)?;
            (scene.clone(), b)
        }
    };
    trace.push(last);
    Ok(StageResult {
        scene: scene_out,
        trace,
        diverged,
    })
}

/// Observed image data for a multi-face fit, before faces are detected.
#[derive(Debug, Clone)]
pub struct FitInput {
    pub image: Image,
    pub skin_mask: Mask,
    /// Landmark sets in any order; they are matched to detected faces.
    pub landmarks: Vec<LandmarkSet>,
    pub heatmap: Option<Heatmap>,
    /// Used when no heatmap is given.
    pub centers: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub scene: Scene,
    pub breakdown: LossBreakdown,
    pub stage1: Vec<LossBreakdown>,
    pub stage2: Vec<LossBreakdown>,
    pub diverged: Option<usize>,
    /// `landmark_assignment[k]` is the input landmark set used for face `k`.
    pub landmark_assignment: Vec<Option<usize>>,
}

fn visible_centroid(set: &LandmarkSet) -> Option<Vector2<f64>> {
    let pts: Vec<_> = set
        .points
        .iter()
        .zip(&set.visible)
        .filter(|(_, v)| **v)
        .map(|(p, _)| *p)
        .collect();
    if pts.is_empty() {
        return None;
    }
    Some(pts.iter().sum::<Vector2<f64>>() / pts.len() as f64)
}

/// Greedy nearest matching of landmark-set centroids to face centers.
pub fn associate_landmarks(centers: &[Vector2<f64>], sets: &[LandmarkSet]) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for (s, set) in sets.iter().enumerate() {
            if let Some(m) = visible_centroid(set) {
                pairs.push(((m - c).norm(), k, s));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut out = vec![None; centers.len()];
    let mut used = vec![false; sets.len()];
    for (_, k, s) in pairs {
        if out[k].is_none() && !used[s] {
            out[k] = Some(s);
            used[s] = true;
        }
    }
    out
}

/// Detect faces, initialize, and run both stages against one composited render.
pub fn fit_multiface(
    input: &FitInput,
    intr: &Intrinsics,
    bundle: &BasisBundle,
    weights: &LossWeights,
    config: &FitConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<FitOutput> {
    let centers = match &input.heatmap {
        Some(hm) => {
            let peaks = detect::extract_peaks(hm, config.peak_threshold, config.max_faces);
            detect::peaks_to_face_centers(&peaks, hm.stride)
        }
        None => input.centers.clone(),
    };
    if centers.is_empty() {
        return Err(Error::NoFacesFound);
    }
    let assignment = associate_landmarks(&centers, &input.landmarks);
    let n_lm = bundle.landmark_indices.len();
    let landmarks: Vec<LandmarkSet> = assignment
        .iter()
        .map(|a| match a {
            Some(s) => input.landmarks[*s].clone(),
            None => LandmarkSet {
                points: vec![Vector2::zeros(); n_lm],
                visible: vec![false; n_lm],
            },
        })
        .collect();
    let scene = init_scene(&centers, Some(&landmarks), intr, bundle, config)?;
    let obs = Observations {
        image: input.image.clone(),
        skin_mask: input.skin_mask.clone(),
        landmarks,
        centers: centers.clone(),
        heatmap: input.heatmap.clone(),
        crop_boxes: None,
    };
    let s1 = fit_stage(&scene, bundle, &obs, weights, ActiveTerms::STAGE1, config.stage1_iters, config, extractor)?;
    if s1.diverged.is_some() {
        let breakdown = *s1.trace.last().unwrap_or(&LossBreakdown::default());
        return Ok(FitOutput {
            scene: s1.scene,
            breakdown,
            diverged: s1.diverged,
            stage1: s1.trace,
            stage2: Vec::new(),
            landmark_assignment: assignment,
        });
    }
    let s2 = fit_stage(&s1.scene, bundle, &obs, weights, ActiveTerms::STAGE2, config.stage2_iters, config, extractor)?;
    let breakdown = *s2.trace.last().unwrap_or(&LossBreakdown::default());
    Ok(FitOutput {
        scene: s2.scene,
        breakdown,
        diverged: s2.diverged,
        stage1: s1.trace,
        stage2: s2.trace,
        landmark_assignment: assignment,
    })
}

/// Camera-space translation of every face.
pub fn face_translations(scene: &Scene) -> Result<Vec<Vector3<f64>>> {
    scene
        .faces
        .iter()
        .map(|f| camera::decode_translation(&f.pose, &scene.intr))
        .collect()
}
