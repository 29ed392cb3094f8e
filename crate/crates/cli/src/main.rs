use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector2;

use mface::detect::{self, Heatmap};
use mface::eval;
use mface::fitter::{self, FitInput};
use mface::imaging::{Image, Mask};
use mface::landmarks::LANDMARK_COUNT;
use mface::losses::MeanPoolExtractor;
use mface::{morphable, raster, scene_io, shading, BasisBundle, Config, Error, ParamLayout};

#[derive(Parser)]
#[command(name = "mface", version, about = "Multi-face morphable-model fitting engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// MF3D basis bundle; a synthetic bundle is generated from --seed when omitted.
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// TOML config with [camera], [weights], [fit] and [synth] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Vertex count of the generated bundle when --bundle is omitted.
    #[arg(long, global = true, default_value_t = 500)]
    vertices: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render a random multi-face scene and write its image, mask, landmarks,
    /// centers, heatmap and ground-truth scene.
    Synth {
        #[arg(long, default_value_t = 1)]
        faces: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the bundle used, as bundle.mf3d.
        #[arg(long)]
        save_bundle: bool,
    },
    /// Fit all faces of an image. Faces come from --heatmap peaks or --centers.
    Fit {
        #[arg(long)]
        image: PathBuf,
        /// Skin mask (PGM or PNG, nonzero = skin).
        #[arg(long)]
        mask: PathBuf,
        /// Landmark file: lines of `x y [visible]`, 68 per face.
        #[arg(long)]
        landmarks: PathBuf,
        /// 16-bit PGM center heatmap.
        #[arg(long, conflicts_with = "centers")]
        heatmap: Option<PathBuf>,
        /// Text file of `c_x c_y` lines.
        #[arg(long)]
        centers: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV: iter,c,pix,per,lan,norm,var,total (stage 1 then stage 2).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render a scene file to an image (PNG or PPM by extension).
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        /// 8-bit depth visualization (PGM).
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Print `row,col,score,c_x,c_y` for each heatmap peak.
    DetectPeaks {
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_faces: Option<usize>,
        #[arg(long, default_value_t = detect::DEFAULT_STRIDE)]
        stride: u32,
    },
    /// Per-face NME of a fitted scene against a ground-truth scene.
    /// CSV columns: face,nme68,nme_dense,yaw_bucket.
    EvalNme {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative error distribution. Input: one error per line, or the
    /// nme68 column of an eval-nme CSV. CSV columns: threshold,fraction.
    Ced {
        #[arg(long)]
        errors: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        max: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint-scene versus per-face pipeline timing. CSV columns: n,t_joint,t_perface.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one face of a scene as an OBJ with per-vertex shaded colors.
    ExportObj {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        face: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    Ok(match &common.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    })
}

fn load_bundle(common: &Common) -> anyhow::Result<BasisBundle> {
    Ok(match &common.bundle {
        Some(p) => mface::load_bundle(p).with_context(|| format!("loading bundle {}", p.display()))?,
        None => mface::synth_bundle(common.seed, common.vertices)?,
    })
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn read_centers(path: &Path) -> anyhow::Result<Vec<Vector2<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let v: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
        if v.len() != 2 {
            bail!("center lines must be `c_x c_y`");
        }
        out.push(Vector2::new(v[0], v[1]));
    }
    Ok(out)
}

fn read_scene(path: &Path, bundle: &BasisBundle) -> anyhow::Result<mface::Scene> {
    let f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(scene_io::read_scene(f, ParamLayout::of(bundle))?)
}

/// Set when a fit diverged; mapped to exit code 3.
#[derive(Debug)]
struct Diverged;

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "optimization diverged")
    }
}

impl std::error::Error for Diverged {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli.common)?;
    let bundle = load_bundle(&cli.common)?;
    let extractor = MeanPoolExtractor::default();
    match cli.command {
        Command::Synth { faces, out_dir, save_bundle } => {
            let (w, h) = (config.camera.width, config.camera.height);
            let s = eval::synth_scene(cli.common.seed, faces, w, h, &bundle, &config.synth)?;
            fs::create_dir_all(&out_dir)?;
            s.image.save(out_dir.join("image.png"))?;
            s.skin_mask.save(out_dir.join("mask.pgm"))?;
            scene_io::write_landmarks(File::create(out_dir.join("landmarks.txt"))?, &s.landmarks)?;
            scene_io::write_scene(File::create(out_dir.join("scene.txt"))?, &s.scene)?;
            let mut c = BufWriter::new(File::create(out_dir.join("centers.txt"))?);
            for p in &s.centers {
                writeln!(c, "{} {}", p.x, p.y)?;
            }
            detect::build_gt_heatmap(&s.centers, w, h, detect::DEFAULT_STRIDE)?
                .write_pgm16(out_dir.join("heatmap.pgm"))?;
            if save_bundle {
                mface::save_bundle(&bundle, out_dir.join("bundle.mf3d"))?;
            }
            eprintln!("wrote {} face(s) to {}", faces, out_dir.display());
        }
        Command::Fit { image, mask, landmarks, heatmap, centers, out, trace } => {
            let image = Image::load(&image)?;
            let skin_mask = Mask::load(&mask)?;
            let lm = scene_io::read_landmarks(BufReader::new(File::open(&landmarks)?), LANDMARK_COUNT)?;
            let heatmap = heatmap
                .map(|p| Heatmap::read_pgm(p, detect::DEFAULT_STRIDE))
                .transpose()?;
            let centers = match (&heatmap, centers) {
                (None, Some(p)) => read_centers(&p)?,
                (None, None) => bail!("either --heatmap or --centers is required"),
                (Some(_), _) => Vec::new(),
            };
            let intr = mface::Intrinsics::with_frame_focal(config.camera.focal_224, image.width, image.height)?;
            let input = FitInput { image, skin_mask, landmarks: lm, heatmap, centers };
            let result = fitter::fit_multiface(&input, &intr, &bundle, &config.weights, &config.fit, &extractor)?;
            scene_io::write_scene(BufWriter::new(File::create(&out)?), &result.scene)?;
            if let Some(p) = trace {
                let all: Vec<_> = result.stage1.iter().chain(&result.stage2).copied().collect();
                scene_io::write_trace_csv(BufWriter::new(File::create(p)?), &all)?;
            }
            let b = result.breakdown;
            eprintln!(
                "{} face(s): total {:.6} (pix {:.6}, per {:.6}, lan {:.6}, norm {:.6}, var {:.6})",
                result.scene.faces.len(),
                b.total,
                b.pix,
                b.per,
                b.lan,
                b.norm,
                b.var
            );
            if result.diverged.is_some() {
                return Err(Diverged.into());
            }
        }
        Command::Render { scene, out, mask_out, depth_out } => {
            let scene = read_scene(&scene, &bundle)?;
            let r = raster::render_scene(&scene, &bundle)?;
            r.image().save(&out)?;
            if let Some(p) = mask_out {
                r.coverage().save(p)?;
            }
            if let Some(p) = depth_out {
                mface::imaging::write_pgm8(File::create(p)?, r.width, r.height, &r.depth_pgm_bytes())?;
            }
        }
        Command::DetectPeaks { heatmap, threshold, max_faces, stride } => {
            let hm = Heatmap::read_pgm(&heatmap, stride)?;
            let peaks = detect::extract_peaks(
                &hm,
                threshold.unwrap_or(config.fit.peak_threshold),
                max_faces.unwrap_or(config.fit.max_faces),
            );
            let centers = detect::peaks_to_face_centers(&peaks, stride);
            println!("row,col,score,c_x,c_y");
            for (p, c) in peaks.iter().zip(&centers) {
                println!("{},{},{},{},{}", p.row, p.col, p.score, c.x, c.y);
            }
        }
        Command::EvalNme { pred, gt, out } => {
            let pred = read_scene(&pred, &bundle)?;
            let gt = read_scene(&gt, &bundle)?;
            let records = eval::evaluate_scene(&pred, &gt, &bundle)?;
            eval::write_nme_csv(output(&out)?, &records)?;
        }
        Command::Ced { errors, max, steps, out } => {
            let text = fs::read_to_string(&errors)?;
            let mut values = Vec::new();
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let field = if line.contains(',') { line.split(',').nth(1).unwrap_or("") } else { line };
                match field.trim().parse::<f64>() {
                    Ok(v) => values.push(v),
                    Err(_) if values.is_empty() => continue, // header
                    Err(_) => bail!("bad error value `{field}`"),
                }
            }
            let steps = steps.max(1);
            let grid: Vec<f64> = (0..=steps).map(|i| max * i as f64 / steps as f64).collect();
            eval::write_ced_csv(output(&out)?, &eval::ced_curve(&values, &grid)?)?;
        }
        Command::Bench { sizes, runs, out } => {
            let (w, h) = (config.camera.width, config.camera.height);
            let rows = eval::bench_shared_decoder(&sizes, &bundle, w, h, runs, cli.common.seed, &extractor)?;
            eval::write_bench_csv(output(&out)?, &rows)?;
            let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.t_perface).collect();
            if rows.len() >= 2 {
                eprintln!("per-face R^2 = {:.4}", eval::linear_r2(&x, &y));
            }
            for r in &rows {
                eprintln!("n={}: joint/per-face = {:.3}", r.n, r.t_joint / r.t_perface);
            }
        }
        Command::ExportObj { scene, face, out } => {
            let scene = read_scene(&scene, &bundle)?;
            let params = scene
                .faces
                .get(face)
                .with_context(|| format!("scene has {} face(s)", scene.faces.len()))?;
            let decoded = morphable::decode(params, &bundle, &scene.intr)?;
            let colors: Vec<[f64; 3]> = decoded
                .albedo
                .iter()
                .zip(&decoded.normals)
                .map(|(a, n)| shading::shade(a, n, &params.illum))
                .collect();
            morphable::write_obj(BufWriter::new(File::create(&out)?), &decoded.shape_cam, &colors, &bundle.triangles)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Diverged>().is_some() {
                return ExitCode::from(3);
            }
            match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => ExitCode::from(3),
                Some(Error::Io(_)) => ExitCode::FAILURE,
                Some(_) => ExitCode::from(2),
                None => ExitCode::FAILURE,
            }
        }
    }
}
