//! Morphable-model basis bundle: in-memory layout, the MF3D binary format,
//! and a seeded synthetic generator.
//!
//! All per-vertex arrays are planar (structure of arrays): the first `N`
//! entries are x, then `N` y, then `N` z (or r, g, b for albedo). Basis
//! matrices are column-major `3N x K` with every column planar, so a column
//! is one contiguous slice. Columns are pre-multiplied by their mode standard
//! deviation, which makes decoding a plain linear combination with
//! unit-variance coefficients.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::landmarks::{self, LANDMARK_COUNT};

pub const ID_DIM: usize = 80;
pub const EXP_DIM: usize = 64;
pub const ALB_DIM: usize = 80;

pub const MAGIC: &[u8; 5] = b"MF3D\x01";

const TAG_VERTEX_COUNT: [u8; 4] = *b"NVTX";
const TAG_MEAN_SHAPE: [u8; 4] = *b"MSHP";
const TAG_MEAN_ALBEDO: [u8; 4] = *b"MALB";
const TAG_ID_BASIS: [u8; 4] = *b"BIDN";
const TAG_EXP_BASIS: [u8; 4] = *b"BEXP";
const TAG_ALB_BASIS: [u8; 4] = *b"BALB";
const TAG_TRIANGLES: [u8; 4] = *b"TRIS";
const TAG_LANDMARKS: [u8; 4] = *b"LMKS";
const TAG_MOUTHNOSE: [u8; 4] = *b"LMMN";
const TAG_SKIN: [u8; 4] = *b"SKIN";

/// A `3N x cols` column-major matrix of planar columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Basis {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                field: "basis".into(),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Basis { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Basis {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, k: usize) -> &[f32] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// `out += self * coeffs`.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.column(k)) {
                *o += c * b as f64;
            }
        }
    }

    /// `self^T * v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        (0..self.cols)
            .map(|k| {
                self.column(k)
                    .iter()
                    .zip(v)
                    .map(|(&b, &x)| b as f64 * x)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisBundle {
    pub vertex_count: usize,
    pub mean_shape: Vec<f32>,
    pub mean_albedo: Vec<f32>,
    pub id_basis: Basis,
    pub exp_basis: Basis,
    pub alb_basis: Basis,
    pub triangles: Vec<[u32; 3]>,
    pub landmark_indices: Vec<u32>,
    pub mouthnose_mask: Vec<bool>,
    pub skin_region: Vec<u32>,
}

impl BasisBundle {
    pub fn id_dim(&self) -> usize {
        self.id_basis.cols()
    }

    pub fn exp_dim(&self) -> usize {
        self.exp_basis.cols()
    }

    pub fn alb_dim(&self) -> usize {
        self.alb_basis.cols()
    }

    /// Mean-shape vertex `v` in model units.
    pub fn mean_vertex(&self, v: usize) -> Vector3<f64> {
        let n = self.vertex_count;
        Vector3::new(
            self.mean_shape[v] as f64,
            self.mean_shape[n + v] as f64,
            self.mean_shape[2 * n + v] as f64,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count;
        if n == 0 {
            return Err(Error::invariant("vertex_count", "must be positive"));
        }
        let rows = 3 * n;
        check_len("mean_shape", self.mean_shape.len(), rows)?;
        check_len("mean_albedo", self.mean_albedo.len(), rows)?;
        check_finite("mean_shape", &self.mean_shape)?;
        if let Some(a) = self
            .mean_albedo
            .iter()
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::invariant(
                "mean_albedo",
                format!("entry {a} outside [0, 1]"),
            ));
        }
        for (name, basis) in [
            ("id_basis", &self.id_basis),
            ("exp_basis", &self.exp_basis),
            ("alb_basis", &self.alb_basis),
        ] {
            check_len(name, basis.rows(), rows)?;
            check_finite(name, basis.as_slice())?;
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(Error::invariant(
                    "triangles",
                    format!("triangle {t} references vertex {i} >= {n}"),
                ));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invariant(
                    "triangles",
                    format!("triangle {t} repeats a vertex"),
                ));
            }
        }
        check_len("landmark_indices", self.landmark_indices.len(), LANDMARK_COUNT)?;
        if let Some(&i) = self.landmark_indices.iter().find(|&&i| i as usize >= n) {
            return Err(Error::invariant(
                "landmark_indices",
                format!("index {i} >= {n}"),
            ));
        }
        // Distinctness is only satisfiable when the mesh has enough vertices.
        if n >= LANDMARK_COUNT {
            let distinct: HashSet<u32> = self.landmark_indices.iter().copied().collect();
            if distinct.len() != LANDMARK_COUNT {
                return Err(Error::invariant("landmark_indices", "entries are not distinct"));
            }
        }
        check_len("mouthnose_mask", self.mouthnose_mask.len(), LANDMARK_COUNT)?;
        if let Some(&i) = self.skin_region.iter().find(|&&i| i as usize >= n) {
            return Err(Error::invariant("skin_region", format!("index {i} >= {n}")));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(MAGIC)?;
        write_u32_record(&mut w, TAG_VERTEX_COUNT, &[self.vertex_count as u32])?;
        write_f32_record(&mut w, TAG_MEAN_SHAPE, &self.mean_shape)?;
        write_f32_record(&mut w, TAG_MEAN_ALBEDO, &self.mean_albedo)?;
        write_f32_record(&mut w, TAG_ID_BASIS, self.id_basis.as_slice())?;
        write_f32_record(&mut w, TAG_EXP_BASIS, self.exp_basis.as_slice())?;
        write_f32_record(&mut w, TAG_ALB_BASIS, self.alb_basis.as_slice())?;
        let tris: Vec<u32> = self.triangles.iter().flatten().copied().collect();
        write_u32_record(&mut w, TAG_TRIANGLES, &tris)?;
        write_u32_record(&mut w, TAG_LANDMARKS, &self.landmark_indices)?;
        let mask: Vec<u32> = self.mouthnose_mask.iter().map(|&b| b as u32).collect();
        write_u32_record(&mut w, TAG_MOUTHNOSE, &mask)?;
        write_u32_record(&mut w, TAG_SKIN, &self.skin_region)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_bundle(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}

fn check_len(field: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::invariant(
            field,
            format!("length {got}, expected {expected}"),
        ));
    }
    Ok(())
}

fn check_finite(field: &str, values: &[f32]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invariant(field, "non-finite entry"));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, tag: [u8; 4], count: usize) -> Result<()> {
    w.write_all(&tag)?;
    w.write_all(&(count as u64).to_le_bytes())?;
    Ok(())
}

fn write_f32_record<W: Write>(w: &mut W, tag: [u8; 4], values: &[f32]) -> Result<()> {
    write_header(w, tag, values.len())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn write_u32_record<W: Write>(w: &mut W, tag: [u8; 4], values: &[u32]) -> Result<()> {
    write_header(w, tag, values.len())?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn tag_name(tag: [u8; 4]) -> &'static str {
    match tag {
        TAG_VERTEX_COUNT => "vertex_count",
        TAG_MEAN_SHAPE => "mean_shape",
        TAG_MEAN_ALBEDO => "mean_albedo",
        TAG_ID_BASIS => "id_basis",
        TAG_EXP_BASIS => "exp_basis",
        TAG_ALB_BASIS => "alb_basis",
        TAG_TRIANGLES => "triangles",
        TAG_LANDMARKS => "landmark_indices",
        TAG_MOUTHNOSE => "mouthnose_mask",
        TAG_SKIN => "skin_region",
        _ => "unknown",
    }
}

fn parse_bundle(bytes: &[u8]) -> Result<BasisBundle> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut records: HashMap<[u8; 4], &[u8]> = HashMap::new();
    let mut pos = MAGIC.len();
    while pos < bytes.len() {
        if bytes.len() - pos < 12 {
            return Err(Error::TruncatedPayload {
                field: "record header".into(),
            });
        }
        let tag: [u8; 4] = bytes[pos..pos + 4].try_into().unwrap();
        let name = tag_name(tag);
        if name == "unknown" {
            return Err(Error::UnknownTag(tag));
        }
        let count = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
        pos += 12;
        let len = count
            .checked_mul(4)
            .and_then(|l| usize::try_from(l).ok())
            .filter(|&l| l <= bytes.len() - pos)
            .ok_or_else(|| Error::TruncatedPayload { field: name.into() })?;
        if records.insert(tag, &bytes[pos..pos + len]).is_some() {
            return Err(Error::invariant(name, "duplicate record"));
        }
        pos += len;
    }

    let take = |tag: [u8; 4]| -> Result<&[u8]> {
        records
            .get(&tag)
            .copied()
            .ok_or_else(|| Error::invariant(tag_name(tag), "missing record"))
    };
    let f32s = |tag| -> Result<Vec<f32>> {
        Ok(take(tag)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let u32s = |tag| -> Result<Vec<u32>> {
        Ok(take(tag)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let count = u32s(TAG_VERTEX_COUNT)?;
    if count.len() != 1 {
        return Err(Error::invariant("vertex_count", "expected a single value"));
    }
    let n = count[0] as usize;
    if n == 0 {
        return Err(Error::invariant("vertex_count", "must be positive"));
    }
    let rows = 3 * n;
    let basis = |tag| -> Result<Basis> {
        let data = f32s(tag)?;
        if data.len() % rows != 0 {
            return Err(Error::invariant(
                tag_name(tag),
                format!("{} entries is not a multiple of 3N = {rows}", data.len()),
            ));
        }
        Basis::new(rows, data.len() / rows, data)
    };
    let tris = u32s(TAG_TRIANGLES)?;
    if tris.len() % 3 != 0 {
        return Err(Error::invariant("triangles", "length is not a multiple of 3"));
    }
    let mask = u32s(TAG_MOUTHNOSE)?;
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::invariant("mouthnose_mask", "entries must be 0 or 1"));
    }

    let bundle = BasisBundle {
        vertex_count: n,
        mean_shape: f32s(TAG_MEAN_SHAPE)?,
        mean_albedo: f32s(TAG_MEAN_ALBEDO)?,
        id_basis: basis(TAG_ID_BASIS)?,
        exp_basis: basis(TAG_EXP_BASIS)?,
        alb_basis: basis(TAG_ALB_BASIS)?,
        triangles: tris.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        landmark_indices: u32s(TAG_LANDMARKS)?,
        mouthnose_mask: mask.iter().map(|&m| m == 1).collect(),
        skin_region: u32s(TAG_SKIN)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<BasisBundle> {
    let bytes = fs::read(path)?;
    parse_bundle(&bytes)
}

pub fn save_bundle(bundle: &BasisBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic bundle
// ---------------------------------------------------------------------------

/// Per-vertex RMS displacement of the leading shape mode at unit coefficient,
/// in model units (the mean face spans roughly [-1, 1] horizontally).
const SHAPE_MODE_SCALE: f64 = 0.04;
/// Per-vertex RMS color change of the leading albedo mode.
const ALBEDO_MODE_SCALE: f64 = 0.04;
const MODE_DECAY: f64 = 8.0;
const FLIP_CHECK_DRAWS: usize = 48;

/// Deterministic sphere-like face bundle with `n_vertices` vertices and the
/// standard 80/64/80 basis widths.
///
/// Shape modes are smooth random fields, orthonormalized jointly (identity
/// and expression) and against the similarity-transform directions, then
/// scaled by a decaying spectrum. The global scale is shrunk until no
/// triangle flips for coefficient draws in `[-3, 3]`.
pub fn synth_bundle(seed: u64, n_vertices: usize) -> Result<BasisBundle> {
    if n_vertices < 4 {
        return Err(Error::InvalidArgument(format!(
            "synth_bundle needs at least 4 vertices, got {n_vertices}"
        )));
    }
    let n = n_vertices;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dirs = fibonacci_sphere(n, &mut rng);
    let triangles = convex_hull(&dirs)?;

    let axes = Vector3::new(
        1.0 + 0.05 * rng.random_range(-1.0..1.0),
        1.25 + 0.05 * rng.random_range(-1.0..1.0),
        0.9 + 0.05 * rng.random_range(-1.0..1.0),
    );
    let bump = SmoothField::random(&mut rng, 3, 1.5);
    let verts: Vec<Vector3<f64>> = dirs
        .iter()
        .map(|d| {
            let r = 1.0 + 0.04 * bump.eval(d)[0];
            d.component_mul(&axes) * r
        })
        .collect();

    let mut mean_shape = vec![0.0f32; 3 * n];
    for (v, p) in verts.iter().enumerate() {
        for c in 0..3 {
            mean_shape[c * n + v] = p[c] as f32;
        }
    }

    let tone = [0.72, 0.52, 0.42];
    let tint = SmoothField::random(&mut rng, 3, 2.0);
    let mut mean_albedo = vec![0.0f32; 3 * n];
    for (v, d) in dirs.iter().enumerate() {
        let t = tint.eval(d);
        for c in 0..3 {
            mean_albedo[c * n + v] = (tone[c] + 0.05 * t[c]).clamp(0.0, 1.0) as f32;
        }
    }

    // Shape modes: identity and expression orthonormalized together.
    let rows = 3 * n;
    let mut shape_basis: Vec<Vec<f64>> = similarity_directions(&verts);
    orthonormalize_in_place(&mut shape_basis);
    let fixed = shape_basis.len();
    for k in 0..ID_DIM + EXP_DIM {
        let freq = 1.0 + 2.5 * k as f64 / (ID_DIM + EXP_DIM) as f64;
        let field = SmoothField::random(&mut rng, 4, freq);
        let mut col = vec![0.0; rows];
        for (v, d) in dirs.iter().enumerate() {
            let f = field.eval(d);
            for c in 0..3 {
                col[c * n + v] = f[c];
            }
        }
        shape_basis.push(col);
    }
    orthonormalize_in_place(&mut shape_basis);
    let shape_cols: Vec<Vec<f64>> = shape_basis.split_off(fixed);

    let sqrt_n = (n as f64).sqrt();
    let spectrum = |k: usize| 1.0 / (1.0 + k as f64 / MODE_DECAY);
    let mut shape_sigma: Vec<f64> = (0..ID_DIM)
        .map(|k| SHAPE_MODE_SCALE * sqrt_n * spectrum(k))
        .chain((0..EXP_DIM).map(|k| 0.8 * SHAPE_MODE_SCALE * sqrt_n * spectrum(k)))
        .collect();

    // Shrink until deformations within |delta| <= 3 keep every triangle oriented.
    let mut check_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11b);
    let draws: Vec<Vec<f64>> = (0..FLIP_CHECK_DRAWS)
        .map(|_| {
            (0..ID_DIM + EXP_DIM)
                .map(|_| check_rng.random_range(-3.0..=3.0))
                .collect()
        })
        .collect();
    for _ in 0..60 {
        if !any_flips(&verts, &triangles, &shape_cols, &shape_sigma, &draws) {
            break;
        }
        shape_sigma.iter_mut().for_each(|s| *s *= 0.8);
    }

    let to_basis = |cols: &[Vec<f64>], sigma: &[f64]| -> Basis {
        let mut data = Vec::with_capacity(rows * cols.len());
        for (col, s) in cols.iter().zip(sigma) {
            data.extend(col.iter().map(|&x| (x * s) as f32));
        }
        Basis::new(rows, cols.len(), data).expect("basis shape")
    };
    let id_basis = to_basis(&shape_cols[..ID_DIM], &shape_sigma[..ID_DIM]);
    let exp_basis = to_basis(&shape_cols[ID_DIM..], &shape_sigma[ID_DIM..]);

    // Albedo modes, orthogonal to the per-channel constant directions.
    let mut alb: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let mut e = vec![0.0; rows];
            e[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = 1.0);
            e
        })
        .collect();
    orthonormalize_in_place(&mut alb);
    for k in 0..ALB_DIM {
        let freq = 2.0 + 4.0 * k as f64 / ALB_DIM as f64;
        let field = SmoothField::random(&mut rng, 4, freq);
        let mut col = vec![0.0; rows];
        for (v, d) in dirs.iter().enumerate() {
            let f = field.eval(d);
            for c in 0..3 {
                col[c * n + v] = f[c];
            }
        }
        alb.push(col);
    }
    orthonormalize_in_place(&mut alb);
    let alb_cols = alb.split_off(3);
    let alb_sigma: Vec<f64> = (0..ALB_DIM)
        .map(|k| ALBEDO_MODE_SCALE * sqrt_n * spectrum(k))
        .collect();
    let alb_basis = to_basis(&alb_cols, &alb_sigma);

    let (landmark_indices, skin_region) = place_landmarks(&dirs);

    let bundle = BasisBundle {
        vertex_count: n,
        mean_shape,
        mean_albedo,
        id_basis,
        exp_basis,
        alb_basis,
        triangles,
        landmark_indices,
        mouthnose_mask: landmarks::mouthnose_mask(),
        skin_region,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn fibonacci_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64
                + rng.random_range(-0.2..0.2) / n as f64;
            let r = (1.0 - y * y).max(0.0).sqrt();
            let phi = i as f64 * golden + rng.random_range(-0.2..0.2);
            Vector3::new(r * phi.cos(), y, r * phi.sin()).normalize()
        })
        .collect()
}

/// Incremental convex hull of points in general position on a sphere.
/// Triangles are counter-clockwise seen from outside.
fn convex_hull(points: &[Vector3<f64>]) -> Result<Vec<[u32; 3]>> {
    let n = points.len();
    let eps = 1e-12;
    let normal = |f: &[usize; 3]| {
        (points[f[1]] - points[f[0]]).cross(&(points[f[2]] - points[f[0]]))
    };

    // Initial tetrahedron from the first four non-degenerate points.
    let (a, b) = (0usize, 1usize);
    let c = (2..n)
        .find(|&c| (points[b] - points[a]).cross(&(points[c] - points[a])).norm() > 1e-9)
        .ok_or_else(|| Error::invariant("synth mesh", "collinear points"))?;
    let d = (2..n)
        .filter(|&d| d != c)
        .find(|&d| normal(&[a, b, c]).dot(&(points[d] - points[a])).abs() > 1e-9)
        .ok_or_else(|| Error::invariant("synth mesh", "coplanar points"))?;

    let mut faces: Vec<Option<[usize; 3]>> = Vec::new();
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    let add_face = |faces: &mut Vec<Option<[usize; 3]>>,
                    edges: &mut HashMap<(usize, usize), usize>,
                    f: [usize; 3]| {
        let id = faces.len();
        faces.push(Some(f));
        for e in 0..3 {
            edges.insert((f[e], f[(e + 1) % 3]), id);
        }
    };

    let base = if normal(&[a, b, c]).dot(&(points[d] - points[a])) > 0.0 {
        [a, c, b]
    } else {
        [a, b, c]
    };
    let [p, q, r] = base;
    for f in [base, [p, d, q], [q, d, r], [r, d, p]] {
        add_face(&mut faces, &mut edges, f);
    }

    for i in 0..n {
        if i == a || i == b || i == c || i == d {
            continue;
        }
        let visible: Vec<usize> = faces
            .iter()
            .enumerate()
            .filter_map(|(id, f)| {
                let f = f.as_ref()?;
                (normal(f).dot(&(points[i] - points[f[0]])) > eps).then_some(id)
            })
            .collect();
        if visible.is_empty() {
            continue;
        }
        let visible_set: HashSet<usize> = visible.iter().copied().collect();
        let mut horizon = Vec::new();
        for &id in &visible {
            let f = faces[id].unwrap();
            for e in 0..3 {
                let (u, v) = (f[e], f[(e + 1) % 3]);
                match edges.get(&(v, u)) {
                    Some(other) if visible_set.contains(other) => {}
                    _ => horizon.push((u, v)),
                }
            }
        }
        for &id in &visible {
            let f = faces[id].take().unwrap();
            for e in 0..3 {
                let key = (f[e], f[(e + 1) % 3]);
                if edges.get(&key) == Some(&id) {
                    edges.remove(&key);
                }
            }
        }
        for (u, v) in horizon {
            add_face(&mut faces, &mut edges, [u, v, i]);
        }
    }

    Ok(faces
        .into_iter()
        .flatten()
        .map(|f| [f[0] as u32, f[1] as u32, f[2] as u32])
        .collect())
}

/// Sum of a few random sinusoids per output channel, evaluated on unit directions.
struct SmoothField {
    // (channel, amplitude, wave vector, phase)
    terms: Vec<(usize, f64, Vector3<f64>, f64)>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, per_channel: usize, freq: f64) -> Self {
        let mut terms = Vec::new();
        for c in 0..3 {
            for _ in 0..per_channel {
                let dir = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .normalize();
                let amp: f64 = rng.sample(StandardNormal);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                terms.push((c, amp, dir * freq, phase));
            }
        }
        SmoothField { terms }
    }

    fn eval(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, amp, k, phase) in &self.terms {
            out[*c] += amp * (k.dot(p) + phase).sin();
        }
        out
    }
}

/// Translation, infinitesimal rotation, and scale directions of a point set.
fn similarity_directions(verts: &[Vector3<f64>]) -> Vec<Vec<f64>> {
    let n = verts.len();
    let mut dirs = Vec::with_capacity(7);
    for c in 0..3 {
        let mut t = vec![0.0; 3 * n];
        t[c * n..(c + 1) * n].iter_mut().for_each(|x| *x = 1.0);
        dirs.push(t);
    }
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        let mut r = vec![0.0; 3 * n];
        for (v, p) in verts.iter().enumerate() {
            let d = axis.cross(p);
            for c in 0..3 {
                r[c * n + v] = d[c];
            }
        }
        dirs.push(r);
    }
    let mut s = vec![0.0; 3 * n];
    for (v, p) in verts.iter().enumerate() {
        for c in 0..3 {
            s[c * n + v] = p[c];
        }
    }
    dirs.push(s);
    dirs
}

/// Modified Gram-Schmidt with re-orthogonalization, in column order. Columns whose residual vanishes become exact zeros.
fn orthonormalize_in_place(cols: &mut [Vec<f64>]) {
    for k in 0..cols.len() {
        let original_norm = norm(&cols[k]);
        for _pass in 0..2 {
            for j in 0..k {
                let (head, tail) = cols.split_at_mut(k);
                let q = &head[j];
                let proj = dot(q, &tail[0]);
                if proj != 0.0 {
                    tail[0].iter_mut().zip(q).for_each(|(x, &qv)| *x -= proj * qv);
                }
            }
        }
        let nrm = norm(&cols[k]);
        if nrm <= 1e-8 * original_norm.max(1e-300) || nrm == 0.0 {
            cols[k].iter_mut().for_each(|x| *x = 0.0);
        } else {
            cols[k].iter_mut().for_each(|x| *x /= nrm);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn any_flips(
    verts: &[Vector3<f64>],
    triangles: &[[u32; 3]],
    cols: &[Vec<f64>],
    sigma: &[f64],
    draws: &[Vec<f64>],
) -> bool {
    let n = verts.len();
    let rest: Vec<Vector3<f64>> = triangles
        .iter()
        .map(|t| tri_normal(verts, t))
        .collect();
    let deformed_flips = |coeffs: &dyn Fn(usize) -> f64| {
        let mut shape: Vec<f64> = (0..3 * n).map(|i| verts[i % n][i / n]).collect();
        for (k, col) in cols.iter().enumerate() {
            let c = coeffs(k) * sigma[k];
            if c != 0.0 {
                shape.iter_mut().zip(col).for_each(|(s, &b)| *s += c * b);
            }
        }
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|v| Vector3::new(shape[v], shape[n + v], shape[2 * n + v]))
            .collect();
        triangles
            .iter()
            .zip(&rest)
            .any(|(t, n0)| tri_normal(&pts, t).dot(n0) <= 0.0)
    };
    for k in 0..cols.len() {
        for s in [-3.0, 3.0] {
            if deformed_flips(&|j| if j == k { s } else { 0.0 }) {
                return true;
            }
        }
    }
    draws.iter().any(|d| deformed_flips(&|j| d[j]))
}

fn tri_normal(pts: &[Vector3<f64>], t: &[u32; 3]) -> Vector3<f64> {
    let (a, b, c) = (pts[t[0] as usize], pts[t[1] as usize], pts[t[2] as usize]);
    (b - a).cross(&(c - a))
}

/// Maps the canonical landmark layout onto the front (-z) cap of the mesh and
/// selects the skin region (front cap minus eyes and mouth).
fn place_landmarks(dirs: &[Vector3<f64>]) -> (Vec<u32>, Vec<u32>) {
    let n = dirs.len();
    let template = landmarks::template_2d();
    let to_dir = |p: &[f64; 2]| {
        let (x, y) = (0.7 * p[0], 0.7 * p[1]);
        Vector3::new(x, y, -(1.0 - x * x - y * y).max(0.0).sqrt())
    };
    let mut used = vec![false; n];
    let distinct = n >= LANDMARK_COUNT;
    let mut indices = Vec::with_capacity(LANDMARK_COUNT);
    for p in &template {
        let target = to_dir(p);
        let best = (0..n)
            .filter(|&v| !distinct || !used[v])
            .min_by(|&a, &b| {
                let da = (dirs[a] - target).norm_squared();
                let db = (dirs[b] - target).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("at least one vertex");
        used[best] = true;
        indices.push(best as u32);
    }

    let avoid = [
        to_dir(&[-0.4, -0.25]),
        to_dir(&[0.4, -0.25]),
        to_dir(&[0.0, 0.55]),
    ];
    let mut skin: Vec<u32> = (0..n)
        .filter(|&v| {
            dirs[v].z < -0.55 && avoid.iter().all(|a| (dirs[v] - a).norm() > 0.18)
        })
        .map(|v| v as u32)
        .collect();
    if skin.is_empty() {
        let nose = to_dir(&template[30]);
        let v = (0..n)
            .min_by(|&a, &b| {
                (dirs[a] - nose)
                    .norm_squared()
                    .total_cmp(&(dirs[b] - nose).norm_squared())
            })
            .unwrap();
        skin.push(v as u32);
    }
    (indices, skin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bundle() -> BasisBundle {
        synth_bundle(7, 4).unwrap()
    }

    #[test]
    fn toy_roundtrip_bit_exact() {
        let b = toy_bundle();
        assert_eq!(b.vertex_count, 4);
        let bytes = b.to_bytes().unwrap();
        let back = BasisBundle::read_from(&bytes[..]).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn triangle_index_equal_to_n_is_rejected() {
        let mut b = toy_bundle();
        b.triangles[0][1] = b.vertex_count as u32;
        let mut bytes = Vec::new();
        // Bypass validate-on-write to produce a corrupt file.
        bytes.extend_from_slice(MAGIC);
        write_u32_record(&mut bytes, TAG_VERTEX_COUNT, &[4]).unwrap();
        write_f32_record(&mut bytes, TAG_MEAN_SHAPE, &b.mean_shape).unwrap();
        write_f32_record(&mut bytes, TAG_MEAN_ALBEDO, &b.mean_albedo).unwrap();
        write_f32_record(&mut bytes, TAG_ID_BASIS, b.id_basis.as_slice()).unwrap();
        write_f32_record(&mut bytes, TAG_EXP_BASIS, b.exp_basis.as_slice()).unwrap();
        write_f32_record(&mut bytes, TAG_ALB_BASIS, b.alb_basis.as_slice()).unwrap();
        let tris: Vec<u32> = b.triangles.iter().flatten().copied().collect();
        write_u32_record(&mut bytes, TAG_TRIANGLES, &tris).unwrap();
        write_u32_record(&mut bytes, TAG_LANDMARKS, &b.landmark_indices).unwrap();
        let mask: Vec<u32> = b.mouthnose_mask.iter().map(|&m| m as u32).collect();
        write_u32_record(&mut bytes, TAG_MOUTHNOSE, &mask).unwrap();
        write_u32_record(&mut bytes, TAG_SKIN, &b.skin_region).unwrap();
        match BasisBundle::read_from(&bytes[..]) {
            Err(Error::InvariantViolation { field, .. }) => assert_eq!(field, "triangles"),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(
            BasisBundle::read_from(&b"MF3X\x01"[..]),
            Err(Error::BadMagic)
        ));
        let bytes = toy_bundle().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            BasisBundle::read_from(cut),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let mut bytes = toy_bundle().to_bytes().unwrap();
        bytes.extend_from_slice(b"XTRA");
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            BasisBundle::read_from(&bytes[..]),
            Err(Error::UnknownTag(t)) if &t == b"XTRA"
        ));
    }

    #[test]
    fn zero_vertex_bundle_rejected_before_write() {
        let mut b = toy_bundle();
        b.vertex_count = 0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mf3d");
        assert!(save_bundle(&b, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn synth_is_deterministic_and_seed_dependent() {
        let a = synth_bundle(1, 64).unwrap();
        let b = synth_bundle(1, 64).unwrap();
        let c = synth_bundle(2, 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mean_shape, c.mean_shape);
        assert_eq!((a.id_dim(), a.exp_dim(), a.alb_dim()), (80, 64, 80));
    }

    #[test]
    fn synth_basis_columns_are_orthogonal() {
        let b = synth_bundle(1, 64).unwrap();
        let shape: Vec<&[f32]> = (0..b.id_dim())
            .map(|k| b.id_basis.column(k))
            .chain((0..b.exp_dim()).map(|k| b.exp_basis.column(k)))
            .collect();
        let alb: Vec<&[f32]> = (0..b.alb_dim()).map(|k| b.alb_basis.column(k)).collect();
        for cols in [&shape, &alb] {
            for i in 0..cols.len() {
                for j in (i + 1)..cols.len() {
                    let d: f64 = cols[i]
                        .iter()
                        .zip(cols[j])
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum();
                    assert!(d.abs() < 1e-6, "columns {i},{j}: dot {d}");
                }
            }
        }
    }

    #[test]
    fn closed_mesh_every_edge_shared_twice() {
        for n in [4, 5, 64, 300] {
            let b = synth_bundle(3, n).unwrap();
            assert_eq!(b.triangles.len(), 2 * n - 4, "euler characteristic for n={n}");
            let mut count: HashMap<(u32, u32), i32> = HashMap::new();
            for t in &b.triangles {
                for e in 0..3 {
                    *count.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
                }
            }
            for (&(u, v), &c) in &count {
                assert_eq!(c, 1);
                assert_eq!(count.get(&(v, u)), Some(&1));
            }
        }
    }

    #[test]
    fn small_bundle_keeps_trailing_columns_zero() {
        let b = synth_bundle(1, 5).unwrap();
        // 3N = 15 minus 7 similarity directions leaves 8 usable shape modes.
        let nonzero = (0..b.id_dim())
            .filter(|&k| b.id_basis.column(k).iter().any(|&x| x != 0.0))
            .count();
        assert!(nonzero <= 8);
    }
}
