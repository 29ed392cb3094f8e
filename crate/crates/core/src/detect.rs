//! Stride-r center heatmaps: ground-truth construction, local-peak
//! extraction, and 16-bit PGM import/export.

use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{parse_pnm_header, write_pgm16};

pub const DEFAULT_STRIDE: u32 = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Row-major grid of center scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub stride: u32,
    pub data: Vec<f64>,
}

/// A grid cell `(row, col)` with its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

impl Heatmap {
    pub fn zeros(rows: usize, cols: usize, stride: u32) -> Self {
        Heatmap {
            rows,
            cols,
            stride,
            data: vec![0.0; rows * cols],
        }
    }

    /// Grid for an image of the given size; the size must be a multiple of `stride`.
    pub fn for_image(width: u32, height: u32, stride: u32) -> Result<Self> {
        if stride == 0 || width % stride != 0 || height % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} is not divisible by stride {stride}"
            )));
        }
        Ok(Heatmap::zeros(
            (height / stride) as usize,
            (width / stride) as usize,
            stride,
        ))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        for (cell, &value) in self.data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::ProbabilityOutOfRange { value, cell });
            }
        }
        Ok(())
    }

    /// Grid cell nearest to a pixel coordinate. Cell centers sit at
    /// `(k + 0.5) * r`; a point exactly between two centers goes to the lower
    /// index.
    pub fn cell_of(&self, center: Vector2<f64>) -> (usize, usize) {
        let r = self.stride as f64;
        let idx = |c: f64, n: usize| ((c / r - 1.0).ceil().max(0.0) as usize).min(n - 1);
        (idx(center.y, self.rows), idx(center.x, self.cols))
    }

    pub fn write_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let values: Vec<u16> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let mut buf = Vec::new();
        write_pgm16(&mut buf, self.cols as u32, self.rows as u32, &values)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a 16-bit (or 8-bit) PGM; values are scaled by the file's maxval.
    pub fn read_pgm(path: impl AsRef<Path>, stride: u32) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (w, h, maxval, offset) = parse_pnm_header(&bytes, b"P5")?;
        let n = w as usize * h as usize;
        let payload = &bytes[offset..];
        let data: Vec<f64> = if maxval < 256 {
            if payload.len() < n {
                return Err(Error::Parse("truncated PGM payload".into()));
            }
            payload[..n].iter().map(|&b| b as f64 / maxval as f64).collect()
        } else {
            if payload.len() < 2 * n {
                return Err(Error::Parse("truncated PGM payload".into()));
            }
            payload[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
                .collect()
        };
        Ok(Heatmap {
            rows: h as usize,
            cols: w as usize,
            stride,
            data,
        })
    }
}

/// Binary label grid: one positive cell per center, shared on collision.
pub fn build_gt_heatmap(
    centers: &[Vector2<f64>],
    width: u32,
    height: u32,
    stride: u32,
) -> Result<Heatmap> {
    let mut hm = Heatmap::for_image(width, height, stride)?;
    for c in centers {
        if !(c.x >= 0.0 && c.y >= 0.0 && c.x < width as f64 && c.y < height as f64) {
            return Err(Error::OutOfFrame {
                x: c.x,
                y: c.y,
                w: width,
                h: height,
            });
        }
        let (r, k) = hm.cell_of(*c);
        hm.set(r, k, 1.0);
    }
    Ok(hm)
}

/// Local maxima of the 3x3 neighborhood under the order
/// `(score, -row-major index)`, at or above `threshold`, best first.
pub fn extract_peaks(hm: &Heatmap, threshold: f64, max_faces: usize) -> Vec<Peak> {
    let (rows, cols) = (hm.rows, hm.cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Key compares greater when the score is higher, or equal with a smaller index.
    let better = |a: usize, b: usize| {
        let (va, vb) = (hm.data[a], hm.data[b]);
        va > vb || (va == vb && a < b)
    };
    // Separable max filter over the key: horizontal winners, then vertical.
    let horiz: Vec<usize> = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mut best = i;
            for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                let j = r * cols + cc;
                if better(j, best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut peaks: Vec<Peak> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let horiz = &horiz;
            (0..cols).filter_map(move |c| {
                let i = r * cols + c;
                let mut best = horiz[i];
                for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                    let j = horiz[rr * cols + c];
                    if better(j, best) {
                        best = j;
                    }
                }
                (best == i && hm.data[i] >= threshold).then(|| Peak {
                    row: r,
                    col: c,
                    score: hm.data[i],
                })
            })
        })
        .collect();
    peaks.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    peaks.truncate(max_faces);
    peaks
}

pub fn peaks_to_face_centers(peaks: &[Peak], stride: u32) -> Vec<Vector2<f64>> {
    let r = stride as f64;
    peaks
        .iter()
        .map(|p| Vector2::new((p.col as f64 + 0.5) * r, (p.row as f64 + 0.5) * r))
        .collect()
}
