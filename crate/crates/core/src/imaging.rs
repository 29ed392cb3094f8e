//! Float RGB images, boolean masks, and their file formats (binary PPM/PGM
//! and PNG).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize8(v)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width as usize * height as usize * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Binary PPM (P6, 8-bit).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("ppm") => {
                let mut buf = Vec::new();
                self.write_ppm(&mut buf)?;
                fs::write(path, buf)?;
            }
            _ => {
                image::save_buffer(
                    path,
                    &self.to_rgb8(),
                    self.width,
                    self.height,
                    image::ExtendedColorType::Rgb8,
                )?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if extension(path).as_deref() == Some("ppm") {
            let bytes = fs::read(path)?;
            let (w, h, maxval, offset) = parse_pnm_header(&bytes, b"P6")?;
            if maxval != 255 {
                return Err(Error::Parse("only 8-bit PPM is supported".into()));
            }
            return Image::from_rgb8(w, h, &bytes[offset..]);
        }
        let img = image::open(path)?.to_rgb8();
        Image::from_rgb8(img.width(), img.height(), img.as_raw())
    }
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 8-bit PGM, 255 where set.
    pub fn write_pgm<W: Write>(&self, w: W) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_pgm8(w, self.width, self.height, &bytes)
    }

    /// Reads a single-channel PGM or PNG; nonzero pixels are set.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if extension(path).as_deref() == Some("pgm") {
            let bytes = fs::read(path)?;
            let (w, h, maxval, offset) = parse_pnm_header(&bytes, b"P5")?;
            let n = w as usize * h as usize;
            let payload = &bytes[offset..];
            let data: Vec<bool> = if maxval < 256 {
                if payload.len() < n {
                    return Err(Error::Parse("truncated PGM payload".into()));
                }
                payload[..n].iter().map(|&b| b != 0).collect()
            } else {
                if payload.len() < 2 * n {
                    return Err(Error::Parse("truncated PGM payload".into()));
                }
                payload[..2 * n]
                    .chunks_exact(2)
                    .map(|c| c[0] != 0 || c[1] != 0)
                    .collect()
            };
            return Ok(Mask {
                width: w,
                height: h,
                data,
            });
        }
        let img = image::open(path)?.to_luma8();
        Ok(Mask {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_pgm(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

pub fn write_pgm8<W: Write>(mut w: W, width: u32, height: u32, bytes: &[u8]) -> Result<()> {
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    Ok(())
}

/// 16-bit big-endian PGM.
pub fn write_pgm16<W: Write>(mut w: W, width: u32, height: u32, values: &[u16]) -> Result<()> {
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(values.len() * 2);
    for v in values {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns `(width, height, maxval, payload offset)`.
pub fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(u32, u32, u32, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Parse(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Parse("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("bad PNM header field".into()))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Parse("missing PNM header terminator".into()));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}
