//! Text formats: fitted scenes, landmark files, and loss-trace CSV.

use std::io::{BufRead, Write};

use nalgebra::Vector2;

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::fitter::Scene;
use crate::losses::{LandmarkSet, LossBreakdown};
use crate::morphable::{FaceParams, ParamLayout};

/// Header `f w h`, then one line per face: the canonical parameters followed
/// by `c_x c_y`. Values use shortest round-trip formatting.
pub fn write_scene<W: Write>(mut w: W, scene: &Scene) -> Result<()> {
    let i = &scene.intr;
    writeln!(w, "{} {} {}", i.focal, i.width, i.height)?;
    for f in &scene.faces {
        let mut line: Vec<String> = f.to_flat().iter().map(|v| v.to_string()).collect();
        line.push(f.pose.face_center.x.to_string());
        line.push(f.pose.face_center.y.to_string());
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{tok}` is not a number")))
}

pub fn read_scene<R: BufRead>(r: R, layout: ParamLayout) -> Result<Scene> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty scene file".into()))?;
    let header = header?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::Parse("scene header must be `f w h`".into()));
    }
    let parse_u32 = |s: &str| s.parse::<u32>().map_err(|_| Error::Parse(format!("bad frame size `{s}`")));
    let intr = Intrinsics {
        focal: parse_f64(h[0], 1)?,
        width: parse_u32(h[1])?,
        height: parse_u32(h[2])?,
    };
    intr.validate()?;
    let mut faces = Vec::new();
    for (ln, line) in lines {
        let line = line?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_f64(t, ln + 1))
            .collect::<Result<_>>()?;
        if vals.len() != layout.dim() + 2 {
            return Err(Error::DimensionMismatch {
                field: format!("scene line {}", ln + 1),
                expected: layout.dim() + 2,
                got: vals.len(),
            });
        }
        let d = layout.dim();
        let center = Vector2::new(vals[d], vals[d + 1]);
        faces.push(FaceParams::from_flat(layout, &vals[..d], center)?);
    }
    let scene = Scene { intr, faces };
    scene.validate()?;
    Ok(scene)
}

/// Lines of `x y [visible]`; every `per_set` points form one face. Missing
/// visibility means visible.
pub fn read_landmarks<R: BufRead>(r: R, per_set: usize) -> Result<Vec<LandmarkSet>> {
    let mut points = Vec::new();
    let mut visible = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        if !(2..=3).contains(&toks.len()) {
            return Err(Error::Parse(format!("line {}: expected `x y [visible]`", ln + 1)));
        }
        points.push(Vector2::new(parse_f64(toks[0], ln + 1)?, parse_f64(toks[1], ln + 1)?));
        visible.push(match toks.get(2) {
            None => true,
            Some(&"1") | Some(&"true") => true,
            Some(&"0") | Some(&"false") => false,
            Some(t) => return Err(Error::Parse(format!("line {}: bad visibility `{t}`", ln + 1))),
        });
    }
    if per_set == 0 || points.len() % per_set != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} landmark lines is not a multiple of {per_set}",
            points.len()
        )));
    }
    Ok(points
        .chunks(per_set)
        .zip(visible.chunks(per_set))
        .map(|(p, v)| LandmarkSet {
            points: p.to_vec(),
            visible: v.to_vec(),
        })
        .collect())
}

pub fn write_landmarks<W: Write>(mut w: W, sets: &[LandmarkSet]) -> Result<()> {
    for set in sets {
        for (p, v) in set.points.iter().zip(&set.visible) {
            writeln!(w, "{} {} {}", p.x, p.y, u8::from(*v))?;
        }
    }
    Ok(())
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[LossBreakdown]) -> Result<()> {
    writeln!(w, "iter,c,pix,per,lan,norm,var,total")?;
    for (i, b) in trace.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{},{},{},{}", b.c, b.pix, b.per, b.lan, b.norm, b.var, b.total)?;
    }
    Ok(())
}
