//! Small text formats shared by the CLI and the dataset writer, plus atomic
//! file replacement.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::Keypoint;
use crate::geometry::{AffineTransform, Point};
use crate::template::Template;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One `id,x,y` line per keypoint, no header.
pub fn keypoints_to_csv(keypoints: &[Keypoint]) -> String {
    let mut out = String::new();
    for k in keypoints {
        let _ = writeln!(out, "{},{},{}", k.id, k.position.x, k.position.y);
    }
    out
}

pub fn keypoints_from_csv(text: &str) -> Result<Vec<Keypoint>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, x, y] = fields[..] else {
            return Err(Error::Format(format!(
                "line {}: expected `id,x,y`, got `{line}`",
                n + 1
            )));
        };
        out.push(Keypoint {
            id: id.to_string(),
            position: Point::new(parse_f64(x, n)?, parse_f64(y, n)?),
        });
    }
    Ok(out)
}

pub const TRANSFORMS_HEADER: &str = "part,xx,xy,yx,yy,tx,ty";

/// Header plus one `part,xx,xy,yx,yy,tx,ty` row per part in template order.
pub fn transforms_to_csv(template: &Template, transforms: &[AffineTransform]) -> String {
    let mut out = format!("{TRANSFORMS_HEADER}\n");
    for (part, t) in template.parts().iter().zip(transforms) {
        let [a, b, c, d, e, f] = t.params();
        let _ = writeln!(out, "{},{a},{b},{c},{d},{e},{f}", part.id);
    }
    out
}

/// Rows may come in any order; parts without a row keep the identity.
pub fn transforms_from_csv(template: &Template, text: &str) -> Result<Vec<AffineTransform>> {
    let mut out = vec![AffineTransform::IDENTITY; template.num_parts()];
    let mut seen = vec![false; template.num_parts()];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == TRANSFORMS_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "line {}: expected 7 fields, got {}",
                n + 1,
                fields.len()
            )));
        }
        let k = template
            .part_index(fields[0])
            .ok_or_else(|| Error::Reference(format!("line {}: unknown part `{}`", n + 1, fields[0])))?;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Format(format!(
                "line {}: part `{}` listed twice",
                n + 1,
                fields[0]
            )));
        }
        let mut p = [0.0; 6];
        for (slot, f) in p.iter_mut().zip(&fields[1..]) {
            *slot = parse_f64(f, n)?;
        }
        out[k] = AffineTransform::from_params(p);
    }
    Ok(out)
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Format(format!("line {}: `{s}` is not a number", line + 1)))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("line {}: non-finite value", line + 1)));
    }
    Ok(v)
}
