//! Point-cloud file formats: ASCII PLY and the compact `FREG` binary format.
//!
//! `FREG` layout (all little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"FREG"`                        |
//! | 4      | 4    | format version (`u32`, currently 1)    |
//! | 8      | 8    | point count (`u64`)                    |
//! | 16     | 16·n | records of `f32` x, y, z, intensity    |
//!
//! Clouds without intensity store NaN in the intensity slot; a file whose
//! intensities are all NaN loads back without intensity.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

pub const FREG_MAGIC: &[u8; 4] = b"FREG";
pub const FREG_VERSION: u32 = 1;
const FREG_HEADER: usize = 16;
const FREG_RECORD: usize = 16;

pub fn encode_freg(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(FREG_HEADER + FREG_RECORD * cloud.len());
    buf.extend_from_slice(FREG_MAGIC);
    buf.extend_from_slice(&FREG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for (i, p) in cloud.coords.iter().enumerate() {
        let w = cloud.intensity.as_ref().map_or(f32::NAN, |v| v[i] as f32);
        for c in [p.x as f32, p.y as f32, p.z as f32, w] {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

/// Decodes an `FREG` buffer; `path` is only used for error messages.
pub fn decode_freg(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() < FREG_HEADER {
        return Err(Error::format(path, "truncated FREG header"));
    }
    if &bytes[0..4] != FREG_MAGIC {
        return Err(Error::format(path, "bad magic, expected FREG"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FREG_VERSION {
        return Err(Error::format(path, format!("unsupported FREG version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = (count as u128) * FREG_RECORD as u128 + FREG_HEADER as u128;
    if expected != bytes.len() as u128 {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {count} points, found {}", bytes.len()),
        ));
    }
    let count = count as usize;
    let mut coords = Vec::with_capacity(count);
    let mut intensity = Vec::with_capacity(count);
    for rec in bytes[FREG_HEADER..].chunks_exact(FREG_RECORD) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        coords.push(Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64));
        intensity.push(f(3) as f64);
    }
    let intensity = if intensity.iter().all(|w| w.is_nan()) && count > 0 {
        None
    } else {
        Some(intensity)
    };
    let cloud = PointCloud { coords, intensity };
    cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cloud)
}

pub fn write_freg(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_freg(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_freg(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_freg(&bytes, path)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.intensity.is_some() {
        out.push_str("property float intensity\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.coords.iter().enumerate() {
        match &cloud.intensity {
            Some(w) => out.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, w[i])),
            None => out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z)),
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an ASCII PLY file with `x`, `y`, `z` and optional `intensity` vertex properties.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing ply magic line"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut skip_after_vertex = 0usize;
    let mut saw_end = false;
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::format(path, format!("unsupported PLY format {fmt}")));
            }
            ["element", name, n] => {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad element count {n}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(n);
                } else if vertex_count.is_none() {
                    return Err(Error::format(path, "elements before vertex are not supported"));
                } else {
                    skip_after_vertex += n;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::format(path, "list properties on vertices are not supported"));
            }
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                saw_end = true;
                break;
            }
            _ => {}
        }
    }
    let _ = skip_after_vertex;
    if !saw_end {
        return Err(Error::format(path, "missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::format(path, "vertex element lacks x/y/z properties")),
    };
    let iw = col("intensity");
    let mut coords = Vec::with_capacity(n);
    let mut intensity = iw.map(|_| Vec::with_capacity(n));
    for k in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("expected {n} vertices, found {k}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad number on vertex line {k}")))?;
        if vals.len() < props.len() {
            return Err(Error::format(path, format!("vertex line {k} has too few values")));
        }
        coords.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
        if let (Some(i), Some(v)) = (iw, intensity.as_mut()) {
            v.push(vals[i]);
        }
    }
    let cloud = PointCloud { coords, intensity };
    cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cloud)
}

/// Reads a cloud, choosing the format from the extension (`.ply`, otherwise `FREG`).
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => read_freg(path),
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => write_ply(path, cloud),
        _ => write_freg(path, cloud),
    }
}
