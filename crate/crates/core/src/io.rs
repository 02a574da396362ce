//! File formats: PFM (float maps), binary PPM/PGM (8-bit images and masks),
//! binary little-endian PLY (point clouds and Gaussian sets), JSON helpers.
//! Every writer goes through [`write_atomic`].

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rcm::{FusedPointCloud, NormalizationTransform, RelativeCoordinateMap};
use crate::splat::{GaussianSplat, GaussianSplatSet};

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(path, "JSON", e.to_string()))?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, "JSON", e.to_string()))
}

/// Reads JSON or TOML, chosen by extension.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if path.extension().is_some_and(|e| e == "toml") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, "TOML", e.to_string()))
    } else {
        read_json(path)
    }
}

/// Whitespace-separated header tokens of a netpbm-style file, returning the
/// tokens and the offset just past the single whitespace after the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return if tokens.len() == count { Some((tokens, i)) } else { None };
    }
    Some((tokens, i + 1))
}

/// Float map in PFM layout: `channels` is 1 (`Pf`) or 3 (`PF`), rows stored
/// bottom to top, little-endian (negative scale).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major from the top row, interleaved channels.
    pub data: Vec<f32>,
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let magic = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let stride = map.width * map.channels;
    for row in (0..map.height).rev() {
        for v in &map.data[row * stride..(row + 1) * stride] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let err = |m: &str| Error::format(path, "PFM", m.to_string());
    let (tok, offset) = header_tokens(bytes, 4).ok_or_else(|| err("truncated header"))?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(err(&format!("bad magic `{other}`"))),
    };
    let width: usize = tok[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = tok[2].parse().map_err(|_| err("bad height"))?;
    let scale: f32 = tok[3].parse().map_err(|_| err("bad scale"))?;
    let little = scale < 0.0;
    let stride = width * channels;
    let body = &bytes[offset..];
    if body.len() != stride * height * 4 {
        return Err(err(&format!("expected {} data bytes, found {}", stride * height * 4, body.len())));
    }
    let mut data = vec![0f32; stride * height];
    for (file_row, chunk) in body.chunks_exact(stride * 4).enumerate() {
        let row = height - 1 - file_row;
        for (j, b) in chunk.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            data[row * stride + j] = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        }
    }
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    decode_pfm(&read_bytes(path)?, path)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary netpbm image: `P6` with 3 channels, `P5` with 1.
pub fn encode_pnm(width: usize, height: usize, channels: usize, values: &[f64]) -> Vec<u8> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| quantize(*v)));
    out
}

/// Decodes `P5`/`P6` into values in `[0, 1]`, returning `(w, h, channels, data)`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let err = |m: &str| Error::format(path, "binary PPM/PGM", m.to_string());
    let (tok, offset) = header_tokens(bytes, 4).ok_or_else(|| err("truncated header"))?;
    let channels = match tok[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(err(&format!("bad magic `{other}`"))),
    };
    let width: usize = tok[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = tok[2].parse().map_err(|_| err("bad height"))?;
    if tok[3] != "255" {
        return Err(err("only 8-bit maxval 255 is supported"));
    }
    let body = &bytes[offset..];
    if body.len() != width * height * channels {
        return Err(err("pixel data length does not match header"));
    }
    Ok((width, height, channels, body.iter().map(|b| *b as f64 / 255.0).collect()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    let flat: Vec<f64> = rgb.iter().flatten().copied().collect();
    write_atomic(path, &encode_pnm(width, height, 3, &flat))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let (w, h, c, data) = decode_pnm(&read_bytes(path)?, path)?;
    if c != 3 {
        return Err(Error::format(path, "P6 colour image", "found a greyscale P5"));
    }
    Ok((w, h, data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()))
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let vals: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    write_atomic(path, &encode_pnm(width, height, 1, &vals))
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, c, data) = decode_pnm(&read_bytes(path)?, path)?;
    if c != 1 {
        return Err(Error::format(path, "P5 mask", "found a colour P6"));
    }
    Ok((w, h, data.iter().map(|v| *v >= 0.5).collect()))
}

/// Writes the normalized coordinates as a 3-channel PFM (background pixels
/// hold the zero sentinel) and the foreground mask as a PGM.
pub fn write_rcm(pfm: &Path, mask: &Path, rcm: &RelativeCoordinateMap) -> Result<()> {
    let map = FloatMap {
        width: rcm.width,
        height: rcm.height,
        channels: 3,
        data: rcm.coords.iter().flat_map(|c| c.iter().map(|v| *v as f32).collect::<Vec<_>>()).collect(),
    };
    write_pfm(pfm, &map)?;
    write_mask_pgm(mask, rcm.width, rcm.height, &rcm.mask)
}

pub fn read_rcm(pfm: &Path, mask: &Path, norm: NormalizationTransform) -> Result<RelativeCoordinateMap> {
    let map = read_pfm(pfm)?;
    if map.channels != 3 {
        return Err(Error::format(pfm, "3-channel PFM (PF)", "found a 1-channel map"));
    }
    let (w, h, m) = read_mask_pgm(mask)?;
    if (w, h) != (map.width, map.height) {
        return Err(Error::format(mask, "mask matching the RCM size", format!("{w}x{h} vs {}x{}", map.width, map.height)));
    }
    let rcm = RelativeCoordinateMap {
        width: w,
        height: h,
        coords: map.data.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect(),
        mask: m,
        norm,
    };
    rcm.validate().map_err(|e| Error::format(pfm, "relative coordinate map", e.to_string()))?;
    Ok(rcm)
}

/// Single-channel PFM of per-pixel values.
pub fn write_scalar_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_pfm(
        path,
        &FloatMap {
            width,
            height,
            channels: 1,
            data: values.iter().map(|v| *v as f32).collect(),
        },
    )
}

/// Reads a single-channel PFM, checking its size.
pub fn read_scalar_pfm(path: &Path, width: usize, height: usize) -> Result<Vec<f64>> {
    let map = read_pfm(path)?;
    if map.channels != 1 || map.width != width || map.height != height {
        return Err(Error::format(
            path,
            "1-channel PFM (Pf)",
            format!("expected {width}x{height}x1, found {}x{}x{}", map.width, map.height, map.channels),
        ));
    }
    Ok(map.data.iter().map(|v| *v as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            "uchar" | "uint8" => PlyType::U8,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 => 1,
            PlyType::F64 => 8,
            _ => 4,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            PlyType::U8 => b[0] as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Vertex table of a binary little-endian PLY: property names and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertices {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PlyVertices> {
    let err = |m: String| Error::format(path, "binary little-endian PLY", m);
    let end_marker = b"end_header\n";
    let header_end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| err("missing end_header".into()))?
        + end_marker.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(err("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(PlyType, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(err(format!("unsupported format `{fmt}`")));
                }
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| err("bad vertex count".into()))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_some() {
                    in_vertex = false;
                } else {
                    return Err(err("vertex must be the first element".into()));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| err(format!("unsupported type `{ty}`")))?;
                props.push((t, name.to_string()));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| err("no vertex element".into()))?;
    let stride: usize = props.iter().map(|(t, _)| t.size()).sum();
    let body = &bytes[header_end..];
    if body.len() < stride * count {
        return Err(err(format!("expected {} vertex bytes, found {}", stride * count, body.len())));
    }
    let rows = body[..stride * count]
        .chunks_exact(stride.max(1))
        .take(count)
        .map(|chunk| {
            let mut off = 0;
            props
                .iter()
                .map(|(t, _)| {
                    let v = t.read(&chunk[off..]);
                    off += t.size();
                    v
                })
                .collect()
        })
        .collect();
    Ok(PlyVertices {
        names: props.into_iter().map(|(_, n)| n).collect(),
        rows,
    })
}

fn ply_header(count: usize, props: &[(&str, &str)]) -> Vec<u8> {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for (ty, name) in props {
        h.push_str(&format!("property {ty} {name}\n"));
    }
    h.push_str("end_header\n");
    h.into_bytes()
}

/// `x y z` as float32, `red green blue` as uchar.
pub fn encode_point_cloud_ply(cloud: &FusedPointCloud) -> Vec<u8> {
    let props = [
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ];
    let mut out = ply_header(cloud.len(), &props);
    for p in &cloud.points {
        for v in &p[..3] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in &p[3..] {
            out.push(quantize(*v));
        }
    }
    out
}

pub fn write_point_cloud_ply(path: &Path, cloud: &FusedPointCloud) -> Result<()> {
    write_atomic(path, &encode_point_cloud_ply(cloud))
}

pub fn read_point_cloud_ply(path: &Path) -> Result<FusedPointCloud> {
    let v = decode_ply(&read_bytes(path)?, path)?;
    let col = |n: &str| v.column(n).ok_or_else(|| Error::format(path, "point cloud PLY", format!("missing `{n}`")));
    let idx = [col("x")?, col("y")?, col("z")?, col("red")?, col("green")?, col("blue")?];
    let points = v
        .rows
        .iter()
        .map(|r| {
            [
                r[idx[0]],
                r[idx[1]],
                r[idx[2]],
                r[idx[3]] / 255.0,
                r[idx[4]] / 255.0,
                r[idx[5]] / 255.0,
            ]
        })
        .collect();
    Ok(FusedPointCloud { points })
}

/// Property layout of a Gaussian PLY.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaussianLayout {
    /// `x y z red green blue scale_0..2 rot_0..3 opacity`, all float32 with
    /// linear values (colour in `[0, 1]`, scale as standard deviation,
    /// quaternion `w x y z`, opacity in `[0, 1]`).
    #[default]
    Native,
    /// The layout most splat viewers read: `x y z nx ny nz f_dc_0..2 opacity
    /// scale_0..2 rot_0..3`, with `f_dc = (colour - 0.5) / 0.28209479`,
    /// `opacity = logit(opacity)` and `scale = ln(scale)`.
    Community,
}

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn encode_gaussian_ply(set: &GaussianSplatSet, layout: GaussianLayout) -> Vec<u8> {
    let names: &[&str] = match layout {
        GaussianLayout::Native => &[
            "x", "y", "z", "red", "green", "blue", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
            "rot_3", "opacity",
        ],
        GaussianLayout::Community => &[
            "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
            "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
        ],
    };
    let props: Vec<(&str, &str)> = names.iter().map(|n| ("float", *n)).collect();
    let mut out = ply_header(set.len(), &props);
    for s in &set.splats {
        let values: Vec<f64> = match layout {
            GaussianLayout::Native => s
                .center
                .iter()
                .chain(s.color.iter())
                .chain(s.scale.iter())
                .chain(s.rotation.iter())
                .copied()
                .chain(std::iter::once(s.opacity))
                .collect(),
            GaussianLayout::Community => s
                .center
                .iter()
                .copied()
                .chain([0.0; 3])
                .chain(s.color.iter().map(|c| (c - 0.5) / SH_C0))
                .chain(std::iter::once(logit(s.opacity)))
                .chain(s.scale.iter().map(|v| v.ln()))
                .chain(s.rotation.iter().copied())
                .collect(),
        };
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_gaussian_ply(path: &Path, set: &GaussianSplatSet, layout: GaussianLayout) -> Result<()> {
    write_atomic(path, &encode_gaussian_ply(set, layout))
}

/// Reads either layout (detected from the property names). The quaternion is
/// renormalized after the float32 round trip. Provenance is not stored in
/// the file; the result is unaligned with the given normalization.
pub fn read_gaussian_ply(path: &Path, norm: NormalizationTransform) -> Result<GaussianSplatSet> {
    let v = decode_ply(&read_bytes(path)?, path)?;
    let community = v.column("f_dc_0").is_some();
    let col = |n: &str| v.column(n).ok_or_else(|| Error::format(path, "Gaussian PLY", format!("missing `{n}`")));
    let xyz = [col("x")?, col("y")?, col("z")?];
    let rgb = if community {
        [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?]
    } else {
        [col("red")?, col("green")?, col("blue")?]
    };
    let sc = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let op = col("opacity")?;
    let mut splats = Vec::with_capacity(v.rows.len());
    for r in &v.rows {
        let mut q = rot.map(|i| r[i]);
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::format(path, "Gaussian PLY", "zero quaternion"));
        }
        q.iter_mut().for_each(|x| *x /= n);
        let (color, scale, opacity) = if community {
            (
                Vector3::from(rgb.map(|i| (r[i] * SH_C0 + 0.5).clamp(0.0, 1.0))),
                Vector3::from(sc.map(|i| r[i].exp())),
                sigmoid(r[op]),
            )
        } else {
            (
                Vector3::from(rgb.map(|i| r[i].clamp(0.0, 1.0))),
                Vector3::from(sc.map(|i| r[i])),
                r[op].clamp(0.0, 1.0),
            )
        };
        splats.push(GaussianSplat {
            center: Vector3::from(xyz.map(|i| r[i])),
            color,
            scale,
            rotation: q,
            opacity,
        });
    }
    let set = GaussianSplatSet::unaligned(splats, norm);
    set.validate().map_err(|e| Error::format(path, "Gaussian PLY", e.to_string()))?;
    Ok(set)
}
