//! File formats: ASCII PLY meshes, MetaImage volumes (`MET_FLOAT` with a raw sidecar),
//! and landmark / displacement CSVs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Landmark, Point, ScalarImage, TriangleMesh, Vector};
use crate::{Error, Result};

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|m| Error::format(path, m))
}

struct ElementSpec {
    name: String,
    count: usize,
    properties: Vec<String>,
    list_property: bool,
}

pub fn parse_ply(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    let mut elements: Vec<ElementSpec> = Vec::new();
    let mut saw_format = false;
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err("only ASCII PLY is supported".into());
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().ok_or("element without name")?.to_string();
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or("element without count")?;
                elements.push(ElementSpec {
                    name,
                    count,
                    properties: Vec::new(),
                    list_property: false,
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or("property before element")?;
                let rest: Vec<&str> = words.collect();
                if rest.first() == Some(&"list") {
                    el.list_property = true;
                    el.properties.push(rest.last().copied().unwrap_or_default().to_string());
                } else {
                    el.properties.push(rest.last().copied().unwrap_or_default().to_string());
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(format!("unexpected header keyword '{other}'")),
        }
    }
    if !saw_format {
        return Err("missing format line".into());
    }
    let mut body = lines.filter(|l| !l.trim().is_empty());
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let pos = |n: &str| el.properties.iter().position(|p| p == n);
                let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err("vertex element lacks x, y, z".into()),
                };
                for _ in 0..el.count {
                    let line = body.next().ok_or("truncated vertex list")?;
                    let values: Vec<f64> = line
                        .split_whitespace()
                        .map(|w| w.parse::<f64>().map_err(|e| format!("bad vertex value '{w}': {e}")))
                        .collect::<std::result::Result<_, _>>()?;
                    let get = |i: usize| values.get(i).copied().ok_or("short vertex line");
                    vertices.push(Point::new(get(ix)?, get(iy)?, get(iz)?));
                }
            }
            "face" => {
                if !el.list_property {
                    return Err("face element lacks a vertex index list".into());
                }
                for _ in 0..el.count {
                    let line = body.next().ok_or("truncated face list")?;
                    let values: Vec<usize> = line
                        .split_whitespace()
                        .map(|w| w.parse::<usize>().map_err(|e| format!("bad face index '{w}': {e}")))
                        .collect::<std::result::Result<_, _>>()?;
                    if values.first() != Some(&3) || values.len() < 4 {
                        return Err("only triangular faces are supported".into());
                    }
                    triangles.push([values[1], values[2], values[3]]);
                }
            }
            _ => {
                for _ in 0..el.count {
                    body.next().ok_or("truncated element data")?;
                }
            }
        }
    }
    TriangleMesh::new(vertices, triangles).map_err(|e| e.to_string())
}

pub fn format_ply(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices().len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    let _ = writeln!(out, "element face {}", mesh.triangles().len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in mesh.vertices() {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    fs::write(path, format_ply(mesh)).map_err(|e| Error::io(path, e))
}

/// Reads a MetaImage header and its raw little-endian `MET_FLOAT` payload.
pub fn read_mhd(path: &Path) -> Result<ScalarImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dims = None;
    let mut spacing = Vector::repeat(1.0);
    let mut origin = Point::origin();
    let mut data_file = None;
    let bad = |m: String| Error::format(path, m);
    let floats = |v: &str| -> std::result::Result<Vec<f64>, String> {
        v.split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|e| format!("bad number '{w}': {e}")))
            .collect()
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                if value != "3" {
                    return Err(bad(format!("only NDims = 3 is supported, got {value}")));
                }
            }
            "DimSize" => {
                let d = floats(value).map_err(bad)?;
                if d.len() != 3 {
                    return Err(bad("DimSize needs 3 entries".into()));
                }
                dims = Some([d[0] as usize, d[1] as usize, d[2] as usize]);
            }
            "ElementSpacing" | "ElementSize" => {
                let s = floats(value).map_err(bad)?;
                if s.len() != 3 {
                    return Err(bad("ElementSpacing needs 3 entries".into()));
                }
                spacing = Vector::new(s[0], s[1], s[2]);
            }
            "Offset" | "Origin" | "Position" => {
                let o = floats(value).map_err(bad)?;
                if o.len() != 3 {
                    return Err(bad("Offset needs 3 entries".into()));
                }
                origin = Point::new(o[0], o[1], o[2]);
            }
            "ElementType" => {
                if value != "MET_FLOAT" {
                    return Err(bad(format!("only MET_FLOAT is supported, got {value}")));
                }
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(bad("big-endian payloads are not supported".into()));
                }
            }
            "ElementDataFile" => data_file = Some(value.to_string()),
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| bad("missing DimSize".into()))?;
    let data_file = data_file.ok_or_else(|| bad("missing ElementDataFile".into()))?;
    if data_file == "LOCAL" {
        return Err(bad("inline (LOCAL) payloads are not supported".into()));
    }
    let raw_path = sibling(path, &data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count = dims.iter().product::<usize>();
    if bytes.len() != 4 * count {
        return Err(Error::format(
            &raw_path,
            format!("expected {} bytes, found {}", 4 * count, bytes.len()),
        ));
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ScalarImage::new(dims, spacing, origin, voxels)
}

/// Writes `<path>` (header) and a `.raw` sidecar next to it.
pub fn write_mhd(path: &Path, image: &ScalarImage) -> Result<()> {
    let raw_name = format!(
        "{}.raw",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("image")
    );
    let [nx, ny, nz] = image.dims();
    let s = image.spacing();
    let o = image.origin();
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         Offset = {} {} {}\nElementSpacing = {} {} {}\nDimSize = {nx} {ny} {nz}\n\
         ElementType = MET_FLOAT\nElementDataFile = {raw_name}\n",
        o.x, o.y, o.z, s.x, s.y, s.z
    );
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    let raw_path = sibling(path, &raw_name);
    let bytes: Vec<u8> = image
        .voxels()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Resolves `name` against the directory containing `path`.
pub fn sibling(path: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        path.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    name: String,
    x: f64,
    y: f64,
    z: f64,
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.deserialize::<LandmarkRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        if !seen.insert(row.name.clone()) {
            return Err(Error::format(path, format!("duplicate landmark name '{}'", row.name)));
        }
        out.push(Landmark::new(row.name, Point::new(row.x, row.y, row.z)));
    }
    Ok(out)
}

pub fn write_landmarks(path: &Path, landmarks: &[Landmark]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for l in landmarks {
        writer.serialize(LandmarkRow {
            name: l.name.clone(),
            x: l.point.x,
            y: l.point.y,
            z: l.point.z,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DisplacementRow {
    x: f64,
    y: f64,
    z: f64,
    dx: f64,
    dy: f64,
    dz: f64,
}

/// Reads a displacement field as `(point, displacement)` rows from CSV `x,y,z,dx,dy,dz`.
pub fn read_displacements(path: &Path) -> Result<Vec<(Point, Vector)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize::<DisplacementRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok((Point::new(r.x, r.y, r.z), Vector::new(r.dx, r.dy, r.dz)))
        })
        .collect()
}

pub fn write_displacements(path: &Path, field: &[(Point, Vector)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for (p, d) in field {
        writer.serialize(DisplacementRow {
            x: p.x,
            y: p.y,
            z: p.z,
            dx: d.x,
            dy: d.y,
            dz: d.z,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
