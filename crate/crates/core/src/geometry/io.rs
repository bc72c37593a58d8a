//! ASCII OBJ and PLY reading and writing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Mesh, Point3, PointSet};
use crate::error::{contract, Error, Result};

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

/// Nine significant digits, printed in the shortest form that parses back
/// to the rounded value.
fn fmt9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

enum Format {
    Obj,
    Ply,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => Ok(Format::Obj),
        Some("ply") => Ok(Format::Ply),
        _ => Err(contract(format!("{}: expected a .obj or .ply file", path.display()))),
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    match format_of(path)? {
        Format::Obj => parse_obj(&text),
        Format::Ply => {
            let ply = parse_ply(&text)?;
            Mesh::new(ply.points, ply.faces)
        }
    }
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format_of(path)? {
        Format::Obj => write_obj(mesh, None),
        Format::Ply => write_ply(&mesh.vertices, None, &mesh.faces),
    };
    fs::write(path, text)?;
    Ok(())
}

/// OBJ with `vn` records, one per vertex.
pub fn save_mesh_with_normals(mesh: &Mesh, normals: &[Point3], path: impl AsRef<Path>) -> Result<()> {
    if normals.len() != mesh.vertices.len() {
        return Err(contract("one normal per vertex required"));
    }
    fs::write(path, write_obj(mesh, Some(normals)))?;
    Ok(())
}

/// Loads a PLY point set; `nx ny nz` vertex properties become normals.
pub fn load_point_set(path: impl AsRef<Path>) -> Result<PointSet> {
    let text = fs::read_to_string(path)?;
    let ply = parse_ply(&text)?;
    match ply.normals {
        Some(n) => PointSet::with_normals(ply.points, n),
        None => Ok(PointSet::new(ply.points)),
    }
}

pub fn save_point_set(ps: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_ply(&ps.points, ps.normals.as_deref(), &[]))?;
    Ok(())
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    let tok = tok.ok_or_else(|| parse_err(line, "missing coordinate"))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("bad number {tok:?}")))
}

fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let p = [
                    parse_f64(toks.next(), line)?,
                    parse_f64(toks.next(), line)?,
                    parse_f64(toks.next(), line)?,
                ];
                vertices.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in toks {
                    let head = tok.split('/').next().unwrap_or("");
                    let k: i64 = head
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad face index {tok:?}")))?;
                    let resolved = if k > 0 {
                        k - 1
                    } else if k < 0 {
                        vertices.len() as i64 + k
                    } else {
                        return Err(parse_err(line, "face index 0"));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err(line, format!("face index {k} out of range")));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(parse_err(line, "face with fewer than 3 vertices"));
                }
                for j in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[j], idx[j + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

fn write_obj(mesh: &Mesh, normals: Option<&[Point3]>) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", fmt9(v[0]), fmt9(v[1]), fmt9(v[2]));
    }
    if let Some(ns) = normals {
        for n in ns {
            let _ = writeln!(out, "vn {} {} {}", fmt9(n[0]), fmt9(n[1]), fmt9(n[2]));
        }
        for f in &mesh.faces {
            let _ = writeln!(out, "f {0}//{0} {1}//{1} {2}//{2}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    } else {
        for f in &mesh.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    out
}

struct Ply {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
    faces: Vec<[usize; 3]>,
}

fn parse_ply(text: &str) -> Result<Ply> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing 'ply' magic")),
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current: Option<&str> = None;
    let mut header_done = false;
    for (line, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(line, format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                n_vertices = n.parse().map_err(|_| parse_err(line, "bad vertex count"))?;
                current = Some("vertex");
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| parse_err(line, "bad face count"))?;
                current = Some("face");
            }
            ["element", other, _] => return Err(parse_err(line, format!("unsupported element {other}"))),
            ["property", "list", ..] if current == Some("face") => {}
            ["property", _, name] if current == Some("vertex") => vertex_props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(line, format!("unexpected header line {l:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(0, "missing end_header"));
    }
    let col = |name: &str| vertex_props.iter().position(|p| p == name);
    let (Some(cx), Some(cy), Some(cz)) = (col("x"), col("y"), col("z")) else {
        return Err(parse_err(0, "vertex element lacks x/y/z"));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    let mut points = Vec::with_capacity(n_vertices);
    let mut normals = normal_cols.map(|_| Vec::with_capacity(n_vertices));
    let mut last_line = 0;
    for _ in 0..n_vertices {
        let (line, l) = lines.next().ok_or_else(|| parse_err(last_line + 1, "truncated vertex list"))?;
        last_line = line;
        let vals = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(line, format!("bad number {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != vertex_props.len() {
            return Err(parse_err(line, format!("expected {} values", vertex_props.len())));
        }
        points.push([vals[cx], vals[cy], vals[cz]]);
        if let (Some(ns), Some([a, b, c])) = (normals.as_mut(), normal_cols) {
            ns.push([vals[a], vals[b], vals[c]]);
        }
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (line, l) = lines.next().ok_or_else(|| parse_err(last_line + 1, "truncated face list"))?;
        last_line = line;
        let vals = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(line, format!("bad index {t:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let (&count, idx) = vals.split_first().ok_or_else(|| parse_err(line, "empty face"))?;
        if count != idx.len() || count < 3 {
            return Err(parse_err(line, "face count does not match its indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&v| v >= n_vertices) {
            return Err(parse_err(line, format!("face index {bad} out of range")));
        }
        for j in 1..count - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Ply { points, normals, faces })
}

fn write_ply(points: &[Point3], normals: Option<&[Point3]>, faces: &[[usize; 3]]) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if normals.is_some() {
        out.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if !faces.is_empty() {
        let _ = writeln!(out, "element face {}", faces.len());
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", fmt9(p[0]), fmt9(p[1]), fmt9(p[2]));
        if let Some(ns) = normals {
            let n = ns[i];
            let _ = write!(out, " {} {} {}", fmt9(n[0]), fmt9(n[1]), fmt9(n[2]));
        }
        out.push('\n');
    }
    for f in faces {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}
