//! PLY reader/writer for oriented point clouds and triangle meshes.
//!
//! Writes binary-little-endian PLY 1.0 with float32 vertex properties
//! (x, y, z and optionally nx, ny, nz) and `list uchar int` face indices;
//! an ASCII variant is available for debugging. Vertex order is preserved.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointCloud, TriMesh};

fn fmt_err(path: &Path, reason: impl Into<String>, offset: u64) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
        offset,
    }
}

fn header(vertex_count: usize, with_normals: bool, face_count: usize, ascii: bool) -> String {
    let mut h = String::from("ply\n");
    h.push_str(if ascii {
        "format ascii 1.0\n"
    } else {
        "format binary_little_endian 1.0\n"
    });
    h.push_str(&format!("element vertex {vertex_count}\n"));
    h.push_str("property float x\nproperty float y\nproperty float z\n");
    if with_normals {
        h.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if face_count > 0 {
        h.push_str(&format!("element face {face_count}\n"));
        h.push_str("property list uchar int vertex_indices\n");
    }
    h.push_str("end_header\n");
    h
}

fn write_vertices(
    out: &mut Vec<u8>,
    vertices: &[Point3<f64>],
    normals: Option<&[Vector3<f64>]>,
    ascii: bool,
) {
    for (i, v) in vertices.iter().enumerate() {
        let mut row = [v.x as f32, v.y as f32, v.z as f32, 0.0, 0.0, 0.0];
        let n_props = if let Some(ns) = normals {
            let n = ns[i];
            row[3] = n.x as f32;
            row[4] = n.y as f32;
            row[5] = n.z as f32;
            6
        } else {
            3
        };
        if ascii {
            let text: Vec<String> = row[..n_props].iter().map(|x| format!("{x}")).collect();
            out.extend_from_slice(text.join(" ").as_bytes());
            out.push(b'\n');
        } else {
            for x in &row[..n_props] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

fn write_faces(out: &mut Vec<u8>, faces: &[[u32; 3]], ascii: bool) {
    for f in faces {
        if ascii {
            out.extend_from_slice(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes());
        } else {
            out.push(3u8);
            for &i in f {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
    }
}

pub fn write_ply_mesh(path: &Path, mesh: &TriMesh, ascii: bool) -> Result<()> {
    let with_normals = mesh.normals.is_some();
    let mut bytes = header(mesh.vertices.len(), with_normals, mesh.faces.len(), ascii).into_bytes();
    write_vertices(
        &mut bytes,
        &mesh.vertices,
        mesh.normals.as_deref(),
        ascii,
    );
    write_faces(&mut bytes, &mesh.faces, ascii);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ply_cloud(path: &Path, cloud: &OrientedPointCloud, ascii: bool) -> Result<()> {
    let vertices: Vec<Point3<f64>> = cloud.iter().map(|p| p.position).collect();
    let normals: Vec<Vector3<f64>> = cloud.iter().map(|p| p.normal).collect();
    let mut bytes = header(vertices.len(), true, 0, ascii).into_bytes();
    write_vertices(&mut bytes, &vertices, Some(&normals), ascii);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::F64 => 8,
            _ => 4,
        }
    }

    fn read_binary(self, bytes: &[u8]) -> f64 {
        match self {
            PlyType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            PlyType::I8 => bytes[0] as i8 as f64,
            PlyType::U8 => bytes[0] as f64,
            PlyType::I16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PlyType::U16 => u16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PlyType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        }
    }
}

struct Property {
    name: String,
    ty: PlyType,
    list_count_ty: Option<PlyType>,
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads a PLY mesh or point cloud. Unknown scalar vertex properties are
/// skipped; normals are picked up when nx/ny/nz are present.
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    // Header is ASCII lines terminated by end_header.
    let mut offset = 0usize;
    let mut lines: Vec<(usize, String)> = Vec::new();
    loop {
        let start = offset;
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(fmt_err(path, "missing end_header", bytes.len() as u64));
        };
        let line = String::from_utf8_lossy(&bytes[start..start + nl])
            .trim_end_matches('\r')
            .to_string();
        offset = start + nl + 1;
        let done = line.trim() == "end_header";
        lines.push((start, line));
        if done {
            break;
        }
    }
    if lines.first().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(fmt_err(path, "missing `ply` magic line", 0));
    }

    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    for (pos, line) in &lines[1..] {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => match it.next() {
                Some("ascii") => ascii = Some(true),
                Some("binary_little_endian") => ascii = Some(false),
                other => {
                    return Err(fmt_err(
                        path,
                        format!("unsupported format {other:?}"),
                        *pos as u64,
                    ))
                }
            },
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = it.next().unwrap_or("").to_string();
                let count: usize = it
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| fmt_err(path, "bad element count", *pos as u64))?;
                elements.push(Element {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| fmt_err(path, "property before element", *pos as u64))?;
                let first = it.next().unwrap_or("");
                if first == "list" {
                    let count_ty = PlyType::parse(it.next().unwrap_or(""))
                        .ok_or_else(|| fmt_err(path, "bad list count type", *pos as u64))?;
                    let ty = PlyType::parse(it.next().unwrap_or(""))
                        .ok_or_else(|| fmt_err(path, "bad list item type", *pos as u64))?;
                    el.properties.push(Property {
                        name: it.next().unwrap_or("").to_string(),
                        ty,
                        list_count_ty: Some(count_ty),
                    });
                } else {
                    let ty = PlyType::parse(first)
                        .ok_or_else(|| fmt_err(path, format!("bad type `{first}`"), *pos as u64))?;
                    el.properties.push(Property {
                        name: it.next().unwrap_or("").to_string(),
                        ty,
                        list_count_ty: None,
                    });
                }
            }
            Some("end_header") => {}
            Some(other) => {
                return Err(fmt_err(
                    path,
                    format!("unknown header keyword `{other}`"),
                    *pos as u64,
                ))
            }
            None => {}
        }
    }
    let ascii = ascii.ok_or_else(|| fmt_err(path, "missing format line", 0))?;

    let mut mesh = TriMesh::default();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut has_normals = false;

    // Body parsing state: either byte offset (binary) or token stream (ascii).
    let mut ascii_tokens: Vec<f64> = Vec::new();
    let mut ascii_pos = 0usize;
    if ascii {
        for tok in String::from_utf8_lossy(&bytes[offset..]).split_whitespace() {
            ascii_tokens.push(tok.parse::<f64>().map_err(|_| {
                fmt_err(path, format!("bad ascii value `{tok}`"), offset as u64)
            })?);
        }
    }

    let mut next_scalar = |ty: PlyType, offset: &mut usize| -> Result<f64> {
        if ascii {
            let v = ascii_tokens.get(ascii_pos).copied().ok_or_else(|| {
                fmt_err(path, "element count mismatch: body ended early", *offset as u64)
            })?;
            ascii_pos += 1;
            Ok(v)
        } else {
            let size = ty.size();
            if *offset + size > bytes.len() {
                return Err(fmt_err(
                    path,
                    "element count mismatch: body ended early",
                    *offset as u64,
                ));
            }
            let v = ty.read_binary(&bytes[*offset..]);
            *offset += size;
            Ok(v)
        }
    };

    for el in &elements {
        for _ in 0..el.count {
            let mut x = [0.0f64; 3];
            let mut n = [0.0f64; 3];
            let mut face: Vec<u32> = Vec::new();
            for prop in &el.properties {
                if let Some(count_ty) = prop.list_count_ty {
                    let count = next_scalar(count_ty, &mut offset)? as usize;
                    let mut items = Vec::with_capacity(count);
                    for _ in 0..count {
                        items.push(next_scalar(prop.ty, &mut offset)?);
                    }
                    if el.name == "face" && prop.name == "vertex_indices" {
                        face = items.iter().map(|&v| v as u32).collect();
                    }
                } else {
                    let v = next_scalar(prop.ty, &mut offset)?;
                    match (el.name.as_str(), prop.name.as_str()) {
                        ("vertex", "x") => x[0] = v,
                        ("vertex", "y") => x[1] = v,
                        ("vertex", "z") => x[2] = v,
                        ("vertex", "nx") => {
                            n[0] = v;
                            has_normals = true;
                        }
                        ("vertex", "ny") => n[1] = v,
                        ("vertex", "nz") => n[2] = v,
                        _ => {}
                    }
                }
            }
            if el.name == "vertex" {
                mesh.vertices.push(Point3::new(x[0], x[1], x[2]));
                normals.push(Vector3::new(n[0], n[1], n[2]));
            } else if el.name == "face" {
                if face.len() != 3 {
                    return Err(fmt_err(
                        path,
                        format!("only triangle faces supported, got {} indices", face.len()),
                        offset as u64,
                    ));
                }
                mesh.faces.push([face[0], face[1], face[2]]);
            }
        }
    }
    if !ascii && offset != bytes.len() {
        return Err(fmt_err(
            path,
            format!("{} trailing bytes after declared elements", bytes.len() - offset),
            offset as u64,
        ));
    }
    if has_normals {
        mesh.normals = Some(normals);
    }
    Ok(mesh)
}
