//! Mesh file I/O: Wavefront OBJ (text) and binary little-endian PLY.

use super::TriMesh;
use crate::Vec3;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

pub fn write_obj(mesh: &TriMesh, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for p in &mesh.positions {
        writeln!(out, "v {:.9} {:.9} {:.9}", p.x, p.y, p.z)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()
}

/// Read an OBJ mesh: `v` and `f` records, polygons fan-triangulated,
/// `v/vt/vn` references reduced to the position index.  Provenance is empty.
pub fn read_obj(path: &Path) -> io::Result<TriMesh> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, msg: &str| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {msg}", line + 1))
    };
    let mut mesh = TriMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut c = [0.0f64; 3];
                for v in c.iter_mut() {
                    *v = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "bad vertex"))?;
                }
                mesh.positions.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::with_capacity(4);
                for token in parts {
                    let first = token.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| bad(ln, "bad face index"))?;
                    let n = mesh.positions.len() as i64;
                    // OBJ indices are 1-based; negative counts from the end.
                    let resolved = if i < 0 { n + i } else { i - 1 };
                    if resolved < 0 || resolved >= n {
                        return Err(bad(ln, "face index out of range"));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(bad(ln, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn write_ply(mesh: &TriMesh, path: &Path) -> io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\n\
         element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.positions.len(),
        mesh.triangles.len()
    )?;
    for p in &mesh.positions {
        for c in 0..3 {
            out.write_all(&(p[c] as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        out.write_all(&[3u8])?;
        for &i in t {
            out.write_all(&i.to_le_bytes())?;
        }
    }
    out.flush()
}

/// Read a binary little-endian PLY with float vertex positions and triangle
/// faces (the subset [`write_ply`] produces, index type `uint` or `int`).
pub fn read_ply(path: &Path) -> io::Result<TriMesh> {
    let data = fs::read(path)?;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let header_end = data
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| bad("no end_header"))?
        + 11;
    let header = std::str::from_utf8(&data[..header_end]).map_err(|_| bad("non-text header"))?;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut in_vertex = false;
    let mut vertex_props: Vec<&str> = Vec::new();
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("binary_little_endian") {
                    return Err(bad("only binary little-endian PLY is supported"));
                }
            }
            Some("element") => match (parts.next(), parts.next()) {
                (Some("vertex"), Some(n)) => {
                    n_vertices = n.parse().map_err(|_| bad("bad vertex count"))?;
                    in_vertex = true;
                }
                (Some("face"), Some(n)) => {
                    n_faces = n.parse().map_err(|_| bad("bad face count"))?;
                    in_vertex = false;
                }
                _ => in_vertex = false,
            },
            Some("property") => {
                if in_vertex {
                    let ty = parts.next().unwrap_or("");
                    if ty != "float" && ty != "float32" {
                        return Err(bad("only float vertex properties are supported"));
                    }
                    vertex_props.push(parts.next().unwrap_or(""));
                }
            }
            _ => {}
        }
    }
    let (xi, yi, zi) = (
        vertex_props.iter().position(|p| *p == "x").ok_or_else(|| bad("no x property"))?,
        vertex_props.iter().position(|p| *p == "y").ok_or_else(|| bad("no y property"))?,
        vertex_props.iter().position(|p| *p == "z").ok_or_else(|| bad("no z property"))?,
    );

    let mut pos = header_end;
    let mut take = |n: usize| -> io::Result<&[u8]> {
        if pos + n > data.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated PLY"));
        }
        let s = &data[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut mesh = TriMesh::default();
    let stride = vertex_props.len();
    for _ in 0..n_vertices {
        let row = take(4 * stride)?;
        let get = |i: usize| {
            f32::from_le_bytes(row[4 * i..4 * i + 4].try_into().unwrap()) as f64
        };
        mesh.positions.push(Vec3::new(get(xi), get(yi), get(zi)));
    }
    for _ in 0..n_faces {
        let count = take(1)?[0] as usize;
        let raw = take(4 * count)?;
        let idx: Vec<u32> = (0..count)
            .map(|i| u32::from_le_bytes(raw[4 * i..4 * i + 4].try_into().unwrap()))
            .collect();
        if idx.iter().any(|&i| i as usize >= mesh.positions.len()) {
            return Err(bad("face index out of range"));
        }
        for k in 1..idx.len().saturating_sub(1) {
            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TetComplex;
    use crate::mesh::marching_tets;

    fn small_mesh() -> TriMesh {
        let complex = TetComplex::structured(
            Vec3::new(-1.0, -1.0, -1.0),
            Vec3::new(1.0, 1.0, 1.0),
            3,
        );
        let values: Vec<f64> = complex.vertices.iter().map(|p| p.norm() - 0.6).collect();
        marching_tets(&complex, &values)
    }

    #[test]
    fn obj_round_trip() {
        let mesh = small_mesh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        write_obj(&mesh, &path).unwrap();
        let back = read_obj(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.positions.len(), mesh.positions.len());
        for (a, b) in mesh.positions.iter().zip(&back.positions) {
            assert!((a - b).norm() < 1e-8);
        }
        assert!(back.provenance.is_empty());
    }

    #[test]
    fn obj_reads_polygons_and_slash_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        fs::write(
            &path,
            "# comment\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n",
        )
        .unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.positions.len(), 4);
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn ply_round_trip() {
        let mesh = small_mesh();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&mesh, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in mesh.positions.iter().zip(&back.positions) {
            assert!((a - b).norm() < 1e-6, "f32 quantization only");
        }
    }
}
