//! Wavefront OBJ with `v`, `vt` and `f v/vt` lines. Normals (`vn`) are
//! ignored on read and recomputed from the faces when needed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TriMesh;
use crate::error::{Error, Result};

pub fn obj_string(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        writeln!(s, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]).unwrap();
    }
    for t in mesh.uv() {
        writeln!(s, "vt {:.9} {:.9}", t[0], t[1]).unwrap();
    }
    for f in mesh.faces() {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
    }
    s
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    fs::write(path, obj_string(mesh))?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    parse_obj(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Parses OBJ text. When a vertex is referenced with several texture
/// coordinates, the first one seen wins.
pub fn parse_obj(text: &str, origin: &str) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Format {
        path: origin.to_string(),
        msg: format!("line {line}: {msg}"),
    };
    let mut verts = Vec::new();
    let mut tex = Vec::new();
    let mut faces = Vec::new();
    let mut corner_uv: Vec<(usize, usize)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let rest: Vec<&str> = it.collect();
        let nums = |n: usize| -> Result<Vec<f64>> {
            if rest.len() < n {
                return Err(err(ln, format!("expected {n} numbers")));
            }
            rest[..n]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| err(ln, format!("bad number {s:?}"))))
                .collect()
        };
        match tag {
            "v" => {
                let v = nums(3)?;
                verts.push([v[0], v[1], v[2]]);
            }
            "vt" => {
                let t = nums(2)?;
                tex.push([t[0], t[1]]);
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(err(ln, format!("only triangles are supported, got {} corners", rest.len())));
                }
                let mut face = [0usize; 3];
                for (k, corner) in rest.iter().enumerate() {
                    let mut parts = corner.split('/');
                    let idx = |s: Option<&str>, len: usize| -> Result<Option<usize>> {
                        match s {
                            None | Some("") => Ok(None),
                            Some(s) => {
                                let i: i64 = s.parse().map_err(|_| err(ln, format!("bad index {s:?}")))?;
                                let r = if i < 0 { len as i64 + i } else { i - 1 };
                                if r < 0 {
                                    return Err(err(ln, format!("index {i} out of range")));
                                }
                                Ok(Some(r as usize))
                            }
                        }
                    };
                    let v = idx(parts.next(), verts.len())?.ok_or_else(|| err(ln, "missing vertex index".into()))?;
                    if let Some(t) = idx(parts.next(), tex.len())? {
                        corner_uv.push((v, t));
                    }
                    face[k] = v;
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    let mut uv = vec![None; verts.len()];
    for (v, t) in corner_uv {
        let t = *tex
            .get(t)
            .ok_or_else(|| err(0, format!("texture index {} out of range", t + 1)))?;
        if v < uv.len() && uv[v].is_none() {
            uv[v] = Some(t);
        }
    }
    let uv = uv.into_iter().map(|t| t.unwrap_or([0.0, 0.0])).collect();
    TriMesh::new(verts, faces, uv).map_err(|e| Error::Format {
        path: origin.to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_ellipsoid;

    #[test]
    fn roundtrip() {
        let m = make_ellipsoid(1, [1.0, 0.7, 0.7], 0.4).unwrap();
        let back = parse_obj(&obj_string(&m), "mem").unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-8));
        }
        for (a, b) in back.uv().iter().zip(m.uv()) {
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn plain_and_normal_indices() {
        let text = "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\nf -3 -2 -1\n";
        let m = parse_obj(text, "mem").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 1, 2]]);
        assert_eq!(m.face_normals()[0], [0.0, 0.0, 1.0]);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", "mem").is_err());
        assert!(parse_obj("v 0 0\n", "mem").is_err());
    }
}
