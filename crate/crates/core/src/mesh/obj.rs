//! Wavefront OBJ subset: `v` and triangular `f` records.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;

use super::TriMesh;
use crate::error::{Error, Result};

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// Parses OBJ text. `origin` only labels error messages.
pub fn parse_obj(text: &str, origin: &Path) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut ignored = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        match tag {
            "v" => {
                let coords: Vec<&str> = tokens.collect();
                // an optional fourth (w) component is tolerated and dropped
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(err(lineno, format!("vertex needs 3 coordinates, got {}", coords.len())));
                }
                let mut v = [0.0; 3];
                for (slot, tok) in v.iter_mut().zip(&coords) {
                    *slot = tok
                        .parse::<f64>()
                        .map_err(|_| err(lineno, format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(v);
            }
            "f" => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(err(lineno, format!("only triangles are supported, face has {} vertices", refs.len())));
                }
                let mut face = [0usize; 3];
                for (slot, tok) in face.iter_mut().zip(&refs) {
                    let head = tok.split('/').next().unwrap_or("");
                    let one_based: usize = head
                        .parse()
                        .map_err(|_| err(lineno, format!("bad vertex index {tok:?}")))?;
                    if one_based == 0 || one_based > vertices.len() {
                        return Err(err(
                            lineno,
                            format!("vertex index {one_based} out of range (1..={})", vertices.len()),
                        ));
                    }
                    *slot = one_based - 1;
                }
                faces.push(face);
            }
            other => {
                if ignored.insert(other.to_string()) {
                    warn!("{}:{lineno}: ignoring unsupported record type {other:?}", origin.display());
                }
            }
        }
    }
    // forward references are rejected above, so the index check covers the whole file
    TriMesh::new(vertices, faces).map_err(|e| err(text.lines().count(), e.to_string()))
}

pub fn write_obj<W: Write>(mesh: &TriMesh, mut out: W) -> std::io::Result<()> {
    for v in mesh.vertices() {
        writeln!(out, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_obj(mesh, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";

    fn parse(s: &str) -> Result<TriMesh> {
        parse_obj(s, Path::new("test.obj"))
    }

    #[test]
    fn minimal_triangle() {
        let m = parse(TRI).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn out_of_range_index_reports_line() {
        let e = parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n").unwrap_err();
        match e {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("out of range"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quads_and_malformed_lines_are_errors() {
        let quad = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 4 3\n";
        assert!(matches!(parse(quad), Err(Error::Parse { line: 5, .. })));
        assert!(matches!(parse("v 0 0\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("v 0 x 0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn comments_slashes_and_unknown_records() {
        let text = "# header\no face\nv 0 0 0 # origin\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n";
        let m = parse(text).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn save_writes_four_lines() {
        let m = parse(TRI).unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 3);
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let m = TriMesh::new(
            vec![[0.1234567, -5.5, 3.0], [1e3, 2.000_000_4, 0.0], [0.0, 1.0, -7.25]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let p = dir.path().join("a.obj");
        save_obj(&m, &p).unwrap();
        let a = load_obj(&p).unwrap();
        for (x, y) in a.vertices().iter().flatten().zip(m.vertices().iter().flatten()) {
            assert!((x - y).abs() <= 1e-6);
        }
        let q = dir.path().join("b.obj");
        save_obj(&a, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        assert_eq!(load_obj(&q).unwrap(), a);
    }
}
