//! Registered triangle meshes and the graph operators derived from their
//! shared topology.

mod graph;
mod obj;

pub use graph::{adjacency, build_laplacian, max_eigenvalue, GraphOperator, GraphTopology};
pub use obj::{load_obj, parse_obj, save_obj, write_obj};

use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A triangle mesh with coordinates in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidMesh(format!("need at least 3 vertices, got {n}")));
        }
        if faces.is_empty() {
            return Err(Error::InvalidMesh("mesh has no faces".into()));
        }
        for (k, f) in faces.iter().enumerate() {
            if let Some(&i) = f.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {k} references vertex {i}, mesh has {n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {k} is degenerate: {f:?}")));
            }
        }
        if let Some(v) = vertices.iter().find(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidMesh(format!("non-finite vertex {v:?}")));
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Same faces, new coordinates.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(
                "with_vertices",
                format!("{} vertices for a {}-vertex topology", vertices.len(), self.vertices.len()),
            ));
        }
        Self::new(vertices, self.faces.clone())
    }

    /// Row-major `n x 3` coordinate block.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn topology_hash(&self) -> TopologyHash {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        TopologyHash(h.finalize().into())
    }

    pub fn same_topology(&self, other: &TriMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }
}

/// SHA-256 over vertex count and face list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TopologyHash(pub [u8; 32]);

impl fmt::Display for TopologyHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> TriMesh {
        TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn rejects_invalid_meshes() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(TriMesh::new(v.clone(), vec![]).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriMesh::new(v[..2].to_vec(), vec![[0, 1, 0]]).is_err());
    }

    #[test]
    fn topology_hash_ignores_coordinates() {
        let a = tri();
        let b = a.with_vertices(vec![[5.0; 3], [1.0, 2.0, 3.0], [0.0, 0.0, 9.0]]).unwrap();
        assert_eq!(a.topology_hash(), b.topology_hash());
        let c = TriMesh::new(a.vertices().to_vec(), vec![[0, 2, 1]]).unwrap();
        assert_ne!(a.topology_hash(), c.topology_hash());
    }
}
