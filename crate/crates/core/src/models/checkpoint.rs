//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "NEUTRACK" | version u32 | topology hash [32] | n u64 | s u64
//! e_max f64 | centroid 3 x f64 | scale f64
//! offset count u64 (0 or n), then offsets n x 3 x f64 | flags u8
//! subject count u32, then per subject: len u32 + utf8
//! config echo: len u32 + utf8
//! block count u32, then per block:
//!     name len u32 + utf8 | rank u32 | dims rank x u64 | values f64...
//! ```

use std::fs;
use std::path::Path;

use super::{FaceNet, ModelFlags};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{TopologyHash, TriMesh};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NEUTRACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Affine map from millimeters to network coordinates:
/// `(v - centroid) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub centroid: [f64; 3],
    pub scale: f64,
    /// Per-vertex mean shape in millimeters relative to `centroid`; empty
    /// when only the global affine map is used.
    pub offsets: Vec<[f64; 3]>,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        centroid: [0.0; 3],
        scale: 1.0,
        offsets: Vec::new(),
    };

    /// Per-vertex mean of the meshes as offsets, and the RMS deviation
    /// from that mean as scale.
    pub fn fit_template<'a>(meshes: impl IntoIterator<Item = &'a TriMesh>) -> Result<Self> {
        let meshes: Vec<&TriMesh> = meshes.into_iter().collect();
        let Some(first) = meshes.first() else {
            return Err(Error::Corpus("cannot fit normalization on an empty corpus".into()));
        };
        let n = first.n_vertices();
        let mut mean = vec![[0.0; 3]; n];
        for m in &meshes {
            for (acc, v) in mean.iter_mut().zip(m.vertices()) {
                for k in 0..3 {
                    acc[k] += v[k] / meshes.len() as f64;
                }
            }
        }
        let sq: f64 = meshes
            .iter()
            .flat_map(|m| m.vertices().iter().zip(&mean))
            .map(|(v, c)| (0..3).map(|k| (v[k] - c[k]).powi(2)).sum::<f64>())
            .sum();
        let scale = (sq / (meshes.len() * n) as f64).sqrt();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Corpus(format!("degenerate corpus spread {scale}")));
        }
        Ok(Self {
            centroid: [0.0; 3],
            scale,
            offsets: mean,
        })
    }

    fn offset(&self, i: usize) -> [f64; 3] {
        self.offsets.get(i).copied().unwrap_or([0.0; 3])
    }

    /// Centroid of all vertices of all meshes, and the RMS distance of
    /// those vertices from it.
    pub fn fit<'a>(meshes: impl IntoIterator<Item = &'a TriMesh>) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        let meshes: Vec<&TriMesh> = meshes.into_iter().collect();
        for m in &meshes {
            for v in m.vertices() {
                for k in 0..3 {
                    sum[k] += v[k];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Corpus("cannot fit normalization on an empty corpus".into()));
        }
        let centroid = sum.map(|s| s / count as f64);
        let sq: f64 = meshes
            .iter()
            .flat_map(|m| m.vertices())
            .map(|v| (0..3).map(|k| (v[k] - centroid[k]).powi(2)).sum::<f64>())
            .sum();
        let scale = (sq / count as f64).sqrt();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Corpus(format!("degenerate corpus extent {scale}")));
        }
        Ok(Self {
            centroid,
            scale,
            offsets: Vec::new(),
        })
    }

    /// `[n, 3]` normalized coordinates.
    pub fn apply(&self, mesh: &TriMesh) -> Tensor {
        let data = mesh
            .vertices()
            .iter()
            .enumerate()
            .flat_map(|(i, v)| {
                let o = self.offset(i);
                (0..3).map(move |k| (v[k] - self.centroid[k] - o[k]) / self.scale)
            })
            .collect();
        Tensor::new([mesh.n_vertices(), 3], data).expect("n x 3")
    }

    pub fn invert(&self, coords: &[f64]) -> Vec<[f64; 3]> {
        coords
            .chunks(3)
            .enumerate()
            .map(|(i, c)| {
                let o = self.offset(i);
                [0, 1, 2].map(|k| c[k] * self.scale + self.centroid[k] + o[k])
            })
            .collect()
    }
}

/// Everything needed to run inference on meshes of one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub topology_hash: TopologyHash,
    pub e_max: f64,
    pub normalization: Normalization,
    /// Training subject labels, indexed by recognizer class.
    pub subjects: Vec<String>,
    /// Training configuration as `key = value` text.
    pub config_echo: String,
    pub net: FaceNet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.topology_hash.0);
        out.extend_from_slice(&(self.net.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.net.subjects as u64).to_le_bytes());
        out.extend_from_slice(&self.e_max.to_le_bytes());
        for c in self.normalization.centroid {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&self.normalization.scale.to_le_bytes());
        out.extend_from_slice(&(self.normalization.offsets.len() as u64).to_le_bytes());
        for o in &self.normalization.offsets {
            for c in o {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        let flags = self.net.flags.paper_literal_decoder_relu as u8 | (self.net.flags.generator_linear_head as u8) << 1;
        out.push(flags);

        out.extend_from_slice(&(self.subjects.len() as u32).to_le_bytes());
        for s in &self.subjects {
            put_str(&mut out, s);
        }
        put_str(&mut out, &self.config_echo);

        let blocks = self.net.named_tensors();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let topology_hash = TopologyHash(r.take(32)?.try_into().expect("32 bytes"));
        let n = r.u64()? as usize;
        let s = r.u64()? as usize;
        let e_max = r.f64()?;
        let centroid = [r.f64()?, r.f64()?, r.f64()?];
        let scale = r.f64()?;
        let offset_count = r.u64()? as usize;
        if offset_count != 0 && offset_count != n {
            return Err(Error::Checkpoint(format!("{offset_count} normalization offsets for {n} vertices")));
        }
        let offsets = (0..offset_count)
            .map(|_| Ok([r.f64()?, r.f64()?, r.f64()?]))
            .collect::<Result<Vec<_>>>()?;
        let flag_bits = r.take(1)?[0];
        if flag_bits > 3 {
            return Err(Error::Checkpoint(format!("unknown flag bits {flag_bits:#x}")));
        }
        let flags = ModelFlags {
            paper_literal_decoder_relu: flag_bits & 1 != 0,
            generator_linear_head: flag_bits & 2 != 0,
        };
        let subject_count = r.u32()? as usize;
        if subject_count != s {
            return Err(Error::Checkpoint(format!("{subject_count} subject labels for {s} classes")));
        }
        let subjects = (0..subject_count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let config_echo = r.string()?;

        // shapes come from the architecture; the file must agree with them
        let mut net = FaceNet::zeros(n, s, flags)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("{count} parameter blocks, expected {}", expected.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let got = r.string()?;
            if &got != name {
                return Err(Error::Checkpoint(format!("expected block {name}, found {got}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!("block {name} has shape {dims:?}, expected {shape:?}")));
            }
            let len: usize = dims.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            loaded.push(Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = loaded.into_iter();
        for part in super::Part::ALL {
            for slot in net.tensors_mut(part) {
                *slot = it.next().expect("counted above");
            }
        }
        Ok(Self {
            topology_hash,
            e_max,
            normalization: Normalization {
                centroid,
                scale,
                offsets,
            },
            subjects,
            config_echo,
            net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let net = FaceNet::init(
            9,
            3,
            ModelFlags {
                paper_literal_decoder_relu: false,
                generator_linear_head: true,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        Checkpoint {
            topology_hash: TopologyHash([7; 32]),
            e_max: 5.25,
            normalization: Normalization {
                centroid: [1.0, -2.0, 0.5],
                scale: 80.0,
                offsets: Vec::new(),
            },
            subjects: vec!["a".into(), "b".into(), "c".into()],
            config_echo: "seed = 1\n".into(),
            net,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn template_offsets_round_trip() {
        let mut ck = sample();
        ck.normalization = Normalization {
            centroid: [0.0; 3],
            scale: 2.5,
            offsets: (0..9).map(|i| [i as f64, -0.5 * i as f64, 1.0 / (i + 1) as f64]).collect(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        ck.normalization.offsets.pop();
        assert!(Checkpoint::from_bytes(&ck.to_bytes()).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let m = TriMesh::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 4.0, 2.0]], vec![[0, 1, 2]]).unwrap();
        let norm = Normalization::fit([&m]).unwrap();
        let x = norm.apply(&m);
        let mean: f64 = x.data().iter().sum::<f64>();
        assert!(mean.abs() < 1e-12);
        let rms = (x.data().iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        for (a, b) in norm.invert(x.data()).iter().zip(m.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn template_normalization_centers_each_vertex() {
        let a = TriMesh::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 4.0, 2.0]], vec![[0, 1, 2]]).unwrap();
        let b = a.with_vertices(vec![[1.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 4.0, 0.0]]).unwrap();
        let norm = Normalization::fit_template([&a, &b]).unwrap();
        let (xa, xb) = (norm.apply(&a), norm.apply(&b));
        for (u, v) in xa.data().iter().zip(xb.data()) {
            assert!((u + v).abs() < 1e-12);
        }
        let rms = (xa.data().iter().chain(xb.data()).map(|v| v * v).sum::<f64>() / 6.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        for (p, q) in norm.invert(xb.data()).iter().zip(b.vertices()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-12);
            }
        }
        assert!(Normalization::fit_template([&a, &a]).is_err());
    }
}
