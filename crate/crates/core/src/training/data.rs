use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{load_obj, TriMesh};
use crate::models::Normalization;

pub const NEUTRAL_FILE: &str = "neutral.obj";

/// An expressive mesh and the neutral mesh of the same subject.
#[derive(Debug, Clone)]
pub struct FacePair {
    pub expressive: TriMesh,
    pub neutral: TriMesh,
    pub subject: String,
    pub expression: String,
}

#[derive(Debug, Clone)]
pub struct SubjectScans {
    pub name: String,
    pub neutral: TriMesh,
    /// `(expression tag, mesh)`, sorted by tag.
    pub expressions: Vec<(String, TriMesh)>,
}

/// A registered corpus laid out as `<root>/<subject>/<expression>.obj`.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Sorted by name.
    pub subjects: Vec<SubjectScans>,
}

impl Corpus {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut dirs = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if entry.path().is_dir() {
                dirs.push(entry.path());
            }
        }
        dirs.sort();
        let mut subjects = Vec::with_capacity(dirs.len());
        for dir in dirs {
            subjects.push(load_subject(&dir)?);
        }
        Self::new(subjects)
    }

    pub fn new(mut subjects: Vec<SubjectScans>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Corpus("no subjects".into()));
        }
        subjects.sort_by(|a, b| a.name.cmp(&b.name));
        if subjects.windows(2).any(|w| w[0].name == w[1].name) {
            return Err(Error::Corpus("duplicate subject names".into()));
        }
        let hash = subjects[0].neutral.topology_hash();
        for s in &subjects {
            let meshes = std::iter::once(("neutral", &s.neutral)).chain(s.expressions.iter().map(|(t, m)| (t.as_str(), m)));
            for (tag, m) in meshes {
                if m.topology_hash() != hash {
                    return Err(Error::Corpus(format!(
                        "{}/{tag} has topology {}, corpus has {hash}",
                        s.name,
                        m.topology_hash()
                    )));
                }
            }
        }
        Ok(Self { subjects })
    }

    pub fn template(&self) -> &TriMesh {
        &self.subjects[0].neutral
    }

    pub fn names(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.name.clone()).collect()
    }

    pub fn subject(&self, name: &str) -> Option<&SubjectScans> {
        self.subjects.iter().find(|s| s.name == name)
    }

    /// Every (expression, neutral) pair of the named subjects, in corpus order.
    pub fn pairs(&self, names: &[String]) -> Result<Vec<FacePair>> {
        let mut out = Vec::new();
        for name in names {
            let s = self
                .subject(name)
                .ok_or_else(|| Error::Corpus(format!("unknown subject {name}")))?;
            for (tag, m) in &s.expressions {
                out.push(FacePair {
                    expressive: m.clone(),
                    neutral: s.neutral.clone(),
                    subject: s.name.clone(),
                    expression: tag.clone(),
                });
            }
        }
        Ok(out)
    }
}

fn load_subject(dir: &Path) -> Result<SubjectScans> {
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Corpus(format!("bad subject directory {}", dir.display())))?
        .to_string();
    let neutral_path = dir.join(NEUTRAL_FILE);
    if !neutral_path.is_file() {
        return Err(Error::Corpus(format!("{} has no {NEUTRAL_FILE}", dir.display())));
    }
    let neutral = load_obj(&neutral_path)?;
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_obj = path.extension().is_some_and(|e| e == "obj");
        if is_obj && path.file_name().is_some_and(|f| f != NEUTRAL_FILE) {
            files.push(path);
        }
    }
    files.sort();
    let mut expressions = Vec::with_capacity(files.len());
    for path in files {
        let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        expressions.push((tag, load_obj(&path)?));
    }
    Ok(SubjectScans {
        name,
        neutral,
        expressions,
    })
}

/// Deterministic subject-level split: `round(fraction * s)` subjects,
/// clamped to `[1, s - 1]`, go to training. Both halves come back sorted.
pub fn make_splits(subjects: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if subjects.len() < 2 {
        return Err(Error::Corpus(format!("need at least 2 subjects to split, got {}", subjects.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut sorted = subjects.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Corpus("duplicate subject names".into()));
    }
    let k = ((fraction * sorted.len() as f64).round() as usize).clamp(1, sorted.len() - 1);
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = sorted[..k].to_vec();
    let mut test = sorted[k..].to_vec();
    train.sort();
    test.sort();
    Ok((train, test))
}

/// Normalized tensors for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[batch, n, 3]`
    pub expressive: Tensor,
    /// `[batch, n, 3]`
    pub neutral: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[&FacePair], labels: Vec<usize>, norm: &Normalization) -> Result<Self> {
        if pairs.is_empty() || pairs.len() != labels.len() {
            return Err(Error::shape("batch", format!("{} pairs, {} labels", pairs.len(), labels.len())));
        }
        let n = pairs[0].neutral.n_vertices();
        let stack = |get: &dyn Fn(&FacePair) -> &TriMesh| -> Result<Tensor> {
            let mut data = Vec::with_capacity(pairs.len() * n * 3);
            for p in pairs {
                let m = get(p);
                if m.n_vertices() != n {
                    return Err(Error::shape("batch", format!("{} vertices, expected {n}", m.n_vertices())));
                }
                data.extend_from_slice(norm.apply(m).data());
            }
            Tensor::new([pairs.len(), n, 3], data)
        };
        Ok(Self {
            expressive: stack(&|p| &p.expressive)?,
            neutral: stack(&|p| &p.neutral)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn split_sizes() {
        let (train, test) = make_splits(&names(10), 0.7, 3).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let (train, test) = make_splits(&names(20), 0.7, 3).unwrap();
        assert_eq!((train.len(), test.len()), (14, 6));
        assert!(make_splits(&names(1), 0.7, 0).is_err());
        assert!(make_splits(&names(4), 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_deterministically(k in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let all = names(k);
            let (train, test) = make_splits(&all, frac, seed).unwrap();
            prop_assert!(!train.is_empty() && !test.is_empty());
            prop_assert!(train.iter().all(|t| !test.contains(t)));
            let mut joined: Vec<String> = train.iter().chain(&test).cloned().collect();
            joined.sort();
            prop_assert_eq!(joined, all.clone());
            let again = make_splits(&all, frac, seed).unwrap();
            prop_assert_eq!(again, (train, test));
        }
    }

    #[test]
    fn corpus_requires_neutral_and_one_topology() {
        let dir = tempfile::tempdir().unwrap();
        let tri = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        let quadish = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3\nf 2 4 3\n";
        let a = dir.path().join("alice");
        fs::create_dir_all(&a).unwrap();
        fs::write(a.join("smile.obj"), tri).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::Corpus(_))));
        fs::write(a.join("neutral.obj"), tri).unwrap();
        fs::write(dir.path().join("manifest.csv"), "x").unwrap();
        let c = Corpus::load(dir.path()).unwrap();
        assert_eq!(c.names(), vec!["alice".to_string()]);
        assert_eq!(c.pairs(&c.names()).unwrap().len(), 1);
        let b = dir.path().join("bob");
        fs::create_dir_all(&b).unwrap();
        fs::write(b.join("neutral.obj"), quadish).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::Corpus(_))));
    }
}
