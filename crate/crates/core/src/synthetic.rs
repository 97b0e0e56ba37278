//! Synthetic registered face corpora with a known identity/expression split.
//!
//! Every mesh is `template + B_id a_subject (+ B_expr c_expression)`. The
//! bases are smoothed random displacement fields, orthonormalized jointly
//! and scaled so that a coefficient vector of norm `sigma` displaces the
//! vertices by `sigma` millimeters RMS. Expression coefficients are shared
//! by all subjects.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::mesh::{adjacency, save_obj, TriMesh};
use crate::training::make_splits;

pub const SMOOTHING_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_vertices: usize,
    pub subjects: usize,
    pub expressions: usize,
    pub identity_rank: usize,
    pub expression_rank: usize,
    /// RMS identity displacement, mm.
    pub sigma_id: f64,
    /// RMS expression displacement, mm.
    pub sigma_expr: f64,
    pub seed: u64,
    /// Fraction of subjects marked `train` in the manifest.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_vertices: 200,
            subjects: 20,
            expressions: 12,
            identity_rank: 8,
            expression_rank: 6,
            sigma_id: 3.0,
            sigma_expr: 5.0,
            seed: 7,
            train_fraction: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        grid_shape(self.n_vertices)?;
        if self.subjects < 2 || self.expressions == 0 {
            return bad(format!("need >= 2 subjects and >= 1 expression, got {} / {}", self.subjects, self.expressions));
        }
        if self.identity_rank == 0 || self.expression_rank == 0 {
            return bad("basis ranks must be positive".into());
        }
        if self.identity_rank >= self.n_vertices || self.expression_rank >= self.n_vertices {
            return bad(format!("basis ranks must be below n = {}", self.n_vertices));
        }
        if !(self.sigma_id > 0.0 && self.sigma_expr > 0.0 && self.sigma_id.is_finite() && self.sigma_expr.is_finite()) {
            return bad("amplitudes must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            n_vertices: kv.take("n_vertices", d.n_vertices)?,
            subjects: kv.take("subjects", d.subjects)?,
            expressions: kv.take("expressions", d.expressions)?,
            identity_rank: kv.take("identity_rank", d.identity_rank)?,
            expression_rank: kv.take("expression_rank", d.expression_rank)?,
            sigma_id: kv.take("sigma_id", d.sigma_id)?,
            sigma_expr: kv.take("sigma_expr", d.sigma_expr)?,
            seed: kv.take("seed", d.seed)?,
            train_fraction: kv.take("train_fraction", d.train_fraction)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(KeyValues::parse(text, "<spec>")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(KeyValues::load(path)?)
    }
}

/// Rows and columns of the template grid: the factorization of `n` with
/// both sides at least 2 that is closest to square.
pub fn grid_shape(n: usize) -> Result<(usize, usize)> {
    let mut best = None;
    let mut r = 2;
    while r * r <= n {
        if n % r == 0 {
            best = Some((r, n / r));
        }
        r += 1;
    }
    best.ok_or_else(|| Error::Config(format!("n_vertices = {n} has no r x c grid with r, c >= 2")))
}

/// A face-like open patch of an ellipsoid (mm) with a nose bump,
/// triangulated as a regular grid.
pub fn template_mesh(n: usize) -> Result<TriMesh> {
    let (rows, cols) = grid_shape(n)?;
    let (ax, ay, az) = (75.0, 95.0, 60.0);
    let mut vertices = Vec::with_capacity(n);
    for i in 0..rows {
        let theta = (i as f64 / (rows - 1) as f64 - 0.5) * 0.8 * std::f64::consts::PI;
        for j in 0..cols {
            let phi = (j as f64 / (cols - 1) as f64 - 0.5) * 1.2 * std::f64::consts::PI;
            let bump = 20.0 * (-(phi * phi + theta * theta) / 0.1).exp();
            vertices.push([
                ax * theta.cos() * phi.sin(),
                ay * theta.sin(),
                az * theta.cos() * phi.cos() + bump,
            ]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let v00 = i * cols + j;
            let v01 = v00 + 1;
            let v10 = v00 + cols;
            let v11 = v10 + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }
    TriMesh::new(vertices, faces)
}

/// Ground-truth generative model behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub template: TriMesh,
    /// Each basis field is `n` displacement vectors with RMS length 1.
    pub identity_basis: Vec<Vec<[f64; 3]>>,
    pub expression_basis: Vec<Vec<[f64; 3]>>,
    pub subject_coefficients: Vec<Vec<f64>>,
    pub expression_coefficients: Vec<Vec<f64>>,
}

impl SyntheticModel {
    pub fn build(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let template = template_mesh(spec.n_vertices)?;
        let n = spec.n_vertices;
        let neighbors = adjacency(&template).neighbors();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let total = spec.identity_rank + spec.expression_rank;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
        for k in 0..total {
            let mut field: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..SMOOTHING_ITERATIONS {
                field = smooth(&field, &neighbors);
            }
            for b in &basis {
                let d = dot(&field, b);
                for (f, bv) in field.iter_mut().zip(b) {
                    *f -= d * bv;
                }
            }
            let norm = dot(&field, &field).sqrt();
            if norm < 1e-9 {
                return Err(Error::Invalid(format!("basis field {k} is degenerate")));
            }
            field.iter_mut().for_each(|v| *v /= norm);
            basis.push(field);
        }
        let scale = (n as f64).sqrt();
        let to_field = |b: &Vec<f64>| -> Vec<[f64; 3]> { b.chunks(3).map(|c| [c[0], c[1], c[2]].map(|v| v * scale)).collect() };
        let identity_basis = basis[..spec.identity_rank].iter().map(to_field).collect();
        let expression_basis = basis[spec.identity_rank..].iter().map(to_field).collect();

        let subject_coefficients = (0..spec.subjects)
            .map(|_| sphere_point(spec.identity_rank, spec.sigma_id, &mut rng))
            .collect();
        let expression_coefficients = (0..spec.expressions)
            .map(|_| sphere_point(spec.expression_rank, spec.sigma_expr, &mut rng))
            .collect();
        Ok(Self {
            template,
            identity_basis,
            expression_basis,
            subject_coefficients,
            expression_coefficients,
        })
    }

    pub fn neutral(&self, subject: usize) -> Result<TriMesh> {
        displace(&self.template, &self.identity_basis, &self.subject_coefficients[subject])
    }

    pub fn expressive(&self, subject: usize, expression: usize) -> Result<TriMesh> {
        let neutral = self.neutral(subject)?;
        displace(&neutral, &self.expression_basis, &self.expression_coefficients[expression])
    }
}

/// `mesh + sum_k coefficients[k] * basis[k]`.
pub fn displace(mesh: &TriMesh, basis: &[Vec<[f64; 3]>], coefficients: &[f64]) -> Result<TriMesh> {
    if basis.len() != coefficients.len() {
        return Err(Error::shape("displace", format!("{} fields, {} coefficients", basis.len(), coefficients.len())));
    }
    let mut v = mesh.vertices().to_vec();
    for (field, &c) in basis.iter().zip(coefficients) {
        for (p, d) in v.iter_mut().zip(field) {
            for k in 0..3 {
                p[k] += c * d[k];
            }
        }
    }
    mesh.with_vertices(v)
}

fn smooth(field: &[f64], neighbors: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for (v, nb) in neighbors.iter().enumerate() {
        let w = 1.0 / (nb.len() + 1) as f64;
        for k in 0..3 {
            let mut s = field[3 * v + k];
            for &u in nb {
                s += field[3 * u + k];
            }
            out[3 * v + k] = s * w;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sphere_point(dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&g, &g).sqrt();
        if norm > 1e-12 {
            return g.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

pub fn subject_name(i: usize) -> String {
    format!("subject_{i:02}")
}

pub fn expression_name(i: usize) -> String {
    format!("expr_{i:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub files: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Writes `<out>/<subject>/{neutral,expr_XX}.obj` and `<out>/manifest.csv`.
pub fn generate_corpus(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<CorpusSummary> {
    let out = out.as_ref();
    let model = SyntheticModel::build(spec)?;
    let names: Vec<String> = (0..spec.subjects).map(subject_name).collect();
    let (train, test) = make_splits(&names, spec.train_fraction, spec.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut manifest = String::from("subject,expression,file,split\n");
    let mut files = 0;
    for (s, name) in names.iter().enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let split = if train.contains(name) { "train" } else { "test" };
        save_obj(&model.neutral(s)?, dir.join("neutral.obj"))?;
        let _ = writeln!(manifest, "{name},neutral,{name}/neutral.obj,{split}");
        files += 1;
        for e in 0..spec.expressions {
            let ename = expression_name(e);
            save_obj(&model.expressive(s, e)?, dir.join(format!("{ename}.obj")))?;
            let _ = writeln!(manifest, "{name},{ename},{name}/{ename}.obj,{split}");
            files += 1;
        }
    }
    let path = out.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(CorpusSummary {
        files,
        train_subjects: train,
        test_subjects: test,
    })
}
