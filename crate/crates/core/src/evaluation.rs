//! Neutralization error and rank-1 identification on held-out subjects.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::models::{Checkpoint, InferenceModel};
use crate::training::Corpus;

fn check_same(pred: &TriMesh, gt: &TriMesh) -> Result<()> {
    if !pred.same_topology(gt) {
        return Err(Error::TopologyMismatch {
            expected: gt.topology_hash().to_string(),
            found: pred.topology_hash().to_string(),
        });
    }
    Ok(())
}

/// Euclidean distance of each vertex to its counterpart, in mm.
pub fn per_vertex_errors(pred: &TriMesh, gt: &TriMesh) -> Result<Vec<f64>> {
    check_same(pred, gt)?;
    Ok(pred
        .vertices()
        .iter()
        .zip(gt.vertices())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect())
}

pub fn mean_vertex_error(pred: &TriMesh, gt: &TriMesh) -> Result<f64> {
    let e = per_vertex_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

pub fn per_vertex_csv(errors: &[f64]) -> String {
    let mut s = String::from("vertex_index,error_mm\n");
    for (i, e) in errors.iter().enumerate() {
        let _ = writeln!(s, "{i},{e}");
    }
    s
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm(format!("cosine of vectors with norms {na} and {nb}")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index of the gallery entry most cosine-similar to `probe`; the lowest
/// index wins ties.
pub fn nearest_gallery(gallery: &[Vec<f64>], probe: &[f64]) -> Result<usize> {
    let mut best = None::<(usize, f64)>;
    for (i, g) in gallery.iter().enumerate() {
        let c = cosine_similarity(g, probe)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Invalid("empty gallery".into()))
}

/// Fraction of probes whose nearest gallery entry carries their label.
pub fn rank1_identify(gallery: &[(Vec<f64>, String)], probes: &[(Vec<f64>, String)]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Invalid("no probes".into()));
    }
    let embeddings: Vec<Vec<f64>> = gallery.iter().map(|(e, _)| e.clone()).collect();
    let mut correct = 0usize;
    for (p, label) in probes {
        let i = nearest_gallery(&embeddings, p)?;
        correct += (gallery[i].1 == *label) as usize;
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// What the evaluation protocol needs from a trained system.
pub trait Pipeline {
    fn neutralize(&self, mesh: &TriMesh) -> Result<TriMesh>;
    /// Identity features of an expressive probe.
    fn probe_embedding(&self, mesh: &TriMesh) -> Result<Vec<f64>>;
    /// Identity features of an enrolled neutral mesh.
    fn gallery_embedding(&self, mesh: &TriMesh) -> Result<Vec<f64>>;
    /// Untranslated latent code, used by the raw-latent baseline.
    fn raw_latent(&self, mesh: &TriMesh) -> Result<Vec<f64>>;
}

pub struct CheckpointPipeline {
    pub model: InferenceModel,
    pub gallery_through_g: bool,
}

impl Pipeline for CheckpointPipeline {
    fn neutralize(&self, mesh: &TriMesh) -> Result<TriMesh> {
        self.model.neutralize(mesh)
    }

    fn probe_embedding(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        Ok(self.model.probe_embedding(mesh)?.0)
    }

    fn gallery_embedding(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        Ok(self.model.gallery_embedding(mesh, self.gallery_through_g)?.0)
    }

    fn raw_latent(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        Ok(self.model.encode(mesh)?.0.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub subject: String,
    pub expression: String,
    pub model_error: f64,
    pub baseline_error: f64,
    pub model_match: String,
    pub baseline_match: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairRow>,
    pub gallery_size: usize,
    /// Mean vertex error of neutralized probes, mm.
    pub model_error: f64,
    /// Mean vertex error of the expressive mesh taken as its own neutral, mm.
    pub baseline_error: f64,
    pub rank1: f64,
    /// Rank-1 of raw latent codes under cosine matching.
    pub rank1_baseline: f64,
}

impl EvalReport {
    fn from_rows(rows: Vec<PairRow>, gallery_size: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Corpus("no test probes".into()));
        }
        let k = rows.len() as f64;
        let model_error = rows.iter().map(|r| r.model_error).sum::<f64>() / k;
        let baseline_error = rows.iter().map(|r| r.baseline_error).sum::<f64>() / k;
        let rank1 = rows.iter().filter(|r| r.model_match == r.subject).count() as f64 / k;
        let rank1_baseline = rows.iter().filter(|r| r.baseline_match == r.subject).count() as f64 / k;
        Ok(Self {
            rows,
            gallery_size,
            model_error,
            baseline_error,
            rank1,
            rank1_baseline,
        })
    }

    pub const CSV_HEADER: &'static str = "subject,expression,model_error_mm,baseline_error_mm,model_match,baseline_match";

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.subject, r.expression, r.model_error, r.baseline_error, r.model_match, r.baseline_match
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "probes = {}\ngallery = {}\nmodel_mean_vertex_error_mm = {}\nbaseline_mean_vertex_error_mm = {}\nrank1 = {}\nrank1_raw_latent = {}\nchance = {}\n",
            self.rows.len(),
            self.gallery_size,
            self.model_error,
            self.baseline_error,
            self.rank1,
            self.rank1_baseline,
            1.0 / self.gallery_size as f64
        )
    }
}

/// Neutralization error and identification over every subject of `test`.
/// The neutral mesh of each subject is both the ground truth and its
/// gallery entry; every other mesh is a probe.
pub fn evaluate(pipeline: &dyn Pipeline, test: &Corpus) -> Result<EvalReport> {
    let mut gallery = Vec::with_capacity(test.subjects.len());
    let mut raw_gallery = Vec::with_capacity(test.subjects.len());
    for s in &test.subjects {
        gallery.push(pipeline.gallery_embedding(&s.neutral)?);
        raw_gallery.push(pipeline.raw_latent(&s.neutral)?);
    }
    let mut rows = Vec::new();
    for s in &test.subjects {
        for (tag, mesh) in &s.expressions {
            let pred = pipeline.neutralize(mesh)?;
            let m = nearest_gallery(&gallery, &pipeline.probe_embedding(mesh)?)?;
            let b = nearest_gallery(&raw_gallery, &pipeline.raw_latent(mesh)?)?;
            rows.push(PairRow {
                subject: s.name.clone(),
                expression: tag.clone(),
                model_error: mean_vertex_error(&pred, &s.neutral)?,
                baseline_error: mean_vertex_error(mesh, &s.neutral)?,
                model_match: test.subjects[m].name.clone(),
                baseline_match: test.subjects[b].name.clone(),
            });
        }
    }
    EvalReport::from_rows(rows, test.subjects.len())
}

/// Evaluates a checkpoint on a corpus of held-out subjects. Any subject
/// the checkpoint was trained on is rejected.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, test: &Corpus, gallery_through_g: bool) -> Result<EvalReport> {
    if let Some(s) = test.subjects.iter().find(|s| checkpoint.subjects.contains(&s.name)) {
        return Err(Error::Corpus(format!("subject {} was used for training", s.name)));
    }
    let model = InferenceModel::new(checkpoint.clone(), test.template())?;
    evaluate(
        &CheckpointPipeline {
            model,
            gallery_through_g,
        },
        test,
    )
}
