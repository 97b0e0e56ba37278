use super::{Checkpoint, IdentityEmbedding, LatentCode};
use crate::error::{Error, Result};
use crate::mesh::{adjacency, GraphOperator, TriMesh};

/// A checkpoint bound to the graph operator of its topology.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    checkpoint: Checkpoint,
    op: GraphOperator,
}

impl InferenceModel {
    /// `template` supplies the topology; it must hash to the checkpoint's.
    pub fn new(checkpoint: Checkpoint, template: &TriMesh) -> Result<Self> {
        check_topology(&checkpoint, template)?;
        let op = GraphOperator::with_e_max(&adjacency(template), checkpoint.e_max)?;
        Ok(Self { checkpoint, op })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn operator(&self) -> &GraphOperator {
        &self.op
    }

    /// Expressive-side latent code `Enc(x)`.
    pub fn encode(&self, mesh: &TriMesh) -> Result<LatentCode> {
        check_topology(&self.checkpoint, mesh)?;
        let x = self.checkpoint.normalization.apply(mesh);
        self.checkpoint.net.encode(&self.op, &x)
    }

    /// `Dec(G(Enc(x)))` mapped back to millimeters, with the input's faces.
    pub fn neutralize(&self, mesh: &TriMesh) -> Result<TriMesh> {
        let z = self.encode(mesh)?;
        let g = self.checkpoint.net.translate(&z)?;
        let y = self.checkpoint.net.decode(&self.op, &g)?;
        mesh.with_vertices(self.checkpoint.normalization.invert(y.data()))
    }

    /// Identity features of a probe: recognizer logits on `G(Enc(x))`.
    pub fn probe_embedding(&self, mesh: &TriMesh) -> Result<IdentityEmbedding> {
        let z = self.encode(mesh)?;
        let g = self.checkpoint.net.translate(&z)?;
        self.checkpoint.net.identity_embedding(&g)
    }

    /// Identity features of an enrolled neutral face: recognizer logits on
    /// `Enc(x)`, or on `G(Enc(x))` when `through_generator` is set.
    pub fn gallery_embedding(&self, mesh: &TriMesh, through_generator: bool) -> Result<IdentityEmbedding> {
        let mut z = self.encode(mesh)?;
        if through_generator {
            z = self.checkpoint.net.translate(&z)?;
        }
        self.checkpoint.net.identity_embedding(&z)
    }
}

fn check_topology(checkpoint: &Checkpoint, mesh: &TriMesh) -> Result<()> {
    let found = mesh.topology_hash();
    if found != checkpoint.topology_hash || mesh.n_vertices() != checkpoint.net.n {
        return Err(Error::TopologyMismatch {
            expected: checkpoint.topology_hash.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// One-shot neutralization of a single mesh.
pub fn neutralize(mesh: &TriMesh, checkpoint: &Checkpoint) -> Result<TriMesh> {
    InferenceModel::new(checkpoint.clone(), mesh)?.neutralize(mesh)
}
