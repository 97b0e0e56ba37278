use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TriMesh;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_START_SEED: u64 = 0x5eed;

/// Undirected edge set of a mesh. Edges are stored as `(lo, hi)` with
/// `lo < hi`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl GraphTopology {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Invalid(format!("edge ({a}, {b}) outside {n} vertices")));
            }
            if a == b {
                return Err(Error::Invalid(format!("self-loop at vertex {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn connected_components(&self) -> usize {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut components = 0;
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        components
    }
}

/// Edge set formed by the sides of every face.
pub fn adjacency(mesh: &TriMesh) -> GraphTopology {
    let edges = mesh
        .faces()
        .iter()
        .flat_map(|&[a, b, c]| [(a, b), (b, c), (a, c)]);
    GraphTopology::new(mesh.n_vertices(), edges).expect("mesh faces are validated")
}

/// Combinatorial Laplacian `L = D - A`, its largest eigenvalue, and the
/// scaled operator `2 L / e_max - I`.
#[derive(Debug, Clone)]
pub struct GraphOperator {
    n: usize,
    laplacian: CsrMatrix,
    e_max: f64,
    scaled: Arc<CsrMatrix>,
}

impl GraphOperator {
    /// Builds the operator with a known `e_max`, e.g. one restored from a
    /// checkpoint.
    pub fn with_e_max(topology: &GraphTopology, e_max: f64) -> Result<Self> {
        if !(e_max.is_finite() && e_max > 0.0) {
            return Err(Error::Invalid(format!("e_max must be positive, got {e_max}")));
        }
        let laplacian = laplacian_matrix(topology);
        let scaled = Arc::new(laplacian.affine_with_identity(2.0 / e_max, -1.0));
        Ok(Self {
            n: topology.n(),
            laplacian,
            e_max,
            scaled,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    pub fn scaled(&self) -> &Arc<CsrMatrix> {
        &self.scaled
    }
}

fn laplacian_matrix(topology: &GraphTopology) -> CsrMatrix {
    let degrees = topology.degrees();
    let off = topology
        .edges()
        .iter()
        .flat_map(|&(a, b)| [(a, b, -1.0), (b, a, -1.0)]);
    let diag = degrees.iter().enumerate().map(|(i, &d)| (i, i, d as f64));
    CsrMatrix::from_triplets(topology.n(), topology.n(), off.chain(diag)).expect("edges in range")
}

pub fn build_laplacian(topology: &GraphTopology) -> Result<GraphOperator> {
    let components = topology.connected_components();
    if components != 1 {
        return Err(Error::Disconnected { components });
    }
    let laplacian = laplacian_matrix(topology);
    let e_max = max_eigenvalue(&laplacian)?;
    GraphOperator::with_e_max(topology, e_max)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the normalized all-ones vector plus a fixed pseudo-random
/// perturbation of size `1e-6`. A linear ramp is not enough here: on graphs
/// with a reflection symmetry (a 3-vertex path, a 4-cycle) it is exactly
/// orthogonal to the top eigenvector.
///
/// Stops once the Rayleigh quotient moves by less than `1e-9` relative, or
/// once the geometric tail of those moves (estimated from
/// the ratio of successive changes) is below the same bound.
pub fn max_eigenvalue(matrix: &CsrMatrix) -> Result<f64> {
    let n = matrix.rows();
    if n < 2 || matrix.cols() != n {
        return Err(Error::shape("max_eigenvalue", format!("{}x{} matrix", n, matrix.cols())));
    }
    let base = 1.0 / (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut x: Vec<f64> = (0..n).map(|_| base + rng.random_range(-1e-6..1e-6)).collect();
    normalize(&mut x);

    let mut rho_prev = f64::NAN;
    let mut delta_prev = f64::NAN;
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let y = matrix.matvec(&x);
        let rho: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - rho * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // x lies in the null space; the matrix is zero along every direction tried
            return Err(Error::NoConvergence { iterations: 0, residual });
        }
        x = y.into_iter().map(|v| v / norm).collect();

        let delta = (rho - rho_prev).abs();
        let scale = rho.abs().max(f64::MIN_POSITIVE);
        if residual <= POWER_TOL * scale * 1e-3 {
            return Ok(rho);
        }
        if delta.is_finite() {
            let ratio = if delta_prev.is_finite() && delta_prev > 0.0 {
                (delta / delta_prev).min(1.0)
            } else {
                1.0
            };
            let tail = if ratio < 1.0 { delta * ratio / (1.0 - ratio) } else { f64::INFINITY };
            if delta <= POWER_TOL * scale && tail <= POWER_TOL * scale {
                return Ok(rho);
            }
        }
        rho_prev = rho;
        delta_prev = delta;
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERS,
        residual,
    })
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> GraphTopology {
        GraphTopology::new(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    #[test]
    fn single_triangle_edges() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(adjacency(&m).edges(), &[(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn shared_edge_counted_once() {
        let m = TriMesh::new(vec![[0.0; 3]; 4], vec![[0, 1, 2], [1, 3, 2]]).unwrap();
        assert_eq!(adjacency(&m).edges().len(), 5);
    }

    #[test]
    fn triangle_strip_edge_count() {
        for k in 1..12 {
            // strip: triangle t uses vertices t, t+1, t+2
            let faces: Vec<_> = (0..k).map(|t| [t, t + 1, t + 2]).collect();
            let m = TriMesh::new(vec![[0.0; 3]; k + 2], faces.clone()).unwrap();
            // enumeration oracle: distinct unordered pairs among face sides
            let mut pairs = Vec::new();
            for f in &faces {
                for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
                    let p = (a.min(b), a.max(b));
                    if !pairs.contains(&p) {
                        pairs.push(p);
                    }
                }
            }
            assert_eq!(adjacency(&m).edges().len(), pairs.len());
            assert_eq!(pairs.len(), 2 * k + 1);
        }
    }

    #[test]
    fn path3_laplacian() {
        let op = build_laplacian(&path(3)).unwrap();
        assert_eq!(
            op.laplacian().to_dense(),
            vec![1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]
        );
    }

    #[test]
    fn path2_scaled_laplacian() {
        let op = build_laplacian(&path(2)).unwrap();
        assert!((op.e_max() - 2.0).abs() < 1e-9);
        let s = op.scaled().to_dense();
        let expect = [0.0, -1.0, -1.0, 0.0];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn k3_max_eigenvalue() {
        let k3 = GraphTopology::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap();
        let op = build_laplacian(&k3).unwrap();
        assert!((op.e_max() - 3.0).abs() < 3e-9);
    }

    #[test]
    fn symmetric_graphs_find_the_top_eigenvalue() {
        // path 0-1-2: spectrum {0, 1, 3}; 4-cycle: {0, 2, 2, 4}
        let op = build_laplacian(&path(3)).unwrap();
        assert!((op.e_max() - 3.0).abs() < 3e-9, "{}", op.e_max());
        let c4 = GraphTopology::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let op = build_laplacian(&c4).unwrap();
        assert!((op.e_max() - 4.0).abs() < 4e-9, "{}", op.e_max());
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = GraphTopology::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(build_laplacian(&g), Err(Error::Disconnected { components: 2 })));
    }

    #[test]
    fn zero_matrix_does_not_converge() {
        let z = CsrMatrix::from_triplets(3, 3, []).unwrap();
        assert!(matches!(max_eigenvalue(&z), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn self_loops_rejected() {
        assert!(GraphTopology::new(3, [(1, 1)]).is_err());
    }
}
