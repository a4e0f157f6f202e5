use super::GotConfig;
use crate::datamodel::sample_indices;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_matrix, Matrix, Rng};

/// Patch graph of one slide: sampled nodes and a thresholded cosine
/// adjacency. Node weights are uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct StainGraph {
    pub nodes: Matrix,
    /// Row of each node in the feature matrix it was sampled from.
    pub indices: Vec<usize>,
    /// Row-major `n × n`, symmetric, false on the diagonal.
    pub adjacency: Vec<bool>,
}

impl StainGraph {
    /// Builds the adjacency of a given node set.
    pub fn from_nodes(nodes: Matrix, indices: Vec<usize>, threshold_step: f64) -> Result<Self> {
        if nodes.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if indices.len() != nodes.rows() {
            return Err(Error::dims("StainGraph", nodes.rows(), indices.len()));
        }
        let sim = cosine_similarity_matrix(&nodes, &nodes)?;
        let n = nodes.rows();
        let mut adjacency = vec![false; n * n];
        match graph_threshold(&sim, threshold_step) {
            Some(t) => {
                for i in 0..n {
                    for j in 0..n {
                        adjacency[i * n + j] = i != j && sim[(i, j)] > t;
                    }
                }
            }
            None => {
                for i in 0..n {
                    for j in 0..n {
                        adjacency[i * n + j] = i != j;
                    }
                }
            }
        }
        // cosine is symmetric up to rounding; make the adjacency exactly so
        for i in 0..n {
            for j in 0..i {
                let e = adjacency[i * n + j] || adjacency[j * n + i];
                adjacency[i * n + j] = e;
                adjacency[j * n + i] = e;
            }
        }
        Ok(Self { nodes, indices, adjacency })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_nodes() + j]
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    /// Adjacency as a 0/1 matrix.
    pub fn adjacency_matrix(&self) -> Matrix {
        let n = self.n_nodes();
        Matrix::from_fn(n, n, |i, j| if self.adjacency[i * n + j] { 1.0 } else { 0.0 })
    }
}

/// Edge threshold `s_min + step·(s_max − s_min)` over off-diagonal entries.
///
/// `None` when all off-diagonal similarities coincide (or there are none);
/// such graphs are fully connected.
pub fn graph_threshold(sim: &Matrix, step: f64) -> Option<f64> {
    let n = sim.rows();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(sim[(i, j)]);
                hi = hi.max(sim[(i, j)]);
            }
        }
    }
    if hi > lo {
        Some(lo + step * (hi - lo))
    } else {
        None
    }
}

/// Samples `min(sample_size, N)` distinct rows of `features` as graph nodes.
pub fn build_stain_graph(features: &Matrix, cfg: &GotConfig, rng: &mut Rng) -> Result<StainGraph> {
    let n = cfg.sample_size.min(features.rows());
    let indices = sample_indices(features.rows(), n, rng)?;
    StainGraph::from_nodes(features.select_rows(&indices), indices, cfg.threshold_step)
}
