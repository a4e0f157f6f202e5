//! Fixtures shared by the benchmarks in `benches/`.

use stainalign::losses::StainGraph;
use stainalign::{EncoderConfig, Matrix, Rng};

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Fully connected-ish patch graph over `n` random nodes.
pub fn random_graph(n: usize, d: usize, rng: &mut Rng) -> StainGraph {
    StainGraph::from_nodes(gaussian(n, d, rng), (0..n).collect(), 0.1).expect("nonempty node set")
}

/// A mid-sized encoder: wide enough for the kernels to dominate, small
/// enough for a benchmark iteration to stay in the millisecond range.
pub fn bench_encoder() -> EncoderConfig {
    EncoderConfig {
        d_patch: 128,
        d_se: 16,
        d_hidden: 128,
        d_attn: 64,
        n_heads: 4,
        n_pre_layers: 2,
        post_hidden: 256,
        d_out: 128,
        n_stains: 3,
        ..Default::default()
    }
}
