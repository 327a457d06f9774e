//! Builds the fine and coarse graphs for a two-part forecasting layout and
//! prints edges, normalized adjacency and the assignment matrix.
//!
//! cargo run --example graph_dump -- [pruned]

use ctxalign::graphspec::{
    build_fsca_forecast_spec, compute_edge_weights, format_coarse_edges, format_fine_edges, format_matrix,
    normalize_adjacency,
};
use ctxalign::numerics::Tensor;
use ctxalign::tsembed::SequenceLayout;
use rand::SeedableRng;

fn main() -> ctxalign::Result<()> {
    let pruned = std::env::args().any(|a| a == "pruned");
    // 3 + 2 patches, 2 prompt tokens per copy
    let layout = SequenceLayout::few_shot_forecast(&[3, 2], 5, 2)?;
    let spec = build_fsca_forecast_spec(&layout, pruned)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let nodes = Tensor::uniform(&[layout.total_len(), 4], 1.0, &mut rng);
    let (fine, coarse) = compute_edge_weights(&spec, &nodes)?;
    let w = ctxalign::graphspec::fine_edge_weights(&spec, &nodes);

    println!("layout {} ({} fine, {} coarse nodes)", layout.mode_name(), spec.fine_nodes(), spec.coarse_nodes());
    println!("fine edges (source target group weight):\n{}", format_fine_edges(&spec, &w));
    println!("coarse edges:\n{}", format_coarse_edges(&spec));
    println!("normalized fine adjacency:\n{}", format_matrix(&normalize_adjacency(&fine)?));
    println!("normalized coarse adjacency:\n{}", format_matrix(&normalize_adjacency(&coarse)?));
    println!("assignment matrix:\n{}", format_matrix(spec.gamma()));
    Ok(())
}
