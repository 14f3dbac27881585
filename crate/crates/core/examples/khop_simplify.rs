//! k-hop simplification around epithelial anchors, checked against the
//! adjacency-power formulation, and the K-means subgraph split.
//!
//!     cargo run --release --example khop_simplify

use cellgraph::graph::EdgeRule;
use cellgraph::pipeline::synth_graph;
use cellgraph::simplify::{
    extract_partition_subgraphs, induced_subgraph, khop_mask, kmeans_split, AnchorSelection, HopMethod,
    InducedSubgraph, SubgraphMode,
};
use cellgraph::synth::{Preset, SynthConfig};

fn main() -> cellgraph::Result<()> {
    let g = synth_graph(&SynthConfig::preset(Preset::Easy, 2).scaled(0.5), EdgeRule::default())?;
    let anchors = AnchorSelection::epithelial();
    println!("{} nodes, {} anchors", g.num_nodes(), g.epithelial_nodes().len());

    for k in 0..=5 {
        let bfs = khop_mask(&g, &anchors, k, HopMethod::Bfs)?;
        let pow = khop_mask(&g, &anchors, k, HopMethod::MatPow)?;
        assert_eq!(bfs.mask, pow.mask);
        println!("k={k}: keeps {:>5} nodes ({:.1}%)", bfs.count(), 100.0 * bfs.count() as f64 / g.num_nodes() as f64);
    }

    let m = khop_mask(&g, &anchors, 3, HopMethod::Bfs)?;
    let InducedSubgraph::Compact { graph: simple, .. } = induced_subgraph(&g, &m, SubgraphMode::Compact) else {
        unreachable!()
    };
    println!("k=3 compact graph: {} nodes, {} edges", simple.num_nodes(), simple.num_edges());

    let p = kmeans_split(&simple, 25, 0)?;
    let parts = extract_partition_subgraphs(&simple, &p);
    let kept: usize = parts.iter().map(|(sg, _)| sg.num_edges()).sum();
    let sizes = p.cluster_sizes();
    println!(
        "25 spatial subgraphs: sizes {}..{}, {} of {} edges kept inside clusters",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap(),
        kept,
        simple.num_edges()
    );
    Ok(())
}
