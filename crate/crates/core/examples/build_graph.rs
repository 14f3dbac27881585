//! Segmentation on disk to a cleaned cell graph.
//!
//!     cargo run --release --example build_graph [-- out.json]

use std::collections::BTreeMap;

use cellgraph::graph::EdgeRule;
use cellgraph::pipeline::{build_graph, read_tissue_dir, write_tissue};
use cellgraph::synth::{generate_tissue, Preset, SynthConfig};

fn main() -> cellgraph::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let tissue = generate_tissue(&SynthConfig::preset(Preset::Easy, 7))?;
    write_tissue(dir.path(), &tissue)?;
    println!("wrote {} nuclei and {} regions to {}", tissue.records.len(), tissue.regions.len(), dir.path().display());

    let (cells, regions, features) = read_tissue_dir(dir.path())?;
    let g = build_graph(&cells, &regions, &features, EdgeRule::default())?;
    println!(
        "graph: {} nodes, {} edges, mean degree {:.2}",
        g.num_nodes(),
        g.num_edges(),
        2.0 * g.num_edges() as f64 / g.num_nodes() as f64
    );

    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for c in g.classes.iter().flatten() {
        *hist.entry(c.name()).or_default() += 1;
    }
    for (name, n) in hist {
        println!("  {name:<20} {n}");
    }

    // Relabeling against the tumor polygons recovers the generator's labels.
    let agree = g
        .node_ids
        .iter()
        .enumerate()
        .filter(|&(i, id)| g.label(i) == tissue.labels.get(id).copied())
        .count();
    println!("labels agreeing with ground truth: {agree}/{}", g.num_nodes());

    if let Some(out) = std::env::args().nth(1) {
        g.write(out.as_ref())?;
        println!("graph written to {out}");
    }
    Ok(())
}
