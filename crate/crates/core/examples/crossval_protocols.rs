//! Random-node folds against spatially disjoint subgraph folds on tissue
//! whose class signal is mostly spatial.
//!
//!     cargo run --release --example crossval_protocols

use cellgraph::cli::render_table;
use cellgraph::eval::{cross_validate, make_folds, partition_dataset, simplify_graph, Dataset, Protocol};
use cellgraph::graph::EdgeRule;
use cellgraph::models::ModelKind;
use cellgraph::pipeline::synth_graph;
use cellgraph::synth::{Preset, SynthConfig};
use cellgraph::train::TrainConfig;

fn main() -> cellgraph::Result<()> {
    let g = synth_graph(&SynthConfig::preset(Preset::SpatiallyClustered, 1), EdgeRule::default())?;
    let g = simplify_graph(&g, 3)?;
    let cfg = TrainConfig {
        model: ModelKind::Gcn,
        seed: 1,
        ..TrainConfig::default()
    };
    for protocol in [Protocol::RandomNode, Protocol::Subgraph] {
        let data = match protocol {
            Protocol::Subgraph => partition_dataset(&g, 100, cfg.seed)?,
            _ => Dataset::single(g.clone()),
        };
        let split = make_folds(&data, protocol, cfg.seed, 3)?;
        let report = cross_validate(&data, &cfg, &split)?;
        println!("{}", render_table(&report));
    }
    Ok(())
}
