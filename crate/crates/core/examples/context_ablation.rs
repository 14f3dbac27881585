//! Hop-count ablation on tissue where only the neighbourhood separates the
//! two epithelial classes.
//!
//!     cargo run --release --example context_ablation

use cellgraph::eval::{cross_validate, make_folds, partition_dataset, simplify_graph, Protocol};
use cellgraph::graph::EdgeRule;
use cellgraph::models::ModelKind;
use cellgraph::pipeline::synth_graph;
use cellgraph::synth::{Preset, SynthConfig};
use cellgraph::train::TrainConfig;

fn main() -> cellgraph::Result<()> {
    let g = synth_graph(&SynthConfig::preset(Preset::ContextOnly, 1), EdgeRule::default())?;
    let g = simplify_graph(&g, 3)?;
    let data = partition_dataset(&g, 100, 1)?;
    let split = make_folds(&data, Protocol::Subgraph, 1, 3)?;
    let base = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    for hops in 0..=3 {
        let cfg = TrainConfig {
            model: ModelKind::Sgc,
            sgc_hops: hops,
            ..base.clone()
        };
        let r = cross_validate(&data, &cfg, &split)?;
        println!("sgc hops={hops}    {:.3} ± {:.3}", r.mean, r.stderr);
    }
    for model in [ModelKind::Gcn, ModelKind::Difformer, ModelKind::Sgformer] {
        let cfg = TrainConfig { model, ..base.clone() };
        let r = cross_validate(&data, &cfg, &split)?;
        println!("{model:<14} {:.3} ± {:.3}", r.mean, r.stderr);
    }
    Ok(())
}
