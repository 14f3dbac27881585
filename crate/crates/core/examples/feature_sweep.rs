//! Feature-group and hop-limit sweep, printed as CSV.
//!
//!     cargo run --release --example feature_sweep

use cellgraph::eval::{run_sweep, sweep_csv, Protocol, SweepInput, SweepSpec};
use cellgraph::graph::EdgeRule;
use cellgraph::models::ModelKind;
use cellgraph::pipeline::synth_graph;
use cellgraph::synth::{Preset, SynthConfig};
use cellgraph::train::{FeatureGroups, TrainConfig};

fn main() -> cellgraph::Result<()> {
    let graph = synth_graph(&SynthConfig::preset(Preset::Easy, 4).scaled(0.5), EdgeRule::default())?;
    let spec = SweepSpec {
        feature_sets: ["morph,texture,class", "morph,texture", "class"]
            .iter()
            .map(|s| FeatureGroups::parse(s))
            .collect::<cellgraph::Result<_>>()?,
        ks: vec![None, Some(1), Some(3)],
        models: vec![ModelKind::Gcn],
        protocols: vec![Protocol::Subgraph],
    };
    let base = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let rows = run_sweep(&SweepInput::Full { graph, kmeans_k: 50 }, &base, &spec)?;
    print!("{}", sweep_csv(&rows)?);
    Ok(())
}
