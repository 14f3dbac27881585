//! Trains a DIFFormer-style model on one held-out fold and saves a
//! checkpoint.
//!
//!     cargo run --release --example train_model [-- checkpoint.json]

use cellgraph::eval::{balanced_accuracy, make_folds, partition_dataset, simplify_graph, Protocol};
use cellgraph::graph::EdgeRule;
use cellgraph::models::ModelKind;
use cellgraph::numerics::save_checkpoint;
use cellgraph::pipeline::synth_graph;
use cellgraph::synth::{Preset, SynthConfig};
use cellgraph::train::{train_model, GraphTask, TrainConfig};

fn main() -> cellgraph::Result<()> {
    let g = synth_graph(&SynthConfig::preset(Preset::Easy, 1).scaled(0.5), EdgeRule::default())?;
    let g = simplify_graph(&g, 3)?;
    let data = partition_dataset(&g, 50, 0)?;
    let split = make_folds(&data, Protocol::Subgraph, 0, 3)?;
    let parts = split.tasks_for(&data, 0);
    let tasks: Vec<GraphTask> = data
        .graphs
        .iter()
        .zip(&parts)
        .map(|(graph, (train, test))| GraphTask { graph, train, test })
        .collect();

    let cfg = TrainConfig {
        model: ModelKind::Difformer,
        epochs: 100,
        ..TrainConfig::default()
    };
    let out = train_model(&tasks, &cfg)?;
    for e in out.history.iter().step_by(10) {
        println!("epoch {:>3}  loss {:.4}", e.epoch, e.loss);
    }
    let preds: Vec<bool> = out.predictions.iter().map(|p| p.prob >= 0.5).collect();
    let labels: Vec<bool> = out.predictions.iter().map(|p| p.label == 1).collect();
    println!(
        "{} parameters; held-out balanced accuracy {:.3} on {} nodes",
        out.params.num_parameters(),
        balanced_accuracy(&preds, &labels)?,
        preds.len()
    );

    if let Some(path) = std::env::args().nth(1) {
        save_checkpoint(path.as_ref(), &out.params.tensors)?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
