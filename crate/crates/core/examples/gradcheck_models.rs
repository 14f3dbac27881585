//! Finite-difference check of every model's parameter gradients.
//!
//!     cargo run --release --example gradcheck_models

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellgraph::graph::Csr;
use cellgraph::models::{forward, AttentionMode, BoundParams, ModelHyper, ModelInput, ModelKind, ModelParams};
use cellgraph::numerics::{gradcheck, GradcheckConfig, Tensor2D};

fn main() -> cellgraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10;
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 3) % n)]).collect();
    let adj = Csr::from_edges(n, &edges);
    let x = Tensor2D::from_vec(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let index: Vec<usize> = (0..n).collect();
    let targets: Vec<f64> = index.iter().map(|i| (i % 2) as f64).collect();

    for kind in ModelKind::ALL {
        let hyper = ModelHyper {
            hidden: 6,
            ..ModelHyper::new(kind, 3)
        };
        let params = ModelParams::init(hyper, 1)?;
        let input = ModelInput::new(&hyper, x.clone(), &adj)?;
        let names: Vec<String> = params.tensors.iter().map(|(k, _)| k.clone()).collect();
        let values: Vec<Tensor2D> = params.tensors.iter().map(|(_, v)| v.clone()).collect();
        let report = gradcheck(
            &values,
            |tape, vars| {
                let bound = BoundParams {
                    vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
                };
                let z = forward(tape, &bound, &hyper, &input, AttentionMode::Linear)?;
                let p = tape.sigmoid(z);
                tape.bce(p, &targets, &index)
            },
            GradcheckConfig::default(),
        )?;
        println!(
            "{kind:<10} {:>5} entries, max relative error {:.2e} -> {}",
            report.checked,
            report.max_rel_error,
            if report.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
