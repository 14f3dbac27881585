//! Linear-time global attention against the dense all-pairs form, and its
//! running time as N doubles.
//!
//!     cargo run --release --example linear_attention

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellgraph::models::{global_attention, AttentionMode, AttentionParams};
use cellgraph::numerics::{Tape, Tensor2D};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn attention(n: usize, d: usize, mode: AttentionMode, seed: u64) -> (Tensor2D, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let h = t.constant(random(&mut rng, n, d));
    let p = AttentionParams {
        query: t.param(random(&mut rng, d, d)),
        key: t.param(random(&mut rng, d, d)),
        value: t.param(random(&mut rng, d, d)),
    };
    let start = Instant::now();
    let out = global_attention(&mut t, h, &p, mode).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (t.value(out).clone(), secs)
}

fn main() {
    for n in [64, 256, 1024] {
        let (a, ta) = attention(n, 32, AttentionMode::Linear, n as u64);
        let (b, tb) = attention(n, 32, AttentionMode::DenseOracle, n as u64);
        println!(
            "N={n:>5}: relative error {:.2e}, linear {:.2} ms, dense {:.2} ms",
            a.max_abs_diff(&b) / b.max_abs(),
            ta * 1e3,
            tb * 1e3
        );
    }
    let mut prev = None;
    for n in [10_000, 20_000, 40_000, 80_000] {
        let mut times: Vec<f64> = (0..5).map(|s| attention(n, 64, AttentionMode::Linear, s).1).collect();
        times.sort_by(f64::total_cmp);
        let t = times[2];
        match prev {
            Some(p) => println!("N={n:>6}: {:.2} ms (x{:.2})", t * 1e3, t / p),
            None => println!("N={n:>6}: {:.2} ms", t * 1e3),
        }
        prev = Some(t);
    }
}
