//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor2D;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor: errors on gradients smaller than this are
    /// measured absolutely.
    pub floor: f64,
    /// Above this many entries a random subsample of this size is checked.
    pub max_entries: usize,
    pub seed: u64,
}

impl GradcheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradcheckConfig {
            tolerance,
            ..Self::default()
        }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat entry)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `value`.
pub fn gradcheck_with(
    params: &[Tensor2D],
    value: impl Fn(&[Tensor2D]) -> Result<f64>,
    analytic: &[Tensor2D],
    cfg: GradcheckConfig,
) -> Result<GradcheckReport> {
    let total: usize = params.iter().map(|p| p.data().len()).sum();
    let flat: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.data().len()).map(move |e| (pi, e)))
        .collect();
    let probes: Vec<(usize, usize)> = if total > cfg.max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, total, cfg.max_entries).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| flat[i]).collect()
    } else {
        flat
    };
    let mut work = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: probes.len(),
        passed: true,
    };
    for (pi, e) in probes {
        let orig = work[pi].data()[e];
        work[pi].data_mut()[e] = orig + cfg.step;
        let up = value(&work)?;
        work[pi].data_mut()[e] = orig - cfg.step;
        let down = value(&work)?;
        work[pi].data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[pi].data()[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst = Some((pi, e));
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

/// Builds the computation on a fresh tape for each evaluation and checks
/// every parameter entry (or a subsample).
pub fn gradcheck<F>(params: &[Tensor2D], build: F, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor2D]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, out, vars))
    };
    let (tape, out, vars) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor2D> = vars.iter().map(|&v| grads.get(v)).collect();
    gradcheck_with(
        params,
        |ps| {
            let (t, o, _) = eval(ps)?;
            Ok(t.value(o).item())
        },
        &analytic,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(rows: usize, cols: usize, salt: u64) -> Tensor2D {
        Tensor2D::from_fn(rows, cols, |i, j| {
            let x = ((i * 31 + j * 17) as u64 + salt * 7919) as f64;
            (x * 0.618_033_988_7).fract() * 2.0 - 1.0
        })
    }

    #[test]
    fn linear_layer_passes() {
        let params = [seeded(5, 3, 1), seeded(3, 2, 2), seeded(1, 2, 3)];
        let r = gradcheck(
            &params,
            |t, v| {
                let xw = t.matmul(v[0], v[1])?;
                let y = t.add_row(xw, v[2])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            GradcheckConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn sigmoid_head_passes() {
        let params = [seeded(6, 4, 4), seeded(4, 1, 5)];
        let targets = [1.0, 0.0, 1.0, 0.0];
        let r = gradcheck(
            &params,
            |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let p = t.sigmoid(z);
                t.bce(p, &targets, &[0, 2, 3, 5])
            },
            GradcheckConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let params = [seeded(4, 3, 6)];
        let value = |ps: &[Tensor2D]| Ok(ps[0].data().iter().map(|x| x.sin()).sum::<f64>());
        // cos is the true derivative; scale it slightly
        let wrong = vec![params[0].map(|x| 1.01 * x.cos())];
        let r = gradcheck_with(&params, value, &wrong, GradcheckConfig::with_tolerance(1e-6)).unwrap();
        assert!(!r.passed);
        let right = vec![params[0].map(f64::cos)];
        let r = gradcheck_with(&params, value, &right, GradcheckConfig::with_tolerance(1e-6)).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn subsamples_large_parameters() {
        let params = [seeded(120, 100, 7)];
        let cfg = GradcheckConfig {
            max_entries: 500,
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&params, |t, v| Ok(t.sum(v[0])), cfg).unwrap();
        assert_eq!(r.checked, 500);
        assert!(r.passed);
    }
}
