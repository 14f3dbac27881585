//! Adam with bias correction.

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor2D]) -> Self {
        let zeros = |p: &Tensor2D| Tensor2D::zeros(p.rows(), p.cols());
        AdamState {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

pub fn adam_step(params: &mut [Tensor2D], grads: &[Tensor2D], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor2D::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor2D::from_vec(1, 3, vec![0.3, -4.0, 100.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &p);
        let before = p[0].clone();
        adam_step(&mut p, &g, &mut st).unwrap();
        for i in 0..3 {
            let delta = p[0].data()[i] - before.data()[i];
            let gi = g[0].data()[i];
            let expect = -0.01 * gi.abs() / (gi.abs() + 1e-8) * gi.signum();
            assert!((delta - expect).abs() < 1e-12);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Tensor2D::filled(2, 2, 3.0)];
        let g = vec![Tensor2D::zeros(2, 2)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0], Tensor2D::filled(2, 2, 3.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let target = Tensor2D::from_vec(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut p = vec![Tensor2D::zeros(1, 4)];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..200 {
            // ∇ ½‖x − x*‖² = x − x*
            let g = vec![p[0].zip_map(&target, |x, t| x - t)];
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        let dist = p[0].zip_map(&target, |x, t| (x - t).powi(2)).sum().sqrt();
        assert!(dist < 1e-2, "distance {dist}");
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor2D::zeros(2, 2)];
        let g = vec![Tensor2D::zeros(2, 3)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::ShapeMismatch(_))));
    }
}
