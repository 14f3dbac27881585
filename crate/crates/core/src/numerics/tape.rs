//! Reverse-mode differentiation over an eagerly evaluated expression tape.
//!
//! Every operation computes its value immediately and records how to push
//! gradients back to its inputs. A fresh tape is built per forward pass.

use std::sync::Arc;

use super::tensor::{SparseMatrix, Tensor2D};
use crate::error::{Error, Result};

/// Guard for row norms and attention normalizers.
pub const DENOM_EPS: f64 = 1e-12;

/// Probability clamp used by the binary cross-entropy kernel.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    RowL2Normalize(Var),
    ColSum(Var),
    RowSum(Var),
    SumAll(Var),
    DivRows(Var, Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Bce {
        probs: Var,
        targets: Arc<[f64]>,
        index: Arc<[usize]>,
    },
    Threshold,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::SpMM(..) => "spmm",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::RowL2Normalize(_) => "row_l2_normalize",
            Op::ColSum(_) => "col_sum",
            Op::RowSum(_) => "row_sum",
            Op::SumAll(_) => "sum",
            Op::DivRows(..) => "div_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Bce { .. } => "bce",
            Op::Threshold => "threshold",
        }
    }
}

struct Node {
    value: Tensor2D,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor2D {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2D::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2D) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let out = s.matmul(self.value(x))?;
        Ok(self.push(out, Op::SpMM(Arc::clone(s), x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..sa.0 {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Each row divided by `max(‖row‖₂, DENOM_EPS)`.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let n = row_norm(x.row(i)).max(DENOM_EPS);
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::RowL2Normalize(a), &[a])
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).col_sums();
        self.push(out, Op::ColSum(a), &[a])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor2D::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.push(out, Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2D::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Row `i` of `a` divided by `max(d_i, DENOM_EPS)`; `d` is `rows x 1`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let (sa, sd) = (self.shape(a), self.shape(d));
        if sd != (sa.0, 1) {
            return Err(shape_err("div_rows", sa, sd));
        }
        let mut out = self.value(a).clone();
        for i in 0..sa.0 {
            let den = self.value(d).get(i, 0).max(DENOM_EPS);
            out.row_mut(i).iter_mut().for_each(|v| *v /= den);
        }
        Ok(self.push(out, Op::DivRows(a, d), &[a, d]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2D::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let rows = self.shape(a).0;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch(format!("gather_rows: index {bad} of {rows}")));
        }
        let out = self.value(a).select_rows(index);
        Ok(self.push(out, Op::GatherRows(a, index.into()), &[a]))
    }

    /// `-Σ_r [y_r ln p̂ + (1-y_r) ln(1-p̂)]` over `probs[index[r]]`, with
    /// `p̂` clamped to `[PROB_EPS, 1 - PROB_EPS]`. `probs` is `N x 1`.
    pub fn bce(&mut self, probs: Var, targets: &[f64], index: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(probs);
        if c != 1 || targets.len() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::ShapeMismatch("bce: probabilities must be Nx1 and targets aligned with index".into()));
        }
        let p = self.value(probs);
        let loss = bce_sum(index.iter().map(|&i| p.get(i, 0)), targets.iter().copied());
        Ok(self.push(
            Tensor2D::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.into(),
                index: index.into(),
            },
            &[probs],
        ))
    }

    /// Hard 0/1 step at `cut`. Has no derivative.
    pub fn threshold(&mut self, a: Var, cut: f64) -> Var {
        let out = self.value(a).map(|v| if v >= cut { 1.0 } else { 0.0 });
        self.push(out, Op::Threshold, &[a])
    }

    /// Gradients of the `1 x 1` node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor2D::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor2D| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_nt(val(*b))?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, val(*a).matmul_tn(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SpMM(s, x) => acc(*x, s.matmul_t(g)?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.col_sums());
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.scaled(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
            Op::RowL2Normalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = Tensor2D::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = row_norm(x.row(i));
                    let (gi, yi) = (g.row(i), y.row(i));
                    let dst = out.row_mut(i);
                    if n > DENOM_EPS {
                        let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dst.iter_mut().zip(gi).zip(yi) {
                            *d = (gv - yv * dot) / n;
                        }
                    } else {
                        for (d, gv) in dst.iter_mut().zip(gi) {
                            *d = gv / DENOM_EPS;
                        }
                    }
                }
                acc(*a, out);
            }
            Op::ColSum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::filled(r, c, g.item()));
            }
            Op::DivRows(a, d) => {
                let (x, dv) = (val(*a), val(*d));
                let mut ga = g.clone();
                let mut gd = Tensor2D::zeros(dv.rows(), 1);
                for i in 0..x.rows() {
                    let raw = dv.get(i, 0);
                    let den = raw.max(DENOM_EPS);
                    ga.row_mut(i).iter_mut().for_each(|v| *v /= den);
                    if raw > DENOM_EPS {
                        let s: f64 = g.row(i).iter().zip(x.row(i)).map(|(gv, xv)| gv * xv).sum();
                        gd.set(i, 0, -s / (den * den));
                    }
                }
                acc(*a, ga);
                acc(*d, gd);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, Tensor2D::from_fn(g.rows(), c, |i, j| g.get(i, off + j)));
                    off += c;
                }
            }
            Op::GatherRows(a, index) => {
                let (r, c) = val(*a).shape();
                let mut out = Tensor2D::zeros(r, c);
                for (k, &i) in index.iter().enumerate() {
                    for (d, s) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(*a, out);
            }
            Op::Bce { probs, targets, index } => {
                let p = val(*probs);
                let scale = g.item();
                let mut out = Tensor2D::zeros(p.rows(), 1);
                for (&i, &y) in index.iter().zip(targets.iter()) {
                    let pi = p.get(i, 0);
                    if pi > PROB_EPS && pi < 1.0 - PROB_EPS {
                        let d = -(y / pi - (1.0 - y) / (1.0 - pi));
                        out.set(i, 0, out.get(i, 0) + scale * d);
                    }
                }
                acc(*probs, out);
            }
            Op::Threshold => return Err(Error::UnsupportedKernel(node.op.name())),
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Clamped binary cross-entropy summed over `(probability, label)` pairs.
pub fn bce_sum(probs: impl Iterator<Item = f64>, labels: impl Iterator<Item = f64>) -> f64 {
    probs
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::column(&[1.0, 2.0]));
        let xt = t.transpose(x);
        let f = t.matmul(xt, x).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::filled(2, 3, 0.7));
        let c = t.constant(Tensor2D::filled(2, 3, 1.5));
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::filled(1, 2, 1.0));
        let unused = t.param(Tensor2D::filled(3, 3, 1.0));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), Tensor2D::zeros(3, 3));
    }

    #[test]
    fn threshold_is_not_differentiable() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::column(&[0.2, 0.8]));
        let h = t.threshold(x, 0.5);
        let s = t.sum(h);
        assert!(matches!(t.backward(s), Err(Error::UnsupportedKernel("threshold"))));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn degenerate_normalizers_stay_finite() {
        let mut t = Tape::new();
        let x = t.param(Tensor2D::zeros(3, 2));
        let n = t.row_l2_normalize(x);
        let d = t.constant(Tensor2D::zeros(3, 1));
        let q = t.div_rows(n, d).unwrap();
        assert!(t.value(q).is_finite());
        let s = t.sum(q);
        assert!(t.backward(s).unwrap().get(x).is_finite());
    }
}
