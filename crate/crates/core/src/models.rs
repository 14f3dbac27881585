//! Node-classification architectures built on the differentiation tape:
//! GCN and SGC baselines, DIFFormer-style and SGFormer-style linear
//! attention transformers, and the shared sigmoid logit head.
//!
//! Attention similarity is `f(q_i, k_j) = 1 + q̂_iᵀ k̂_j` with L2-normalized
//! rows. In linear mode the normalized output
//! `Σ_j f(q_i,k_j) v_j / Σ_j f(q_i,k_j)` is evaluated as
//! `(1·Σv + Q̂(K̂ᵀV)) / (N + Q̂(K̂ᵀ1))`, never forming the `N x N` matrix.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::numerics::{SparseMatrix, Tape, Tensor2D, Var};

/// Largest graph the dense attention oracle accepts.
pub const DENSE_ORACLE_MAX_NODES: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    Sgc,
    Difformer,
    Sgformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Gcn, ModelKind::Sgc, ModelKind::Difformer, ModelKind::Sgformer];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Sgc => "sgc",
            ModelKind::Difformer => "difformer",
            ModelKind::Sgformer => "sgformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model \"{s}\"")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Linear,
    DenseOracle,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelHyper {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    /// GCN / DIFFormer layer count.
    pub layers: usize,
    /// SGFormer mixing weight on the attention branch.
    pub alpha: f64,
    /// Depth of the SGFormer GCN branch.
    pub sgformer_gcn_layers: usize,
    /// SGC propagation hops.
    pub sgc_hops: usize,
}

impl ModelHyper {
    pub fn new(kind: ModelKind, input_dim: usize) -> Self {
        ModelHyper {
            kind,
            input_dim,
            hidden: 64,
            layers: 2,
            alpha: 0.5,
            sgformer_gcn_layers: 2,
            sgc_hops: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("input and hidden widths must be positive".into()));
        }
        if matches!(self.kind, ModelKind::Gcn | ModelKind::Difformer) && self.layers == 0 {
            return Err(Error::InvalidConfig("layer count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.kind == ModelKind::Sgformer && !(1..=3).contains(&self.sgformer_gcn_layers) {
            return Err(Error::InvalidConfig("SGFormer GCN branch needs 1 to 3 layers".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    pub tensors: Vec<(String, Tensor2D)>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor2D {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor2D::zeros(fan_in, fan_out);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
    t
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases from `seed`.
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, d) = (hyper.input_dim, hyper.hidden);
        let mut t: Vec<(String, Tensor2D)> = Vec::new();
        let linear = |t: &mut Vec<(String, Tensor2D)>, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            t.push((format!("{name}.weight"), glorot(rng, i, o)));
            t.push((format!("{name}.bias"), Tensor2D::zeros(1, o)));
        };
        let head_in = match hyper.kind {
            ModelKind::Sgc => din,
            _ => d,
        };
        match hyper.kind {
            ModelKind::Gcn => {
                for l in 0..hyper.layers {
                    linear(&mut t, &format!("gcn.{l}"), if l == 0 { din } else { d }, d, &mut rng);
                }
            }
            ModelKind::Sgc => {}
            ModelKind::Difformer => {
                linear(&mut t, "input", din, d, &mut rng);
                for l in 0..hyper.layers {
                    for p in ["query", "key", "value"] {
                        t.push((format!("difformer.{l}.{p}"), glorot(&mut rng, d, d)));
                    }
                }
            }
            ModelKind::Sgformer => {
                linear(&mut t, "input", din, d, &mut rng);
                for p in ["query", "key", "value"] {
                    t.push((format!("attn.{p}"), glorot(&mut rng, d, d)));
                }
                for l in 0..hyper.sgformer_gcn_layers {
                    linear(&mut t, &format!("gcn.{l}"), d, d, &mut rng);
                }
            }
        }
        linear(&mut t, "head", head_in, 1, &mut rng);
        Ok(ModelParams { hyper, tensors: t })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a [`ModelParams`], same order.
pub struct BoundParams {
    pub vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn linear(&self, prefix: &str) -> Linear {
        Linear {
            weight: self.var(&format!("{prefix}.weight")),
            bias: self.var(&format!("{prefix}.bias")),
        }
    }

    pub fn attention(&self, prefix: &str) -> AttentionParams {
        AttentionParams {
            query: self.var(&format!("{prefix}.query")),
            key: self.var(&format!("{prefix}.key")),
            value: self.var(&format!("{prefix}.value")),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        self.vars.iter().map(|&(_, v)| v).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degrees of `A + I`.
pub fn gcn_normalize(adj: &Csr) -> SparseMatrix {
    let n = adj.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((adj.degree(i) + 1) as f64).sqrt()).collect();
    let rows = (0..n)
        .map(|i| {
            std::iter::once(i)
                .chain(adj.neighbors(i).iter().copied())
                .map(|j| (j, inv_sqrt[i] * inv_sqrt[j]))
                .collect()
        })
        .collect();
    SparseMatrix::from_rows(n, rows)
}

fn check_rows(tape: &Tape, h: Var, adj: &SparseMatrix) -> Result<()> {
    let n = tape.shape(h).0;
    if adj.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "features have {n} rows but adjacency is {}x{}",
            adj.shape().0,
            adj.shape().1
        )));
    }
    Ok(())
}

fn affine(tape: &mut Tape, h: Var, lin: &Linear) -> Result<Var> {
    let xw = tape.matmul(h, lin.weight)?;
    tape.add_row(xw, lin.bias)
}

/// Stacked `ReLU(Â H W + b)` layers.
pub fn gcn_forward(tape: &mut Tape, h: Var, adj: &Arc<SparseMatrix>, layers: &[Linear]) -> Result<Var> {
    check_rows(tape, h, adj)?;
    let mut x = h;
    for lin in layers {
        let xw = tape.matmul(x, lin.weight)?;
        let ax = tape.spmm(adj, xw)?;
        let z = tape.add_row(ax, lin.bias)?;
        x = tape.relu(z);
    }
    Ok(x)
}

/// `Â^hops H`, computed once outside the tape.
pub fn sgc_propagate(h: &Tensor2D, adj: &SparseMatrix, hops: usize) -> Result<Tensor2D> {
    let mut x = h.clone();
    for _ in 0..hops {
        x = adj.matmul(&x)?;
    }
    Ok(x)
}

/// SGC logits `(Â^hops H) w + b` on pre-propagated features.
pub fn sgc_forward(tape: &mut Tape, propagated: Var, head: &Linear) -> Result<Var> {
    affine(tape, propagated, head)
}

/// Normalized all-pair attention over the rows of `h`.
pub fn global_attention(tape: &mut Tape, h: Var, p: &AttentionParams, mode: AttentionMode) -> Result<Var> {
    let n = tape.shape(h).0;
    let q = tape.matmul(h, p.query)?;
    let k = tape.matmul(h, p.key)?;
    let v = tape.matmul(h, p.value)?;
    let qn = tape.row_l2_normalize(q);
    let kn = tape.row_l2_normalize(k);
    match mode {
        AttentionMode::Linear => {
            let kt = tape.transpose(kn);
            let ktv = tape.matmul(kt, v)?;
            let qktv = tape.matmul(qn, ktv)?;
            let vsum = tape.col_sum(v);
            let num = tape.add_row(qktv, vsum)?;
            let ksum = tape.col_sum(kn);
            let ksum_t = tape.transpose(ksum);
            let qk1 = tape.matmul(qn, ksum_t)?;
            let den = tape.add_scalar(qk1, n as f64);
            tape.div_rows(num, den)
        }
        AttentionMode::DenseOracle => {
            if n > DENSE_ORACLE_MAX_NODES {
                return Err(Error::InvalidConfig(format!(
                    "dense attention oracle is limited to {DENSE_ORACLE_MAX_NODES} nodes, got {n}"
                )));
            }
            let kt = tape.transpose(kn);
            let qk = tape.matmul(qn, kt)?;
            let sim = tape.add_scalar(qk, 1.0);
            let num = tape.matmul(sim, v)?;
            let den = tape.row_sum(sim);
            tape.div_rows(num, den)
        }
    }
}

/// `½·attention(H) + ½·Â H + H`.
pub fn difformer_layer(
    tape: &mut Tape,
    h: Var,
    adj: &Arc<SparseMatrix>,
    p: &AttentionParams,
    mode: AttentionMode,
) -> Result<Var> {
    check_rows(tape, h, adj)?;
    let att = global_attention(tape, h, p, mode)?;
    let prop = tape.spmm(adj, h)?;
    let mix = tape.add(att, prop)?;
    let half = tape.scale(mix, 0.5);
    tape.add(half, h)
}

/// `α·attention(H) + (1−α)·GCN(H)`.
pub fn sgformer_layer(
    tape: &mut Tape,
    h: Var,
    adj: &Arc<SparseMatrix>,
    attn: &AttentionParams,
    gcn: &[Linear],
    alpha: f64,
    mode: AttentionMode,
) -> Result<Var> {
    check_rows(tape, h, adj)?;
    let a = global_attention(tape, h, attn, mode)?;
    let g = gcn_forward(tape, h, adj, gcn)?;
    let a = tape.scale(a, alpha);
    let g = tape.scale(g, 1.0 - alpha);
    tape.add(a, g)
}

/// Logits `z = H w + b` and probabilities `σ(z)`, both `N x 1`.
pub fn predict_logits(tape: &mut Tape, embeddings: Var, head: &Linear) -> Result<(Var, Var)> {
    let z = affine(tape, embeddings, head)?;
    let p = tape.sigmoid(z);
    Ok((z, p))
}

/// Per-graph model input: node features and the normalized adjacency.
/// SGC inputs are propagated once at construction.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub features: Tensor2D,
    pub adj: Arc<SparseMatrix>,
}

impl ModelInput {
    pub fn new(hyper: &ModelHyper, features: Tensor2D, adjacency: &Csr) -> Result<Self> {
        let adj = gcn_normalize(adjacency);
        let features = match hyper.kind {
            ModelKind::Sgc => sgc_propagate(&features, &adj, hyper.sgc_hops)?,
            _ => features,
        };
        Ok(ModelInput {
            features,
            adj: Arc::new(adj),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Full forward pass to `N x 1` logits.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    hyper: &ModelHyper,
    input: &ModelInput,
    mode: AttentionMode,
) -> Result<Var> {
    if input.features.cols() != hyper.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} input columns, got {}",
            hyper.input_dim,
            input.features.cols()
        )));
    }
    let h = tape.constant(input.features.clone());
    let adj = &input.adj;
    let head = params.linear("head");
    let embeddings = match hyper.kind {
        ModelKind::Sgc => return sgc_forward(tape, h, &head),
        ModelKind::Gcn => {
            let layers: Vec<Linear> = (0..hyper.layers).map(|l| params.linear(&format!("gcn.{l}"))).collect();
            gcn_forward(tape, h, adj, &layers)?
        }
        ModelKind::Difformer => {
            let z = affine(tape, h, &params.linear("input"))?;
            let mut x = tape.relu(z);
            for l in 0..hyper.layers {
                x = difformer_layer(tape, x, adj, &params.attention(&format!("difformer.{l}")), mode)?;
                if l + 1 < hyper.layers {
                    x = tape.relu(x);
                }
            }
            x
        }
        ModelKind::Sgformer => {
            let z = affine(tape, h, &params.linear("input"))?;
            let x = tape.relu(z);
            let gcn: Vec<Linear> = (0..hyper.sgformer_gcn_layers)
                .map(|l| params.linear(&format!("gcn.{l}")))
                .collect();
            sgformer_layer(tape, x, adj, &params.attention("attn"), &gcn, hyper.alpha, mode)?
        }
    };
    let (z, _) = predict_logits(tape, embeddings, &head)?;
    Ok(z)
}

/// Convenience forward returning probabilities as a plain vector.
pub fn predict(params: &ModelParams, input: &ModelInput, mode: AttentionMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let z = forward(&mut tape, &bound, &params.hyper, input, mode)?;
    Ok(tape.value(z).data().iter().map(|&v| crate::numerics::sigmoid(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Csr {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        Csr::from_edges(n, &edges)
    }

    #[test]
    fn single_node_identity_layer_is_relu() {
        let mut t = Tape::new();
        let h = t.constant(Tensor2D::from_vec(1, 3, vec![1.5, -2.0, 0.5]).unwrap());
        let adj = Arc::new(gcn_normalize(&Csr::empty(1)));
        let w = t.param(Tensor2D::identity(3));
        let b = t.param(Tensor2D::zeros(1, 3));
        let out = gcn_forward(&mut t, h, &adj, &[Linear { weight: w, bias: b }]).unwrap();
        assert_eq!(t.value(out).data(), &[1.5, 0.0, 0.5]);
    }

    #[test]
    fn normalized_adjacency_matches_dense() {
        let adj = path_graph(4);
        let s = gcn_normalize(&adj).to_dense();
        let deg = [2.0, 3.0, 3.0, 2.0f64];
        for i in 0..4 {
            for j in 0..4 {
                let a = if i == j || adj.has_edge(i, j) { 1.0 } else { 0.0 };
                assert!((s.get(i, j) - a / (deg[i] * deg[j]).sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_shape_mismatch() {
        let mut t = Tape::new();
        let h = t.constant(Tensor2D::zeros(3, 2));
        let adj = Arc::new(gcn_normalize(&path_graph(4)));
        let w = t.param(Tensor2D::zeros(2, 2));
        let b = t.param(Tensor2D::zeros(1, 2));
        assert!(matches!(
            gcn_forward(&mut t, h, &adj, &[Linear { weight: w, bias: b }]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn head_behaviour() {
        let mut t = Tape::new();
        let h = t.constant(Tensor2D::from_fn(3, 2, |i, j| (i + j) as f64));
        let w = t.param(Tensor2D::zeros(2, 1));
        let b = t.param(Tensor2D::zeros(1, 1));
        let (_, p) = predict_logits(&mut t, h, &Linear { weight: w, bias: b }).unwrap();
        assert!(t.value(p).data().iter().all(|&v| v == 0.5));
        assert!(crate::numerics::sigmoid(20.0) > 0.9999);
        let grid: Vec<f64> = (-50..=50).map(|i| crate::numerics::sigmoid(i as f64 * 0.3)).collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_node_attention_returns_value() {
        let mut t = Tape::new();
        let h = t.constant(Tensor2D::from_vec(1, 2, vec![0.3, -0.7]).unwrap());
        let p = AttentionParams {
            query: t.param(Tensor2D::from_fn(2, 2, |i, j| (i + 2 * j) as f64 - 1.0)),
            key: t.param(Tensor2D::from_fn(2, 2, |i, j| (2 * i + j) as f64 * 0.5)),
            value: t.param(Tensor2D::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 0.5 })),
        };
        let v = t.matmul(h, p.value).unwrap();
        let expect = t.value(v).clone();
        for mode in [AttentionMode::Linear, AttentionMode::DenseOracle] {
            let out = global_attention(&mut t, h, &p, mode).unwrap();
            assert!(t.value(out).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn model_kind_parsing() {
        assert_eq!("DIFFormer".parse::<ModelKind>().unwrap(), ModelKind::Difformer);
        assert!("nodeformer".parse::<ModelKind>().is_err());
    }

    #[test]
    fn parameter_shapes_chain() {
        for kind in ModelKind::ALL {
            let p = ModelParams::init(ModelHyper::new(kind, 22), 1).unwrap();
            let head = p.get("head.weight").unwrap();
            assert_eq!(head.cols(), 1);
            let expect_in = if kind == ModelKind::Sgc { 22 } else { 64 };
            assert_eq!(head.rows(), expect_in);
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    fn random_attention(t: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            query: t.param(random(d, d, rng)),
            key: t.param(random(d, d, rng)),
            value: t.param(random(d, d, rng)),
        }
    }

    fn rel_err(a: &Tensor2D, b: &Tensor2D) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-300)
    }

    #[test]
    fn gcn_matches_dense_five_node_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)];
        let adj = Csr::from_edges(5, &edges);
        let x = random(5, 3, &mut rng);
        let w = random(3, 2, &mut rng);
        // Dense D^-1/2 (A + I) D^-1/2 built from scratch.
        let mut a = Tensor2D::identity(5);
        for &(i, j) in &edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let deg: Vec<f64> = (0..5).map(|i| a.row(i).iter().sum()).collect();
        let norm = Tensor2D::from_fn(5, 5, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt());
        let expect = norm.matmul(&x).unwrap().matmul(&w).unwrap().map(|v| v.max(0.0));
        let mut t = Tape::new();
        let h = t.constant(x);
        let lin = Linear {
            weight: t.param(w),
            bias: t.param(Tensor2D::zeros(1, 2)),
        };
        let out = gcn_forward(&mut t, h, &Arc::new(gcn_normalize(&adj)), &[lin]).unwrap();
        assert!(t.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn gcn_components_are_independent() {
        let adj = Arc::new(gcn_normalize(&Csr::from_edges(6, &[(0, 1), (1, 2), (3, 4), (4, 5)])));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(6, 4, &mut rng).map(f64::abs);
        let ws = [random(4, 4, &mut rng).map(f64::abs), random(4, 4, &mut rng).map(f64::abs)];
        let run = |x: Tensor2D| {
            let mut t = Tape::new();
            let h = t.constant(x);
            let layers: Vec<Linear> = ws
                .iter()
                .map(|w| Linear {
                    weight: t.param(w.clone()),
                    bias: t.param(Tensor2D::filled(1, 4, 0.1)),
                })
                .collect();
            let out = gcn_forward(&mut t, h, &adj, &layers).unwrap();
            t.value(out).clone()
        };
        let base = run(x.clone());
        let mut x2 = x;
        x2.row_mut(1).iter_mut().for_each(|v| *v += 3.0);
        let moved = run(x2);
        for i in 3..6 {
            assert_eq!(base.row(i), moved.row(i));
        }
        assert!((0..3).any(|i| base.row(i) != moved.row(i)));
    }

    #[test]
    fn sgc_propagation_cases() {
        let adj = gcn_normalize(&path_graph(5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(5, 3, &mut rng);
        assert_eq!(sgc_propagate(&x, &adj, 0).unwrap(), x);
        let dense = adj.to_dense();
        let twice = dense.matmul(&dense.matmul(&x).unwrap()).unwrap();
        assert!(sgc_propagate(&x, &adj, 2).unwrap().max_abs_diff(&twice) < 1e-14);

        // 6-cycle: 2-regular, identical rows stay identical.
        let cycle = Csr::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]);
        let same = Tensor2D::from_fn(6, 3, |_, j| j as f64 + 0.5);
        let hyper = ModelHyper {
            sgc_hops: 3,
            ..ModelHyper::new(ModelKind::Sgc, 3)
        };
        let input = ModelInput::new(&hyper, same, &cycle).unwrap();
        let params = ModelParams::init(hyper, 1).unwrap();
        let p = predict(&params, &input, AttentionMode::Linear).unwrap();
        assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-14));
    }

    #[test]
    fn identical_rows_give_identical_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let row = random(1, 4, &mut rng);
        let h = t.constant(Tensor2D::from_fn(7, 4, |_, j| row.get(0, j)));
        let p = random_attention(&mut t, 4, &mut rng);
        let out = global_attention(&mut t, h, &p, AttentionMode::Linear).unwrap();
        let o = t.value(out);
        for i in 1..7 {
            assert!(o.row(i).iter().zip(o.row(0)).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn linear_attention_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let h = t.constant(random(32, 8, &mut rng));
        let p = random_attention(&mut t, 8, &mut rng);
        let a = global_attention(&mut t, h, &p, AttentionMode::Linear).unwrap();
        let b = global_attention(&mut t, h, &p, AttentionMode::DenseOracle).unwrap();
        assert!(rel_err(t.value(a), t.value(b)) < 1e-10);
    }

    #[test]
    fn sgformer_alpha_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let adj = Arc::new(gcn_normalize(&path_graph(9)));
        let mut t = Tape::new();
        let h = t.constant(random(9, 4, &mut rng));
        let p = random_attention(&mut t, 4, &mut rng);
        let gcn: Vec<Linear> = (0..2)
            .map(|_| Linear {
                weight: t.param(random(4, 4, &mut rng)),
                bias: t.param(random(1, 4, &mut rng)),
            })
            .collect();
        let att = global_attention(&mut t, h, &p, AttentionMode::Linear).unwrap();
        let branch = gcn_forward(&mut t, h, &adj, &gcn).unwrap();
        let one = sgformer_layer(&mut t, h, &adj, &p, &gcn, 1.0, AttentionMode::Linear).unwrap();
        let zero = sgformer_layer(&mut t, h, &adj, &p, &gcn, 0.0, AttentionMode::Linear).unwrap();
        assert_eq!(t.value(one), t.value(att));
        assert_eq!(t.value(zero), t.value(branch));
        let lin = sgformer_layer(&mut t, h, &adj, &p, &gcn, 0.5, AttentionMode::Linear).unwrap();
        let dense = sgformer_layer(&mut t, h, &adj, &p, &gcn, 0.5, AttentionMode::DenseOracle).unwrap();
        assert!(rel_err(t.value(lin), t.value(dense)) < 1e-10);
    }

    #[test]
    fn dense_oracle_size_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let h = t.constant(Tensor2D::zeros(DENSE_ORACLE_MAX_NODES + 1, 2));
        let p = random_attention(&mut t, 2, &mut rng);
        assert!(global_attention(&mut t, h, &p, AttentionMode::DenseOracle).is_err());
    }

    #[test]
    fn forward_passes_are_finite_with_zero_rows() {
        let adj = path_graph(5);
        for kind in ModelKind::ALL {
            let hyper = ModelHyper {
                hidden: 6,
                ..ModelHyper::new(kind, 3)
            };
            let input = ModelInput::new(&hyper, Tensor2D::zeros(5, 3), &adj).unwrap();
            let params = ModelParams::init(hyper, 2).unwrap();
            let p = predict(&params, &input, AttentionMode::Linear).unwrap();
            assert!(p.iter().all(|v| v.is_finite()), "{kind}");
        }
    }
}
