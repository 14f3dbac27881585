//! Training pipeline: input assembly, z-score normalization, label-leakage
//! masking, BCE over epithelial nodes and the full-batch Adam loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;
use crate::graph::CellGraph;
use crate::ingest::CellClass;
use crate::models::{forward, AttentionMode, ModelHyper, ModelInput, ModelKind, ModelParams};
use crate::numerics::{adam_step, bce_sum, sigmoid, AdamConfig, AdamState, Tensor2D};

/// Standard-deviation floor used by the normalizer.
pub const STD_EPS: f64 = 1e-8;

fn default_true() -> bool {
    true
}

/// Hyperparameters for one training run. Serialized as flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    #[serde(default = "default_true")]
    pub zscore: bool,
    #[serde(default = "default_true")]
    pub morphology: bool,
    #[serde(default = "default_true")]
    pub texture: bool,
    #[serde(default = "default_true")]
    pub cell_class: bool,
    pub sgc_hops: usize,
    pub alpha: f64,
    pub sgformer_gcn_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Difformer,
            epochs: 200,
            lr: 1e-3,
            seed: 0,
            hidden: 64,
            layers: 2,
            zscore: true,
            morphology: true,
            texture: true,
            cell_class: true,
            sgc_hops: 2,
            alpha: 0.5,
            sgformer_gcn_layers: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.morphology || self.texture || self.cell_class) {
            return Err(Error::InvalidConfig("at least one feature group must be enabled".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn groups(&self) -> FeatureGroups {
        FeatureGroups {
            morphology: self.morphology,
            texture: self.texture,
            cell_class: self.cell_class,
        }
    }

    pub fn hyper(&self, input_dim: usize) -> ModelHyper {
        ModelHyper {
            kind: self.model,
            input_dim,
            hidden: self.hidden,
            layers: self.layers,
            alpha: self.alpha,
            sgformer_gcn_layers: self.sgformer_gcn_layers,
            sgc_hops: self.sgc_hops,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::MalformedInput {
            record: None,
            message: format!("config: {e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::MalformedInput { record, message } => Error::MalformedInput {
                record,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}

/// Which node-attribute blocks enter the model. Coordinates are always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGroups {
    pub morphology: bool,
    pub texture: bool,
    pub cell_class: bool,
}

impl Default for FeatureGroups {
    fn default() -> Self {
        FeatureGroups {
            morphology: true,
            texture: true,
            cell_class: true,
        }
    }
}

impl FeatureGroups {
    /// Parses a comma list such as `morph,texture,class`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut g = FeatureGroups {
            morphology: false,
            texture: false,
            cell_class: false,
        };
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "morph" | "morphology" => g.morphology = true,
                "texture" => g.texture = true,
                "class" | "cell_class" => g.cell_class = true,
                other => return Err(Error::InvalidConfig(format!("unknown feature group \"{other}\""))),
            }
        }
        if !(g.morphology || g.texture || g.cell_class) {
            return Err(Error::InvalidConfig("at least one feature group must be enabled".into()));
        }
        Ok(g)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.morphology {
            parts.push("morph");
        }
        if self.texture {
            parts.push("texture");
        }
        if self.cell_class {
            parts.push("class");
        }
        parts.join("+")
    }
}

/// Column layout of the assembled model input
/// `[morphology? ‖ texture? ‖ one-hot? ‖ x, y]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputLayout {
    pub groups: FeatureGroups,
    pub width: usize,
    pub onehot: Option<usize>,
}

impl InputLayout {
    pub fn new(groups: FeatureGroups) -> Self {
        let mut width = 0;
        if groups.morphology {
            width += 7;
        }
        if groups.texture {
            width += 7;
        }
        let onehot = groups.cell_class.then_some(width);
        if groups.cell_class {
            width += 6;
        }
        InputLayout {
            groups,
            width: width + 2,
            onehot,
        }
    }

    /// `true` for columns that get z-scored.
    pub fn continuous(&self) -> Vec<bool> {
        (0..self.width)
            .map(|c| match self.onehot {
                Some(o) => !(o..o + 6).contains(&c),
                None => true,
            })
            .collect()
    }
}

/// Builds the unnormalized input matrix for `g`.
pub fn assemble_inputs(g: &CellGraph, layout: &InputLayout) -> Tensor2D {
    let mut out = Tensor2D::zeros(g.num_nodes(), layout.width);
    for i in 0..g.num_nodes() {
        let row = out.row_mut(i);
        let mut c = 0;
        if layout.groups.morphology {
            row[c..c + 7].copy_from_slice(&g.features[i][..7]);
            c += 7;
        }
        if layout.groups.texture {
            row[c..c + 7].copy_from_slice(&g.features[i][7..NUM_FEATURES]);
            c += 7;
        }
        if layout.groups.cell_class {
            if let Some(cls) = g.classes[i] {
                row[c..c + 6].copy_from_slice(&cls.one_hot());
            }
            c += 6;
        }
        row[c] = g.coords[i][0];
        row[c + 1] = g.coords[i][1];
    }
    out
}

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub continuous: Vec<bool>,
    pub fitted_on_train: bool,
}

impl Normalizer {
    /// Identity transform of the given width.
    pub fn identity(continuous: Vec<bool>) -> Self {
        Normalizer {
            mean: vec![0.0; continuous.len()],
            std: vec![1.0; continuous.len()],
            continuous,
            fitted_on_train: false,
        }
    }

    /// Population mean and guarded std over `rows`.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, continuous: Vec<bool>) -> Result<Self> {
        let w = continuous.len();
        let mut n = 0usize;
        let mut sum = vec![0.0; w];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            if r.len() != w {
                return Err(Error::ShapeMismatch(format!("row of width {} vs layout {w}", r.len())));
            }
            n += 1;
            sum.iter_mut().zip(r.iter()).for_each(|(s, v)| *s += v);
        }
        if n == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; w];
        for r in &rows {
            for c in 0..w {
                let d = r[c] - mean[c];
                var[c] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_EPS)).collect();
        Ok(Normalizer {
            mean,
            std,
            continuous,
            fitted_on_train: true,
        })
    }

    pub fn apply(&self, h: &mut Tensor2D) {
        for i in 0..h.rows() {
            for (c, v) in h.row_mut(i).iter_mut().enumerate() {
                if self.continuous[c] {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Fits on `train` rows and applies the same transform to both matrices.
pub fn fit_apply_normalizer(
    train: &Tensor2D,
    test: &Tensor2D,
    continuous: &[bool],
) -> Result<(Tensor2D, Tensor2D, Normalizer)> {
    if train.cols() != continuous.len() || test.cols() != continuous.len() {
        return Err(Error::ShapeMismatch("train and test column layouts differ".into()));
    }
    let norm = Normalizer::fit((0..train.rows()).map(|i| train.row(i)), continuous.to_vec())?;
    let (mut a, mut b) = (train.clone(), test.clone());
    norm.apply(&mut a);
    norm.apply(&mut b);
    Ok((a, b, norm))
}

/// Zeroes the one-hot block of every epithelial node.
pub fn mask_target_class_features(h: &Tensor2D, classes: &[Option<CellClass>], layout: &InputLayout) -> Tensor2D {
    let mut out = h.clone();
    if let Some(o) = layout.onehot {
        for (i, c) in classes.iter().enumerate() {
            if c.is_some_and(CellClass::is_epithelial) {
                out.row_mut(i)[o..o + 6].fill(0.0);
            }
        }
    }
    out
}

/// `-Σ_{i∈V_epi} [y_i ln ŷ_i + (1-y_i) ln(1-ŷ_i)]` with clamped `ŷ`.
pub fn bce_loss_epithelial(probs: &[f64], labels: &[f64], epithelial: &[usize]) -> Result<f64> {
    if epithelial.is_empty() {
        return Err(Error::EmptyEpithelialSet);
    }
    if probs.len() != labels.len() || epithelial.iter().any(|&i| i >= probs.len()) {
        return Err(Error::LengthMismatch("probabilities, labels and index disagree".into()));
    }
    Ok(bce_sum(
        epithelial.iter().map(|&i| probs[i]),
        epithelial.iter().map(|&i| labels[i]),
    ))
}

/// One graph with its training and test epithelial node indices.
#[derive(Debug, Clone, Copy)]
pub struct GraphTask<'a> {
    pub graph: &'a CellGraph,
    pub train: &'a [usize],
    pub test: &'a [usize],
}

/// Normalized, masked model inputs for a set of tasks.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub layout: InputLayout,
    pub normalizer: Normalizer,
    pub inputs: Vec<ModelInput>,
}

/// Normalizer rows: every node of graphs that carry training nodes, except
/// test-fold nodes. Graphs used only for testing contribute nothing.
pub fn prepare_inputs(tasks: &[GraphTask], cfg: &TrainConfig) -> Result<PreparedInputs> {
    let layout = InputLayout::new(cfg.groups());
    let hyper = cfg.hyper(layout.width);
    let raw: Vec<Tensor2D> = tasks.iter().map(|t| assemble_inputs(t.graph, &layout)).collect();
    let normalizer = if cfg.zscore {
        let mut rows: Vec<&[f64]> = Vec::new();
        for (t, x) in tasks.iter().zip(&raw) {
            if t.train.is_empty() {
                continue;
            }
            let mut is_test = vec![false; x.rows()];
            t.test.iter().for_each(|&i| is_test[i] = true);
            rows.extend((0..x.rows()).filter(|&i| !is_test[i]).map(|i| x.row(i)));
        }
        Normalizer::fit(rows, layout.continuous())?
    } else {
        Normalizer::identity(layout.continuous())
    };
    let inputs = tasks
        .iter()
        .zip(raw)
        .map(|(t, mut x)| {
            normalizer.apply(&mut x);
            let x = mask_target_class_features(&x, &t.graph.classes, &layout);
            ModelInput::new(&hyper, x, &t.graph.adjacency)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedInputs {
        layout,
        normalizer,
        inputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub node_id: u64,
    pub prob: f64,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub normalizer: Normalizer,
    pub history: Vec<EpochLoss>,
    /// Test-node predictions, task by task in index order.
    pub predictions: Vec<Prediction>,
}

fn targets(g: &CellGraph, idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            g.label(i)
                .map(f64::from)
                .ok_or_else(|| Error::InvalidConfig(format!("node {} is not epithelial", g.node_ids[i])))
        })
        .collect()
}

/// Full-batch training over all tasks' training nodes, then predictions for
/// their test nodes. Each epoch sums the per-graph losses on a single tape
/// and takes one Adam step.
pub fn train_model(tasks: &[GraphTask], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tasks.iter().all(|t| t.train.is_empty()) {
        return Err(Error::EmptyTrainingSet);
    }
    for t in tasks {
        let n = t.graph.num_nodes();
        if t.train.iter().chain(t.test).any(|&i| i >= n) {
            return Err(Error::LengthMismatch("task node index out of range".into()));
        }
    }
    let prepared = prepare_inputs(tasks, cfg)?;
    let hyper = cfg.hyper(prepared.layout.width);
    let mut params = ModelParams::init(hyper, cfg.seed)?;
    let mut values: Vec<_> = params.tensors.iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &values);

    let mut order: Vec<usize> = (0..tasks.len()).filter(|&i| !tasks[i].train.is_empty()).collect();
    let train_targets: Vec<Vec<f64>> = tasks.iter().map(|t| targets(t.graph, t.train)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut tape = crate::numerics::Tape::new();
        let bound = params.bind(&mut tape);
        let mut total = None;
        for &ti in &order {
            let z = forward(&mut tape, &bound, &hyper, &prepared.inputs[ti], AttentionMode::Linear)?;
            let p = tape.sigmoid(z);
            let loss = tape.bce(p, &train_targets[ti], tasks[ti].train)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.expect("at least one training graph");
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::InvalidConfig(format!("training diverged at epoch {epoch}")));
        }
        history.push(EpochLoss { epoch, loss });
        let grads = tape.backward(total)?;
        let g: Vec<Tensor2D> = bound.all().into_iter().map(|v| grads.get(v)).collect();
        adam_step(&mut values, &g, &mut adam)?;
        for ((_, t), v) in params.tensors.iter_mut().zip(&values) {
            t.clone_from(v);
        }
    }

    let mut predictions = Vec::new();
    for (t, input) in tasks.iter().zip(&prepared.inputs) {
        if t.test.is_empty() {
            continue;
        }
        let mut tape = crate::numerics::Tape::new();
        let bound = params.bind(&mut tape);
        let z = forward(&mut tape, &bound, &hyper, input, AttentionMode::Linear)?;
        let z = tape.value(z);
        for &i in t.test {
            let label = t.graph.label(i).ok_or_else(|| {
                Error::InvalidConfig(format!("test node {} is not epithelial", t.graph.node_ids[i]))
            })?;
            predictions.push(Prediction {
                node_id: t.graph.node_ids[i],
                prob: sigmoid(z.get(i, 0)),
                label,
            });
        }
    }

    Ok(TrainOutcome {
        params,
        normalizer: prepared.normalizer,
        history,
        predictions,
    })
}
