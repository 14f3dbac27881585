//! Fold generation for the three evaluation protocols, balanced accuracy,
//! cross-validation and configuration sweeps.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CellGraph;
use crate::models::ModelKind;
use crate::simplify::{extract_partition_subgraphs, khop_mask, kmeans_split, AnchorSelection, HopMethod};
use crate::train::{train_model, FeatureGroups, GraphTask, Prediction, TrainConfig};

pub const DEFAULT_FOLDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    RandomNode,
    Subgraph,
    PatientGrouped,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::RandomNode, Protocol::Subgraph, Protocol::PatientGrouped];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::RandomNode => "random_node",
            Protocol::Subgraph => "subgraph",
            Protocol::PatientGrouped => "patient_grouped",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown protocol \"{s}\"")))
    }
}

/// TP/FP/TN/FN with tumor (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (pred, label) in pairs {
            match (pred, label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `(TP/(TP+FN) + TN/(TN+FP)) / 2`.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return Err(Error::SingleClassLabels);
        }
        Ok((self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64) / 2.0)
    }
}

pub fn balanced_accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Confusion::from_pairs(predictions.iter().copied().zip(labels.iter().copied())).balanced_accuracy()
}

/// Graphs to evaluate on, with optional patient ids (one per graph).
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub graphs: Vec<CellGraph>,
    pub patients: Option<Vec<String>>,
}

impl Dataset {
    pub fn single(g: CellGraph) -> Self {
        Dataset {
            graphs: vec![g],
            patients: None,
        }
    }

    pub fn num_epithelial(&self) -> usize {
        self.graphs.iter().map(|g| g.epithelial_nodes().len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldUnit {
    Node { graph: usize, node: usize },
    Graph(usize),
}

/// Fold assignment per unit: epithelial nodes for `random_node`, graphs
/// (subgraphs or tiles) otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub protocol: Protocol,
    pub n_folds: usize,
    pub seed: u64,
    pub units: Vec<FoldUnit>,
    pub folds: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        self.folds.iter().for_each(|&f| s[f] += 1);
        s
    }

    /// Per-graph `(train, test)` epithelial indices for one held-out fold.
    pub fn tasks_for(&self, data: &Dataset, fold: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); data.graphs.len()];
        for (unit, &f) in self.units.iter().zip(&self.folds) {
            match *unit {
                FoldUnit::Node { graph, node } => {
                    let slot = if f == fold { &mut out[graph].1 } else { &mut out[graph].0 };
                    slot.push(node);
                }
                FoldUnit::Graph(gi) => {
                    let epi = data.graphs[gi].epithelial_nodes();
                    if f == fold {
                        out[gi].1 = epi;
                    } else {
                        out[gi].0 = epi;
                    }
                }
            }
        }
        for (tr, te) in &mut out {
            tr.sort_unstable();
            te.sort_unstable();
        }
        out
    }
}

/// Deals `units` (already shuffled) round-robin into `n` folds.
fn deal(order: &[usize], n: usize, folds: &mut [usize], start: usize) -> usize {
    let mut c = start;
    for &u in order {
        folds[u] = c % n;
        c += 1;
    }
    c
}

pub fn make_folds(data: &Dataset, protocol: Protocol, seed: u64, n_folds: usize) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::InvalidConfig("at least 2 folds are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (units, folds) = match protocol {
        Protocol::RandomNode => {
            let units: Vec<FoldUnit> = data
                .graphs
                .iter()
                .enumerate()
                .flat_map(|(gi, g)| g.epithelial_nodes().into_iter().map(move |node| FoldUnit::Node { graph: gi, node }))
                .collect();
            if units.len() < n_folds {
                return Err(Error::TooFewUnits {
                    needed: n_folds,
                    got: units.len(),
                });
            }
            let label = |u: &FoldUnit| match *u {
                FoldUnit::Node { graph, node } => data.graphs[graph].label(node),
                FoldUnit::Graph(_) => None,
            };
            let mut folds = vec![0; units.len()];
            let mut counter = 0;
            for cls in [Some(0u8), Some(1u8)] {
                let mut stratum: Vec<usize> = (0..units.len()).filter(|&i| label(&units[i]) == cls).collect();
                stratum.shuffle(&mut rng);
                counter = deal(&stratum, n_folds, &mut folds, counter);
            }
            (units, folds)
        }
        Protocol::Subgraph => {
            let n = data.graphs.len();
            if n < n_folds {
                return Err(Error::TooFewUnits { needed: n_folds, got: n });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut folds = vec![0; n];
            deal(&order, n_folds, &mut folds, 0);
            ((0..n).map(FoldUnit::Graph).collect(), folds)
        }
        Protocol::PatientGrouped => {
            let patients = data.patients.as_ref().ok_or(Error::MissingPatientIds)?;
            if patients.len() != data.graphs.len() {
                return Err(Error::MissingPatientIds);
            }
            let mut ids: Vec<&String> = patients.iter().collect();
            ids.sort();
            ids.dedup();
            if ids.len() < n_folds {
                return Err(Error::TooFewUnits {
                    needed: n_folds,
                    got: ids.len(),
                });
            }
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut rng);
            let mut patient_fold = vec![0; ids.len()];
            deal(&order, n_folds, &mut patient_fold, 0);
            let folds = patients
                .iter()
                .map(|p| patient_fold[ids.binary_search(&p).expect("id present")])
                .collect();
            ((0..data.graphs.len()).map(FoldUnit::Graph).collect(), folds)
        }
    };
    Ok(FoldSplit {
        protocol,
        n_folds,
        seed,
        units,
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub bal_acc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub folds: Vec<FoldMetrics>,
    pub mean: f64,
    pub stderr: f64,
}

impl MetricsReport {
    /// Mean and `s / √n` with the `n − 1` sample deviation.
    pub fn from_folds(protocol: Protocol, folds: Vec<FoldMetrics>) -> Self {
        let (mean, stderr) = mean_stderr(&folds.iter().map(|f| f.bal_acc).collect::<Vec<_>>());
        MetricsReport {
            protocol,
            folds,
            mean,
            stderr,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Output of one held-out fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub predictions: Vec<Prediction>,
}

pub fn run_fold(data: &Dataset, cfg: &TrainConfig, split: &FoldSplit, fold: usize) -> Result<FoldOutcome> {
    let parts = split.tasks_for(data, fold);
    let tasks: Vec<GraphTask> = data
        .graphs
        .iter()
        .zip(&parts)
        .filter(|(_, (tr, te))| !(tr.is_empty() && te.is_empty()))
        .map(|(g, (tr, te))| GraphTask {
            graph: g,
            train: tr,
            test: te,
        })
        .collect();
    let fold_cfg = TrainConfig {
        seed: cfg.seed.wrapping_add(fold as u64),
        ..cfg.clone()
    };
    let out = train_model(&tasks, &fold_cfg)?;
    let c = Confusion::from_pairs(out.predictions.iter().map(|p| (p.prob >= 0.5, p.label == 1)));
    Ok(FoldOutcome {
        metrics: FoldMetrics {
            bal_acc: c.balanced_accuracy()?,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        },
        predictions: out.predictions,
    })
}

/// Trains one model per held-out fold (folds run concurrently) and
/// aggregates balanced accuracy.
pub fn cross_validate(data: &Dataset, cfg: &TrainConfig, split: &FoldSplit) -> Result<MetricsReport> {
    let folds = (0..split.n_folds)
        .into_par_iter()
        .map(|f| run_fold(data, cfg, split, f).map(|o| o.metrics))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_folds(split.protocol, folds))
}

/// Drops nodes farther than `k` hops from every epithelial node.
pub fn simplify_graph(g: &CellGraph, k: usize) -> Result<CellGraph> {
    let m = khop_mask(g, &AnchorSelection::epithelial(), k, HopMethod::Bfs)?;
    Ok(g.retain(&m.mask).0)
}

/// Splits `g` into `kmeans_k` spatial subgraphs; cross-cluster edges are
/// dropped.
pub fn partition_dataset(g: &CellGraph, kmeans_k: usize, seed: u64) -> Result<Dataset> {
    let p = kmeans_split(g, kmeans_k, seed)?;
    Ok(Dataset {
        graphs: extract_partition_subgraphs(g, &p).into_iter().map(|(sg, _)| sg).collect(),
        patients: None,
    })
}

/// Source data for a sweep.
#[derive(Debug, Clone)]
pub enum SweepInput {
    /// One whole-slide graph; `subgraph` runs use a K-means partition.
    Full { graph: CellGraph, kmeans_k: usize },
    /// Pre-tiled graphs, optionally with patient ids.
    Tiles(Dataset),
}

/// Axes of a configuration sweep. `None` in `ks` means no simplification.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub feature_sets: Vec<FeatureGroups>,
    pub ks: Vec<Option<usize>>,
    pub models: Vec<ModelKind>,
    pub protocols: Vec<Protocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub features: String,
    pub k: String,
    pub model: ModelKind,
    pub protocol: Protocol,
    pub mean: f64,
    pub stderr: f64,
    pub folds: String,
}

/// Builds the evaluation dataset for one `(k, protocol)` cell.
pub fn sweep_dataset(input: &SweepInput, k: Option<usize>, protocol: Protocol, seed: u64) -> Result<Dataset> {
    let simplify = |g: &CellGraph| match k {
        Some(k) => simplify_graph(g, k),
        None => Ok(g.clone()),
    };
    match input {
        SweepInput::Full { graph, kmeans_k } => {
            let g = simplify(graph)?;
            match protocol {
                Protocol::RandomNode => Ok(Dataset::single(g)),
                Protocol::Subgraph => partition_dataset(&g, *kmeans_k, seed),
                Protocol::PatientGrouped => Err(Error::MissingPatientIds),
            }
        }
        SweepInput::Tiles(d) => Ok(Dataset {
            graphs: d.graphs.iter().map(simplify).collect::<Result<_>>()?,
            patients: d.patients.clone(),
        }),
    }
}

/// Runs every combination in a fixed nested order
/// (features, k, model, protocol).
pub fn run_sweep(input: &SweepInput, base: &TrainConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for groups in &spec.feature_sets {
        for &k in &spec.ks {
            for &protocol in &spec.protocols {
                let data = sweep_dataset(input, k, protocol, base.seed)?;
                let split = make_folds(&data, protocol, base.seed, DEFAULT_FOLDS)?;
                for &model in &spec.models {
                    let cfg = TrainConfig {
                        model,
                        morphology: groups.morphology,
                        texture: groups.texture,
                        cell_class: groups.cell_class,
                        ..base.clone()
                    };
                    let r = cross_validate(&data, &cfg, &split)?;
                    log::info!("{} k={k:?} {model} {protocol}: {:.4}", groups.label(), r.mean);
                    rows.push(SweepRow {
                        features: groups.label(),
                        k: k.map_or_else(|| "none".to_string(), |k| k.to_string()),
                        model,
                        protocol,
                        mean: r.mean,
                        stderr: r.stderr,
                        folds: r.folds.iter().map(|f| format!("{:.6}", f.bal_acc)).collect::<Vec<_>>().join(";"),
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.features, &a.k, a.model, a.protocol).cmp(&(&b.features, &b.k, b.model, b.protocol))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NUM_FEATURES;
    use crate::graph::Csr;
    use crate::ingest::CellClass;

    fn graph_with(labels: &[u8]) -> CellGraph {
        let n = labels.len();
        CellGraph {
            node_ids: (0..n as u64).collect(),
            coords: (0..n).map(|i| [i as f64, 0.0]).collect(),
            features: vec![[0.0; NUM_FEATURES]; n],
            classes: labels
                .iter()
                .map(|&l| Some(if l == 1 { CellClass::EpithelialTumor } else { CellClass::EpithelialHealthy }))
                .collect(),
            adjacency: Csr::empty(n),
            r0: 50.0,
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        let c = Confusion {
            tp: 8,
            fn_: 2,
            tn: 5,
            fp: 5,
        };
        assert!((c.balanced_accuracy().unwrap() - 0.65).abs() < 1e-15);
        let labels = [true, false, true, false];
        assert_eq!(balanced_accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[true; 4], &labels).unwrap(), 0.5);
        assert!(matches!(balanced_accuracy(&[true], &[true]), Err(Error::SingleClassLabels)));
    }

    #[test]
    fn random_node_folds_are_equal_and_stratified() {
        let labels: Vec<u8> = (0..99).map(|i| (i % 3 == 0) as u8).collect();
        let data = Dataset::single(graph_with(&labels));
        let s = make_folds(&data, Protocol::RandomNode, 4, 3).unwrap();
        assert_eq!(s.fold_sizes(), vec![33, 33, 33]);
        for f in 0..3 {
            let (_, test) = &s.tasks_for(&data, f)[0];
            let pos = test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(pos, 11);
        }
    }

    #[test]
    fn subgraph_and_patient_folds() {
        let g = graph_with(&[0, 1]);
        let mut data = Dataset {
            graphs: vec![g; 6],
            patients: None,
        };
        let s = make_folds(&data, Protocol::Subgraph, 1, 3).unwrap();
        assert_eq!(s.fold_sizes(), vec![2, 2, 2]);
        assert!(matches!(
            make_folds(&data, Protocol::PatientGrouped, 1, 3),
            Err(Error::MissingPatientIds)
        ));
        data.patients = Some(["a", "a", "b", "c", "d", "d"].iter().map(|s| s.to_string()).collect());
        let s = make_folds(&data, Protocol::PatientGrouped, 1, 3).unwrap();
        assert_eq!(s.folds[0], s.folds[1]);
        assert_eq!(s.folds[4], s.folds[5]);
        let few = Dataset {
            graphs: vec![graph_with(&[0, 1]); 2],
            patients: None,
        };
        assert!(matches!(
            make_folds(&few, Protocol::Subgraph, 1, 3),
            Err(Error::TooFewUnits { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn stderr_formula() {
        let (m, s) = mean_stderr(&[0.7, 0.8, 0.9]);
        assert!((m - 0.8).abs() < 1e-12);
        assert!((s - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_stderr(&[0.6; 3]).1, 0.0);
    }

    #[test]
    fn report_json_field_order() {
        let r = MetricsReport::from_folds(
            Protocol::Subgraph,
            vec![FoldMetrics {
                bal_acc: 0.5,
                tp: 1,
                fp: 2,
                tn: 3,
                fn_: 4,
            }],
        );
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.starts_with(r#"{"protocol":"subgraph","folds":[{"bal_acc":0.5,"tp":1,"fp":2,"tn":3,"fn":4}],"mean""#));
        assert_eq!(serde_json::from_str::<MetricsReport>(&j).unwrap(), r);
    }
}
