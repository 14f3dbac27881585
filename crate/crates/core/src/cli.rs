//! `cellgraph` command line. Exit codes: 0 success, 2 bad arguments,
//! 3 malformed input files, 4 runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{
    cross_validate, make_folds, partition_dataset, run_sweep, sweep_csv, Dataset, MetricsReport, Protocol, SweepInput,
    SweepSpec, DEFAULT_FOLDS,
};
use crate::graph::{CellGraph, EdgeRule};
use crate::io::{read_json, write_atomic, write_json, write_json_lines};
use crate::models::ModelKind;
use crate::numerics::save_checkpoint;
use crate::pipeline::{
    build_graph, list_graph_files, read_patients, read_tissue_dir, write_tissue, PATIENTS_FILE, SEGMENTATION_FILE,
};
use crate::simplify::{induced_subgraph, khop_mask, kmeans_split, extract_partition_subgraphs, AnchorSelection, HopMethod, InducedSubgraph, PartitionFile, SubgraphMode};
use crate::synth::{generate_cohort, generate_tissue, Preset, SynthConfig};
use crate::train::{train_model, FeatureGroups, GraphTask, TrainConfig};

pub const EXIT_INPUT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cellgraph", version, about = "Cell-graph construction, simplification and graph-transformer training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tissue directory (or a multi-patient cohort).
    Synth(SynthArgs),
    /// Build a cleaned cell graph from a tissue directory.
    Build(BuildArgs),
    /// Keep only nodes within k hops of an anchor class.
    Simplify(SimplifyArgs),
    /// K-means spatial split into subgraph files.
    Split(SplitArgs),
    /// Train one model holding out one fold.
    Train(TrainArgs),
    /// 3-fold cross-validation; writes a metrics report.
    Crossval(CrossvalArgs),
    /// Cross-validate a grid of feature sets, k values, models and protocols.
    Sweep(SweepArgs),
    /// Render a metrics report as a table and optional SVG chart.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Easy,
    #[value(name = "context_only", alias = "context-only")]
    ContextOnly,
    #[value(name = "spatially_clustered", alias = "spatially-clustered")]
    SpatiallyClustered,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Easy => Preset::Easy,
            PresetArg::ContextOnly => Preset::ContextOnly,
            PresetArg::SpatiallyClustered => Preset::SpatiallyClustered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Gcn,
    Sgc,
    Difformer,
    Sgformer,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Gcn => ModelKind::Gcn,
            ModelArg::Sgc => ModelKind::Sgc,
            ModelArg::Difformer => ModelKind::Difformer,
            ModelArg::Sgformer => ModelKind::Sgformer,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    #[value(name = "random_node", alias = "random-node")]
    RandomNode,
    Subgraph,
    #[value(name = "patient_grouped", alias = "patient-grouped")]
    PatientGrouped,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::RandomNode => Protocol::RandomNode,
            ProtocolArg::Subgraph => Protocol::Subgraph,
            ProtocolArg::PatientGrouped => Protocol::PatientGrouped,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Bfs,
    Matpow,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "easy")]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Area fraction of the default 2400 px canvas (density is kept).
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Also render image.png.
    #[arg(long)]
    pub raster: bool,
    /// Generate a cohort of this many patients, one subdirectory per tile.
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub tiles: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Tissue directory, or a cohort directory of tile subdirectories.
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    pub r0: f64,
    /// Graph JSON file (cohorts: output directory).
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimplifyArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// `epithelial` or a comma list of class names / codes.
    #[arg(long, default_value = "epithelial")]
    pub anchors: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "bfs")]
    pub method: MethodArg,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long = "kmeans-k", default_value_t = 100)]
    pub kmeans_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `subgraph_NNN.json` and `partition.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Training knobs; unset flags fall back to `--config`, then defaults.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Flat TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// SGC propagation hops.
    #[arg(long)]
    pub hops: Option<usize>,
    /// SGFormer attention weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma list from morph, texture, class.
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub no_zscore: bool,
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::read(p)?,
            None => TrainConfig::default(),
        };
        if let Some(m) = self.model {
            cfg.model = m.into();
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.hops {
            cfg.sgc_hops = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(f) = &self.features {
            let g = FeatureGroups::parse(f)?;
            cfg.morphology = g.morphology;
            cfg.texture = g.texture;
            cfg.cell_class = g.cell_class;
        }
        if self.no_zscore {
            cfg.zscore = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph JSON file or directory of graph files.
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "subgraph")]
    pub protocol: ProtocolArg,
    /// Held-out fold.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Subgraph count when a single graph is split on the fly.
    #[arg(long = "kmeans-k", default_value_t = 100)]
    pub kmeans_k: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Output directory for checkpoint, loss and prediction files.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "subgraph")]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long = "kmeans-k", default_value_t = 100)]
    pub kmeans_k: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Report path; printed to stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Feature sets separated by `;`, e.g. `morph,texture,class;morph,texture`.
    #[arg(long = "feature-sets", default_value = "morph,texture,class")]
    pub feature_sets: String,
    /// Comma list of hop limits; `none` disables simplification.
    #[arg(long, default_value = "3")]
    pub ks: String,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "difformer")]
    pub models: Vec<ModelArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "subgraph")]
    pub protocols: Vec<ProtocolArg>,
    #[arg(long = "kmeans-k", default_value_t = 100)]
    pub kmeans_k: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    /// Write a bar chart of per-fold balanced accuracy.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    if !(a.scale > 0.0 && a.scale <= 4.0) {
        return Err(Error::InvalidConfig(format!("scale {} outside (0, 4]", a.scale)));
    }
    let mut cfg = SynthConfig::preset(a.preset.into(), a.seed);
    if a.scale != 1.0 {
        cfg = cfg.scaled(a.scale);
    }
    cfg.raster = a.raster;
    match a.patients {
        None => write_tissue(&a.output, &generate_tissue(&cfg)?),
        Some(p) => {
            let cohort = generate_cohort(&cfg, p, a.tiles)?;
            let mut patients = BTreeMap::new();
            for (i, (pid, t)) in cohort.iter().enumerate() {
                let name = format!("tile_{i:03}");
                write_tissue(&a.output.join(&name), t)?;
                patients.insert(name, pid.clone());
            }
            write_json(&a.output.join(PATIENTS_FILE), &patients)
        }
    }
}

fn run_build(a: &BuildArgs) -> Result<()> {
    let rule = EdgeRule::new(a.r0)?;
    if a.input.join(SEGMENTATION_FILE).exists() {
        let (cells, regions, source) = read_tissue_dir(&a.input)?;
        let g = build_graph(&cells, &regions, &source, rule)?;
        log::info!("{} nodes, {} edges", g.num_nodes(), g.num_edges());
        return g.write(&a.output);
    }
    // Cohort: every subdirectory holding a segmentation becomes one graph.
    let mut tiles: Vec<PathBuf> = std::fs::read_dir(&a.input)
        .map_err(|source| Error::Io {
            path: a.input.clone(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SEGMENTATION_FILE).exists())
        .collect();
    tiles.sort();
    if tiles.is_empty() {
        return Err(Error::MalformedInput {
            record: None,
            message: format!("{}: no {SEGMENTATION_FILE} found", a.input.display()),
        });
    }
    let mut graphs = Vec::new();
    for t in &tiles {
        let (cells, regions, source) = read_tissue_dir(t)?;
        graphs.push(build_graph(&cells, &regions, &source, rule)?);
    }
    let patients_src = a.input.join(PATIENTS_FILE);
    let patients: Option<BTreeMap<String, String>> = patients_src.exists().then(|| read_json(&patients_src)).transpose()?;
    ensure_dir(&a.output)?;
    for (t, g) in tiles.iter().zip(&graphs) {
        let stem = t.file_name().and_then(|s| s.to_str()).unwrap_or("tile");
        g.write(&a.output.join(format!("{stem}.json")))?;
    }
    if let Some(p) = patients {
        write_json(&a.output.join(PATIENTS_FILE), &p)?;
    }
    Ok(())
}

fn run_simplify(a: &SimplifyArgs) -> Result<()> {
    let g = CellGraph::read(&a.input)?;
    let sel = AnchorSelection::parse(&a.anchors)?;
    let method = match a.method {
        MethodArg::Bfs => HopMethod::Bfs,
        MethodArg::Matpow => HopMethod::MatPow,
    };
    let m = khop_mask(&g, &sel, a.k, method)?;
    let InducedSubgraph::Compact { graph, .. } = induced_subgraph(&g, &m, SubgraphMode::Compact) else {
        unreachable!("compact mode yields a compact subgraph")
    };
    log::info!("kept {} of {} nodes", graph.num_nodes(), g.num_nodes());
    graph.write(&a.output)
}

fn run_split(a: &SplitArgs) -> Result<()> {
    let g = CellGraph::read(&a.input)?;
    let p = kmeans_split(&g, a.kmeans_k, a.seed)?;
    let subs = extract_partition_subgraphs(&g, &p);
    ensure_dir(&a.output)?;
    for (i, (sg, _)) in subs.iter().enumerate() {
        sg.write(&a.output.join(format!("subgraph_{i:03}.json")))?;
    }
    write_json(
        &a.output.join("partition.json"),
        &PartitionFile {
            k: p.k,
            seed: p.seed,
            assignment: p.assignment.clone(),
        },
    )
}

/// A graph file, or a directory of graph files with optional patients.json.
fn load_dataset(path: &Path) -> Result<(Dataset, bool)> {
    if path.is_dir() {
        let files = list_graph_files(path)?;
        if files.is_empty() {
            return Err(Error::MalformedInput {
                record: None,
                message: format!("{}: no graph files", path.display()),
            });
        }
        let graphs = files.iter().map(|f| CellGraph::read(f)).collect::<Result<Vec<_>>>()?;
        let patients = read_patients(path, &files)?;
        Ok((Dataset { graphs, patients }, true))
    } else {
        Ok((Dataset::single(CellGraph::read(path)?), false))
    }
}

fn dataset_for(path: &Path, protocol: Protocol, kmeans_k: usize, seed: u64) -> Result<Dataset> {
    let (data, many) = load_dataset(path)?;
    if protocol == Protocol::Subgraph && !many {
        return partition_dataset(&data.graphs[0], kmeans_k, seed);
    }
    Ok(data)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let protocol: Protocol = a.protocol.into();
    let data = dataset_for(&a.input, protocol, a.kmeans_k, cfg.seed)?;
    let split = make_folds(&data, protocol, cfg.seed, DEFAULT_FOLDS)?;
    if a.fold >= split.n_folds {
        return Err(Error::InvalidConfig(format!("fold {} out of range", a.fold)));
    }
    let parts = split.tasks_for(&data, a.fold);
    let tasks: Vec<GraphTask> = data
        .graphs
        .iter()
        .zip(&parts)
        .map(|(g, (tr, te))| GraphTask {
            graph: g,
            train: tr,
            test: te,
        })
        .collect();
    let out = train_model(&tasks, &cfg)?;
    ensure_dir(&a.output)?;
    save_checkpoint(&a.output.join("checkpoint.json"), &out.params.tensors)?;
    write_json_lines(&a.output.join("loss.jsonl"), &out.history)?;
    write_json_lines(&a.output.join("predictions.jsonl"), &out.predictions)?;
    write_atomic(&a.output.join("config.toml"), cfg.to_toml().as_bytes())
}

fn run_crossval(a: &CrossvalArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let protocol: Protocol = a.protocol.into();
    let data = dataset_for(&a.input, protocol, a.kmeans_k, cfg.seed)?;
    let split = make_folds(&data, protocol, cfg.seed, a.folds)?;
    let report = cross_validate(&data, &cfg, &split)?;
    match &a.output {
        Some(p) => write_atomic(p, report.to_json().as_bytes()),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

fn run_sweep_cmd(a: &SweepArgs) -> Result<()> {
    let base = a.train.resolve()?;
    let feature_sets = a
        .feature_sets
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(FeatureGroups::parse)
        .collect::<Result<Vec<_>>>()?;
    let ks = a
        .ks
        .split(',')
        .map(str::trim)
        .map(|s| match s {
            "none" => Ok(None),
            _ => s
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidConfig(format!("bad k value \"{s}\""))),
        })
        .collect::<Result<Vec<_>>>()?;
    let (data, many) = load_dataset(&a.input)?;
    let input = if many {
        SweepInput::Tiles(data)
    } else {
        SweepInput::Full {
            graph: data.graphs.into_iter().next().expect("one graph"),
            kmeans_k: a.kmeans_k,
        }
    };
    let spec = SweepSpec {
        feature_sets,
        ks,
        models: a.models.iter().map(|&m| m.into()).collect(),
        protocols: a.protocols.iter().map(|&p| p.into()).collect(),
    };
    let rows = run_sweep(&input, &base, &spec)?;
    write_atomic(&a.output, sweep_csv(&rows)?.as_bytes())
}

/// Plain-text table of a report.
pub fn render_table(r: &MetricsReport) -> String {
    let mut s = format!("protocol: {}\n", r.protocol);
    s += &format!("{:<6} {:>8} {:>6} {:>6} {:>6} {:>6}\n", "fold", "bal_acc", "tp", "fp", "tn", "fn");
    for (i, f) in r.folds.iter().enumerate() {
        s += &format!("{:<6} {:>8.4} {:>6} {:>6} {:>6} {:>6}\n", i, f.bal_acc, f.tp, f.fp, f.tn, f.fn_);
    }
    s += &format!("mean {:.4} ± {:.4} (standard error)\n", r.mean, r.stderr);
    s
}

/// Bar chart of per-fold balanced accuracy with the mean as a line.
pub fn render_svg(r: &MetricsReport) -> String {
    let (w, h, pad) = (120.0 + 80.0 * r.folds.len() as f64, 260.0, 40.0);
    let plot_h = h - 2.0 * pad;
    let y = |v: f64| pad + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<text x=\"{pad}\" y=\"20\">{} balanced accuracy</text>\n", r.protocol);
    s += &format!(
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        y(1.0),
        y(0.0)
    );
    for t in [0.0, 0.5, 1.0] {
        s += &format!("<text x=\"5\" y=\"{:.1}\">{t:.1}</text>\n", y(t) + 4.0);
    }
    for (i, f) in r.folds.iter().enumerate() {
        let x = pad + 20.0 + 80.0 * i as f64;
        s += &format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"50\" height=\"{:.1}\" fill=\"steelblue\"/>\n",
            y(f.bal_acc),
            y(0.0) - y(f.bal_acc)
        );
        s += &format!("<text x=\"{:.1}\" y=\"{:.1}\">fold {i}: {:.3}</text>\n", x, y(0.0) + 16.0, f.bal_acc);
    }
    s += &format!(
        "<line x1=\"{pad}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"firebrick\" stroke-dasharray=\"4 3\"/>\n",
        y(r.mean),
        w - 20.0
    );
    s += "</svg>\n";
    s
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let r: MetricsReport = read_json(&a.input)?;
    if r.folds.iter().any(|f| !(0.0..=1.0).contains(&f.bal_acc)) {
        return Err(Error::MalformedInput {
            record: None,
            message: format!("{}: balanced accuracy outside [0, 1]", a.input.display()),
        });
    }
    print!("{}", render_table(&r));
    if let Some(p) = &a.svg {
        write_atomic(p, render_svg(&r).as_bytes())?;
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Build(a) => run_build(a),
        Command::Simplify(a) => run_simplify(a),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a),
        Command::Crossval(a) => run_crossval(a),
        Command::Sweep(a) => run_sweep_cmd(a),
        Command::Report(a) => run_report(a),
    }
}

/// Sizes the global worker pool from `CELLGRAPH_THREADS` when set.
pub fn init_thread_pool() -> Result<()> {
    if let Ok(v) = std::env::var("CELLGRAPH_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("CELLGRAPH_THREADS=\"{v}\" is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = init_thread_pool().and_then(|_| dispatch(&cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
