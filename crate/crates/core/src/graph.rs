//! Node-attributed undirected cell graph with radius edges.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{NodeFeatureVector, NUM_FEATURES};
use crate::geometry::Point;
use crate::ingest::{CellClass, CellRecord};
use crate::io;

/// Width of an assembled node row: 14 features, 6 one-hot, 2 coordinates.
pub const NODE_ROW_WIDTH: usize = NUM_FEATURES + 6 + 2;

/// Symmetric adjacency in compressed sparse row form. Neighbor lists are
/// sorted, without self-loops or duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Csr {
    pub fn empty(n: usize) -> Self {
        Csr {
            offsets: vec![0; n + 1],
            neighbors: Vec::new(),
        }
    }

    /// Builds from undirected edges; self-loops and duplicates are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut deg = vec![0usize; n];
        for &(i, j) in edges {
            if i != j {
                deg[i] += 1;
                deg[j] += 1;
            }
        }
        let mut offsets = vec![0; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + deg[i];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0; offsets[n]];
        for &(i, j) in edges {
            if i != j {
                neighbors[fill[i]] = j;
                fill[i] += 1;
                neighbors[fill[j]] = i;
                fill[j] += 1;
            }
        }
        // sort and dedup each row, then recompact
        let mut out_offsets = vec![0; n + 1];
        let mut out = Vec::with_capacity(neighbors.len());
        for i in 0..n {
            let row = &mut neighbors[offsets[i]..offsets[i + 1]];
            row.sort_unstable();
            let mut last = None;
            for &j in row.iter() {
                if last != Some(j) {
                    out.push(j);
                    last = Some(j);
                }
            }
            out_offsets[i + 1] = out.len();
        }
        Csr {
            offsets: out_offsets,
            neighbors: out,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Edges with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|i| self.neighbors(i).iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Transpose check: `j ∈ nbr(i) ⟺ i ∈ nbr(j)`, no self-loops, sorted rows.
    pub fn is_valid_symmetric(&self) -> bool {
        (0..self.num_nodes()).all(|i| {
            let row = self.neighbors(i);
            row.windows(2).all(|w| w[0] < w[1]) && row.iter().all(|&j| j != i && j < self.num_nodes() && self.has_edge(j, i))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRule {
    pub r0: f64,
}

impl EdgeRule {
    pub fn new(r0: f64) -> Result<Self> {
        if r0.is_finite() && r0 > 0.0 {
            Ok(EdgeRule { r0 })
        } else {
            Err(Error::InvalidConfig(format!("r0 must be positive, got {r0}")))
        }
    }
}

impl Default for EdgeRule {
    fn default() -> Self {
        EdgeRule { r0: 50.0 }
    }
}

/// All pairs `{i, j}` with Euclidean distance strictly below `r0`, via a
/// uniform grid of cell size `r0`. Output is sorted with `i < j`.
pub fn build_edges(coords: &[Point], rule: EdgeRule) -> Vec<(usize, usize)> {
    let r0 = rule.r0;
    let r2 = r0 * r0;
    let cell = |p: &Point| ((p[0] / r0).floor() as i64, (p[1] / r0).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let mut edges: Vec<(usize, usize)> = coords
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, p)| {
            let (cx, cy) = cell(p);
            let mut local = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                        for &j in bucket {
                            if j > i {
                                let q = coords[j];
                                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                                if d2 < r2 {
                                    local.push((i, j));
                                }
                            }
                        }
                    }
                }
            }
            local
        })
        .collect();
    edges.sort_unstable();
    edges
}

/// Old↔new node index correspondence after removing nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub old_to_new: Vec<Option<usize>>,
    pub new_to_old: Vec<usize>,
}

impl IndexMap {
    pub fn from_keep(keep: &[bool]) -> Self {
        let mut old_to_new = vec![None; keep.len()];
        let mut new_to_old = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                old_to_new[i] = Some(new_to_old.len());
                new_to_old.push(i);
            }
        }
        IndexMap { old_to_new, new_to_old }
    }

    pub fn compose(&self, next: &IndexMap) -> IndexMap {
        let old_to_new = self
            .old_to_new
            .iter()
            .map(|o| o.and_then(|m| next.old_to_new[m]))
            .collect();
        let new_to_old = next.new_to_old.iter().map(|&m| self.new_to_old[m]).collect();
        IndexMap { old_to_new, new_to_old }
    }
}

/// Cell graph G = (H, A). `classes[i] == None` marks an unclassified node.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    pub node_ids: Vec<u64>,
    pub coords: Vec<Point>,
    pub features: Vec<[f64; NUM_FEATURES]>,
    pub classes: Vec<Option<CellClass>>,
    pub adjacency: Csr,
    pub r0: f64,
}

impl CellGraph {
    pub fn empty(r0: f64) -> Self {
        CellGraph {
            node_ids: Vec::new(),
            coords: Vec::new(),
            features: Vec::new(),
            classes: Vec::new(),
            adjacency: Csr::empty(0),
            r0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.num_edges()
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.classes[i].and_then(CellClass::label)
    }

    pub fn labels(&self) -> Vec<Option<u8>> {
        (0..self.num_nodes()).map(|i| self.label(i)).collect()
    }

    pub fn epithelial_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.label(i).is_some()).collect()
    }

    /// `[f_i ‖ one-hot(c_i) ‖ coords_i]`; unclassified nodes get a zero one-hot.
    pub fn node_row(&self, i: usize) -> [f64; NODE_ROW_WIDTH] {
        let mut row = [0.0; NODE_ROW_WIDTH];
        row[..NUM_FEATURES].copy_from_slice(&self.features[i]);
        if let Some(c) = self.classes[i] {
            row[NUM_FEATURES + c as usize] = 1.0;
        }
        row[NUM_FEATURES + 6] = self.coords[i][0];
        row[NUM_FEATURES + 7] = self.coords[i][1];
        row
    }

    /// Induced subgraph on the kept nodes, re-indexed in original order.
    pub fn retain(&self, keep: &[bool]) -> (CellGraph, IndexMap) {
        assert_eq!(keep.len(), self.num_nodes(), "keep mask length");
        let map = IndexMap::from_keep(keep);
        let edges: Vec<(usize, usize)> = self
            .adjacency
            .edges()
            .into_iter()
            .filter_map(|(i, j)| Some((map.old_to_new[i]?, map.old_to_new[j]?)))
            .collect();
        let g = CellGraph {
            node_ids: map.new_to_old.iter().map(|&i| self.node_ids[i]).collect(),
            coords: map.new_to_old.iter().map(|&i| self.coords[i]).collect(),
            features: map.new_to_old.iter().map(|&i| self.features[i]).collect(),
            classes: map.new_to_old.iter().map(|&i| self.classes[i]).collect(),
            adjacency: Csr::from_edges(map.new_to_old.len(), &edges),
            r0: self.r0,
        };
        (g, map)
    }
}

/// Builds the radius graph over relabeled cells. `feats[i]` belongs to `cells[i]`.
pub fn assemble_graph(cells: &[CellRecord], feats: &[NodeFeatureVector], rule: EdgeRule) -> Result<CellGraph> {
    if cells.len() != feats.len() {
        return Err(Error::LengthMismatch(format!(
            "{} cells but {} feature vectors",
            cells.len(),
            feats.len()
        )));
    }
    let coords: Vec<Point> = cells.iter().map(|c| c.centroid).collect();
    let edges = build_edges(&coords, rule);
    Ok(CellGraph {
        node_ids: cells.iter().map(|c| c.id).collect(),
        adjacency: Csr::from_edges(cells.len(), &edges),
        coords,
        features: feats.iter().map(NodeFeatureVector::to_array).collect(),
        classes: cells.iter().map(|c| c.class).collect(),
        r0: rule.r0,
    })
}

/// Drops unclassified nodes, then epithelial nodes left with degree 0.
pub fn cleanup_graph(g: &CellGraph) -> (CellGraph, IndexMap) {
    let classified: Vec<bool> = g.classes.iter().map(Option::is_some).collect();
    let (g1, m1) = g.retain(&classified);
    let keep: Vec<bool> = (0..g1.num_nodes())
        .map(|i| !(g1.classes[i].is_some_and(CellClass::is_epithelial) && g1.adjacency.degree(i) == 0))
        .collect();
    let (g2, m2) = g1.retain(&keep);
    (g2, m1.compose(&m2))
}

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    id: u64,
    coord: [f64; 2],
    features: Vec<f64>,
    class: Option<u8>,
    label: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    format_version: u32,
    r0: f64,
    num_nodes: usize,
    feature_names: Vec<String>,
    class_names: Vec<String>,
    nodes: Vec<NodeEntry>,
    edges: Vec<[usize; 2]>,
}

impl CellGraph {
    pub fn to_json(&self) -> String {
        let file = GraphFile {
            format_version: GRAPH_FORMAT_VERSION,
            r0: self.r0,
            num_nodes: self.num_nodes(),
            feature_names: NodeFeatureVector::names().map(String::from).collect(),
            class_names: CellClass::NAMES.iter().map(|s| s.to_string()).collect(),
            nodes: (0..self.num_nodes())
                .map(|i| NodeEntry {
                    id: self.node_ids[i],
                    coord: self.coords[i],
                    features: self.features[i].to_vec(),
                    class: self.classes[i].map(CellClass::code),
                    label: self.label(i),
                })
                .collect(),
            edges: self.adjacency.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        };
        serde_json::to_string(&file).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<CellGraph> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::malformed(None, e.to_string()))?;
        if file.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::malformed(None, format!("unsupported format_version {}", file.format_version)));
        }
        if file.num_nodes != file.nodes.len() {
            return Err(Error::malformed(
                None,
                format!("num_nodes {} but {} node entries", file.num_nodes, file.nodes.len()),
            ));
        }
        EdgeRule::new(file.r0).map_err(|e| Error::malformed(None, e.to_string()))?;
        let n = file.num_nodes;
        let mut g = CellGraph::empty(file.r0);
        for node in &file.nodes {
            let rid = Some(node.id as i64);
            let feats: [f64; NUM_FEATURES] = node
                .features
                .as_slice()
                .try_into()
                .map_err(|_| Error::malformed(rid, format!("expected {NUM_FEATURES} features")))?;
            if feats.iter().chain(&node.coord).any(|v| !v.is_finite()) {
                return Err(Error::malformed(rid, "non-finite value"));
            }
            let class = match node.class {
                None => None,
                Some(c) => Some(CellClass::from_code(c as i64).ok_or_else(|| Error::malformed(rid, "class must be 0-5"))?),
            };
            if node.label != class.and_then(CellClass::label) {
                return Err(Error::malformed(rid, "label disagrees with class"));
            }
            g.node_ids.push(node.id);
            g.coords.push(node.coord);
            g.features.push(feats);
            g.classes.push(class);
        }
        let mut edges = Vec::with_capacity(file.edges.len());
        let mut prev: Option<[usize; 2]> = None;
        for e in &file.edges {
            let [i, j] = *e;
            if i >= j || j >= n {
                return Err(Error::malformed(None, format!("edge [{i},{j}] must satisfy i < j < num_nodes")));
            }
            if prev.is_some_and(|p| p >= *e) {
                return Err(Error::malformed(None, "edges must be sorted and unique"));
            }
            prev = Some(*e);
            edges.push((i, j));
        }
        g.adjacency = Csr::from_edges(n, &edges);
        Ok(g)
    }

    pub fn read(path: &Path) -> Result<CellGraph> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::MalformedInput { record, message } => Error::MalformedInput {
                record,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        io::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;

    fn cell(id: u64, x: f64, y: f64, class: Option<CellClass>) -> CellRecord {
        CellRecord {
            id,
            centroid: [x, y],
            contour: geometry::ellipse_polygon([x, y], 3.0, 2.0, 0.0, 6),
            class,
            confidence: 1.0,
        }
    }

    fn feats(n: usize) -> Vec<NodeFeatureVector> {
        (0..n)
            .map(|i| NodeFeatureVector {
                morphology: [i as f64; 7],
                texture: [0.5; 7],
            })
            .collect()
    }

    #[test]
    fn three_points_one_edge() {
        let e = build_edges(&[[0.0, 0.0], [30.0, 0.0], [100.0, 0.0]], EdgeRule::new(50.0).unwrap());
        assert_eq!(e, vec![(0, 1)]);
        assert!(build_edges(&[[1.0, 1.0]], EdgeRule::default()).is_empty());
    }

    #[test]
    fn strict_threshold_and_duplicates() {
        let e = build_edges(&[[0.0, 0.0], [50.0, 0.0], [0.0, 0.0]], EdgeRule::new(50.0).unwrap());
        assert_eq!(e, vec![(0, 2)]);
    }

    #[test]
    fn negative_coordinates() {
        let e = build_edges(&[[-10.0, -10.0], [10.0, 10.0]], EdgeRule::new(50.0).unwrap());
        assert_eq!(e, vec![(0, 1)]);
    }

    #[test]
    fn labels_follow_classes() {
        let cells = vec![
            cell(1, 0.0, 0.0, Some(CellClass::EpithelialTumor)),
            cell(2, 10.0, 0.0, Some(CellClass::EpithelialHealthy)),
            cell(3, 20.0, 0.0, Some(CellClass::Stromal)),
        ];
        let g = assemble_graph(&cells, &feats(3), EdgeRule::default()).unwrap();
        assert_eq!(g.labels(), vec![Some(1), Some(0), None]);
        assert!(g.adjacency.is_valid_symmetric());
    }

    #[test]
    fn assemble_errors_and_empty() {
        assert!(matches!(
            assemble_graph(&[cell(1, 0.0, 0.0, None)], &[], EdgeRule::default()),
            Err(Error::LengthMismatch(_))
        ));
        let g = assemble_graph(&[], &[], EdgeRule::default()).unwrap();
        assert_eq!(g.num_nodes(), 0);
    }

    #[test]
    fn node_row_layout() {
        let cells = vec![cell(9, 3.0, 4.0, Some(CellClass::Lymphocyte))];
        let g = assemble_graph(&cells, &feats(1), EdgeRule::default()).unwrap();
        let row = g.node_row(0);
        assert_eq!(row.len(), 22);
        assert_eq!(&row[14..20], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&row[20..], &[3.0, 4.0]);
    }

    #[test]
    fn cleanup_rules() {
        let cells = vec![
            cell(1, 0.0, 0.0, Some(CellClass::Stromal)),
            cell(2, 10.0, 0.0, None),
            cell(3, 20.0, 0.0, Some(CellClass::Lymphocyte)),
            cell(4, 500.0, 0.0, Some(CellClass::EpithelialTumor)),
            cell(5, 900.0, 0.0, Some(CellClass::Stromal)),
            // epithelial whose only neighbor is unclassified becomes isolated
            cell(6, 2000.0, 0.0, Some(CellClass::EpithelialHealthy)),
            cell(7, 2030.0, 0.0, None),
        ];
        let g = assemble_graph(&cells, &feats(7), EdgeRule::default()).unwrap();
        let (c, map) = cleanup_graph(&g);
        assert_eq!(c.node_ids, vec![1, 3, 5]);
        assert_eq!(c.num_edges(), 1);
        assert_eq!(map.new_to_old, vec![0, 2, 4]);
        assert_eq!(map.old_to_new[1], None);
        let (again, _) = cleanup_graph(&c);
        assert_eq!(again, c);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let cells = vec![
            cell(1, 0.0, 0.0, Some(CellClass::EpithelialTumor)),
            cell(2, 10.0, 0.0, Some(CellClass::Granulocyte)),
        ];
        let g = assemble_graph(&cells, &feats(2), EdgeRule::default()).unwrap();
        let back = CellGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let bad = g.to_json().replace("\"edges\":[[0,1]]", "\"edges\":[[1,0]]");
        assert!(CellGraph::from_json(&bad).is_err());
        let bad_label = g.to_json().replacen("\"label\":1", "\"label\":0", 1);
        assert!(CellGraph::from_json(&bad_label).is_err());
    }
}
