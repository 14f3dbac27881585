//! Anchor-based k-max-hops simplification and K-means spatial splitting.
//!
//! A node is kept when its geodesic distance to the nearest anchor node is at
//! most `k`. Anchors are the nodes whose class is selected, so with the
//! `A⁰ = I` convention every anchor is always kept. The breadth-first route
//! is the production path; the boolean adjacency-power route is kept as an
//! independent check for graphs up to [`MATPOW_MAX_NODES`] nodes.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::graph::{CellGraph, Csr, IndexMap, NODE_ROW_WIDTH};
use crate::ingest::CellClass;

pub const MATPOW_MAX_NODES: usize = 5_000;

/// Class-selection vector over the fixed class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorSelection {
    pub select: [bool; 6],
}

impl Default for AnchorSelection {
    fn default() -> Self {
        Self::epithelial()
    }
}

impl AnchorSelection {
    pub fn epithelial() -> Self {
        let mut select = [false; 6];
        select[CellClass::EpithelialHealthy as usize] = true;
        select[CellClass::EpithelialTumor as usize] = true;
        AnchorSelection { select }
    }

    pub fn of(classes: &[CellClass]) -> Self {
        let mut select = [false; 6];
        for &c in classes {
            select[c as usize] = true;
        }
        AnchorSelection { select }
    }

    /// Accepts `epithelial`, or a comma-separated list of class names / codes.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim() == "epithelial" {
            return Ok(Self::epithelial());
        }
        let mut classes = Vec::new();
        for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let class = tok
                .parse::<i64>()
                .ok()
                .and_then(CellClass::from_code)
                .or_else(|| CellClass::ALL.into_iter().find(|c| c.name() == tok))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown anchor class \"{tok}\"")))?;
            classes.push(class);
        }
        Ok(Self::of(&classes))
    }

    /// Anchor indicator `a_i = [(C s)_i > 0]`.
    pub fn indicator(&self, g: &CellGraph) -> Vec<bool> {
        g.classes
            .iter()
            .map(|c| c.is_some_and(|c| self.select[c as usize]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopMethod {
    Bfs,
    MatPow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMask {
    pub mask: Vec<bool>,
    pub k: usize,
    pub anchors: Vec<usize>,
}

impl HopMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn khop_mask(g: &CellGraph, sel: &AnchorSelection, k: usize, method: HopMethod) -> Result<HopMask> {
    let indicator = sel.indicator(g);
    let anchors: Vec<usize> = (0..indicator.len()).filter(|&i| indicator[i]).collect();
    if anchors.is_empty() {
        return Err(Error::NoAnchors);
    }
    let mask = match method {
        HopMethod::Bfs => bfs_mask(&g.adjacency, &anchors, k),
        HopMethod::MatPow => {
            if g.num_nodes() > MATPOW_MAX_NODES {
                return Err(Error::InvalidConfig(format!(
                    "matrix-power masks are limited to {MATPOW_MAX_NODES} nodes"
                )));
            }
            matpow_mask(&g.adjacency, &indicator, k)
        }
    };
    Ok(HopMask { mask, k, anchors })
}

/// Multi-source BFS from all anchors with depth cap `k`.
pub fn bfs_mask(adj: &Csr, anchors: &[usize], k: usize) -> Vec<bool> {
    let n = adj.num_nodes();
    let mut depth = vec![usize::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for &a in anchors {
        if depth[a] == usize::MAX {
            depth[a] = 0;
            queue.push_back(a);
        }
    }
    while let Some(i) = queue.pop_front() {
        if depth[i] == k {
            continue;
        }
        for &j in adj.neighbors(i) {
            if depth[j] == usize::MAX {
                depth[j] = depth[i] + 1;
                queue.push_back(j);
            }
        }
    }
    depth.into_iter().map(|d| d <= k).collect()
}

/// Dense bit-matrix with one `u64`-packed row per node.
struct BitMatrix {
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn identity(n: usize) -> Self {
        let words = n.div_ceil(64);
        let mut bits = vec![0u64; n * words];
        for i in 0..n {
            bits[i * words + i / 64] |= 1 << (i % 64);
        }
        BitMatrix { words, bits }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }
}

/// `m_i = [((Σ_{q≤k} A^q) a)_i > 0]` with boolean-semiring powers.
pub fn matpow_mask(adj: &Csr, anchor_indicator: &[bool], k: usize) -> Vec<bool> {
    let n = adj.num_nodes();
    let mut power = BitMatrix::identity(n);
    let mut reach = power.bits.clone();
    let words = power.words;
    for _ in 0..k {
        // A^q = A · A^{q-1}, row i is the OR of the rows of its neighbors
        let mut next = vec![0u64; n * words];
        next.par_chunks_mut(words.max(1)).enumerate().for_each(|(i, row)| {
            for &j in adj.neighbors(i) {
                for (dst, src) in row.iter_mut().zip(power.row(j)) {
                    *dst |= *src;
                }
            }
        });
        for (r, b) in reach.iter_mut().zip(&next) {
            *r |= *b;
        }
        power.bits = next;
    }
    let mut anchor_bits = vec![0u64; words];
    for (j, &a) in anchor_indicator.iter().enumerate() {
        if a {
            anchor_bits[j / 64] |= 1 << (j % 64);
        }
    }
    (0..n)
        .map(|i| {
            reach[i * words..(i + 1) * words]
                .iter()
                .zip(&anchor_bits)
                .any(|(r, a)| r & a != 0)
        })
        .collect()
}

/// Masked induced subgraph: node count unchanged, masked-out rows and
/// columns zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGraph {
    pub mask: Vec<bool>,
    /// `M A M`
    pub adjacency: Csr,
    /// `M H`, one 22-wide row per node.
    pub rows: Vec<[f64; NODE_ROW_WIDTH]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgraphMode {
    Masked,
    Compact,
}

#[derive(Debug, Clone)]
pub enum InducedSubgraph {
    Masked(MaskedGraph),
    Compact { graph: CellGraph, map: IndexMap },
}

pub fn induced_subgraph(g: &CellGraph, m: &HopMask, mode: SubgraphMode) -> InducedSubgraph {
    assert_eq!(m.mask.len(), g.num_nodes(), "mask length must equal node count");
    match mode {
        SubgraphMode::Masked => InducedSubgraph::Masked(masked_subgraph(g, &m.mask)),
        SubgraphMode::Compact => {
            let (graph, map) = g.retain(&m.mask);
            InducedSubgraph::Compact { graph, map }
        }
    }
}

pub fn masked_subgraph(g: &CellGraph, mask: &[bool]) -> MaskedGraph {
    let edges: Vec<(usize, usize)> = g
        .adjacency
        .edges()
        .into_iter()
        .filter(|&(i, j)| mask[i] && mask[j])
        .collect();
    let rows = (0..g.num_nodes())
        .map(|i| if mask[i] { g.node_row(i) } else { [0.0; NODE_ROW_WIDTH] })
        .collect();
    MaskedGraph {
        mask: mask.to_vec(),
        adjacency: Csr::from_edges(g.num_nodes(), &edges),
        rows,
    }
}

/// Places a compact subgraph back into the original index space.
pub fn reembed(compact: &CellGraph, map: &IndexMap) -> MaskedGraph {
    let n = map.old_to_new.len();
    let mask: Vec<bool> = map.old_to_new.iter().map(Option::is_some).collect();
    let edges: Vec<(usize, usize)> = compact
        .adjacency
        .edges()
        .into_iter()
        .map(|(i, j)| (map.new_to_old[i], map.new_to_old[j]))
        .collect();
    let mut rows = vec![[0.0; NODE_ROW_WIDTH]; n];
    for (new, &old) in map.new_to_old.iter().enumerate() {
        rows[old] = compact.node_row(new);
    }
    MaskedGraph {
        mask,
        adjacency: Csr::from_edges(n, &edges),
        rows,
    }
}

/// Spatial K-means result over node coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Point>,
}

impl Partition {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

#[derive(Serialize, Deserialize)]
pub struct PartitionFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl From<&Partition> for PartitionFile {
    fn from(p: &Partition) -> Self {
        PartitionFile {
            k: p.k,
            seed: p.seed,
            assignment: p.assignment.clone(),
        }
    }
}

pub const KMEANS_MAX_ITERS: usize = 300;

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: Point, centroids: &[Point]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, &q) in centroids.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn kmeans_pp(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // rounding can leave `pick` on a zero-weight tail point
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next];
        centroids.push(c);
        for (w, &p) in d2.iter_mut().zip(points) {
            *w = w.min(dist2(p, c));
        }
    }
    centroids
}

fn recompute_centroids(points: &[Point], assignment: &[usize], k: usize, centroids: &mut [Point]) {
    let mut sums = vec![[0.0f64; 3]; k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a][0] += p[0];
        sums[a][1] += p[1];
        sums[a][2] += 1.0;
    }
    for (c, s) in centroids.iter_mut().zip(&sums) {
        if s[2] > 0.0 {
            *c = [s[0] / s[2], s[1] / s[2]];
        }
    }
}

/// Moves the point farthest from its centroid (among clusters with at least
/// two members) into each empty cluster.
fn reseed_empty(points: &[Point], assignment: &mut [usize], centroids: &mut [Point]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] >= 2)
            .max_by(|&i, &j| {
                let di = dist2(points[i], centroids[assignment[i]]);
                let dj = dist2(points[j], centroids[assignment[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("K <= N guarantees a donor");
        sizes[assignment[donor]] -= 1;
        assignment[donor] = c;
        sizes[c] = 1;
        centroids[c] = points[donor];
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments are
/// stable or after [`KMEANS_MAX_ITERS`] rounds; every cluster is non-empty.
pub fn kmeans(points: &[Point], k: usize, seed: u64) -> Result<Partition> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut next: Vec<usize> = points.par_iter().map(|&p| nearest(p, &centroids)).collect();
        reseed_empty(points, &mut next, &mut centroids);
        if next == assignment {
            break;
        }
        assignment = next;
        recompute_centroids(points, &assignment, k, &mut centroids);
    }
    recompute_centroids(points, &assignment, k, &mut centroids);
    Ok(Partition {
        assignment,
        k,
        seed,
        centroids,
    })
}

pub fn kmeans_split(g: &CellGraph, k: usize, seed: u64) -> Result<Partition> {
    kmeans(&g.coords, k, seed)
}

/// One induced subgraph per cluster; cross-cluster edges are dropped.
pub fn extract_partition_subgraphs(g: &CellGraph, p: &Partition) -> Vec<(CellGraph, IndexMap)> {
    assert_eq!(p.assignment.len(), g.num_nodes(), "partition must cover the graph");
    (0..p.k)
        .map(|c| {
            let keep: Vec<bool> = p.assignment.iter().map(|&a| a == c).collect();
            g.retain(&keep)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NUM_FEATURES;

    fn graph(classes: Vec<Option<CellClass>>, edges: &[(usize, usize)]) -> CellGraph {
        let n = classes.len();
        CellGraph {
            node_ids: (0..n as u64).collect(),
            coords: (0..n).map(|i| [i as f64 * 10.0, 0.0]).collect(),
            features: (0..n).map(|i| [i as f64 + 1.0; NUM_FEATURES]).collect(),
            classes,
            adjacency: Csr::from_edges(n, edges),
            r0: 50.0,
        }
    }

    fn path4() -> CellGraph {
        use CellClass::*;
        graph(
            vec![Some(EpithelialTumor), Some(Stromal), Some(Stromal), Some(Lymphocyte)],
            &[(0, 1), (1, 2), (2, 3)],
        )
    }

    #[test]
    fn one_hop_on_path() {
        let m = khop_mask(&path4(), &AnchorSelection::epithelial(), 1, HopMethod::Bfs).unwrap();
        assert_eq!(m.mask, vec![true, true, false, false]);
        assert_eq!(m.anchors, vec![0]);
    }

    #[test]
    fn zero_hops_is_anchor_set() {
        for method in [HopMethod::Bfs, HopMethod::MatPow] {
            let m = khop_mask(&path4(), &AnchorSelection::epithelial(), 0, method).unwrap();
            assert_eq!(m.mask, vec![true, false, false, false]);
        }
    }

    #[test]
    fn no_anchor_error() {
        let g = graph(vec![Some(CellClass::Stromal)], &[]);
        assert!(matches!(
            khop_mask(&g, &AnchorSelection::epithelial(), 2, HopMethod::Bfs),
            Err(Error::NoAnchors)
        ));
    }

    #[test]
    fn anchor_selection_parsing() {
        assert_eq!(AnchorSelection::parse("epithelial").unwrap(), AnchorSelection::epithelial());
        assert_eq!(
            AnchorSelection::parse("4,epithelial_tumor").unwrap(),
            AnchorSelection::epithelial()
        );
        assert!(AnchorSelection::parse("nonsense").is_err());
    }

    #[test]
    fn identity_and_zero_masks() {
        let g = path4();
        let all = HopMask { mask: vec![true; 4], k: 0, anchors: vec![] };
        match induced_subgraph(&g, &all, SubgraphMode::Compact) {
            InducedSubgraph::Compact { graph, .. } => assert_eq!(graph, g),
            _ => unreachable!(),
        }
        let none = HopMask { mask: vec![false; 4], k: 0, anchors: vec![] };
        match induced_subgraph(&g, &none, SubgraphMode::Masked) {
            InducedSubgraph::Masked(mg) => {
                assert_eq!(mg.adjacency.num_edges(), 0);
                assert!(mg.rows.iter().all(|r| r.iter().all(|&v| v == 0.0)));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn path_with_gap() {
        use CellClass::*;
        let g = graph(vec![Some(Stromal), Some(Stromal), Some(Stromal)], &[(0, 1), (1, 2)]);
        let m = HopMask { mask: vec![true, false, true], k: 0, anchors: vec![] };
        let InducedSubgraph::Compact { graph: c, map } = induced_subgraph(&g, &m, SubgraphMode::Compact) else {
            unreachable!()
        };
        assert_eq!((c.num_nodes(), c.num_edges()), (2, 0));
        let InducedSubgraph::Masked(mg) = induced_subgraph(&g, &m, SubgraphMode::Masked) else {
            unreachable!()
        };
        assert_eq!(mg.adjacency.degree(1), 0);
        assert!(mg.rows[1].iter().all(|&v| v == 0.0));
        assert_eq!(reembed(&c, &map), mg);
    }

    #[test]
    fn kmeans_edge_cases() {
        let pts: Vec<Point> = (0..20).map(|i| [(i * 7 % 13) as f64, (i * 3 % 11) as f64]).collect();
        let one = kmeans(&pts, 1, 3).unwrap();
        assert!(one.assignment.iter().all(|&a| a == 0));
        let all = kmeans(&pts, pts.len(), 3).unwrap();
        let mut seen = all.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), pts.len());
        assert!(matches!(kmeans(&pts, 0, 1), Err(Error::InvalidK { .. })));
        assert!(matches!(kmeans(&pts, 21, 1), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn kmeans_duplicates_stay_nonempty() {
        let pts = vec![[1.0, 1.0]; 6];
        let p = kmeans(&pts, 3, 0).unwrap();
        assert!(p.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts: Vec<Point> = (0..200).map(|i| [((i * 37) % 101) as f64, ((i * 53) % 97) as f64]).collect();
        assert_eq!(kmeans(&pts, 7, 11).unwrap(), kmeans(&pts, 7, 11).unwrap());
    }

    #[test]
    fn single_cluster_split_is_identity() {
        let g = path4();
        let p = kmeans_split(&g, 1, 0).unwrap();
        let subs = extract_partition_subgraphs(&g, &p);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].0, g);
    }
}
