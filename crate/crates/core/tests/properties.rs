use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellgraph::eval::{make_folds, Dataset, Protocol};
use cellgraph::geometry::{ellipse_polygon, on_boundary, ray_cast_inside, winding_number, Point};
use cellgraph::graph::{build_edges, cleanup_graph, CellGraph, Csr, EdgeRule};
use cellgraph::ingest::{parse_segmentation_str, serialize_segmentation};
use cellgraph::models::{predict, AttentionMode, ModelHyper, ModelInput, ModelKind, ModelParams};
use cellgraph::numerics::Tensor2D;
use cellgraph::simplify::bfs_mask;
use cellgraph::{CellClass, CellRecord};

fn random_graph(seed: u64, n: usize) -> CellGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).sqrt() * 25.0 + 1.0;
    let coords: Vec<Point> = (0..n)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side)])
        .collect();
    let rule = EdgeRule::new(rng.random_range(15.0..50.0)).unwrap();
    CellGraph {
        node_ids: (0..n as u64).map(|i| 10 * i + 7).collect(),
        features: (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect(),
        classes: (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    None
                } else {
                    CellClass::from_code(rng.random_range(0..6))
                }
            })
            .collect(),
        adjacency: Csr::from_edges(n, &build_edges(&coords, rule)),
        coords,
        r0: rule.r0,
    }
}

/// Star-shaped, hence simple, polygon around (50, 50).
fn star_polygon() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(5.0..40.0f64, 3..24).prop_map(|radii| {
        let n = radii.len();
        radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                [50.0 + r * a.cos(), 50.0 + r * a.sin()]
            })
            .collect()
    })
}

fn brute_force_edges(pts: &[Point], r0: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]) < r0 {
                out.push((i, j));
            }
        }
    }
    out
}

fn record_strategy() -> impl Strategy<Value = (Point, f64, f64, f64, Option<u8>, f64)> {
    (
        (0.0..5000.0f64, 0.0..5000.0f64).prop_map(|(x, y)| [x, y]),
        2.0..12.0f64,
        0.4..1.0f64,
        0.0..std::f64::consts::PI,
        prop::option::of(0u8..5),
        0.0..=1.0f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn winding_agrees_with_ray_casting(poly in star_polygon(), x in 0.0..100.0f64, y in 0.0..100.0f64) {
        prop_assume!(!on_boundary([x, y], &poly));
        prop_assert_eq!(winding_number([x, y], &poly) != 0, ray_cast_inside([x, y], &poly));
    }

    #[test]
    fn segmentation_parse_inverts_serialize(cells in prop::collection::vec(record_strategy(), 0..40)) {
        let records: Vec<CellRecord> = cells
            .into_iter()
            .enumerate()
            .map(|(i, (c, a, ratio, angle, class, confidence))| CellRecord {
                id: i as u64 * 5 + 1,
                centroid: c,
                contour: ellipse_polygon(c, a, a * ratio, angle, 16),
                class: class.and_then(|k| CellClass::from_code(k as i64)),
                confidence,
            })
            .collect();
        let text = serialize_segmentation(&records);
        prop_assert_eq!(parse_segmentation_str(&text).unwrap(), records);
    }

    #[test]
    fn graph_json_round_trip(seed in any::<u64>(), n in 0usize..60) {
        let g = random_graph(seed, n);
        prop_assert_eq!(CellGraph::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn grid_edges_match_brute_force(
        pts in prop::collection::vec((0.0..300.0f64, 0.0..300.0f64).prop_map(|(x, y)| [x.round(), y.round()]), 0..200),
        r0 in 1u32..80,
    ) {
        let r0 = r0 as f64;
        prop_assert_eq!(build_edges(&pts, EdgeRule::new(r0).unwrap()), brute_force_edges(&pts, r0));
    }

    #[test]
    fn cleanup_is_idempotent(seed in any::<u64>(), n in 0usize..150) {
        let (once, _) = cleanup_graph(&random_graph(seed, n));
        let (twice, map) = cleanup_graph(&once);
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(map.new_to_old, (0..once.num_nodes()).collect::<Vec<_>>());
    }

    #[test]
    fn hop_masks_grow_with_k(seed in any::<u64>(), n in 1usize..200) {
        let g = random_graph(seed, n);
        let anchors = g.epithelial_nodes();
        let mut prev = bfs_mask(&g.adjacency, &anchors, 0);
        prop_assert!((0..n).all(|i| prev[i] == anchors.contains(&i)));
        for k in 1..6 {
            let next = bfs_mask(&g.adjacency, &anchors, k);
            prop_assert!(prev.iter().zip(&next).all(|(&a, &b)| !a || b));
            prev = next;
        }
    }

    #[test]
    fn folds_are_disjoint_and_cover(seed in any::<u64>(), n in 30usize..200, graphs in 3usize..12, n_folds in 2usize..5) {
        let single = Dataset::single(random_graph(seed, n));
        if let Ok(split) = make_folds(&single, Protocol::RandomNode, seed, n_folds) {
            let epi = single.graphs[0].epithelial_nodes();
            let mut seen = BTreeSet::new();
            for f in 0..n_folds {
                let (train, test) = &split.tasks_for(&single, f)[0];
                prop_assert!(train.iter().all(|i| !test.contains(i)));
                prop_assert_eq!(train.len() + test.len(), epi.len());
                seen.extend(test.iter().copied());
            }
            prop_assert_eq!(seen.into_iter().collect::<Vec<_>>(), epi);
            let sizes = split.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        let many = Dataset {
            graphs: (0..graphs).map(|i| random_graph(seed ^ i as u64, 20)).collect(),
            patients: Some((0..graphs).map(|i| format!("p{}", i % 4)).collect()),
        };
        let split = make_folds(&many, Protocol::Subgraph, seed, n_folds.min(graphs)).unwrap();
        prop_assert_eq!(split.folds.len(), graphs);
        prop_assert!(split.folds.iter().all(|&f| f < split.n_folds));
        if let Ok(split) = make_folds(&many, Protocol::PatientGrouped, seed, 3) {
            let patients = many.patients.as_ref().unwrap();
            for i in 0..graphs {
                for j in 0..graphs {
                    if patients[i] == patients[j] {
                        prop_assert_eq!(split.folds[i], split.folds[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn models_are_permutation_equivariant(seed in any::<u64>(), n in 1usize..40, kind_idx in 0usize..4) {
        let kind = ModelKind::ALL[kind_idx];
        let g = random_graph(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor2D::from_fn(n, 3, |i, j| g.features[i][j]);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut inv = vec![0; n];
        perm.iter().enumerate().for_each(|(new, &old)| inv[old] = new);
        let edges: Vec<(usize, usize)> = g.adjacency.edges().into_iter().map(|(a, b)| (inv[a], inv[b])).collect();
        let hyper = ModelHyper { hidden: 8, ..ModelHyper::new(kind, 3) };
        let params = ModelParams::init(hyper, seed).unwrap();
        let run = |x: Tensor2D, adj: &Csr| {
            predict(&params, &ModelInput::new(&hyper, x, adj).unwrap(), AttentionMode::Linear).unwrap()
        };
        let base = run(x.clone(), &g.adjacency);
        let permuted = run(x.select_rows(&perm), &Csr::from_edges(n, &edges));
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((permuted[new] - base[old]).abs() < 1e-10);
        }
    }
}
