use mgcn_core::graph::{
    build_hop_partition, build_multigraph, hop_distances, multigraph_for, normalize, read_matrix_text,
    write_matrix_text,
};
use mgcn_core::{skeleton_preset, Error, SkeletonGraph};
use ndarray::Array2;
use proptest::prelude::*;

/// Random spanning tree plus a few extra edges.
fn connected_graph() -> impl Strategy<Value = SkeletonGraph> {
    (2usize..=12)
        .prop_flat_map(|v| {
            let parents: Vec<_> = (1..v).map(|i| 0..i).collect();
            (Just(v), parents, prop::collection::vec((0..v, 0..v), 0..4))
        })
        .prop_map(|(v, parents, extra)| {
            let mut edges: Vec<(usize, usize)> = parents.into_iter().enumerate().map(|(i, p)| (p, i + 1)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            SkeletonGraph::new(v, edges).unwrap()
        })
}

fn floyd_warshall(g: &SkeletonGraph) -> Vec<Vec<usize>> {
    let v = g.joint_count();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; v]; v];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (a, b) in g.edges() {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..v {
        for i in 0..v {
            for j in 0..v {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration on A².
fn spectral_radius(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let a2 = a.dot(a);
    let mut x = ndarray::Array1::from_shape_fn(n, |i| 1.0 + (i as f64 * 0.7).sin() * 0.5);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let y = a2.dot(&x);
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = x.dot(&y) / x.dot(&x);
        x = y / norm;
    }
    lambda.max(0.0).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hop_distances_match_floyd_warshall(g in connected_graph()) {
        let d = hop_distances(&g).unwrap();
        let oracle = floyd_warshall(&g);
        for i in 0..g.joint_count() {
            for j in 0..g.joint_count() {
                prop_assert_eq!(d[[i, j]], oracle[i][j]);
            }
        }
    }

    #[test]
    fn partitions_are_disjoint_and_cover_the_ball(g in connected_graph(), max_hop in 0usize..5) {
        let p = build_hop_partition(&g, max_hop).unwrap();
        let oracle = floyd_warshall(&g);
        prop_assert_eq!(p.layers.len(), max_hop + 1);
        let combined = p.combined();
        for i in 0..g.joint_count() {
            for j in 0..g.joint_count() {
                let hits: Vec<usize> = (0..=max_hop).filter(|&k| p.layers[k][[i, j]] != 0.0).collect();
                if oracle[i][j] <= max_hop {
                    prop_assert_eq!(hits, vec![oracle[i][j]]);
                    prop_assert_eq!(combined[[i, j]], 1.0);
                } else {
                    prop_assert!(hits.is_empty());
                    prop_assert_eq!(combined[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn normalized_operators_are_symmetric_and_contractive(
        g in connected_graph(), frames in 1usize..5, span in 0usize..3, max_hop in 0usize..4,
    ) {
        let mg = multigraph_for(&g, frames, span, max_hop).unwrap();
        for op in mg.operators() {
            prop_assert_eq!(op, &op.t().to_owned());
            prop_assert!(spectral_radius(op) <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn operators_are_block_toeplitz(g in connected_graph(), frames in 1usize..6, span in 0usize..4, max_hop in 0usize..3) {
        let p = build_hop_partition(&g, max_hop).unwrap();
        let mg = build_multigraph(&p, frames, span).unwrap();
        let v = g.joint_count();
        for (k, raw) in mg.raw().iter().enumerate() {
            for t1 in 0..frames {
                for t2 in 0..frames {
                    let block = raw.slice(ndarray::s![t1 * v..(t1 + 1) * v, t2 * v..(t2 + 1) * v]);
                    if t1.abs_diff(t2) <= span {
                        prop_assert_eq!(block, p.layers[k].view());
                    } else {
                        prop_assert!(block.iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn relabeling_permutes_partitions(g in connected_graph(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let v = g.joint_count();
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let h = g.relabel(&perm).unwrap();
        let (pg, ph) = (build_hop_partition(&g, 3).unwrap(), build_hop_partition(&h, 3).unwrap());
        for k in 0..=3 {
            for i in 0..v {
                for j in 0..v {
                    prop_assert_eq!(pg.layers[k][[i, j]], ph.layers[k][[perm[i], perm[j]]]);
                }
            }
        }
    }
}

#[test]
fn regular_graph_normalizes_to_adjacency_over_degree() {
    // Ring of 6: every vertex has 2 one-hop and 2 two-hop neighbours.
    let g = SkeletonGraph::new(6, (0..6).map(|i| (i, (i + 1) % 6))).unwrap();
    let p = build_hop_partition(&g, 2).unwrap();
    for layer in &p.layers[1..] {
        let n = normalize(layer).unwrap();
        for (a, b) in n.iter().zip(layer.iter()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn chain_five_frames_span_one_is_block_tridiagonal() {
    let g = skeleton_preset("chain_4").unwrap();
    let mg = multigraph_for(&g, 5, 1, 2).unwrap();
    assert_eq!(mg.node_count(), 20);
    for raw in mg.raw() {
        for t1 in 0..5usize {
            for t2 in 0..5usize {
                let nonzero = raw
                    .slice(ndarray::s![t1 * 4..t1 * 4 + 4, t2 * 4..t2 * 4 + 4])
                    .iter()
                    .any(|&x| x != 0.0);
                assert_eq!(nonzero, t1.abs_diff(t2) <= 1, "block ({t1},{t2})");
            }
        }
    }
}

#[test]
fn disconnected_and_invalid_skeletons() {
    let g = SkeletonGraph::new(4, [(0, 1), (2, 3)]).unwrap();
    assert!(matches!(hop_distances(&g), Err(Error::Disconnected { .. })));
    assert!(SkeletonGraph::new(3, [(0, 3)]).is_err());
    assert!(SkeletonGraph::new(3, [(1, 1)]).is_err());
    assert!(matches!(skeleton_preset("blob"), Err(Error::UnknownPreset { .. })));
}

#[test]
fn h36m22_preset_is_a_connected_tree() {
    let g = skeleton_preset("h36m22").unwrap();
    assert_eq!(g.joint_count(), 22);
    assert_eq!(g.edge_count(), 21);
    assert!(hop_distances(&g).is_ok());
}

#[test]
fn matrix_text_round_trip() {
    let g = skeleton_preset("chain_3").unwrap();
    let mg = multigraph_for(&g, 3, 1, 1).unwrap();
    for k in 0..mg.partition_count() {
        let mut buf = Vec::new();
        write_matrix_text(&mut buf, mg.header(k), &mg.operators()[k]).unwrap();
        let (header, m) = read_matrix_text(&buf[..]).unwrap();
        assert_eq!(header, mg.header(k));
        assert_eq!(m, mg.operators()[k]);
    }
    assert!(read_matrix_text(&b"3 3 1 1 0\n1 2\n"[..]).is_err());
}
