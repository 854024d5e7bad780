mod common;

use common::oracles::{brute_grafr, random_instance, top_k};
use ctcn_core::features::FeatureMatrix;
use ctcn_core::grafr::{build_graph, grafr_apply, reconstruct, select_hidden};
use ctcn_core::rng;
use proptest::prelude::*;

#[test]
fn hundred_instances_match_brute_force_exactly() {
    for seed in 0..100 {
        let x = random_instance(seed);
        let b = brute_grafr(&x);
        let g = build_graph(&x).unwrap();
        let n = x.rows();
        for u in 0..n {
            assert_eq!(g.mean_similarity(u), b.mean[u], "seed {seed} node {u}");
            for v in 0..n {
                assert_eq!(g.distance(u, v), b.dist[u][v]);
                if u != v {
                    assert_eq!(g.similarity(u, v), b.sim[u][v]);
                }
            }
        }
        let r = reconstruct(&g);
        for u in 0..n {
            assert_eq!(r.row(u), b.recon[u].as_slice(), "seed {seed} node {u}");
            for j in 0..x.cols() {
                let lo = (0..n).filter(|&v| v != u).map(|v| x.get(v, j)).fold(f64::INFINITY, f64::min);
                let hi = (0..n).filter(|&v| v != u).map(|v| x.get(v, j)).fold(f64::NEG_INFINITY, f64::max);
                assert!(r.get(u, j) >= lo - 1e-12 && r.get(u, j) <= hi + 1e-12);
            }
        }
        let k = 1 + (seed as usize % n);
        let expect = top_k(&b.mean, k);
        let h = select_hidden(&g, k).unwrap();
        assert_eq!(h.indices, expect, "seed {seed}");
        assert_eq!(h.scores, expect.iter().map(|&i| b.mean[i]).collect::<Vec<_>>());
    }
}

#[test]
fn apply_concatenates_then_reconstructs() {
    let g = random_instance(200);
    let s = random_instance(201);
    let n = g.rows().min(s.rows());
    let idx: Vec<usize> = (0..n).collect();
    let (g, s) = (g.select_rows(&idx), s.select_rows(&idx));
    let out = grafr_apply(&g, &s, None).unwrap();
    assert_eq!(out.features.cols(), g.cols() + s.cols());
    let joined = g.concat_columns(&s).unwrap();
    assert_eq!(out.features, reconstruct(&build_graph(&joined).unwrap()));
    assert_eq!(out.hidden.indices.len(), n.div_ceil(10));
}

#[test]
fn duplicated_rows_keep_reconstructions_up_to_epsilon() {
    let x = FeatureMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0], vec![4.0, 4.0]]).unwrap();
    let doubled = x.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]);
    let a = reconstruct(&build_graph(&x).unwrap());
    let b = reconstruct(&build_graph(&doubled).unwrap());
    // each doubled node sees its own twin at distance 0, which dominates
    for u in 0..4 {
        for j in 0..2 {
            assert!((b.get(u, j) - x.get(u, j)).abs() < 1e-9);
            assert!((b.get(u + 4, j) - x.get(u, j)).abs() < 1e-9);
        }
    }
    assert_ne!(a, b.select_rows(&[0, 1, 2, 3]));
}

fn matrix() -> impl Strategy<Value = FeatureMatrix> {
    (2usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-10.0f64..10.0, n * d).prop_map(move |v| FeatureMatrix::new(n, d, v).unwrap())
    })
}

proptest! {
    #[test]
    fn distances_are_a_metric(x in matrix()) {
        let g = build_graph(&x).unwrap();
        let n = g.len();
        for u in 0..n {
            prop_assert_eq!(g.distance(u, u), 0.0);
            for v in 0..n {
                prop_assert_eq!(g.distance(u, v), g.distance(v, u));
                prop_assert!(g.distance(u, v) >= 0.0);
                for w in 0..n {
                    prop_assert!(g.distance(u, w) <= g.distance(u, v) + g.distance(v, w) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn reconstruction_weights_form_a_convex_combination(x in matrix()) {
        let g = build_graph(&x).unwrap();
        let n = g.len();
        for u in 0..n {
            let total: f64 = (0..n).filter(|&v| v != u).map(|v| g.similarity(u, v)).sum();
            let wsum: f64 = (0..n).filter(|&v| v != u).map(|v| g.similarity(u, v) / total).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_is_permutation_equivariant(x in matrix(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..x.rows()).collect();
        perm.shuffle(&mut rng::stream(seed, "perm", 0));
        let a = reconstruct(&build_graph(&x).unwrap());
        let b = reconstruct(&build_graph(&x.select_rows(&perm)).unwrap());
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..x.cols() {
                prop_assert!((b.get(i, j) - a.get(src, j)).abs() <= 1e-9 * (1.0 + a.get(src, j).abs()));
            }
        }
    }

    #[test]
    fn hidden_set_is_sorted_and_sized(x in matrix(), k in 1usize..12) {
        let g = build_graph(&x).unwrap();
        let k = k.min(g.len());
        let h = select_hidden(&g, k).unwrap();
        prop_assert_eq!(h.indices.len(), k);
        for w in h.indices.windows(2).zip(h.scores.windows(2)) {
            prop_assert!(w.1[0] > w.1[1] || (w.1[0] == w.1[1] && w.0[0] < w.0[1]));
        }
    }
}
