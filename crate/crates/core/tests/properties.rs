use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use pdl_core::clustering::{dbscan, k_reciprocal_jaccard, pairwise_euclidean, ClusterAssignment, DistanceMatrix};
use pdl_core::data::{generate_synthetic, SynthConfig};
use pdl_core::eval::{evaluate, Meta, DEFAULT_RANKS};
use pdl_core::loss::pdl_loss;
use pdl_core::trainer::{train, LossKind, TrainConfig};
use pdl_core::LrSchedule;

fn points() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0u8..10, 0u8..10), 1..25)
        .prop_map(|v| v.into_iter().map(|(x, y)| (x as f64 / 10.0, y as f64 / 10.0)).collect())
}

fn distances(pts: &[(f64, f64)]) -> Array2<f64> {
    let n = pts.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
    })
}

fn partition(a: &ClusterAssignment, members: impl Fn(usize) -> bool) -> BTreeSet<BTreeSet<usize>> {
    a.clusters()
        .into_iter()
        .map(|c| c.into_iter().filter(|&i| members(i)).collect::<BTreeSet<_>>())
        .filter(|c| !c.is_empty())
        .collect()
}

fn noise(a: &ClusterAssignment) -> BTreeSet<usize> {
    (0..a.len()).filter(|&i| a.labels()[i].is_none()).collect()
}

/// True if some non-core point lies within `eps` of cores in two clusters.
fn has_contested_border(d: &Array2<f64>, a: &ClusterAssignment, eps: f64) -> bool {
    (0..a.len()).filter(|&b| !a.is_core(b)).any(|b| {
        let owners: BTreeSet<usize> = (0..a.len())
            .filter(|&c| a.is_core(c) && d[[c, b]] <= eps)
            .filter_map(|c| a.labels()[c])
            .collect();
        owners.len() > 1
    })
}

proptest! {
    #[test]
    fn dbscan_is_permutation_stable(
        pts in points(),
        eps in 0.05f64..0.5,
        min_pts in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let n = pts.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<(f64, f64)> = perm.iter().map(|&i| pts[i]).collect();

        let d = distances(&pts);
        let original = dbscan(&DistanceMatrix::new(d.clone()).unwrap(), eps, min_pts).unwrap();
        let permuted = dbscan(&DistanceMatrix::new(distances(&shuffled)).unwrap(), eps, min_pts).unwrap();
        let unpermute = |a: &ClusterAssignment, only_core: bool| -> BTreeSet<BTreeSet<usize>> {
            partition(a, |i| !only_core || a.is_core(i))
                .into_iter()
                .map(|c| c.into_iter().map(|i| perm[i]).collect())
                .collect()
        };

        let noise_back: BTreeSet<usize> = noise(&permuted).into_iter().map(|i| perm[i]).collect();
        prop_assert_eq!(noise(&original), noise_back);
        prop_assert_eq!(partition(&original, |i| original.is_core(i)), unpermute(&permuted, true));
        if !has_contested_border(&d, &original, eps) {
            prop_assert_eq!(partition(&original, |_| true), unpermute(&permuted, false));
        }
    }

    #[test]
    fn dbscan_ignores_threshold_preserving_transforms(
        pts in points(),
        pick in 0.0f64..1.0,
        min_pts in 1usize..6,
    ) {
        let d = distances(&pts);
        let mut levels: Vec<f64> = d.iter().copied().filter(|&v| v > 0.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        prop_assume!(levels.len() >= 2);
        let i = ((pick * (levels.len() - 1) as f64) as usize).min(levels.len() - 2);
        let eps = 0.5 * (levels[i] + levels[i + 1]);

        let base = dbscan(&DistanceMatrix::new(d.clone()).unwrap(), eps, min_pts).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| 4.0 * x, f64::sqrt, |x| x * x * x + x];
        for f in transforms {
            let t = dbscan(&DistanceMatrix::new(d.mapv(f)).unwrap(), f(eps), min_pts).unwrap();
            prop_assert_eq!(t.labels(), base.labels());
        }
    }

    #[test]
    fn dbscan_structure(pts in points(), eps in 0.05f64..0.5, min_pts in 1usize..6) {
        let a = dbscan(&DistanceMatrix::new(distances(&pts)).unwrap(), eps, min_pts).unwrap();
        let used: BTreeSet<usize> = a.labels().iter().flatten().copied().collect();
        prop_assert_eq!(used, (0..a.n_clusters()).collect::<BTreeSet<_>>());
        for c in a.clusters() {
            prop_assert!(c.iter().any(|&i| a.is_core(i)));
        }
        for i in 0..a.len() {
            prop_assert!(!a.is_core(i) || a.labels()[i].is_some());
        }
    }

    #[test]
    fn jaccard_is_a_bounded_distance(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..20),
        k_frac in 0.0f64..1.0,
    ) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j]);
        let base = pairwise_euclidean(x.view()).unwrap();
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let jac = k_reciprocal_jaccard(&base, k).unwrap();
        let m = jac.as_array();
        prop_assert!(DistanceMatrix::new(m.clone()).is_ok());
        prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cmc_monotone_and_map_query_order_invariant(
        q in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 2), 0usize..3, 0usize..2), 1..10),
        g in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 2), 0usize..3, 0usize..2), 1..20),
    ) {
        let split = |v: &[(Vec<f64>, usize, usize)]| {
            let x = Array2::from_shape_fn((v.len(), 2), |(i, j)| v[i].0[j]);
            let m: Vec<Meta> = v.iter().map(|e| Meta { identity: e.1, camera_id: e.2 }).collect();
            (x, m)
        };
        let (qx, qm) = split(&q);
        let (gx, gm) = split(&g);
        let ranks = [1, 2, 3, 5, 10, 20];
        let r = evaluate(qx.view(), gx.view(), &qm, &gm, &ranks).unwrap();
        for w in ranks.windows(2) {
            prop_assert!(r.rank(w[0]) <= r.rank(w[1]));
        }
        prop_assert!((0.0..=1.0).contains(&r.map));

        let rev: Vec<_> = q.iter().rev().cloned().collect();
        let (rx, rm) = split(&rev);
        let r2 = evaluate(rx.view(), gx.view(), &rm, &gm, &ranks).unwrap();
        prop_assert!((r.map - r2.map).abs() < 1e-12);
        prop_assert_eq!(r.n_excluded, r2.n_excluded);

        let grev: Vec<_> = g.iter().rev().cloned().collect();
        let (grx, grm) = split(&grev);
        let r3 = evaluate(qx.view(), grx.view(), &qm, &grm, &ranks).unwrap();
        for &k in &ranks {
            prop_assert!((r.rank(k) - r3.rank(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn pdl_loss_is_finite_and_nonnegative(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        p in prop::collection::vec(-1.0f64..1.0, 12),
        pos in prop::collection::vec(0usize..3, 2),
        tau in 0.01f64..2.0,
    ) {
        let q = Array2::from_shape_vec((2, 4), q).unwrap();
        let p = Array2::from_shape_vec((3, 4), p).unwrap();
        let out = pdl_loss(q.view(), &pos, p.view(), tau).unwrap();
        prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
        for row in out.per_query_softmax.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_generation_is_deterministic_and_disjoint() {
    for seed in 0..5 {
        let config = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let (s1, t1) = generate_synthetic(&config).unwrap();
        let (s2, t2) = generate_synthetic(&config).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let src: BTreeSet<usize> = s1.identities().into_iter().collect();
        let tgt: BTreeSet<usize> = t1.identities().into_iter().collect();
        assert!(src.is_disjoint(&tgt));
        assert_eq!(src.len(), 10);
        assert_eq!(t1.len(), 400);
    }
}

#[test]
fn second_epoch_loss_below_first_on_most_seeds() {
    let mut decreased = 0;
    for seed in 0..5 {
        let (src, tgt) = generate_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            seed,
            lr: LrSchedule {
                base: 3.5e-3,
                ..LrSchedule::default()
            },
            ..TrainConfig::default()
        };
        let h = train(config, &src, &tgt.training_view()).unwrap().history;
        if h[1].loss < h[0].loss {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "loss decreased in only {decreased}/5 seeds");
}

#[test]
fn euclidean_self_retrieval_ranks() {
    let (_, tgt) = generate_synthetic(&SynthConfig::default()).unwrap();
    let dim = tgt.samples()[0].input.len();
    let x = Array2::from_shape_fn((tgt.len(), dim), |(i, j)| tgt.samples()[i].input[j]);
    let meta: Vec<Meta> = tgt
        .samples()
        .iter()
        .map(|s| Meta {
            identity: s.identity,
            camera_id: s.camera_id,
        })
        .collect();
    let r = evaluate(x.view(), x.view(), &meta, &meta, &DEFAULT_RANKS).unwrap();
    assert_eq!(r.n_valid_queries, tgt.len());
    assert!(r.rank(1) <= r.rank(5) && r.rank(5) <= r.rank(10));
}

#[test]
fn infonce_and_pdl_share_initial_params() {
    let (src, tgt) = generate_synthetic(&SynthConfig {
        n_identities_source: 3,
        n_identities_target: 3,
        samples_per_identity: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let view = tgt.training_view();
    let make = |loss| TrainConfig {
        epochs: 0,
        loss,
        k_reciprocal: 8,
        ..TrainConfig::default()
    };
    let a = train(make(LossKind::Pdl), &src, &view).unwrap();
    let b = train(make(LossKind::InfoNce), &src, &view).unwrap();
    assert_eq!(a.params, b.params);
    assert!(a.history.is_empty());
}
