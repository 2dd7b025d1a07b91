mod common;

use priming_core::attune::{
    build_centroid_head, compute_alpha, ensemble_heads, mix_shots, pool_clusters, AlphaMode,
    AlphaSchedule, ClassClusters,
};
use priming_core::corpus_io::{EmbeddingMatrix, EmbeddingStore, LabeledExample};
use priming_core::eval::{
    compare_heads, fewshot_trials, mean_std, predict_all, sample_shots, top1_accuracy, FewShotSetup,
};
use priming_core::head::{ClassifierHead, HeadFile, HeadRole};
use priming_core::pool::{PoolEntry, PoolStage, PrimingPool, ZeroShotHead};
use proptest::prelude::*;
use rand::Rng;

fn random_clusters(r: &mut impl Rng, dim: usize, n: usize, max: usize) -> ClassClusters {
    let mut cc = ClassClusters::new(dim, n);
    for c in 0..n {
        for _ in 0..r.random_range(0..=max) {
            cc.push(c, &common::random_unit(r, dim)).unwrap();
        }
    }
    cc
}

fn random_head(r: &mut impl Rng, dim: usize, n: usize) -> ClassifierHead {
    let cols: Vec<Vec<f32>> = (0..n).map(|_| common::random_unit(r, dim)).collect();
    ClassifierHead::from_columns(dim, &cols).unwrap()
}

fn oracle_centroid(rows: &[Vec<f32>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut mean = vec![0.0f64; dim];
    for row in rows {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64 / rows.len() as f64;
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    mean.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centroids_match_recomputation(seed in any::<u64>(), dim in 3usize..40, n in 1usize..8) {
        let mut r = common::rng(seed);
        let cc = random_clusters(&mut r, dim, n, 30);
        let head = build_centroid_head(&cc).unwrap();
        prop_assert_eq!(&head.support, &cc.sizes());
        for c in 0..n {
            let rows: Vec<Vec<f32>> = cc.rows(c).map(<[f32]>::to_vec).collect();
            prop_assert_eq!(head.empty[c], rows.is_empty());
            if rows.is_empty() {
                prop_assert!(head.head.column(c).iter().all(|&x| x == 0.0));
                continue;
            }
            for (a, b) in head.head.column(c).iter().zip(oracle_centroid(&rows)) {
                prop_assert!((*a as f64 - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_matches_convex_combination(seed in any::<u64>(), dim in 3usize..24, n in 1usize..6, global in any::<bool>()) {
        let mut r = common::rng(seed);
        let cc = random_clusters(&mut r, dim, n, 25);
        let wft = build_centroid_head(&cc).unwrap();
        let wz = ZeroShotHead(random_head(&mut r, dim, n));
        let sched = AlphaSchedule { mode: if global { AlphaMode::Global } else { AlphaMode::PerClass }, ..AlphaSchedule::default() };
        let e = ensemble_heads(&wft, &wz, &sched, false).unwrap();
        let total: usize = cc.sizes().iter().sum();
        for c in 0..n {
            let support = if global { total } else { cc.len(c) };
            let alpha = if cc.len(c) == 0 { 1.0 } else { (-(support as f64 / 10.0).powi(2)).exp().max(f64::MIN_POSITIVE) };
            prop_assert!((e.alphas[c] - alpha).abs() < 1e-12);
            for i in 0..dim {
                let want = (1.0 - alpha) * wft.head.column(c)[i] as f64 + alpha * wz.column(c)[i] as f64;
                prop_assert!((e.head.column(c)[i] as f64 - want).abs() < 1e-6);
            }
        }
        let renorm = ensemble_heads(&wft, &wz, &sched, true).unwrap();
        for col in renorm.head.columns() {
            let norm = col.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predictions_ignore_positive_column_scale(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut r = common::rng(seed);
        let head = random_head(&mut r, 16, 5);
        let scaled: Vec<Vec<f32>> = head.columns().map(|c| c.iter().map(|x| x * scale).collect()).collect();
        let scaled = ClassifierHead::from_columns(16, &scaled).unwrap();
        let test = common::gaussian_rows(&mut r, 50, 16);
        prop_assert_eq!(predict_all(&head, &test).unwrap(), predict_all(&scaled, &test).unwrap());
    }

    #[test]
    fn accuracy_is_permutation_invariant(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let head = random_head(&mut r, 8, 4);
        let test = common::gaussian_rows(&mut r, 60, 8);
        let labels: Vec<usize> = (0..60).map(|_| r.random_range(0..4)).collect();
        let a = top1_accuracy(&head, &test, &labels).unwrap();
        let order: Vec<usize> = (0..60).rev().collect();
        let rows: Vec<&[f32]> = order.iter().map(|&i| test.row(i)).collect();
        let labels2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let b = top1_accuracy(&head, &EmbeddingMatrix::from_rows(8, &rows).unwrap(), &labels2).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.confusion, b.confusion);
    }
}

#[test]
fn alpha_schedule_shape() {
    let s = AlphaSchedule::default();
    assert_eq!(compute_alpha(0, &s), 1.0);
    assert!((compute_alpha(10, &s) - (-1.0f64).exp()).abs() < 1e-15);
    assert!((compute_alpha(5, &s) - (-0.25f64).exp()).abs() < 1e-15);
    let steep = AlphaSchedule {
        n0: 4.0,
        p: 3.0,
        ..s
    };
    assert!((compute_alpha(8, &steep) - (-8.0f64).exp()).abs() < 1e-15);
    assert!(compute_alpha(1_000_000, &s) > 0.0);
    for bad in [
        AlphaSchedule { n0: 0.0, ..s },
        AlphaSchedule { p: -1.0, ..s },
        AlphaSchedule::fixed(1.5),
    ] {
        assert_eq!(bad.validate().unwrap_err().kind(), "InvalidConfig");
    }
}

#[test]
fn accuracy_matches_counting_oracle() {
    let mut r = common::rng(50);
    let head = random_head(&mut r, 10, 6);
    let test = common::gaussian_rows(&mut r, 200, 10);
    let labels: Vec<usize> = (0..200).map(|_| r.random_range(0..6)).collect();
    let report = top1_accuracy(&head, &test, &labels).unwrap();
    let mut correct = 0;
    let mut per = [(0usize, 0usize); 6];
    for (i, &l) in labels.iter().enumerate() {
        let scores: Vec<f32> = head
            .columns()
            .map(|c| common::ref_dot(c, test.row(i)))
            .collect();
        let mut best = 0;
        for c in 1..6 {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        assert_eq!(report.predictions[i], best);
        per[l].1 += 1;
        if best == l {
            correct += 1;
            per[l].0 += 1;
        }
    }
    assert_eq!(report.accuracy, correct as f64 / 200.0);
    assert_eq!(report.n_test, 200);
    for (c, (ok, n)) in per.iter().enumerate() {
        assert_eq!(
            report.per_class[c],
            if *n == 0 {
                None
            } else {
                Some(*ok as f64 / *n as f64)
            }
        );
    }
    assert_eq!(report.confusion.iter().flatten().sum::<u64>(), 200);
}

#[test]
fn eval_errors() {
    let head = ClassifierHead::from_columns(2, &[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
    let test = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
    assert_eq!(
        top1_accuracy(&head, &EmbeddingMatrix::empty(2), &[])
            .unwrap_err()
            .kind(),
        "EmptyTestSet"
    );
    assert_eq!(
        top1_accuracy(&head, &test, &[5]).unwrap_err().kind(),
        "LabelOutOfRange"
    );
    assert_eq!(
        top1_accuracy(&head, &test, &[0, 1]).unwrap_err().kind(),
        "ShapeMismatch"
    );
    let wide = EmbeddingMatrix::from_rows(3, &[[1.0f32, 0.0, 0.0]]).unwrap();
    assert_eq!(
        top1_accuracy(&head, &wide, &[0]).unwrap_err().kind(),
        "ShapeMismatch"
    );
}

#[test]
fn compare_heads_reports_delta() {
    let mut r = common::rng(51);
    let a = random_head(&mut r, 8, 3);
    let b = random_head(&mut r, 8, 3);
    let test = common::gaussian_rows(&mut r, 90, 8);
    let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
    let d = compare_heads(&a, &b, &test, &labels).unwrap();
    let ra = top1_accuracy(&a, &test, &labels).unwrap();
    let rb = top1_accuracy(&b, &test, &labels).unwrap();
    assert_eq!(d.accuracy_a, ra.accuracy);
    assert_eq!(d.accuracy_b, rb.accuracy);
    assert!((d.delta - (rb.accuracy - ra.accuracy)).abs() < 1e-15);
    let disagree = ra
        .predictions
        .iter()
        .zip(&rb.predictions)
        .filter(|(x, y)| x != y)
        .count();
    assert_eq!(d.disagreements, disagree);
    let self_cmp = compare_heads(&a, &a, &test, &labels).unwrap();
    assert_eq!((self_cmp.delta, self_cmp.disagreements), (0.0, 0));
}

#[test]
fn mix_shots_appends_after_pool_rows() {
    let mut r = common::rng(52);
    let dim = 4;
    let ids = vec![3u64, 8, 9];
    let rows: Vec<Vec<f32>> = (0..3).map(|_| common::random_unit(&mut r, dim)).collect();
    let store = EmbeddingStore::new(ids, EmbeddingMatrix::from_rows(dim, &rows).unwrap()).unwrap();
    let mut pool = PrimingPool::empty(2, PoolStage::ConsistencyFiltered);
    pool.clusters[0] = vec![
        PoolEntry {
            record_id: 9,
            class_index: 0,
            score: 0.0,
        },
        PoolEntry {
            record_id: 3,
            class_index: 0,
            score: 0.0,
        },
    ];
    pool.clusters[1] = vec![PoolEntry {
        record_id: 8,
        class_index: 1,
        score: 0.0,
    }];
    let shot = LabeledExample {
        embedding: common::random_unit(&mut r, dim),
        class_index: 0,
    };
    let mixed = mix_shots(&pool, &store, std::slice::from_ref(&shot), 2).unwrap();
    let c0: Vec<Vec<f32>> = mixed.rows(0).map(<[f32]>::to_vec).collect();
    assert_eq!(
        c0,
        vec![
            rows[2].clone(),
            rows[0].clone(),
            shot.embedding.clone(),
            shot.embedding.clone()
        ]
    );
    assert_eq!(mixed.sizes(), vec![4, 1]);
    assert_eq!(
        mix_shots(&pool, &store, &[], 3).unwrap(),
        pool_clusters(&pool, &store).unwrap()
    );
}

#[test]
fn degenerate_centroid_is_reported() {
    let mut cc = ClassClusters::new(2, 2);
    cc.push(0, &[1.0, 0.0]).unwrap();
    cc.push(1, &[1.0, 0.0]).unwrap();
    cc.push(1, &[-1.0, 0.0]).unwrap();
    let err = build_centroid_head(&cc).unwrap_err();
    assert_eq!(err.kind(), "DegenerateCentroid");
    assert!(err.to_string().contains('1'));
}

fn train_set(r: &mut impl Rng, n_classes: usize, per: usize, dim: usize) -> Vec<LabeledExample> {
    (0..n_classes * per)
        .map(|i| LabeledExample {
            embedding: common::random_unit(r, dim),
            class_index: i % n_classes,
        })
        .collect()
}

#[test]
fn shot_sampling_is_seeded_and_without_replacement() {
    let mut r = common::rng(53);
    let train = train_set(&mut r, 4, 10, 6);
    let a = sample_shots(&train, 4, 5, 7).unwrap();
    assert_eq!(a, sample_shots(&train, 4, 5, 7).unwrap());
    assert_ne!(a, sample_shots(&train, 4, 5, 8).unwrap());
    for c in 0..4 {
        let shots: Vec<&LabeledExample> = a.iter().filter(|s| s.class_index == c).collect();
        assert_eq!(shots.len(), 5);
        for (i, s) in shots.iter().enumerate() {
            assert!(train.contains(s));
            assert!(!shots[..i].contains(s));
        }
    }
    assert_eq!(
        sample_shots(&train, 4, 11, 0).unwrap_err().kind(),
        "InsufficientShots"
    );
    let all = sample_shots(&train, 4, 10, 3).unwrap();
    assert_eq!(all.len(), 40);
}

#[test]
fn fewshot_mean_and_sample_std() {
    let mut r = common::rng(54);
    let dim = 12;
    let pool = random_clusters(&mut r, dim, 3, 6);
    let train = train_set(&mut r, 3, 8, dim);
    let wz = ZeroShotHead(random_head(&mut r, dim, 3));
    let test = common::gaussian_rows(&mut r, 60, dim);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let sched = AlphaSchedule::default();
    let setup = FewShotSetup {
        pool: &pool,
        train: &train,
        shots_per_class: 2,
        sched: &sched,
        wz: &wz,
        test: &test,
        labels: &labels,
    };
    let seeds = [0, 1, 2, 3, 4];
    let report = fewshot_trials(&setup, &seeds).unwrap();
    assert_eq!(report.accuracies.len(), seeds.len());
    // each trial equals a hand-assembled run
    for (i, &seed) in seeds.iter().enumerate() {
        let mut cc = pool.clone();
        for s in sample_shots(&train, 3, 2, seed).unwrap() {
            cc.push(s.class_index, &s.embedding).unwrap();
        }
        let head = ensemble_heads(&build_centroid_head(&cc).unwrap(), &wz, &sched, false).unwrap();
        assert_eq!(
            report.accuracies[i],
            top1_accuracy(&head.head, &test, &labels).unwrap().accuracy
        );
    }
    let n = report.accuracies.len() as f64;
    let mean = report.accuracies.iter().sum::<f64>() / n;
    let var = report
        .accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1.0);
    assert!((report.mean - mean).abs() < 1e-12);
    assert!((report.std - var.sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
}

#[test]
fn head_file_round_trip() {
    let mut r = common::rng(55);
    let dir = tempfile::tempdir().unwrap();
    for role in [HeadRole::ZeroShot, HeadRole::Centroid, HeadRole::Ensemble] {
        let head = random_head(&mut r, 7, 4);
        let file = HeadFile {
            role,
            head,
            alphas: vec![1.0, 0.5, 0.25, 0.0],
        };
        let path = dir.path().join("h.nphead");
        file.save(&path).unwrap();
        let back = HeadFile::load(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(std::fs::read(&path).unwrap(), file.encode());
        assert_eq!(
            HeadFile::decode(&file.encode()[..20]).unwrap_err().kind(),
            "TruncatedPayload"
        );
    }
}
