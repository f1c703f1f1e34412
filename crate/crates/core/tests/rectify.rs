use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaklab_core::activelabel::{LabelSet, PseudoLabel};
use weaklab_core::metrics::pseudo_label_quality;
use weaklab_core::rectify::*;

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize, sharp: f64) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((n, c), |_| (rng.random::<f64>() * sharp).exp());
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn brute_thresholds(p: ArrayView2<f64>, delta: f64, alpha: f64) -> Vec<f64> {
    (0..p.ncols())
        .map(|c| {
            let rows: Vec<usize> = (0..p.nrows())
                .filter(|&i| (0..p.ncols()).all(|k| p[[i, k]] < p[[i, c]] || (p[[i, k]] == p[[i, c]] && k >= c)))
                .collect();
            if rows.is_empty() {
                return f64::INFINITY;
            }
            let col_max = (0..p.nrows()).map(|i| p[[i, c]]).fold(f64::NEG_INFINITY, f64::max);
            if col_max - delta > alpha {
                col_max - delta
            } else {
                alpha
            }
        })
        .collect()
}

#[test]
fn adaptive_thresholds_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let n = rng.random_range(1..100);
        let p = random_probs(&mut rng, n, 5, 6.0);
        let cfg = RectifyConfig { delta: rng.random_range(0.0..0.3), alpha: rng.random_range(0.2..0.8) };
        assert_eq!(adaptive_thresholds(p.view(), &cfg), brute_thresholds(p.view(), cfg.delta, cfg.alpha));
    }
}

#[test]
fn thresholds_monotone_in_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_probs(&mut rng, 60, 4, 5.0);
    let t = |d, a| adaptive_thresholds(p.view(), &RectifyConfig { delta: d, alpha: a });
    for (lo, hi) in t(0.05, 0.5).iter().zip(t(0.2, 0.5)) {
        assert!(hi <= *lo);
    }
    for (lo, hi) in t(0.1, 0.3).iter().zip(t(0.1, 0.6)) {
        assert!(hi >= *lo);
    }
}

#[test]
fn prototype_examples() {
    let f = Array2::from_shape_vec((3, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let bank = PrototypeBank::build(f.view(), &[(0, 0), (1, 1), (2, 2)], 3).unwrap();
    let q = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 1.0]).unwrap();
    assert_eq!(prototype_labels(q.view(), &bank).unwrap().0, vec![2]);
    let single = PrototypeBank::build(f.view(), &[(0, 1)], 3).unwrap();
    let (l, conf) = prototype_labels(f.view(), &single).unwrap();
    assert_eq!(l, vec![1, 1, 1]);
    assert!(conf.column(1).iter().all(|&c| c == 1.0));
    let empty = PrototypeBank::build(f.view(), &[], 3).unwrap();
    assert!(prototype_labels(f.view(), &empty).is_err());
}

#[test]
fn prototype_labels_match_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let f = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<(usize, usize)> = (0..10).map(|i| (i, i % 3)).collect();
        let bank = PrototypeBank::build(f.view(), &labels, 3).unwrap();
        let (got, _) = prototype_labels(f.view(), &bank).unwrap();
        for i in 0..10 {
            let dots: Vec<f64> = (0..3)
                .map(|c| {
                    let members: Vec<usize> = (0..10).filter(|r| r % 3 == c).collect();
                    let mean: Vec<f64> = (0..4)
                        .map(|d| members.iter().map(|&r| f[[r, d]]).sum::<f64>() / members.len() as f64)
                        .collect();
                    (0..4).map(|d| mean[d] * f[[i, d]]).sum()
                })
                .collect();
            let best = (0..3).max_by(|&a, &b| dots[a].total_cmp(&dots[b]).then(b.cmp(&a))).unwrap();
            assert_eq!(got[i], best);
        }
    }
}

fn one_hot(rows: &[usize], c: usize, conf: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), c), |(i, k)| if rows[i] == k { conf } else { (1.0 - conf) / (c - 1) as f64 })
}

#[test]
fn confident_consistent_negatives_all_accepted() {
    let mut labels = LabelSet::new(4);
    for i in 0..4 {
        labels.add_negative(i, vec![i % 2, 2]).unwrap();
    }
    let pred = [0, 1, 2, 2];
    let p = one_hot(&pred, 3, 0.99);
    let bank = PrototypeBank::build(p.view(), &[(0, 0), (1, 1), (2, 2)], 3).unwrap();
    let b = estimate_pseudo_labels(p.view(), p.view(), &bank, &labels, &RectifyConfig::default(), 0).unwrap();
    assert_eq!(b.accepted().count(), 4);
}

#[test]
fn conflict_and_negative_gating() {
    let mut labels = LabelSet::new(3);
    labels.add_negative(0, vec![0, 1]).unwrap();
    labels.add_negative(1, vec![0, 1]).unwrap();
    labels.add_sparse(2, 0).unwrap();
    let p = one_hot(&[0, 2, 0], 3, 0.99);
    // Point 0's feature points at class 1's prototype.
    let f = one_hot(&[1, 2, 0], 3, 1.0);
    let bank = PrototypeBank::build(f.view(), &[(0, 1), (1, 2), (2, 0)], 3).unwrap();
    let cfg = RectifyConfig::default();
    let b = estimate_pseudo_labels(p.view(), f.view(), &bank, &labels, &cfg, 0).unwrap();
    let reasons: Vec<_> = b.candidates.iter().map(|c| (c.point, c.rejection)).collect();
    assert_eq!(reasons, vec![(0, Some(Rejection::PrototypeConflict)), (1, Some(Rejection::NegativeViolation))]);
    // Later iterations drop the gate and add unlabelled points as candidates.
    let b = estimate_pseudo_labels(p.view(), f.view(), &bank, &labels, &cfg, 1).unwrap();
    assert_eq!(b.accepted_pairs(), vec![(1, 2)]);
}

#[test]
fn fsf_is_subset_of_fix_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = 80;
        let p = random_probs(&mut rng, n, 4, 6.0);
        let f = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let labels = LabelSet::new(n);
        let bank = PrototypeBank::build(f.view(), &[(0, 0), (1, 1), (2, 2), (3, 3)], 4).unwrap();
        let cfg = RectifyConfig::default();
        let b = estimate_pseudo_labels(p.view(), f.view(), &bank, &labels, &cfg, 1).unwrap();
        let fix = baseline_filter(p.view(), BaselineMethod::Fix(cfg.alpha), &[]).unwrap();
        for c in b.accepted() {
            assert!(fix[c.point]);
        }
        // A class whose maximum exceeds alpha + delta is strictly tighter.
        for (k, &t) in b.thresholds.iter().enumerate() {
            let m = p.column(k).iter().copied().fold(0.0, f64::max);
            if t.is_finite() && m > cfg.alpha + cfg.delta {
                assert!(t > cfg.alpha);
            }
        }
    }
}

#[test]
fn baseline_examples() {
    let p = one_hot(&[0, 1, 2], 3, 0.4);
    assert!(baseline_filter(p.view(), BaselineMethod::Fix(0.0), &[]).unwrap().iter().all(|&a| a));
    let p = Array2::from_shape_vec((4, 2), vec![0.9, 0.1, 0.6, 0.4, 0.2, 0.8, 0.45, 0.55]).unwrap();
    assert_eq!(baseline_filter(p.view(), BaselineMethod::Esl, &[]).unwrap(), vec![true, false, true, false]);
}

#[test]
fn dars_matches_threshold_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let c = 4;
        let n = rng.random_range(20..200);
        let p = random_probs(&mut rng, n, c, 8.0);
        let hist: Vec<usize> =
            (0..c).map(|k| if k == 0 { rng.random_range(20..60) } else { rng.random_range(1..10) }).collect();
        let mask = baseline_filter(p.view(), BaselineMethod::Dars, &hist).unwrap();
        let pred: Vec<usize> = p
            .rows()
            .into_iter()
            .map(|r| (0..c).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap())
            .collect();
        let avail: Vec<usize> = (0..c).map(|k| pred.iter().filter(|&&y| y == k).count()).collect();
        let total: usize = hist.iter().sum();
        // Largest total whose exact proportional split fits within one count.
        let best_k = (0..=n)
            .rev()
            .find(|&k| {
                (0..c).all(|j| (hist[j] as f64 * k as f64 / total as f64 - 1.0).ceil().max(0.0) as usize <= avail[j])
            })
            .unwrap();
        let got: Vec<usize> = (0..c).map(|k| (0..n).filter(|&i| mask[i] && pred[i] == k).count()).collect();
        let k: usize = got.iter().sum();
        assert!(k + c >= best_k, "accepted {k}, search found {best_k}");
        for j in 0..c {
            let share = hist[j] as f64 * k as f64 / total as f64;
            assert!((got[j] as f64 - share).abs() <= 1.0, "class {j}: {} vs {share}", got[j]);
            // Accepted points per class are the most confident ones.
            let lowest_in =
                (0..n).filter(|&i| mask[i] && pred[i] == j).map(|i| p[[i, j]]).fold(f64::INFINITY, f64::min);
            assert!((0..n).filter(|&i| !mask[i] && pred[i] == j).all(|i| p[[i, j]] <= lowest_in));
        }
    }
}

#[test]
fn merge_keeps_previous_labels() {
    let mut labels = LabelSet::new(6);
    let mk = |iteration, pts: &[(usize, usize)]| PseudoLabelBatch {
        iteration,
        thresholds: vec![],
        prototype_thresholds: vec![],
        candidates: pts
            .iter()
            .map(|&(point, class)| PseudoCandidate {
                point,
                classifier_class: class,
                prototype_class: class,
                confidence: 0.9,
                prototype_confidence: 0.9,
                rejection: None,
            })
            .collect(),
    };
    assert_eq!(merge_pseudo_labels(&mut labels, &mk(0, &[(0, 1), (1, 2)])).unwrap(), 2);
    assert_eq!(merge_pseudo_labels(&mut labels, &mk(1, &[(1, 0), (4, 2), (5, 1)])).unwrap(), 2);
    assert_eq!(labels.pseudo.len(), 4);
    assert_eq!(labels.pseudo[&1], PseudoLabel { class: 2, confidence: 0.9, iteration: 0 });
}

/// Classifier output with 20% of predictions flipped to a wrong class at the same
/// confidence distribution, and features clustered by true class.
fn corrupted_suite(seed: u64) -> (Array2<f64>, Array2<f64>, Vec<usize>, PrototypeBank) {
    let (n, c, d) = (2000, 5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_fn((c, d), |_| rng.random_range(-1.0..1.0));
    let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let feat = Array2::from_shape_fn((n, d), |(i, k)| centers[[gt[i], k]] + rng.random_range(-0.4..0.4));
    let mut probs = Array2::zeros((n, c));
    for i in 0..n {
        let pred = if rng.random::<f64>() < 0.2 { (gt[i] + rng.random_range(1..c)) % c } else { gt[i] };
        let top = rng.random_range(0.35..1.0);
        let mut rest: Vec<f64> = (0..c - 1).map(|_| rng.random::<f64>()).collect();
        let s: f64 = rest.iter().sum();
        rest.iter_mut().for_each(|r| *r *= (1.0 - top) / s);
        for k in 0..c {
            probs[[i, k]] = if k == pred { top } else { rest.pop().unwrap().min(top * 0.999) };
        }
        let z = probs.row(i).sum();
        probs.row_mut(i).mapv_inplace(|v| v / z);
    }
    let proto_labels: Vec<(usize, usize)> = (0..100).map(|i| (i, gt[i])).collect();
    let bank = PrototypeBank::build(feat.view(), &proto_labels, c).unwrap();
    (probs, feat, gt, bank)
}

#[test]
fn act_fsf_beats_confidence_only_on_corrupted_predictions() {
    for seed in 0..3 {
        let (probs, feat, gt, bank) = corrupted_suite(seed);
        let labels = LabelSet::new(gt.len());
        let cfg = RectifyConfig::default();
        let ours = estimate_pseudo_labels(probs.view(), feat.view(), &bank, &labels, &cfg, 1).unwrap();
        let q = pseudo_label_quality(&ours.accepted_pairs(), &gt, gt.len()).unwrap();
        let fix = estimate_with_baseline(probs.view(), &labels, BaselineMethod::Fix(cfg.alpha), &[], 1).unwrap();
        let qf = pseudo_label_quality(&fix.accepted_pairs(), &gt, gt.len()).unwrap();
        assert!(qf.accepted >= q.accepted && q.accepted > 0);
        assert!(q.error_rate.unwrap() < qf.error_rate.unwrap(), "{q:?} vs {qf:?}");
    }
}
