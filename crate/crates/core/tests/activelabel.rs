use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use weaklab_core::activelabel::*;
use weaklab_core::geometry::{camera_subset, rotate_z, Point3};
use weaklab_core::metrics::adjusted_rand_index;
use weaklab_core::synth::{generate_scene, SceneConfig};

// ---------- fixtures and partition helpers ----------

fn load_fixture(name: &str) -> (Vec<Vec<f64>>, Vec<i64>, usize, usize) {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let field =
        |key: &str| -> usize { header.split_whitespace().find_map(|t| t.strip_prefix(key)).unwrap().parse().unwrap() };
    let (mcs, ms) = (field("min_cluster_size="), field("min_samples="));
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for line in lines {
        let vals: Vec<&str> = line.split_whitespace().collect();
        pts.push(vals[..vals.len() - 1].iter().map(|v| v.parse().unwrap()).collect());
        labels.push(vals[vals.len() - 1].parse().unwrap());
    }
    (pts, labels, mcs, ms)
}

/// Same partition (noise must match exactly, cluster ids up to relabeling).
fn same_partition(a: &[i64], b: &[i64]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x < 0) != (y < 0) {
            return false;
        }
        x < 0 || (*ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
    })
}

/// Points whose label differs from `reference` after mapping each of our clusters
/// to its majority reference label.
fn mismatches(ours: &[i64], reference: &[i64]) -> usize {
    let mut votes: HashMap<i64, HashMap<i64, usize>> = HashMap::new();
    for (&a, &b) in ours.iter().zip(reference) {
        *votes.entry(a).or_default().entry(b).or_default() += 1;
    }
    let map: HashMap<i64, i64> = votes
        .into_iter()
        .map(|(a, v)| (a, if a < 0 { -1 } else { *v.iter().max_by_key(|(l, c)| (**c, -**l)).unwrap().0 }))
        .collect();
    ours.iter().zip(reference).filter(|(a, b)| map[a] != **b).count()
}

fn run<const D: usize>(pts: &[Vec<f64>], mcs: usize, ms: usize) -> Clustering {
    let arr: Vec<[f64; D]> = pts.iter().map(|p| p.as_slice().try_into().unwrap()).collect();
    hdbscan(&arr, &HdbscanConfig { min_cluster_size: mcs, min_samples: ms }).unwrap()
}

// ---------- brute-force level-set oracle ----------

/// HDBSCAN computed directly from level sets of the mutual-reachability graph:
/// walk the distinct edge weights from the top and split clusters into connected
/// components of the edges strictly below each level.
fn level_set_oracle(pts: &[Vec<f64>], mcs: usize, ms: usize) -> Vec<i64> {
    let n = pts.len();
    if n < mcs {
        return vec![-1; n];
    }
    let d = |i: usize, j: usize| pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).map(|j| d(i, j)).collect();
            ds.sort_by(f64::total_cmp);
            ds[ms.min(n) - 1]
        })
        .collect();
    let mr = |i: usize, j: usize| d(i, j).max(core[i]).max(core[j]);
    let mut levels: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| mr(i, j)).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let components = |set: &[usize], w: f64| -> Vec<Vec<usize>> {
        let mut seen = vec![false; set.len()];
        let mut out = Vec::new();
        for s in 0..set.len() {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut comp = vec![set[s]];
            let mut queue = vec![s];
            while let Some(a) = queue.pop() {
                for b in 0..set.len() {
                    if !seen[b] && mr(set[a], set[b]) < w {
                        seen[b] = true;
                        comp.push(set[b]);
                        queue.push(b);
                    }
                }
            }
            out.push(comp);
        }
        out
    };
    // clusters: (parent, birth lambda, stability); exit cluster per point
    let mut parent = vec![usize::MAX];
    let mut birth = vec![0.0];
    let mut stability = vec![0.0];
    let mut exit = vec![0usize; n];
    let mut work = vec![(0usize, (0..n).collect::<Vec<usize>>())];
    while let Some((c, mut set)) = work.pop() {
        for &w in &levels {
            if set.is_empty() {
                break;
            }
            let comps = components(&set, w);
            if comps.len() == 1 {
                continue;
            }
            let lam = 1.0 / w;
            let big: Vec<Vec<usize>> = comps.iter().filter(|k| k.len() >= mcs).cloned().collect();
            for k in comps.iter().filter(|k| k.len() < mcs) {
                stability[c] += (lam - birth[c]) * k.len() as f64;
                for &p in k {
                    exit[p] = c;
                }
            }
            if big.len() >= 2 {
                for k in big {
                    parent.push(c);
                    birth.push(lam);
                    stability.push(0.0);
                    stability[c] += (lam - birth[c]) * k.len() as f64;
                    work.push((parent.len() - 1, k));
                }
                set.clear();
            } else if big.len() == 1 {
                set = big[0].clone();
            } else {
                set.clear();
            }
        }
        assert!(set.is_empty());
    }
    // excess of mass, root excluded
    let m = parent.len();
    let mut selected = vec![false; m];
    let mut score = stability.clone();
    for c in (1..m).rev() {
        let kids: Vec<usize> = (1..m).filter(|&k| parent[k] == c).collect();
        let sub: f64 = kids.iter().map(|&k| score[k]).sum();
        if kids.is_empty() || sub <= stability[c] {
            selected[c] = true;
            let mut stack = kids;
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend((1..m).filter(|&j| parent[j] == k));
            }
        } else {
            score[c] = sub;
        }
    }
    exit.iter()
        .map(|&c| {
            let mut x = c;
            while x != 0 {
                if selected[x] {
                    return x as i64;
                }
                x = parent[x];
            }
            -1
        })
        .collect()
}

// ---------- HDBSCAN ----------

#[test]
fn two_blobs_match_reference() {
    let (pts, reference, mcs, ms) = load_fixture("hdbscan_two_blobs.txt");
    let c = run::<2>(&pts, mcs, ms);
    assert_eq!(c.num_clusters, 2);
    let truth: Vec<i64> = (0..pts.len()).map(|i| (i >= 100) as i64).collect();
    assert!(adjusted_rand_index(&c.cluster_id, &truth).unwrap() >= 0.99);
    assert!(same_partition(&c.cluster_id, &reference));
}

#[test]
fn sparse_ring_is_noise() {
    let (pts, reference, mcs, ms) = load_fixture("hdbscan_ring_blob.txt");
    let c = run::<2>(&pts, mcs, ms);
    assert!(c.cluster_id[..20].iter().all(|&id| id == -1));
    assert!(c.cluster_id[20..].iter().all(|&id| id >= 0));
    assert!(same_partition(&c.cluster_id, &reference));
    assert!(same_partition(&c.cluster_id, &level_set_oracle(&pts, mcs, ms)));
}

#[test]
fn mixed_fixtures_match_reference() {
    for k in 0..4 {
        let (pts, reference, mcs, ms) = load_fixture(&format!("hdbscan_mixed_{k}.txt"));
        let c = run::<3>(&pts, mcs, ms);
        c.validate().unwrap();
        // the reference breaks equal-weight merges in edge order, so a point that
        // leaves exactly at a split level may land in a cluster there
        assert!(mismatches(&c.cluster_id, &reference) as f64 <= 0.02 * pts.len() as f64, "fixture {k}");
        assert!(same_partition(&c.cluster_id, &level_set_oracle(&pts, mcs, ms)), "fixture {k}");
    }
}

#[test]
fn small_fixtures_match_exactly() {
    for k in 0..8 {
        let (pts, reference, mcs, ms) = load_fixture(&format!("hdbscan_small_{k}.txt"));
        let c = if k % 2 == 0 { run::<2>(&pts, mcs, ms) } else { run::<3>(&pts, mcs, ms) };
        assert!(same_partition(&c.cluster_id, &reference), "fixture {k}");
        assert!(same_partition(&level_set_oracle(&pts, mcs, ms), &reference), "fixture {k}");
    }
}

#[test]
fn five_points_are_noise() {
    let pts: Vec<[f64; 3]> = (0..5).map(|k| [k as f64 * 0.01, 0.0, 0.0]).collect();
    let c = hdbscan(&pts, &HdbscanConfig { min_cluster_size: 10, min_samples: 5 }).unwrap();
    assert_eq!(c.num_clusters, 0);
    assert!(c.cluster_id.iter().all(|&id| id == -1));
}

fn random_blobs(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)]).collect();
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..3)];
            let s = Normal::new(0.0, 0.8).unwrap();
            vec![c[0] + s.sample(&mut rng), c[1] + s.sample(&mut rng)]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn agrees_with_level_set_oracle(seed in 0u64..10_000, n in 12usize..45, mcs in 3usize..9, ms in 1usize..6) {
        let pts = random_blobs(seed, n);
        let c = run::<2>(&pts, mcs, ms);
        prop_assert!(same_partition(&c.cluster_id, &level_set_oracle(&pts, mcs, ms)));
    }

    #[test]
    fn permutation_invariant(seed in 0u64..10_000, grid in any::<bool>()) {
        // grid data has many equal distances, random data has none
        let pts: Vec<Vec<f64>> = if grid {
            (0..48).map(|k| vec![(k % 6) as f64 + if k >= 24 { 9.0 } else { 0.0 }, ((k % 24) / 6) as f64]).collect()
        } else {
            random_blobs(seed, 60)
        };
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let a = run::<2>(&pts, 5, 3);
        let b = run::<2>(&shuffled, 5, 3);
        let mut back = vec![0i64; pts.len()];
        for (k, &i) in order.iter().enumerate() {
            back[i] = b.cluster_id[k];
        }
        prop_assert!(same_partition(&a.cluster_id, &back));
    }
}

// ---------- ground detection ----------

#[test]
fn perfect_plane_is_all_ground() {
    let pts: Vec<Point3> = (0..4000)
        .map(|k| {
            let r = 1.0 + 28.0 * ((k * 7919) % 4000) as f64 / 4000.0;
            let a = k as f64 * 2.399963;
            [r * a.cos(), r * a.sin(), 0.0]
        })
        .collect();
    let ransac = RansacConfig { inlier_threshold: 0.05, ..Default::default() };
    let mask = detect_ground(&pts, &PillarConfig::default(), &ransac).unwrap();
    assert!(mask.iter().all(|&g| g));
}

fn noisy_plane_and_box(seed: u64) -> (Vec<Point3>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    // uniform in range and azimuth, as a scanner would see it
    let mut pts: Vec<Point3> = (0..6000)
        .map(|_| {
            let (r, a) = (rng.random_range(1.0..29.0), rng.random_range(0.0..std::f64::consts::TAU));
            [r * a.cos(), r * a.sin(), noise.sample(&mut rng)]
        })
        .collect();
    let plane_n = pts.len();
    // a 6 m x 6 m box spanning z in [0.5, 2], sampled on its faces
    for _ in 0..3000 {
        let (u, v) = (rng.random_range(-3.0..3.0), rng.random_range(0.5..2.0));
        let p = match rng.random_range(0..5) {
            0 => [10.0 + u, 7.0 + rng.random_range(-3.0..3.0), 2.0],
            1 => [10.0 + u, 4.0, v],
            2 => [10.0 + u, 10.0, v],
            3 => [7.0, 7.0 + u, v],
            _ => [13.0, 7.0 + u, v],
        };
        pts.push(p);
    }
    (pts, plane_n)
}

#[test]
fn noisy_plane_with_box() {
    let (pts, plane_n) = noisy_plane_and_box(3);
    let mask = detect_ground(&pts, &PillarConfig::default(), &RansacConfig::default()).unwrap();
    // oracle: distance to the true plane z = 0
    let near: Vec<usize> = (0..plane_n).filter(|&i| pts[i][2].abs() <= 0.1).collect();
    let found = near.iter().filter(|&&i| mask[i]).count();
    assert!(found as f64 >= 0.99 * near.len() as f64, "{found}/{}", near.len());
    assert_eq!(mask[plane_n..].iter().filter(|&&g| g).count(), 0);
}

#[test]
fn vertical_wall_is_not_ground() {
    let pts: Vec<Point3> = (0..2000).map(|k| [10.0, -5.0 + (k % 50) as f64 * 0.2, (k / 50) as f64 * 0.1]).collect();
    let mask = detect_ground(&pts, &PillarConfig::default(), &RansacConfig::default()).unwrap();
    assert!(mask.iter().all(|&g| !g));
}

#[test]
fn ground_mask_rotation_equivariant() {
    // points kept away from pillar borders; rotating by a whole number of sectors
    let cfg = PillarConfig::default();
    let sector = std::f64::consts::TAU / cfg.angular_bins as f64;
    let ring = cfg.r_max / cfg.radial_bins as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Point3> = (0..5000)
        .map(|k| {
            let r = ring * ((k % cfg.radial_bins) as f64 + rng.random_range(0.1..0.9));
            let a = sector * (rng.random_range(0..cfg.angular_bins) as f64 + rng.random_range(0.1..0.9));
            let (x, y) = (r * a.cos(), r * a.sin());
            let z = 0.03 * x - 0.01 * y
                + if k % 5 == 0 { rng.random_range(0.4..2.0) } else { rng.random_range(-0.02..0.02) };
            [x, y, z]
        })
        .collect();
    let base = detect_ground(&pts, &cfg, &RansacConfig::default()).unwrap();
    for k in [1, 7, 20] {
        let rotated: Vec<Point3> = pts.iter().map(|p| rotate_z(p, k as f64 * sector)).collect();
        assert_eq!(detect_ground(&rotated, &cfg, &RansacConfig::default()).unwrap(), base);
    }
}

#[test]
fn tilted_synthetic_ground() {
    // sparse far pillars fall back to the scene-level plane
    let cfg = SceneConfig {
        max_tilt_deg: 5.0,
        noise_sigma: 0.02,
        image_width: 32,
        image_height: 16,
        ..SceneConfig::default()
    };
    for seed in [211, 213] {
        let f = generate_scene(&cfg, seed).unwrap();
        let [a, b] = f.ground_plane;
        let mask =
            detect_ground(&f.points, &PillarConfig::default(), &RansacConfig { seed, ..Default::default() }).unwrap();
        let (mut ground, mut found, mut wrong) = (0, 0, 0);
        for (p, &g) in f.points.iter().zip(&mask) {
            if (p[2] - a * p[0] - b * p[1]).abs() / (1.0 + a * a + b * b).sqrt() <= 0.1 {
                ground += 1;
                found += g as usize;
            } else {
                wrong += g as usize;
            }
        }
        assert!(found as f64 >= 0.99 * ground as f64, "seed {seed}: {found}/{ground}");
        // object bases just above the band are the usual misses
        assert!(wrong as f64 <= 0.025 * (f.points.len() - ground) as f64, "seed {seed}: {wrong}");
    }
}

#[test]
fn ground_detection_is_deterministic() {
    let (pts, _) = noisy_plane_and_box(5);
    let a = detect_ground(&pts, &PillarConfig::default(), &RansacConfig { seed: 9, ..Default::default() }).unwrap();
    let b = detect_ground(&pts, &PillarConfig::default(), &RansacConfig { seed: 9, ..Default::default() }).unwrap();
    assert_eq!(a, b);
}

// ---------- annotation ----------

#[test]
fn pure_cluster_one_click() {
    let pts: Vec<Point3> = (0..50).map(|k| [k as f64 * 0.1, 0.0, 0.0]).collect();
    let c = Clustering { cluster_id: vec![0; 50], num_clusters: 1 };
    let l = simulate_annotation(&pts, &c, &[1; 50]).unwrap();
    assert_eq!((l.sparse.len(), l.propagated.len(), l.negative.len()), (1, 49, 0));
}

#[test]
fn mixed_cluster_car_and_road() {
    let pts: Vec<Point3> = (0..50).map(|k| [k as f64 * 0.1, (k % 3) as f64, 0.0]).collect();
    let gt: Vec<usize> = (0..50).map(|k| if k < 30 { 1 } else { 0 }).collect();
    let c = Clustering { cluster_id: vec![0; 50], num_clusters: 1 };
    let l = simulate_annotation(&pts, &c, &gt).unwrap();
    assert_eq!(l.sparse.len(), 2);
    assert_eq!(l.negative.len(), 48);
    assert!(l.negative.values().all(|s| s == &vec![0, 1]));
    let mut clicked: Vec<usize> = l.sparse.values().copied().collect();
    clicked.sort_unstable();
    assert_eq!(clicked, vec![0, 1]);
    for (&i, &c) in &l.sparse {
        assert_eq!(gt[i], c);
    }
}

fn label_scene(seed: u64) -> (usize, Vec<usize>, ActiveLabeling) {
    let mut cfg = SceneConfig::default();
    cfg.image_width = 32;
    cfg.image_height = 16;
    let frame = generate_scene(&cfg, seed).unwrap();
    let subset = camera_subset(&frame);
    let train = frame.restrict(&subset);
    let al = ActiveLabelConfig { ransac: RansacConfig { seed, ..Default::default() }, ..Default::default() };
    let out = active_label(&train.points, &train.gt_class, &al).unwrap();
    (frame.len(), train.gt_class, out)
}

#[test]
fn scene_labels_respect_oracle_invariants() {
    for seed in [1, 2, 3] {
        let (_, gt, out) = label_scene(seed);
        out.labels.validate().unwrap();
        for (&i, &c) in out.labels.sparse.iter().chain(&out.labels.propagated) {
            assert_eq!(gt[i], c, "scene {seed} point {i}");
        }
        for (&i, set) in &out.labels.negative {
            assert!(set.contains(&gt[i]));
            assert!(set.len() >= 2);
        }
        // propagated labels agree with the click in their unit
        for members in out.units.members() {
            let clicks: Vec<usize> = members.iter().filter_map(|i| out.labels.sparse.get(i).copied()).collect();
            for i in &members {
                if let Some(c) = out.labels.propagated.get(i) {
                    assert_eq!(clicks, vec![*c]);
                }
            }
        }
    }
}

#[test]
fn scene_batch_is_sparse_but_covered() {
    let runs: Vec<_> = (10..16).map(label_scene).collect();
    let sets: Vec<LabelSet> = runs.iter().map(|r| r.2.labels.clone()).collect();
    let sizes: Vec<usize> = runs.iter().map(|r| r.0).collect();
    let stats = label_statistics(&sets, &sizes).unwrap();
    assert!(stats.sparse_rate < 0.01, "{stats:?}");
    let covered = stats.sparse + stats.propagated + stats.negative;
    assert!(covered as f64 > 0.6 * stats.training_points as f64, "{stats:?}");
}

#[test]
fn statistics_examples() {
    let mut pure = LabelSet::new(10);
    pure.add_sparse(0, 1).unwrap();
    for i in 1..10 {
        pure.add_propagated(i, 1).unwrap();
    }
    let s = label_statistics(&[pure], &[10]).unwrap();
    assert_eq!((s.sparse_rate, s.propagated_rate, s.negative_rate), (0.1, 0.9, 0.0));

    let pts: Vec<Point3> = (0..40).map(|k| [k as f64, 0.0, 0.0]).collect();
    let gt: Vec<usize> = (0..40).map(|k| k % 2).collect();
    let one = Clustering { cluster_id: vec![0; 40], num_clusters: 1 };
    let mixed = simulate_annotation(&pts, &one, &gt).unwrap();
    let s = label_statistics(&[mixed], &[40]).unwrap();
    assert_eq!(s.sparse_rate, 2.0 / 40.0);
    assert_eq!(s.negative_rate, 38.0 / 40.0);
    assert!(label_statistics(&[LabelSet::new(5)], &[4]).is_err());
}

#[test]
fn statistics_match_direct_count() {
    let runs: Vec<_> = (20..24).map(label_scene).collect();
    let sets: Vec<LabelSet> = runs.iter().map(|r| r.2.labels.clone()).collect();
    let sizes: Vec<usize> = runs.iter().map(|r| r.0).collect();
    let stats = label_statistics(&sets, &sizes).unwrap();
    // independent pass over the text export
    let (mut sp, mut pp, mut ng, mut train) = (0, 0, 0, 0);
    for s in &sets {
        train += s.num_points;
        for line in s.to_text().lines() {
            match line.split_whitespace().nth(1).unwrap() {
                "sparse" => sp += 1,
                "propagated" => pp += 1,
                "negative" => ng += 1,
                _ => {}
            }
        }
    }
    let all: usize = sizes.iter().sum();
    assert_eq!(stats.sparse_rate, sp as f64 / all as f64);
    assert_eq!(stats.propagated_rate, pp as f64 / train as f64);
    assert_eq!(stats.negative_rate, ng as f64 / train as f64);
}
