use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_table(k: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        // Quantized values so ties between candidates actually happen.
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0..6) as f64 + 0.5).collect();
        let s: f64 = raw.iter().sum();
        probs.push(raw.iter().map(|v| v / s).collect());
        labels.push(i % k);
    }
    (probs, labels)
}

fn one_hot(k: usize, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for d in 0..k {
        for _ in 0..per {
            let mut r = vec![0.0; k];
            r[d] = 1.0;
            probs.push(r);
            labels.push(d);
        }
    }
    (probs, labels)
}

/// Enumerates every n-subset of all labels via bitmasks, keeps those holding
/// the truth, and scores by a manual scan.
fn brute_force_nway(probs: &[Vec<f64>], labels: &[usize], n: usize) -> (u64, u64) {
    let k = probs[0].len();
    let (mut correct, mut total) = (0, 0);
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as usize != n {
            continue;
        }
        for (row, &truth) in probs.iter().zip(labels) {
            if mask & (1 << truth) == 0 {
                continue;
            }
            total += 1;
            let mut best = usize::MAX;
            for c in 0..k {
                if mask & (1 << c) != 0 && (best == usize::MAX || row[c] > row[best]) {
                    best = c;
                }
            }
            if best == truth {
                correct += 1;
            }
        }
    }
    (correct, total)
}

#[test]
fn nway_matches_brute_force_on_six_drivers() {
    let (probs, labels) = random_table(6, 20, 3);
    let cfg = EvalConfig::default();
    for n in 2..=6 {
        assert!(enumerates_all(6, n, cfg.sampling_cap));
        let t = nway_trials(&probs, &labels, n, &cfg).unwrap();
        let (c, tot) = brute_force_nway(&probs, &labels, n);
        assert_eq!((t.correct, t.total), (c, tot), "n = {n}");
        assert_eq!(t.accuracy(), c as f64 / tot as f64);
    }
}

#[test]
fn enumerated_and_sampled_set_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = std::collections::BTreeSet::new();
    let c2 = for_each_candidate_set(51, 7, 2, 4000, &mut rng, |s| {
        assert_eq!(s[0], 7);
        seen.insert(s.to_vec());
    });
    assert_eq!((c2, seen.len()), (50, 50));
    let c3 = for_each_candidate_set(51, 7, 3, 4000, &mut rng, |s| {
        assert!(s.len() == 3 && s.contains(&7));
    });
    assert_eq!(c3, 1225);
    for n in [4, 5] {
        let c = for_each_candidate_set(51, 7, n, 4000, &mut rng, |s| {
            let mut u = s.to_vec();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), n);
            assert!(s.contains(&7));
        });
        assert_eq!(c, 4000);
    }
    assert_eq!(binomial(50, 2), 1225);
    assert_eq!(binomial(50, 4), 230_300);
    // Small driver pools are enumerated at every size.
    let c4 = for_each_candidate_set(6, 0, 4, 4000, &mut rng, |_| {});
    assert_eq!(c4, 10);
    assert_eq!(for_each_candidate_set(6, 0, 4, 9, &mut rng, |_| {}), 9);
}

#[test]
fn sampled_sets_cover_others_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = [0u32; 40];
    assert!(!enumerates_all(40, 4, 4000));
    for_each_candidate_set(40, 2, 4, 4000, &mut rng, |s| {
        for &l in &s[1..] {
            hits[l] += 1;
        }
    });
    // Each of the 39 others appears with probability 3/39 per draw.
    let expect = 4000.0 * 3.0 / 39.0;
    let sd = (4000.0 * (3.0 / 39.0) * (36.0 / 39.0f64)).sqrt();
    for (l, &h) in hits.iter().enumerate() {
        if l == 2 {
            assert_eq!(h, 0);
        } else {
            assert!((h as f64 - expect).abs() < 4.0 * sd, "label {l}: {h}");
        }
    }
}

#[test]
fn one_hot_truth_scores_perfectly() {
    let (probs, labels) = one_hot(6, 3);
    let cfg = EvalConfig::default();
    for n in 2..=5 {
        assert_eq!(nway_accuracy(&probs, &labels, n, &cfg).unwrap(), 1.0);
        assert_eq!(nota_accuracy(&probs, &labels, n, 0.5, &cfg).unwrap(), 1.0);
        assert_eq!(nota_accuracy(&probs, &labels, n, 1.0, &cfg).unwrap(), 0.5);
    }
    let c = confusion_matrix(&probs, &labels).unwrap();
    assert_eq!(c.accuracy(), 1.0);
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(c.matrix[i][j], if i == j { 3 } else { 0 });
        }
    }
}

#[test]
fn constant_predictor_fills_one_column() {
    let (_, labels) = one_hot(4, 5);
    let probs = vec![vec![0.1, 0.2, 0.6, 0.1]; labels.len()];
    let c = confusion_matrix(&probs, &labels).unwrap();
    for row in &c.matrix {
        assert_eq!(row.iter().sum::<u64>(), 5);
        assert_eq!(row[2], 5);
    }
    assert_eq!(c.accuracy(), 0.25);
}

#[test]
fn nota_at_threshold_zero_never_abstains() {
    let (probs, labels) = random_table(6, 20, 4);
    let cfg = EvalConfig::default();
    for n in 2..=4 {
        let t = nota_trials(&probs, &labels, n, 0.0, &cfg).unwrap();
        // Only the with-truth half can score; it behaves like restricted n-way.
        assert!(t.correct * 2 <= t.total);
        assert!(t.accuracy() <= 0.5);
    }
}

proptest! {
    #[test]
    fn nota_at_threshold_one_is_one_half(seed in 0u64..1000, k in 3usize..9) {
        let (probs, labels) = random_table(k, 12, seed);
        let cfg = EvalConfig { seed, ..Default::default() };
        for n in 2..k {
            prop_assert_eq!(nota_accuracy(&probs, &labels, n, 1.0, &cfg).unwrap(), 0.5);
        }
    }

    #[test]
    fn accuracies_are_probabilities(seed in 0u64..1000) {
        let (probs, labels) = random_table(5, 10, seed);
        let cfg = EvalConfig { seed, sampling_cap: 50, ..Default::default() };
        for n in 2..=4 {
            let a = nway_accuracy(&probs, &labels, n, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn nota_mixture_is_balanced() {
    assert_eq!(nota_half_size(51, 2, 4000), 25);
    assert_eq!(nota_half_size(51, 3, 4000), 612);
    assert_eq!(nota_half_size(51, 4, 4000), 2000);
    assert_eq!(nota_half_size(8, 2, 4000), 3);
    let (probs, labels) = random_table(8, 16, 5);
    let t = nota_trials(&probs, &labels, 2, 0.3, &EvalConfig::default()).unwrap();
    assert_eq!(t.total, 16 * 6);
}

#[test]
fn protocols_are_deterministic() {
    let (probs, labels) = random_table(8, 40, 6);
    let cfg = EvalConfig {
        seed: 11,
        ..Default::default()
    };
    for n in 4..=5 {
        assert_eq!(
            nway_trials(&probs, &labels, n, &cfg).unwrap(),
            nway_trials(&probs, &labels, n, &cfg).unwrap()
        );
        assert_eq!(
            nota_trials(&probs, &labels, n, 0.4, &cfg).unwrap(),
            nota_trials(&probs, &labels, n, 0.4, &cfg).unwrap()
        );
    }
}

#[test]
fn invalid_group_sizes_are_rejected() {
    let (probs, labels) = random_table(4, 8, 7);
    let cfg = EvalConfig::default();
    assert!(nway_accuracy(&probs, &labels, 5, &cfg).is_err());
    assert!(nway_accuracy(&probs, &labels, 1, &cfg).is_err());
    assert!(nota_accuracy(&probs, &labels, 4, 0.5, &cfg).is_err());
    assert!(cfg.validate(4).is_err());
    assert!(EvalConfig {
        group_sizes: vec![2, 3],
        ..cfg
    }
    .validate(4)
    .is_ok());
}

#[test]
fn area_accuracy_splits_by_area() {
    let (probs, labels) = one_hot(3, 4);
    let mut probs = probs;
    let areas: Vec<Area> = (0..12)
        .map(|i| if i % 2 == 0 { Area::Urban } else { Area::Highway })
        .collect();
    // Flip every highway window to a wrong prediction.
    for i in (1..12).step_by(2) {
        probs[i] = vec![0.0; 3];
        probs[i][labels[i]] = 0.1;
        probs[i][(labels[i] + 1) % 3] = 0.9;
    }
    let acc = area_accuracy(&probs, &labels, &areas, &EvalConfig::default()).unwrap();
    assert_eq!(acc.len(), 2);
    assert_eq!(acc["urban"], 1.0);
    assert_eq!(acc["highway"], 0.5);
}

#[test]
fn report_round_trips_and_sums_rows() {
    let (probs, labels) = random_table(6, 30, 8);
    let areas = vec![Area::Suburban; 30];
    let drivers: Vec<String> = (0..6).map(|i| format!("d{i}")).collect();
    let split = ScoredSplit {
        probs: &probs,
        labels: &labels,
        areas: &areas,
    };
    let cfg = EvalConfig {
        group_sizes: vec![2, 3],
        ..Default::default()
    };
    let r = EvalReport::evaluate(&drivers, &split, &split, &cfg).unwrap();
    assert_eq!(r.windows_per_driver, vec![5; 6]);
    assert!(r.nota.values().all(|v| nota_threshold_grid().contains(&v.threshold)));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    r.write(&p).unwrap();
    assert_eq!(EvalReport::read(&p).unwrap(), r);
    assert_eq!(r.confusion_csv().lines().count(), 7);
}

fn pairwise(points: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            out.push(((points[i].0 - points[j].0).powi(2) + (points[i].1 - points[j].1).powi(2)).sqrt());
        }
    }
    out
}

#[test]
fn pca_preserves_planar_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Orthonormal-ish plane in R^5 spanned by u, v.
    let u = [0.6, 0.0, 0.8, 0.0, 0.0];
    let v = [0.0, 0.6, 0.0, 0.0, 0.8];
    let coords: Vec<(f64, f64)> = (0..40)
        .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)))
        .collect();
    let pts: Vec<Vec<f64>> = coords
        .iter()
        .map(|&(a, b)| (0..5).map(|j| 1.0 + a * u[j] + b * v[j]).collect())
        .collect();
    let labels = vec![0; 40];
    let proj = pca_2d(&pts, &labels).unwrap();
    let got: Vec<(f64, f64)> = proj.iter().map(|p| (p.x, p.y)).collect();
    for (a, b) in pairwise(&coords).iter().zip(pairwise(&got)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn pca_of_identical_points_collapses() {
    let pts = vec![vec![1.0, 2.0, 3.0]; 10];
    let proj = pca_2d(&pts, &[0; 10]).unwrap();
    assert!(proj.iter().all(|p| p.x == proj[0].x && p.y == proj[0].y));
}

#[test]
fn tsne_is_reproducible_and_separates_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..25 {
            pts.push(
                (0..6)
                    .map(|j| if j == c { 10.0 } else { 0.0 } + rng.random_range(-0.5..0.5))
                    .collect::<Vec<f64>>(),
            );
            labels.push(c);
        }
    }
    let cfg = TsneConfig {
        seed: 4,
        ..Default::default()
    };
    let a = tsne_2d(&pts, &labels, &cfg).unwrap();
    let b = tsne_2d(&pts, &labels, &cfg).unwrap();
    assert_eq!(a, b);
    // Nearest neighbour in the map shares the label.
    let mut agree = 0;
    for i in 0..a.len() {
        let nn = (0..a.len())
            .filter(|&j| j != i)
            .min_by(|&x, &y| {
                let dx = (a[i].x - a[x].x).powi(2) + (a[i].y - a[x].y).powi(2);
                let dy = (a[i].x - a[y].x).powi(2) + (a[i].y - a[y].y).powi(2);
                dx.total_cmp(&dy)
            })
            .unwrap();
        agree += (a[nn].label == a[i].label) as usize;
    }
    assert!(agree >= 72, "{agree}");
}
