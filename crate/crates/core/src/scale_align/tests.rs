use std::collections::BTreeMap;

use nalgebra::{SMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synthetic::{random_rotation, ring, RingConfig};
use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn rand_map(rng: &mut ChaCha8Rng) -> SMatrix<f64, 3, 7> {
    SMatrix::<f64, 3, 7>::from_fn(|_, _| rng.random_range(-2.0..2.0))
}

fn brute_form(y1: &[Vector3<f64>], y2: &[Vector3<f64>], w: &[f64], m: &SMatrix<f64, 3, 7>) -> f64 {
    let a1 = m.fixed_columns::<3>(0);
    let a2 = -m.fixed_columns::<3>(3);
    let b = m.column(6);
    y1.iter()
        .zip(y2)
        .zip(w)
        .map(|((p, q), c)| ((a1 * p - a2 * q + b) * *c).norm_squared())
        .sum()
}

fn rel_frobenius(a: &Gram, b: &Gram) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn pair_weight_map_cases() {
    let two = ConfidenceMap::filled(3, 2, 2.0);
    assert!(pair_weight_map(&two, &two).unwrap().as_slice().iter().all(|v| *v == 1.0));
    let mut a = ConfidenceMap::filled(3, 2, 0.7);
    a.set(1, 1, 0.0);
    let c = pair_weight_map(&a, &two).unwrap();
    assert_eq!(*c.get(1, 1), 0.0);
    let zero = ConfidenceMap::new(3, 2);
    assert!(pair_weight_map(&zero, &zero).unwrap().as_slice().iter().all(|v| *v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = ConfidenceMap::from_fn(7, 5, |_, _| rng.random_range(0.0..3.0));
    let b = ConfidenceMap::from_fn(7, 5, |_, _| rng.random_range(0.0..3.0));
    let c = pair_weight_map(&a, &b).unwrap();
    for k in 0..a.len() {
        let (x, y) = (a.as_slice()[k], b.as_slice()[k]);
        assert!((c.as_slice()[k] - x * y / (x + y)).abs() < 1e-12);
    }
    assert!(pair_weight_map(&a, &ConfidenceMap::new(2, 2)).is_err());
}

#[test]
fn rank_one_compression() {
    let z = [Vector3::zeros()];
    let eq = compress(&z, &z, &[1.0]).unwrap();
    let g = gram_matrix(&z, &z, &[1.0]).unwrap();
    let eig = g.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    assert!(ev[..6].iter().all(|v| v.abs() < 1e-15));
    assert!((ev[6] - 1.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let m = rand_map(&mut rng);
        let b = m.column(6).norm_squared();
        assert!((eq.quadratic_form(&m) - b).abs() < 1e-12 * b.max(1.0));
    }
}

#[test]
fn compression_matches_brute_force_on_large_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let y1: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, 3.0) + Vector3::new(0.0, 0.0, 5.0)).collect();
    let y2: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, 3.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let eq = compress(&y1, &y2, &w).unwrap();
    assert!(rel_frobenius(&eq.gram(), &gram_matrix(&y1, &y2, &w).unwrap()) <= 1e-8);
    for _ in 0..50 {
        let m = rand_map(&mut rng);
        let brute = brute_form(&y1, &y2, &w, &m);
        let fast = eq.quadratic_form(&m);
        assert!((fast - brute).abs() / (brute + 1e-30) <= 1e-8, "{fast} vs {brute}");
    }
}

#[test]
fn zero_weights_compress_to_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y1: Vec<_> = (0..20).map(|_| rand_vec(&mut rng, 1.0)).collect();
    let g = gram_matrix(&y1, &y1, &[0.0; 20]).unwrap();
    assert_eq!(g, Gram::zeros());
    let eq = compress(&y1, &y1, &[0.0; 20]).unwrap();
    assert!(eq.w.iter().all(|w| *w == 0.0) || eq.gram().norm() == 0.0);
    assert_eq!(eq.quadratic_form(&rand_map(&mut rng)), 0.0);
}

#[test]
fn negative_weight_rejected() {
    let p = [Vector3::zeros(); 2];
    assert!(compress(&p, &p, &[1.0, -0.5]).is_err());
    assert!(compress(&[], &[], &[]).is_err());
    assert!(compress(&p, &p[..1], &[1.0, 1.0]).is_err());
}

#[test]
fn degenerate_columns_keep_the_gram_exact() {
    // centred symmetric clouds: the homogeneous coordinate decouples, so the
    // spatial eigenvectors have a vanishing 7th component
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    for _ in 0..50 {
        let (p, q) = (rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0));
        y1.extend([p, -p]);
        y2.extend([q, -q]);
    }
    let w = vec![1.0; y1.len()];
    let eq = compress(&y1, &y2, &w).unwrap();
    assert!(!eq.degenerate_columns.is_empty());
    assert!(rel_frobenius(&eq.gram(), &gram_matrix(&y1, &y2, &w).unwrap()) <= 1e-8);
    for _ in 0..20 {
        let m = rand_map(&mut rng);
        let brute = brute_form(&y1, &y2, &w, &m);
        assert!((eq.quadratic_form(&m) - brute).abs() / (brute + 1e-30) <= 1e-8);
    }
    assert_eq!(eq.storage_scalars(), 7 * (3 + 3 + 1));
}

fn two_view(noise: f64, seed: u64) -> synthetic::SyntheticPriors {
    ring(&RingConfig {
        views: 2,
        noise,
        seed,
        ..RingConfig::default()
    })
    .unwrap()
}

#[test]
fn aligned_pair_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y: Vec<_> = (0..100).map(|_| rand_vec(&mut rng, 2.0)).collect();
    let w: Vec<f64> = (0..100).map(|_| rng.random_range(0.1..1.0)).collect();
    let eq = compress(&y, &y, &w).unwrap();
    let t = RigidTransform {
        rotation: random_rotation(&mut rng),
        translation: rand_vec(&mut rng, 3.0),
    };
    let l = pair_loss_eff(&eq, 1.3, 1.3, &t, &t);
    let scale = pair_loss_eff(&eq, 1.3, 0.0, &t, &t).value;
    assert!(l.value.abs() <= 1e-12 * scale);
}

#[test]
fn ground_truth_scales_zero_the_pair_loss() {
    let s = two_view(0.0, 7);
    let (r01, r10) = (&s.records[0], &s.records[1]);
    let eq = compress_pair(r01, r10).unwrap();
    let (k01, k10) = (s.true_scales[&(0, 1)], s.true_scales[&(1, 0)]);
    let brute = pair_loss_bruteforce(r01, r10, k01, k10, &s.poses[0], &s.poses[1]).unwrap();
    assert!(brute < 1e-20, "{brute}");
    let eff = pair_loss_eff(&eq, k01, k10, &s.poses[0], &s.poses[1]).value;
    assert!(eff.abs() < 1e-10, "{eff}");
}

#[test]
fn compressed_pair_loss_matches_brute_force() {
    let s = two_view(0.05, 8);
    let (r01, r10) = (&s.records[0], &s.records[1]);
    let eq = compress_pair(r01, r10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (a, b) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let ti = RigidTransform { rotation: random_rotation(&mut rng), translation: rand_vec(&mut rng, 2.0) };
        let tj = RigidTransform { rotation: random_rotation(&mut rng), translation: rand_vec(&mut rng, 2.0) };
        let brute = pair_loss_bruteforce(r01, r10, a, b, &ti, &tj).unwrap();
        let l = pair_loss_eff(&eq, a, b, &ti, &tj);
        assert!((l.value - brute).abs() / (brute + 1e-30) <= 1e-8);
        let h = 1e-6;
        let fd_a = (pair_loss_eff(&eq, a + h, b, &ti, &tj).value - pair_loss_eff(&eq, a - h, b, &ti, &tj).value) / (2.0 * h);
        let fd_b = (pair_loss_eff(&eq, a, b + h, &ti, &tj).value - pair_loss_eff(&eq, a, b - h, &ti, &tj).value) / (2.0 * h);
        assert!((fd_a - l.d_s_ij).abs() <= 1e-6 * l.d_s_ij.abs().max(1.0));
        assert!((fd_b - l.d_s_ji).abs() <= 1e-6 * l.d_s_ji.abs().max(1.0));
    }
}

#[test]
fn mirrored_records_required() {
    let s = two_view(0.0, 10);
    assert!(compress_pair(&s.records[0], &s.records[0]).is_err());
    assert!(solve_scales(&s.records[..1], &s.poses, &SolverConfig::default()).is_err());
}

fn conf_record(i: usize, j: usize, c: f64) -> PointMapRecord {
    PointMapRecord {
        i,
        j,
        x11: PointMap::filled(2, 2, Vector3::new(0.0, 0.0, 1.0)),
        c11: ConfidenceMap::filled(2, 2, c / 4.0),
        x21: PointMap::filled(2, 2, Vector3::new(0.0, 0.0, 1.0)),
        c21: ConfidenceMap::filled(2, 2, 1.0),
    }
}

#[test]
fn anchor_selection() {
    let single = [conf_record(0, 3, 1.0)];
    assert_eq!(select_anchor(0, &single).unwrap(), 0);
    let two = [conf_record(0, 1, 5.0), conf_record(0, 2, 7.0), conf_record(1, 0, 100.0)];
    assert_eq!(select_anchor(0, &two).unwrap(), 1);
    let tie = [conf_record(0, 4, 2.0), conf_record(0, 2, 2.0), conf_record(0, 3, 2.0)];
    assert_eq!(select_anchor(0, &tie).unwrap(), 1);
    assert!(matches!(select_anchor(5, &two), Err(Error::NoPairs(5))));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let recs: Vec<_> = (1..6).map(|j| conf_record(0, j, rng.random_range(0.0..10.0))).collect();
        let mut best = 0;
        for k in 1..recs.len() {
            if recs[k].confidence_sum() > recs[best].confidence_sum() {
                best = k;
            }
        }
        assert_eq!(select_anchor(0, &recs).unwrap(), best);
    }
}

#[test]
fn intra_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = PointMap::from_fn(5, 4, |_, _| rand_vec(&mut rng, 1.0).normalize());
    let ones = ConfidenceMap::filled(5, 4, 1.0);
    let l = intra_loss(&x, &x, &ones, 1.7, 1.7, IntraPenalty::default()).unwrap();
    assert_eq!(l.value, 0.0);
    let l = intra_loss(&x, &x, &ones, 2.0, 1.0, IntraPenalty::L1).unwrap();
    let expect: f64 = x.as_slice().iter().map(|p| p.abs().sum()).sum();
    assert!((l.value - expect).abs() < 1e-12);
    assert!(intra_loss(&x, &PointMap::new(4, 4), &ones, 1.0, 1.0, IntraPenalty::L1).is_err());
}

#[test]
fn intra_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for penalty in [IntraPenalty::L1, IntraPenalty::default()] {
        for _ in 0..10 {
            let a = PointMap::from_fn(6, 5, |_, _| rand_vec(&mut rng, 3.0));
            let b = PointMap::from_fn(6, 5, |_, _| rand_vec(&mut rng, 3.0));
            let c = ConfidenceMap::from_fn(6, 5, |_, _| rng.random_range(0.0..2.0));
            let (s1, s2) = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
            let mut naive = 0.0;
            for k in 0..a.len() {
                for d in 0..3 {
                    let u = c.as_slice()[k] * (s1 * a.as_slice()[k][d] - s2 * b.as_slice()[k][d]);
                    naive += match penalty {
                        IntraPenalty::L1 => u.abs(),
                        IntraPenalty::Huber { width } if u.abs() <= width => u * u / (2.0 * width),
                        IntraPenalty::Huber { width } => u.abs() - width / 2.0,
                    };
                }
            }
            let l = intra_loss(&a, &b, &c, s1, s2, penalty).unwrap();
            assert!((l.value - naive).abs() < 1e-10);
            let h = 1e-7;
            let fd = (intra_loss(&a, &b, &c, s1 + h, s2, penalty).unwrap().value
                - intra_loss(&a, &b, &c, s1 - h, s2, penalty).unwrap().value)
                / (2.0 * h);
            assert!((fd - l.d_s_ij).abs() < 1e-5 * l.d_s_ij.abs().max(1.0));
        }
    }
}

fn max_ratio_error(sol: &ScaleSolution, truth: &BTreeMap<(usize, usize), f64>) -> f64 {
    let pin = sol.pinned[0];
    let (sp, tp) = (sol.scales[&pin], truth[&pin]);
    sol.scales
        .iter()
        .map(|(k, s)| ((s / sp) / (truth[k] / tp) - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn single_pair_matches_closed_form() {
    let s = two_view(0.03, 14);
    let sol = solve_scales(&s.records, &s.poses, &SolverConfig::default()).unwrap();
    let eq = compress_pair(&s.records[0], &s.records[1]).unwrap();
    let (p0, p1) = (&s.poses[0], &s.poses[1]);
    let p = pair_loss_eff(&eq, 1.0, 0.0, p0, p1).value;
    let r = pair_loss_eff(&eq, 0.0, 1.0, p0, p1).value;
    let q = (p + r - pair_loss_eff(&eq, 1.0, 1.0, p0, p1).value) / 2.0;
    let (s01, s10) = (sol.scales[&(0, 1)], sol.scales[&(1, 0)]);
    let expect = if sol.pinned[0] == (0, 1) { q / r } else { p / q };
    assert!((s10 / s01 - expect).abs() / expect < 1e-4, "{} vs {expect}", s10 / s01);
}

#[test]
fn ring_recovers_ground_truth_ratios() {
    let s = ring(&RingConfig::default()).unwrap();
    let sol = solve_scales(&s.records, &s.poses, &SolverConfig::default()).unwrap();
    assert_eq!(sol.components, 1);
    let err = max_ratio_error(&sol, &s.true_scales);
    assert!(err < 1e-3, "max ratio error {err}");
    assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn ring_tolerates_one_percent_noise() {
    let s = ring(&RingConfig {
        noise: 0.01,
        ..RingConfig::default()
    })
    .unwrap();
    let sol = solve_scales(&s.records, &s.poses, &SolverConfig::default()).unwrap();
    let err = max_ratio_error(&sol, &s.true_scales);
    assert!(err < 0.02, "max ratio error {err}");
}

#[test]
fn gauge_covariance() {
    let base = ring(&RingConfig::default()).unwrap();
    let a = solve_scales(&base.records, &base.poses, &SolverConfig::default()).unwrap();
    for gamma in [0.5, 3.0] {
        let scaled: BTreeMap<_, _> = base.true_scales.iter().map(|(k, v)| (*k, v * gamma)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pairs: Vec<(usize, usize)> = base.records.iter().filter(|r| r.i < r.j).map(|r| (r.i, r.j)).collect();
        let mut records = synthetic::records_from_points(&base.poses, &base.points, &pairs, &scaled, (0.5, 1.5), 0.0, &mut rng).unwrap();
        // keep the confidences of the base problem so the pinned record is the same
        for (r, b) in records.iter_mut().zip(&base.records) {
            r.c11 = b.c11.clone();
            r.c21 = b.c21.clone();
        }
        let b = solve_scales(&records, &base.poses, &SolverConfig::default()).unwrap();
        assert_eq!(a.pinned, b.pinned);
        for (k, sa) in &a.scales {
            let ra = sa / a.scales[&a.pinned[0]];
            let rb = b.scales[k] / b.scales[&b.pinned[0]];
            assert!((ra - rb).abs() / ra < 1e-6, "{k:?}: {ra} vs {rb}");
        }
    }
}

#[test]
fn disconnected_graph_solved_per_component() {
    let a = two_view(0.0, 15);
    let b = two_view(0.0, 16);
    let mut records = a.records.clone();
    for r in &b.records {
        let mut r = r.clone();
        r.i += 2;
        r.j += 2;
        records.push(r);
    }
    let mut poses = a.poses.clone();
    poses.extend(b.poses.iter().copied());
    let sol = solve_scales(&records, &poses, &SolverConfig::default()).unwrap();
    assert_eq!(sol.components, 2);
    assert_eq!(sol.pinned.len(), 2);
    assert!(sol.scales.values().all(|s| *s > 0.0));
}

#[test]
fn priors_use_scaled_depth() {
    let s = two_view(0.0, 17);
    let r = &s.records[0];
    let p = r.to_pair_prior(2.5);
    for k in 0..r.x11.len() {
        let z = r.x11.as_slice()[k].z;
        assert_eq!(p.depth.as_slice()[k], if z > 0.0 { 2.5 * z } else { 0.0 });
    }
    assert_eq!(p.confidence, r.c11);
}

#[test]
fn scale_table_round_trip() {
    let s = two_view(0.0, 18);
    let sol = solve_scales(&s.records, &s.poses, &SolverConfig { steps: 5, ..SolverConfig::default() }).unwrap();
    let parsed = scales_from_table(&scales_to_table(&sol)).unwrap();
    for (k, v) in &sol.scales {
        assert!((parsed[k] - v).abs() <= 1e-11 * v);
    }
    assert!(scales_from_table("0 1 -1 2\n").is_err());
}

#[test]
fn non_finite_points_rejected() {
    let mut s = two_view(0.0, 19);
    s.records[0].x11.set(0, 0, Vector3::new(f64::NAN, 0.0, 1.0));
    assert!(solve_scales(&s.records, &s.poses, &SolverConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compression_equivalence(seed in any::<u64>(), n in 1usize..400) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y1: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, 4.0)).collect();
        let y2: Vec<_> = (0..n).map(|_| rand_vec(&mut rng, 4.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let eq = compress(&y1, &y2, &w).unwrap();
        let g = gram_matrix(&y1, &y2, &w).unwrap();
        if g.norm() > 0.0 {
            prop_assert!(rel_frobenius(&eq.gram(), &g) <= 1e-8);
        }
        for _ in 0..5 {
            let m = rand_map(&mut rng);
            let brute = brute_form(&y1, &y2, &w, &m);
            prop_assert!((eq.quadratic_form(&m) - brute).abs() / (brute + 1e-30) <= 1e-8);
        }
    }
}
