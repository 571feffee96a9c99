use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const W: usize = 40;
const H: usize = 30;
const F: f64 = 20.0;

fn cam_at(rot: Matrix3<f64>, center: Vector3<f64>) -> Camera {
    Camera::new(F, F, (W as f64 - 1.0) / 2.0, (H as f64 - 1.0) / 2.0, rot, -(rot * center), W, H).unwrap()
}

fn pair() -> (Camera, Camera) {
    (
        cam_at(Matrix3::identity(), Vector3::zeros()),
        cam_at(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)),
    )
}

fn fronto(cam: &Camera, z: f64) -> DepthMap {
    plane_depth(cam, &Vector3::z(), z)
}

fn random_depth(rng: &mut ChaCha8Rng, w: usize, h: usize, holes: f64) -> DepthMap {
    DepthMap::from_fn(w, h, |_, _| {
        if rng.random::<f64>() < holes {
            0.0
        } else {
            rng.random_range(1.0..10.0)
        }
    })
}

#[test]
fn identity_warp_reproduces_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ci, _) = pair();
    let d = random_depth(&mut rng, W, H, 0.2);
    let w = warp_depth(&d, &ci, &ci).unwrap();
    for k in 0..d.len() {
        let v = d.as_slice()[k];
        assert_eq!(w.mask.as_slice()[k], v > 0.0);
        if v > 0.0 {
            assert_eq!(w.depth.as_slice()[k], v);
            assert_eq!(w.source.as_slice()[k], Some((k, 1.0)));
        }
    }
}

#[test]
fn fronto_plane_under_translation() {
    let (ci, cj) = pair();
    let w = warp_depth(&fronto(&ci, 5.0), &ci, &cj).unwrap();
    for y in 0..H {
        for x in 0..W {
            // disparity F * 1 / 5 = 4 px
            assert_eq!(*w.mask.get(x, y), x + 4 < W, "({x},{y})");
            if *w.mask.get(x, y) {
                assert!((w.depth.get(x, y) - 5.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn camera_facing_away_sees_nothing() {
    let (ci, _) = pair();
    let back = cam_at(*Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI).matrix(), Vector3::zeros());
    let w = warp_depth(&fronto(&ci, 5.0), &ci, &back).unwrap();
    assert_eq!(w.valid_count(), 0);
}

#[test]
fn nearer_depth_wins_collisions() {
    let (ci, cj) = pair();
    let mut d = fronto(&ci, 5.0);
    // at depth 2.5 the disparity is 8 px, so (20, 10) lands where plane pixel (16, 10) does
    d.set(20, 10, 2.5);
    let w = warp_depth(&d, &ci, &cj).unwrap();
    assert!((w.depth.get(12, 10) - 2.5).abs() < 1e-12);
    assert_eq!(w.source.get(12, 10).unwrap().0, d.index(20, 10));
}

#[test]
fn consistent_plane_has_zero_loss() {
    let (ci, cj) = pair();
    let l = consis_loss(&fronto(&ci, 5.0), &fronto(&cj, 5.0), &ci, &cj).unwrap();
    assert!(l.value.abs() < 1e-9);
    assert!(l.valid_ij > 0 && l.valid_ji > 0);
    assert!(!l.empty);
}

#[test]
fn floater_patch_gradients_push_toward_background() {
    let (ci, cj) = pair();
    let mut di = fronto(&ci, 5.0);
    let patch = |x: usize, y: usize| (14..20).contains(&x) && (10..16).contains(&y);
    for y in 0..H {
        for x in 0..W {
            if patch(x, y) {
                di.set(x, y, 2.5);
            }
        }
    }
    let dj = fronto(&cj, 5.0);
    let l = consis_loss(&di, &dj, &ci, &cj).unwrap();
    assert!(l.value > 0.1);
    let mut strict = 0;
    for y in 0..H {
        for x in 0..W {
            let g = *l.grad_i.get(x, y);
            if patch(x, y) {
                assert!(g <= 0.0);
                strict += (g < 0.0) as usize;
            } else {
                assert_eq!(g, 0.0, "gradient leaked to ({x},{y})");
            }
        }
    }
    assert_eq!(strict, 36);
}

#[test]
fn uniform_bias_propagates_linearly() {
    let (ci, cj) = pair();
    for delta in [0.01, 0.05, 0.2] {
        let di = fronto(&ci, 5.0).map(|d| d + delta);
        let l = consis_loss(&di, &fronto(&cj, 5.0), &ci, &cj).unwrap();
        assert!((l.value - 2.0 * delta).abs() < 1e-9, "delta {delta}: {}", l.value);
    }
}

#[test]
fn zero_target_depth_is_not_compared() {
    let (ci, cj) = pair();
    let mut dj = fronto(&cj, 5.0);
    let full = consis_loss(&fronto(&ci, 5.0), &dj, &ci, &cj).unwrap();
    for y in 0..H {
        dj.set(3, y, 0.0);
    }
    let holed = consis_loss(&fronto(&ci, 5.0), &dj, &ci, &cj).unwrap();
    assert_eq!(holed.valid_ij, full.valid_ij - H);
    assert!(holed.value.abs() < 1e-9);
}

#[test]
fn disjoint_views_flag_empty() {
    let (ci, _) = pair();
    let far = cam_at(Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0));
    let l = consis_loss(&fronto(&ci, 5.0), &fronto(&far, 5.0), &ci, &far).unwrap();
    assert!(l.empty);
    assert_eq!(l.value, 0.0);
}

#[test]
fn mismatched_depth_rejected() {
    let (ci, cj) = pair();
    assert!(consis_loss(&DepthMap::new(3, 3), &fronto(&cj, 5.0), &ci, &cj).is_err());
}

#[test]
fn warps_compose_on_tilted_plane() {
    let yaw = |d: f64| *Rotation3::from_axis_angle(&Vector3::y_axis(), d.to_radians()).matrix();
    let ci = cam_at(Matrix3::identity(), Vector3::zeros());
    let cj = cam_at(yaw(-5.0), Vector3::new(0.7, 0.0, 0.0));
    let ck = cam_at(yaw(-9.0), Vector3::new(1.3, 0.2, 0.1));
    let n = Vector3::new(0.1, 0.05, 1.0).normalize();
    let dk = plane_depth(&ck, &n, 5.0);
    let mut step = 0.0f64;
    for y in 0..H {
        for x in 0..W {
            if x + 1 < W {
                step = step.max((dk.get(x + 1, y) - dk.get(x, y)).abs());
            }
            if y + 1 < H {
                step = step.max((dk.get(x, y + 1) - dk.get(x, y)).abs());
            }
        }
    }
    let di = plane_depth(&ci, &n, 5.0);
    let ij = warp_depth(&di, &ci, &cj).unwrap();
    let ijk = warp_depth(&ij.depth, &cj, &ck).unwrap();
    let ik = warp_depth(&di, &ci, &ck).unwrap();
    let mut compared = 0;
    for k in 0..ik.depth.len() {
        if ik.mask.as_slice()[k] && ijk.mask.as_slice()[k] {
            compared += 1;
            let gap = (ik.depth.as_slice()[k] - ijk.depth.as_slice()[k]).abs();
            assert!(gap <= 2.0 * step + 1e-9, "gap {gap} vs step {step}");
        }
    }
    assert!(compared > W * H / 2);
}

fn random_prior(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PairPrior {
    PairPrior {
        view: 0,
        partner: 1,
        depth: random_depth(rng, w, h, 0.3),
        confidence: Grid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0)),
    }
}

#[test]
fn prior_trivial_cases() {
    let prior = PairPrior {
        view: 0,
        partner: 1,
        depth: DepthMap::filled(6, 4, 3.0),
        confidence: Grid::filled(6, 4, 1.0),
    };
    assert_eq!(prior_loss(&prior.depth, &prior).unwrap().value, 0.0);
    let off = prior.depth.map(|d| d + 1.0);
    assert!((prior_loss(&off, &prior).unwrap().value - 1.0).abs() < 1e-15);
    let empty = PairPrior {
        depth: DepthMap::new(6, 4),
        ..prior.clone()
    };
    let l = prior_loss(&off, &empty).unwrap();
    assert!(l.empty && l.value == 0.0);
}

#[test]
fn prior_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let prior = random_prior(&mut rng, 9, 7);
        let d = random_depth(&mut rng, 9, 7, 0.0);
        let mut num = 0.0;
        let mut cnt = 0usize;
        for y in 0..7 {
            for x in 0..9 {
                let p = *prior.depth.get(x, y);
                if p > 0.0 {
                    num += prior.confidence.get(x, y) * (d.get(x, y) - p).abs();
                    cnt += 1;
                }
            }
        }
        let l = prior_loss(&d, &prior).unwrap();
        assert!((l.value - num / cnt as f64).abs() < 1e-12);
        for k in 0..d.len() {
            let p = prior.depth.as_slice()[k];
            let expect = if p > 0.0 {
                prior.confidence.as_slice()[k] * (d.as_slice()[k] - p).signum() / cnt as f64
            } else {
                0.0
            };
            assert_eq!(l.grad.as_slice()[k], expect);
        }
    }
}

#[test]
fn prior_rejects_negative_confidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut prior = random_prior(&mut rng, 4, 4);
    prior.confidence.set(1, 1, -0.5);
    assert!(prior_loss(&prior.depth, &prior).is_err());
}

#[test]
fn geometry_loss_weighting() {
    let (ci, cj) = pair();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let consis: Vec<ConsisLoss> = [0.1, 0.3]
        .iter()
        .map(|d| consis_loss(&fronto(&ci, 5.0).map(|v| v + d), &fronto(&cj, 5.0), &ci, &cj).unwrap())
        .collect();
    let priors: Vec<PriorLoss> = (0..3)
        .map(|_| {
            let p = random_prior(&mut rng, 5, 5);
            prior_loss(&random_depth(&mut rng, 5, 5, 0.0), &p).unwrap()
        })
        .collect();
    let w = GeometryWeights { lambda_consis: 0.05, lambda_prior: 0.005 };
    assert_eq!(w, GeometryWeights::default());
    let sc: f64 = consis.iter().map(|c| c.value).sum();
    let sp: f64 = priors.iter().map(|p| p.value).sum();
    assert!((geometry_loss(&consis, &priors, &w) - (0.05 * sc + 0.005 * sp)).abs() < 1e-12);
    let zero = GeometryWeights { lambda_consis: 0.0, lambda_prior: 0.0 };
    assert_eq!(geometry_loss(&consis, &priors, &zero), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn consis_nonnegative_and_symmetric(seed in any::<u64>(), bx in -1.5f64..1.5, by in -0.5f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ci = cam_at(Matrix3::identity(), Vector3::zeros());
        let cj = cam_at(Matrix3::identity(), Vector3::new(bx, by, 0.0));
        let di = random_depth(&mut rng, W, H, 0.1);
        let dj = random_depth(&mut rng, W, H, 0.1);
        let a = consis_loss(&di, &dj, &ci, &cj).unwrap();
        let b = consis_loss(&dj, &di, &cj, &ci).unwrap();
        prop_assert!(a.value >= 0.0);
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert_eq!(a.grad_i, b.grad_j);
    }

    #[test]
    fn prior_scales_with_confidence(seed in any::<u64>(), k in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = random_prior(&mut rng, 6, 6);
        let d = random_depth(&mut rng, 6, 6, 0.0);
        let scaled = PairPrior { confidence: prior.confidence.map(|c| c * k), ..prior.clone() };
        let a = prior_loss(&d, &prior).unwrap().value;
        let b = prior_loss(&d, &scaled).unwrap().value;
        prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}
