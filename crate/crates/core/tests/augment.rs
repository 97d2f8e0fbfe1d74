use heatmark_core::augment::{sample_params, warp_image, warp_landmarks};
use heatmark_core::{AffineParams, AugmentConfig, LandmarkSet, Point, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rotation(deg: f64, size: usize) -> AffineParams {
    AffineParams {
        rotation_deg: deg,
        ..AffineParams::identity(AffineParams::image_center(size, size))
    }
}

#[test]
fn quarter_turn_is_an_index_permutation() {
    let s = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0f32));
    let out = warp_image(&img, &rotation(90.0, s)).unwrap();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                // Output (x, y) comes from source (S - 1 - y, x).
                let src = img.data()[c * s * s + x * s + (s - 1 - y)];
                let got = out.data()[c * s * s + y * s + x];
                assert!((got - src).abs() < 1e-6, "({x}, {y}) channel {c}");
            }
        }
    }
    let points: Vec<Point> = (0..s as i64).map(|i| Point::new(i, (i * 5) % s as i64)).collect();
    let (moved, visible) = warp_landmarks(&LandmarkSet::new(points.clone(), s).unwrap(), &rotation(90.0, s)).unwrap();
    for (p, q) in points.iter().zip(moved.points()) {
        assert_eq!(*q, Point::new(p.y, s as i64 - 1 - p.x));
    }
    assert!(visible.iter().all(|&v| v));
}

#[test]
fn identity_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::from_fn(&[3, 16, 12], |_| rng.random_range(0.0..1.0f32));
    let id = AffineParams::identity(AffineParams::image_center(12, 16));
    assert_eq!(warp_image(&img, &id).unwrap(), img);
    let l = LandmarkSet::new(vec![Point::new(0, 0), Point::new(11, 5), Point::new(15, 15)], 16).unwrap();
    let (out, visible) = warp_landmarks(&l, &id).unwrap();
    assert_eq!(out, l);
    assert_eq!(visible, vec![true; 3]);
}

#[test]
fn bright_pixel_follows_its_landmark() {
    let s = 64;
    let config = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for draw in 0..200 {
        let params = sample_params(&config, &mut rng, s, s);
        let p = Point::new(rng.random_range(16..48), rng.random_range(16..48));
        let mut img = Tensor::zeros(&[1, s, s]);
        img.data_mut()[p.y as usize * s + p.x as usize] = 1.0;
        let warped = warp_image(&img, &params).unwrap();
        let (_, idx) = warped.max_with_index().unwrap();
        let found = Point::new((idx % s) as i64, (idx / s) as i64);
        let (moved, visible) = warp_landmarks(&LandmarkSet::new(vec![p], s).unwrap(), &params).unwrap();
        assert!(visible[0]);
        let d = found.distance(moved.points()[0]);
        assert!(d <= 1.0, "draw {draw}: image peak {found:?} vs landmark {:?} ({params:?})", moved.points()[0]);
    }
}

#[test]
fn off_grid_landmarks_are_clamped_and_flagged() {
    let l = LandmarkSet::new(vec![Point::new(0, 0), Point::new(8, 8)], 17).unwrap();
    let (out, visible) = warp_landmarks(&l, &rotation(45.0, 17)).unwrap();
    assert_eq!(visible, vec![false, true]);
    assert_eq!(out.points()[1], Point::new(8, 8));
    let p = out.points()[0];
    assert!(p.x >= 0 && p.x < 17 && p.y >= 0 && p.y < 17);
}

proptest! {
    #[test]
    fn map_inverse_round_trip(rot in -30.0f64..30.0, sx in -0.3f64..0.3, sy in -0.3f64..0.3, x in -50.0f64..150.0, y in -50.0f64..150.0) {
        let params = AffineParams { rotation_deg: rot, shear_x: sx, shear_y: sy, center: (31.5, 31.5) };
        let map = params.to_map();
        let inv = map.inverse().unwrap();
        let (u, v) = map.apply(x, y);
        let (bx, by) = inv.apply(u, v);
        prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        let (cx, cy) = map.apply(31.5, 31.5);
        prop_assert!((cx - 31.5).abs() < 1e-9 && (cy - 31.5).abs() < 1e-9);
    }

    #[test]
    fn warped_values_stay_in_range(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(&[3, 20, 20], |_| rng.random_range(0.2..0.9f32));
        let params = sample_params(&AugmentConfig::default(), &mut rng, 20, 20);
        let out = warp_image(&img, &params).unwrap();
        for &v in out.data() {
            prop_assert!(v == 0.0 || (0.2 - 1e-6..=0.9 + 1e-6).contains(&v));
        }
    }
}
