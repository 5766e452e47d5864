use std::path::Path;

use proptest::prelude::*;
use xgans::corruption::{
    corrupt, feature_point_count, make_feature_mask, make_uniform_mask, sobel_edge_map, CorruptionKind, CorruptionSpec,
};
use xgans::image::{load_image, ImageTensor, Mask, WHITE};
use xgans::scenes::{scene, step_edge};
use xgans::Error;

fn fixture(name: &str) -> ImageTensor {
    load_image(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn arb_image(max: usize) -> impl Strategy<Value = ImageTensor> {
    (4..=max, 4..=max, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut s = seed | 1;
        ImageTensor::from_fn(h, w, |_, _| {
            [0; 3].map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
            })
        })
    })
}

fn spec_for(kind: CorruptionKind, keep: f64, block: usize, seed: u64) -> CorruptionSpec {
    if kind.is_point_regime() {
        CorruptionSpec::points(kind, keep, seed)
    } else {
        CorruptionSpec::block(kind, block, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kept_pixels_equal_real_and_removed_pixels_are_filled(
        img in arb_image(40),
        donor in arb_image(40),
        kind_idx in 0usize..5,
        keep in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let kind = CorruptionKind::ALL[kind_idx];
        let side = img.height().min(img.width());
        let dside = donor.height().min(donor.width());
        let block = if kind.needs_donor() { side.min(dside).max(16) } else { side.div_ceil(2) };
        let spec = spec_for(kind, keep, block, seed);
        let donor_ref = kind.needs_donor().then_some(&donor);
        let result = corrupt(&img, &spec, donor_ref);
        if kind.needs_donor() && (side < 16 || dside < 16) {
            prop_assert!(matches!(result, Err(Error::InvalidArgument(_))));
            return Ok(());
        }
        let s = result.unwrap();
        prop_assert_eq!(&s.real, &img);
        prop_assert_eq!(s.mask.dims(), img.dims());
        for y in 0..img.height() {
            for x in 0..img.width() {
                if s.mask.get(y, x) {
                    prop_assert_eq!(s.source.pixel(y, x), img.pixel(y, x));
                } else {
                    let p = s.source.pixel(y, x);
                    match kind {
                        CorruptionKind::UniformPointsWhite
                        | CorruptionKind::FeaturePointsWhite
                        | CorruptionKind::CenterWhiteBlock => prop_assert_eq!(p, WHITE),
                        _ => prop_assert!(p.iter().all(|v| (-1.0..=1.0).contains(v))),
                    }
                }
            }
        }
        let again = corrupt(&img, &spec, donor_ref).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn feature_mask_keeps_exact_count(img in arb_image(24), keep in 0.01f64..=1.0, seed in any::<u64>()) {
        let (h, w) = img.dims();
        let m = make_feature_mask(&img, keep, seed).unwrap();
        prop_assert_eq!(m.kept_count(), feature_point_count(h, w, keep));
        prop_assert_eq!(m.kept_count(), (keep * (h * w) as f64).round() as usize);
    }

    #[test]
    fn uniform_mask_is_deterministic(h in 1usize..40, w in 1usize..40, keep in 0.01f64..=1.0, seed in any::<u64>()) {
        prop_assert_eq!(make_uniform_mask(h, w, keep, seed).unwrap(), make_uniform_mask(h, w, keep, seed).unwrap());
    }

    #[test]
    fn sobel_is_non_negative(img in arb_image(20)) {
        prop_assert!(sobel_edge_map(&img).magnitude.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn sobel_matches_direct_convolution(img in arb_image(16)) {
        let (h, w) = img.dims();
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let gray = |y: i64, x: i64| {
            let p = img.pixel(y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize);
            let l = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            (l + 1.0) / 2.0
        };
        let e = sobel_edge_map(&img);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = gray(y + dy as i64 - 1, x + dx as i64 - 1);
                        gx += kx[dy][dx] * v;
                        gy += ky[dy][dx] * v;
                    }
                }
                let want = (gx * gx + gy * gy).sqrt();
                prop_assert!((e.at(y as usize, x as usize) as f64 - want).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn uniform_keep_fraction_averaged_over_20_seeds() {
    let (h, w) = (256, 256);
    for keep in [0.01, 0.05, 0.10, 0.20] {
        let total: usize = (0..20).map(|s| make_uniform_mask(h, w, keep, s).unwrap().kept_count()).sum();
        let mean = total as f64 / 20.0;
        assert!((mean / (h * w) as f64 - keep).abs() <= 0.01, "keep {keep}: mean {mean}");
    }
}

#[test]
fn uniform_ten_percent_count_within_one_percent_of_6553_6() {
    let total: usize = (0..20).map(|s| make_uniform_mask(256, 256, 0.10, s).unwrap().kept_count()).sum();
    let mean = total as f64 / 20.0;
    assert!((mean - 6553.6).abs() <= 0.01 * 6553.6, "mean {mean}");
}

#[test]
fn full_retention_is_identity() {
    let img = scene(32, 4);
    assert!(make_uniform_mask(32, 32, 1.0, 9).unwrap().bits().iter().all(|&b| b));
    assert!(make_feature_mask(&img, 1.0, 9).unwrap().bits().iter().all(|&b| b));
    let s = corrupt(&img, &CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 1.0, 5), None).unwrap();
    assert_eq!(s.source, img);
}

#[test]
fn center_block_clears_rows_and_columns_64_to_192() {
    let img = scene(256, 1);
    let s = corrupt(&img, &CorruptionSpec::block(CorruptionKind::CenterWhiteBlock, 128, 0), None).unwrap();
    for y in 0..256 {
        for x in 0..256 {
            let inside = (64..192).contains(&y) && (64..192).contains(&x);
            assert_eq!(s.mask.get(y, x), !inside, "({y},{x})");
        }
    }
}

#[test]
fn color_noise_is_byte_identical_across_runs() {
    let img = scene(64, 2);
    let spec = CorruptionSpec::points(CorruptionKind::UniformPointsColorNoise, 0.05, 77);
    let a = corrupt(&img, &spec, None).unwrap();
    let b = corrupt(&img, &spec, None).unwrap();
    let bytes = |t: &ImageTensor| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(&a.source), bytes(&b.source));
    assert_eq!(a.mask, b.mask);
}

#[test]
fn color_noise_fill_is_uniform_per_channel() {
    let img = ImageTensor::filled(128, 128, [0.0; 3]);
    let s = corrupt(&img, &CorruptionSpec::points(CorruptionKind::UniformPointsColorNoise, 0.05, 3), None).unwrap();
    const BINS: usize = 10;
    for c in 0..3 {
        let mut counts = [0usize; BINS];
        let mut n = 0usize;
        for y in 0..128 {
            for x in 0..128 {
                if !s.mask.get(y, x) {
                    let v = s.source.get(c, y, x);
                    counts[(((v + 1.0) / 2.0 * BINS as f32) as usize).min(BINS - 1)] += 1;
                    n += 1;
                }
            }
        }
        let e = n as f64 / BINS as f64;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // 9 degrees of freedom, p = 0.001
        assert!(chi2 < 27.88, "channel {c}: chi2 {chi2}");
    }
}

#[test]
fn block_errors() {
    let img = scene(32, 0);
    let big = CorruptionSpec::block(CorruptionKind::CenterWhiteBlock, 33, 0);
    assert!(matches!(corrupt(&img, &big, None), Err(Error::InvalidArgument(_))));
    let clutter = CorruptionSpec::block(CorruptionKind::ClutterColorBlock, 16, 0);
    assert!(matches!(corrupt(&img, &clutter, None), Err(Error::InvalidArgument(_))));
    let huge = CorruptionSpec::block(CorruptionKind::ClutterColorBlock, 64, 0);
    assert!(matches!(corrupt(&img, &huge, Some(&img)), Err(Error::InvalidArgument(_))));
}

#[test]
fn clutter_block_copies_a_donor_square() {
    let img = scene(64, 0);
    let donor = scene(64, 9);
    for seed in 0..10 {
        let s = corrupt(&img, &CorruptionSpec::block(CorruptionKind::ClutterColorBlock, 40, seed), Some(&donor)).unwrap();
        let removed: Vec<(usize, usize)> =
            (0..64).flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| !s.mask.get(y, x)).collect();
        let side = (removed.len() as f64).sqrt() as usize;
        assert_eq!(side * side, removed.len());
        assert!((16..=40).contains(&side));
        let (top, left) = removed[0];
        assert_eq!(removed[removed.len() - 1], (top + side - 1, left + side - 1));
        // the block content is some same-size crop of the donor
        let block = s.source.crop(top, left, side, side).unwrap();
        let found = (0..=64 - side)
            .any(|dy| (0..=64 - side).any(|dx| donor.crop(dy, dx, side, side).unwrap() == block));
        assert!(found);
    }
}

#[test]
fn step_edge_response_sits_on_the_two_adjacent_columns() {
    let img = step_edge(16);
    let e = sobel_edge_map(&img);
    let mut col_max = vec![0.0f32; 16];
    for y in 0..16 {
        for (x, m) in col_max.iter_mut().enumerate() {
            *m = m.max(e.at(y, x));
        }
    }
    let peak = col_max.iter().copied().fold(0.0, f32::max);
    let hot: Vec<usize> = (0..16).filter(|&x| col_max[x] == peak).collect();
    assert_eq!(hot, vec![7, 8]);
    assert!(col_max.iter().enumerate().all(|(x, &v)| x == 7 || x == 8 || v == 0.0));
}

/// Fraction of kept pixels whose centre lies within 2 px of the boundary
/// between columns `boundary - 1` and `boundary`.
fn near_step_fraction(mask: &Mask, boundary: usize) -> f64 {
    let (h, w) = mask.dims();
    let mut near = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) && (x as f64 + 0.5 - boundary as f64).abs() <= 2.0 {
                near += 1;
            }
        }
    }
    near as f64 / mask.kept_count() as f64
}

#[test]
fn feature_mask_on_step_edge_concentrates_at_the_step() {
    // 5% of 32x32 is 51 pixels, fewer than the 64 on the two edge columns
    let img = step_edge(32);
    for seed in 0..5 {
        let m = make_feature_mask(&img, 0.05, seed).unwrap();
        let frac = near_step_fraction(&m, 16);
        assert!(frac >= 0.6, "seed {seed}: {frac}");
    }
}

fn concentration(img: &ImageTensor, keep: f64, seed: u64) -> f64 {
    let e = sobel_edge_map(img);
    let (h, w) = img.dims();
    let feature = make_feature_mask(img, keep, seed).unwrap();
    let uniform = make_uniform_mask(h, w, keep, seed).unwrap();
    e.mean_over(&feature) / e.mean_over(&uniform)
}

#[test]
fn feature_mask_concentration_on_photos_and_scenes() {
    for name in ["astronaut.png", "coffee.png"] {
        let img = fixture(name);
        let e = sobel_edge_map(&img);
        let m = make_feature_mask(&img, 0.05, 1).unwrap();
        assert!(e.mean_over(&m) > e.mean(), "{name}");
        for seed in 0..3 {
            let r = concentration(&img, 0.05, seed);
            assert!(r >= 1.5, "{name} seed {seed}: ratio {r}");
        }
    }
    for seed in 0..5 {
        let r = concentration(&scene(64, seed), 0.05, seed);
        assert!(r >= 1.5, "scene {seed}: ratio {r}");
    }
}
