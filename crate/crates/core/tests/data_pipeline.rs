mod common;

use common::{coord, trilinear};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagereg::data::{
    generate_phantom, make_pairs, pair_indices, phantom_geometry, preprocess, synth_deformation,
    synth_noise_field, SynthConfig,
};
use stagereg::io::{load_volume, save_volume};
use stagereg::losses::{smooth_loss, SmoothNorm};
use stagereg::volume::{Shape3, Volume, MAX_LABEL};
use stagereg::warp::{grid_sample, Padding, SampleMode};

fn no_rigid(shape: Shape3, max_disp: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        shape,
        max_displacement: max_disp,
        rigid_angle_range: 0.0,
        rigid_shift_range: 0.0,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn pairing_matches_hand_rolled_shuffle() {
    for seed in [0u64, 1, 17, 123_456_789] {
        let mut expected = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    expected.push((i, j));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = expected.len() - 1;
        while k >= 1 {
            let r = rng.gen_range(0..=k);
            expected.swap(k, r);
            k -= 1;
        }
        assert_eq!(pair_indices(4, seed).unwrap(), expected, "seed {seed}");
    }
}

#[test]
fn pairing_needs_two_volumes() {
    assert!(pair_indices(1, 0).is_err());
    let v = Volume::<f32>::zeros(Shape3::cube(16));
    assert!(make_pairs(std::slice::from_ref(&v), 0).is_err());
    let w = Volume::<f32>::filled(Shape3::cube(16), 1.0);
    let pairs = make_pairs(&[v.clone(), w.clone()], 3).unwrap();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|(f, m)| f.data != m.data));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairing_is_a_permutation_without_self_pairs(n in 2usize..9, seed in any::<u64>()) {
        let p = pair_indices(n, seed).unwrap();
        prop_assert_eq!(p.len(), n * (n - 1));
        prop_assert!(p.iter().all(|&(i, j)| i != j && i < n && j < n));
        let mut sorted = p.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), p.len());
        prop_assert_eq!(pair_indices(n, seed).unwrap(), p);
    }
}

/// Clip, scale and resize written independently: each target voxel reads the
/// windowed source at the same normalized coordinate.
#[test]
fn preprocess_ramp_matches_oracle() {
    let src_shape = Shape3::new(20, 12, 24);
    let raw = Volume::<f64>::from_fn(src_shape, |z, y, x| {
        -400.0 + 31.0 * x as f64 + 17.0 * y as f64 + 9.0 * z as f64
    });
    let (lo, hi) = (-160.0, 240.0);
    let windowed = Volume::<f64>::from_fn(src_shape, |z, y, x| {
        let v = raw.at(z, y, x).clamp(lo, hi);
        2.0 * (v - lo) / (hi - lo) - 1.0
    });
    let target = Shape3::new(16, 16, 32);
    let out = preprocess(&raw, lo, hi, target).unwrap();
    assert_eq!(out.shape, target);
    let mut worst = 0.0f64;
    for z in 0..target.d {
        for y in 0..target.h {
            for x in 0..target.w {
                let want = trilinear(
                    &windowed,
                    [coord(x, target.w), coord(y, target.h), coord(z, target.d)],
                );
                worst = worst.max((out.at(z, y, x) - want).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
    let (mn, mx) = out.min_max();
    assert!(mn >= -1.0 && mx <= 1.0);
}

#[test]
fn preprocess_is_idempotent_on_prepared_volumes() {
    let mut rng = common::rng(4);
    let s = Shape3::cube(16);
    let v = Volume::<f64>::from_fn(s, |_, _, _| rng.gen_range(-1.0..=1.0));
    let once = preprocess(&v, -1.0, 1.0, s).unwrap();
    let twice = preprocess(&once, -1.0, 1.0, s).unwrap();
    assert!(once.max_abs_diff(&v) <= 1e-6);
    assert!(twice.max_abs_diff(&once) <= 1e-6);
}

#[test]
fn constant_volumes_hit_the_window_ends() {
    let s = Shape3::new(8, 10, 12);
    let t = Shape3::cube(16);
    let at_low = preprocess(&Volume::<f32>::filled(s, -160.0), -160.0, 240.0, t).unwrap();
    let at_high = preprocess(&Volume::<f32>::filled(s, 240.0), -160.0, 240.0, t).unwrap();
    assert!(at_low.data.iter().all(|&v| v == -1.0));
    assert!(at_high.data.iter().all(|&v| v == 1.0));
}

#[test]
fn phantom_is_deterministic_and_fully_labelled() {
    for n in [16, 32] {
        let cfg = SynthConfig {
            shape: Shape3::cube(n),
            seed: 11,
            ..SynthConfig::default()
        };
        let (v1, m1) = generate_phantom::<f32>(&cfg).unwrap();
        let (v2, m2) = generate_phantom::<f32>(&cfg).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(m1.data, m2.data);
        let h = m1.histogram();
        assert!(h.iter().all(|&c| c > 0), "{n}: histogram {h:?}");
        assert!(m1.data.iter().all(|&l| l <= MAX_LABEL));
        let (mn, mx) = v1.min_max();
        assert!(mn >= -1.0 && mx <= 1.0);
    }
}

#[test]
fn heart_voxels_satisfy_the_ellipsoid_equation() {
    let cfg = SynthConfig {
        shape: Shape3::new(32, 48, 64),
        seed: 5,
        ..SynthConfig::default()
    };
    let (_, mask) = generate_phantom::<f64>(&cfg).unwrap();
    let heart = phantom_geometry(&cfg).heart;
    let s = mask.shape;
    let mut inside = 0;
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let p = [coord(x, s.w), coord(y, s.h), coord(z, s.d)];
                let q: f64 = (0..3)
                    .map(|a| ((p[a] - heart.center[a]) / heart.radii[a]).powi(2))
                    .sum();
                if mask.at(z, y, x) == 1 {
                    assert!(q <= 1.0, "voxel ({z},{y},{x}) labelled heart but q = {q}");
                    inside += 1;
                } else {
                    assert!(
                        q > 1.0,
                        "voxel ({z},{y},{x}) inside the ellipsoid but unlabelled"
                    );
                }
            }
        }
    }
    assert!(inside > 0);
}

#[test]
fn degenerate_synth_config_gives_identity_field() {
    let cfg = no_rigid(Shape3::cube(16), 0.0, 9);
    let phi = synth_deformation::<f64>(&cfg).unwrap();
    assert!(phi.data().iter().all(|&v| v == 0.0));
    let mut rng = common::rng(1);
    let v = common::random_volume(&mut rng, cfg.shape);
    let w = grid_sample(&v, &phi, SampleMode::Linear, Padding::Border).unwrap();
    assert!(w.max_abs_diff(&v) <= 1e-6);
}

#[test]
fn smoothed_field_is_smoother_than_its_noise() {
    let cfg = no_rigid(Shape3::cube(32), 4.0, 2);
    let smooth = synth_deformation::<f64>(&cfg).unwrap();
    let noise = synth_noise_field::<f64>(&cfg).unwrap();
    assert!(
        (smooth.max_voxel_norm() - noise.max_voxel_norm()).abs() < 1e-9,
        "same amplitude"
    );
    let (a, b) = (
        smooth_loss(&smooth, SmoothNorm::L1),
        smooth_loss(&noise, SmoothNorm::L1),
    );
    assert!(a <= b, "smoothed {a} vs noise {b}");
}

#[test]
fn synth_is_bit_deterministic() {
    let cfg = SynthConfig {
        shape: Shape3::cube(16),
        max_displacement: 3.0,
        seed: 77,
        ..SynthConfig::default()
    };
    let a = synth_deformation::<f32>(&cfg).unwrap();
    let b = synth_deformation::<f32>(&cfg).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn displacement_never_exceeds_the_bound(seed in any::<u64>(), max in 0.0f64..3.9) {
        let cfg = no_rigid(Shape3::cube(16), max, seed);
        let phi = synth_deformation::<f64>(&cfg).unwrap();
        prop_assert!(phi.max_voxel_norm() <= max + 1e-9);
    }
}

#[test]
fn raw_save_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(8);
    let v = Volume::<f32>::from_fn(Shape3::new(16, 8, 12), |_, _, _| {
        rng.gen_range(-1000.0..1000.0)
    })
    .with_geometry([0.7, 0.8, 2.5], [-10.0, 3.0, 4.5]);
    let p = dir.path().join("v.vhdr");
    save_volume(&v, &p).unwrap();
    let back = load_volume::<f32>(&p).unwrap();
    assert_eq!(back.shape, v.shape);
    assert!(back
        .data
        .iter()
        .zip(&v.data)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.spacing, v.spacing);
    assert_eq!(back.origin, v.origin);
}
