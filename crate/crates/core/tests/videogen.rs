use std::collections::HashSet;

use flux_core::rng::hex_digest;
use flux_core::videogen::{
    export_dataset, gen_dataset, gen_video, gen_video_with_noise, import_dataset, ClassSemantics, GenSpec,
    VideoSample,
};
use proptest::prelude::*;

fn one_sprite_right(speed: f64, frames: usize) -> GenSpec {
    GenSpec {
        frames,
        sprites_min: 1,
        sprites_max: 1,
        speed_min: speed,
        speed_max: speed,
        ..GenSpec::default()
    }
}

fn mask_centroid_x(v: &VideoSample, t: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..v.h() {
        for x in 0..v.w() {
            if v.mask_at(t, y, x) {
                sum += x as f64;
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn frame_bytes(v: &VideoSample) -> Vec<u8> {
    v.frames.iter().flat_map(|f| f.to_le_bytes()).collect()
}

#[test]
fn same_seed_same_bytes() {
    let spec = GenSpec::default();
    let a = gen_video(7, &spec).unwrap();
    let b = gen_video(7, &spec).unwrap();
    assert_eq!(frame_bytes(&a), frame_bytes(&b));
    assert_eq!(a.motion_mask, b.motion_mask);
    assert_ne!(frame_bytes(&a), frame_bytes(&gen_video(8, &spec).unwrap()));
}

#[test]
fn dims_and_label_follow_spec() {
    let spec = GenSpec {
        frames: 6,
        height: 28,
        width: 42,
        channels: 2,
        sprite_size_max: 10,
        ..GenSpec::default()
    };
    let v = gen_video(5, &spec).unwrap();
    assert_eq!(v.dims, [6, 28, 42, 2]);
    assert_eq!(v.frames.len(), 6 * 28 * 42 * 2);
    assert_eq!(v.motion_mask.len(), 6 * 28 * 42);
    assert_eq!(v.label, 5 % 4);
    assert_eq!(v.seed, 5);
}

#[test]
fn centroid_moves_two_pixels_per_frame() {
    // label 0 is rightward motion
    let spec = one_sprite_right(2.0, 8);
    for seed in [0u64, 4, 8, 12, 16] {
        let v = gen_video(seed, &spec).unwrap();
        assert_eq!(v.label, 0);
        for t in 1..8 {
            let dx = mask_centroid_x(&v, t) - mask_centroid_x(&v, t - 1);
            assert!((dx - 2.0).abs() <= 0.5, "seed {seed} frame {t}: dx {dx}");
        }
    }
}

#[test]
fn static_sprites_do_not_change_inside_the_mask() {
    let spec = GenSpec {
        speed_min: 0.0,
        speed_max: 0.0,
        ..GenSpec::default()
    };
    for seed in 0..8 {
        let v = gen_video(seed, &spec).unwrap();
        assert!(v.motion_mask.iter().any(|&m| m));
        for t in 1..v.t() {
            for y in 0..v.h() {
                for x in 0..v.w() {
                    if v.mask_at(t, y, x) && v.mask_at(t - 1, y, x) {
                        for c in 0..v.c() {
                            assert_eq!(v.pixel(t, y, x, c), v.pixel(t - 1, y, x, c));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn background_is_never_in_the_mask() {
    // zero noise: background pixels are exactly 0, sprite colors are bright
    let spec = GenSpec {
        noise_amplitude: 0.0,
        ..GenSpec::default()
    };
    for seed in 0..8 {
        let v = gen_video(seed, &spec).unwrap();
        for t in 0..v.t() {
            for y in 0..v.h() {
                for x in 0..v.w() {
                    let lit = (0..v.c()).any(|c| v.pixel(t, y, x, c) > 0.0);
                    assert_eq!(lit, v.mask_at(t, y, x), "seed {seed} ({t},{y},{x})");
                }
            }
        }
    }
}

#[test]
fn motion_is_where_the_mask_says() {
    let spec = GenSpec::default();
    for seed in 0..40 {
        let v = gen_video(seed, &spec).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for t in 1..v.t() {
            for y in 0..v.h() {
                for x in 0..v.w() {
                    let d: f64 = (0..v.c())
                        .map(|c| (v.pixel(t, y, x, c) - v.pixel(t - 1, y, x, c)).abs() as f64)
                        .sum::<f64>()
                        / v.c() as f64;
                    if v.mask_at(t, y, x) {
                        inside += d;
                        n_in += 1;
                    } else {
                        outside += d;
                        n_out += 1;
                    }
                }
            }
        }
        let (mi, mo) = (inside / n_in as f64, outside / n_out as f64);
        assert!(mi > mo, "seed {seed}: inside {mi} outside {mo}");
    }
}

#[test]
fn labels_ignore_the_noise_seed() {
    let spec = GenSpec::default();
    for seed in 0..20 {
        let a = gen_video(seed, &spec).unwrap();
        let b = gen_video_with_noise(seed, seed + 1000, &spec).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.motion_mask, b.motion_mask);
        assert_ne!(a.frames, b.frames);
    }
}

#[test]
fn balanced_datasets() {
    let spec = GenSpec::default();
    let four = gen_dataset(0, &spec, 4).unwrap();
    let labels: HashSet<usize> = four.iter().map(|v| v.label).collect();
    assert_eq!(labels.len(), 4);
    let hundred = gen_dataset(3, &spec, 100).unwrap();
    for class in 0..4 {
        assert_eq!(hundred.iter().filter(|v| v.label == class).count(), 25);
    }
    assert!(hundred.iter().enumerate().all(|(i, v)| v.seed == 3 + i as u64));
}

#[test]
fn disjoint_seed_bases_share_no_frames() {
    let spec = GenSpec::default();
    let a: HashSet<String> = gen_dataset(0, &spec, 40)
        .unwrap()
        .iter()
        .map(|v| hex_digest(&frame_bytes(v)))
        .collect();
    let b: HashSet<String> = gen_dataset(1000, &spec, 40)
        .unwrap()
        .iter()
        .map(|v| hex_digest(&frame_bytes(v)))
        .collect();
    assert_eq!(a.len(), 40);
    assert_eq!(b.len(), 40);
    assert_eq!(a.intersection(&b).count(), 0);
}

#[test]
fn texture_labels_set_the_stripes() {
    let spec = GenSpec {
        semantics: ClassSemantics::Texture,
        noise_amplitude: 0.0,
        sprites_min: 0,
        sprites_max: 0,
        ..GenSpec::default()
    };
    for seed in 0..4 {
        let v = gen_video(seed, &spec).unwrap();
        let period = 2 + v.label;
        for y in 0..v.h() {
            let expect = if (y / period).is_multiple_of(2) { 0.2 } else { 0.0 };
            assert_eq!(v.pixel(3, y, 5, 0), expect);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        GenSpec {
            sprites_min: 0,
            sprites_max: 0,
            ..GenSpec::default()
        },
        GenSpec {
            sprite_size_max: 60,
            ..GenSpec::default()
        },
        GenSpec {
            speed_min: 3.0,
            speed_max: 1.0,
            ..GenSpec::default()
        },
        GenSpec {
            num_classes: 5,
            ..GenSpec::default()
        },
        GenSpec {
            frames: 0,
            ..GenSpec::default()
        },
    ];
    for spec in bad {
        assert!(gen_video(0, &spec).is_err(), "{spec:?}");
    }
    assert!(gen_dataset(0, &GenSpec::default(), 0).is_err());
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec::default();
    let samples = gen_dataset(9, &spec, 5).unwrap();
    let written = export_dataset(dir.path(), &spec, &samples).unwrap();
    let (read, back) = import_dataset(dir.path()).unwrap();
    assert_eq!(written, read);
    assert_eq!(back, samples);
    assert_eq!(read.spec, spec);
    for (e, s) in read.samples.iter().zip(&samples) {
        assert_eq!(e.sha256, hex_digest(&frame_bytes(s)));
    }
    // a second export of the same data is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    assert_eq!(export_dataset(dir2.path(), &spec, &samples).unwrap().hash(), written.hash());
}

#[test]
fn truncated_export_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenSpec::default();
    export_dataset(dir.path(), &spec, &gen_dataset(0, &spec, 2).unwrap()).unwrap();
    let f = dir.path().join("sample_00001.f32");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
    assert!(import_dataset(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn class_counts_within_one(seed in 0u64..1000, count in 1usize..60, classes in 1usize..5) {
        let spec = GenSpec { num_classes: classes, frames: 2, ..GenSpec::default() };
        let data = gen_dataset(seed, &spec, count).unwrap();
        let counts: Vec<usize> = (0..classes).map(|c| data.iter().filter(|v| v.label == c).count()).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn pixels_stay_in_unit_range(seed in 0u64..10_000, amp in 0.0f64..1.0) {
        let spec = GenSpec { noise_amplitude: amp, frames: 4, ..GenSpec::default() };
        let v = gen_video(seed, &spec).unwrap();
        prop_assert!(v.frames.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!(v.label < spec.num_classes);
    }
}
