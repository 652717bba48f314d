use dermlens_core::exec::Execution;
use dermlens_core::raster::{perturb, perturb_with, PerturbKind, RasterError, RgbRaster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOISE_05_SEED42_CHECKERBOARD: &str = "3e048d9bec55274211cf43dafa62807d3b1734b64d9487320042c505a2878924";

// Straight transcription of the noise rule: a = round(64 s), one uniform
// draw in [-a, a] per channel byte, row-major, clamped.
fn noise_oracle(pixels: &[u8], strength: f64, seed: u64) -> Vec<u8> {
    let a = (strength * 64.0).round() as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pixels
        .iter()
        .map(|&p| (p as i32 + rng.random_range(-a..=a)).clamp(0, 255) as u8)
        .collect()
}

// Box blur with edge replication, computed pixel by pixel.
fn blur_oracle(img: &RgbRaster, strength: f64) -> Vec<u8> {
    let r = (strength * 3.0).ceil() as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let area = ((2 * r + 1) * (2 * r + 1)) as u32;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut sum = 0u32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w - 1) as u32;
                        let sy = (y + dy).clamp(0, h - 1) as u32;
                        sum += img.pixel(sx, sy)[ch] as u32;
                    }
                }
                out.push(((sum + area / 2) / area) as u8);
            }
        }
    }
    out
}

#[test]
fn noise_golden_checksum() {
    let board = RgbRaster::checkerboard(8, 8);
    let out = perturb(&board, PerturbKind::Noise, 0.5, 42).unwrap();
    assert_eq!(out.pixels(), noise_oracle(board.pixels(), 0.5, 42).as_slice());
    assert_eq!(out.checksum(), NOISE_05_SEED42_CHECKERBOARD);
}

#[test]
fn blur_of_single_pixel_is_identity() {
    let px = RgbRaster::filled(1, 1, [12, 200, 77]);
    for s in [0.1, 0.5, 1.0] {
        assert_eq!(perturb(&px, PerturbKind::Blur, s, 0).unwrap(), px);
    }
}

#[test]
fn strength_out_of_range_is_rejected() {
    let img = RgbRaster::checkerboard(4, 4);
    for s in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(matches!(
            perturb(&img, PerturbKind::Noise, s, 1),
            Err(RasterError::InvalidStrength(_))
        ));
    }
}

fn raster() -> impl Strategy<Value = RgbRaster> {
    (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
            .prop_map(move |px| RgbRaster::new(w, h, px).unwrap())
    })
}

proptest! {
    #[test]
    fn perturbations_preserve_dimensions(img in raster(), s in 0.01f64..=1.0, seed in any::<u64>()) {
        for kind in [PerturbKind::Noise, PerturbKind::Blur] {
            let out = perturb(&img, kind, s, seed).unwrap();
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
        }
    }

    #[test]
    fn noise_matches_oracle_and_is_bounded(img in raster(), s in 0.01f64..=1.0, seed in any::<u64>()) {
        let out = perturb(&img, PerturbKind::Noise, s, seed).unwrap();
        let expected = noise_oracle(img.pixels(), s, seed);
        prop_assert_eq!(out.pixels(), expected.as_slice());
        let a = (s * 64.0).round() as i32;
        for (o, i) in out.pixels().iter().zip(img.pixels()) {
            prop_assert!((*o as i32 - *i as i32).abs() <= a);
        }
    }

    #[test]
    fn blur_matches_oracle_in_every_mode(img in raster(), s in 0.01f64..=1.0) {
        let expected = blur_oracle(&img, s);
        for ex in [Execution::Sequential, Execution::Parallel(3)] {
            let out = perturb_with(&img, PerturbKind::Blur, s, 0, ex).unwrap();
            prop_assert_eq!(out.pixels(), expected.as_slice());
        }
    }

    #[test]
    fn same_seed_same_bytes(img in raster(), s in 0.01f64..=1.0, seed in any::<u64>()) {
        let a = perturb(&img, PerturbKind::Noise, s, seed).unwrap();
        let b = perturb(&img, PerturbKind::Noise, s, seed).unwrap();
        prop_assert_eq!(a.to_ppm(), b.to_ppm());
    }
}
