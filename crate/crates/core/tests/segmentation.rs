mod common;

use divetrack::frame_io::Frame;
use divetrack::image::{BinaryMask, RgbImage};
use divetrack::mosaic::GlobalBounds;
use divetrack::registration::AffineTransform;
use divetrack::segmentation::{
    apply_threshold, barycentre, connected_components, label_components, locate_barycentre, rgb_to_hsv, Connectivity,
    DetectionParams,
};
use divetrack::synth::{render_sequence, BackgroundSpec, BlobSpec, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{flood_fill_components, hexcone_hsv};

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density))
}

#[test]
fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let density = [0.2, 0.45, 0.6][i % 3];
        let mask = random_mask(&mut rng, 64, 64, density);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let got = connected_components(&mask, conn);
            let want = flood_fill_components(&mask, eight);
            assert_eq!(got.len(), want.len(), "mask {i}");
            for (g, o) in got.iter().zip(&want) {
                assert_eq!((g.area, g.sum_x, g.sum_y, g.bbox), (o.area, o.sum_x, o.sum_y, o.bbox));
            }
            let (labels, stats) = label_components(&mask, conn);
            for (label, o) in want.iter().enumerate() {
                assert_eq!(stats[label].label, label);
                for &(x, y) in &o.pixels {
                    assert_eq!(labels[y * 64 + x], label);
                }
            }
            assert_eq!(labels.iter().filter(|&&l| l != usize::MAX).count(), mask.count());
        }
    }
}

#[test]
fn barycentre_matches_pixel_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let mask = random_mask(&mut rng, 64, 64, 0.3);
        let comps = connected_components(&mask, Connectivity::Eight);
        let keep: Vec<_> = comps.iter().filter(|c| c.area >= 3).copied().collect();
        let pixels: Vec<(usize, usize)> = flood_fill_components(&mask, true)
            .into_iter()
            .filter(|c| c.area >= 3)
            .flat_map(|c| c.pixels)
            .collect();
        match barycentre(&keep) {
            None => assert!(pixels.is_empty()),
            Some((x, y, area)) => {
                let n = pixels.len();
                let mx = pixels.iter().map(|p| p.0 as u64).sum::<u64>() as f64 / n as f64;
                let my = pixels.iter().map(|p| p.1 as u64).sum::<u64>() as f64 / n as f64;
                assert_eq!((x, y, area), (mx, my, n));
            }
        }
    }
}

#[test]
fn hsv_matches_hexcone() {
    for r in [0u8, 255] {
        for g in [0u8, 255] {
            for b in [0u8, 255] {
                let (h, s, v) = rgb_to_hsv(r, g, b);
                let (oh, os, ov) = hexcone_hsv(r, g, b);
                assert!((h - oh).abs() < 1e-6 && (s - os).abs() < 1e-6 && (v - ov).abs() < 1e-6);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let [r, g, b]: [u8; 3] = rng.random();
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (oh, os, ov) = hexcone_hsv(r, g, b);
        let dh = (h - oh).abs();
        assert!(dh.min(360.0 - dh) < 1e-6, "({r},{g},{b}): {h} vs {oh}");
        assert!((s - os).abs() < 1e-6 && (v - ov).abs() < 1e-6);
    }
}

fn blob_frame(cx: f64, cy: f64) -> (RgbImage, DetectionParams) {
    let blob = BlobSpec {
        colour_hsv: [0.0, 0.85, 0.9],
        radius: 12.0,
        x0: cx,
        y0: cy,
        vx0: 0.0,
        vy0: 0.0,
        g_px: 0.0,
    };
    let spec = SynthSpec {
        seed: 5,
        frame_size: (320, 240),
        n_frames: 1,
        fps: 25.0,
        camera_path: vec![AffineTransform::IDENTITY],
        background: BackgroundSpec {
            seed: 6,
            feature_scale: 8.0,
            distractors: vec![],
        },
        blob: Some(blob.clone()),
        noise_sigma: 2.0,
        water_line_y: None,
    };
    let (mut frames, _) = render_sequence(&spec).unwrap();
    let params = DetectionParams {
        thresholds: blob.thresholds(),
        ..DetectionParams::default()
    };
    (frames.remove(0).image, params)
}

#[test]
fn red_blob_located() {
    let (image, params) = blob_frame(200.0, 150.0);
    let (w, h) = (image.width(), image.height());
    let frame = Frame {
        index: 0,
        timestamp_s: 0.0,
        image,
    };
    let bounds = GlobalBounds {
        min_x: 0,
        min_y: 0,
        max_x: w as i64,
        max_y: h as i64,
    };
    let empty = BinaryMask::new(w, h);
    let d = locate_barycentre(&frame, &AffineTransform::IDENTITY, &bounds, &empty, &empty, &params).unwrap();
    assert!(d.sample.valid);
    assert!(
        (d.sample.x - 200.0).abs() < 1.0 && (d.sample.y - 150.0).abs() < 1.0,
        "{:?}",
        d.sample
    );
    let disc = std::f64::consts::PI * 144.0;
    assert!(
        (d.sample.area as f64 - disc).abs() < 0.1 * disc,
        "area {}",
        d.sample.area
    );
    assert_eq!(d.foreground.count(), d.sample.area);
}

#[test]
fn static_colour_is_subtracted() {
    // the same blob in the frame and in the panorama leaves nothing behind
    let (image, params) = blob_frame(100.0, 100.0);
    let (w, h) = (image.width(), image.height());
    let filtered = apply_threshold(&image, &params.thresholds, None);
    let frame = Frame {
        index: 3,
        timestamp_s: 0.12,
        image,
    };
    let bounds = GlobalBounds {
        min_x: 0,
        min_y: 0,
        max_x: w as i64,
        max_y: h as i64,
    };
    let none = BinaryMask::new(w, h);
    let d = locate_barycentre(&frame, &AffineTransform::IDENTITY, &bounds, &none, &filtered, &params).unwrap();
    assert!(!d.sample.valid && d.sample.x.is_nan());
    assert_eq!((d.sample.frame_index, d.sample.t), (3, 0.12));
}

proptest! {
    #[test]
    fn labelling_partitions_foreground(seed in any::<u64>(), w in 1usize..40, h in 1usize..40, density in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, w, h, density);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let comps = connected_components(&mask, conn);
            prop_assert_eq!(comps.iter().map(|c| c.area).sum::<usize>(), mask.count());
        }
        // every 4-connected component lies inside one 8-connected component
        prop_assert!(connected_components(&mask, Connectivity::Four).len() >= connected_components(&mask, Connectivity::Eight).len());
    }

    #[test]
    fn hsv_ranges(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
        let (h, s, v) = rgb_to_hsv(r, g, b);
        prop_assert!((0.0..360.0).contains(&h));
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&v));
    }
}
