//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use divetrack::frame_io::Frame;
use divetrack::image::{BinaryMask, RgbImage};
use divetrack::pipeline::{write_synthetic_clip, PipelineConfig};
use divetrack::registration::AffineTransform;
use divetrack::synth::SynthSpec;
use divetrack::trajectory::{parse_trajectory_csv, Trajectory};

/// Component found by breadth-first flood fill.
#[derive(Debug, PartialEq)]
pub struct OracleComponent {
    pub area: usize,
    pub sum_x: u64,
    pub sum_y: u64,
    pub bbox: (usize, usize, usize, usize),
    pub first: usize,
    pub pixels: Vec<(usize, usize)>,
}

/// Flood fill from every unvisited foreground pixel in raster order, sorted
/// by bounding-box top-left then first pixel.
pub fn flood_fill_components(mask: &BinaryMask, eight: bool) -> Vec<OracleComponent> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let offsets: Vec<(isize, isize)> = if eight {
        (-1..=1)
            .flat_map(|dy| (-1..=1).map(move |dx| (dx, dy)))
            .filter(|&d| d != (0, 0))
            .collect()
    } else {
        vec![(1, 0), (-1, 0), (0, 1), (0, -1)]
    };
    for start in 0..w * h {
        if seen[start] || !mask.get(start % w, start / w) {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            pixels.push((x, y));
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && mask.get(nx as usize, ny as usize) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        out.push(OracleComponent {
            area: pixels.len(),
            sum_x: pixels.iter().map(|p| p.0 as u64).sum(),
            sum_y: pixels.iter().map(|p| p.1 as u64).sum(),
            bbox: (
                pixels.iter().map(|p| p.0).min().unwrap(),
                pixels.iter().map(|p| p.1).min().unwrap(),
                pixels.iter().map(|p| p.0).max().unwrap(),
                pixels.iter().map(|p| p.1).max().unwrap(),
            ),
            first: start,
            pixels,
        });
    }
    out.sort_by_key(|c| (c.bbox.1, c.bbox.0, c.first));
    out
}

/// Hexcone HSV in the textbook piecewise form: hue in degrees `[0, 360)`,
/// saturation and value in `[0, 1]`.
pub fn hexcone_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Largest displacement of the four frame corners between two maps.
pub fn corner_error(a: &AffineTransform, b: &AffineTransform, w: f64, h: f64) -> f64 {
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
        .iter()
        .map(|&(x, y)| {
            let (p, q) = (a.apply(x, y), b.apply(x, y));
            (p.0 - q.0).hypot(p.1 - q.1)
        })
        .fold(0.0, f64::max)
}

/// Deterministic high-contrast texture for registration fixtures.
pub fn texture(w: usize, h: usize, seed: u64) -> RgbImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cell = 6;
    let (cw, ch) = (w / cell + 2, h / cell + 2);
    let nodes: Vec<f64> = (0..cw * ch).map(|_| rng.random_range(0.0..255.0)).collect();
    RgbImage::from_fn(w, h, |x, y| {
        let (gx, gy) = (x as f64 / cell as f64, y as f64 / cell as f64);
        let (i, j) = (gx as usize, gy as usize);
        let (tx, ty) = (gx - i as f64, gy - j as f64);
        let n = |a: usize, b: usize| nodes[(j + b) * cw + i + a];
        let v = (1.0 - ty) * ((1.0 - tx) * n(0, 0) + tx * n(1, 0)) + ty * ((1.0 - tx) * n(0, 1) + tx * n(1, 1));
        let v = v.round() as u8;
        [v, v, v]
    })
}

/// `w x h` crop of `src` starting at `(x0, y0)`.
pub fn crop(src: &RgbImage, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| src.get(x0 + x, y0 + y))
}

pub fn frames_from_images(images: Vec<RgbImage>, fps: f64) -> Vec<Frame> {
    images
        .into_iter()
        .enumerate()
        .map(|(k, image)| Frame {
            index: k,
            timestamp_s: k as f64 / fps,
            image,
        })
        .collect()
}

/// Writes a synthetic clip into `dir` and loads its generated config with
/// the given overrides.
pub fn synth_config(spec: &SynthSpec, dir: &Path, overrides: &[&str]) -> PipelineConfig {
    write_synthetic_clip(spec, dir).expect("synthetic clip");
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    PipelineConfig::load(&dir.join("config.json"), &overrides).expect("generated config")
}

pub fn read_trajectory(path: &Path) -> Trajectory {
    parse_trajectory_csv(&std::fs::read_to_string(path).expect("trajectory file")).expect("trajectory csv")
}

/// Sorted `(relative path, bytes)` of every file under `dir`.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}
