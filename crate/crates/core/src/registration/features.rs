//! Corner detection, patch descriptors and descriptor matching.

use crate::image::{GrayImage, RgbImage};

use super::RegistrationError;

/// Harris sensitivity constant.
pub const HARRIS_K: f64 = 0.04;
/// Corners weaker than this fraction of the strongest response are discarded.
const QUALITY_LEVEL: f64 = 0.01;
/// Pixels this close to the border have unreliable gradients (3x3 Sobel + 5x5 window).
const BORDER: usize = 3;
/// Patch variance below which a descriptor is considered flat.
const FLAT_VARIANCE: f64 = 1e-12;

/// Luma `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    let raw = image.as_raw();
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let i = (y * image.width() + x) * 3;
        0.299 * f64::from(raw[i]) + 0.587 * f64::from(raw[i + 1]) + 0.114 * f64::from(raw[i + 2])
    })
}

/// A detected corner. Coordinates are sub-pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Harris response; always positive.
    pub score: f64,
}

/// Harris corner response `det(M) - k trace(M)²` with a Gaussian-weighted
/// 5x5 structure tensor `M` built from 3x3 Sobel gradients.
pub fn harris_response(gray: &GrayImage) -> GrayImage {
    let (w, h) = (gray.width(), gray.height());
    let mut ixx = GrayImage::new(w, h);
    let mut iyy = GrayImage::new(w, h);
    let mut ixy = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| gray.get_clamped(x as isize + dx, y as isize + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            ixx.put(x, y, gx * gx);
            iyy.put(x, y, gy * gy);
            ixy.put(x, y, gx * gy);
        }
    }
    let sxx = gaussian5(&ixx);
    let syy = gaussian5(&iyy);
    let sxy = gaussian5(&ixy);
    GrayImage::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        a * b - c * c - HARRIS_K * (a + b) * (a + b)
    })
}

/// Separable 5-tap Gaussian (sigma = 1) with replicated borders.
fn gaussian5(img: &GrayImage) -> GrayImage {
    let raw: [f64; 5] = std::array::from_fn(|i| {
        let d = i as f64 - 2.0;
        (-d * d / 2.0).exp()
    });
    let sum: f64 = raw.iter().sum();
    let k = raw.map(|v| v / sum);
    let (w, h) = (img.width(), img.height());
    let horiz = GrayImage::from_fn(w, h, |x, y| {
        (0..5)
            .map(|i| k[i] * img.get_clamped(x as isize + i as isize - 2, y as isize))
            .sum()
    });
    GrayImage::from_fn(w, h, |x, y| {
        (0..5)
            .map(|i| k[i] * horiz.get_clamped(x as isize, y as isize + i as isize - 2))
            .sum()
    })
}

/// Harris corners, strongest first.
///
/// A pixel survives when its response is positive, at least 1% of the image
/// maximum, and the maximum of the `(2 r + 1)²` window around it (`r =
/// min_distance_px`, ties resolved in raster order). Positions are refined to
/// sub-pixel accuracy with a parabola through the neighbouring responses.
pub fn detect_keypoints(gray: &GrayImage, max_count: usize, min_distance_px: usize) -> Vec<Keypoint> {
    let (w, h) = (gray.width(), gray.height());
    if w < 2 * BORDER + 1 || h < 2 * BORDER + 1 || max_count == 0 {
        return Vec::new();
    }
    let response = harris_response(gray);
    let max_r = response.as_slice().iter().copied().fold(0.0, f64::max);
    if !(max_r > 0.0) {
        return Vec::new();
    }
    let threshold = max_r * QUALITY_LEVEL;
    let r = min_distance_px as isize;

    let mut found = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = response.get(x, y);
            if v <= threshold {
                continue;
            }
            let is_max = (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        return true;
                    }
                    let n = response.get(nx as usize, ny as usize);
                    // earlier pixels in raster order win ties
                    if (dy, dx) < (0, 0) {
                        v > n
                    } else {
                        v >= n
                    }
                })
            });
            if is_max {
                let (ox, oy) = subpixel_offset(&response, x, y);
                found.push(Keypoint {
                    x: x as f64 + ox,
                    y: y as f64 + oy,
                    score: v,
                });
            }
        }
    }
    // stable sort keeps raster order among equal scores
    found.sort_by(|p, q| q.score.total_cmp(&p.score));
    found.truncate(max_count);
    found
}

fn subpixel_offset(resp: &GrayImage, x: usize, y: usize) -> (f64, f64) {
    let vertex = |l: f64, c: f64, r: f64| {
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let c = resp.get(x, y);
    (
        vertex(resp.get(x - 1, y), c, resp.get(x + 1, y)),
        vertex(resp.get(x, y - 1), c, resp.get(x, y + 1)),
    )
}

/// Mean-subtracted, L2-normalized intensity patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    /// True for the all-zero descriptor of a textureless patch.
    pub fn is_flat(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn distance_sq(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Whether a `patch_size` patch around the keypoint lies inside the raster.
pub fn patch_fits(gray: &GrayImage, kp: &Keypoint, patch_size: usize) -> bool {
    let half = (patch_size / 2) as f64;
    let (cx, cy) = (kp.x.round(), kp.y.round());
    cx - half >= 0.0 && cy - half >= 0.0 && cx + half < gray.width() as f64 && cy + half < gray.height() as f64
}

/// Samples the `patch_size x patch_size` patch centred on the keypoint's
/// nearest pixel.
pub fn extract_descriptor(gray: &GrayImage, kp: &Keypoint, patch_size: usize) -> Result<Descriptor, RegistrationError> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(RegistrationError::Degenerate(format!(
            "patch size must be odd, got {patch_size}"
        )));
    }
    if !patch_fits(gray, kp, patch_size) {
        return Err(RegistrationError::PatchOutOfBounds { x: kp.x, y: kp.y });
    }
    let half = patch_size / 2;
    let (cx, cy) = (kp.x.round() as usize, kp.y.round() as usize);
    let mut values = Vec::with_capacity(patch_size * patch_size);
    for y in cy - half..=cy + half {
        for x in cx - half..=cx + half {
            values.push(gray.get(x, y));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v -= mean);
    let var = values.iter().map(|v| v * v).sum::<f64>() / n;
    if var < FLAT_VARIANCE {
        values.iter_mut().for_each(|v| *v = 0.0);
        return Ok(Descriptor { values });
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(Descriptor { values })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Nearest-neighbour matching with a ratio test and a mutual-consistency check.
///
/// A match `(i, j)` is kept when `j` is the nearest descriptor in `b` to
/// `a[i]`, that distance is below `ratio` times the second-nearest (a lone
/// candidate always passes), and `i` is in turn the nearest in `a` to `b[j]`.
/// Flat descriptors never match.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f64) -> Vec<Match> {
    let usable_b: Vec<usize> = (0..b.len()).filter(|&j| !b[j].is_flat()).collect();
    let mut best_for_b: Vec<Option<(f64, usize)>> = vec![None; b.len()];
    let mut best_for_a: Vec<Option<(f64, usize, f64)>> = vec![None; a.len()];

    for (i, da) in a.iter().enumerate() {
        if da.is_flat() {
            continue;
        }
        let (mut d1, mut j1, mut d2) = (f64::INFINITY, usize::MAX, f64::INFINITY);
        for &j in &usable_b {
            let d = da.distance_sq(&b[j]);
            if d < d1 {
                d2 = d1;
                d1 = d;
                j1 = j;
            } else if d < d2 {
                d2 = d;
            }
            match best_for_b[j] {
                Some((bd, _)) if bd <= d => {}
                _ => best_for_b[j] = Some((d, i)),
            }
        }
        if j1 != usize::MAX {
            best_for_a[i] = Some((d1, j1, d2));
        }
    }

    let ratio_sq = ratio * ratio;
    best_for_a
        .iter()
        .enumerate()
        .filter_map(|(i, best)| {
            let (d1, j, d2) = (*best)?;
            let passes_ratio = d2.is_infinite() || d1 < ratio_sq * d2;
            let mutual = best_for_b[j].map(|(_, bi)| bi) == Some(i);
            (passes_ratio && mutual).then(|| Match {
                index_a: i,
                index_b: j,
                distance: d1.sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_image() -> GrayImage {
        // white 20x20 square with corners at pixels (30,30) and (49,49)
        GrayImage::from_fn(80, 80, |x, y| {
            if (30..50).contains(&x) && (30..50).contains(&y) {
                255.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn grayscale_extremes() {
        let white = to_grayscale(&RgbImage::filled(4, 3, [255, 255, 255]));
        assert!(white.as_slice().iter().all(|&v| (v - 255.0).abs() < 1e-9));
        let red = to_grayscale(&RgbImage::filled(4, 3, [255, 0, 0]));
        assert!(red.as_slice().iter().all(|&v| (v - 76.245).abs() < 1e-9));
        let black = to_grayscale(&RgbImage::new(4, 3));
        assert!(black.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let g = GrayImage::from_fn(32, 32, |_, _| 128.0);
        assert!(detect_keypoints(&g, 100, 3).is_empty());
    }

    #[test]
    fn square_corners_found() {
        let g = square_image();
        // Oracle: the geometric corners sit on pixel boundaries.
        let corners = [(29.5, 29.5), (49.5, 29.5), (29.5, 49.5), (49.5, 49.5)];
        let kps = detect_keypoints(&g, 100, 3);
        assert_eq!(kps.len(), 4, "{kps:?}");
        for c in corners {
            assert!(
                kps.iter().any(|k| (k.x - c.0).hypot(k.y - c.1) <= 2.0),
                "no keypoint near {c:?}: {kps:?}"
            );
        }
        assert!(kps.windows(2).all(|w| w[0].score >= w[1].score));

        let two = detect_keypoints(&g, 2, 3);
        assert_eq!(two, kps[..2].to_vec());
    }

    #[test]
    fn square_response_maxima_are_only_at_corners() {
        // Exhaustive scan: every positive local maximum of the raw response is near a corner.
        let g = square_image();
        let r = harris_response(&g);
        let max_r = r.as_slice().iter().copied().fold(0.0, f64::max);
        for y in 1..79 {
            for x in 1..79 {
                let v = r.get(x, y);
                if v <= max_r * QUALITY_LEVEL {
                    continue;
                }
                let local_max = (-1..=1).all(|dy: isize| {
                    (-1..=1).all(|dx: isize| r.get((x as isize + dx) as usize, (y as isize + dy) as usize) <= v)
                });
                if local_max {
                    let near = [29.5, 49.5].iter().any(|&cx| {
                        [29.5, 49.5]
                            .iter()
                            .any(|&cy| (x as f64 - cx).hypot(y as f64 - cy) <= 2.0)
                    });
                    assert!(near, "unexpected maximum at ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn descriptor_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GrayImage::from_fn(20, 20, |_, _| rng.random_range(0.0..255.0));
        let kp = Keypoint {
            x: 10.0,
            y: 10.0,
            score: 1.0,
        };
        let d = extract_descriptor(&g, &kp, 9).unwrap();
        assert_eq!(d.values.len(), 81);
        let mean = d.values.iter().sum::<f64>() / 81.0;
        let norm = d.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mean.abs() < 1e-9 && (norm - 1.0).abs() < 1e-9);

        let scaled = GrayImage::from_fn(20, 20, |x, y| 2.0 * g.get(x, y));
        let ds = extract_descriptor(&scaled, &kp, 9).unwrap();
        assert!(d.values.iter().zip(&ds.values).all(|(a, b)| (a - b).abs() < 1e-12));

        let flat = GrayImage::from_fn(20, 20, |_, _| 77.0);
        assert!(extract_descriptor(&flat, &kp, 9).unwrap().is_flat());

        let edge = Keypoint {
            x: 3.0,
            y: 10.0,
            score: 1.0,
        };
        assert!(matches!(
            extract_descriptor(&g, &edge, 9),
            Err(RegistrationError::PatchOutOfBounds { .. })
        ));
    }

    fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
        let g = GrayImage::from_fn(9, 9, |_, _| rng.random_range(0.0..1.0));
        extract_descriptor(
            &g,
            &Keypoint {
                x: 4.0,
                y: 4.0,
                score: 1.0,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn identical_lists_match_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<_> = (0..20).map(|_| random_descriptor(&mut rng)).collect();
        let m = match_descriptors(&a, &a, 0.8);
        assert_eq!(m.len(), 20);
        for (i, mm) in m.iter().enumerate() {
            assert_eq!((mm.index_a, mm.index_b, mm.distance), (i, i, 0.0));
        }
    }

    #[test]
    fn single_candidate_is_kept() {
        let mut x = vec![0.0; 4];
        x[0] = 1.0;
        let mut y = vec![0.0; 4];
        y[1] = 1.0;
        let m = match_descriptors(&[Descriptor { values: x }], &[Descriptor { values: y }], 0.8);
        assert_eq!(m.len(), 1);
        assert!((m[0].distance - 2f64.sqrt()).abs() < 1e-12);
        assert!(match_descriptors(&[], &[], 0.8).is_empty());
    }

    #[test]
    fn permutation_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<_> = (0..50).map(|_| random_descriptor(&mut rng)).collect();
        let mut perm: Vec<usize> = (0..50).collect();
        for i in (1..50).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // b[perm[i]] = a[i]
        let mut b = vec![Descriptor { values: vec![] }; 50];
        for (i, &p) in perm.iter().enumerate() {
            b[p] = a[i].clone();
        }
        let m = match_descriptors(&a, &b, 0.8);
        assert_eq!(m.len(), 50);
        let mut seen = [false; 50];
        for mm in &m {
            assert_eq!(mm.index_b, perm[mm.index_a]);
            assert!(!seen[mm.index_b]);
            seen[mm.index_b] = true;
        }
    }
}
