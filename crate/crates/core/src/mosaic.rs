//! Panorama construction: global bounds, inverse-mapped bilinear warping and
//! per-pixel compositing of the common background.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::Frame;
use crate::image::{BinaryMask, RgbImage};
use crate::registration::{AffineTransform, RegistrationError};

/// Sample positions this close to an integer are snapped onto it, so that
/// integer-aligned maps resample losslessly despite rounding in the inverse.
const SNAP_EPS: f64 = 1e-9;
/// Colour of panorama pixels no frame covers.
pub const FILL_COLOUR: [u8; 3] = [0, 0, 0];

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("no frames to composite")]
    Empty,
    #[error("expected {expected} transforms, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("warped frames do not share the panorama dimensions")]
    DimensionMismatch,
    #[error(transparent)]
    Degenerate(#[from] RegistrationError),
}

/// Axis-aligned panorama extent in reference coordinates, rounded outward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalBounds {
    pub min_x: i64,
    pub min_y: i64,
    pub max_x: i64,
    pub max_y: i64,
}

impl GlobalBounds {
    pub fn width(&self) -> usize {
        (self.max_x - self.min_x) as usize
    }

    pub fn height(&self) -> usize {
        (self.max_y - self.min_y) as usize
    }

    /// Shift from reference coordinates to panorama pixel coordinates.
    pub fn offset(&self) -> AffineTransform {
        AffineTransform::translation(-self.min_x as f64, -self.min_y as f64)
    }
}

/// How overlapping frames are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositeMode {
    /// Lower median per channel; suppresses transient foreground.
    #[default]
    Median,
    /// Rounded mean per channel.
    Mean,
}

impl std::str::FromStr for CompositeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown composite mode {other:?} (expected median or mean)")),
        }
    }
}

/// Bounds of the transformed corners `(0,0)`, `(w,0)`, `(0,h)`, `(w,h)` of every frame.
pub fn panorama_bounds(frames: &[Frame], global_transforms: &[AffineTransform]) -> Result<GlobalBounds, MosaicError> {
    let sizes: Vec<(usize, usize)> = frames.iter().map(|f| (f.width(), f.height())).collect();
    footprint_bounds(&sizes, global_transforms)
}

/// [`panorama_bounds`] from frame sizes alone.
pub fn footprint_bounds(sizes: &[(usize, usize)], transforms: &[AffineTransform]) -> Result<GlobalBounds, MosaicError> {
    if sizes.is_empty() {
        return Err(MosaicError::Empty);
    }
    if sizes.len() != transforms.len() {
        return Err(MosaicError::CountMismatch {
            expected: sizes.len(),
            got: transforms.len(),
        });
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (&(w, h), t) in sizes.iter().zip(transforms) {
        if !t.is_invertible() {
            return Err(RegistrationError::Degenerate("global transform is singular".into()).into());
        }
        let (w, h) = (w as f64, h as f64);
        for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let (u, v) = t.apply(x, y);
            x0 = x0.min(u);
            y0 = y0.min(v);
            x1 = x1.max(u);
            y1 = y1.max(v);
        }
    }
    Ok(GlobalBounds {
        min_x: snap(x0).floor() as i64,
        min_y: snap(y0).floor() as i64,
        max_x: snap(x1).ceil() as i64,
        max_y: snap(y1).ceil() as i64,
    })
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_EPS {
        r
    } else {
        v
    }
}

/// A frame resampled onto the panorama raster.
#[derive(Clone, Debug)]
pub struct WarpedFrame {
    pub image: RgbImage,
    pub valid_mask: BinaryMask,
}

/// Iterates the panorama pixels a frame covers, yielding panorama and source
/// coordinates. A pixel is covered when its source location lies inside the
/// frame's pixel grid, so that all four bilinear neighbours exist.
fn for_each_covered(
    size: (usize, usize),
    to_panorama: &AffineTransform,
    bounds: &GlobalBounds,
    mut f: impl FnMut(usize, usize, f64, f64),
) -> Result<(), MosaicError> {
    let inverse = to_panorama.invert()?;
    let (w, h) = (size.0 as f64, size.1 as f64);
    let (pw, ph) = (bounds.width(), bounds.height());
    // bounding box of the footprint, clipped to the panorama
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)] {
        let (u, v) = to_panorama.apply(x, y);
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    let ux0 = (x0.floor() - 1.0).max(0.0) as usize;
    let uy0 = (y0.floor() - 1.0).max(0.0) as usize;
    let ux1 = ((x1.ceil() + 1.0).max(0.0) as usize).min(pw.saturating_sub(1));
    let uy1 = ((y1.ceil() + 1.0).max(0.0) as usize).min(ph.saturating_sub(1));
    if x1 < 0.0 || y1 < 0.0 || ux0 > ux1 || uy0 > uy1 {
        return Ok(());
    }
    for v in uy0..=uy1 {
        for u in ux0..=ux1 {
            let (sx, sy) = inverse.apply(u as f64, v as f64);
            let (sx, sy) = (snap(sx), snap(sy));
            if sx >= 0.0 && sy >= 0.0 && sx <= w - 1.0 && sy <= h - 1.0 {
                f(u, v, sx, sy);
            }
        }
    }
    Ok(())
}

/// Panorama pixels covered by a frame of the given size.
pub fn footprint_mask(
    size: (usize, usize),
    to_panorama: &AffineTransform,
    bounds: &GlobalBounds,
) -> Result<BinaryMask, MosaicError> {
    let mut mask = BinaryMask::new(bounds.width(), bounds.height());
    for_each_covered(size, to_panorama, bounds, |u, v, _, _| mask.set(u, v, true))?;
    Ok(mask)
}

/// Bilinear sample of an RGB image at a location inside its pixel grid.
#[inline]
pub fn sample_bilinear(img: &RgbImage, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = (img.width(), img.height());
    let (fx0, fy0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - fx0, sy - fy0);
    let ix = (fx0 as usize).min(w - 1);
    let iy = (fy0 as usize).min(h - 1);
    let ix1 = (ix + 1).min(w - 1);
    let iy1 = (iy + 1).min(h - 1);
    let (p00, p10, p01, p11) = (img.get(ix, iy), img.get(ix1, iy), img.get(ix, iy1), img.get(ix1, iy1));
    std::array::from_fn(|c| {
        let top = (1.0 - fx) * f64::from(p00[c]) + fx * f64::from(p10[c]);
        let bottom = (1.0 - fx) * f64::from(p01[c]) + fx * f64::from(p11[c]);
        (1.0 - fy) * top + fy * bottom
    })
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Resamples `frame` onto the panorama raster by inverse mapping.
pub fn warp_frame(
    frame: &Frame,
    transform_to_panorama: &AffineTransform,
    bounds: &GlobalBounds,
) -> Result<WarpedFrame, MosaicError> {
    warp_image(&frame.image, transform_to_panorama, bounds)
}

pub fn warp_image(
    image: &RgbImage,
    transform_to_panorama: &AffineTransform,
    bounds: &GlobalBounds,
) -> Result<WarpedFrame, MosaicError> {
    let mut out = RgbImage::new(bounds.width(), bounds.height());
    let mut valid = BinaryMask::new(bounds.width(), bounds.height());
    for_each_covered(
        (image.width(), image.height()),
        transform_to_panorama,
        bounds,
        |u, v, sx, sy| {
            out.put(u, v, sample_bilinear(image, sx, sy).map(to_u8));
            valid.set(u, v, true);
        },
    )?;
    Ok(WarpedFrame {
        image: out,
        valid_mask: valid,
    })
}

/// Composited image with per-pixel frame counts.
#[derive(Clone, Debug)]
pub struct Composite {
    pub image: RgbImage,
    pub coverage: Vec<u32>,
}

/// Combines warped frames per pixel and channel over the frames that cover it.
/// Uncovered pixels get [`FILL_COLOUR`] and coverage 0.
pub fn composite(warped: &[WarpedFrame], mode: CompositeMode) -> Result<Composite, MosaicError> {
    let first = warped.first().ok_or(MosaicError::Empty)?;
    let (w, h) = (first.image.width(), first.image.height());
    if warped.iter().any(|f| {
        f.image.width() != w || f.image.height() != h || f.valid_mask.width() != w || f.valid_mask.height() != h
    }) {
        return Err(MosaicError::DimensionMismatch);
    }

    let mut image = RgbImage::new(w, h);
    let mut coverage = vec![0u32; w * h];
    image
        .as_raw_mut()
        .par_chunks_mut(w * 3)
        .zip(coverage.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, cov_row))| {
            let mut vals: [Vec<u8>; 3] = Default::default();
            for x in 0..w {
                vals.iter_mut().for_each(Vec::clear);
                for f in warped.iter().filter(|f| f.valid_mask.get(x, y)) {
                    let px = f.image.get(x, y);
                    for c in 0..3 {
                        vals[c].push(px[c]);
                    }
                }
                let n = vals[0].len();
                cov_row[x] = n as u32;
                let out = if n == 0 {
                    FILL_COLOUR
                } else {
                    std::array::from_fn(|c| match mode {
                        CompositeMode::Median => {
                            let v = &mut vals[c];
                            let mid = (n - 1) / 2;
                            *v.select_nth_unstable(mid).1
                        }
                        CompositeMode::Mean => {
                            let sum: u64 = vals[c].iter().map(|&v| u64::from(v)).sum();
                            ((sum + n as u64 / 2) / n as u64) as u8
                        }
                    })
                };
                row[x * 3..x * 3 + 3].copy_from_slice(&out);
            }
        });
    Ok(Composite { image, coverage })
}

/// The reconstructed background and the per-frame maps into it.
#[derive(Clone, Debug)]
pub struct Panorama {
    pub image: RgbImage,
    pub bounds: GlobalBounds,
    /// Number of frames covering each pixel, row-major.
    pub coverage: Vec<u32>,
    /// Per frame: global transform composed with the bounds offset.
    pub transforms: Vec<AffineTransform>,
}

impl Panorama {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn coverage_at(&self, x: usize, y: usize) -> u32 {
        self.coverage[y * self.width() + x]
    }

    /// Pixels no frame covers.
    pub fn uncovered_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width(), self.height(), |x, y| self.coverage_at(x, y) == 0)
    }
}

/// Sizes the panorama, warps every frame into it and composites the background.
pub fn build_panorama(
    frames: &[Frame],
    global_transforms: &[AffineTransform],
    mode: CompositeMode,
) -> Result<Panorama, MosaicError> {
    let bounds = panorama_bounds(frames, global_transforms)?;
    let transforms: Vec<AffineTransform> = global_transforms.iter().map(|t| bounds.offset().compose(t)).collect();
    let warped = frames
        .par_iter()
        .zip(transforms.par_iter())
        .map(|(f, t)| warp_frame(f, t, &bounds))
        .collect::<Result<Vec<_>, _>>()?;
    let Composite { image, coverage } = composite(&warped, mode)?;
    Ok(Panorama {
        image,
        bounds,
        coverage,
        transforms,
    })
}

/// Per-pixel coverage recomputed from frame geometry alone.
pub fn coverage_from_geometry(
    size: (usize, usize),
    transforms_to_panorama: &[AffineTransform],
    bounds: &GlobalBounds,
) -> Result<Vec<u32>, MosaicError> {
    let mut coverage = vec![0u32; bounds.width() * bounds.height()];
    for t in transforms_to_panorama {
        for_each_covered(size, t, bounds, |u, v, _, _| coverage[v * bounds.width() + u] += 1)?;
    }
    Ok(coverage)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(image: RgbImage) -> Frame {
        Frame {
            index: 0,
            timestamp_s: 0.0,
            image,
        }
    }

    fn texture(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            [(x * 7 + y * 3) as u8, (x * x + y) as u8, ((y * 11) ^ x) as u8]
        })
    }

    #[test]
    fn bounds_examples() {
        let f = frame(RgbImage::new(640, 480));
        let b = panorama_bounds(std::slice::from_ref(&f), &[AffineTransform::IDENTITY]).unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (0, 0, 640, 480));

        let b = panorama_bounds(
            &[f.clone(), f.clone()],
            &[AffineTransform::IDENTITY, AffineTransform::translation(100.0, 0.0)],
        )
        .unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (0, 0, 740, 480));

        // (x, y) -> (-y, x)
        let rot = AffineTransform::new(0.0, -1.0, 1.0, 0.0, 0.0, 0.0);
        let b = panorama_bounds(std::slice::from_ref(&f), &[rot]).unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (-480, 0, 0, 640));
        assert_eq!((b.width(), b.height()), (480, 640));

        assert!(matches!(panorama_bounds(&[], &[]), Err(MosaicError::Empty)));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = texture(31, 17);
        let b = GlobalBounds {
            min_x: 0,
            min_y: 0,
            max_x: 31,
            max_y: 17,
        };
        let wf = warp_frame(&frame(img.clone()), &AffineTransform::IDENTITY, &b).unwrap();
        assert_eq!(wf.image, img);
        assert_eq!(wf.valid_mask.count(), 31 * 17);
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let img = texture(20, 15);
        let b = GlobalBounds {
            min_x: 0,
            min_y: 0,
            max_x: 20,
            max_y: 15,
        };
        let t = AffineTransform::translation(5.0, -3.0);
        let wf = warp_frame(&frame(img.clone()), &t, &b).unwrap();
        for v in 0..15 {
            for u in 0..20 {
                let inside = u >= 5 && v + 3 < 15;
                assert_eq!(wf.valid_mask.get(u, v), inside, "({u},{v})");
                if inside {
                    assert_eq!(wf.image.get(u, v), img.get(u - 5, v + 3));
                }
            }
        }
    }

    #[test]
    fn half_pixel_shift_interpolates_midpoints() {
        let ramp = RgbImage::from_fn(3, 1, |x, _| [(x * 100) as u8; 3]);
        let t = AffineTransform::translation(0.5, 0.0);
        let b = footprint_bounds(&[(3, 1)], &[t]).unwrap();
        assert_eq!((b.min_x, b.max_x), (0, 4));
        let wf = warp_frame(&frame(ramp), &t, &b).unwrap();
        // panorama u samples source u - 0.5
        assert!(!wf.valid_mask.get(0, 0));
        assert_eq!(wf.image.get(1, 0), [50; 3]);
        assert_eq!(wf.image.get(2, 0), [150; 3]);
        assert!(!wf.valid_mask.get(3, 0));
    }

    #[test]
    fn singular_transform_rejected() {
        let b = GlobalBounds {
            min_x: 0,
            min_y: 0,
            max_x: 4,
            max_y: 4,
        };
        let t = AffineTransform::new(1.0, 1.0, 1.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            warp_frame(&frame(RgbImage::new(4, 4)), &t, &b),
            Err(MosaicError::Degenerate(_))
        ));
    }

    #[test]
    fn median_suppresses_minority_blob() {
        // 9 frames of static texture; a bright blob visits each pixel in at most 2 frames.
        let bg = texture(24, 12);
        let warped: Vec<WarpedFrame> = (0..9)
            .map(|k| {
                let mut img = bg.clone();
                for y in 0..12 {
                    for x in (k * 2)..(k * 2 + 4).min(24) {
                        img.put(x, y, [255, 0, 255]);
                    }
                }
                WarpedFrame {
                    image: img,
                    valid_mask: BinaryMask::filled(24, 12, true),
                }
            })
            .collect();
        let c = composite(&warped, CompositeMode::Median).unwrap();
        assert_eq!(c.image, bg);
        assert!(c.coverage.iter().all(|&n| n == 9));
    }

    #[test]
    fn compositing_copies_is_idempotent() {
        let img = texture(10, 8);
        let mask = BinaryMask::from_fn(10, 8, |x, y| x + y > 3);
        let wf = WarpedFrame {
            image: img.clone(),
            valid_mask: mask.clone(),
        };
        for k in 1..=5 {
            for mode in [CompositeMode::Median, CompositeMode::Mean] {
                let c = composite(&vec![wf.clone(); k], mode).unwrap();
                for y in 0..8 {
                    for x in 0..10 {
                        if mask.get(x, y) {
                            assert_eq!(c.image.get(x, y), img.get(x, y));
                            assert_eq!(c.coverage[y * 10 + x], k as u32);
                        } else {
                            assert_eq!(c.image.get(x, y), FILL_COLOUR);
                            assert_eq!(c.coverage[y * 10 + x], 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lower_median_for_even_counts() {
        let mk = |v: u8| WarpedFrame {
            image: RgbImage::filled(1, 1, [v; 3]),
            valid_mask: BinaryMask::filled(1, 1, true),
        };
        let c = composite(&[mk(10), mk(40), mk(20), mk(30)], CompositeMode::Median).unwrap();
        assert_eq!(c.image.get(0, 0), [20; 3]);
        let c = composite(&[mk(10), mk(40), mk(20), mk(31)], CompositeMode::Mean).unwrap();
        assert_eq!(c.image.get(0, 0), [25; 3]);
        assert!(matches!(composite(&[], CompositeMode::Mean), Err(MosaicError::Empty)));
    }

    #[test]
    fn coverage_matches_warp() {
        let f = frame(texture(30, 20));
        let ts = [
            AffineTransform::IDENTITY,
            AffineTransform::new(0.99, 0.05, -0.04, 1.01, 7.3, -2.2),
        ];
        let p = build_panorama(&[f.clone(), f], &ts, CompositeMode::Median).unwrap();
        let recomputed = coverage_from_geometry((30, 20), &p.transforms, &p.bounds).unwrap();
        assert_eq!(recomputed, p.coverage);
    }
}
