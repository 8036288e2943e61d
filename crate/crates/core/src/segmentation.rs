//! Diver segmentation and barycentre estimation.
//!
//! Pixels are accepted by a per-channel double threshold in HSV space. The
//! same filter applied to the panorama marks background regions that happen
//! to share the diver's colour; those are removed from each frame's mask
//! before small objects are discarded and the surviving pixels averaged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::Frame;
use crate::image::RgbImage;
use crate::mosaic::{self, GlobalBounds, MosaicError};
use crate::registration::AffineTransform;

pub use crate::image::BinaryMask;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Warp(#[from] MosaicError),
}

/// Hexcone RGB to HSV: hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
/// Grey pixels (including black) get hue 0.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(r) / 255.0, f64::from(g) / 255.0, f64::from(b) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to 8-bit channels.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Per-channel acceptance bands. The hue band wraps through 0° when
/// `h_lo > h_hi`.
///
/// Serialized as `{"h": [340, 50], "s": [0.15, 0.9], "v": [0.2, 1.0]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HsvBands", into = "HsvBands")]
pub struct HsvThresholds {
    pub h_lo: f64,
    pub h_hi: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

#[derive(Serialize, Deserialize)]
struct HsvBands {
    h: [f64; 2],
    s: [f64; 2],
    v: [f64; 2],
}

impl TryFrom<HsvBands> for HsvThresholds {
    type Error = SegmentationError;

    fn try_from(b: HsvBands) -> Result<Self, Self::Error> {
        HsvThresholds::new(b.h, b.s, b.v)
    }
}

impl From<HsvThresholds> for HsvBands {
    fn from(t: HsvThresholds) -> Self {
        HsvBands {
            h: [t.h_lo, t.h_hi],
            s: [t.s_lo, t.s_hi],
            v: [t.v_lo, t.v_hi],
        }
    }
}

impl Default for HsvThresholds {
    /// Broad skin-tone band; expect to tune it per clip.
    fn default() -> Self {
        Self {
            h_lo: 340.0,
            h_hi: 50.0,
            s_lo: 0.15,
            s_hi: 0.9,
            v_lo: 0.2,
            v_hi: 1.0,
        }
    }
}

impl HsvThresholds {
    pub fn new(h: [f64; 2], s: [f64; 2], v: [f64; 2]) -> Result<Self, SegmentationError> {
        let t = Self {
            h_lo: h[0],
            h_hi: h[1],
            s_lo: s[0],
            s_hi: s[1],
            v_lo: v[0],
            v_hi: v[1],
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SegmentationError> {
        let hue_ok = |h: f64| (0.0..360.0).contains(&h);
        if !hue_ok(self.h_lo) || !hue_ok(self.h_hi) {
            return Err(SegmentationError::InvalidThresholds(format!(
                "hue bounds must lie in [0, 360): [{}, {}]",
                self.h_lo, self.h_hi
            )));
        }
        for (name, lo, hi) in [("s", self.s_lo, self.s_hi), ("v", self.v_lo, self.v_hi)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(SegmentationError::InvalidThresholds(format!(
                    "{name} band [{lo}, {hi}] must be ordered within [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn hue_passes(&self, h: f64) -> bool {
        if self.h_lo <= self.h_hi {
            self.h_lo <= h && h <= self.h_hi
        } else {
            h >= self.h_lo || h <= self.h_hi
        }
    }

    pub fn passes(&self, h: f64, s: f64, v: f64) -> bool {
        self.hue_passes(h) && self.s_lo <= s && s <= self.s_hi && self.v_lo <= v && v <= self.v_hi
    }

    pub fn passes_rgb(&self, rgb: [u8; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        self.passes(h, s, v)
    }
}

/// Colour filter: a pixel is set when all three channels pass and it is not
/// set in `ignore`.
pub fn apply_threshold(image: &RgbImage, th: &HsvThresholds, ignore: Option<&BinaryMask>) -> BinaryMask {
    BinaryMask::from_fn(image.width(), image.height(), |x, y| {
        !ignore.is_some_and(|m| m.get(x, y)) && th.passes_rgb(image.get(x, y))
    })
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), SegmentationError> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(SegmentationError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ))
    }
}

/// Dilation with a `(2 r + 1)²` square structuring element.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let horiz = BinaryMask::from_fn(w, h, |x, y| {
        (x.saturating_sub(radius)..=(x + radius).min(w - 1)).any(|xx| mask.get(xx, y))
    });
    BinaryMask::from_fn(w, h, |x, y| {
        (y.saturating_sub(radius)..=(y + radius).min(h - 1)).any(|yy| horiz.get(x, yy))
    })
}

/// `frame_mask AND NOT dilate(background_mask, dilation_px)`.
pub fn mask_subtract(
    frame_mask: &BinaryMask,
    background_mask: &BinaryMask,
    dilation_px: usize,
) -> Result<BinaryMask, SegmentationError> {
    check_dims(frame_mask, background_mask)?;
    let bg = dilate(background_mask, dilation_px);
    Ok(BinaryMask::from_fn(frame_mask.width(), frame_mask.height(), |x, y| {
        frame_mask.get(x, y) && !bg.get(x, y)
    }))
}

/// Pixel adjacency for component labelling. Serialized as `4` or `8`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {n}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Geometry of one connected component. Moments are kept as exact integer
/// sums so merged barycentres match a direct pixel average bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentStats {
    pub label: usize,
    pub area: usize,
    pub centroid_x: f64,
    pub centroid_y: f64,
    /// `(min_x, min_y, max_x, max_y)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub sum_x: u64,
    pub sum_y: u64,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Two-pass union-find labelling. Components are ordered by the top-left of
/// their bounding box `(min_y, min_x)`, then by first pixel in raster order;
/// `label` is the position in that order.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<ComponentStats> {
    label_components(mask, connectivity).1
}

/// Like [`connected_components`], also returning the per-pixel label raster
/// (`usize::MAX` for background).
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<usize>, Vec<ComponentStats>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![usize::MAX; w * h];
    let mut parent: Vec<usize> = Vec::new();

    let back_neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, 0), (-1, -1), (0, -1), (1, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut current: Option<usize> = None;
            for &(dx, dy) in back_neighbours {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let l = labels[ny as usize * w + nx as usize];
                if l == usize::MAX {
                    continue;
                }
                current = Some(match current {
                    None => find(&mut parent, l),
                    Some(c) => {
                        let (ra, rb) = (find(&mut parent, c), find(&mut parent, l));
                        let root = ra.min(rb);
                        parent[ra] = root;
                        parent[rb] = root;
                        root
                    }
                });
            }
            labels[y * w + x] = current.unwrap_or_else(|| {
                parent.push(parent.len());
                parent.len() - 1
            });
        }
    }

    struct Acc {
        area: usize,
        sum_x: u64,
        sum_y: u64,
        bbox: (usize, usize, usize, usize),
        first: usize,
    }
    let mut acc: Vec<Option<Acc>> = (0..parent.len()).map(|_| None).collect();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == usize::MAX {
                continue;
            }
            let root = find(&mut parent, l);
            let a = acc[root].get_or_insert(Acc {
                area: 0,
                sum_x: 0,
                sum_y: 0,
                bbox: (x, y, x, y),
                first: y * w + x,
            });
            a.area += 1;
            a.sum_x += x as u64;
            a.sum_y += y as u64;
            a.bbox.0 = a.bbox.0.min(x);
            a.bbox.1 = a.bbox.1.min(y);
            a.bbox.2 = a.bbox.2.max(x);
            a.bbox.3 = a.bbox.3.max(y);
        }
    }
    let mut comps: Vec<(usize, Acc)> = acc
        .into_iter()
        .enumerate()
        .filter_map(|(root, a)| a.map(|a| (root, a)))
        .collect();
    comps.sort_by_key(|(_, a)| (a.bbox.1, a.bbox.0, a.first));
    let mut final_label = vec![usize::MAX; parent.len()];
    for (label, (root, _)) in comps.iter().enumerate() {
        final_label[*root] = label;
    }
    for l in labels.iter_mut().filter(|l| **l != usize::MAX) {
        *l = final_label[find(&mut parent, *l)];
    }
    let stats = comps
        .into_iter()
        .enumerate()
        .map(|(label, (_, a))| ComponentStats {
            label,
            area: a.area,
            centroid_x: a.sum_x as f64 / a.area as f64,
            centroid_y: a.sum_y as f64 / a.area as f64,
            bbox: a.bbox,
            sum_x: a.sum_x,
            sum_y: a.sum_y,
        })
        .collect();
    (labels, stats)
}

/// Region of interest in panorama pixels, inclusive on all sides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Roi {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl From<[f64; 4]> for Roi {
    fn from(v: [f64; 4]) -> Self {
        Roi {
            min_x: v[0],
            min_y: v[1],
            max_x: v[2],
            max_y: v[3],
        }
    }
}

impl From<Roi> for [f64; 4] {
    fn from(r: Roi) -> Self {
        [r.min_x, r.min_y, r.max_x, r.max_y]
    }
}

impl Roi {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.min_x <= x && x <= self.max_x && self.min_y <= y && y <= self.max_y
    }
}

/// Keeps components with `area >= min_area` whose centroid lies in `roi`.
pub fn filter_objects(components: &[ComponentStats], min_area: usize, roi: Option<&Roi>) -> Vec<ComponentStats> {
    components
        .iter()
        .filter(|c| c.area >= min_area && roi.is_none_or(|r| r.contains(c.centroid_x, c.centroid_y)))
        .copied()
        .collect()
}

/// Mean position of all pixels in the given components, with their total area.
/// `None` when there is nothing to average.
pub fn barycentre(components: &[ComponentStats]) -> Option<(f64, f64, usize)> {
    let area: usize = components.iter().map(|c| c.area).sum();
    if area == 0 {
        return None;
    }
    let sx: u64 = components.iter().map(|c| c.sum_x).sum();
    let sy: u64 = components.iter().map(|c| c.sum_y).sum();
    Some((sx as f64 / area as f64, sy as f64 / area as f64, area))
}

/// One barycentre measurement in panorama coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarycentreSample {
    pub frame_index: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub area: usize,
    pub valid: bool,
}

/// Parameters of the per-frame detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionParams {
    pub thresholds: HsvThresholds,
    pub min_area: usize,
    pub roi: Option<Roi>,
    pub dilation_px: usize,
    pub connectivity: Connectivity,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            thresholds: HsvThresholds::default(),
            min_area: 50,
            roi: None,
            dilation_px: 1,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Masks produced while locating one barycentre, kept for debugging output.
#[derive(Clone, Debug)]
pub struct Detection {
    pub sample: BarycentreSample,
    pub warped: RgbImage,
    pub foreground: BinaryMask,
}

/// Warps a frame into the panorama, colour-filters it (ignoring pixels the
/// panorama or the frame does not cover), subtracts the filtered panorama,
/// filters objects and averages what survives.
///
/// `panorama_uncovered` marks coverage-0 panorama pixels; `filtered_panorama`
/// is the colour filter applied to the panorama.
pub fn locate_barycentre(
    frame: &Frame,
    transform_to_panorama: &AffineTransform,
    bounds: &GlobalBounds,
    panorama_uncovered: &BinaryMask,
    filtered_panorama: &BinaryMask,
    params: &DetectionParams,
) -> Result<Detection, SegmentationError> {
    let warped = mosaic::warp_frame(frame, transform_to_panorama, bounds)?;
    check_dims(&warped.valid_mask, panorama_uncovered)?;
    check_dims(&warped.valid_mask, filtered_panorama)?;
    let ignore = BinaryMask::from_fn(bounds.width(), bounds.height(), |x, y| {
        panorama_uncovered.get(x, y) || !warped.valid_mask.get(x, y)
    });
    let raw = apply_threshold(&warped.image, &params.thresholds, Some(&ignore));
    let foreground = mask_subtract(&raw, filtered_panorama, params.dilation_px)?;
    let (labels, components) = label_components(&foreground, params.connectivity);
    let kept = filter_objects(&components, params.min_area.max(1), params.roi.as_ref());
    let sample = match barycentre(&kept) {
        Some((x, y, area)) => BarycentreSample {
            frame_index: frame.index,
            t: frame.timestamp_s,
            x,
            y,
            area,
            valid: true,
        },
        None => BarycentreSample {
            frame_index: frame.index,
            t: frame.timestamp_s,
            x: f64::NAN,
            y: f64::NAN,
            area: 0,
            valid: false,
        },
    };
    let mut is_kept = vec![false; components.len()];
    kept.iter().for_each(|c| is_kept[c.label] = true);
    let width = foreground.width();
    let kept_mask = BinaryMask::from_fn(width, foreground.height(), |x, y| {
        let l = labels[y * width + x];
        l != usize::MAX && is_kept[l]
    });
    Ok(Detection {
        sample,
        warped: warped.image,
        foreground: kept_mask,
    })
}
