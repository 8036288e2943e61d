//! Synthetic dive sequences with exact ground truth.
//!
//! A world is textured with two-octave value noise. A coloured disc flies
//! through it on a ballistic path, and each frame views the world through its
//! own camera transform with seeded Gaussian sensor noise. World coordinates
//! use image orientation: rows grow downward and the ballistic height is
//! measured upward, so a rising blob has a decreasing row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::Frame;
use crate::image::RgbImage;
use crate::registration::AffineTransform;
use crate::segmentation::{hsv_to_rgb, HsvThresholds};

/// Extra world border rendered around the union of the camera footprints.
const WORLD_MARGIN_PX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("blob at frame {frame} ({x:.1}, {y:.1}) leaves the rendered world")]
    BlobOutsideWorld { frame: usize, x: f64, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub seed: u64,
    /// Lattice spacing of the coarse noise octave in pixels.
    pub feature_scale: f64,
    /// Static patches in the blob colour, `[min_x, min_y, max_x, max_y]` in
    /// world pixels; the panorama should absorb them.
    #[serde(default)]
    pub distractors: Vec<[f64; 4]>,
}

/// Ballistic disc: `x = x0 + vx0 t`, height above `y0` is `vy0 t - g_px t² / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Hue in degrees, saturation and value in `[0, 1]`.
    pub colour_hsv: [f64; 3],
    pub radius: f64,
    pub x0: f64,
    pub y0: f64,
    pub vx0: f64,
    pub vy0: f64,
    pub g_px: f64,
}

impl BlobSpec {
    /// Centre in world pixels at time `t`.
    pub fn centre_at(&self, t: f64) -> (f64, f64) {
        let height = self.vy0 * t - 0.5 * self.g_px * t * t;
        (self.x0 + self.vx0 * t, self.y0 - height)
    }

    pub fn t_apex(&self) -> f64 {
        self.vy0 / self.g_px
    }

    /// Highest point above the start row, in pixels.
    pub fn apex_height(&self) -> f64 {
        self.vy0 * self.vy0 / (2.0 * self.g_px)
    }

    pub fn rgb(&self) -> [u8; 3] {
        let [h, s, v] = self.colour_hsv;
        hsv_to_rgb(h, s, v)
    }

    /// A threshold band that accepts the blob colour with margin and rejects
    /// the low-saturation background.
    pub fn thresholds(&self) -> HsvThresholds {
        let [h, s, v] = self.colour_hsv;
        HsvThresholds {
            h_lo: (h - 20.0).rem_euclid(360.0),
            h_hi: (h + 20.0).rem_euclid(360.0),
            s_lo: (s - 0.25).max(0.45),
            s_hi: 1.0,
            v_lo: (v - 0.4).max(0.4),
            v_hi: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub frame_size: (usize, usize),
    pub n_frames: usize,
    pub fps: f64,
    /// World-to-frame map per frame.
    pub camera_path: Vec<AffineTransform>,
    pub background: BackgroundSpec,
    pub blob: Option<BlobSpec>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// World row of the water surface.
    #[serde(default)]
    pub water_line_y: Option<f64>,
}

fn default_noise_sigma() -> f64 {
    2.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1".into());
        }
        if self.frame_size.0 < 2 || self.frame_size.1 < 2 {
            return bad(format!("frame size {:?} is too small", self.frame_size));
        }
        if !(self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.camera_path.len() != self.n_frames {
            return bad(format!(
                "camera path has {} transforms for {} frames",
                self.camera_path.len(),
                self.n_frames
            ));
        }
        if let Some(k) = self.camera_path.iter().position(|t| !t.is_invertible()) {
            return bad(format!("camera transform {k} is not invertible"));
        }
        if !(self.background.feature_scale >= 2.0) {
            return bad("feature_scale must be at least 2 px".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        if let Some(b) = &self.blob {
            if !(b.radius >= 1.0) {
                return bad(format!("blob radius must be at least 1, got {}", b.radius));
            }
            let [h, s, v] = b.colour_hsv;
            if !(0.0..360.0).contains(&h) || !(0.5..=1.0).contains(&s) || !(0.5..=1.0).contains(&v) {
                return bad(format!(
                    "blob colour {:?} is not separable from the background",
                    b.colour_hsv
                ));
            }
        }
        if self.water_line_y.is_some() && (self.camera_path[0].b != 0.0 || self.camera_path[0].d <= 0.0) {
            return bad("a water line needs a frame-0 camera without rotation".into());
        }
        Ok(())
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        k as f64 / self.fps
    }

    /// Water line in frame-0 pixel rows.
    pub fn water_line_in_reference(&self) -> Option<f64> {
        self.water_line_y.map(|y| self.camera_path[0].apply(0.0, y).1)
    }
}

/// Exact quantities behind a rendered sequence.
///
/// Serializes without the background raster, which is written as an image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub world_to_frame: Vec<AffineTransform>,
    /// Blob centre per frame in world pixels; empty when there is no blob.
    pub centres: Vec<(f64, f64)>,
    pub timestamps: Vec<f64>,
    pub g_px: Option<f64>,
    pub apex_height_px: Option<f64>,
    pub t_apex: Option<f64>,
    /// World position of background pixel `(0, 0)`.
    pub background_origin: (i64, i64),
    /// Noise-free, blob-free world texture sampled at integer world positions.
    #[serde(skip)]
    pub background: RgbImage,
}

impl GroundTruth {
    /// Map taking frame `k` pixels into frame-0 pixels.
    pub fn frame_to_reference(&self, k: usize) -> AffineTransform {
        let to_world = self.world_to_frame[k].invert().expect("validated camera");
        self.world_to_frame[0].compose(&to_world)
    }

    /// Blob centre of frame `k` in frame-0 pixels.
    pub fn centre_in_reference(&self, k: usize) -> Option<(f64, f64)> {
        self.centres.get(k).map(|&(x, y)| self.world_to_frame[0].apply(x, y))
    }

    /// Background colour at a world position, read from the stored raster.
    pub fn background_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let bx = x - self.background_origin.0 as f64;
        let by = y - self.background_origin.1 as f64;
        let (w, h) = (self.background.width() as f64, self.background.height() as f64);
        (bx >= 0.0 && by >= 0.0 && bx <= w - 1.0 && by <= h - 1.0)
            .then(|| crate::mosaic::sample_bilinear(&self.background, bx, by))
    }
}

/// One octave of value noise: random node colours on a square lattice.
struct Lattice {
    spacing: f64,
    i0: i64,
    j0: i64,
    cols: usize,
    nodes: Vec<[f64; 3]>,
}

impl Lattice {
    fn new(rng: &mut ChaCha8Rng, spacing: f64, extent: (f64, f64, f64, f64)) -> Self {
        let i0 = (extent.0 / spacing).floor() as i64 - 1;
        let j0 = (extent.1 / spacing).floor() as i64 - 1;
        let cols = ((extent.2 / spacing).ceil() as i64 + 2 - i0) as usize;
        let rows = ((extent.3 / spacing).ceil() as i64 + 2 - j0) as usize;
        let nodes = (0..cols * rows)
            .map(|_| {
                // bright-ish grey with a faint tint keeps saturation low
                let grey: f64 = rng.random_range(20.0..235.0);
                let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-8.0..8.0));
                tint.map(|t| grey + t)
            })
            .collect();
        Self {
            spacing,
            i0,
            j0,
            cols,
            nodes,
        }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let gx = x / self.spacing;
        let gy = y / self.spacing;
        let (fx, fy) = (gx.floor(), gy.floor());
        let (tx, ty) = (gx - fx, gy - fy);
        let i = (fx as i64 - self.i0) as usize;
        let j = (fy as i64 - self.j0) as usize;
        let node = |di: usize, dj: usize| self.nodes[(j + dj) * self.cols + i + di];
        let (a, b, c, d) = (node(0, 0), node(1, 0), node(0, 1), node(1, 1));
        std::array::from_fn(|ch| {
            let top = a[ch] + tx * (b[ch] - a[ch]);
            let bottom = c[ch] + tx * (d[ch] - c[ch]);
            top + ty * (bottom - top)
        })
    }
}

/// The noise-free, blob-free world.
struct World {
    coarse: Lattice,
    fine: Lattice,
    distractors: Vec<[f64; 4]>,
    distractor_rgb: [f64; 3],
}

impl World {
    fn colour(&self, x: f64, y: f64) -> [f64; 3] {
        if self
            .distractors
            .iter()
            .any(|r| x >= r[0] && x <= r[2] && y >= r[1] && y <= r[3])
        {
            return self.distractor_rgb;
        }
        let c = self.coarse.sample(x, y);
        let f = self.fine.sample(x, y);
        std::array::from_fn(|ch| 0.6 * c[ch] + 0.4 * f[ch])
    }
}

/// World-space bounding box of all camera footprints plus a margin.
fn world_extent(spec: &SynthSpec) -> (f64, f64, f64, f64) {
    let (w, h) = (spec.frame_size.0 as f64, spec.frame_size.1 as f64);
    let mut e = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for cam in &spec.camera_path {
        let inv = cam.invert().expect("validated camera");
        for (x, y) in [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)] {
            let (u, v) = inv.apply(x, y);
            e = (e.0.min(u), e.1.min(v), e.2.max(u), e.3.max(v));
        }
    }
    (
        e.0 - WORLD_MARGIN_PX,
        e.1 - WORLD_MARGIN_PX,
        e.2 + WORLD_MARGIN_PX,
        e.3 + WORLD_MARGIN_PX,
    )
}

/// Coverage of a frame pixel by a disc: 1 inside, 0 outside, linear over
/// the one-pixel rim.
pub fn disc_alpha(px: f64, py: f64, centre: (f64, f64), radius: f64) -> f64 {
    let d = (px - centre.0).hypot(py - centre.1);
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

/// Renders the frames and their ground truth. Deterministic for a given spec.
pub fn render_sequence(spec: &SynthSpec) -> Result<(Vec<Frame>, GroundTruth), SynthError> {
    spec.validate()?;
    let extent = world_extent(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background.seed);
    let scale = spec.background.feature_scale;
    let coarse = Lattice::new(&mut rng, scale, extent);
    let fine = Lattice::new(&mut rng, (scale / 2.0).max(2.0), extent);
    let world = World {
        coarse,
        fine,
        distractors: spec.background.distractors.clone(),
        distractor_rgb: spec
            .blob
            .as_ref()
            .map_or([220.0, 40.0, 30.0], |b| b.rgb().map(f64::from)),
    };

    let timestamps: Vec<f64> = (0..spec.n_frames).map(|k| spec.timestamp(k)).collect();
    let centres: Vec<(f64, f64)> = match &spec.blob {
        Some(b) => timestamps.iter().map(|&t| b.centre_at(t)).collect(),
        None => Vec::new(),
    };
    if let Some(b) = &spec.blob {
        for (k, &(x, y)) in centres.iter().enumerate() {
            let r = b.radius + 1.0;
            if x - r < extent.0 || y - r < extent.1 || x + r > extent.2 || y + r > extent.3 {
                return Err(SynthError::BlobOutsideWorld { frame: k, x, y });
            }
        }
    }

    let (w, h) = spec.frame_size;
    let frames: Vec<Frame> = (0..spec.n_frames)
        .into_par_iter()
        .map(|k| {
            let to_world = spec.camera_path[k].invert().expect("validated camera");
            let blob = spec.blob.as_ref().map(|b| (b, centres[k], b.rgb().map(f64::from)));
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            noise_rng.set_stream(k as u64 + 1);
            let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
            let mut image = RgbImage::new(w, h);
            for v in 0..h {
                for u in 0..w {
                    let (x, y) = to_world.apply(u as f64, v as f64);
                    let mut c = world.colour(x, y);
                    if let Some((b, centre, rgb)) = blob {
                        let a = disc_alpha(x, y, centre, b.radius);
                        if a > 0.0 {
                            c = std::array::from_fn(|ch| (1.0 - a) * c[ch] + a * rgb[ch]);
                        }
                    }
                    let px = c.map(|ch| {
                        let n = if spec.noise_sigma > 0.0 {
                            normal.sample(&mut noise_rng)
                        } else {
                            0.0
                        };
                        (ch + n).round().clamp(0.0, 255.0) as u8
                    });
                    image.put(u, v, px);
                }
            }
            Frame {
                index: k,
                timestamp_s: timestamps[k],
                image,
            }
        })
        .collect();

    let origin = (extent.0.ceil() as i64, extent.1.ceil() as i64);
    let bw = (extent.2.floor() as i64 - origin.0 + 1) as usize;
    let bh = (extent.3.floor() as i64 - origin.1 + 1) as usize;
    let background = RgbImage::from_fn(bw, bh, |x, y| {
        world
            .colour((origin.0 + x as i64) as f64, (origin.1 + y as i64) as f64)
            .map(|c| c.round().clamp(0.0, 255.0) as u8)
    });

    let truth = GroundTruth {
        world_to_frame: spec.camera_path.clone(),
        centres,
        timestamps,
        g_px: spec.blob.as_ref().map(|b| b.g_px),
        apex_height_px: spec.blob.as_ref().map(BlobSpec::apex_height),
        t_apex: spec.blob.as_ref().map(BlobSpec::t_apex),
        background_origin: origin,
        background,
    };
    Ok((frames, truth))
}

/// Names of the built-in scenarios.
pub const SCENARIO_NAMES: [&str; 3] = ["static", "vibration", "panning"];

const N_FRAMES: usize = 50;
const FPS: f64 = 25.0;
const G_PX: f64 = 500.0;
const VY0: f64 = 490.0;
const BLOB_RADIUS: f64 = 12.0;
const BLOB_HSV: [f64; 3] = [10.0, 0.85, 0.9];

fn dive_blob(x0: f64, y0: f64, vx0: f64) -> BlobSpec {
    BlobSpec {
        colour_hsv: BLOB_HSV,
        radius: BLOB_RADIUS,
        x0,
        y0,
        vx0,
        vy0: VY0,
        g_px: G_PX,
    }
}

fn fixed_camera_spec(seed: u64, camera_path: Vec<AffineTransform>) -> SynthSpec {
    SynthSpec {
        seed,
        frame_size: (320, 360),
        n_frames: N_FRAMES,
        fps: FPS,
        camera_path,
        background: BackgroundSpec {
            seed: seed ^ 0x5eed,
            feature_scale: 8.0,
            distractors: vec![[262.0, 30.0, 284.0, 52.0]],
        },
        blob: Some(dive_blob(140.0, 320.0, 40.0)),
        noise_sigma: 2.0,
        water_line_y: Some(300.0),
    }
}

/// Fixed camera.
pub fn static_scenario() -> SynthSpec {
    fixed_camera_spec(1, vec![AffineTransform::IDENTITY; N_FRAMES])
}

/// Hand-held camera: each frame is shaken by a seeded sub-pixel translation
/// of at most 2 px per axis.
pub fn vibration_scenario() -> SynthSpec {
    let seed = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = (0..N_FRAMES)
        .map(|_| AffineTransform::translation(rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0)))
        .collect();
    fixed_camera_spec(seed, path)
}

/// Camera that follows the blob with a small lag, so the reference system
/// changes substantially between the first and last frame.
pub fn panning_scenario() -> SynthSpec {
    let (w, h) = (320usize, 240usize);
    let blob = dive_blob(200.0, 330.0, 60.0);
    let path = (0..N_FRAMES)
        .map(|k| {
            let t = k as f64 / FPS;
            let (cx, cy) = blob.centre_at(t);
            let lag_x = 12.0 * (2.1 * t).sin();
            let lag_y = 10.0 * (1.7 * t + 0.4).cos();
            AffineTransform::translation(w as f64 / 2.0 - cx + lag_x, h as f64 / 2.0 - cy + lag_y)
        })
        .collect();
    SynthSpec {
        seed: 3,
        frame_size: (w, h),
        n_frames: N_FRAMES,
        fps: FPS,
        camera_path: path,
        background: BackgroundSpec {
            seed: 3 ^ 0x5eed,
            feature_scale: 8.0,
            distractors: vec![[60.0, 120.0, 80.0, 140.0]],
        },
        blob: Some(blob),
        noise_sigma: 2.0,
        water_line_y: Some(310.0),
    }
}

/// The built-in scenarios, in catalogue order.
pub fn standard_scenarios() -> Vec<(&'static str, SynthSpec)> {
    vec![
        ("static", static_scenario()),
        ("vibration", vibration_scenario()),
        ("panning", panning_scenario()),
    ]
}

pub fn scenario(name: &str) -> Option<SynthSpec> {
    standard_scenarios()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s)
}
