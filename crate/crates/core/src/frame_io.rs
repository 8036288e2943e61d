//! Frame sequences: sampling-rate arithmetic, decimation plans and manifest loading.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{PnmError, RgbImage};

/// Standard gravity in m/s².
pub const STANDARD_GRAVITY: f64 = 9.81;
/// Default platform height in metres.
pub const DEFAULT_DROP_HEIGHT_M: f64 = 10.0;
/// Number of segments a dive is split into when estimating figure duration.
pub const DEFAULT_FIGURES: u32 = 5;
/// Sampling factor above the figure rate needed to avoid aliasing.
pub const NYQUIST_FACTOR: f64 = 2.0;
/// Analysis frame rate used by the pipeline, in Hz.
pub const ANALYSIS_RATE_HZ: f64 = 25.0;

#[derive(Debug, Error)]
pub enum FrameIoError {
    /// A physical quantity was outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

/// Free-fall time from rest over `drop_height_m`: `sqrt(2 h / g)`.
pub fn compute_dive_duration(drop_height_m: f64, g: f64) -> Result<f64, FrameIoError> {
    if !(drop_height_m > 0.0) || !(g > 0.0) {
        return Err(FrameIoError::Domain(format!(
            "drop height ({drop_height_m}) and gravity ({g}) must be positive"
        )));
    }
    Ok((2.0 * drop_height_m / g).sqrt())
}

/// Duration of one figure when the dive is split into `n_figures` equal parts.
pub fn figure_duration(dive_duration_s: f64, n_figures: u32) -> Result<f64, FrameIoError> {
    if n_figures == 0 {
        return Err(FrameIoError::Domain("figure count must be at least 1".into()));
    }
    if !(dive_duration_s > 0.0) {
        return Err(FrameIoError::Domain(format!(
            "dive duration must be positive, got {dive_duration_s}"
        )));
    }
    Ok(dive_duration_s / f64::from(n_figures))
}

/// Acquisition rate needed to resolve figures lasting `t_fig_s`:
/// `max(nyquist_factor / t_fig_s, safety_rate_hz)`.
pub fn required_rate(t_fig_s: f64, nyquist_factor: f64, safety_rate_hz: f64) -> Result<f64, FrameIoError> {
    if !(t_fig_s > 0.0) {
        return Err(FrameIoError::Domain(format!(
            "figure duration must be positive, got {t_fig_s}"
        )));
    }
    if !(nyquist_factor >= 1.0) {
        return Err(FrameIoError::Domain(format!(
            "nyquist factor must be >= 1, got {nyquist_factor}"
        )));
    }
    Ok((nyquist_factor * (1.0 / t_fig_s)).max(safety_rate_hz))
}

/// Which source frames to keep when decimating to `target_fps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub source_fps: f64,
    pub target_fps: f64,
    pub selected_indices: Vec<usize>,
}

impl SamplingPlan {
    /// Keeps every frame.
    pub fn identity(source_fps: f64, n_source_frames: usize) -> Self {
        Self {
            source_fps,
            target_fps: source_fps,
            selected_indices: (0..n_source_frames).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_indices.is_empty()
    }

    /// Timestamps of the selected frames relative to the first one.
    pub fn timestamps(&self) -> Vec<f64> {
        let t0 = self.selected_indices.first().copied().unwrap_or(0) as f64 / self.source_fps;
        self.selected_indices
            .iter()
            .map(|&i| i as f64 / self.source_fps - t0)
            .collect()
    }
}

/// Decimates by index rounding: `round(k * source_fps / target_fps)` for every
/// `k` that still lands inside the clip.
pub fn plan_sampling(source_fps: f64, target_fps: f64, n_source_frames: usize) -> Result<SamplingPlan, FrameIoError> {
    if !(target_fps > 0.0) || !source_fps.is_finite() {
        return Err(FrameIoError::Config(format!(
            "target rate must be positive, got {target_fps}"
        )));
    }
    if target_fps > source_fps {
        return Err(FrameIoError::Config(format!(
            "target rate {target_fps} Hz exceeds source rate {source_fps} Hz; upsampling is not supported"
        )));
    }
    if n_source_frames == 0 {
        return Err(FrameIoError::Config("clip has no frames".into()));
    }
    let step = source_fps / target_fps;
    let mut selected: Vec<usize> = Vec::new();
    for k in 0usize.. {
        let idx = (k as f64 * step).round() as usize;
        if idx >= n_source_frames {
            break;
        }
        if selected.last() != Some(&idx) {
            selected.push(idx);
        }
    }
    Ok(SamplingPlan {
        source_fps,
        target_fps,
        selected_indices: selected,
    })
}

/// Description of a recorded clip as a list of still frames.
///
/// Serialized as
/// `{"source_fps": 50, "frames": ["f0001.ppm", ...], "drop_height_m": 10, "water_line_y": 310, "g": 9.81}`.
/// Relative frame paths resolve against the manifest's directory.
/// `source_indices` is written by the `sample` stage so that a decimated
/// manifest keeps the original frame timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub source_fps: f64,
    #[serde(rename = "frames")]
    pub frame_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_height_m: Option<f64>,
    /// Water line as an image row in reference-frame (frame 0) coordinates.
    #[serde(rename = "water_line_y", default, skip_serializing_if = "Option::is_none")]
    pub water_line_y_global: Option<f64>,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_indices: Option<Vec<usize>>,
}

fn default_g() -> f64 {
    STANDARD_GRAVITY
}

impl FrameManifest {
    pub fn new(source_fps: f64, frame_paths: Vec<PathBuf>) -> Self {
        Self {
            source_fps,
            frame_paths,
            drop_height_m: None,
            water_line_y_global: None,
            g: STANDARD_GRAVITY,
            source_indices: None,
        }
    }

    /// Parses and validates a manifest, resolving relative frame paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, FrameIoError> {
        let mut m: FrameManifest =
            serde_json::from_str(text).map_err(|e| FrameIoError::Config(format!("invalid manifest: {e}")))?;
        m.validate()?;
        for p in &mut m.frame_paths {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, FrameIoError> {
        let text = fs::read_to_string(path).map_err(|source| FrameIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<(), FrameIoError> {
        if !(self.source_fps > 0.0) || !self.source_fps.is_finite() {
            return Err(FrameIoError::Config(format!(
                "source_fps must be positive, got {}",
                self.source_fps
            )));
        }
        if self.frame_paths.is_empty() {
            return Err(FrameIoError::Config("manifest lists no frames".into()));
        }
        if let Some(h) = self.drop_height_m {
            if !(h > 0.0) {
                return Err(FrameIoError::Config(format!("drop_height_m must be positive, got {h}")));
            }
        }
        if !(self.g > 0.0) {
            return Err(FrameIoError::Config(format!("g must be positive, got {}", self.g)));
        }
        if let Some(idx) = &self.source_indices {
            if idx.len() != self.frame_paths.len() || idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(FrameIoError::Config(
                    "source_indices must be strictly increasing and match the frame list".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Source-clip index of each listed frame.
    pub fn source_index(&self, i: usize) -> usize {
        self.source_indices.as_ref().map_or(i, |v| v[i])
    }

    /// Manifest restricted to the frames a plan selects, keeping their source indices.
    pub fn decimated(&self, plan: &SamplingPlan) -> Result<Self, FrameIoError> {
        check_plan(self, plan)?;
        Ok(Self {
            source_fps: self.source_fps,
            frame_paths: plan
                .selected_indices
                .iter()
                .map(|&i| self.frame_paths[i].clone())
                .collect(),
            drop_height_m: self.drop_height_m,
            water_line_y_global: self.water_line_y_global,
            g: self.g,
            source_indices: Some(plan.selected_indices.iter().map(|&i| self.source_index(i)).collect()),
        })
    }
}

/// A decoded frame of the sampled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Position in the sampled sequence.
    pub index: usize,
    /// Seconds since the first sampled frame.
    pub timestamp_s: f64,
    pub image: RgbImage,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

fn check_plan(manifest: &FrameManifest, plan: &SamplingPlan) -> Result<(), FrameIoError> {
    if let Some(&bad) = plan.selected_indices.iter().find(|&&i| i >= manifest.frame_paths.len()) {
        return Err(FrameIoError::Config(format!(
            "plan selects frame {bad} but the manifest lists {}",
            manifest.frame_paths.len()
        )));
    }
    if plan.selected_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FrameIoError::Config("plan indices must be strictly increasing".into()));
    }
    if plan.selected_indices.is_empty() {
        return Err(FrameIoError::Config("plan selects no frames".into()));
    }
    Ok(())
}

/// Decodes the frames a plan selects. Decoding runs in parallel; the result is
/// ordered by sampled index.
pub fn load_frames(manifest: &FrameManifest, plan: &SamplingPlan) -> Result<Vec<Frame>, FrameIoError> {
    check_plan(manifest, plan)?;
    let t0 = manifest.source_index(plan.selected_indices[0]) as f64 / manifest.source_fps;
    let frames = plan
        .selected_indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let path = &manifest.frame_paths[i];
            let image = read_frame(path)?;
            Ok(Frame {
                index: k,
                timestamp_s: manifest.source_index(i) as f64 / manifest.source_fps - t0,
                image,
            })
        })
        .collect::<Result<Vec<_>, FrameIoError>>()?;

    let (w, h) = (frames[0].width(), frames[0].height());
    if let Some(bad) = frames.iter().find(|f| f.width() != w || f.height() != h) {
        return Err(FrameIoError::Format {
            path: manifest.frame_paths[plan.selected_indices[bad.index]].clone(),
            message: format!("frame is {}x{} but the sequence is {w}x{h}", bad.width(), bad.height()),
        });
    }
    Ok(frames)
}

fn read_frame(path: &Path) -> Result<RgbImage, FrameIoError> {
    let bytes = fs::read(path).map_err(|source| FrameIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pnm"));
    if !is_ppm && !bytes.starts_with(b"P6") {
        return Err(FrameIoError::Format {
            path: path.to_path_buf(),
            message: "unsupported image format (expected binary PPM)".into(),
        });
    }
    RgbImage::decode_ppm(&bytes).map_err(|e| match e {
        PnmError::Io(source) => FrameIoError::Io {
            path: path.to_path_buf(),
            source,
        },
        PnmError::Format(message) => FrameIoError::Format {
            path: path.to_path_buf(),
            message,
        },
    })
}
