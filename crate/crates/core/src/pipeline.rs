//! Staged pipeline: sample, mosaic, track, metrics.
//!
//! Stages communicate only through files in the output directory, so running
//! them one at a time produces the same bytes as [`run_pipeline`]. Every
//! artifact is written to a temporary file and renamed into place.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::frame_io::{load_frames, plan_sampling, Frame, FrameIoError, FrameManifest, SamplingPlan, ANALYSIS_RATE_HZ};
use crate::image::{encode_pgm16, BinaryMask, RgbImage};
use crate::mosaic::{build_panorama, coverage_from_geometry, CompositeMode, GlobalBounds, MosaicError};
use crate::registration::{chain_to_reference, AffineTransform, RansacParams, RegistrationError, RegistrationParams};
use crate::segmentation::{
    apply_threshold, locate_barycentre, BarycentreSample, Connectivity, DetectionParams, HsvThresholds, Roi,
    SegmentationError,
};
use crate::synth::{render_sequence, SynthError, SynthSpec};
use crate::trajectory::{
    calibrate_scale, compute_metrics, export_trajectory_csv, fit_free_fall, interpolate_gaps, parse_trajectory_csv,
    DiveMetrics, FreeFallFit, Trajectory, TrajectoryError,
};

pub const SAMPLED_MANIFEST: &str = "sampled_manifest.json";
pub const PANORAMA: &str = "panorama.ppm";
pub const TRANSFORMS: &str = "transforms.json";
pub const RAW_TRACK: &str = "track.csv";
pub const TRAJECTORY: &str = "trajectory.csv";
pub const METRICS: &str = "metrics.json";
pub const OVERLAY: &str = "trajectory_overlay.ppm";
pub const DEBUG_DIR: &str = "debug";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Sample,
    Mosaic,
    Track,
    Metrics,
    Synth,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Sample => "sample",
            Stage::Mosaic => "mosaic",
            Stage::Track => "track",
            Stage::Metrics => "metrics",
            Stage::Synth => "synth",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ErrorKind {
    #[error("{0}")]
    Config(String),
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing upstream artifact {}", path.display())]
    MissingArtifact { path: PathBuf },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Mosaic(#[from] MosaicError),
    #[error("{0}")]
    Tracking(String),
}

/// A stage failure with the frames it concerns.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {kind}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub frames: Vec<usize>,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind) -> Self {
        Self {
            stage,
            kind,
            frames: Vec::new(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(Stage::Config, ErrorKind::Config(message.into()))
    }

    /// Process exit status: 2 configuration, 3 I/O or format, 4 registration,
    /// 5 tracking.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config(_) => 2,
            ErrorKind::Io { .. } | ErrorKind::MissingArtifact { .. } | ErrorKind::Format { .. } => 3,
            ErrorKind::Registration(_) | ErrorKind::Mosaic(_) => 4,
            ErrorKind::Tracking(_) => 5,
        }
    }

    /// Machine-readable error report.
    pub fn report_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config(_) => "config",
            ErrorKind::Io { .. } => "io",
            ErrorKind::MissingArtifact { .. } => "missing_artifact",
            ErrorKind::Format { .. } => "format",
            ErrorKind::Registration(_) => "registration",
            ErrorKind::Mosaic(_) => "mosaic",
            ErrorKind::Tracking(_) => "tracking",
        };
        let path = match &self.kind {
            ErrorKind::Io { path, .. } | ErrorKind::MissingArtifact { path } | ErrorKind::Format { path, .. } => {
                Some(path.display().to_string())
            }
            _ => None,
        };
        serde_json::json!({
            "stage": self.stage,
            "kind": kind,
            "message": self.kind.to_string(),
            "path": path,
            "frames": self.frames,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

fn frame_io_error(stage: Stage, e: FrameIoError) -> PipelineError {
    let kind = match e {
        FrameIoError::Domain(m) | FrameIoError::Config(m) => ErrorKind::Config(m),
        FrameIoError::Io { path, source } => ErrorKind::Io { path, source },
        FrameIoError::Format { path, message } => ErrorKind::Format { path, message },
    };
    PipelineError::new(stage, kind)
}

fn registration_error(e: RegistrationError) -> PipelineError {
    let frames = match &e {
        RegistrationError::PairFailed { from, to, .. } => vec![*to, *from],
        _ => Vec::new(),
    };
    PipelineError {
        stage: Stage::Mosaic,
        kind: ErrorKind::Registration(e),
        frames,
    }
}

fn trajectory_error(e: TrajectoryError) -> PipelineError {
    let frames = match &e {
        TrajectoryError::GapTooLong {
            first_frame,
            last_frame,
            ..
        } => (*first_frame..=*last_frame).collect(),
        _ => Vec::new(),
    };
    let kind = match e {
        TrajectoryError::InvalidWindow(_) => ErrorKind::Config(e.to_string()),
        _ => ErrorKind::Tracking(e.to_string()),
    };
    PipelineError {
        stage: Stage::Metrics,
        kind,
        frames,
    }
}

/// Corner detection and matching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub max_keypoints: usize,
    pub min_distance_px: usize,
    pub patch_size: usize,
    pub ratio: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        let r = RegistrationParams::default();
        Self {
            max_keypoints: r.max_keypoints,
            min_distance_px: r.min_distance_px,
            patch_size: r.patch_size,
            ratio: r.ratio,
        }
    }
}

/// Every tunable of a run. Loaded from JSON; missing keys take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub target_fps: f64,
    pub hsv: HsvThresholds,
    pub min_area: usize,
    pub roi: Option<Roi>,
    pub ransac: RansacParams,
    pub composite_mode: CompositeMode,
    pub smoothing_window: usize,
    pub max_gap: usize,
    pub output_dir: PathBuf,
    pub tolerate_registration_failures: bool,
    pub debug: bool,
    /// Worker threads; `None` uses every core. Never changes the output.
    pub threads: Option<usize>,
    pub features: FeatureParams,
    pub dilation_px: usize,
    pub connectivity: Connectivity,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            target_fps: ANALYSIS_RATE_HZ,
            hsv: HsvThresholds::default(),
            min_area: 50,
            roi: None,
            ransac: RansacParams::default(),
            composite_mode: CompositeMode::Median,
            smoothing_window: 5,
            max_gap: 5,
            output_dir: PathBuf::from("out"),
            tolerate_registration_failures: false,
            debug: false,
            threads: None,
            features: FeatureParams::default(),
            dilation_px: 1,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Sets `value` at a dotted key path such as `ransac.seed`, creating
/// intermediate objects. The value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| PipelineError::config(format!("override {key:?} descends into a non-object")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| PipelineError::config(format!("override {key:?} descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses a config, applies `key=value` overrides, resolves relative paths
    /// against `base_dir` and validates the result.
    pub fn from_json(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, PipelineError> {
        let mut root: Value =
            serde_json::from_str(text).map_err(|e| PipelineError::config(format!("invalid config JSON: {e}")))?;
        if !root.is_object() {
            return Err(PipelineError::config("config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(root).map_err(|e| PipelineError::config(format!("invalid config: {e}")))?;
        if cfg.manifest.is_relative() && !cfg.manifest.as_os_str().is_empty() {
            cfg.manifest = base_dir.join(&cfg.manifest);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| {
            PipelineError::new(
                Stage::Config,
                ErrorKind::Io {
                    path: path.to_path_buf(),
                    source,
                },
            )
        })?;
        Self::from_json(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::config(m));
        if self.manifest.as_os_str().is_empty() {
            return fail("manifest path is required".into());
        }
        if !(self.target_fps > 0.0) || !self.target_fps.is_finite() {
            return fail(format!("target_fps must be positive, got {}", self.target_fps));
        }
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return fail(format!("smoothing_window must be odd, got {}", self.smoothing_window));
        }
        if self.min_area == 0 {
            return fail("min_area must be at least 1".into());
        }
        if self.threads == Some(0) {
            return fail("threads must be at least 1".into());
        }
        if self.ransac.iterations == 0 || !(self.ransac.inlier_tol_px > 0.0) {
            return fail("ransac needs at least one iteration and a positive inlier tolerance".into());
        }
        let f = &self.features;
        if f.patch_size < 3 || f.patch_size % 2 == 0 {
            return fail(format!(
                "features.patch_size must be odd and at least 3, got {}",
                f.patch_size
            ));
        }
        if !(f.ratio > 0.0 && f.ratio <= 1.0) {
            return fail(format!("features.ratio must be in (0, 1], got {}", f.ratio));
        }
        if f.max_keypoints < 3 {
            return fail("features.max_keypoints must be at least 3".into());
        }
        if let Some(r) = &self.roi {
            if !(r.min_x <= r.max_x && r.min_y <= r.max_y) {
                return fail("roi must be [min_x, min_y, max_x, max_y]".into());
            }
        }
        Ok(())
    }

    pub fn registration_params(&self) -> RegistrationParams {
        RegistrationParams {
            max_keypoints: self.features.max_keypoints,
            min_distance_px: self.features.min_distance_px,
            patch_size: self.features.patch_size,
            ratio: self.features.ratio,
            ransac: self.ransac,
            tolerate_failures: self.tolerate_registration_failures,
        }
    }

    pub fn detection_params(&self) -> DetectionParams {
        DetectionParams {
            thresholds: self.hsv,
            min_area: self.min_area,
            roi: self.roi,
            dilation_px: self.dilation_px,
            connectivity: self.connectivity,
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Path of an upstream artifact, or an error naming it.
    fn require(&self, stage: Stage, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.artifact(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::new(stage, ErrorKind::MissingArtifact { path }))
        }
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T, PipelineError> + Send) -> Result<T, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.unwrap_or(0))
            .build()
            .map_err(|e| PipelineError::config(format!("cannot start worker pool: {e}")))?;
        pool.install(f)
    }
}

fn io_error(stage: Stage, path: &Path, source: io::Error) -> PipelineError {
    PipelineError::new(
        stage,
        ErrorKind::Io {
            path: path.to_path_buf(),
            source,
        },
    )
}

/// Writes through a sibling temporary file so readers never see a partial artifact.
pub fn write_atomic(stage: Stage, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(stage, dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| io_error(stage, &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_error(stage, path, e)
    })
}

fn read_text(stage: Stage, path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| io_error(stage, path, e))
}

fn read_image(stage: Stage, path: &Path) -> Result<RgbImage, PipelineError> {
    RgbImage::read_ppm(path).map_err(|e| {
        PipelineError::new(
            stage,
            ErrorKind::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            },
        )
    })
}

fn format_error(stage: Stage, path: &Path, message: String) -> PipelineError {
    PipelineError::new(
        stage,
        ErrorKind::Format {
            path: path.to_path_buf(),
            message,
        },
    )
}

/// One matrix per line.
pub fn transforms_to_json(transforms: &[AffineTransform]) -> String {
    let rows: Vec<String> = transforms
        .iter()
        .map(|t| format!("  {}", serde_json::to_string(t).expect("transform serializes")))
        .collect();
    format!("[\n{}\n]\n", rows.join(",\n"))
}

fn load_sampled(cfg: &PipelineConfig, stage: Stage) -> Result<(FrameManifest, Vec<Frame>), PipelineError> {
    let path = cfg.require(stage, SAMPLED_MANIFEST)?;
    let manifest = FrameManifest::load(&path).map_err(|e| frame_io_error(stage, e))?;
    let plan = SamplingPlan::identity(manifest.source_fps, manifest.frame_paths.len());
    let frames = load_frames(&manifest, &plan).map_err(|e| frame_io_error(stage, e))?;
    Ok((manifest, frames))
}

fn load_transforms(cfg: &PipelineConfig, stage: Stage, n_frames: usize) -> Result<Vec<AffineTransform>, PipelineError> {
    let path = cfg.require(stage, TRANSFORMS)?;
    let transforms: Vec<AffineTransform> = serde_json::from_str(&read_text(stage, &path)?)
        .map_err(|e| format_error(stage, &path, format!("invalid transforms: {e}")))?;
    if transforms.len() != n_frames {
        return Err(format_error(
            stage,
            &path,
            format!("{} transforms for {n_frames} frames", transforms.len()),
        ));
    }
    Ok(transforms)
}

fn sample_stage(cfg: &PipelineConfig) -> Result<FrameManifest, PipelineError> {
    let stage = Stage::Sample;
    let manifest = FrameManifest::load(&cfg.manifest).map_err(|e| frame_io_error(stage, e))?;
    let plan = plan_sampling(manifest.source_fps, cfg.target_fps, manifest.frame_paths.len())
        .map_err(|e| frame_io_error(stage, e))?;
    let mut sampled = manifest.decimated(&plan).map_err(|e| frame_io_error(stage, e))?;
    for p in &mut sampled.frame_paths {
        *p = std::path::absolute(&*p).map_err(|e| io_error(stage, p, e))?;
    }
    write_atomic(stage, &cfg.artifact(SAMPLED_MANIFEST), sampled.to_json().as_bytes())?;
    Ok(sampled)
}

fn mosaic_stage(cfg: &PipelineConfig) -> Result<Vec<AffineTransform>, PipelineError> {
    let stage = Stage::Mosaic;
    let (_, frames) = load_sampled(cfg, stage)?;
    let global = chain_to_reference(&frames, &cfg.registration_params()).map_err(registration_error)?;
    let panorama = build_panorama(&frames, &global, cfg.composite_mode)
        .map_err(|e| PipelineError::new(stage, ErrorKind::Mosaic(e)))?;
    write_atomic(stage, &cfg.artifact(PANORAMA), &panorama.image.encode_ppm())?;
    write_atomic(
        stage,
        &cfg.artifact(TRANSFORMS),
        transforms_to_json(&panorama.transforms).as_bytes(),
    )?;
    if cfg.debug {
        let pgm = encode_pgm16(panorama.width(), panorama.height(), &panorama.coverage);
        write_atomic(stage, &cfg.artifact(DEBUG_DIR).join("coverage.pgm"), &pgm)?;
    }
    Ok(panorama.transforms)
}

/// Red square outline centred on `(x, y)`.
fn draw_marker(img: &mut RgbImage, x: f64, y: f64, half: i64, colour: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -half..=half {
        for (px, py) in [
            (cx + d, cy - half),
            (cx + d, cy + half),
            (cx - half, cy + d),
            (cx + half, cy + d),
        ] {
            put_checked(img, px, py, colour);
        }
    }
}

fn put_checked(img: &mut RgbImage, x: i64, y: i64, colour: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
        img.put(x as usize, y as usize, colour);
    }
}

fn track_stage(cfg: &PipelineConfig) -> Result<Vec<BarycentreSample>, PipelineError> {
    let stage = Stage::Track;
    let (_, frames) = load_sampled(cfg, stage)?;
    let transforms = load_transforms(cfg, stage, frames.len())?;
    let panorama = read_image(stage, &cfg.require(stage, PANORAMA)?)?;
    let bounds = GlobalBounds {
        min_x: 0,
        min_y: 0,
        max_x: panorama.width() as i64,
        max_y: panorama.height() as i64,
    };
    let size = (frames[0].width(), frames[0].height());
    let coverage = coverage_from_geometry(size, &transforms, &bounds)
        .map_err(|e| PipelineError::new(stage, ErrorKind::Mosaic(e)))?;
    let uncovered = BinaryMask::from_fn(bounds.width(), bounds.height(), |x, y| {
        coverage[y * bounds.width() + x] == 0
    });
    let params = cfg.detection_params();
    let filtered_panorama = apply_threshold(&panorama, &params.thresholds, Some(&uncovered));

    let detections = frames
        .par_iter()
        .zip(transforms.par_iter())
        .map(|(frame, t)| {
            let d = locate_barycentre(frame, t, &bounds, &uncovered, &filtered_panorama, &params).map_err(
                |e: SegmentationError| PipelineError {
                    stage,
                    kind: ErrorKind::Tracking(e.to_string()),
                    frames: vec![frame.index],
                },
            )?;
            Ok((d.sample, cfg.debug.then_some(d.foreground)))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let samples: Vec<BarycentreSample> = detections.iter().map(|d| d.0).collect();
    let csv = export_trajectory_csv(&Trajectory::from_samples(&samples));
    write_atomic(stage, &cfg.artifact(RAW_TRACK), csv.as_bytes())?;

    if cfg.debug {
        let dir = cfg.artifact(DEBUG_DIR);
        for ((frame, t), (sample, mask)) in frames.iter().zip(&transforms).zip(&detections) {
            let k = frame.index;
            if let Some(mask) = mask {
                write_atomic(stage, &dir.join(format!("mask_{k:04}.pgm")), &mask.encode_pgm())?;
            }
            let mut annotated = frame.image.clone();
            if sample.valid {
                let to_frame = t.invert().map_err(registration_error)?;
                let (x, y) = to_frame.apply(sample.x, sample.y);
                draw_marker(&mut annotated, x, y, 4, [255, 0, 0]);
            }
            write_atomic(stage, &dir.join(format!("frame_{k:04}.ppm")), &annotated.encode_ppm())?;
        }
    }
    Ok(samples)
}

/// Contents of `metrics.json`: dive metrics plus the ballistic fit behind
/// the metric scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: DiveMetrics,
    /// Water line in panorama rows, if the manifest declares one.
    pub water_line_y_px: Option<f64>,
    pub n_frames: usize,
    pub n_valid: usize,
    pub n_interpolated: usize,
    /// Fit of upward height (negated panorama row) against time.
    pub free_fall: Option<FreeFallFit>,
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), colour: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        put_checked(img, x.round() as i64, y.round() as i64, colour);
    }
}

/// Panorama with raw detections in blue and the smoothed path in red.
pub fn render_overlay(panorama: &RgbImage, traj: &Trajectory) -> RgbImage {
    let mut img = panorama.clone();
    for p in traj.points.iter().filter(|p| p.valid) {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                put_checked(&mut img, cx + dx, cy + dy, [0, 0, 255]);
            }
        }
    }
    if let Some(s) = &traj.smoothed {
        for w in s.windows(2) {
            draw_line(&mut img, w[0], w[1], [255, 0, 0]);
        }
    }
    img
}

fn metrics_stage(cfg: &PipelineConfig) -> Result<MetricsReport, PipelineError> {
    let stage = Stage::Metrics;
    let manifest_path = cfg.require(stage, SAMPLED_MANIFEST)?;
    let track_path = cfg.require(stage, RAW_TRACK)?;
    let panorama_path = cfg.require(stage, PANORAMA)?;
    let manifest = FrameManifest::load(&manifest_path).map_err(|e| frame_io_error(stage, e))?;
    let raw = parse_trajectory_csv(&read_text(stage, &track_path)?)
        .map_err(|e| format_error(stage, &track_path, e.to_string()))?;
    let transforms = load_transforms(cfg, stage, raw.len())?;
    let panorama = read_image(stage, &panorama_path)?;

    let points = interpolate_gaps(&raw.points, cfg.max_gap).map_err(trajectory_error)?;
    let mut traj = Trajectory { points, smoothed: None };
    traj.smooth(cfg.smoothing_window).map_err(trajectory_error)?;

    // the water line is declared in frame-0 rows; frame 0 maps to the panorama by a pure offset
    let water = manifest.water_line_y_global.map(|y| transforms[0].apply(0.0, y).1);
    let uncalibrated = compute_metrics(&traj, None, water).map_err(trajectory_error)?;
    let measured: Vec<(f64, f64)> = traj
        .points
        .iter()
        .filter(|p| p.valid && !p.interpolated)
        .map(|p| (p.t, -p.y))
        .collect();
    let t_end = uncalibrated
        .entry_t
        .unwrap_or_else(|| traj.points.last().map_or(0.0, |p| p.t));
    let fit = fit_free_fall(&measured, (traj.points[0].t, t_end)).ok();
    let px_per_m = fit.as_ref().and_then(|f| calibrate_scale(f, manifest.g).ok());
    let metrics = compute_metrics(&traj, px_per_m, water).map_err(trajectory_error)?;

    let report = MetricsReport {
        metrics,
        water_line_y_px: water,
        n_frames: raw.len(),
        n_valid: raw.points.iter().filter(|p| p.valid).count(),
        n_interpolated: traj.points.iter().filter(|p| p.interpolated).count(),
        free_fall: fit,
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_atomic(
        stage,
        &cfg.artifact(TRAJECTORY),
        export_trajectory_csv(&traj).as_bytes(),
    )?;
    write_atomic(stage, &cfg.artifact(METRICS), json.as_bytes())?;
    write_atomic(
        stage,
        &cfg.artifact(OVERLAY),
        &render_overlay(&panorama, &traj).encode_ppm(),
    )?;
    Ok(report)
}

/// Decimates the input clip and writes `sampled_manifest.json`.
pub fn run_sample(cfg: &PipelineConfig) -> Result<FrameManifest, PipelineError> {
    cfg.in_pool(|| sample_stage(cfg))
}

/// Registers the sampled frames and writes `panorama.ppm` and `transforms.json`
/// (frame-to-panorama-pixel maps).
pub fn run_mosaic(cfg: &PipelineConfig) -> Result<Vec<AffineTransform>, PipelineError> {
    cfg.in_pool(|| mosaic_stage(cfg))
}

/// Locates the barycentre in every sampled frame and writes the raw `track.csv`.
pub fn run_track(cfg: &PipelineConfig) -> Result<Vec<BarycentreSample>, PipelineError> {
    cfg.in_pool(|| track_stage(cfg))
}

/// Fills gaps, smooths and writes `trajectory.csv`, `metrics.json` and
/// `trajectory_overlay.ppm`.
pub fn run_metrics(cfg: &PipelineConfig) -> Result<MetricsReport, PipelineError> {
    cfg.in_pool(|| metrics_stage(cfg))
}

/// All four stages in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<MetricsReport, PipelineError> {
    cfg.validate()?;
    cfg.in_pool(|| {
        sample_stage(cfg)?;
        mosaic_stage(cfg)?;
        track_stage(cfg)?;
        metrics_stage(cfg)
    })
}

/// Renders a synthetic clip into `out_dir`: `frames/frame_NNNN.ppm`,
/// `manifest.json`, `config.json` (ready for `run`), `ground_truth.json`,
/// `background.ppm` and the `synth_spec.json` that reproduces it.
pub fn write_synthetic_clip(spec: &SynthSpec, out_dir: &Path) -> Result<(), PipelineError> {
    let stage = Stage::Synth;
    let (frames, truth) = render_sequence(spec).map_err(|e| match e {
        SynthError::Spec(_) | SynthError::BlobOutsideWorld { .. } => {
            PipelineError::new(stage, ErrorKind::Config(e.to_string()))
        }
    })?;
    let names: Vec<PathBuf> = (0..frames.len())
        .map(|k| PathBuf::from("frames").join(format!("frame_{k:04}.ppm")))
        .collect();
    frames
        .par_iter()
        .zip(&names)
        .try_for_each(|(f, name)| write_atomic(stage, &out_dir.join(name), &f.image.encode_ppm()))?;

    let mut manifest = FrameManifest::new(spec.fps, names);
    manifest.water_line_y_global = spec.water_line_in_reference();
    write_atomic(stage, &out_dir.join("manifest.json"), manifest.to_json().as_bytes())?;

    let mut cfg = serde_json::json!({
        "manifest": "manifest.json",
        "target_fps": spec.fps,
        "output_dir": "out",
    });
    if let Some(b) = &spec.blob {
        cfg["hsv"] = serde_json::to_value(b.thresholds()).expect("thresholds serialize");
    }
    let mut cfg_text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    cfg_text.push('\n');
    write_atomic(stage, &out_dir.join("config.json"), cfg_text.as_bytes())?;

    let mut truth_text = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    truth_text.push('\n');
    write_atomic(stage, &out_dir.join("ground_truth.json"), truth_text.as_bytes())?;
    write_atomic(stage, &out_dir.join("background.ppm"), &truth.background.encode_ppm())?;
    let mut spec_text = serde_json::to_string_pretty(spec).expect("spec serializes");
    spec_text.push('\n');
    write_atomic(stage, &out_dir.join("synth_spec.json"), spec_text.as_bytes())
}
