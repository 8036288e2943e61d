//! Barycentre time series: gap filling, zero-lag smoothing, free-fall
//! calibration and dive metrics.
//!
//! Positions are panorama pixels with image orientation (y grows downward).
//! Heights are reported upward, relative to the first sample (takeoff).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::BarycentreSample;

/// Fitted gravity (px/s²) at or below which the ballistic model is rejected.
const MIN_PHYSICAL_G_PX: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("smoothing window must be odd and at least 1, got {0}")]
    InvalidWindow(usize),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no detection in frames {first_frame}..={last_frame} ({len} frames, limit {max_gap})")]
    GapTooLong {
        first_frame: usize,
        last_frame: usize,
        len: usize,
        max_gap: usize,
    },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("trajectory has not been smoothed")]
    NotSmoothed,
    #[error("malformed trajectory CSV at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One row of the trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub area: usize,
    /// The barycentre was measured in this frame.
    pub valid: bool,
    /// Position filled in from neighbouring measurements.
    pub interpolated: bool,
}

impl From<&BarycentreSample> for TrackPoint {
    fn from(s: &BarycentreSample) -> Self {
        TrackPoint {
            frame: s.frame_index,
            t: s.t,
            x: s.x,
            y: s.y,
            area: s.area,
            valid: s.valid,
            interpolated: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrackPoint>,
    /// Smoothed `(x, y)` aligned with `points`.
    pub smoothed: Option<Vec<(f64, f64)>>,
}

impl Trajectory {
    pub fn from_samples(samples: &[BarycentreSample]) -> Self {
        Self {
            points: samples.iter().map(TrackPoint::from).collect(),
            smoothed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smooths both coordinates with a centred moving average.
    /// The series must be gap-free (see [`interpolate_gaps`]).
    pub fn smooth(&mut self, window: usize) -> Result<(), TrajectoryError> {
        let xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.y).collect();
        let sx = smooth_moving_average(&xs, window)?;
        let sy = smooth_moving_average(&ys, window)?;
        self.smoothed = Some(sx.into_iter().zip(sy).collect());
        Ok(())
    }
}

/// Centred moving average. Near the ends the window shrinks symmetrically to
/// `2 min(i, n - 1 - i) + 1`, so every output is a symmetric mean and the
/// filter introduces no lag.
pub fn smooth_moving_average(values: &[f64], window: usize) -> Result<Vec<f64>, TrajectoryError> {
    if window == 0 || window % 2 == 0 {
        return Err(TrajectoryError::InvalidWindow(window));
    }
    let n = values.len();
    let half = window / 2;
    Ok((0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            let slice = &values[i - r..=i + r];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect())
}

/// Linearly interpolates positions across runs of invalid samples and drops
/// invalid samples before the first and after the last detection.
pub fn interpolate_gaps(points: &[TrackPoint], max_gap: usize) -> Result<Vec<TrackPoint>, TrajectoryError> {
    let valid: Vec<usize> = (0..points.len()).filter(|&i| points[i].valid).collect();
    if valid.len() < 2 {
        return Err(TrajectoryError::InsufficientData {
            needed: 2,
            got: valid.len(),
        });
    }
    let (first, last) = (valid[0], valid[valid.len() - 1]);
    let mut out: Vec<TrackPoint> = points[first..=last].to_vec();
    for w in valid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let gap = b - a - 1;
        if gap == 0 {
            continue;
        }
        if gap > max_gap {
            return Err(TrajectoryError::GapTooLong {
                first_frame: points[a + 1].frame,
                last_frame: points[b - 1].frame,
                len: gap,
                max_gap,
            });
        }
        let (pa, pb) = (points[a], points[b]);
        for i in a + 1..b {
            let f = (points[i].t - pa.t) / (pb.t - pa.t);
            let p = &mut out[i - first];
            p.x = pa.x + f * (pb.x - pa.x);
            p.y = pa.y + f * (pb.y - pa.y);
            p.interpolated = true;
        }
    }
    Ok(out)
}

/// Quadratic ballistic fit `h(t) = y0 + v0 τ - g_px τ² / 2`, `τ = t - t_start`,
/// with `h` measured upward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeFallFit {
    pub y0: f64,
    pub v0: f64,
    pub g_px: f64,
    pub rms_residual: f64,
    /// Time of the highest point (`t_start + v0 / g_px`); NaN when the fit is unphysical.
    pub t_apex: f64,
    pub segment: (f64, f64),
    /// Fitted gravity is not positive: the data does not look like a dive.
    pub model_mismatch: bool,
}

impl FreeFallFit {
    pub fn height_at(&self, t: f64) -> f64 {
        let tau = t - self.segment.0;
        self.y0 + self.v0 * tau - 0.5 * self.g_px * tau * tau
    }
}

/// Least-squares ballistic fit to `(t, height)` samples inside `segment`.
/// Heights are upward, so pass image rows negated.
pub fn fit_free_fall(series: &[(f64, f64)], segment: (f64, f64)) -> Result<FreeFallFit, TrajectoryError> {
    let inside: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= segment.0 && t <= segment.1)
        .collect();
    if inside.len() < 5 {
        return Err(TrajectoryError::InsufficientData {
            needed: 5,
            got: inside.len(),
        });
    }
    let n = inside.len();
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let tau = inside[i].0 - segment.0;
        match j {
            0 => 1.0,
            1 => tau,
            _ => -0.5 * tau * tau,
        }
    });
    let rhs = DVector::from_iterator(n, inside.iter().map(|&(_, h)| h));
    let coeffs = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| TrajectoryError::Calibration(e.to_string()))?;
    let residual = &design * &coeffs - &rhs;
    let rms_residual = (residual.norm_squared() / n as f64).sqrt();
    let (y0, v0, g_px) = (coeffs[0], coeffs[1], coeffs[2]);
    let model_mismatch = !(g_px > MIN_PHYSICAL_G_PX);
    Ok(FreeFallFit {
        y0,
        v0,
        g_px,
        rms_residual,
        t_apex: if model_mismatch {
            f64::NAN
        } else {
            segment.0 + v0 / g_px
        },
        segment,
        model_mismatch,
    })
}

/// Pixels per metre implied by the fitted gravity.
pub fn calibrate_scale(fit: &FreeFallFit, g: f64) -> Result<f64, TrajectoryError> {
    if fit.model_mismatch || !(fit.g_px > 0.0) {
        return Err(TrajectoryError::Calibration(format!(
            "fitted gravity {} px/s² is not physical",
            fit.g_px
        )));
    }
    if !(g > 0.0) {
        return Err(TrajectoryError::Calibration(format!(
            "gravity must be positive, got {g}"
        )));
    }
    Ok(fit.g_px / g)
}

/// Dive metrics derived from the smoothed trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiveMetrics {
    /// Highest smoothed barycentre position above takeoff.
    pub max_height_px: f64,
    pub max_height_m: Option<f64>,
    pub t_apex: f64,
    pub entry_x_px: Option<f64>,
    pub entry_t: Option<f64>,
    /// RMS of smoothed x about its mean between takeoff and entry.
    pub lateral_rms_px: f64,
    pub px_per_m: Option<f64>,
}

/// Computes metrics from a smoothed trajectory.
///
/// Entry is the first post-apex crossing of `water_line_y` (a panorama row),
/// interpolated linearly between samples; without a water line the entry
/// fields are `None` and the lateral statistic spans the whole trajectory.
pub fn compute_metrics(
    traj: &Trajectory,
    px_per_m: Option<f64>,
    water_line_y: Option<f64>,
) -> Result<DiveMetrics, TrajectoryError> {
    let smoothed = traj.smoothed.as_ref().ok_or(TrajectoryError::NotSmoothed)?;
    if smoothed.is_empty() {
        return Err(TrajectoryError::InsufficientData { needed: 1, got: 0 });
    }
    let ts: Vec<f64> = traj.points.iter().map(|p| p.t).collect();
    let takeoff_y = smoothed[0].1;
    // image rows grow downward: the apex is the smallest y
    let apex = (0..smoothed.len()).fold(0, |best, i| if smoothed[i].1 < smoothed[best].1 { i } else { best });
    let max_height_px = takeoff_y - smoothed[apex].1;

    let entry = water_line_y.and_then(|water| {
        (apex + 1..smoothed.len())
            .find(|&j| smoothed[j].1 >= water)
            .filter(|&j| smoothed[j - 1].1 < water)
            .map(|j| {
                let (y0, y1) = (smoothed[j - 1].1, smoothed[j].1);
                let f = (water - y0) / (y1 - y0);
                let t = ts[j - 1] + f * (ts[j] - ts[j - 1]);
                let x = smoothed[j - 1].0 + f * (smoothed[j].0 - smoothed[j - 1].0);
                (t, x)
            })
    });

    let in_flight: Vec<f64> = smoothed
        .iter()
        .zip(&ts)
        .filter(|(_, &t)| entry.is_none_or(|(te, _)| t <= te))
        .map(|(p, _)| p.0)
        .collect();
    let mean_x = in_flight.iter().sum::<f64>() / in_flight.len() as f64;
    let lateral_rms_px = (in_flight.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>() / in_flight.len() as f64).sqrt();

    Ok(DiveMetrics {
        max_height_px,
        max_height_m: px_per_m.map(|s| max_height_px / s),
        t_apex: ts[apex],
        entry_x_px: entry.map(|e| e.1),
        entry_t: entry.map(|e| e.0),
        lateral_rms_px,
        px_per_m,
    })
}

fn push_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v.filter(|v| v.is_finite()) {
        let _ = write!(out, "{v:.6}");
    }
}

pub const CSV_HEADER: &str = "frame,t,x,y,valid,interpolated,area,x_smooth,y_smooth";

/// CSV rendering with fixed 6-decimal fields; unknown values are left empty.
pub fn export_trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, p) in traj.points.iter().enumerate() {
        let _ = write!(out, "{},{:.6},", p.frame, p.t);
        push_opt(&mut out, Some(p.x));
        out.push(',');
        push_opt(&mut out, Some(p.y));
        let _ = write!(out, ",{},{},{},", u8::from(p.valid), u8::from(p.interpolated), p.area);
        let s = traj.smoothed.as_ref().map(|s| s[i]);
        push_opt(&mut out, s.map(|s| s.0));
        out.push(',');
        push_opt(&mut out, s.map(|s| s.1));
        out.push('\n');
    }
    out
}

/// Parses [`export_trajectory_csv`] output.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory, TrajectoryError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(TrajectoryError::Parse {
                line: 1,
                message: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    let mut points = Vec::new();
    let mut smoothed = Vec::new();
    let mut all_smoothed = true;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| TrajectoryError::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(err(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>, TrajectoryError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad number {s:?}")))
            }
        };
        let int =
            |s: &str| -> Result<usize, TrajectoryError> { s.parse().map_err(|_| err(format!("bad integer {s:?}"))) };
        let flag = |s: &str| -> Result<bool, TrajectoryError> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err(format!("bad flag {s:?}"))),
            }
        };
        points.push(TrackPoint {
            frame: int(f[0])?,
            t: num(f[1])?.ok_or_else(|| err("missing t".into()))?,
            x: num(f[2])?.unwrap_or(f64::NAN),
            y: num(f[3])?.unwrap_or(f64::NAN),
            valid: flag(f[4])?,
            interpolated: flag(f[5])?,
            area: int(f[6])?,
        });
        match (num(f[7])?, num(f[8])?) {
            (Some(x), Some(y)) => smoothed.push((x, y)),
            _ => all_smoothed = false,
        }
    }
    Ok(Trajectory {
        smoothed: (all_smoothed && !points.is_empty()).then_some(smoothed),
        points,
    })
}

pub fn export_metrics_json(metrics: &DiveMetrics) -> String {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    s.push('\n');
    s
}
