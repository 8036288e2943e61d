//! Frame-to-frame registration.
//!
//! Every frame is reduced to Harris corners with normalized patch
//! descriptors. Consecutive frames are matched, an affine map from frame `k`
//! to frame `k - 1` is fitted with RANSAC, and the pairwise maps are
//! left-composed into transforms that take every frame into the coordinates
//! of frame 0.

mod affine;
mod features;
mod ransac;

pub use affine::{estimate_affine_lsq, AffineTransform, PointPair};
pub use features::{
    detect_keypoints, extract_descriptor, harris_response, match_descriptors, patch_fits, to_grayscale, Descriptor,
    Keypoint, Match, HARRIS_K,
};
pub use ransac::{estimate_affine_ransac, RansacParams};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::Frame;

#[derive(Debug, Error)]
pub enum RegistrationError {
    /// Too few or geometrically degenerate points, or a singular transform.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no affine model with at least 3 inliers (best had {inliers})")]
    NoConsensus { inliers: usize },
    #[error("descriptor patch around ({x:.1}, {y:.1}) leaves the image")]
    PatchOutOfBounds { x: f64, y: f64 },
    #[error("registration of frame {from} onto frame {to} failed: {source}")]
    PairFailed {
        from: usize,
        to: usize,
        #[source]
        source: Box<RegistrationError>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    pub max_keypoints: usize,
    pub min_distance_px: usize,
    pub patch_size: usize,
    pub ratio: f64,
    pub ransac: RansacParams,
    /// Substitute identity for a pair that cannot be registered instead of failing.
    pub tolerate_failures: bool,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_keypoints: 500,
            min_distance_px: 4,
            patch_size: 9,
            ratio: 0.8,
            ransac: RansacParams::default(),
            tolerate_failures: false,
        }
    }
}

/// Keypoints of one frame with their descriptors; keypoints whose patch
/// would leave the image are dropped.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl FrameFeatures {
    pub fn extract(frame: &Frame, params: &RegistrationParams) -> Self {
        let gray = to_grayscale(&frame.image);
        let mut keypoints = detect_keypoints(&gray, params.max_keypoints, params.min_distance_px);
        keypoints.retain(|kp| patch_fits(&gray, kp, params.patch_size));
        let descriptors = keypoints
            .iter()
            .map(|kp| extract_descriptor(&gray, kp, params.patch_size).expect("patch checked above"))
            .collect();
        Self { keypoints, descriptors }
    }
}

/// Result of registering one frame onto its predecessor.
#[derive(Clone, Debug)]
pub struct PairRegistration {
    /// Maps the current frame into the previous frame's coordinates.
    pub transform: AffineTransform,
    pub matches: usize,
    pub inliers: usize,
}

/// Estimates the affine map taking `current` coordinates into `previous` ones.
pub fn register_pair(
    current: &FrameFeatures,
    previous: &FrameFeatures,
    params: &RegistrationParams,
    seed: u64,
) -> Result<PairRegistration, RegistrationError> {
    let matches = match_descriptors(&current.descriptors, &previous.descriptors, params.ratio);
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|m| {
            let s = current.keypoints[m.index_a];
            let d = previous.keypoints[m.index_b];
            PointPair::new((s.x, s.y), (d.x, d.y))
        })
        .collect();
    if pairs.len() < 3 {
        return Err(RegistrationError::NoConsensus { inliers: pairs.len() });
    }
    let ransac = RansacParams { seed, ..params.ransac };
    let (transform, flags) = estimate_affine_ransac(&pairs, &ransac)?;
    if !transform.is_invertible() {
        return Err(RegistrationError::Degenerate("fitted transform is singular".into()));
    }
    Ok(PairRegistration {
        transform,
        matches: pairs.len(),
        inliers: flags.iter().filter(|&&f| f).count(),
    })
}

/// Transforms taking each frame into frame-0 coordinates (`T_0` is identity,
/// `T_k = T_{k-1} ∘ P_k`).
///
/// Feature extraction and pair estimation run in parallel; the prefix
/// composition is sequential, so the output does not depend on the thread count.
pub fn chain_to_reference(
    frames: &[Frame],
    params: &RegistrationParams,
) -> Result<Vec<AffineTransform>, RegistrationError> {
    if frames.is_empty() {
        return Err(RegistrationError::Degenerate("no frames to register".into()));
    }
    let features: Vec<FrameFeatures> = frames.par_iter().map(|f| FrameFeatures::extract(f, params)).collect();
    let pairwise: Vec<Result<PairRegistration, RegistrationError>> = (1..frames.len())
        .into_par_iter()
        .map(|k| {
            let seed = params.ransac.seed.wrapping_add(k as u64);
            register_pair(&features[k], &features[k - 1], params, seed)
        })
        .collect();

    let mut transforms = Vec::with_capacity(frames.len());
    transforms.push(AffineTransform::IDENTITY);
    for (k, result) in (1..frames.len()).zip(pairwise) {
        let step = match result {
            Ok(p) => p.transform,
            Err(_) if params.tolerate_failures => AffineTransform::IDENTITY,
            Err(e) => {
                return Err(RegistrationError::PairFailed {
                    from: frames[k].index,
                    to: frames[k - 1].index,
                    source: Box::new(e),
                })
            }
        };
        let prev = transforms[k - 1];
        transforms.push(AffineTransform::compose(&prev, &step));
    }
    Ok(transforms)
}
