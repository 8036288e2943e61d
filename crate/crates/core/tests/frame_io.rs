use std::fs;
use std::path::PathBuf;

use divetrack::frame_io::{load_frames, plan_sampling, FrameIoError, FrameManifest, SamplingPlan};
use divetrack::image::RgbImage;

fn write_clip(dir: &std::path::Path, n: usize, w: usize, h: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|k| {
            let name = PathBuf::from(format!("f{k:03}.ppm"));
            let img = RgbImage::from_fn(w, h, |x, y| [(x + k) as u8, y as u8, k as u8]);
            img.write_ppm(&dir.join(&name)).unwrap();
            name
        })
        .collect()
}

fn write_manifest(dir: &std::path::Path, fps: f64, names: &[PathBuf]) -> PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, FrameManifest::new(fps, names.to_vec()).to_json()).unwrap();
    path
}

#[test]
fn loads_decimated_frames_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let names = write_clip(dir.path(), 10, 8, 6);
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 50.0, &names)).unwrap();
    let plan = plan_sampling(50.0, 25.0, 10).unwrap();
    let frames = load_frames(&manifest, &plan).unwrap();
    assert_eq!(frames.len(), 5);
    for (k, f) in frames.iter().enumerate() {
        assert_eq!(f.index, k);
        assert!((f.timestamp_s - k as f64 * 0.04).abs() < 1e-12);
        assert_eq!(f.image.get(0, 0), [(2 * k) as u8, 0, (2 * k) as u8]);
    }
}

#[test]
fn decimated_manifest_keeps_timing() {
    let dir = tempfile::tempdir().unwrap();
    let names = write_clip(dir.path(), 12, 4, 4);
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 30.0, &names)).unwrap();
    let plan = plan_sampling(30.0, 25.0, 12).unwrap();
    let sampled = manifest.decimated(&plan).unwrap();
    let reloaded = FrameManifest::from_json(&sampled.to_json(), dir.path()).unwrap();
    let all = SamplingPlan::identity(reloaded.source_fps, reloaded.frame_paths.len());
    let frames = load_frames(&reloaded, &all).unwrap();
    let direct = load_frames(&manifest, &plan).unwrap();
    assert_eq!(frames, direct);
}

#[test]
fn missing_frame_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut names = write_clip(dir.path(), 3, 4, 4);
    names.push(PathBuf::from("absent.ppm"));
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 25.0, &names)).unwrap();
    match load_frames(&manifest, &SamplingPlan::identity(25.0, 4)) {
        Err(FrameIoError::Io { path, .. }) => assert!(path.ends_with("absent.ppm")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn size_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut names = write_clip(dir.path(), 3, 4, 4);
    RgbImage::new(5, 4).write_ppm(&dir.path().join("odd.ppm")).unwrap();
    names.push(PathBuf::from("odd.ppm"));
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 25.0, &names)).unwrap();
    match load_frames(&manifest, &SamplingPlan::identity(25.0, 4)) {
        Err(FrameIoError::Format { path, message }) => {
            assert!(path.ends_with("odd.ppm"));
            assert!(message.contains("5x4"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_ppm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.png"), b"\x89PNG\r\n\x1a\n").unwrap();
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 25.0, &[PathBuf::from("a.png")])).unwrap();
    assert!(matches!(
        load_frames(&manifest, &SamplingPlan::identity(25.0, 1)),
        Err(FrameIoError::Format { .. })
    ));
}

#[test]
fn plan_beyond_clip_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let names = write_clip(dir.path(), 2, 4, 4);
    let manifest = FrameManifest::load(&write_manifest(dir.path(), 25.0, &names)).unwrap();
    let plan = SamplingPlan::identity(25.0, 3);
    assert!(matches!(load_frames(&manifest, &plan), Err(FrameIoError::Config(_))));
}
