//! Heatmap and overlay images for `predict --export-heatmaps`.

use std::fmt::Write as _;
use std::path::Path;

use datr_core::model::{HeatmapStack, LandmarkSet};
use datr_core::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::CliError;

/// Writes one channel min-max scaled to 8 bits; returns `(min, max)`.
pub fn write_channel(path: &Path, stack: &HeatmapStack, channel: usize) -> Result<(f64, f64), CliError> {
    let g = stack.geometry();
    let n = stack.channels();
    let values: Vec<f64> = stack.data.data().iter().skip(channel).step_by(n).copied().collect();
    let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let img = GrayImage::from_fn(g.width as u32, g.height as u32, |x, y| {
        let v = values[y as usize * g.width + x as usize];
        let p = if range > 0.0 { (v - lo) / range * 255.0 } else { 0.0 };
        Luma([p.round() as u8])
    });
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((lo, hi))
}

/// Writes every channel of the three heatmaps and a sidecar recording the
/// scale of each file: `value = min + pixel / 255 * (max - min)`.
pub fn write_heatmaps(dir: &Path, stem: &str, maps: &[HeatmapStack; 3]) -> Result<(), CliError> {
    let mut sidecar = String::from("# file min max\n");
    for (label, stack) in ["fused", "fine", "guidance"].iter().zip(maps) {
        for c in 0..stack.channels() {
            let file = format!("{stem}_{label}_{c}.png");
            let (lo, hi) = write_channel(&dir.join(&file), stack, c)?;
            let _ = writeln!(sidecar, "{file} {lo:e} {hi:e}");
        }
    }
    let path = dir.join(format!("{stem}_heatmaps.txt"));
    std::fs::write(&path, sidecar).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// The input image in gray with a red cross on every landmark.
pub fn write_overlay(path: &Path, image: &Tensor<f32>, landmarks: &LandmarkSet) -> Result<(), CliError> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (image.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let arm = (h.min(w) / 64).max(2) as i64;
    for &(r, c) in landmarks.coords() {
        let (r, c) = (r.round() as i64, c.round() as i64);
        for d in -arm..=arm {
            for (y, x) in [(r + d, c), (r, c + d)] {
                if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                    img.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
                }
            }
        }
    }
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
