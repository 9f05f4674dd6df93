//! Minimal ASCII PLY point-cloud writer.

use planereg_core::{Error, Result, Vec3};
use std::path::Path;

/// Display color of an exported point, by semantic class id.
pub fn class_color(id: u8) -> [u8; 3] {
    match id {
        0 => [128, 128, 128],
        1 => [70, 70, 75],
        2 => [250, 250, 250],
        3 => [180, 175, 160],
        4 => [186, 118, 90],
        _ => [255, 0, 255],
    }
}

/// Writes points with per-point uchar colors. The header's vertex count
/// always matches the body line count.
pub fn write_ply(path: &Path, points: &[Vec3], colors: &[[u8; 3]]) -> Result<()> {
    if points.len() != colors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} colors",
            points.len(),
            colors.len()
        )));
    }
    let mut text = String::with_capacity(128 + 48 * points.len());
    text.push_str("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", points.len()));
    text.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
    );
    for (p, c) in points.iter().zip(colors) {
        text.push_str(&format!(
            "{:.6} {:.6} {:.6} {} {} {}\n",
            p.x, p.y, p.z, c[0], c[1], c[2]
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
