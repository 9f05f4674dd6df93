//! In-memory image buffers and their on-disk forms: 8-bit RGB PNG for color,
//! 8-bit single-channel PNG for class labels, raw little-endian f32 for depth
//! (with a 16-bit millimeter PNG as a preview form).

use crate::error::{Error, Result};
use crate::math::Vec3;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Row-major float RGB image, values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageRgbF {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Vec3>,
}

impl ImageRgbF {
    pub fn new(width: u32, height: u32) -> ImageRgbF {
        ImageRgbF {
            width,
            height,
            pixels: vec![Vec3::ZERO; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Vec3 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: Vec3) {
        self.pixels[(y * self.width + x) as usize] = v;
    }
}

/// Row-major scalar image (depth in meters, or any per-pixel float).
#[derive(Debug, Clone)]
pub struct ImageGrayF {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f64>,
}

impl ImageGrayF {
    pub fn new(width: u32, height: u32) -> ImageGrayF {
        ImageGrayF {
            width,
            height,
            pixels: vec![0.0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: f64) {
        self.pixels[(y * self.width + x) as usize] = v;
    }
}

/// Row-major byte image (semantic class ids).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageU8 {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: u32, height: u32) -> ImageU8 {
        ImageU8 {
            width,
            height,
            pixels: vec![0; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[(y * self.width + x) as usize] = v;
    }
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, img: &ImageRgbF) -> Result<()> {
    let mut out = RgbImage::new(img.width, img.height);
    for (i, px) in img.pixels.iter().enumerate() {
        let x = i as u32 % img.width;
        let y = i as u32 / img.width;
        out.put_pixel(x, y, Rgb([quantize8(px.x), quantize8(px.y), quantize8(px.z)]));
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<ImageRgbF> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .into_rgb8();
    let (width, height) = img.dimensions();
    let pixels = img
        .pixels()
        .map(|p| Vec3::new(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
        .collect();
    Ok(ImageRgbF {
        width,
        height,
        pixels,
    })
}

/// Class ids are stored verbatim in the gray channel, no scaling.
pub fn save_class_png(path: &Path, img: &ImageU8) -> Result<()> {
    let out: GrayImage =
        ImageBuffer::from_raw(img.width, img.height, img.pixels.clone()).expect("sized buffer");
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn load_class_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .into_luma8();
    let (width, height) = img.dimensions();
    Ok(ImageU8 {
        width,
        height,
        pixels: img.into_raw(),
    })
}

/// Depth preview: 16-bit gray PNG holding round(meters * 1000), saturating.
pub fn save_depth_png16(path: &Path, img: &ImageGrayF) -> Result<()> {
    let mut out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(img.width, img.height);
    for (i, &d) in img.pixels.iter().enumerate() {
        let x = i as u32 % img.width;
        let y = i as u32 / img.width;
        let mm = (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
        out.put_pixel(x, y, Luma([mm]));
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Depth as raw little-endian f32, row-major, meters. The authoritative form.
pub fn save_depth_bin(path: &Path, img: &ImageGrayF) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &d in &img.pixels {
        w.write_all(&(d as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a depth buffer written by `save_depth_bin`. The pixel count must
/// match `width * height` exactly.
pub fn load_depth_bin(path: &Path, width: u32, height: u32) -> Result<ImageGrayF> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expect = (width * height) as usize * 4;
    if bytes.len() != expect {
        return Err(Error::InvalidData {
            path: path.into(),
            reason: format!("depth buffer is {} bytes, expected {expect}", bytes.len()),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ImageGrayF {
        width,
        height,
        pixels,
    })
}
