//! Depth, color and direction-mask image files.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::camera::{ColorImage, DepthImage, Image};
use crate::error::{Error, Result};
use crate::voxel::Direction;

/// Raw units per meter of TUM depth PNGs.
pub const TUM_DEPTH_UNITS: f64 = 5000.0;

fn open(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a 16-bit single-channel depth image; raw 0 is invalid.
pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<DepthImage> {
    match open(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|r| r as f64 * depth_scale).collect();
            Image::from_vec(w as usize, h as usize, data)
        }
        other => Err(Error::format(
            path,
            format!("depth must be 16-bit single channel, found {:?}", other.color()),
        )),
    }
}

fn depth_raw(depth: &DepthImage, units_per_meter: f64) -> Vec<u16> {
    depth
        .data()
        .iter()
        .map(|&z| {
            if z > 0.0 {
                (z * units_per_meter).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect()
}

/// Writes depth as a 16-bit PNG (PNG stores samples big-endian).
pub fn write_depth_png(path: &Path, depth: &DepthImage, units_per_meter: f64) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        depth_raw(depth, units_per_meter),
    )
    .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes depth as a 16-bit binary portable graymap.
pub fn write_depth_pgm(path: &Path, depth: &DepthImage, units_per_meter: f64) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    for r in depth_raw(depth, units_per_meter) {
        bytes.extend_from_slice(&r.to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit color image into [0, 1] RGB.
pub fn read_color(path: &Path) -> Result<ColorImage> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .pixels()
        .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
        .collect();
    Image::from_vec(w as usize, h as usize, data)
}

fn to_rgb8(color: &ColorImage) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let raw = color
        .data()
        .iter()
        .flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    ImageBuffer::from_raw(color.width() as u32, color.height() as u32, raw).expect("buffer matches dimensions")
}

/// Writes 8-bit color; the format follows the extension (`.png`, `.ppm`).
pub fn write_color(path: &Path, color: &ColorImage) -> Result<()> {
    to_rgb8(color)
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Display color of each direction, in `Direction::DIRECTED` order.
pub const DIRECTION_PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];

/// Mean palette color of the directions in `mask`; black for none.
pub fn mask_color(mask: u8) -> [f32; 3] {
    let mut sum = [0.0f32; 3];
    let mut n = 0.0;
    for (k, d) in Direction::DIRECTED.iter().enumerate() {
        if mask & d.bit() != 0 {
            for c in 0..3 {
                sum[c] += DIRECTION_PALETTE[k][c];
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        sum
    } else {
        sum.map(|v| v / n)
    }
}

pub fn write_direction_mask(path: &Path, mask: &Image<u8>) -> Result<()> {
    write_color(path, &mask.map(|&m| mask_color(m)))
}
