//! Grayscale images, binary masks and PNG export.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Usage(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Usage(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("fill value in [0, 1]")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Splits into non-overlapping `patch x patch` tiles, returning
    /// `[(H/patch)*(W/patch), patch*patch]` in row-major tile order.
    pub fn patchify(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(self.pixels.len());
        for ty in 0..gh {
            for tx in 0..gw {
                for y in 0..patch {
                    let row = (ty * patch + y) * self.width + tx * patch;
                    out.extend_from_slice(&self.pixels[row..row + patch]);
                }
            }
        }
        Ok(out)
    }
}

/// Binary lesion mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Usage(format!("{} mask cells for a {height}x{width} mask", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Usage("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn area(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Lesion pixel count inside each `patch x patch` tile, row-major.
    pub fn patch_counts(&self, patch: usize) -> Vec<usize> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut counts = vec![0; gh * gw];
        for y in 0..gh * patch {
            for x in 0..gw * patch {
                counts[(y / patch) * gw + x / patch] += self.bits[y * self.width + x] as usize;
            }
        }
        counts
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    w.finish()?;
    Ok(())
}

/// Writes `values` (row-major, clamped to `[0, 1]`) as an 8-bit grayscale PNG,
/// repeating each cell `scale x scale` times.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f32], scale: usize) -> Result<()> {
    if values.len() != width * height || scale == 0 {
        return Err(Error::Usage("grayscale PNG size mismatch".into()));
    }
    let (w2, h2) = (width * scale, height * scale);
    let mut data = Vec::with_capacity(w2 * h2);
    for y in 0..h2 {
        for x in 0..w2 {
            data.push(to_u8(values[(y / scale) * width + x / scale]));
        }
    }
    write_png(path, w2, h2, png::ColorType::Grayscale, &data)
}

/// Composites a heatmap in red over a grayscale image; output has the image's
/// dimensions.
pub fn write_overlay_png(path: &Path, image: &ImageTensor, heat: &[f32]) -> Result<()> {
    if heat.len() != image.pixels.len() {
        return Err(Error::Usage("overlay heatmap does not match image size".into()));
    }
    let mut data = Vec::with_capacity(heat.len() * 3);
    for (&p, &h) in image.pixels.iter().zip(heat) {
        let a = 0.6 * h.clamp(0.0, 1.0);
        data.push(to_u8(p * (1.0 - a) + a));
        data.push(to_u8(p * (1.0 - a)));
        data.push(to_u8(p * (1.0 - a)));
    }
    write_png(path, image.width, image.height, png::ColorType::Rgb, &data)
}

/// Raw little-endian f32 dump, used as the sidecar of exported heatmaps.
pub fn write_f32_raw(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes a grid as CSV, one row per line.
pub fn write_grid_csv(path: &Path, width: usize, values: &[f32]) -> Result<()> {
    let mut out = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
