//! Image geometry and PNG interchange.
//!
//! Pixel values live in `[-1, 1]`. Export maps `v` to
//! `round((v + 1) * 127.5)` with halves rounded up; import maps a byte `b`
//! back to `b / 127.5 - 1`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use xmar_tensor::Tensor;

use crate::error::{Result, XmarError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageSpec {
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(XmarError::invalid(format!("image dims must be positive, got {h}x{w}x{c}")));
        }
        Ok(Self { h, w, c })
    }

    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    pub fn to_json(&self) -> Value {
        json!({ "h": self.h, "w": self.w, "c": self.c })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let dim = |key: &str| {
            value[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| XmarError::invalid(format!("image spec lacks {key:?}")))
        };
        Self::new(dim("h")?, dim("w")?, dim("c")?)
    }

    /// Checks that `image` is `[h, w, c]` or `[B, h, w, c]`.
    pub fn check(&self, image: &Tensor<f32>) -> Result<()> {
        let s = image.shape();
        let tail = if s.len() == 4 { &s[1..] } else { s };
        if tail != self.shape() {
            return Err(XmarError::invalid(format!(
                "image shape {s:?} does not match spec {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        Ok(())
    }
}

pub fn to_pixel(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_pixel(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

fn layout(image: &Tensor<f32>) -> Result<(usize, usize, png::ColorType)> {
    let &[h, w, c] = image.shape() else {
        return Err(XmarError::invalid(format!("expected an [h, w, c] image, got {:?}", image.shape())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(XmarError::invalid(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    if !image.all_finite() {
        return Err(XmarError::invalid("image contains non-finite values"));
    }
    Ok((h, w, color))
}

/// Encodes an `[h, w, c]` image as an 8-bit PNG (grayscale for one channel,
/// RGB for three).
pub fn export_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, color) = layout(image)?;
    let pixels: Vec<u8> = image.data().iter().map(|&v| to_pixel(v)).collect();
    encode(&pixels, w, h, color)
}

/// Like [`export_png`], but every pixel is moved to the nearest 8-bit level
/// within `epsilon` of `base`, so the decoded PNG still satisfies the bound.
pub fn export_png_within(image: &Tensor<f32>, base: &Tensor<f32>, epsilon: f64) -> Result<Vec<u8>> {
    let (h, w, color) = layout(image)?;
    if image.shape() != base.shape() {
        return Err(XmarError::invalid(format!("image {:?} and base {:?} differ in shape", image.shape(), base.shape())));
    }
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .zip(base.data())
        .map(|(&v, &c)| {
            let fits = |b: &u8| (from_pixel(*b) as f64 - c as f64).abs() <= epsilon;
            let lo = (0..=255u8).find(fits);
            let hi = (0..=255u8).rev().find(fits);
            match (lo, hi) {
                (Some(lo), Some(hi)) => Ok(to_pixel(v).clamp(lo, hi)),
                _ => Err(XmarError::invalid(format!("no 8-bit level lies within {epsilon} of {c}"))),
            }
        })
        .collect::<Result<_>>()?;
    encode(&pixels, w, h, color)
}

fn encode(pixels: &[u8], w: usize, h: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| XmarError::Png(e.to_string()))?;
        writer.write_image_data(pixels).map_err(|e| XmarError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG into an `[h, w, c]` image in `[-1, 1]`. An alpha
/// channel is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| XmarError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| XmarError::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(XmarError::Png(format!("only 8-bit PNGs are supported, got {:?}", info.bit_depth)));
    }
    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(XmarError::Png(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * keep);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * stored].chunks(stored) {
            data.extend(px[..keep].iter().map(|&b| from_pixel(b)));
        }
    }
    Ok(Tensor::new(vec![h, w, keep], data)?)
}

/// Loads a base image and checks it against `spec`.
pub fn load_base_image(path: &Path, spec: ImageSpec) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| XmarError::io(path, e))?;
    let image = decode_png(&bytes)?;
    spec.check(&image)?;
    Ok(image)
}
