//! Image pixel-grid operations and lossless PNG round-trips.
//!
//! Images are `[3, side, side]` tensors with values in [0,1]. Storage is
//! 8-bit RGB non-interlaced PNG; `png_read(png_write(x)) == quantize8(x)`
//! bitwise, because both sides land on the same 1/255 grid.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != CHANNELS {
        return Err(Error::ShapeMismatch {
            context: "image must be [3, H, W]",
            left: s.to_vec(),
            right: vec![CHANNELS, 0, 0],
        });
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument(
            "image pixels must lie in [0,1]".into(),
        ));
    }
    Ok((s[1], s[2]))
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

/// Round-half-up onto the 1/255 grid: v -> floor(v*255 + 0.5)/255.
pub fn quantize8(image: &Tensor) -> Result<Tensor> {
    check_image(image)?;
    image.map(|v| f64::from(to_byte(v)) / 255.0)
}

/// Centered side x side window; odd margins drop the extra row/column from
/// the bottom/right.
pub fn center_crop(image: &Tensor, side: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "center_crop expects [C, H, W]",
            left: s.to_vec(),
            right: vec![CHANNELS, side, side],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if side > h || side > w {
        return Err(Error::InvalidArgument(format!(
            "crop side {side} exceeds image {h}x{w}"
        )));
    }
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    let src = image.data();
    let mut out = Vec::with_capacity(c * side * side);
    for ci in 0..c {
        for y in 0..side {
            let row = (ci * h + top + y) * w + left;
            out.extend_from_slice(&src[row..row + side]);
        }
    }
    Tensor::new(vec![c, side, side], out)
}

/// Encode as 8-bit RGB non-interlaced PNG. Quantizes first.
pub fn png_write(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_image(image)?;
    let data = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(plane * CHANNELS);
    for i in 0..plane {
        bytes.push(to_byte(data[i]));
        bytes.push(to_byte(data[plane + i]));
        bytes.push(to_byte(data[2 * plane + i]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
    }
    Ok(out)
}

/// Decode an 8-bit RGB PNG back onto the 1/255 grid.
pub fn png_read(bytes: &[u8]) -> Result<Tensor> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let buf_size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("output buffer size overflow".into()))?;
    let mut buf = vec![0u8; buf_size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit RGB, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let pixels = &buf[..info.buffer_size()];
    let mut data = vec![0.0; CHANNELS * plane];
    for i in 0..plane {
        data[i] = f64::from(pixels[3 * i]) / 255.0;
        data[plane + i] = f64::from(pixels[3 * i + 1]) / 255.0;
        data[2 * plane + i] = f64::from(pixels[3 * i + 2]) / 255.0;
    }
    Tensor::new(vec![CHANNELS, h, w], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    png_read(&bytes)
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, png_write(image)?)?;
    Ok(())
}
