//! 8-bit PNG images. Values are clamped to [0, 1] and rounded to the
//! nearest of 256 levels; reading maps byte `b` back to `b / 255`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use softmesh_tensor::Array;

use crate::error::{invalid, Error, Result};

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| format_err(path, e))?;
    w.write_image_data(bytes).map_err(|e| format_err(path, e))?;
    w.finish().map_err(|e| format_err(path, e))
}

/// Writes an `[H, W, 3]` image.
pub fn write_rgb(path: &Path, image: &Array) -> Result<()> {
    match image.shape() {
        &[h, w, 3] => write(path, w, h, png::ColorType::Rgb, &image.data().iter().map(|&v| quantize(v)).collect::<Vec<_>>()),
        s => Err(invalid(format!("expected an [H, W, 3] image, got {s:?}"))),
    }
}

/// Writes an `[H, W]` single-channel image such as a mask.
pub fn write_gray(path: &Path, image: &Array) -> Result<()> {
    match image.shape() {
        &[h, w] => write(path, w, h, png::ColorType::Grayscale, &image.data().iter().map(|&v| quantize(v)).collect::<Vec<_>>()),
        s => Err(invalid(format!("expected an [H, W] image, got {s:?}"))),
    }
}

/// Decodes to 8-bit samples; returns (width, height, channels, bytes).
fn read(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| format_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Reads any 8-bit or 16-bit PNG as an `[H, W, 3]` image. Gray is
/// replicated and alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Array> {
    let (w, h, c, buf) = read(path)?;
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf.chunks_exact(c) {
        let rgb = if c >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
        data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Array::new([h, w, 3], data)?)
}

/// Reads a PNG as `[H, W]`, taking the first channel.
pub fn read_gray(path: &Path) -> Result<Array> {
    let (w, h, c, buf) = read(path)?;
    let data = buf.chunks_exact(c).map(|px| px[0] as f64 / 255.0).collect();
    Ok(Array::new([h, w], data)?)
}
