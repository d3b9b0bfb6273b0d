//! PNG and PPM (P3/P6) decoding to `[H, W, 3]` tensors in `[0, 1]`, and
//! 8-bit PNG/PPM encoding.
//!
//! Any other format has to be converted before ingestion.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes a PNG or PPM file, sniffing the format from its first bytes.
pub fn load(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes).map_err(|e| Error::file(path, e))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(bytes)
    } else {
        Err(Error::format("image", "neither PNG nor PPM (P3/P6)"))
    }
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    // Palette and low bit depths expand to 8 bits; 16-bit stays 16-bit.
    dec.set_transformations(Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::format("PNG", e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("PNG", "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("PNG", e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f32> = match info.bit_depth {
        BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        _ => buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect(),
    };
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format("PNG", "unexpanded palette")),
    };
    // Rows may carry padding when the stride exceeds w * channels.
    let stride = samples.len() / h;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let row = &samples[y * stride..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            // Alpha is dropped rather than composited.
            match channels {
                1 | 2 => data.extend([px[0]; 3]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Whitespace- and comment-aware PPM header tokenizer.
struct PpmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmHeader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("PPM", format!("expected a number at byte {start}")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let binary = bytes[1] == b'6';
    let mut hdr = PpmHeader { bytes, pos: 2 };
    let (w, h, maxval) = (hdr.number()?, hdr.number()?, hdr.number()?);
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(Error::format("PPM", format!("bad header {w}x{h} maxval {maxval}")));
    }
    let n = w * h * 3;
    let scale = maxval as f32;
    let data: Vec<f32> = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = hdr.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| Error::format("PPM", format!("raster truncated: need {need} bytes")))?;
        if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale).collect()
        } else {
            raster.iter().map(|&b| b as f32 / scale).collect()
        }
    } else {
        (0..n).map(|_| hdr.number().map(|v| v as f32 / scale)).collect::<Result<_>>()?
    };
    if data.iter().any(|&v| v > 1.0) {
        return Err(Error::format("PPM", "sample exceeds maxval"));
    }
    Tensor::new(vec![h, w, 3], data)
}

fn to_bytes(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    match *img.shape() {
        [h, w, 3] => Ok((
            h,
            w,
            img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        )),
        ref s => Err(Error::shape("save image", format!("expected [H, W, 3], got {s:?}"))),
    }
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, bytes) = to_bytes(img)?;
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let err = |e: png::EncodingError| Error::file(path, e);
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&bytes).map_err(err)?;
    writer.finish().map_err(err)
}

/// Writes a binary (P6) PPM; values are clamped to `[0, 1]`.
pub fn save_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, bytes) = to_bytes(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(bytes);
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// Saves by extension: `.ppm` as PPM, anything else as PNG.
pub fn save(path: &Path, img: &Tensor<f32>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => save_ppm(path, img),
        _ => save_png(path, img),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_ppm_with_comments() {
        let src = b"P3\n# two pixels\n2 1\n255\n255 0 0  0 0 255\n";
        let t = decode(src).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn truncated_ppm_is_an_error() {
        assert!(decode(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode(b"GIF89a").is_err());
    }
}
