//! Binary PPM (P6) reading and writing and PGM (P5) writing.

use std::path::Path;

use gatn_core::Tensor4;

use crate::error::{self, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PnmError {
    #[error("not a binary PPM (P6) file")]
    Magic,
    #[error("malformed PPM header")]
    Header,
    #[error("unsupported PPM maxval {0}")]
    MaxVal(u32),
    #[error("PPM pixel data is truncated")]
    Truncated,
}

/// Header tokens are separated by whitespace; `#` starts a comment that runs
/// to the end of the line.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<u32, PnmError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(PnmError::Header),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PnmError::Header)
}

/// Decodes a P6 image into `(1, 3, h, w)` with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4, PnmError> {
    if !bytes.starts_with(b"P6") {
        return Err(PnmError::Magic);
    }
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)? as usize;
    let h = header_token(bytes, &mut pos)? as usize;
    let maxval = header_token(bytes, &mut pos)?;
    if w == 0 || h == 0 {
        return Err(PnmError::Header);
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::MaxVal(maxval));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::Header);
    }
    let pixels = &bytes[pos + 1..];
    let width = if maxval < 256 { 1 } else { 2 };
    if pixels.len() < w * h * 3 * width {
        return Err(PnmError::Truncated);
    }
    let scale = 1.0 / maxval as f64;
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        let i = ((y * w + x) * 3 + c) * width;
        let raw = if width == 1 {
            pixels[i] as u32
        } else {
            u16::from_be_bytes([pixels[i], pixels[i + 1]]) as u32
        };
        raw as f64 * scale
    }))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the first item of a 3-channel tensor with values in `[0, 1]`.
pub fn encode_ppm(image: &Tensor4) -> Vec<u8> {
    assert_eq!(image.c(), 3, "encode_ppm needs three channels");
    let (h, w) = (image.h(), image.w());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "PGM pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Min-max scales to 0..=255; a constant input maps to all zeros.
pub fn heatmap(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn read_ppm(path: &Path) -> CliResult<Tensor4> {
    decode_ppm(&error::read(path)?).map_err(|e| CliError::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor4) -> CliResult<()> {
    error::write(path, &encode_ppm(image))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult<()> {
    error::write(path, &encode_pgm(width, height, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_the_8_bit_grid() {
        let img = Tensor4::from_fn([1, 3, 2, 3], |_, c, y, x| ((c * 6 + y * 3 + x) * 13) as f64 / 255.0);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.dims(), [1, 3, 2, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn header_with_comments_and_16_bit_samples() {
        let mut bytes = b"P6 # comment\n1 1\n# another\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert!((img.data()[2] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn malformed_ppm() {
        assert_eq!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(PnmError::Magic));
        assert_eq!(decode_ppm(b"P6\n1 1\n255\n\0\0"), Err(PnmError::Truncated));
        assert_eq!(decode_ppm(b"P6\n1 x\n255\n"), Err(PnmError::Header));
        assert_eq!(decode_ppm(b"P6\n1 1\n0\n\0\0\0"), Err(PnmError::MaxVal(0)));
    }

    #[test]
    fn heatmap_scaling() {
        assert_eq!(heatmap(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
        assert_eq!(heatmap(&[0.25; 4]), vec![0; 4]);
    }

    #[test]
    fn pgm_layout() {
        assert_eq!(encode_pgm(2, 1, &[7, 9]), b"P5\n2 1\n255\n\x07\x09".to_vec());
    }
}
