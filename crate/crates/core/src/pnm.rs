//! Binary PNM (portable graymap/pixmap) reading and writing.
//!
//! Images round-trip through 16-bit graymaps (P5, maxval 65535) so that
//! quantized intensities are the dataset ground truth; masks use 8-bit
//! graymaps with 0/255 levels. 3-channel images use P6 pixmaps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image};

const MASK_ON: u8 = 255;

fn parse_err(path: &Path, reason: &str) -> Error {
    Error::Parse { path: path.display().to_string(), reason: reason.into() }
}

/// Reads PNM header tokens, skipping whitespace and `#` comments.
fn read_tokens(bytes: &[u8], count: usize) -> Option<(Vec<usize>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count && i < bytes.len() {
        while i < bytes.len() {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else if bytes[i].is_ascii_whitespace() {
                i += 1;
            } else {
                break;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        let tok = std::str::from_utf8(&bytes[start..i]).ok()?;
        tokens.push(tok.parse().ok()?);
    }
    if tokens.len() < count {
        return None;
    }
    // Exactly one whitespace byte separates the header from raster data.
    Some((tokens, i + 1))
}

/// Writes an image as P5 (1 channel) or P6 (3 channels) with 16-bit samples.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(32 + h * w * c * 2);
    write!(out, "{magic}\n{w} {h}\n65535\n")?;
    let hw = h * w;
    for idx in 0..hw {
        for ch in 0..c {
            let v = img.data()[ch * hw + idx];
            let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a P5/P6 graymap/pixmap (8- or 16-bit) into an [`Image`].
pub fn read_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 {
        return Err(parse_err(path, "file too short"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(parse_err(path, "expected P5 or P6 magic")),
    };
    let (header, data_start) =
        read_tokens(&bytes[2..], 3).ok_or_else(|| parse_err(path, "malformed header"))?;
    let (w, h, maxval) = (header[0], header[1], header[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(path, "maxval out of range"));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let raster = &bytes[2 + data_start..];
    let expected = h * w * channels * bytes_per;
    if raster.len() < expected {
        return Err(parse_err(path, "raster truncated"));
    }
    let hw = h * w;
    let mut data = vec![0.0; channels * hw];
    for idx in 0..hw {
        for ch in 0..channels {
            let off = (idx * channels + ch) * bytes_per;
            let raw = if bytes_per == 2 {
                u16::from_be_bytes([raster[off], raster[off + 1]]) as f64
            } else {
                raster[off] as f64
            };
            data[ch * hw + idx] = raw / maxval as f64;
        }
    }
    Image::new(h, w, channels, data)
}

/// Writes a binary mask as an 8-bit P5 graymap (0 / 255).
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(mask.data().iter().map(|&v| if v == 1 { MASK_ON } else { 0 }));
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an 8- or 16-bit P5 graymap as a mask; samples above half maxval are 1.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(parse_err(path, "expected P5 magic"));
    }
    let (header, data_start) =
        read_tokens(&bytes[2..], 3).ok_or_else(|| parse_err(path, "malformed header"))?;
    let (w, h, maxval) = (header[0], header[1], header[2]);
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let raster = &bytes[2 + data_start..];
    if raster.len() < h * w * bytes_per {
        return Err(parse_err(path, "raster truncated"));
    }
    let half = maxval / 2;
    let data = (0..h * w)
        .map(|i| {
            let raw = if bytes_per == 2 {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            } else {
                raster[i] as usize
            };
            u8::from(raw > half)
        })
        .collect();
    BinaryMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_roundtrip_16bit() {
        let dir = std::env::temp_dir().join("seedprop_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.pgm");
        let data: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0 * 65535.0).round() / 65535.0).collect();
        let img = Image::new(8, 8, 1, data).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rgb_roundtrip() {
        let dir = std::env::temp_dir().join("seedprop_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ppm");
        let data: Vec<f64> =
            (0..192).map(|i| (i as f64 / 191.0 * 65535.0).round() / 65535.0).collect();
        let img = Image::new(8, 8, 3, data).unwrap();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = std::env::temp_dir().join("seedprop_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mask.pgm");
        let mut mask = BinaryMask::zeros(8, 8);
        mask.set(2, 3, 1);
        mask.set(7, 7, 1);
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("seedprop_pnm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgm");
        std::fs::write(&path, b"NOTPNM").unwrap();
        assert!(read_image(&path).is_err());
        assert!(read_mask(&path).is_err());
    }
}
