use std::io::Read;
use std::path::Path;

use crate::error::{fail, CliError, Result};

/// A single-channel image as raw integer samples plus the header maxval.
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub maxval: u32,
    pub data: Vec<u32>,
}

impl GrayImage {
    /// Samples as floats at their native integer scale.
    pub fn intensities(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Interprets the image as a binary mask: 0 stays 0, maxval becomes 1.
    pub fn as_mask(&self, stage: &str, path: &Path) -> Result<Vec<u8>> {
        self.data
            .iter()
            .map(|&v| {
                if v == 0 {
                    Ok(0)
                } else if v == self.maxval {
                    Ok(1)
                } else {
                    Err(fail(
                        stage,
                        format!(
                            "{} is not a binary mask (sample {v} with maxval {})",
                            path.display(),
                            self.maxval
                        ),
                    ))
                }
            })
            .collect()
    }
}

fn read_err(stage: &str, path: &Path, what: impl std::fmt::Display) -> CliError {
    fail(stage, format!("{}: {what}", path.display()))
}

/// Reads a PGM (P5) or grayscale PNG, sniffing the format by magic bytes.
pub fn read_gray(stage: &str, path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| read_err(stage, path, e))?;
    if bytes.starts_with(b"P5") {
        parse_pgm(&bytes).map_err(|e| read_err(stage, path, e))
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        parse_png(&bytes).map_err(|e| read_err(stage, path, e))
    } else {
        Err(read_err(stage, path, "not a PGM (P5) or PNG file"))
    }
}

/// Netpbm header tokens: whitespace-separated, `#` starts a comment that
/// runs to end of line.
fn pgm_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err("malformed PGM header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| "PGM header value out of range".into())
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 2;
    let w = pgm_token(bytes, &mut pos)? as usize;
    let h = pgm_token(bytes, &mut pos)? as usize;
    let maxval = pgm_token(bytes, &mut pos)?;
    if w == 0 || h == 0 {
        return Err("PGM with zero dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("PGM maxval {maxval} out of range"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("malformed PGM header".into());
    }
    pos += 1;
    let wide = maxval > 255;
    let expected = h * w * if wide { 2 } else { 1 };
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(format!(
            "PGM raster is {} bytes, expected {expected}",
            raster.len()
        ));
    }
    let data: Vec<u32> = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        raster.iter().map(|&b| u32::from(b)).collect()
    };
    if let Some(&v) = data.iter().find(|&&v| v > maxval) {
        return Err(format!("PGM sample {v} exceeds maxval {maxval}"));
    }
    Ok(GrayImage { h, w, maxval, data })
}

fn parse_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(GrayImage {
            h: g.height() as usize,
            w: g.width() as usize,
            maxval: 255,
            data: g.into_raw().into_iter().map(u32::from).collect(),
        }),
        image::DynamicImage::ImageLuma16(g) => Ok(GrayImage {
            h: g.height() as usize,
            w: g.width() as usize,
            maxval: 65535,
            data: g.into_raw().into_iter().map(u32::from).collect(),
        }),
        _ => Err("PNG is not single-channel grayscale".into()),
    }
}

pub fn write_pgm8(stage: &str, path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    std::fs::write(path, bytes).map_err(|e| read_err(stage, path, e))
}

pub fn write_pgm16(stage: &str, path: &Path, h: usize, w: usize, data: &[u16]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| read_err(stage, path, e))
}

pub fn write_png8(stage: &str, path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let img = image::GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .expect("raster length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| read_err(stage, path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm8_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let data: Vec<u8> = (0..12).map(|k| k * 20).collect();
        write_pgm8("t", &path, 3, 4, &data).unwrap();
        let img = read_gray("t", &path).unwrap();
        assert_eq!((img.h, img.w, img.maxval), (3, 4, 255));
        assert_eq!(img.data, data.iter().map(|&b| u32::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn pgm16_round_trips_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let data: Vec<u16> = vec![0, 1, 256, 65535];
        write_pgm16("t", &path, 2, 2, &data).unwrap();
        let img = read_gray("t", &path).unwrap();
        assert_eq!(img.maxval, 65535);
        assert_eq!(img.data, vec![0, 1, 256, 65535]);
        // Big-endian on disk: sample 256 is 0x01 0x00.
        let bytes = std::fs::read(&path).unwrap();
        let raster = &bytes[bytes.len() - 8..];
        assert_eq!(&raster[4..6], &[0x01, 0x00]);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x07\x09").unwrap();
        let img = read_gray("t", &path).unwrap();
        assert_eq!((img.h, img.w), (1, 2));
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, b"P5\n2 2\n255\n\x00\x01\x02").unwrap();
        assert!(read_gray("t", &path).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<u8> = vec![0, 255, 128, 7, 9, 200];
        write_png8("t", &path, 2, 3, &data).unwrap();
        let img = read_gray("t", &path).unwrap();
        assert_eq!((img.h, img.w, img.maxval), (2, 3, 255));
        assert_eq!(img.data, data.iter().map(|&b| u32::from(b)).collect::<Vec<_>>());
    }

    #[test]
    fn masks_accept_only_extremes() {
        let img = GrayImage { h: 1, w: 3, maxval: 255, data: vec![0, 255, 255] };
        assert_eq!(img.as_mask("t", Path::new("x")).unwrap(), vec![0, 1, 1]);
        let bad = GrayImage { h: 1, w: 3, maxval: 255, data: vec![0, 128, 255] };
        assert!(bad.as_mask("t", Path::new("x")).is_err());
    }

    #[test]
    fn unknown_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        std::fs::write(&path, b"hello").unwrap();
        assert!(read_gray("t", &path).is_err());
    }
}
