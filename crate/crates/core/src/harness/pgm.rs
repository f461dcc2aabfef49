//! Binary greyscale PGM (`P5`, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 image into raw bytes plus `(height, width)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(b"P5") {
        return Err(parse_err(0, "expected magic P5"));
    }
    let mut header = Header { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval_at = {
        header.skip_space_and_comments();
        header.pos
    };
    let maxval = header.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("empty image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(header.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(header.pos, "expected whitespace after maxval"));
    }
    let start = header.pos + 1;
    let expected = width * height;
    let available = bytes.len() - start;
    if available < expected {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: need {expected} bytes, found {available}"),
        ));
    }
    if available > expected {
        return Err(parse_err(start + expected, "trailing bytes after raster"));
    }
    Ok((height, width, bytes[start..].to_vec()))
}

/// Canonical P5 encoding: `P5\n{w} {h}\n255\n` then the raster.
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Image as `[1,H,W]` with values `byte / 255`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, raw) = decode_pgm(bytes)?;
    Tensor::new(&[1, h, w], raw.into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Quantises `[1,H,W]` or `[H,W]` values in `[0,1]`, rounding half up.
pub fn quantize(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::Data(format!("cannot save {:?} as a greyscale image", image.shape()))),
    };
    let bytes = image
        .data()
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
            }
            Ok((v * 255.0 + 0.5).floor() as u8)
        })
        .collect::<Result<_>>()?;
    Ok((h, w, bytes))
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes)
}

pub fn save_pgm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w, raw) = quantize(image)?;
    fs::write(path, encode_pgm(h, w, &raw))?;
    Ok(())
}

/// Foreground wherever the byte is at least 128.
pub fn load_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (h, w, raw) = decode_pgm(&bytes)?;
    BinaryMask::new(h, w, raw.into_iter().map(|b| b >= 128).collect())
}

/// Writes foreground as 255 and background as 0.
pub fn save_mask_pgm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(mask.height(), mask.width(), &raw))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_bytes() {
        let mut file = b"P5\n2 2\n255\n".to_vec();
        file.extend([0, 255, 128, 64]);
        let t = parse_pgm(&file).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 5e-6);
        }
        let (h, w, raw) = quantize(&t).unwrap();
        assert_eq!(encode_pgm(h, w, &raw), file);
    }

    #[test]
    fn comments_are_skipped() {
        let mut file = b"P5 # made by hand\n3 # width\n1\n255\n".to_vec();
        file.extend([1, 2, 3]);
        let (h, w, raw) = decode_pgm(&file).unwrap();
        assert_eq!((h, w, raw), (1, 3, vec![1, 2, 3]));
    }

    #[test]
    fn rejections_carry_offsets() {
        let err = |bytes: &[u8]| match decode_pgm(bytes) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err(b"P6\n1 1\n255\n\0"), 0);
        assert_eq!(err(b"P5\n1 1\n65535\n\0\0"), 7);
        assert_eq!(err(b"P5\n2 2\n255\n\0\0"), 13);
        assert_eq!(err(b"P5\nx 2\n255\n"), 3);
    }

    #[test]
    fn rounding_is_half_up() {
        let t = Tensor::new(&[1, 1, 2], vec![0.5 / 255.0, 1.0]).unwrap();
        assert_eq!(quantize(&t).unwrap().2, vec![1, 255]);
    }
}
