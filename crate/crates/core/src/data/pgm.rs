//! Binary greyscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use super::{DataError, Image};

/// Serializes an image, quantizing `[0, 1]` linearly to `0..=255`.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| quantize(v)));
    out
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(DataError::BadMagic(got));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::Truncated { expected: 1, found: 0 });
    }
    pos += 1;
    let (w, h) = (width as usize, height as usize);
    let raster = &bytes[pos..];
    if raster.len() < w * h {
        return Err(DataError::Truncated { expected: w * h, found: raster.len() });
    }
    let pixels = raster[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, pixels)
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<u64, DataError> {
    loop {
        match bytes.get(*pos) {
            None => return Err(DataError::Truncated { expected: 1, found: 0 }),
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::MalformedHeader(format!("expected a number at byte {start}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::MalformedHeader(format!("number out of range at byte {start}")))
}

pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(image: &Image, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    fs::write(path, encode_pgm(image)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let img = Image::new(2, 2, vec![0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0]).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ascii_variant_is_rejected() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0\n"), Err(DataError::BadMagic(_))));
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(DataError::UnsupportedMaxval(65535))));
    }

    #[test]
    fn short_raster_is_truncated() {
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01\x02"), Err(DataError::Truncated { expected: 4, found: 2 })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n1 2\n255\n\x00\xff").unwrap();
        assert_eq!((img.height(), img.width()), (2, 1));
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }
}
