//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fmt::Write as _;

/// A decoded image: `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    encode("P5", width, height, samples)
}

/// `rgb` is interleaved, three samples per pixel.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode("P6", width, height, rgb)
}

fn encode(magic: &str, width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut header = String::new();
    let _ = write!(header, "{magic}\n{width} {height}\n255\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Parses a P5 or P6 file with maxval at most 255.
pub fn decode(bytes: &[u8]) -> Result<Netpbm, String> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported netpbm magic {other:?}")),
    };
    let mut number = |what: &str| -> Result<usize, String> {
        let t = token(bytes, &mut pos)?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} not in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != len {
        return Err(format!("expected {len} raster bytes, found {}", raster.len()));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        samples: raster.to_vec(),
    })
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let img = decode(&encode_ppm(3, 2, &rgb)).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        assert_eq!(img.samples, rgb);
        let gray = decode(&encode_pgm(2, 2, &[0, 1, 2, 255])).unwrap();
        assert_eq!(gray.samples, vec![0, 1, 2, 255]);
    }

    #[test]
    fn header_layout_and_comments() {
        assert_eq!(&encode_pgm(4, 1, &[9; 4])[..11], b"P5\n4 1\n255\n");
        let img = decode(b"P5 # comment\n2 1 255\n\x07\x08").unwrap();
        assert_eq!(img.samples, vec![7, 8]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\n1").is_err());
    }
}
