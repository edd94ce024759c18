//! Binary PPM (P6, 8-bit RGB) and grayscale PFM (Pf, 32-bit float) codecs.
//!
//! PFM rows are stored bottom-to-top; the sign of the scale field picks the
//! byte order (negative is little-endian). Written files are little-endian.

use std::path::Path;

use crate::error::FormatError;
use crate::tensor::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self, comments: bool) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, comments: bool, what: &str) -> Result<(usize, &'a str), FormatError> {
        self.skip_space(comments);
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FormatError::Header {
                offset: start,
                msg: format!("missing {what}"),
            });
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| FormatError::Header {
            offset: start,
            msg: format!("{what} is not ASCII"),
        })?;
        Ok((start, s))
    }

    fn number<T: std::str::FromStr>(&mut self, comments: bool, what: &str) -> Result<T, FormatError> {
        let (offset, s) = self.token(comments, what)?;
        s.parse().map_err(|_| FormatError::Header {
            offset,
            msg: format!("bad {what} {s:?}"),
        })
    }

    // Exactly one whitespace byte separates the header from the payload.
    fn end(&mut self) -> Result<usize, FormatError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(FormatError::Header {
                offset: self.pos,
                msg: "expected a single whitespace byte before the payload".into(),
            }),
        }
    }
}

fn dims(h: &mut Header, comments: bool) -> Result<(usize, usize), FormatError> {
    h.skip_space(comments);
    let offset = h.pos;
    let w: usize = h.number(comments, "width")?;
    let ht: usize = h.number(comments, "height")?;
    if w == 0 || ht == 0 {
        return Err(FormatError::Header {
            offset,
            msg: format!("zero-sized image {w}x{ht}"),
        });
    }
    Ok((w, ht))
}

fn payload(bytes: &[u8], start: usize, needed: usize) -> Result<&[u8], FormatError> {
    let found = bytes.len().saturating_sub(start);
    if found < needed {
        return Err(FormatError::Truncated {
            offset: start,
            needed,
            found,
        });
    }
    Ok(&bytes[start..start + needed])
}

/// Decodes a P6 image into a 1 x 3 x H x W tensor in [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut h = Header { bytes, pos: 0 };
    let (_, magic) = h.token(true, "magic")?;
    if magic != "P6" {
        return Err(FormatError::Header {
            offset: 0,
            msg: format!("expected P6, got {magic:?}"),
        });
    }
    let (w, ht) = dims(&mut h, true)?;
    h.skip_space(true);
    let max_offset = h.pos;
    let maxval: u32 = h.number(true, "maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(FormatError::Header {
            offset: max_offset,
            msg: format!("maxval {maxval} unsupported (1..=255)"),
        });
    }
    let start = h.end()?;
    let data = payload(bytes, start, 3 * w * ht)?;
    let plane = w * ht;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f64 / maxval as f64;
        }
    }
    Ok(Tensor::new(&[1, 3, ht, w], out)?)
}

/// Encodes a 1 x 3 x H x W tensor, clamping to [0, 1] and rounding to 8 bits.
pub fn encode_ppm(rgb: &Tensor) -> Result<Vec<u8>, FormatError> {
    let (b, c, h, w) = rgb.expect_rank4("encode_ppm")?;
    if b != 1 || c != 3 {
        return Err(crate::Error::InvalidArgument {
            op: "encode_ppm",
            msg: format!("expected 1x3xHxW, got {:?}", rgb.shape()),
        }
        .into());
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = rgb.data();
    for i in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes a Pf image into a 1 x 1 x H x W tensor, top row first.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut h = Header { bytes, pos: 0 };
    let (_, magic) = h.token(false, "magic")?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(FormatError::Header {
                offset: 0,
                msg: "color PFM is not supported for depth".into(),
            })
        }
        _ => {
            return Err(FormatError::Header {
                offset: 0,
                msg: format!("expected Pf, got {magic:?}"),
            })
        }
    }
    let (w, ht) = dims(&mut h, false)?;
    h.skip_space(false);
    let scale_offset = h.pos;
    let scale: f64 = h.number(false, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(FormatError::Header {
            offset: scale_offset,
            msg: format!("scale {scale} must be finite and nonzero"),
        });
    }
    let start = h.end()?;
    let data = payload(bytes, start, 4 * w * ht)?;
    let mut out = vec![0.0; w * ht];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / w, i % w);
        out[(ht - 1 - row) * w + col] = v as f64;
    }
    Ok(Tensor::new(&[1, 1, ht, w], out)?)
}

/// Encodes a 1 x 1 x H x W tensor as little-endian f32.
pub fn encode_pfm(depth: &Tensor) -> Result<Vec<u8>, FormatError> {
    let (b, c, h, w) = depth.expect_rank4("encode_pfm")?;
    if b != 1 || c != 1 {
        return Err(crate::Error::InvalidArgument {
            op: "encode_pfm",
            msg: format!("expected 1x1xHxW, got {:?}", depth.shape()),
        }
        .into());
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    let d = depth.data();
    for row in (0..h).rev() {
        for v in &d[row * w..(row + 1) * w] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|e| FormatError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor, FormatError> {
    decode_ppm(&read(path)?)
}

pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<(), FormatError> {
    write(path, &encode_ppm(rgb)?)
}

pub fn read_pfm(path: &Path) -> Result<Tensor, FormatError> {
    decode_pfm(&read(path)?)
}

pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<(), FormatError> {
    write(path, &encode_pfm(depth)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_byte_grid() {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::new(&[1, 3, 4, 5], data).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        assert_eq!(&bytes[..11], b"P6\n5 4\n255\n");
        assert_eq!(decode_ppm(&bytes).unwrap(), t);
    }

    #[test]
    fn ppm_header_comments_and_maxval() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[15, 0, 5, 0, 15, 0]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 5.0 / 15.0, 0.0]);
    }

    #[test]
    fn pfm_round_trip_and_row_order() {
        let t = Tensor::new(&[1, 1, 2, 3], vec![1.5, 2.0, 3.25, 4.0, 5.5, 6.0]).unwrap();
        let bytes = encode_pfm(&t).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // first stored row is the bottom one
        assert_eq!(&bytes[header.len()..header.len() + 4], &4.0f32.to_le_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap(), t);
    }

    #[test]
    fn pfm_big_endian() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&7.0f32.to_be_bytes());
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[7.0, 0.5]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 5]);
        match decode_ppm(&bytes) {
            Err(FormatError::Truncated { offset, needed, found }) => {
                assert_eq!((offset, needed, found), (11, 12, 5));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        for bad in [
            &b"P5\n1 1\n255\n\0"[..],
            b"P6\nx 1\n255\n",
            b"P6\n1 1\n65535\n",
            b"P6\n0 1\n255\n",
        ] {
            assert!(matches!(decode_ppm(bad), Err(FormatError::Header { .. })), "{bad:?}");
        }
        match decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0") {
            Err(FormatError::Header { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pfm(b"PF\n1 1\n-1\n"), Err(FormatError::Header { .. })));
    }
}
