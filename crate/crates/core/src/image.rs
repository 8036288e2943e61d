//! Raster types shared by every stage, plus binary PNM (P5/P6) encoding.
//!
//! Only the binary netpbm variants are supported. P6 with `maxval` 255 is the
//! interchange format for frames and panoramas; P5 is written for masks
//! (8-bit) and coverage maps (16-bit, big-endian as the format requires).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

/// Errors from decoding or encoding a PNM file.
#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{0}")]
    Io(#[from] io::Error),
    /// The byte stream is not a supported PNM image.
    #[error("invalid PNM data: {0}")]
    Format(String),
}

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    /// Black image of the given size.
    ///
    /// # Panics
    /// If either dimension is zero.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    /// Wraps an existing buffer; `None` when the length does not match.
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return None;
        }
        Some(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn as_raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes a binary P6 image with `maxval` 255.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self, PnmError> {
        let (header, offset) = parse_header(bytes)?;
        if header.magic != *b"P6" {
            return Err(PnmError::Format(format!(
                "expected magic P6, found {}",
                String::from_utf8_lossy(&header.magic)
            )));
        }
        if header.maxval != 255 {
            return Err(PnmError::Format(format!(
                "unsupported maxval {} (only 255)",
                header.maxval
            )));
        }
        let len = header.width * header.height * 3;
        let body = &bytes[offset..];
        if body.len() < len {
            return Err(PnmError::Format(format!(
                "truncated pixel data: expected {len} bytes, found {}",
                body.len()
            )));
        }
        Ok(Self {
            width: header.width,
            height: header.height,
            data: body[..len].to_vec(),
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read_ppm(path: &Path) -> Result<Self, PnmError> {
        Self::decode_ppm(&fs::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> io::Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.encode_ppm())?;
        f.flush()
    }
}

/// Single-channel real-valued raster (luminance, filter responses).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel access with coordinates clamped to the raster (replicated border).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }
}

/// One flag per pixel, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit P5 rendering: set pixels are white.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

/// 16-bit P5 encoding of a count raster; values saturate at 65535.
pub fn encode_pgm16(width: usize, height: usize, values: &[u32]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        out.extend_from_slice(&(v.min(u16::MAX as u32) as u16).to_be_bytes());
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
}

/// Parses the ASCII header and returns it with the offset of the first pixel byte.
fn parse_header(bytes: &[u8]) -> Result<(Header, usize), PnmError> {
    if bytes.len() < 2 {
        return Err(PnmError::Format("file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(PnmError::Format("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Format(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PnmError::Format(format!("header value out of range: {text}")))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::Format("missing whitespace after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(PnmError::Format(format!("invalid dimensions {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::Format(format!("invalid maxval {maxval}")));
    }
    let header = Header {
        magic,
        width: usize::try_from(w).map_err(|_| PnmError::Format("width too large".into()))?,
        height: usize::try_from(h).map_err(|_| PnmError::Format("height too large".into()))?,
        maxval: maxval as u32,
    };
    header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| PnmError::Format("dimensions overflow".into()))?;
    Ok((header, pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = RgbImage::decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.get(1, 0), [4, 5, 6]);
    }

    #[test]
    fn encoded_bytes_are_exact() {
        let img = RgbImage::from_raw(1, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        assert_eq!(img.encode_ppm(), b"P6\n1 2\n255\n\x09\x08\x07\x06\x05\x04".to_vec());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            RgbImage::decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(PnmError::Format(_))
        ));
        assert!(matches!(
            RgbImage::decode_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(PnmError::Format(_))
        ));
        assert!(matches!(
            RgbImage::decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(PnmError::Format(_))
        ));
        assert!(matches!(RgbImage::decode_ppm(b"P6 x"), Err(PnmError::Format(_))));
    }

    #[test]
    fn pgm16_is_big_endian() {
        let bytes = encode_pgm16(2, 1, &[1, 70000]);
        assert!(bytes.ends_with(&[0, 1, 0xff, 0xff]));
    }

    proptest::proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..12, h in 1usize..12, seed in proptest::prelude::any::<u64>()) {
            let img = RgbImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(31).wrapping_add((x * 7 + y * 13) as u64);
                [v as u8, (v >> 8) as u8, (v >> 16) as u8]
            });
            proptest::prop_assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
        }
    }
}
