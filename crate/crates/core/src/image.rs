//! Grayscale raster images and binary PGM (P5) persistence.
//!
//! Intensities live in [0,1] with 1.0 = white background and 0.0 = ink.
//! PGM was picked over compressed formats so golden tests can compare bytes.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// H x W grayscale raster, row-major, intensities in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

#[derive(Debug)]
pub enum ImageError {
    Io(std::io::Error),
    BadHeader(String),
    Truncated { expected: usize, got: usize },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Io(e) => write!(f, "i/o error: {e}"),
            ImageError::BadHeader(msg) => write!(f, "bad PGM header: {msg}"),
            ImageError::Truncated { expected, got } => {
                write!(f, "PGM pixel data truncated: expected {expected} bytes, got {got}")
            }
        }
    }
}

impl std::error::Error for ImageError {}

impl From<std::io::Error> for ImageError {
    fn from(e: std::io::Error) -> Self {
        ImageError::Io(e)
    }
}

impl ImageBuffer {
    /// All-white canvas.
    pub fn white(h: usize, w: usize) -> Self {
        ImageBuffer { h, w, data: vec![1.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w, "pixel count mismatch");
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)), "intensity out of [0,1]");
        ImageBuffer { h, w, data }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.w..(r + 1) * self.w]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Quantize to 8-bit, clamping into range first.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), h * w, "pixel count mismatch");
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        ImageBuffer { h, w, data }
    }

    /// Write binary P5, maxval 255.
    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.w, self.h)?;
        out.extend_from_slice(&self.to_bytes());
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path)?;
        Self::parse_pgm(&bytes)
    }

    pub fn parse_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0usize;
        if bytes.len() < 2 || &bytes[0..2] != b"P5" {
            return Err(ImageError::BadHeader("missing P5 magic".into()));
        }
        pos += 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            *field = read_header_int(bytes, &mut pos)?;
        }
        let (w, h, maxval) = (fields[0], fields[1], fields[2]);
        if maxval == 0 || maxval > 255 {
            return Err(ImageError::BadHeader(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from pixel data.
        pos += 1;
        let expected = w * h;
        let raster = &bytes[pos.min(bytes.len())..];
        if raster.len() < expected {
            return Err(ImageError::Truncated { expected, got: raster.len() });
        }
        let data = raster[..expected].iter().map(|&b| b as f32 / maxval as f32).collect();
        Ok(ImageBuffer { h, w, data })
    }
}

/// Skip whitespace and `#` comments, then parse one decimal integer.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(ImageError::BadHeader("expected integer".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::BadHeader("unparsable integer".into()))
}
