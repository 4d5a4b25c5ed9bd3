//! Sample raster plus binary PGM/PPM reading and writing.
//!
//! Samples are `f64` in `[0, 1]`, row-major, channels interleaved. The disk
//! formats are the binary netpbm variants (`P5` grayscale, `P6` RGB) with
//! 8-bit depth; a linear value `v` maps to the byte `round(v * 255)`.

use std::fs;
use std::path::Path;

use super::LightFieldError;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<f64>,
    ) -> Result<Self, LightFieldError> {
        if width == 0 || height == 0 || channels == 0 || samples.len() != width * height * channels
        {
            return Err(LightFieldError::DimensionMismatch {
                width,
                height,
                channels,
                len: samples.len(),
            });
        }
        Ok(Self { width, height, channels, samples })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, samples: vec![0.0; width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.samples[(y * self.width + x) * self.channels + c] = v;
    }

    /// Bilinear sample at a fractional pixel position, `None` outside
    /// `[0, width-1] x [0, height-1]`. A sliver of slack past the border
    /// keeps pixels that land on the edge up to roundoff.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<f64> {
        const EDGE_SLACK: f64 = 1e-9;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= -EDGE_SLACK && x <= max_x + EDGE_SLACK && y >= -EDGE_SLACK && y <= max_y + EDGE_SLACK)
        {
            return None;
        }
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        Some(
            (1.0 - fx) * (1.0 - fy) * self.get(x0, y0, c)
                + fx * (1.0 - fy) * self.get(x1, y0, c)
                + (1.0 - fx) * fy * self.get(x0, y1, c)
                + fx * fy * self.get(x1, y1, c),
        )
    }
}

/// Serializes to binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>, LightFieldError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        channels => return Err(LightFieldError::ChannelCount { channels }),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.samples.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pnm(img: &Image, path: &Path) -> Result<(), LightFieldError> {
    let bytes = encode_pnm(img)?;
    crate::dataio::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Image, LightFieldError> {
    decode_pnm(&fs::read(path)?)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image, LightFieldError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        "P5" => 1,
        "P6" => 3,
        magic => {
            return Err(LightFieldError::Format {
                detail: format!("unsupported magic {magic:?}, expected P5 or P6"),
            })
        }
    };
    let width: usize = cur.number()?;
    let height: usize = cur.number()?;
    let maxval: u32 = cur.number()?;
    if maxval != 255 {
        return Err(LightFieldError::Maxval { got: maxval });
    }
    // Exactly one whitespace byte separates the header from the payload.
    cur.expect_single_whitespace()?;
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or(LightFieldError::Format { detail: format!("dimensions {width}x{height} overflow") })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(LightFieldError::Truncated { expected, got: payload.len() });
    }
    let samples = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(width, height, channels, samples)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a str, LightFieldError> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(LightFieldError::Format { detail: "truncated header".into() });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| LightFieldError::Format { detail: "non-ASCII header".into() })
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T, LightFieldError> {
        let tok = self.token()?;
        tok.parse().map_err(|_| LightFieldError::Format {
            detail: format!("expected a number in the header, got {tok:?}"),
        })
    }

    fn expect_single_whitespace(&mut self) -> Result<(), LightFieldError> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(LightFieldError::Format {
                detail: "missing separator before the pixel payload".into(),
            })
        }
    }
}
