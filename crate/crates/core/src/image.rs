//! Pixel containers, PPM I/O and bilinear sampling.
//!
//! Images are row-major, top-left origin, `y` increasing downward, three
//! channels per pixel, every value in `[0, 1]`. Values are quantized to 8 bits
//! only when written to disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A real-valued pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// H×W×3 image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        assert!((0.0..=1.0).contains(&value), "fill value outside [0, 1]");
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in f(x, y) {
                    data.push(if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) });
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Returns a copy with one pixel replaced.
    pub fn with_pixel(&self, x: usize, y: usize, rgb: [f64; 3]) -> Result<Self> {
        if x >= self.width || y >= self.height {
            return Err(Error::Dimension(format!(
                "pixel ({x}, {y}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = self.data.clone();
        let i = (y * self.width + x) * 3;
        data[i..i + 3].copy_from_slice(&rgb);
        Self::new(self.height, self.width, data)
    }

    /// Greyscale-style accessor for single-channel-semantics buffers (masks).
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        self.data[(y * self.width + x) * 3]
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.dims() == other.dims()
    }

    /// Largest absolute per-channel difference; panics on mismatched sizes.
    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert!(self.same_dims(other), "size mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const SNAP_EPS: f64 = 1e-9;

/// Quantizes a unit-interval value to a byte by round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        PpmError::Header(reason) => Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        },
        PpmError::Depth(maxval) => Error::UnsupportedDepth {
            path: path.to_path_buf(),
            maxval,
        },
    })
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

enum PpmError {
    Header(String),
    Depth(u32),
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, PpmError> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::Header("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(PpmError::Header(format!(
            "expected magic P6, found `{}`",
            tokens[0]
        )));
    }
    let parse = |s: &str, what: &str| -> std::result::Result<usize, PpmError> {
        s.parse::<usize>()
            .map_err(|_| PpmError::Header(format!("bad {what} `{s}`")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")? as u32;
    if width == 0 || height == 0 {
        return Err(PpmError::Header("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(PpmError::Depth(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(PpmError::Header(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(ImageBuffer {
        height,
        width,
        data,
    })
}

/// The four bilinear taps for a sample point: `(pixel index, weight)`.
///
/// Taps falling outside the image get weight 0 (zero fill). The point is
/// out of bounds when it lies outside `[0, W-1] x [0, H-1]`; then all weights
/// are 0. Coordinates within `1e-9` px of an integer are snapped to it, so
/// round-off from an exactly-fitted warp cannot flip a pixel out of bounds.
pub fn bilinear_taps(height: usize, width: usize, p: Point2) -> [(usize, f64); 4] {
    let empty = [(0, 0.0); 4];
    if !p.is_finite() {
        return empty;
    }
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < SNAP_EPS {
            r
        } else {
            v
        }
    };
    let p = Point2::new(snap(p.x), snap(p.y));
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    if p.x < 0.0 || p.y < 0.0 || p.x > max_x || p.y > max_y {
        return empty;
    }
    let x0 = (p.x.floor() as usize).min(width - 1);
    let y0 = (p.y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = p.x - x0 as f64;
    let fy = p.y - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// Bilinear sample over a raw H×W×3 array; values need not lie in `[0, 1]`.
pub fn sample_bilinear_raw(data: &[f64], height: usize, width: usize, p: Point2) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (idx, w) in bilinear_taps(height, width, p) {
        if w == 0.0 {
            continue;
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * data[idx * 3 + c];
        }
    }
    out
}

pub fn sample_bilinear(img: &ImageBuffer, p: Point2) -> [f64; 3] {
    sample_bilinear_raw(&img.data, img.height, img.width, p)
}
