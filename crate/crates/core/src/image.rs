//! Grayscale image buffers, 8-bit PGM/PNG I/O, patch extraction and
//! weighted aggregation of overlapping patch estimates.
//!
//! Intensities are held as `f64` in `[0, 1]`. Files are 8-bit only: binary
//! PGM (`P5`) and PNG (grayscale, grayscale+alpha, RGB or RGBA). Color input
//! is reduced to luma with the Rec.601 weights at load time.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Row-major grayscale intensity field.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(invalid(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Clamps every intensity into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Nearest-integer 8-bit quantization used when writing files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Square `k`×`k` block of intensities taken from (or destined for) an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    k: usize,
    origin: (usize, usize),
    values: Vec<f64>,
}

impl Patch {
    pub fn new(k: usize, origin: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.len() != k * k {
            return Err(invalid(format!(
                "patch of size {k} needs {} values, got {}",
                k * k,
                values.len()
            )));
        }
        Ok(Self { k, origin, values })
    }

    pub fn filled(k: usize, value: f64) -> Self {
        Self {
            k,
            origin: (0, 0),
            values: vec![value; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Value at column `i`, row `j` inside the patch.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.k + i]
    }

    /// Same values placed at another origin.
    pub fn with_origin(mut self, origin: (usize, usize)) -> Self {
        self.origin = origin;
        self
    }
}

fn check_fits(width: usize, height: usize, origin: (usize, usize), k: usize) -> Result<()> {
    let (x, y) = origin;
    if k == 0 || x + k > width || y + k > height {
        return Err(Error::OutOfBounds {
            x,
            y,
            k,
            width,
            height,
        });
    }
    Ok(())
}

pub fn extract_patch(img: &ImageBuffer, origin: (usize, usize), k: usize) -> Result<Patch> {
    check_fits(img.width, img.height, origin, k)?;
    let (x0, y0) = origin;
    let mut values = Vec::with_capacity(k * k);
    for y in y0..y0 + k {
        let row = y * img.width;
        values.extend_from_slice(&img.data[row + x0..row + x0 + k]);
    }
    Ok(Patch { k, origin, values })
}

/// Per-pixel weighted sums of overlapping patch estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    width: usize,
    height: usize,
    numerator: Vec<f64>,
    denominator: Vec<f64>,
}

impl Accumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            numerator: vec![0.0; width * height],
            denominator: vec![0.0; width * height],
        }
    }

    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    pub fn denominator(&self) -> &[f64] {
        &self.denominator
    }

    pub fn is_covered(&self, x: usize, y: usize) -> bool {
        self.denominator[y * self.width + x] > 0.0
    }

    /// Adds `weight × patch` at the patch origin.
    pub fn accumulate(&mut self, patch: &Patch, weight: f64) -> Result<()> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(invalid(format!(
                "accumulation weight must be finite and >= 0, got {weight}"
            )));
        }
        check_fits(self.width, self.height, patch.origin, patch.k)?;
        let (x0, y0) = patch.origin;
        let k = patch.k;
        for j in 0..k {
            let row = (y0 + j) * self.width + x0;
            for i in 0..k {
                self.numerator[row + i] += weight * patch.values[j * k + i];
                self.denominator[row + i] += weight;
            }
        }
        Ok(())
    }

    /// Covered pixels become `numerator / denominator` clamped to `[0, 1]`;
    /// uncovered pixels are copied from `fallback`.
    pub fn finalize(&self, fallback: &ImageBuffer) -> Result<ImageBuffer> {
        if fallback.width != self.width || fallback.height != self.height {
            return Err(invalid(format!(
                "fallback is {}x{}, accumulator is {}x{}",
                fallback.width, fallback.height, self.width, self.height
            )));
        }
        let data = self
            .numerator
            .iter()
            .zip(&self.denominator)
            .zip(&fallback.data)
            .map(|((&n, &d), &f)| if d > 0.0 { (n / d).clamp(0.0, 1.0) } else { f })
            .collect();
        Ok(ImageBuffer {
            width: self.width,
            height: self.height,
            data,
        })
    }
}

// ---------------------------------------------------------------------------
// File I/O

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes, path)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes, path)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected binary PGM (P5) or PNG".into(),
        })
    }
}

/// Writes 8-bit PGM or PNG, chosen by the file extension.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    match ext.as_deref() {
        Some("pgm") => {
            let mut out = Vec::with_capacity(img.data.len() + 32);
            write!(out, "P5\n{} {}\n255\n", img.width, img.height).map_err(io_err)?;
            out.extend(img.to_u8());
            fs::write(path, out).map_err(io_err)
        }
        Some("png") => image::save_buffer_with_format(
            path,
            &img.to_u8(),
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(source) => io_err(source),
            other => Error::Format {
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        }),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "output extension must be .pgm or .png".into(),
        }),
    }
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: format!("malformed PGM header: {detail}"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected an integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("integer out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before raster"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    if maxval > 255 {
        return Err(Error::BitDepth {
            path: path.to_path_buf(),
            depth: 16,
        });
    }
    let n = width * height;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        detail: format!(
            "raster truncated: expected {n} bytes, found {}",
            bytes.len() - pos
        ),
    })?;
    let scale = maxval as f64;
    ImageBuffer::new(
        width,
        height,
        raster.iter().map(|&b| f64::from(b) / scale).collect(),
    )
}

fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        image::DynamicImage::ImageLuma8(buf) => {
            buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect()
        }
        image::DynamicImage::ImageLumaA8(buf) => {
            buf.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect()
        }
        image::DynamicImage::ImageRgb8(buf) => {
            buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
        image::DynamicImage::ImageRgba8(buf) => {
            buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
        other => {
            let color = other.color();
            return Err(Error::BitDepth {
                path: path.to_path_buf(),
                depth: u32::from(color.bits_per_pixel() / u16::from(color.channel_count())),
            });
        }
    };
    ImageBuffer::new(w, h, data)
}
