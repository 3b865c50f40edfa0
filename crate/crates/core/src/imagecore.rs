//! Raster primitives: RGB images, binary masks, boxes, 3×3 morphology and PNG IO.
//!
//! Pixel coordinates are integer `(x, y)` with `(0, 0)` at the top-left corner;
//! all rasters are stored row-major.

use std::io::Cursor;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be at least 1x1".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "rgb buffer holds {} bytes, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel foreground bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask holds {} bits, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
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

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel units: covers columns `x..x+w` and rows `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "box extent must be positive, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as u64, y as u64);
        x >= self.x as u64 && x < self.right() && y >= self.y as u64 && y < self.bottom()
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Format(e.to_string()))
}

fn encode_png(width: usize, height: usize, data: &[u8], color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out))
        .write_image(data, width as u32, height as u32, color.into())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

/// Decodes an 8-bit grayscale or RGB PNG; gray is replicated into all three channels.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRgb> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageRgb8(buf) => ImageRgb::new(w, h, buf.into_raw()),
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().flat_map(|v| [v, v, v]).collect();
            ImageRgb::new(w, h, data)
        }
        other => Err(Error::Format(format!(
            "expected 8-bit grayscale or RGB PNG, found {:?}",
            other.color()
        ))),
    }
}

pub fn encode_image(image: &ImageRgb) -> Result<Vec<u8>> {
    encode_png(image.width, image.height, &image.data, ColorType::Rgb8)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_image(&bytes)
}

pub fn save_image(image: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_image(image)?).map_err(|e| io_err(path, e))
}

/// Decodes an 8-bit grayscale PNG; values above 127 are foreground.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    match decode(bytes)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            BinaryMask::new(w, h, buf.into_raw().into_iter().map(|v| v > 127).collect())
        }
        other => Err(Error::Format(format!(
            "expected 8-bit grayscale mask PNG, found {:?}",
            other.color()
        ))),
    }
}

/// Encodes foreground as 255 and background as 0.
pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(mask.width, mask.height, &data, ColorType::L8)
}

/// Encodes an arbitrary 8-bit grayscale raster (probability maps, Voronoi previews).
pub fn encode_gray(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::InvalidArgument("gray buffer size mismatch".into()));
    }
    encode_png(width, height, data, ColorType::L8)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_mask(&bytes)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask(mask)?).map_err(|e| io_err(path, e))
}

/// One step of 3×3 square dilation, separable into a row pass and a column pass.
fn dilate_once(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let row = &mask.bits[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(1);
            let hi = (x + 1).min(w - 1);
            rows[y * w + x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(1);
        let hi = (y + 1).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits: out,
    }
}

/// Dilates with the full 3×3 square `iterations` times; the image border clips.
///
/// The result is exactly the set of pixels within chessboard distance
/// `iterations` of the input foreground. `iterations == 0` returns the input.
pub fn dilate(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let mut cur = mask.clone();
    for _ in 0..iterations {
        if cur.is_empty() {
            break;
        }
        cur = dilate_once(&cur);
    }
    cur
}

/// Erosion with the 3×3 square; pixels outside the image count as background.
pub fn erode(mask: &BinaryMask, iterations: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    // Pad by one ring of background so the border erodes too.
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let padded = BinaryMask::from_fn(w + 2, h + 2, |x, y| {
            x == 0 || y == 0 || x > w || y > h || !cur.get(x - 1, y - 1)
        });
        let grown = dilate_once(&padded);
        cur = BinaryMask::from_fn(w, h, |x, y| !grown.get(x + 1, y + 1) && cur.get(x, y));
    }
    cur
}

/// Pixel-wise `a ∧ ¬b`.
pub fn subtract(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.check_same_dims(b)?;
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        bits: a.bits.iter().zip(&b.bits).map(|(&p, &q)| p && !q).collect(),
    })
}

/// Foreground pixels with at least one 8-neighbour in the background.
/// Pixels on the image border count as contour because the outside is background.
pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
            return true;
        }
        (y - 1..=y + 1).any(|yy| (x - 1..=x + 1).any(|xx| !mask.get(xx, yy)))
    })
}

/// Tight box around all foreground pixels.
pub fn mask_bbox(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut it = mask.pixels();
    let (x0, y0) = it.next().ok_or(Error::EmptyRegion)?;
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (x0, x0, y0, y0);
    for (x, y) in it {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    Ok(BoundingBox {
        x: min_x as u32,
        y: min_y as u32,
        w: (max_x - min_x + 1) as u32,
        h: (max_y - min_y + 1) as u32,
    })
}

/// Intersection over union of the pixel sets covered by two boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub((a.x as u64).max(b.x as u64));
    let iy = a.bottom().min(b.bottom()).saturating_sub((a.y as u64).max(b.y as u64));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
