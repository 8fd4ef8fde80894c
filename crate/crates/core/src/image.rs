//! Byte-stream imaging: 1-pixel-high "vector" images, the square comparison
//! representation, bilinear resizing and the on-disk image cache formats.
//!
//! Resizing is bilinear with half-pixel-centred sampling and no antialiasing:
//! output pixel `j` samples source coordinate `(j + 0.5) * w_in / w_out - 0.5`,
//! clamped to `[0, w_in - 1]`, and interpolates linearly between the two
//! neighbouring source pixels. Outputs stay real-valued.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::apk::ByteStream;
use crate::nn::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"DXR1";
pub const RESIZED_MAGIC: &[u8; 4] = b"DXRF";

/// Default network input width, 128 * 128.
pub const DEFAULT_WIDTH: usize = 128 * 128;

/// Widths of the image-size ablation: 16², 32², 64², 128², 256².
pub const ABLATION_WIDTHS: [usize; 5] = [16 * 16, 32 * 32, 64 * 64, 128 * 128, 256 * 256];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("byte stream is empty")]
    EmptyStream,
    #[error("target size must be at least 1")]
    ZeroTarget,
    #[error("bad cache magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("cache file holds {found} values, header declares {declared}")]
    Truncated { declared: usize, found: usize },
    #[error("pixel value {0} is outside [0, 255]")]
    OutOfRange(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// 1 x width grey-scale image, one pixel per byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VectorImage {
    pub pixels: Vec<u8>,
}

impl VectorImage {
    pub fn width(&self) -> usize {
        self.pixels.len()
    }
}

/// side x side grey-scale image, row-major, zero padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SquareImage {
    pub side: usize,
    pub pixels: Vec<u8>,
}

/// 1 x width image of real intensities in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedImage {
    pub values: Vec<f64>,
}

impl ResizedImage {
    pub fn width(&self) -> usize {
        self.values.len()
    }
}

/// side x side real-valued image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizedSquare {
    pub side: usize,
    pub values: Vec<f64>,
}

pub fn to_vector_image(stream: &ByteStream) -> Result<VectorImage> {
    if stream.is_empty() {
        return Err(ImageError::EmptyStream);
    }
    Ok(VectorImage { pixels: stream.bytes.clone() })
}

/// Smallest `s` with `s * s >= len`.
pub fn ceil_sqrt(len: usize) -> usize {
    let mut s = (len as f64).sqrt() as usize;
    while s * s < len {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= len {
        s -= 1;
    }
    s
}

pub fn to_square_image(stream: &ByteStream) -> Result<SquareImage> {
    if stream.is_empty() {
        return Err(ImageError::EmptyStream);
    }
    let side = ceil_sqrt(stream.len());
    let mut pixels = stream.bytes.clone();
    pixels.resize(side * side, 0);
    Ok(SquareImage { side, pixels })
}

/// Source sampling positions for one axis: `(lower, upper, fraction)` per
/// output pixel.
fn sample_positions(w_in: usize, w_out: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let scale = w_in as f64 / w_out as f64;
    let max = (w_in - 1) as f64;
    (0..w_out).map(move |j| {
        let x = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(w_in - 1);
        (lo, hi, x - lo as f64)
    })
}

/// Bilinear resize of a 1-D signal.
pub fn resize_signal(src: &[f64], w_out: usize) -> Vec<f64> {
    assert!(!src.is_empty() && w_out > 0, "resize needs non-empty input and output");
    sample_positions(src.len(), w_out)
        .map(|(lo, hi, f)| {
            let a = src[lo];
            a + (src[hi] - a) * f
        })
        .collect()
}

fn resize_bytes(src: &[u8], w_out: usize) -> Vec<f64> {
    sample_positions(src.len(), w_out)
        .map(|(lo, hi, f)| {
            let a = f64::from(src[lo]);
            a + (f64::from(src[hi]) - a) * f
        })
        .collect()
}

pub fn resize_vector(image: &VectorImage, target_width: usize) -> Result<ResizedImage> {
    if image.pixels.is_empty() {
        return Err(ImageError::EmptyStream);
    }
    if target_width == 0 {
        return Err(ImageError::ZeroTarget);
    }
    Ok(ResizedImage { values: resize_bytes(&image.pixels, target_width) })
}

/// Separable bilinear resize: rows first, then columns, both with the same
/// coordinate mapping as [`resize_vector`].
pub fn resize_square(image: &SquareImage, target_side: usize) -> Result<ResizedSquare> {
    if image.side == 0 {
        return Err(ImageError::EmptyStream);
    }
    if target_side == 0 {
        return Err(ImageError::ZeroTarget);
    }
    let rows: Vec<Vec<f64>> = image
        .pixels
        .chunks_exact(image.side)
        .map(|row| resize_bytes(row, target_side))
        .collect();
    let mut values = vec![0.0; target_side * target_side];
    let mut column = vec![0.0; image.side];
    for x in 0..target_side {
        for (y, row) in rows.iter().enumerate() {
            column[y] = row[x];
        }
        for (y, v) in resize_signal(&column, target_side).into_iter().enumerate() {
            values[y * target_side + x] = v;
        }
    }
    Ok(ResizedSquare { side: target_side, values })
}

/// Scale intensities into [0, 1] for the network.
pub fn normalize(image: &ResizedImage) -> Tensor {
    Tensor::from_vec(vec![image.width()], image.values.iter().map(|v| v / 255.0).collect())
}

/// Full image path for one byte stream: vector image, resize, normalise.
pub fn stream_to_input(stream: &ByteStream, width: usize) -> Result<Tensor> {
    let image = to_vector_image(stream)?;
    Ok(normalize(&resize_vector(&image, width)?))
}

fn read_header(r: &mut impl Read, expected: &[u8; 4]) -> Result<usize> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(ImageError::BadMagic { found: magic, expected: *expected });
    }
    let mut width = [0u8; 4];
    r.read_exact(&mut width)?;
    Ok(u32::from_le_bytes(width) as usize)
}

fn width_u32(width: usize) -> io::Result<[u8; 4]> {
    u32::try_from(width)
        .map(u32::to_le_bytes)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "width does not fit in 32 bits"))
}

/// `DXR1`, u32 LE width, then one byte per pixel.
pub fn encode_vector(image: &VectorImage) -> io::Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + image.width());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&width_u32(image.width())?);
    out.extend_from_slice(&image.pixels);
    Ok(out)
}

pub fn decode_vector(mut bytes: &[u8]) -> Result<VectorImage> {
    let width = read_header(&mut bytes, RAW_MAGIC)?;
    if bytes.len() != width {
        return Err(ImageError::Truncated { declared: width, found: bytes.len() });
    }
    Ok(VectorImage { pixels: bytes.to_vec() })
}

/// `DXRF`, u32 LE width, then one f64 LE per pixel.
pub fn encode_resized(image: &ResizedImage) -> io::Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * image.width());
    out.extend_from_slice(RESIZED_MAGIC);
    out.extend_from_slice(&width_u32(image.width())?);
    for v in &image.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_resized(mut bytes: &[u8]) -> Result<ResizedImage> {
    let width = read_header(&mut bytes, RESIZED_MAGIC)?;
    if bytes.len() != width * 8 {
        return Err(ImageError::Truncated { declared: width, found: bytes.len() / 8 });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(ImageError::OutOfRange(bad));
    }
    Ok(ResizedImage { values })
}

pub fn write_vector(path: impl AsRef<Path>, image: &VectorImage) -> Result<()> {
    std::fs::write(path, encode_vector(image)?)?;
    Ok(())
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<VectorImage> {
    decode_vector(&std::fs::read(path)?)
}

pub fn write_resized(path: impl AsRef<Path>, image: &ResizedImage) -> Result<()> {
    std::fs::write(path, encode_resized(image)?)?;
    Ok(())
}

pub fn read_resized(path: impl AsRef<Path>) -> Result<ResizedImage> {
    decode_resized(&std::fs::read(path)?)
}

/// Width declared in a cache file header, without reading the body.
pub fn peek_width(path: impl AsRef<Path>) -> Result<usize> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)?;
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if &magic != RAW_MAGIC && &magic != RESIZED_MAGIC {
        return Err(ImageError::BadMagic { found: magic, expected: *RESIZED_MAGIC });
    }
    Ok(u32::from_le_bytes(header[4..].try_into().unwrap()) as usize)
}

/// Binary PGM (`P5`) with height 1, for eyeballing an image.
pub fn write_pgm(mut w: impl Write, image: &VectorImage) -> io::Result<()> {
    write!(w, "P5\n{} 1\n255\n", image.width())?;
    w.write_all(&image.pixels)
}
