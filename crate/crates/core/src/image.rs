//! Image container and 8-bit PGM/PPM I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument("image dimensions must be >= 1".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite sample at index {bad}")));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ImageBuf {
            width,
            height,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single-channel intensity. RGB is reduced with Rec. 601 luma weights.
    pub fn luma(&self) -> Result<Vec<f32>> {
        match self.channels {
            1 => Ok(self.data.clone()),
            3 => Ok(self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect()),
            c => Err(Error::Argument(format!("expected 1 or 3 channels, got {c}"))),
        }
    }

    /// Reads a binary PGM (P5) or PPM (P6) file with 8-bit samples.
    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = PnmDecoder::new(BufReader::new(file))?;
        let img = DynamicImage::from_decoder(decoder)?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, bytes) = match img {
            DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
            other => {
                return Err(Error::Argument(format!(
                    "{}: unsupported pixel type {:?} (need 8-bit gray or RGB)",
                    path.display(),
                    other.color()
                )))
            }
        };
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        ImageBuf::new(width, height, channels, data)
    }

    /// Writes a binary PGM/PPM, quantizing `[0, 1]` to 8 bits with rounding.
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let (subtype, color) = match self.channels {
            1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
            3 => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
            c => return Err(Error::Argument(format!("cannot write {c}-channel image"))),
        };
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        write_netpbm(path.as_ref(), &bytes, self.width, self.height, subtype, color)
    }
}

#[inline]
pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn write_pgm_bytes(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<()> {
    write_netpbm(
        path,
        bytes,
        width,
        height,
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

fn write_netpbm(
    path: &Path,
    bytes: &[u8],
    width: usize,
    height: usize,
    subtype: PnmSubtype,
    color: ExtendedColorType,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(subtype);
    encoder.write_image(bytes, width as u32, height as u32, color)?;
    Ok(())
}
