//! Debug dumps: raw float volumes in a small `DDLV` container and 8-bit
//! heatmaps.
//!
//! `DDLV` layout (little-endian): magic `b"DDLV"`, four u32 dims `D H W C`,
//! then `D*H*W*C` f32 values with C fastest, then W, H, D.

use std::path::Path;

use crate::cost_volume::{CostVolume, ScoreVolume};
use crate::error::{Error, Result};
use crate::image::write_pgm_bytes;

pub const VOLUME_MAGIC: &[u8; 4] = b"DDLV";

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[D, H, W, C]`
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Argument(format!("volume {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(Volume { dims, data })
    }

    /// A 2-D map as a `1 x H x W x 1` volume.
    pub fn from_map(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Volume::new([1, height, width, 1], values.iter().map(|&v| v as f32).collect())
    }

    pub fn from_scores(vol: &ScoreVolume) -> Self {
        Volume {
            dims: [vol.planes, vol.height, vol.width, 1],
            data: vol.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_cost_volume(vol: &CostVolume) -> Self {
        Volume {
            dims: [vol.planes, vol.height, vol.width, vol.channels],
            data: vol.data.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::format(bytes.len(), "truncated volume header"));
        }
        if &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::format(0, "not a DDLV volume (bad magic)"));
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            *d = u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        }
        let n: usize = dims.iter().product();
        let payload = &bytes[20..];
        if payload.len() != 4 * n {
            return Err(Error::format(
                20 + payload.len().min(4 * n),
                format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Volume { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Min-max normalized grayscale PGM of `values`. Non-finite values map to 0.
pub fn write_heatmap(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Argument("heatmap size mismatch".into()));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    write_pgm_bytes(path.as_ref(), &bytes, width, height)
}

/// One heatmap per plane, named `{stem}_{i:03}.pgm` in `dir`.
pub fn write_score_slices(dir: impl AsRef<Path>, stem: &str, vol: &ScoreVolume) -> Result<()> {
    let dir = dir.as_ref();
    for i in 0..vol.planes {
        write_heatmap(dir.join(format!("{stem}_{i:03}.pgm")), vol.width, vol.height, vol.plane(i))?;
    }
    Ok(())
}
