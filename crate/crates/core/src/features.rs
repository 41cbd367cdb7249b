//! Deterministic handcrafted feature extraction.
//!
//! Every channel is a fixed local filter of image intensity, computed with
//! replicate padding at the borders:
//!
//! | channel            | definition                                      |
//! |--------------------|-------------------------------------------------|
//! | intensity          | luma in `[0, 1]`                                |
//! | gradient x / y     | Sobel response divided by 8 (a slope estimate)  |
//! | blur r             | `(2r+1)^2` box mean, one channel per radius     |
//! | local std          | standard deviation over a `(2r+1)^2` window     |
//! | census density     | fraction of the 8 neighbours darker than center |
//!
//! Coarse features use the same channel set on a 4x box-downsampled image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

/// Which channels the extractor produces, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub intensity: bool,
    pub gradients: bool,
    pub blur_radii: Vec<usize>,
    pub local_std_radius: Option<usize>,
    pub census: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            intensity: true,
            gradients: true,
            blur_radii: vec![1, 2, 4],
            local_std_radius: Some(2),
            census: true,
        }
    }
}

impl ExtractorConfig {
    pub fn channel_count(&self) -> usize {
        self.intensity as usize
            + 2 * self.gradients as usize
            + self.blur_radii.len()
            + self.local_std_radius.is_some() as usize
            + self.census as usize
    }
}

/// Row-major, channel-interleaved feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Downsample factor relative to the source image (1 or 4).
    pub scale: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, scale: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            scale,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        let n = self.width * self.channels;
        &self.data[y * n..(y + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self.scale == other.scale
    }
}

/// Quarter-resolution features for the plane sweep.
pub fn extract_coarse_features(img: &ImageBuf, cfg: &ExtractorConfig) -> Result<FeatureMap> {
    if img.width % 4 != 0 || img.height % 4 != 0 {
        return Err(Error::Argument(format!(
            "image {}x{} not divisible by 4; pad before extracting coarse features",
            img.width, img.height
        )));
    }
    let luma = img.luma()?;
    let (w, h) = (img.width / 4, img.height / 4);
    let small = downsample4(&luma, img.width, w, h);
    Ok(extract_channels(&small, w, h, cfg, 4))
}

/// Full-resolution features with several receptive field sizes.
pub fn extract_fine_features(img: &ImageBuf, cfg: &ExtractorConfig) -> Result<FeatureMap> {
    let luma = img.luma()?;
    Ok(extract_channels(&luma, img.width, img.height, cfg, 1))
}

fn downsample4(luma: &[f32], src_w: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in 0..4 {
                let row = &luma[(4 * y + dy) * src_w + 4 * x..];
                acc += row[0] + row[1] + row[2] + row[3];
            }
            out[y * w + x] = acc / 16.0;
        }
    }
    out
}

fn extract_channels(
    luma: &[f32],
    w: usize,
    h: usize,
    cfg: &ExtractorConfig,
    scale: usize,
) -> FeatureMap {
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(cfg.channel_count());
    if cfg.intensity {
        planes.push(luma.to_vec());
    }
    if cfg.gradients {
        let (gx, gy) = sobel(luma, w, h);
        planes.push(gx);
        planes.push(gy);
    }
    for &r in &cfg.blur_radii {
        planes.push(box_mean(luma, w, h, r));
    }
    if let Some(r) = cfg.local_std_radius {
        let mean = box_mean(luma, w, h, r);
        let sq: Vec<f32> = luma.iter().map(|v| v * v).collect();
        let mean_sq = box_mean(&sq, w, h, r);
        planes.push(
            mean.iter()
                .zip(&mean_sq)
                .map(|(m, m2)| (m2 - m * m).max(0.0).sqrt())
                .collect(),
        );
    }
    if cfg.census {
        planes.push(census_density(luma, w, h));
    }

    let c = planes.len();
    let mut fm = FeatureMap::zeros(w, h, c, scale);
    for (ci, plane) in planes.iter().enumerate() {
        for (p, v) in plane.iter().enumerate() {
            fm.data[p * c + ci] = *v;
        }
    }
    fm
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn sobel(luma: &[f32], w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
    let at = |x: isize, y: isize| luma[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0f32; w * h];
    let mut gy = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let sy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = sx / 8.0;
            gy[i] = sy / 8.0;
        }
    }
    (gx, gy)
}

/// Separable box mean with replicate padding.
pub(crate) fn box_mean(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return src.to_vec();
    }
    let ri = r as isize;
    let norm = (2 * r + 1) as f32;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for dx in -ri..=ri {
                acc += row[clamp_idx(x + dx, w)];
            }
            tmp[y * w + x as usize] = acc / norm;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in -ri..=ri {
                acc += tmp[clamp_idx(y + dy, h) * w + x];
            }
            out[y as usize * w + x] = acc / norm;
        }
    }
    out
}

fn census_density(luma: &[f32], w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| luma[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = at(x, y);
            let mut darker = 0u32;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy) != (0, 0) && at(x + dx, y + dy) < center {
                        darker += 1;
                    }
                }
            }
            out[y as usize * w + x as usize] = darker as f32 / 8.0;
        }
    }
    out
}
