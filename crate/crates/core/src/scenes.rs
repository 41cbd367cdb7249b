//! Synthetic rectified stereo scenes with exact ground truth.
//!
//! A scene is a stack of planar surfaces. Each surface has inverse depth
//! linear in left-image coordinates,
//!
//! ```text
//! 1/Z(x, y) = 1/depth + slope_x * (x - cx) + slope_y * (y - cy)
//! ```
//!
//! with `(cx, cy)` the center of its rectangle, so `depth` is the depth at
//! the center and `slope_x = slope_y = 0` gives a fronto-parallel plane. The
//! texture is value noise painted in left-image coordinates. Both views are
//! rendered with a nearest-surface z-test; a right pixel `x_r` sees the point
//! of a surface at `x_l = (x_r + fB * b) / (1 - fB * slope_x)` where `b` is the
//! row-constant part of the inverse depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost_volume::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::StereoRig;
use crate::image::ImageBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    /// Depth at the rectangle center, meters.
    pub depth: f64,
    /// Left-image rectangle `[x0, y0, x1, y1)`; `None` covers everything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[f64; 4]>,
    #[serde(default)]
    pub slope_x: f64,
    #[serde(default)]
    pub slope_y: f64,
    #[serde(default)]
    pub texture_seed: u64,
    /// Lattice frequency of the base noise octave, cycles per pixel.
    #[serde(default = "default_frequency")]
    pub texture_frequency: f64,
}

fn default_frequency() -> f64 {
    0.15
}

impl Surface {
    pub fn fronto_parallel(depth: f64, rect: Option<[f64; 4]>, texture_seed: u64) -> Self {
        Surface {
            depth,
            rect,
            slope_x: 0.0,
            slope_y: 0.0,
            texture_seed,
            texture_frequency: default_frequency(),
        }
    }

    fn center(&self, rig: &StereoRig) -> (f64, f64) {
        match self.rect {
            Some([x0, y0, x1, y1]) => (0.5 * (x0 + x1), 0.5 * (y0 + y1)),
            None => (0.5 * (rig.width_px as f64 - 1.0), 0.5 * (rig.height_px as f64 - 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rig: StereoRig,
    pub background: Surface,
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Surface>,
    #[serde(default)]
    pub noise_sigma: f64,
}

/// Rig section of a scene file: a preset name or explicit calibration.
#[derive(Debug, Deserialize)]
struct RigSection {
    preset: Option<String>,
    baseline_m: Option<f64>,
    focal_px: Option<f64>,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct SceneFile {
    rig: RigSection,
    background: Surface,
    #[serde(default)]
    primitive: Vec<Surface>,
    #[serde(default)]
    noise_sigma: f64,
}

impl SceneSpec {
    /// Parses a scene file:
    ///
    /// ```toml
    /// noise_sigma = 0.0
    /// [rig]
    /// preset = "sceneflow"
    /// width = 256
    /// height = 128
    /// [background]
    /// depth = 60.0
    /// [[primitive]]
    /// depth = 12.0
    /// rect = [40.0, 30.0, 120.0, 90.0]
    /// texture_seed = 7
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: SceneFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let rig = match (f.rig.preset, f.rig.baseline_m, f.rig.focal_px) {
            (Some(p), None, None) => StereoRig::preset(&p, f.rig.width, f.rig.height)?,
            (None, Some(b), Some(fx)) => StereoRig::new(b, fx, f.rig.width, f.rig.height)?,
            _ => {
                return Err(Error::Config(
                    "rig needs either 'preset' or both 'baseline_m' and 'focal_px'".into(),
                ))
            }
        };
        let spec = SceneSpec {
            rig,
            background: f.background,
            primitives: f.primitive,
            noise_sigma: f.noise_sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fb = self.rig.fb();
        let (w, h) = (self.rig.width_px as f64, self.rig.height_px as f64);
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Argument(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.background.rect.is_some() {
            return Err(Error::Argument("the background covers the whole frame; remove its rect".into()));
        }
        for (k, s) in std::iter::once(&self.background).chain(&self.primitives).enumerate() {
            if !(s.depth > 0.0 && s.depth <= self.background_far_limit()) {
                return Err(Error::Argument(format!(
                    "surface {k}: depth {} outside (0, background depth]",
                    s.depth
                )));
            }
            if !(s.texture_frequency > 0.0) {
                return Err(Error::Argument(format!("surface {k}: texture frequency must be > 0")));
            }
            if 1.0 - fb * s.slope_x <= 0.0 {
                return Err(Error::Argument(format!("surface {k}: slope_x too steep to be seen from the right camera")));
            }
            let (x0, y0, x1, y1) = match s.rect {
                Some([x0, y0, x1, y1]) => {
                    if !(0.0 <= x0 && x0 < x1 && x1 <= w && 0.0 <= y0 && y0 < y1 && y1 <= h) {
                        return Err(Error::Argument(format!("surface {k}: rect outside the image")));
                    }
                    (x0, y0, x1, y1)
                }
                None => (0.0, 0.0, 1.5 * w, h),
            };
            let geo = SurfaceGeometry::new(s, &self.rig);
            for (cx, cy) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                if geo.inverse_depth(cx, cy) <= 0.0 {
                    return Err(Error::Argument(format!("surface {k}: depth not positive over its extent")));
                }
            }
        }
        Ok(())
    }

    /// Largest allowed primitive depth: the far end of the background.
    fn background_far_limit(&self) -> f64 {
        let geo = SurfaceGeometry::new(&self.background, &self.rig);
        let (w, h) = (self.rig.width_px as f64 - 1.0, self.rig.height_px as f64 - 1.0);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(x, y)| 1.0 / geo.inverse_depth(x, y))
            .fold(self.background.depth, f64::max)
    }
}

/// Rendered stereo pair with left-view ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub left: ImageBuf,
    pub right: ImageBuf,
    pub depth: DepthMap,
    /// Left pixels hidden from the right camera by a nearer surface.
    pub occluded: Vec<bool>,
    /// Left pixels whose match falls outside the right image.
    pub out_of_frame: Vec<bool>,
    /// Index of the visible surface per left pixel (0 = background).
    pub surface: Vec<u16>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn height(&self) -> usize {
        self.left.height
    }

    /// Pixels with a visible match in the right image.
    pub fn matchable(&self) -> Vec<bool> {
        (0..self.occluded.len())
            .map(|p| self.depth.valid[p] && !self.occluded[p] && !self.out_of_frame[p])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct SurfaceGeometry {
    inv0: f64,
    sx: f64,
    sy: f64,
    cx: f64,
    cy: f64,
    rect: Option<[f64; 4]>,
    fb: f64,
}

impl SurfaceGeometry {
    fn new(s: &Surface, rig: &StereoRig) -> Self {
        let (cx, cy) = s.center(rig);
        SurfaceGeometry {
            inv0: 1.0 / s.depth,
            sx: s.slope_x,
            sy: s.slope_y,
            cx,
            cy,
            rect: s.rect,
            fb: rig.fb(),
        }
    }

    #[inline]
    fn inverse_depth(&self, x: f64, y: f64) -> f64 {
        self.inv0 + self.sx * (x - self.cx) + self.sy * (y - self.cy)
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.rect {
            Some([x0, y0, x1, y1]) => x0 <= x && x < x1 && y0 <= y && y < y1,
            None => true,
        }
    }

    /// `contains` for a column recovered by [`Self::left_column`], which can
    /// land a rounding error left of the closed edge `x0` it should sit on.
    #[inline]
    fn contains_solved(&self, x: f64, y: f64) -> bool {
        self.contains(x + 1e-9 * x.abs().max(1.0), y)
    }

    /// Left-image column of the surface point seen at right column `xr`.
    #[inline]
    fn left_column(&self, xr: f64, y: f64) -> f64 {
        let b = self.inv0 - self.sx * self.cx + self.sy * (y - self.cy);
        (xr + self.fb * b) / (1.0 - self.fb * self.sx)
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ mix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (ix, iy) = (fu as i64, fv as i64);
    let (tx, ty) = (fade(u - fu), fade(v - fv));
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Two-octave value noise in `[0.1, 0.9]`.
pub fn texture(seed: u64, frequency: f64, x: f64, y: f64) -> f64 {
    let base = value_noise(seed, x * frequency, y * frequency);
    let detail = value_noise(mix64(seed), 2.0 * x * frequency + 0.37, 2.0 * y * frequency + 0.71);
    0.1 + 0.8 * (0.65 * base + 0.35 * detail)
}

/// Geometry and radiance of a scene, queryable at continuous positions.
pub struct SceneRenderer {
    rig: StereoRig,
    surfaces: Vec<SurfaceGeometry>,
    textures: Vec<(u64, f64)>,
}

impl SceneRenderer {
    pub fn new(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let all: Vec<&Surface> = std::iter::once(&spec.background).chain(&spec.primitives).collect();
        Ok(SceneRenderer {
            rig: spec.rig,
            surfaces: all.iter().map(|s| SurfaceGeometry::new(s, &spec.rig)).collect(),
            textures: all
                .iter()
                .map(|s| (mix64(seed ^ mix64(s.texture_seed)), s.texture_frequency))
                .collect(),
        })
    }

    /// Visible surface and inverse depth at a left-image position.
    pub fn left_hit(&self, x: f64, y: f64) -> (usize, f64) {
        let mut best = (0, self.surfaces[0].inverse_depth(x, y));
        for (k, s) in self.surfaces.iter().enumerate().skip(1) {
            if s.contains(x, y) {
                let inv = s.inverse_depth(x, y);
                if inv > best.1 {
                    best = (k, inv);
                }
            }
        }
        best
    }

    /// Visible surface, its inverse depth and left-image column at a right-image position.
    pub fn right_hit(&self, xr: f64, y: f64) -> (usize, f64, f64) {
        let mut best = (usize::MAX, f64::NEG_INFINITY, 0.0);
        for (k, s) in self.surfaces.iter().enumerate() {
            let xl = s.left_column(xr, y);
            if k == 0 || s.contains_solved(xl, y) {
                let inv = s.inverse_depth(xl, y);
                if inv > best.1 {
                    best = (k, inv, xl);
                }
            }
        }
        best
    }

    fn radiance(&self, k: usize, x: f64, y: f64) -> f64 {
        let (seed, freq) = self.textures[k];
        texture(seed, freq, x, y)
    }

    pub fn left_radiance(&self, x: f64, y: f64) -> f64 {
        let (k, _) = self.left_hit(x, y);
        self.radiance(k, x, y)
    }

    /// Noiseless right-image radiance at any column.
    pub fn right_radiance(&self, xr: f64, y: f64) -> f64 {
        let (k, _, xl) = self.right_hit(xr, y);
        self.radiance(k, xl, y)
    }

    pub fn render(&self, noise_sigma: f64, seed: u64) -> Result<Sample> {
        let (w, h) = (self.rig.width_px, self.rig.height_px);
        let fb = self.rig.fb();
        let n = w * h;
        let mut left = vec![0.0f32; n];
        let mut right = vec![0.0f32; n];
        let mut depth = vec![0.0f64; n];
        let mut occluded = vec![false; n];
        let mut out_of_frame = vec![false; n];
        let mut surface = vec![0u16; n];
        for y in 0..h {
            let fy = y as f64;
            for x in 0..w {
                let p = y * w + x;
                let fx = x as f64;
                let (k, inv) = self.left_hit(fx, fy);
                left[p] = self.radiance(k, fx, fy) as f32;
                depth[p] = 1.0 / inv;
                surface[p] = k as u16;
                let xr = fx - fb * inv;
                out_of_frame[p] = !(xr >= 0.0 && xr <= (w - 1) as f64);
                let (kr, inv_r, _) = self.right_hit(xr, fy);
                occluded[p] = kr != k && inv_r > inv * (1.0 + 1e-9);
                right[p] = self.right_radiance(fx, fy) as f32;
            }
        }
        if noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x6E6F_6973_65));
            let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
            for v in left.iter_mut().chain(right.iter_mut()) {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        Ok(Sample {
            left: ImageBuf::new(w, h, 1, left)?,
            right: ImageBuf::new(w, h, 1, right)?,
            depth: DepthMap::new(w, h, depth, vec![true; n])?,
            occluded,
            out_of_frame,
            surface,
        })
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    SceneRenderer::new(spec, seed)?.render(spec.noise_sigma, seed)
}

/// Random scene: a slanted far background spanning roughly 30-79 m across
/// the frame, with two to four nearer textured planes.
pub fn random_scene_spec(rig: &StereoRig, noise_sigma: f64, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rig.width_px as f64, rig.height_px as f64);
    let near = rng.random_range(28.0..34.0);
    let far = rng.random_range(70.0..79.0);
    let (inv_l, inv_r) = if rng.random_bool(0.5) { (1.0 / near, 1.0 / far) } else { (1.0 / far, 1.0 / near) };
    let slope_x = (inv_r - inv_l) / (w - 1.0);
    let background = Surface {
        depth: 2.0 / (inv_l + inv_r),
        rect: None,
        slope_x,
        slope_y: 0.0,
        texture_seed: rng.random(),
        texture_frequency: rng.random_range(0.12..0.2),
    };
    let count = rng.random_range(2..=4);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let depth = rng.random_range(3.0..45.0);
        let rw = rng.random_range(0.15..0.45) * w;
        let rh = rng.random_range(0.25..0.7) * h;
        let x0 = rng.random_range(0.0..w - rw).floor();
        let y0 = rng.random_range(0.0..h - rh).floor();
        let inv = 1.0 / depth;
        let slanted = rng.random_bool(0.4);
        primitives.push(Surface {
            depth,
            rect: Some([x0, y0, (x0 + rw).floor(), (y0 + rh).floor()]),
            slope_x: if slanted { rng.random_range(-0.5..0.5) * inv / rw } else { 0.0 },
            slope_y: if slanted { rng.random_range(-0.3..0.3) * inv / rh } else { 0.0 },
            texture_seed: rng.random(),
            texture_frequency: rng.random_range(0.12..0.25),
        });
    }
    SceneSpec {
        rig: *rig,
        background,
        primitives,
        noise_sigma,
    }
}

/// Scene of fronto-parallel planes at whole-meter depths within `[near, far]`.
pub fn fronto_parallel_scene_spec(rig: &StereoRig, near: u32, far: u32, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rig.width_px as f64, rig.height_px as f64);
    let background = Surface::fronto_parallel(far as f64, None, rng.random());
    let count = rng.random_range(2..=3);
    let primitives = (0..count)
        .map(|_| {
            let depth = rng.random_range(near..far) as f64;
            let rw = rng.random_range(0.2..0.4) * w;
            let rh = rng.random_range(0.3..0.6) * h;
            let x0 = rng.random_range(0.0..w - rw).floor();
            let y0 = rng.random_range(0.0..h - rh).floor();
            Surface::fronto_parallel(depth, Some([x0, y0, (x0 + rw).floor(), (y0 + rh).floor()]), rng.random())
        })
        .collect();
    SceneSpec {
        rig: *rig,
        background,
        primitives,
        noise_sigma: 0.0,
    }
}

/// Converts disparities (pixels) to depth; zero disparity marks an invalid pixel.
pub fn disparity_map_to_depth_map(disparity: &[f64], width: usize, height: usize, rig: &StereoRig) -> Result<DepthMap> {
    if disparity.len() != width * height {
        return Err(Error::Argument("disparity map size mismatch".into()));
    }
    let mut depth = vec![0.0; disparity.len()];
    let mut valid = vec![false; disparity.len()];
    for (p, &d) in disparity.iter().enumerate() {
        if d < 0.0 || !d.is_finite() {
            return Err(Error::Domain(format!("disparity {d} at pixel {p} is negative or not finite")));
        }
        if d > 0.0 {
            depth[p] = rig.fb() / d;
            valid[p] = true;
        }
    }
    DepthMap::new(width, height, depth, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> StereoRig {
        StereoRig::sceneflow(64, 16)
    }

    #[test]
    fn single_plane_fills_the_frame() {
        let spec = SceneSpec {
            rig: rig(),
            background: Surface::fronto_parallel(30.0, None, 1),
            primitives: vec![],
            noise_sigma: 0.0,
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert!(s.depth.depth.iter().all(|&d| (d - 30.0).abs() < 1e-12));
        assert!(!s.occluded.iter().any(|&o| o));
    }

    #[test]
    fn occlusion_band_width_equals_disparity_difference() {
        // fB = 283.5: 28.35 m -> 10 px, 56.7 m -> 5 px.
        let spec = SceneSpec {
            rig: rig(),
            background: Surface::fronto_parallel(56.7, None, 1),
            primitives: vec![Surface::fronto_parallel(28.35, Some([30.0, 4.0, 50.0, 12.0]), 2)],
            noise_sigma: 0.0,
        };
        let s = generate_scene(&spec, 3).unwrap();
        for y in 0..16 {
            let band: Vec<usize> = (0..64).filter(|&x| s.occluded[y * 64 + x]).collect();
            if (4..12).contains(&y) {
                assert_eq!(band, (25..30).collect::<Vec<_>>(), "row {y}");
            } else {
                assert!(band.is_empty());
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = random_scene_spec(&StereoRig::sceneflow(64, 32), 0.01, 5);
        let a = generate_scene(&spec, 9).unwrap();
        let b = generate_scene(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 10).unwrap();
        assert_ne!(a.left, c.left);
    }

    #[test]
    fn random_specs_are_valid_and_span_far_bins() {
        let rig = StereoRig::sceneflow(256, 128);
        for seed in 0..20 {
            let spec = random_scene_spec(&rig, 0.0, seed);
            spec.validate().unwrap();
            let s = generate_scene(&spec, seed).unwrap();
            let max = s.depth.depth.iter().cloned().fold(0.0, f64::max);
            assert!(max > 65.0 && max < 80.0, "seed {seed}: {max}");
        }
    }

    #[test]
    fn disparity_conversion() {
        let r = StereoRig::sceneflow(2, 1);
        let d = disparity_map_to_depth_map(&[5.67, 0.0], 2, 1, &r).unwrap();
        assert!((d.depth[0] - 50.0).abs() < 1e-9);
        assert!(!d.valid[1]);
        assert!(disparity_map_to_depth_map(&[-1.0, 0.0], 2, 1, &r).is_err());
    }

    #[test]
    fn scene_file_parsing() {
        let text = r#"
noise_sigma = 0.0
[rig]
preset = "sceneflow"
width = 64
height = 16
[background]
depth = 60.0
[[primitive]]
depth = 12.0
rect = [4.0, 2.0, 30.0, 12.0]
texture_seed = 7
"#;
        let spec = SceneSpec::from_toml(text).unwrap();
        assert_eq!(spec.primitives.len(), 1);
        assert_eq!(spec.rig, StereoRig::sceneflow(64, 16));
        assert!(SceneSpec::from_toml(&text.replace("12.0]", "99.0]")).is_err());
        assert!(SceneSpec::from_toml(&text.replace("depth = 12.0", "depth = 70.0")).is_err());
    }
}
