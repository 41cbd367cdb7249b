//! Coarse depth estimation: plane-sweep cost volume, aggregation into matching
//! scores, upsampling, softmax normalisation and soft-argmax regression.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{DepthPlanes, DisparityLevels, StereoRig};
use crate::sampling::{in_row, linear_row};

/// Logit assigned to hypotheses whose candidate falls outside the image.
pub const INVALID_LOGIT: f64 = -1e4;

/// Hypothesis set swept by the cost volume.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Fronto-parallel planes uniform in depth.
    Depth(DepthPlanes),
    /// Levels uniform in disparity (pixels).
    Disparity(DisparityLevels),
}

impl Sweep {
    pub fn count(&self) -> usize {
        match self {
            Sweep::Depth(p) => p.count,
            Sweep::Disparity(l) => l.count,
        }
    }

    /// Full-resolution disparity of every hypothesis.
    pub fn disparities(&self, rig: &StereoRig) -> Vec<f64> {
        match self {
            Sweep::Depth(p) => p.planes.iter().map(|d| rig.fb() / d).collect(),
            Sweep::Disparity(l) => l.levels.clone(),
        }
    }

    /// Metric depth of a fractional hypothesis index, plus `d depth / d index`.
    pub fn depth_of_index(&self, rig: &StereoRig, index: f64) -> (f64, f64) {
        match self {
            Sweep::Depth(p) => (p.depth_at(index), p.step()),
            Sweep::Disparity(l) => {
                let k = l.disparity_at(index);
                let depth = rig.fb() / k;
                (depth, -rig.fb() / (k * k) * l.step())
            }
        }
    }
}

/// Concatenated left/right features per hypothesis, at quarter resolution.
///
/// Layout: `data[((i * height + y) * width + x) * channels + c]`, where the
/// first half of the channels are left features and the second half right
/// features sampled at the candidate column.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    #[inline]
    pub fn cell(&self, i: usize, y: usize, x: usize) -> &[f32] {
        let o = ((i * self.height + y) * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, y: usize, x: usize) -> bool {
        self.valid[(i * self.height + y) * self.width + x]
    }
}

/// A `planes x height x width` volume of scores: logits before
/// normalisation, probabilities after.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScoreVolume {
    pub fn zeros(planes: usize, height: usize, width: usize) -> Self {
        ScoreVolume {
            planes,
            height,
            width,
            data: vec![0.0; planes * height * width],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, y: usize, x: usize) -> f64 {
        self.data[(i * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn plane(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }
}

/// Dense depth in meters with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || valid.len() != width * height {
            return Err(Error::Argument(format!(
                "depth map buffers do not match {width}x{height}"
            )));
        }
        Ok(DepthMap {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub fn build_depth_cost_volume(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    rig: &StereoRig,
    planes: &DepthPlanes,
) -> Result<CostVolume> {
    let disparities: Vec<f64> = planes.planes.iter().map(|d| rig.fb() / d).collect();
    build_cost_volume(f_l, f_r, &disparities)
}

/// Baseline volume sampled at uniformly spaced disparity levels (full-resolution pixels).
pub fn build_disparity_cost_volume(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    levels: &DisparityLevels,
) -> Result<CostVolume> {
    build_cost_volume(f_l, f_r, &levels.levels)
}

pub fn build_sweep_cost_volume(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    rig: &StereoRig,
    sweep: &Sweep,
) -> Result<CostVolume> {
    build_cost_volume(f_l, f_r, &sweep.disparities(rig))
}

/// Builds the volume for arbitrary full-resolution disparities. Candidate
/// columns are `x - disparity / scale` on the feature grid.
pub fn build_cost_volume(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    disparities: &[f64],
) -> Result<CostVolume> {
    if !f_l.same_shape(f_r) {
        return Err(Error::Argument(format!(
            "feature maps differ: {}x{}x{} (scale {}) vs {}x{}x{} (scale {})",
            f_l.width, f_l.height, f_l.channels, f_l.scale, f_r.width, f_r.height, f_r.channels, f_r.scale
        )));
    }
    let (w, h, c) = (f_l.width, f_l.height, f_l.channels);
    let cc = 2 * c;
    let d = disparities.len();
    let scale = f_l.scale as f64;
    let mut data = vec![0.0f32; d * h * w * cc];
    let mut valid = vec![false; d * h * w];

    data.par_chunks_mut(h * w * cc)
        .zip(valid.par_chunks_mut(h * w))
        .enumerate()
        .for_each(|(i, (plane, vplane))| {
            let shift = disparities[i] / scale;
            let mut buf = vec![0.0f32; c];
            for y in 0..h {
                let rrow = f_r.row(y);
                for x in 0..w {
                    let o = (y * w + x) * cc;
                    plane[o..o + c].copy_from_slice(f_l.pixel(x, y));
                    let pos = x as f64 - shift;
                    if in_row(pos, w) {
                        linear_row(rrow, w, c, pos, &mut buf);
                        plane[o + c..o + cc].copy_from_slice(&buf);
                        vplane[y * w + x] = true;
                    }
                }
            }
        });

    Ok(CostVolume {
        planes: d,
        height: h,
        width: w,
        channels: cc,
        data,
        valid,
    })
}

/// Number of aggregation weights for a volume with `channels` concatenated channels.
pub fn aggregation_param_len(volume_channels: usize) -> usize {
    volume_channels + 1
}

/// Per-cell matching cost `sum_c a_c |l_c - r_c| + q_c (l_c - r_c)^2`, where
/// `weights = [a_0..a_{C-1}, q_0..q_{C-1}, bias]`.
#[inline]
pub(crate) fn cell_cost(cell: &[f32], weights: &[f64]) -> f64 {
    let c = cell.len() / 2;
    let mut acc = 0.0;
    for k in 0..c {
        let diff = (cell[k] - cell[c + k]) as f64;
        acc += weights[k] * diff.abs() + weights[c + k] * diff * diff;
    }
    acc
}

/// Reduces the feature volume to matching logits: the weighted feature
/// distance of each cell, box-averaged over valid cells within `radius` on
/// the same hypothesis slice, negated and offset by the bias.
pub fn aggregate_costs(vol: &CostVolume, weights: &[f64], radius: usize) -> Result<ScoreVolume> {
    if weights.len() != aggregation_param_len(vol.channels) {
        return Err(Error::Argument(format!(
            "expected {} aggregation weights, got {}",
            aggregation_param_len(vol.channels),
            weights.len()
        )));
    }
    let (h, w) = (vol.height, vol.width);
    let bias = weights[vol.channels];
    let mut out = ScoreVolume::zeros(vol.planes, h, w);
    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(i, logits)| {
            let mut cost = vec![0.0f64; h * w];
            let mut ones = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    if vol.is_valid(i, y, x) {
                        cost[y * w + x] = cell_cost(vol.cell(i, y, x), weights);
                        ones[y * w + x] = 1.0;
                    }
                }
            }
            let sum = box_sum(&cost, w, h, radius);
            let count = box_sum(&ones, w, h, radius);
            for p in 0..h * w {
                logits[p] = if ones[p] > 0.0 {
                    -sum[p] / count[p] + bias
                } else {
                    INVALID_LOGIT
                };
            }
        });
    Ok(out)
}

/// Window sum over `[x-r, x+r] x [y-r, y+r]` clipped to the image.
pub(crate) fn box_sum(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = row[lo..=hi].iter().sum();
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear interpolation taps for mapping `dst` samples onto `src` samples
/// so that `dst = factor * src` lands exactly on source grid points; samples
/// past the last source point replicate it.
pub(crate) fn upsample_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|d| {
            let s = d as f64 / factor as f64;
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Spatial 4x upsampling of every hypothesis slice. The hypothesis axis is
/// left unchanged, so trilinear interpolation reduces to bilinear per slice.
pub fn upsample_trilinear(vol: &ScoreVolume) -> ScoreVolume {
    upsample_by(vol, 4)
}

pub fn upsample_by(vol: &ScoreVolume, factor: usize) -> ScoreVolume {
    let (h, w) = (vol.height, vol.width);
    let (hh, ww) = (h * factor, w * factor);
    let tx = upsample_taps(w, factor);
    let ty = upsample_taps(h, factor);
    let mut out = ScoreVolume::zeros(vol.planes, hh, ww);
    out.data
        .par_chunks_mut(hh * ww)
        .enumerate()
        .for_each(|(i, dst)| {
            let src = vol.plane(i);
            for (yy, &(y0, y1, sy)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, sx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - sx) + src[y0 * w + x1] * sx;
                    let bot = src[y1 * w + x0] * (1.0 - sx) + src[y1 * w + x1] * sx;
                    dst[yy * ww + xx] = top * (1.0 - sy) + bot * sy;
                }
            }
        });
    out
}

/// Softmax over the hypothesis axis of every pixel (max-subtracted).
pub fn normalize_softmax(vol: &ScoreVolume) -> ScoreVolume {
    let n = vol.height * vol.width;
    let d = vol.planes;
    let mut out = ScoreVolume::zeros(d, vol.height, vol.width);
    let probs: Vec<Vec<f64>> = (0..vol.height)
        .into_par_iter()
        .map(|y| {
            let w = vol.width;
            let mut row = vec![0.0f64; w * d];
            for x in 0..w {
                let p = y * w + x;
                let logits = &mut row[x * d..(x + 1) * d];
                let mut m = f64::NEG_INFINITY;
                for (i, l) in logits.iter_mut().enumerate() {
                    *l = vol.data[i * n + p];
                    m = m.max(*l);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - m).exp();
                    z += *l;
                }
                for l in logits.iter_mut() {
                    *l /= z;
                }
            }
            row
        })
        .collect();
    for (y, row) in probs.iter().enumerate() {
        for x in 0..vol.width {
            let p = y * vol.width + x;
            for i in 0..d {
                out.data[i * n + p] = row[x * d + i];
            }
        }
    }
    out
}

/// Expected hypothesis index `sum_i i * P(i)` per pixel.
pub fn expected_index(prob: &ScoreVolume) -> Vec<f64> {
    let n = prob.height * prob.width;
    let mut idx = vec![0.0f64; n];
    for i in 0..prob.planes {
        let plane = prob.plane(i);
        let fi = i as f64;
        for p in 0..n {
            idx[p] += fi * plane[p];
        }
    }
    idx
}

/// Soft-argmax regression of metric depth from a normalised distribution over
/// depth planes: the expected plane index, mapped to meters with the plane spacing.
pub fn soft_argmax_depth(prob: &ScoreVolume, planes: &DepthPlanes) -> Result<DepthMap> {
    if prob.planes != planes.count {
        return Err(Error::Argument(format!(
            "score volume has {} planes, sweep has {}",
            prob.planes, planes.count
        )));
    }
    let depth = expected_index(prob)
        .into_iter()
        .map(|i| planes.depth_at(i))
        .collect();
    DepthMap::new(
        prob.width,
        prob.height,
        depth,
        vec![true; prob.width * prob.height],
    )
}

/// Full-resolution validity of the coarse estimate: a pixel is valid when the
/// quarter-resolution cell covering it has at least one in-image hypothesis.
pub fn coarse_validity(vol: &CostVolume, factor: usize) -> Vec<bool> {
    let (h, w) = (vol.height, vol.width);
    let (hh, ww) = (h * factor, w * factor);
    let mut cell_valid = vec![false; h * w];
    for i in 0..vol.planes {
        for p in 0..h * w {
            cell_valid[p] |= vol.valid[i * h * w + p];
        }
    }
    let mut out = vec![false; hh * ww];
    for yy in 0..hh {
        for xx in 0..ww {
            out[yy * ww + xx] = cell_valid[(yy / factor) * w + xx / factor];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_depth_planes;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fm = FeatureMap::zeros(w, h, c, 4);
        fm.data.iter_mut().for_each(|v| *v = rng.random::<f32>());
        fm
    }

    #[test]
    fn constant_right_features_are_concatenated() {
        let fl = random_features(8, 4, 2, 1);
        let mut fr = FeatureMap::zeros(8, 4, 2, 4);
        fr.data.iter_mut().for_each(|v| *v = 0.5);
        let vol = build_cost_volume(&fl, &fr, &[4.0, 12.0]).unwrap();
        assert_eq!(vol.channels, 4);
        // shift of 1 quarter-res column
        assert!(!vol.is_valid(0, 0, 0));
        assert!(vol.is_valid(0, 2, 3));
        let cell = vol.cell(0, 2, 3);
        assert_eq!(&cell[..2], fl.pixel(3, 2));
        assert_eq!(&cell[2..], &[0.5, 0.5]);
        // shift of 3 columns: columns 0..3 invalid, features zeroed
        for x in 0..3 {
            assert!(!vol.is_valid(1, 1, x));
            assert_eq!(&vol.cell(1, 1, x)[2..], &[0.0, 0.0]);
        }
        assert!(vol.is_valid(1, 1, 3));
    }

    #[test]
    fn zero_disparity_samples_same_column_and_far_levels_are_invalid() {
        let fl = random_features(6, 3, 3, 2);
        let fr = random_features(6, 3, 3, 3);
        let levels = DisparityLevels::new(0.0, 200.0, 2).unwrap();
        let vol = build_disparity_cost_volume(&fl, &fr, &levels).unwrap();
        for y in 0..3 {
            for x in 0..6 {
                assert!(vol.is_valid(0, y, x));
                assert_eq!(&vol.cell(0, y, x)[3..], fr.pixel(x, y));
                // level 100 px = 25 quarter-res columns, wider than the image
                assert!(!vol.is_valid(1, y, x));
            }
        }
    }

    #[test]
    fn subpixel_candidates_interpolate_linearly() {
        let fl = FeatureMap::zeros(4, 1, 1, 4);
        let mut fr = FeatureMap::zeros(4, 1, 1, 4);
        fr.data = vec![0.0, 1.0, 3.0, 7.0];
        let vol = build_cost_volume(&fl, &fr, &[2.0]).unwrap(); // half a column
        assert_eq!(vol.cell(0, 0, 3)[1], 5.0);
        assert_eq!(vol.cell(0, 0, 1)[1], 0.5);
        assert!(!vol.is_valid(0, 0, 0));
    }

    #[test]
    fn depth_and_disparity_volumes_agree_on_matching_levels() {
        let rig = StereoRig::sceneflow(64, 16);
        let planes = sample_depth_planes(20.0, 60.0, 8).unwrap();
        let disp: Vec<f64> = planes.planes.iter().map(|d| rig.fb() / d).collect();
        let levels = DisparityLevels {
            k_min: disp[0],
            k_max: disp[7],
            count: 8,
            levels: disp,
        };
        let fl = random_features(16, 4, 3, 4);
        let fr = random_features(16, 4, 3, 5);
        let a = build_depth_cost_volume(&fl, &fr, &rig, &planes).unwrap();
        let b = build_disparity_cost_volume(&fl, &fr, &levels).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let fl = random_features(8, 4, 2, 1);
        let fr = random_features(8, 4, 3, 1);
        assert!(matches!(build_cost_volume(&fl, &fr, &[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn aggregation_zero_distance_gives_zero_logits() {
        let fl = random_features(8, 4, 2, 7);
        let vol = build_cost_volume(&fl, &fl, &[0.0, 4.0]).unwrap();
        let mut w = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        let lg = aggregate_costs(&vol, &w, 0).unwrap();
        for x in 0..8 {
            assert_eq!(lg.at(0, 1, x), 0.0);
        }
        assert_eq!(lg.at(1, 0, 0), INVALID_LOGIT);
        w[4] = 0.25;
        assert_eq!(aggregate_costs(&vol, &w, 0).unwrap().at(0, 2, 2), 0.25);
        assert!(aggregate_costs(&vol, &w[..3], 0).is_err());
    }

    #[test]
    fn uniform_volume_gives_uniform_logits() {
        let mut fl = FeatureMap::zeros(6, 5, 2, 4);
        fl.data.iter_mut().for_each(|v| *v = 0.2);
        let mut fr = fl.clone();
        fr.data.iter_mut().for_each(|v| *v = 0.7);
        let vol = build_cost_volume(&fl, &fr, &[0.0]).unwrap();
        let lg = aggregate_costs(&vol, &[1.0, 2.0, 0.5, 0.5, 0.0], 2).unwrap();
        let first = lg.data[0];
        assert!(lg.data.iter().all(|v| (v - first).abs() < 1e-12));
        assert_relative_eq!(first, -(0.5 + 1.0 + 0.125 + 0.125), epsilon = 1e-6);
    }

    #[test]
    fn aggregation_matches_direct_weighted_distance() {
        // 4x4 spatial, 3 hypotheses, 2 feature channels, radius 0
        let fl = random_features(4, 4, 2, 11);
        let fr = random_features(4, 4, 2, 12);
        let vol = build_cost_volume(&fl, &fr, &[0.0, 2.0, 4.0]).unwrap();
        let weights = [0.3, 1.7, 0.4, -0.2, 0.05];
        let lg = aggregate_costs(&vol, &weights, 0).unwrap();
        for i in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let shift = [0.0, 0.5, 1.0][i];
                    let pos = x as f64 - shift;
                    if pos < 0.0 {
                        assert_eq!(lg.at(i, y, x), INVALID_LOGIT);
                        continue;
                    }
                    let x0 = pos.floor() as usize;
                    let t = pos - x0 as f64;
                    let mut expect = 0.0;
                    for c in 0..2 {
                        let r0 = fr.at(x0, y, c) as f64;
                        let r1 = if t > 0.0 { fr.at(x0 + 1, y, c) as f64 } else { r0 };
                        let d = fl.at(x, y, c) as f64 - (r0 * (1.0 - t) + r1 * t);
                        expect -= weights[c] * d.abs() + weights[2 + c] * d * d;
                    }
                    expect += weights[4];
                    assert!((lg.at(i, y, x) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn box_sum_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (7, 5);
        let src: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let got = box_sum(&src, w, h, 2);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for yy in (y - 2).max(0)..=(y + 2).min(h as isize - 1) {
                    for xx in (x - 2).max(0)..=(x + 2).min(w as isize - 1) {
                        s += src[yy as usize * w + xx as usize];
                    }
                }
                assert!((got[y as usize * w + x as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_preserves_grid_and_constants() {
        let mut v = ScoreVolume::zeros(2, 3, 4);
        v.data.iter_mut().enumerate().for_each(|(i, x)| *x = (i * i % 7) as f64);
        let up = upsample_trilinear(&v);
        assert_eq!((up.planes, up.height, up.width), (2, 12, 16));
        for i in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(up.at(i, 4 * y, 4 * x), v.at(i, y, x));
                }
            }
        }
        // midpoint of an interior 2x2 cell
        let mid = up.at(1, 2, 6);
        let avg = (v.at(1, 0, 1) + v.at(1, 0, 2) + v.at(1, 1, 1) + v.at(1, 1, 2)) / 4.0;
        assert_relative_eq!(mid, avg, epsilon = 1e-12);

        let mut c = ScoreVolume::zeros(3, 2, 2);
        c.data.iter_mut().for_each(|x| *x = 1.5);
        assert!(upsample_trilinear(&c).data.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn upsample_matches_separable_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = ScoreVolume::zeros(3, 4, 4);
        v.data.iter_mut().for_each(|x| *x = rng.random::<f64>() * 4.0 - 2.0);
        let up = upsample_trilinear(&v);
        // interpolate along x first, then y, with clamp-to-edge
        let lerp1 = |vals: &dyn Fn(usize) -> f64, n: usize, d: usize| {
            let s = d as f64 / 4.0;
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = s - i0 as f64;
            if i0 == i1 {
                vals(i0)
            } else {
                vals(i0) + t * (vals(i1) - vals(i0))
            }
        };
        for i in 0..3 {
            for yy in 0..16 {
                for xx in 0..16 {
                    let rowv = |y: usize| lerp1(&|x| v.at(i, y, x), 4, xx);
                    let expect = lerp1(&rowv, 4, yy);
                    assert!((up.at(i, yy, xx) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut v = ScoreVolume::zeros(4, 1, 1);
        let p = normalize_softmax(&v);
        assert!(p.data.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        v = ScoreVolume::zeros(2, 1, 1);
        v.data[1] = 3f64.ln();
        let p = normalize_softmax(&v);
        assert_relative_eq!(p.data[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.data[1], 0.75, epsilon = 1e-15);
        let shifted = ScoreVolume {
            data: v.data.iter().map(|x| x + 123.0).collect(),
            ..v.clone()
        };
        let q = normalize_softmax(&shifted);
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_logit_is_negligible_but_finite() {
        let mut v = ScoreVolume::zeros(2, 1, 1);
        v.data[0] = INVALID_LOGIT;
        let p = normalize_softmax(&v);
        assert!(p.data[0] < 1e-40 && p.data[0] >= 0.0);
        assert!(p.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn soft_argmax_examples() {
        let planes = sample_depth_planes(1.0, 81.0, 80).unwrap();
        let mut p = ScoreVolume::zeros(80, 1, 3);
        p.data[3 * 3] = 1.0; // one-hot plane 3 at pixel 0
        p.data[1] = 0.5; // pixel 1: planes 0 and 1
        p.data[3 + 1] = 0.5;
        for i in 0..80 {
            p.data[i * 3 + 2] = 1.0 / 80.0;
        }
        let d = soft_argmax_depth(&p, &planes).unwrap();
        assert_eq!(d.depth[0], 4.0);
        assert_eq!(d.depth[1], 1.5);
        assert_relative_eq!(d.depth[2], 40.5, epsilon = 1e-9);
        assert!(soft_argmax_depth(&ScoreVolume::zeros(3, 1, 1), &planes).is_err());
    }

    #[test]
    fn disparity_sweep_index_maps_through_triangulation() {
        let rig = StereoRig::sceneflow(8, 8);
        let lv = DisparityLevels::new(10.0, 30.0, 4).unwrap();
        let (depth, slope) = Sweep::Disparity(lv).depth_of_index(&rig, 2.0);
        assert_relative_eq!(depth, 283.5 / 20.0, epsilon = 1e-12);
        assert_relative_eq!(slope, -283.5 / 400.0 * 5.0, epsilon = 1e-12);
    }
}
