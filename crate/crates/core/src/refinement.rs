//! Uncertainty-guided depth refinement.
//!
//! Around the coarse depth `d_c` of each pixel five candidates are matched at
//! full resolution. The scale map `su` sets the spacing of the candidates and
//! the feature-uncertainty weights `fu` (inverse variances) decide how much
//! each feature channel counts when scoring them. The refined depth is
//!
//! ```text
//! depth = d_c + su * sum_{i=-2..2} i * s_i
//! ```
//!
//! where `s_i` is the softmax over candidate scores.
//!
//! In the default [`CandidateMode::Depth`] candidate `i` sits at depth
//! `d_c + i * su`, projected through the rig, so its image-space spacing
//! shrinks with depth. [`CandidateMode::Pixel`] places candidates at fixed
//! column steps `x' + i * su` instead.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{DepthMap, ScoreVolume, INVALID_LOGIT};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::StereoRig;
use crate::sampling::{cubic_row, in_row};

/// Number of refinement candidates (offsets -2..=2).
pub const CANDIDATES: usize = 5;
/// Floor for candidate and refined depths, meters.
pub const DEPTH_FLOOR: f64 = 0.1;
/// Smallest disparity used when converting pixel-mode refinements back to depth.
pub const DISPARITY_FLOOR: f64 = 1e-3;
/// Radius of the box pooling applied to squared residuals.
pub const POOL_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CandidateMode {
    /// Candidates at `d_c + i * su` in depth (su in meters).
    #[default]
    Depth,
    /// Candidates at `x' + i * su` in the right image (su in pixels).
    Pixel,
}

impl std::str::FromStr for CandidateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(CandidateMode::Depth),
            "pixel" => Ok(CandidateMode::Pixel),
            other => Err(Error::Config(format!("unknown candidate mode '{other}'"))),
        }
    }
}

#[inline]
pub(crate) fn offset_index(i: usize) -> f64 {
    i as f64 - 2.0
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: the pre-activation giving `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Per-pixel, per-channel real-valued field (row-major, channels interleaved).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Field {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Right features resampled into the left view.
#[derive(Debug, Clone)]
pub struct WarpedFeatures {
    pub features: Field,
    /// Derivative of each sampled value with respect to the sampling column.
    pub slope: Vec<f64>,
    pub valid: Vec<bool>,
    /// Disparity used at each pixel (0 where the depth was invalid).
    pub disparity: Vec<f64>,
}

/// Resamples `f_r` at `x - fB / depth(x, y)`. Out-of-image samples and
/// invalid depths give zero features and an invalid flag.
pub fn warp_right_to_left(f_r: &FeatureMap, depth: &DepthMap, rig: &StereoRig) -> Result<WarpedFeatures> {
    if f_r.width != depth.width || f_r.height != depth.height {
        return Err(Error::Argument("warp: feature and depth shapes differ".into()));
    }
    let (w, h, c) = (f_r.width, f_r.height, f_r.channels);
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; w * c];
            let mut slope = vec![0.0; w * c];
            let mut valid = vec![false; w];
            let mut disp = vec![0.0; w];
            let row = f_r.row(y);
            for x in 0..w {
                let p = y * w + x;
                if !depth.valid[p] || !(depth.depth[p] > 0.0) {
                    continue;
                }
                let d = rig.fb() / depth.depth[p];
                disp[x] = d;
                let pos = x as f64 - d;
                if in_row(pos, w) {
                    cubic_row(row, w, c, pos, &mut vals[x * c..(x + 1) * c], &mut slope[x * c..(x + 1) * c]);
                    valid[x] = true;
                }
            }
            (vals, slope, valid, disp)
        })
        .collect();
    let mut out = WarpedFeatures {
        features: Field::zeros(w, h, c),
        slope: Vec::with_capacity(w * h * c),
        valid: Vec::with_capacity(w * h),
        disparity: Vec::with_capacity(w * h),
    };
    out.features.data.clear();
    for (v, s, ok, d) in rows {
        out.features.data.extend(v);
        out.slope.extend(s);
        out.valid.extend(ok);
        out.disparity.extend(d);
    }
    Ok(out)
}

/// `f_u = f_l - warped`, elementwise.
pub fn compute_uncertainty_feature(f_l: &FeatureMap, warped: &Field) -> Result<Field> {
    if f_l.width != warped.width || f_l.height != warped.height || f_l.channels != warped.channels {
        return Err(Error::Argument("uncertainty feature: shapes differ".into()));
    }
    Ok(Field {
        width: f_l.width,
        height: f_l.height,
        channels: f_l.channels,
        data: f_l
            .data
            .iter()
            .zip(&warped.data)
            .map(|(&l, &r)| l as f64 - r)
            .collect(),
    })
}

/// Box mean (radius [`POOL_RADIUS`], clipped at borders) of the squared residual, per channel.
pub fn pooled_energy(f_u: &Field) -> Field {
    let (w, h, c) = (f_u.width, f_u.height, f_u.channels);
    let mut out = Field::zeros(w, h, c);
    let counts = window_counts(w, h, POOL_RADIUS);
    for k in 0..c {
        let sq: Vec<f64> = (0..w * h).map(|p| f_u.data[p * c + k].powi(2)).collect();
        let sum = crate::cost_volume::box_sum(&sq, w, h, POOL_RADIUS);
        for p in 0..w * h {
            out.data[p * c + k] = sum[p] / counts[p];
        }
    }
    out
}

pub(crate) fn window_counts(w: usize, h: usize, r: usize) -> Vec<f64> {
    let ones = vec![1.0; w * h];
    crate::cost_volume::box_sum(&ones, w, h, r)
}

/// Scale-uncertainty head parameters: `su = softplus(w_e . e + w_d * d_c + b)`.
#[derive(Debug, Clone, Copy)]
pub struct SuHead<'a> {
    pub w_e: &'a [f64],
    pub w_d: f64,
    pub b: f64,
}

impl<'a> SuHead<'a> {
    pub fn param_len(channels: usize) -> usize {
        channels + 2
    }

    pub fn from_slice(p: &'a [f64]) -> Self {
        let c = p.len() - 2;
        SuHead {
            w_e: &p[..c],
            w_d: p[c],
            b: p[c + 1],
        }
    }
}

/// Per-pixel candidate spacing (meters in depth mode, pixels in pixel mode).
#[derive(Debug, Clone, PartialEq)]
pub struct SUMap {
    pub width: usize,
    pub height: usize,
    pub su: Vec<f64>,
}

pub(crate) fn su_preactivation(energy: &[f64], depth_coarse: f64, head: &SuHead) -> f64 {
    let mut z = head.b + head.w_d * depth_coarse;
    for (e, w) in energy.iter().zip(head.w_e) {
        z += w * e;
    }
    z
}

pub fn estimate_su(f_u: &Field, depth_coarse: &DepthMap, head: &SuHead) -> Result<SUMap> {
    if head.w_e.len() != f_u.channels {
        return Err(Error::Argument(format!(
            "SU head expects {} energy weights, got {}",
            f_u.channels,
            head.w_e.len()
        )));
    }
    if f_u.width != depth_coarse.width || f_u.height != depth_coarse.height {
        return Err(Error::Argument("SU: shapes differ".into()));
    }
    let energy = pooled_energy(f_u);
    Ok(estimate_su_from_energy(&energy, depth_coarse, head))
}

pub(crate) fn estimate_su_from_energy(energy: &Field, depth_coarse: &DepthMap, head: &SuHead) -> SUMap {
    let c = energy.channels;
    let su = (0..energy.width * energy.height)
        .map(|p| {
            softplus(su_preactivation(
                &energy.data[p * c..(p + 1) * c],
                depth_coarse.depth[p],
                head,
            ))
        })
        .collect();
    SUMap {
        width: energy.width,
        height: energy.height,
        su,
    }
}

/// Feature-uncertainty head parameters:
/// `fu[c, i] = softplus(v[c] * e[c mod C] + v_s[c] * su + beta[c, i])`.
#[derive(Debug, Clone, Copy)]
pub struct FuHead<'a> {
    /// One weight per unfolded channel (3C).
    pub v: &'a [f64],
    pub v_s: &'a [f64],
    /// Row-major `3C x 5`.
    pub beta: &'a [f64],
}

impl<'a> FuHead<'a> {
    pub fn param_len(channels: usize) -> usize {
        3 * channels * (2 + CANDIDATES)
    }

    pub fn from_slice(p: &'a [f64]) -> Self {
        let n = p.len() / (2 + CANDIDATES);
        FuHead {
            v: &p[..n],
            v_s: &p[n..2 * n],
            beta: &p[2 * n..],
        }
    }
}

/// Positive matching weights, layout `data[(p * channels + c) * 5 + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FUMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FUMap {
    #[inline]
    pub fn at(&self, c: usize, i: usize, y: usize, x: usize) -> f64 {
        self.data[((y * self.width + x) * self.channels + c) * CANDIDATES + i]
    }
}

#[inline]
pub(crate) fn fu_preactivation(head: &FuHead, c: usize, base_c: usize, i: usize, energy: &[f64], su: f64) -> f64 {
    head.v[c] * energy[base_c] + head.v_s[c] * su + head.beta[c * CANDIDATES + i]
}

pub fn estimate_fu(f_u: &Field, su: &SUMap, head: &FuHead) -> Result<FUMap> {
    let uc = 3 * f_u.channels;
    if head.v.len() != uc || head.v_s.len() != uc || head.beta.len() != uc * CANDIDATES {
        return Err(Error::Argument(format!(
            "FU head expects {} parameters for {} channels",
            FuHead::param_len(f_u.channels),
            f_u.channels
        )));
    }
    let energy = pooled_energy(f_u);
    Ok(estimate_fu_from_energy(&energy, su, head))
}

pub(crate) fn estimate_fu_from_energy(energy: &Field, su: &SUMap, head: &FuHead) -> FUMap {
    let c = energy.channels;
    let uc = 3 * c;
    let n = energy.width * energy.height;
    let mut data = vec![0.0; n * uc * CANDIDATES];
    data.par_chunks_mut(uc * CANDIDATES)
        .enumerate()
        .for_each(|(p, out)| {
            let e = &energy.data[p * c..(p + 1) * c];
            for ch in 0..uc {
                for i in 0..CANDIDATES {
                    out[ch * CANDIDATES + i] = softplus(fu_preactivation(head, ch, ch % c, i, e, su.su[p]));
                }
            }
        });
    FUMap {
        width: energy.width,
        height: energy.height,
        channels: uc,
        data,
    }
}

/// Residuals between left features and the five right-image candidates.
#[derive(Debug, Clone)]
pub struct CandidateFeatures {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `f_l - f_r(candidate)`, layout `[(p * channels + k) * 5 + i]`; zero when invalid.
    pub f_s: Vec<f64>,
    /// Derivative of `f_s` with respect to the candidate column.
    pub slope: Vec<f64>,
    /// `[p * 5 + i]`.
    pub valid: Vec<bool>,
    /// Candidate disparity, `[p * 5 + i]`.
    pub disparity: Vec<f64>,
    /// Depth-mode candidates whose depth hit [`DEPTH_FLOOR`].
    pub floored: Vec<bool>,
}

impl CandidateFeatures {
    #[inline]
    pub fn residual(&self, k: usize, i: usize, y: usize, x: usize) -> f64 {
        self.f_s[((y * self.width + x) * self.channels + k) * CANDIDATES + i]
    }
}

/// Disparity of candidate `i` (0..5) for one pixel, with a flag telling
/// whether the depth floor was applied.
#[inline]
pub(crate) fn candidate_disparity_at(mode: CandidateMode, fb: f64, dc: f64, su: f64, i: usize) -> (f64, bool) {
    let k = offset_index(i);
    match mode {
        CandidateMode::Depth => {
            let d = dc + k * su;
            if d > DEPTH_FLOOR {
                (fb / d, false)
            } else {
                (fb / DEPTH_FLOOR, true)
            }
        }
        CandidateMode::Pixel => (fb / dc - k * su, false),
    }
}

pub fn build_similarity_features(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    depth_coarse: &DepthMap,
    su: &SUMap,
    rig: &StereoRig,
    mode: CandidateMode,
) -> Result<CandidateFeatures> {
    if !f_l.same_shape(f_r) || f_l.width != depth_coarse.width || f_l.height != depth_coarse.height {
        return Err(Error::Argument("similarity features: shapes differ".into()));
    }
    let (w, h, c) = (f_l.width, f_l.height, f_l.channels);
    let fb = rig.fb();
    let per_px = c * CANDIDATES;
    let mut out = CandidateFeatures {
        width: w,
        height: h,
        channels: c,
        f_s: vec![0.0; w * h * per_px],
        slope: vec![0.0; w * h * per_px],
        valid: vec![false; w * h * CANDIDATES],
        disparity: vec![0.0; w * h * CANDIDATES],
        floored: vec![false; w * h * CANDIDATES],
    };
    out.f_s
        .par_chunks_mut(w * per_px)
        .zip(out.slope.par_chunks_mut(w * per_px))
        .zip(out.valid.par_chunks_mut(w * CANDIDATES))
        .zip(out.disparity.par_chunks_mut(w * CANDIDATES))
        .zip(out.floored.par_chunks_mut(w * CANDIDATES))
        .enumerate()
        .for_each(|(y, ((((fs, sl), ok), disp), fl))| {
            let row = f_r.row(y);
            let mut val = vec![0.0; c];
            let mut der = vec![0.0; c];
            for x in 0..w {
                let p = y * w + x;
                if !depth_coarse.valid[p] || !(depth_coarse.depth[p] > 0.0) {
                    continue;
                }
                let left = f_l.pixel(x, y);
                for i in 0..CANDIDATES {
                    let (d, floored) = candidate_disparity_at(mode, fb, depth_coarse.depth[p], su.su[p], i);
                    disp[x * CANDIDATES + i] = d;
                    fl[x * CANDIDATES + i] = floored;
                    let pos = x as f64 - d;
                    if !in_row(pos, w) {
                        continue;
                    }
                    cubic_row(row, w, c, pos, &mut val, &mut der);
                    ok[x * CANDIDATES + i] = true;
                    for k in 0..c {
                        fs[(x * c + k) * CANDIDATES + i] = left[k] as f64 - val[k];
                        sl[(x * c + k) * CANDIDATES + i] = -der[k];
                    }
                }
            }
        });
    Ok(out)
}

/// Stacks each candidate with its neighbours: block `b` of candidate `i` is
/// candidate `clamp(i - 1 + b, 0, 4)`.
#[derive(Debug, Clone)]
pub struct UnfoldedCandidates {
    pub width: usize,
    pub height: usize,
    /// 3C.
    pub channels: usize,
    /// Layout `[(p * channels + c) * 5 + i]`.
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

#[inline]
pub(crate) fn unfold_source(block: usize, i: usize) -> usize {
    (i + block).saturating_sub(1).min(CANDIDATES - 1)
}

pub fn unfold_candidates(cf: &CandidateFeatures) -> UnfoldedCandidates {
    let c = cf.channels;
    let n = cf.width * cf.height;
    let mut data = vec![0.0; n * 3 * c * CANDIDATES];
    for p in 0..n {
        for b in 0..3 {
            for k in 0..c {
                for i in 0..CANDIDATES {
                    let src = unfold_source(b, i);
                    data[(p * 3 * c + b * c + k) * CANDIDATES + i] = cf.f_s[(p * c + k) * CANDIDATES + src];
                }
            }
        }
    }
    UnfoldedCandidates {
        width: cf.width,
        height: cf.height,
        channels: 3 * c,
        data,
        valid: cf.valid.clone(),
    }
}

/// Column sums of the `C x 3C` compression matrix: the candidate logit only
/// depends on these because the compressed channels are summed.
pub(crate) fn compression_column_sums(compression: &[f64], unfolded_channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0; unfolded_channels];
    for row in compression.chunks_exact(unfolded_channels) {
        for (s, m) in sums.iter_mut().zip(row) {
            *s += m;
        }
    }
    sums
}

/// Candidate logits `sum_m sum_c M[m, c] * (-1/2 f'_s[c]^2 * fu[c])` for one pixel.
#[inline]
pub(crate) fn candidate_logits(unfolded: &[f64], fu: &[f64], colsum: &[f64], valid: &[bool], out: &mut [f64; CANDIDATES]) {
    for i in 0..CANDIDATES {
        if !valid[i] {
            out[i] = INVALID_LOGIT;
            continue;
        }
        let mut acc = 0.0;
        for (c, s) in colsum.iter().enumerate() {
            let r = unfolded[c * CANDIDATES + i];
            acc += s * (-0.5 * r * r * fu[c * CANDIDATES + i]);
        }
        out[i] = acc;
    }
}

#[inline]
pub(crate) fn softmax5(logits: &[f64; CANDIDATES]) -> [f64; CANDIDATES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; CANDIDATES];
    let mut z = 0.0;
    for i in 0..CANDIDATES {
        e[i] = (logits[i] - m).exp();
        z += e[i];
    }
    for v in e.iter_mut() {
        *v /= z;
    }
    e
}

/// Scores the candidates: FU-weighted squared residuals, compressed from 3C to
/// C channels by `compression` (row-major `C x 3C`), summed and softmaxed over
/// the five candidates.
pub fn score_candidates(unfolded: &UnfoldedCandidates, fu: &FUMap, compression: &[f64]) -> Result<ScoreVolume> {
    let uc = unfolded.channels;
    if fu.channels != uc || fu.width != unfolded.width || fu.height != unfolded.height {
        return Err(Error::Argument("score: FU and candidate shapes differ".into()));
    }
    if compression.len() % uc != 0 || compression.is_empty() {
        return Err(Error::Argument(format!(
            "compression matrix length {} is not a multiple of {uc}",
            compression.len()
        )));
    }
    let colsum = compression_column_sums(compression, uc);
    let n = unfolded.width * unfolded.height;
    let scores: Vec<[f64; CANDIDATES]> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut logits = [0.0; CANDIDATES];
            candidate_logits(
                &unfolded.data[p * uc * CANDIDATES..(p + 1) * uc * CANDIDATES],
                &fu.data[p * uc * CANDIDATES..(p + 1) * uc * CANDIDATES],
                &colsum,
                &unfolded.valid[p * CANDIDATES..(p + 1) * CANDIDATES],
                &mut logits,
            );
            softmax5(&logits)
        })
        .collect();
    let mut out = ScoreVolume::zeros(CANDIDATES, unfolded.height, unfolded.width);
    for (p, s) in scores.iter().enumerate() {
        for i in 0..CANDIDATES {
            out.data[i * n + p] = s[i];
        }
    }
    Ok(out)
}

/// Per-pixel refinement offset (meters in depth mode).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMap {
    pub width: usize,
    pub height: usize,
    pub offset: Vec<f64>,
}

pub fn compute_offset(scores: &ScoreVolume, su: &SUMap) -> Result<OffsetMap> {
    if scores.planes != CANDIDATES || scores.width != su.width || scores.height != su.height {
        return Err(Error::Argument("offset: score and SU shapes differ".into()));
    }
    let n = su.width * su.height;
    let offset = (0..n)
        .map(|p| {
            let m: f64 = (0..CANDIDATES).map(|i| offset_index(i) * scores.data[i * n + p]).sum();
            su.su[p] * m
        })
        .collect();
    Ok(OffsetMap {
        width: su.width,
        height: su.height,
        offset,
    })
}

/// Refined depth with the pixels where the depth floor was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDepth {
    pub depth: DepthMap,
    pub clamped: Vec<bool>,
}

pub fn refine_depth(depth_coarse: &DepthMap, offset: &OffsetMap) -> Result<RefinedDepth> {
    if depth_coarse.width != offset.width || depth_coarse.height != offset.height {
        return Err(Error::Argument("refine: shapes differ".into()));
    }
    let mut depth = depth_coarse.clone();
    let mut clamped = vec![false; depth.depth.len()];
    for (p, d) in depth.depth.iter_mut().enumerate() {
        let v = *d + offset.offset[p];
        if v > DEPTH_FLOOR {
            *d = v;
        } else {
            *d = DEPTH_FLOOR;
            clamped[p] = true;
        }
    }
    Ok(RefinedDepth { depth, clamped })
}

/// Pixel-mode refinement: the offset is a disparity step along the candidate
/// axis, so the refined disparity is `fB / d_c - offset`.
pub fn refine_depth_pixel(depth_coarse: &DepthMap, disparity_offset: &OffsetMap, rig: &StereoRig) -> Result<RefinedDepth> {
    if depth_coarse.width != disparity_offset.width || depth_coarse.height != disparity_offset.height {
        return Err(Error::Argument("refine: shapes differ".into()));
    }
    let mut depth = depth_coarse.clone();
    let mut clamped = vec![false; depth.depth.len()];
    for (p, d) in depth.depth.iter_mut().enumerate() {
        let disp = rig.fb() / *d - disparity_offset.offset[p];
        let (disp, low) = if disp > DISPARITY_FLOOR { (disp, false) } else { (DISPARITY_FLOOR, true) };
        let v = rig.fb() / disp;
        if v > DEPTH_FLOOR {
            *d = v;
            clamped[p] = low;
        } else {
            *d = DEPTH_FLOOR;
            clamped[p] = true;
        }
    }
    Ok(RefinedDepth { depth, clamped })
}

/// Log-density of a zero feature difference between two diagonal Gaussian
/// features with means `mu_l`, `mu_r`, variances `var_l`, `var_r` and
/// cross-covariance `cov`:
///
/// `-1/2 sum_c [ (mu_l - mu_r)^2 / s_c + ln s_c ] - C/2 ln 2 pi`, `s_c = var_l + var_r - 2 cov`.
pub fn gaussian_similarity_score(mu_l: &[f64], mu_r: &[f64], var_l: &[f64], var_r: &[f64], cov: f64) -> Result<f64> {
    let c = mu_l.len();
    if mu_r.len() != c || var_l.len() != c || var_r.len() != c {
        return Err(Error::Argument("gaussian score: length mismatch".into()));
    }
    let mut acc = 0.0;
    for k in 0..c {
        let s = var_l[k] + var_r[k] - 2.0 * cov;
        if !(s > 0.0) {
            return Err(Error::Domain(format!("combined variance {s} <= 0 in channel {k}")));
        }
        let d = mu_l[k] - mu_r[k];
        acc += d * d / s + s.ln();
    }
    Ok(-0.5 * acc - 0.5 * c as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn su_map(w: usize, h: usize, v: f64) -> SUMap {
        SUMap { width: w, height: h, su: vec![v; w * h] }
    }

    fn textured(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fm = FeatureMap::zeros(w, h, c, 1);
        fm.data.iter_mut().for_each(|v| *v = rng.random::<f32>());
        fm
    }

    fn scores_from(per_pixel: &[[f64; 5]], w: usize, h: usize) -> ScoreVolume {
        let n = w * h;
        let mut s = ScoreVolume::zeros(5, h, w);
        for (p, sc) in per_pixel.iter().enumerate() {
            for i in 0..5 {
                s.data[i * n + p] = sc[i];
            }
        }
        s
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 5.0, 40.0] {
            assert_relative_eq!(softplus(softplus_inverse(y)), y, max_relative = 1e-12);
        }
        assert_relative_eq!(softplus(softplus_inverse(5.0)), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn warp_with_integer_disparity_is_a_shift() {
        let rig = StereoRig::new(0.5, 20.0, 32, 4).unwrap(); // fB = 10
        let fr = textured(32, 4, 3, 1);
        let depth = DepthMap::constant(32, 4, 1.0); // 10 px
        let warped = warp_right_to_left(&fr, &depth, &rig).unwrap();
        for y in 0..4 {
            for x in 0..32 {
                let p = y * 32 + x;
                if x < 10 {
                    assert!(!warped.valid[p]);
                    assert_eq!(warped.features.at(x, y, 0), 0.0);
                } else {
                    assert!(warped.valid[p]);
                    for c in 0..3 {
                        assert!((warped.features.at(x, y, c) - fr.at(x - 10, y, c) as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn infinite_depth_is_identity_warp() {
        let rig = StereoRig::sceneflow(16, 2);
        let fr = textured(16, 2, 2, 2);
        let depth = DepthMap::constant(16, 2, f64::MAX);
        let warped = warp_right_to_left(&fr, &depth, &rig).unwrap();
        for p in 0..32 {
            if p % 16 == 0 {
                // x - 0+ falls just outside the row
                continue;
            }
            assert!(warped.valid[p]);
            for c in 0..2 {
                assert!((warped.features.data[p * 2 + c] - fr.data[p * 2 + c] as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uncertainty_feature_is_elementwise_difference() {
        let fl = textured(6, 3, 2, 3);
        let mut warped = Field::zeros(6, 3, 2);
        let fu = compute_uncertainty_feature(&fl, &warped).unwrap();
        for (a, b) in fu.data.iter().zip(&fl.data) {
            assert_eq!(*a, *b as f64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        warped.data.iter_mut().for_each(|v| *v = rng.random());
        let fu = compute_uncertainty_feature(&fl, &warped).unwrap();
        for i in 0..fu.data.len() {
            assert_eq!(fu.data[i], fl.data[i] as f64 - warped.data[i]);
        }
    }

    #[test]
    fn constant_su_configuration() {
        let f_u = Field::zeros(4, 3, 2);
        let dc = DepthMap::constant(4, 3, 12.0);
        let b = softplus_inverse(5.0);
        let su = estimate_su(&f_u, &dc, &SuHead { w_e: &[0.0, 0.0], w_d: 0.0, b }).unwrap();
        assert!(su.su.iter().all(|&s| (s - 5.0).abs() < 1e-12));
    }

    #[test]
    fn su_increases_with_depth_when_depth_weight_positive() {
        let f_u = Field::zeros(5, 1, 1);
        let dc = DepthMap::new(5, 1, vec![1.0, 5.0, 10.0, 40.0, 80.0], vec![true; 5]).unwrap();
        let su = estimate_su(&f_u, &dc, &SuHead { w_e: &[0.0], w_d: 0.1, b: -1.0 }).unwrap();
        assert!(su.su.windows(2).all(|w| w[1] > w[0]));
        assert!(su.su.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn constant_fu_configuration_and_positivity() {
        let f_u = Field::zeros(3, 2, 2);
        let su = su_map(3, 2, 5.0);
        let zeros = vec![0.0; 6];
        let beta = vec![softplus_inverse(1.0); 30];
        let fu = estimate_fu(&f_u, &su, &FuHead { v: &zeros, v_s: &zeros, beta: &beta }).unwrap();
        assert!(fu.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f_u = Field::zeros(3, 2, 2);
        f_u.data.iter_mut().for_each(|v| *v = rng.random::<f64>() * 4.0 - 2.0);
        let v: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        let beta: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 40.0 - 20.0).collect();
        let fu = estimate_fu(&f_u, &su, &FuHead { v: &v, v_s: &v, beta: &beta }).unwrap();
        assert!(fu.data.iter().all(|&x| x > 0.0 && x.is_finite()));
    }

    #[test]
    fn center_candidate_reproduces_warp_residual() {
        let rig = StereoRig::new(0.5, 20.0, 24, 3).unwrap();
        let fl = textured(24, 3, 2, 6);
        let fr = textured(24, 3, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dc = DepthMap::new(24, 3, (0..72).map(|_| 1.0 + rng.random::<f64>() * 3.0).collect(), vec![true; 72]).unwrap();
        let su = su_map(24, 3, 0.3);
        let warped = warp_right_to_left(&fr, &dc, &rig).unwrap();
        let f_u = compute_uncertainty_feature(&fl, &warped.features).unwrap();
        let cf = build_similarity_features(&fl, &fr, &dc, &su, &rig, CandidateMode::Depth).unwrap();
        for y in 0..3 {
            for x in 0..24 {
                if !warped.valid[y * 24 + x] {
                    continue;
                }
                for k in 0..2 {
                    assert!((cf.residual(k, 2, y, x) - f_u.at(x, y, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_su_collapses_candidates() {
        let rig = StereoRig::new(0.5, 20.0, 24, 2).unwrap();
        let fl = textured(24, 2, 2, 9);
        let fr = textured(24, 2, 2, 10);
        let dc = DepthMap::constant(24, 2, 2.7);
        let cf = build_similarity_features(&fl, &fr, &dc, &su_map(24, 2, 0.0), &rig, CandidateMode::Depth).unwrap();
        for chunk in cf.f_s.chunks_exact(5) {
            assert!(chunk.iter().all(|&v| v == chunk[0]));
        }
    }

    #[test]
    fn pixel_mode_uses_fixed_column_steps() {
        let rig = StereoRig::new(0.5, 20.0, 24, 1).unwrap();
        let fl = textured(24, 1, 1, 11);
        let fr = textured(24, 1, 1, 12);
        let dc = DepthMap::constant(24, 1, 2.0); // 5 px
        let cf = build_similarity_features(&fl, &fr, &dc, &su_map(24, 1, 1.0), &rig, CandidateMode::Pixel).unwrap();
        let x = 12;
        for i in 0..5 {
            let col = (x as f64 - 5.0 + offset_index(i)) as usize;
            assert!((cf.residual(0, i, 0, x) - (fl.at(x, 0, 0) - fr.at(col, 0, 0)) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn candidates_below_depth_floor_are_floored_and_out_of_image() {
        let rig = StereoRig::new(0.5, 20.0, 24, 1).unwrap();
        let fl = textured(24, 1, 1, 13);
        let dc = DepthMap::constant(24, 1, 1.0);
        let cf = build_similarity_features(&fl, &fl, &dc, &su_map(24, 1, 0.6), &rig, CandidateMode::Depth).unwrap();
        // i = -2 -> depth -0.2 -> floored at 0.1 m -> 100 px disparity
        assert!(cf.floored[5 * 20]);
        assert!(!cf.valid[5 * 20]);
        assert!(!cf.floored[5 * 20 + 1]);
    }

    #[test]
    fn unfold_blocks_with_end_replication() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (w, h, c) = (3, 2, 4);
        let cf = CandidateFeatures {
            width: w,
            height: h,
            channels: c,
            f_s: (0..w * h * c * 5).map(|_| rng.random()).collect(),
            slope: vec![0.0; w * h * c * 5],
            valid: vec![true; w * h * 5],
            disparity: vec![0.0; w * h * 5],
            floored: vec![false; w * h * 5],
        };
        let u = unfold_candidates(&cf);
        assert_eq!(u.channels, 12);
        // index shuffling oracle: explicit block table
        let table = [[0, 0, 1], [0, 1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 4]];
        for p in 0..w * h {
            for (i, blocks) in table.iter().enumerate() {
                for (b, &src) in blocks.iter().enumerate() {
                    for k in 0..c {
                        assert_eq!(
                            u.data[(p * 12 + b * c + k) * 5 + i],
                            cf.f_s[(p * c + k) * 5 + src]
                        );
                    }
                }
            }
        }
    }

    fn unit_fu(w: usize, h: usize, uc: usize) -> FUMap {
        FUMap { width: w, height: h, channels: uc, data: vec![1.0; w * h * uc * 5] }
    }

    fn identity_compression(c: usize) -> Vec<f64> {
        let mut m = vec![0.0; c * 3 * c];
        for k in 0..c {
            m[k * 3 * c + c + k] = 1.0;
        }
        m
    }

    #[test]
    fn exact_match_candidate_wins() {
        let c = 2;
        let mut u = UnfoldedCandidates { width: 1, height: 1, channels: 3 * c, data: vec![3.0; 3 * c * 5], valid: vec![true; 5] };
        for k in 0..c {
            u.data[(c + k) * 5 + 2] = 0.0;
        }
        let s = score_candidates(&u, &unit_fu(1, 1, 3 * c), &identity_compression(c)).unwrap();
        assert!(s.data[2] > 0.99);
    }

    #[test]
    fn identical_residuals_give_uniform_scores() {
        let u = UnfoldedCandidates { width: 2, height: 1, channels: 6, data: vec![0.7; 2 * 6 * 5], valid: vec![true; 10] };
        let s = score_candidates(&u, &unit_fu(2, 1, 6), &identity_compression(2)).unwrap();
        assert!(s.data.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn score_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (w, h, c) = (2, 2, 2);
        let uc = 3 * c;
        let u = UnfoldedCandidates {
            width: w,
            height: h,
            channels: uc,
            data: (0..w * h * uc * 5).map(|_| rng.random::<f64>() - 0.5).collect(),
            valid: (0..w * h * 5).map(|i| i % 7 != 3).collect(),
        };
        let fu = FUMap { width: w, height: h, channels: uc, data: (0..w * h * uc * 5).map(|_| 0.1 + rng.random::<f64>()).collect() };
        let m: Vec<f64> = (0..c * uc).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let s = score_candidates(&u, &fu, &m).unwrap();
        let n = w * h;
        for p in 0..n {
            let mut logits = [0.0f64; 5];
            for i in 0..5 {
                if !u.valid[p * 5 + i] {
                    logits[i] = INVALID_LOGIT;
                    continue;
                }
                for row in 0..c {
                    let mut compressed = 0.0;
                    for ch in 0..uc {
                        let r = u.data[(p * uc + ch) * 5 + i];
                        compressed += m[row * uc + ch] * (-0.5 * r * r * fu.data[(p * uc + ch) * 5 + i]);
                    }
                    logits[i] += compressed;
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for i in 0..5 {
                assert!((s.data[i * n + p] - (logits[i] - mx).exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn offset_examples() {
        let per = [
            [0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.2; 5],
            [0.1, 0.2, 0.4, 0.2, 0.1],
            [0.0, 0.0, 0.5, 0.5, 0.0],
        ];
        let scores = scores_from(&per, 5, 1);
        let su = SUMap { width: 5, height: 1, su: vec![2.0, 1.5, 3.0, 2.0, 2.0] };
        let off = compute_offset(&scores, &su).unwrap();
        assert_eq!(off.offset[0], 0.0);
        assert_eq!(off.offset[1], 3.0);
        assert!(off.offset[2].abs() < 1e-12);
        assert!(off.offset[3].abs() < 1e-12);
        assert!((off.offset[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refine_examples() {
        let dc = DepthMap::new(3, 1, vec![10.0, 40.5, 1.0], vec![true, true, false]).unwrap();
        let off = OffsetMap { width: 3, height: 1, offset: vec![0.0, -0.5, -2.0] };
        let r = refine_depth(&dc, &off).unwrap();
        assert_eq!(r.depth.depth, vec![10.0, 40.0, DEPTH_FLOOR]);
        assert_eq!(r.clamped, vec![false, false, true]);
        assert_eq!(r.depth.valid, dc.valid);
    }

    #[test]
    fn pixel_refinement_moves_disparity() {
        let rig = StereoRig::new(0.5, 20.0, 8, 1).unwrap();
        let dc = DepthMap::constant(2, 1, 2.0); // 5 px
        let off = OffsetMap { width: 2, height: 1, offset: vec![1.0, 5.5] };
        let r = refine_depth_pixel(&dc, &off, &rig).unwrap();
        assert_relative_eq!(r.depth.depth[0], 2.5, epsilon = 1e-12);
        assert!(r.clamped[1]);
    }

    #[test]
    fn gaussian_score_examples() {
        let s = gaussian_similarity_score(&[0.3], &[0.3], &[0.5], &[0.5], 0.0).unwrap();
        assert_relative_eq!(s, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        assert!((s + 0.918939).abs() < 1e-6);
        let doubled = gaussian_similarity_score(&[0.3], &[0.3], &[1.0], &[1.0], 0.0).unwrap();
        assert_relative_eq!(doubled - s, -0.5 * 2f64.ln(), epsilon = 1e-12);
        let mut prev = f64::INFINITY;
        for d in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let v = gaussian_similarity_score(&[d], &[0.0], &[0.5], &[0.5], 0.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(matches!(
            gaussian_similarity_score(&[0.0], &[0.0], &[0.5], &[0.5], 0.5),
            Err(Error::Domain(_))
        ));
    }
}
