//! The end-to-end depth model: coarse plane-sweep estimate followed by one
//! refinement pass, with the loss and its analytic gradient.
//!
//! The cost volume does not depend on the learnable parameters and the
//! aggregation is linear in its weights, so [`Model::prepare`] reduces each
//! sample to box-pooled per-plane distance statistics once. Coarse logits
//! are then `bias - w . stats`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{
    box_sum, build_sweep_cost_volume, normalize_softmax, upsample_by, upsample_taps, DepthMap, ScoreVolume, Sweep,
    INVALID_LOGIT,
};
use crate::compensated::Compensated;
use crate::error::{Error, Result};
use crate::features::{extract_coarse_features, extract_fine_features, ExtractorConfig, FeatureMap};
use crate::geometry::StereoRig;
use crate::image::ImageBuf;
use crate::params::{Group, ParamVector};
use crate::refinement::{
    build_similarity_features, compression_column_sums, compute_uncertainty_feature,
    offset_index, pooled_energy, sigmoid, softmax5, softplus, su_preactivation, unfold_source, warp_right_to_left,
    window_counts, CandidateMode, FuHead, SUMap, SuHead, CANDIDATES, DEPTH_FLOOR, DISPARITY_FLOOR, POOL_RADIUS,
};
use crate::scenes::Sample;

/// Downsampling factor between the images and the cost volume.
pub const COARSE_FACTOR: usize = 4;

/// Quantity the L1 loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    #[default]
    Depth,
    /// `|fB / pred - fB / gt|`, in pixels.
    Disparity,
}

impl std::str::FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Supervision::Depth),
            "disparity" => Ok(Supervision::Disparity),
            other => Err(Error::Config(format!("unknown supervision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub rig: StereoRig,
    pub sweep: Sweep,
    pub extractor: ExtractorConfig,
    pub agg_radius: usize,
    pub candidate_mode: CandidateMode,
    pub supervision: Supervision,
    pub coarse_weight: f64,
    pub refined_weight: f64,
    /// Ground-truth depths in `[lo, hi)` enter the loss.
    pub depth_range: (f64, f64),
}

/// Loss target for one sample.
#[derive(Debug, Clone)]
pub struct Target {
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub count: usize,
}

/// A sample reduced to everything the learnable part of the model needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub width: usize,
    pub height: usize,
    pub f_l: FeatureMap,
    pub f_r: FeatureMap,
    planes: usize,
    qw: usize,
    qh: usize,
    /// `[(i * qn + q) * 2C + j]`: pooled `|l - r|` (j < C) and `(l - r)^2` (j >= C).
    stats: Vec<f32>,
    cell_valid: Vec<bool>,
    pub coarse_valid: Vec<bool>,
    pub target: Option<Target>,
}

/// Everything the forward pass produces for one image.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub coarse: DepthMap,
    pub expected_index: Vec<f64>,
    pub su: Vec<f64>,
    pub offset: Vec<f64>,
    pub refined: DepthMap,
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub coarse: f64,
    pub refined: f64,
}

impl Model {
    /// Depth-mode model with default features, aggregation radius 2, depth
    /// supervision, unit loss weights and the sweep's depth range.
    pub fn new(rig: StereoRig, sweep: Sweep) -> Self {
        let depth_range = match &sweep {
            Sweep::Depth(p) => (p.d_min, p.d_max),
            Sweep::Disparity(l) => (rig.fb() / l.k_max, rig.fb() / l.k_min),
        };
        Model {
            rig,
            sweep,
            extractor: ExtractorConfig::default(),
            agg_radius: 2,
            candidate_mode: CandidateMode::Depth,
            supervision: Supervision::Depth,
            coarse_weight: 1.0,
            refined_weight: 1.0,
            depth_range,
        }
    }

    pub fn channels(&self) -> usize {
        self.extractor.channel_count()
    }

    /// The SU head sees coarse depth divided by this scale (the far end of
    /// the depth range), which keeps its depth weight on the same footing as
    /// the bias during training.
    pub fn su_depth_scale(&self) -> f64 {
        self.depth_range.1
    }

    /// Features, validity and pooled cost statistics for an image pair.
    pub fn prepare(&self, left: &ImageBuf, right: &ImageBuf) -> Result<Prepared> {
        if left.width != right.width || left.height != right.height {
            return Err(Error::Argument(format!(
                "left {}x{} and right {}x{} differ",
                left.width, left.height, right.width, right.height
            )));
        }
        let cl = extract_coarse_features(left, &self.extractor)?;
        let cr = extract_coarse_features(right, &self.extractor)?;
        let vol = build_sweep_cost_volume(&cl, &cr, &self.rig, &self.sweep)?;
        let (qw, qh, d) = (vol.width, vol.height, vol.planes);
        let qn = qw * qh;
        let c = vol.channels / 2;
        let s = 2 * c;
        let r = self.agg_radius;
        let counts_per_plane: Vec<(Vec<f32>, Vec<bool>)> = (0..d)
            .into_par_iter()
            .map(|i| {
                let mut ones = vec![0.0f64; qn];
                for q in 0..qn {
                    if vol.valid[i * qn + q] {
                        ones[q] = 1.0;
                    }
                }
                let count = box_sum(&ones, qw, qh, r);
                let mut out = vec![0.0f32; qn * s];
                let mut buf = vec![0.0f64; qn];
                for j in 0..s {
                    for q in 0..qn {
                        buf[q] = if ones[q] > 0.0 {
                            let cell = vol.cell(i, q / qw, q % qw);
                            let diff = (cell[j % c] - cell[c + j % c]) as f64;
                            if j < c {
                                diff.abs()
                            } else {
                                diff * diff
                            }
                        } else {
                            0.0
                        };
                    }
                    let sum = box_sum(&buf, qw, qh, r);
                    for q in 0..qn {
                        if count[q] > 0.0 {
                            out[q * s + j] = (sum[q] / count[q]) as f32;
                        }
                    }
                }
                (out, ones.iter().map(|&o| o > 0.0).collect())
            })
            .collect();
        let mut stats = Vec::with_capacity(d * qn * s);
        let mut cell_valid = Vec::with_capacity(d * qn);
        for (st, v) in counts_per_plane {
            stats.extend(st);
            cell_valid.extend(v);
        }
        let coarse_valid = crate::cost_volume::coarse_validity(&vol, COARSE_FACTOR);
        Ok(Prepared {
            width: left.width,
            height: left.height,
            f_l: extract_fine_features(left, &self.extractor)?,
            f_r: extract_fine_features(right, &self.extractor)?,
            planes: d,
            qw,
            qh,
            stats,
            cell_valid,
            coarse_valid,
            target: None,
        })
    }

    /// Prepares a rendered sample with its loss target: valid, visible,
    /// in-range ground truth where the coarse estimate is defined.
    pub fn prepare_sample(&self, sample: &Sample) -> Result<Prepared> {
        let mut prep = self.prepare(&sample.left, &sample.right)?;
        let visible = sample.matchable();
        let mask: Vec<bool> = (0..visible.len())
            .map(|p| {
                let g = sample.depth.depth[p];
                visible[p] && prep.coarse_valid[p] && g >= self.depth_range.0 && g < self.depth_range.1
            })
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        prep.target = Some(Target {
            depth: sample.depth.depth.clone(),
            mask,
            count,
        });
        Ok(prep)
    }

    pub fn forward(&self, params: &ParamVector, prep: &Prepared) -> Result<Outputs> {
        Ok(self.run(params, prep, false)?.0)
    }

    pub fn loss(&self, params: &ParamVector, prep: &Prepared) -> Result<LossParts> {
        let out = self.forward(params, prep)?;
        self.loss_of(prep, &out)
    }

    pub fn loss_of(&self, prep: &Prepared, out: &Outputs) -> Result<LossParts> {
        let (parts, _) = self.loss_parts(prep, out)?;
        Ok(parts)
    }

    /// The loss with its low-order bits, for finite-difference checks.
    pub fn loss_compensated(&self, params: &ParamVector, prep: &Prepared) -> Result<Compensated> {
        let out = self.forward(params, prep)?;
        Ok(self.loss_parts(prep, &out)?.1)
    }

    fn loss_parts(&self, prep: &Prepared, out: &Outputs) -> Result<(LossParts, Compensated)> {
        let t = target_of(prep)?;
        let fb = self.rig.fb();
        let (mut c, mut r) = (Compensated::default(), Compensated::default());
        for p in 0..t.mask.len() {
            if t.mask[p] {
                let (rc, rr) = self.residuals(out, p, t.depth[p], fb);
                c.add(rc.abs());
                r.add(rr.abs());
            }
        }
        let inv = 1.0 / t.count as f64;
        let mut total = c.scale(self.coarse_weight * inv);
        total.add_compensated(r.scale(self.refined_weight * inv));
        let parts = LossParts {
            total: total.value(),
            coarse: c.value() * inv,
            refined: r.value() * inv,
        };
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("loss is {}", parts.total)));
        }
        Ok((parts, total))
    }

    /// Supervised residuals of the coarse and refined estimates at pixel `p`.
    /// The refined residual is formed from the coarse residual and the offset
    /// so that small offsets are not rounded away against the depth.
    fn residuals(&self, out: &Outputs, p: usize, gt: f64, fb: f64) -> (f64, f64) {
        let dc = out.coarse.depth[p];
        let off = out.offset[p];
        let refined = out.refined.depth[p];
        let clamped = out.clamped[p] || !out.coarse.valid[p];
        (self.residual(dc, gt, fb), self.refined_residual(dc, off, refined, clamped, gt, fb))
    }

    #[inline]
    fn refined_residual(&self, dc: f64, off: f64, refined: f64, clamped: bool, gt: f64, fb: f64) -> f64 {
        if clamped {
            return self.residual(refined, gt, fb);
        }
        match (self.candidate_mode, self.supervision) {
            (CandidateMode::Depth, Supervision::Depth) => (dc - gt) + off,
            (CandidateMode::Depth, Supervision::Disparity) => -fb * ((dc - gt) + off) / (refined * gt),
            (CandidateMode::Pixel, Supervision::Disparity) => (fb / dc - fb / gt) - off,
            (CandidateMode::Pixel, Supervision::Depth) => refined - gt,
        }
    }

    /// Loss and its gradient; frozen groups get zero gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, prep: &Prepared) -> Result<(LossParts, ParamVector)> {
        let (out, grad) = self.run(params, prep, true)?;
        let parts = self.loss_of(prep, &out)?;
        Ok((parts, grad.expect("gradient requested")))
    }

    #[inline]
    fn residual(&self, pred: f64, gt: f64, fb: f64) -> f64 {
        match self.supervision {
            Supervision::Depth => pred - gt,
            Supervision::Disparity => fb / pred - fb / gt,
        }
    }

    /// Derivative of `scale * |r|` with respect to the prediction, where `r`
    /// is the residual at prediction `pred`.
    #[inline]
    fn loss_slope(&self, r: f64, pred: f64, fb: f64, scale: f64) -> f64 {
        let sign = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self.supervision {
            Supervision::Depth => scale * sign,
            Supervision::Disparity => scale * sign * (-fb / (pred * pred)),
        }
    }

    /// Runs the model on an image pair of any size: inputs are padded by edge
    /// replication to a multiple of 4 and outputs cropped back.
    pub fn infer(&self, params: &ParamVector, left: &ImageBuf, right: &ImageBuf) -> Result<Outputs> {
        if left.width != right.width || left.height != right.height || left.channels != right.channels {
            return Err(Error::Argument(format!(
                "left {}x{}x{} and right {}x{}x{} differ",
                left.width, left.height, left.channels, right.width, right.height, right.channels
            )));
        }
        let (w, h) = (left.width, left.height);
        let (pw, ph) = (w.div_ceil(COARSE_FACTOR) * COARSE_FACTOR, h.div_ceil(COARSE_FACTOR) * COARSE_FACTOR);
        if (pw, ph) == (w, h) {
            let prep = self.prepare(left, right)?;
            return self.forward(params, &prep);
        }
        let mut model = self.clone();
        model.rig = self.rig.with_size(pw, ph);
        let prep = model.prepare(&pad_image(left, pw, ph), &pad_image(right, pw, ph))?;
        let out = model.forward(params, &prep)?;
        Ok(crop_outputs(&out, pw, w, h))
    }

    fn run(&self, params: &ParamVector, prep: &Prepared, want_grad: bool) -> Result<(Outputs, Option<ParamVector>)> {
        let c = self.channels();
        if params.channels() != c {
            return Err(Error::Argument(format!(
                "parameters are for {} channels, model has {c}",
                params.channels()
            )));
        }
        if prep.planes != self.sweep.count() || prep.f_l.channels != c {
            return Err(Error::Argument("prepared sample does not match the model".into()));
        }
        let (w, h) = (prep.width, prep.height);
        let n = w * h;
        let fb = self.rig.fb();
        let d = prep.planes;

        // Coarse stage.
        let agg = params.group(Group::Aggregation);
        let qlogits = self.coarse_logits(agg, prep);
        let up = upsample_by(&qlogits, COARSE_FACTOR);
        let prob = normalize_softmax(&up);
        let mut expected = vec![0.0f64; n];
        for i in 0..d {
            let plane = prob.plane(i);
            for p in 0..n {
                expected[p] += i as f64 * plane[p];
            }
        }
        let mut dc = vec![0.0f64; n];
        let mut ddc = vec![0.0f64; n];
        for p in 0..n {
            let (depth, slope) = self.sweep.depth_of_index(&self.rig, expected[p]);
            dc[p] = depth;
            ddc[p] = slope;
        }
        let coarse = DepthMap::new(w, h, dc, prep.coarse_valid.clone())?;

        // Refinement stage.
        let warped = warp_right_to_left(&prep.f_r, &coarse, &self.rig)?;
        let f_u = compute_uncertainty_feature(&prep.f_l, &warped.features)?;
        let energy = pooled_energy(&f_u);
        let su_head = SuHead::from_slice(params.group(Group::SuHead));
        let fu_head = FuHead::from_slice(params.group(Group::FuHead));
        let depth_scale = self.su_depth_scale();
        let su: Vec<f64> = (0..n)
            .map(|p| {
                if coarse.valid[p] {
                    softplus(su_preactivation(&energy.data[p * c..(p + 1) * c], coarse.depth[p] / depth_scale, &su_head))
                } else {
                    0.0
                }
            })
            .collect();
        let su_map = SUMap {
            width: w,
            height: h,
            su,
        };
        let cand = build_similarity_features(&prep.f_l, &prep.f_r, &coarse, &su_map, &self.rig, self.candidate_mode)?;
        let uc = 3 * c;
        let colsum = compression_column_sums(params.group(Group::Compression), uc);

        let target = if want_grad { Some(target_of(prep)?) } else { None };
        let ctx = PixelContext {
            c,
            fb,
            mode: self.candidate_mode,
            depth_scale,
            su_head,
            fu_head,
            colsum: &colsum,
        };

        struct RowResult {
            su: Vec<f64>,
            offset: Vec<f64>,
            refined: Vec<f64>,
            clamped: Vec<bool>,
            grads: Option<RowGrads>,
        }

        let rows: Vec<RowResult> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rr = RowResult {
                    su: vec![0.0; w],
                    offset: vec![0.0; w],
                    refined: vec![0.0; w],
                    clamped: vec![false; w],
                    grads: target.map(|_| RowGrads::new(w, c)),
                };
                let mut scratch = PixelScratch::new(c);
                for x in 0..w {
                    let p = y * w + x;
                    let dcp = coarse.depth[p];
                    if !coarse.valid[p] {
                        rr.refined[x] = dcp;
                        continue;
                    }
                    let e = &energy.data[p * c..(p + 1) * c];
                    let z_su = su_preactivation(e, dcp / depth_scale, &su_head);
                    let sup = su_map.su[p];
                    let px = PixelInput {
                        dc: dcp,
                        z_su,
                        su: sup,
                        e,
                        f_s: &cand.f_s[p * c * CANDIDATES..(p + 1) * c * CANDIDATES],
                        slope: &cand.slope[p * c * CANDIDATES..(p + 1) * c * CANDIDATES],
                        valid: &cand.valid[p * CANDIDATES..(p + 1) * CANDIDATES],
                        floored: &cand.floored[p * CANDIDATES..(p + 1) * CANDIDATES],
                    };
                    let fwd = ctx.forward(&px, &mut scratch);
                    rr.su[x] = sup;
                    rr.offset[x] = fwd.offset;
                    rr.refined[x] = fwd.refined;
                    rr.clamped[x] = fwd.clamped;
                    if let (Some(t), Some(g)) = (target, rr.grads.as_mut()) {
                        if t.mask[p] {
                            let scale = 1.0 / t.count as f64;
                            let rc = self.residual(dcp, t.depth[p], fb);
                            let rr = self.refined_residual(dcp, fwd.offset, fwd.refined, fwd.clamped, t.depth[p], fb);
                            let g_ref = self.loss_slope(rr, fwd.refined, fb, self.refined_weight * scale);
                            let g_direct = self.loss_slope(rc, dcp, fb, self.coarse_weight * scale);
                            g.dc[x] += g_direct;
                            ctx.backward(&px, &fwd, &mut scratch, g_ref, x, g);
                        }
                    }
                }
                rr
            })
            .collect();

        let mut outputs = Outputs {
            coarse,
            expected_index: expected,
            su: Vec::with_capacity(n),
            offset: Vec::with_capacity(n),
            refined: DepthMap::constant(w, h, 0.0),
            clamped: Vec::with_capacity(n),
        };
        outputs.refined.valid = outputs.coarse.valid.clone();
        outputs.refined.depth.clear();
        for r in &rows {
            outputs.su.extend_from_slice(&r.su);
            outputs.offset.extend_from_slice(&r.offset);
            outputs.refined.depth.extend_from_slice(&r.refined);
            outputs.clamped.extend_from_slice(&r.clamped);
        }
        if !want_grad {
            return Ok((outputs, None));
        }

        // Reduce per-row head gradients in row order.
        let mut grad = params.zeros_like();
        let mut g_colsum = vec![0.0; uc];
        let mut g_dc = Vec::with_capacity(n);
        let mut g_e = Vec::with_capacity(n * c);
        {
            let g_su = grad.group_mut(Group::SuHead);
            for r in &rows {
                let rg = r.grads.as_ref().unwrap();
                for (a, b) in g_su.iter_mut().zip(&rg.su_head) {
                    *a += b;
                }
            }
        }
        {
            let g_fu = grad.group_mut(Group::FuHead);
            for r in &rows {
                let rg = r.grads.as_ref().unwrap();
                for (a, b) in g_fu.iter_mut().zip(&rg.fu_head) {
                    *a += b;
                }
                for (a, b) in g_colsum.iter_mut().zip(&rg.colsum) {
                    *a += b;
                }
            }
        }
        for r in rows {
            let rg = r.grads.unwrap();
            g_dc.extend(rg.dc);
            g_e.extend(rg.e);
        }
        for row in grad.group_mut(Group::Compression).chunks_exact_mut(uc) {
            row.copy_from_slice(&g_colsum);
        }

        // Pooled energy -> residuals -> warp positions -> coarse depth.
        let counts = window_counts(w, h, POOL_RADIUS);
        for k in 0..c {
            let t: Vec<f64> = (0..n).map(|p| g_e[p * c + k] / counts[p]).collect();
            let b = box_sum(&t, w, h, POOL_RADIUS);
            for p in 0..n {
                if warped.valid[p] && outputs.coarse.valid[p] {
                    let g_fu = 2.0 * f_u.data[p * c + k] * b[p];
                    let dcp = outputs.coarse.depth[p];
                    g_dc[p] += g_fu * (-warped.slope[p * c + k]) * fb / (dcp * dcp);
                }
            }
        }

        // Coarse depth -> expected index -> upsampled logits.
        let g_idx: Vec<f64> = (0..n)
            .map(|p| if outputs.coarse.valid[p] { g_dc[p] * ddc[p] } else { 0.0 })
            .collect();
        let mut g_up = ScoreVolume::zeros(d, h, w);
        g_up.data.par_chunks_mut(n).enumerate().for_each(|(i, gp)| {
            let plane = prob.plane(i);
            for p in 0..n {
                gp[p] = plane[p] * (i as f64 - outputs.expected_index[p]) * g_idx[p];
            }
        });
        let g_q = upsample_adjoint(&g_up, prep.qw, prep.qh, COARSE_FACTOR);
        let g_agg = self.coarse_logits_adjoint(&g_q, prep);
        grad.group_mut(Group::Aggregation).copy_from_slice(&g_agg);

        for g in Group::ALL {
            if params.is_frozen(g) {
                grad.group_mut(g).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok((outputs, Some(grad)))
    }

    fn coarse_logits(&self, agg: &[f64], prep: &Prepared) -> ScoreVolume {
        let (qw, qh) = (prep.qw, prep.qh);
        let qn = qw * qh;
        let s = agg.len() - 1;
        let bias = agg[s];
        let mut out = ScoreVolume::zeros(prep.planes, qh, qw);
        out.data.par_chunks_mut(qn).enumerate().for_each(|(i, lp)| {
            for q in 0..qn {
                lp[q] = if prep.cell_valid[i * qn + q] {
                    let st = &prep.stats[(i * qn + q) * s..(i * qn + q + 1) * s];
                    bias - st.iter().zip(agg).map(|(&a, &b)| a as f64 * b).sum::<f64>()
                } else {
                    INVALID_LOGIT
                };
            }
        });
        out
    }

    fn coarse_logits_adjoint(&self, g_q: &ScoreVolume, prep: &Prepared) -> Vec<f64> {
        let qn = prep.qw * prep.qh;
        let s = prep.stats.len() / (prep.planes * qn);
        let partial: Vec<Vec<f64>> = (0..prep.planes)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; s + 1];
                let gp = g_q.plane(i);
                for q in 0..qn {
                    if prep.cell_valid[i * qn + q] {
                        let st = &prep.stats[(i * qn + q) * s..(i * qn + q + 1) * s];
                        for j in 0..s {
                            g[j] -= gp[q] * st[j] as f64;
                        }
                        g[s] += gp[q];
                    }
                }
                g
            })
            .collect();
        let mut g = vec![0.0; s + 1];
        for part in partial {
            for (a, b) in g.iter_mut().zip(part) {
                *a += b;
            }
        }
        g
    }
}

fn target_of(prep: &Prepared) -> Result<&Target> {
    let t = prep
        .target
        .as_ref()
        .ok_or_else(|| Error::Argument("sample has no ground truth".into()))?;
    if t.count == 0 {
        return Err(Error::Argument("loss mask is empty".into()));
    }
    Ok(t)
}

/// Transpose of [`upsample_by`]: scatters full-resolution gradients back
/// onto the coarse grid.
pub fn upsample_adjoint(g: &ScoreVolume, qw: usize, qh: usize, factor: usize) -> ScoreVolume {
    let tx = upsample_taps(qw, factor);
    let ty = upsample_taps(qh, factor);
    let (w, qn) = (g.width, qw * qh);
    let mut out = ScoreVolume::zeros(g.planes, qh, qw);
    out.data.par_chunks_mut(qn).enumerate().for_each(|(i, dst)| {
        let src = g.plane(i);
        for (yy, &(y0, y1, sy)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, sx)) in tx.iter().enumerate() {
                let v = src[yy * w + xx];
                dst[y0 * qw + x0] += v * (1.0 - sy) * (1.0 - sx);
                dst[y0 * qw + x1] += v * (1.0 - sy) * sx;
                dst[y1 * qw + x0] += v * sy * (1.0 - sx);
                dst[y1 * qw + x1] += v * sy * sx;
            }
        }
    });
    out
}

fn pad_image(img: &ImageBuf, pw: usize, ph: usize) -> ImageBuf {
    let c = img.channels;
    let mut data = Vec::with_capacity(pw * ph * c);
    for y in 0..ph {
        let sy = y.min(img.height - 1);
        for x in 0..pw {
            let sx = x.min(img.width - 1);
            let o = (sy * img.width + sx) * c;
            data.extend_from_slice(&img.data[o..o + c]);
        }
    }
    ImageBuf {
        width: pw,
        height: ph,
        channels: c,
        data,
    }
}

fn crop_outputs(out: &Outputs, pw: usize, w: usize, h: usize) -> Outputs {
    fn crop<T: Copy>(v: &[T], pw: usize, w: usize, h: usize) -> Vec<T> {
        (0..h).flat_map(|y| v[y * pw..y * pw + w].iter().copied()).collect()
    }
    let map = |m: &DepthMap| DepthMap {
        width: w,
        height: h,
        depth: crop(&m.depth, pw, w, h),
        valid: crop(&m.valid, pw, w, h),
    };
    Outputs {
        coarse: map(&out.coarse),
        expected_index: crop(&out.expected_index, pw, w, h),
        su: crop(&out.su, pw, w, h),
        offset: crop(&out.offset, pw, w, h),
        refined: map(&out.refined),
        clamped: crop(&out.clamped, pw, w, h),
    }
}

struct PixelContext<'a> {
    c: usize,
    fb: f64,
    mode: CandidateMode,
    depth_scale: f64,
    su_head: SuHead<'a>,
    fu_head: FuHead<'a>,
    colsum: &'a [f64],
}

struct PixelInput<'a> {
    dc: f64,
    z_su: f64,
    su: f64,
    e: &'a [f64],
    f_s: &'a [f64],
    slope: &'a [f64],
    valid: &'a [bool],
    floored: &'a [bool],
}

struct PixelForward {
    scores: [f64; CANDIDATES],
    mean_index: f64,
    offset: f64,
    refined: f64,
    clamped: bool,
    /// Pixel mode: refined disparity before flooring.
    disparity: f64,
}

/// Per-pixel buffers reused across a row.
struct PixelScratch {
    z_fu: Vec<f64>,
    fu: Vec<f64>,
    g_fs: Vec<f64>,
}

impl PixelScratch {
    fn new(c: usize) -> Self {
        PixelScratch {
            z_fu: vec![0.0; 3 * c * CANDIDATES],
            fu: vec![0.0; 3 * c * CANDIDATES],
            g_fs: vec![0.0; c * CANDIDATES],
        }
    }
}

struct RowGrads {
    dc: Vec<f64>,
    e: Vec<f64>,
    su_head: Vec<f64>,
    fu_head: Vec<f64>,
    colsum: Vec<f64>,
}

impl RowGrads {
    fn new(w: usize, c: usize) -> Self {
        RowGrads {
            dc: vec![0.0; w],
            e: vec![0.0; w * c],
            su_head: vec![0.0; SuHead::param_len(c)],
            fu_head: vec![0.0; FuHead::param_len(c)],
            colsum: vec![0.0; 3 * c],
        }
    }
}

impl PixelContext<'_> {
    #[inline]
    fn residual(&self, px: &PixelInput, ch: usize, i: usize) -> f64 {
        let (b, k) = (ch / self.c, ch % self.c);
        px.f_s[k * CANDIDATES + unfold_source(b, i)]
    }

    fn forward(&self, px: &PixelInput, s: &mut PixelScratch) -> PixelForward {
        let uc = 3 * self.c;
        for ch in 0..uc {
            let base = self.fu_head.v[ch] * px.e[ch % self.c] + self.fu_head.v_s[ch] * px.su;
            for i in 0..CANDIDATES {
                let z = base + self.fu_head.beta[ch * CANDIDATES + i];
                s.z_fu[ch * CANDIDATES + i] = z;
                s.fu[ch * CANDIDATES + i] = softplus(z);
            }
        }
        let mut logits = [0.0; CANDIDATES];
        for i in 0..CANDIDATES {
            if !px.valid[i] {
                logits[i] = INVALID_LOGIT;
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..uc {
                let r = self.residual(px, ch, i);
                acc += self.colsum[ch] * (-0.5 * r * r * s.fu[ch * CANDIDATES + i]);
            }
            logits[i] = acc;
        }
        let scores = softmax5(&logits);
        let mean_index: f64 = (0..CANDIDATES).map(|i| offset_index(i) * scores[i]).sum();
        let offset = px.su * mean_index;
        let (refined, clamped, disparity) = match self.mode {
            CandidateMode::Depth => {
                let v = px.dc + offset;
                if v > DEPTH_FLOOR {
                    (v, false, 0.0)
                } else {
                    (DEPTH_FLOOR, true, 0.0)
                }
            }
            CandidateMode::Pixel => {
                let disp = self.fb / px.dc - offset;
                if disp > DISPARITY_FLOOR {
                    let v = self.fb / disp;
                    if v > DEPTH_FLOOR {
                        (v, false, disp)
                    } else {
                        (DEPTH_FLOOR, true, disp)
                    }
                } else {
                    (self.fb / DISPARITY_FLOOR, true, disp)
                }
            }
        };
        PixelForward {
            scores,
            mean_index,
            offset,
            refined,
            clamped,
            disparity,
        }
    }

    fn backward(&self, px: &PixelInput, fwd: &PixelForward, s: &mut PixelScratch, g_ref: f64, x: usize, g: &mut RowGrads) {
        let c = self.c;
        let uc = 3 * c;
        let mut g_dc = 0.0;
        let mut g_su = 0.0;
        let g_off = if fwd.clamped {
            0.0
        } else {
            match self.mode {
                CandidateMode::Depth => {
                    g_dc += g_ref;
                    g_ref
                }
                CandidateMode::Pixel => {
                    let g_disp = g_ref * (-self.fb / (fwd.disparity * fwd.disparity));
                    g_dc += g_disp * (-self.fb / (px.dc * px.dc));
                    -g_disp
                }
            }
        };
        g_su += g_off * fwd.mean_index;
        let g_m = g_off * px.su;
        let g_scores: [f64; CANDIDATES] = std::array::from_fn(|i| g_m * offset_index(i));
        let dot: f64 = (0..CANDIDATES).map(|i| fwd.scores[i] * g_scores[i]).sum();

        s.g_fs.iter_mut().for_each(|v| *v = 0.0);
        let e_grad = &mut g.e[x * c..(x + 1) * c];
        let (fu_v, rest) = g.fu_head.split_at_mut(uc);
        let (fu_vs, fu_beta) = rest.split_at_mut(uc);
        for i in 0..CANDIDATES {
            if !px.valid[i] {
                continue;
            }
            let g_logit = fwd.scores[i] * (g_scores[i] - dot);
            if g_logit == 0.0 {
                continue;
            }
            for ch in 0..uc {
                let (b, k) = (ch / c, ch % c);
                let src = unfold_source(b, i);
                let r = px.f_s[k * CANDIDATES + src];
                let fu = s.fu[ch * CANDIDATES + i];
                let t = -0.5 * r * r;
                g.colsum[ch] += g_logit * t * fu;
                let g_fu = g_logit * self.colsum[ch] * t;
                s.g_fs[k * CANDIDATES + src] += g_logit * self.colsum[ch] * (-r * fu);
                let g_z = g_fu * sigmoid(s.z_fu[ch * CANDIDATES + i]);
                fu_v[ch] += g_z * px.e[k];
                fu_vs[ch] += g_z * px.su;
                fu_beta[ch * CANDIDATES + i] += g_z;
                e_grad[k] += g_z * self.fu_head.v[ch];
                g_su += g_z * self.fu_head.v_s[ch];
            }
        }

        for i in 0..CANDIDATES {
            if !px.valid[i] {
                continue;
            }
            let g_pos: f64 = (0..c).map(|k| s.g_fs[k * CANDIDATES + i] * px.slope[k * CANDIDATES + i]).sum();
            let g_disp = -g_pos;
            let k = offset_index(i);
            match self.mode {
                CandidateMode::Depth => {
                    if !px.floored[i] {
                        let cd = px.dc + k * px.su;
                        let g_cd = g_disp * (-self.fb / (cd * cd));
                        g_dc += g_cd;
                        g_su += g_cd * k;
                    }
                }
                CandidateMode::Pixel => {
                    g_dc += g_disp * (-self.fb / (px.dc * px.dc));
                    g_su -= k * g_disp;
                }
            }
        }
        let g_z_su = g_su * sigmoid(px.z_su);
        for k in 0..c {
            g.su_head[k] += g_z_su * px.e[k];
            e_grad[k] += g_z_su * self.su_head.w_e[k];
        }
        g.su_head[c] += g_z_su * px.dc / self.depth_scale;
        g.su_head[c + 1] += g_z_su;
        g_dc += g_z_su * self.su_head.w_d / self.depth_scale;
        g.dc[x] += g_dc;
    }
}

/// Everything [`Model::run`] needs from the refinement module, computed
/// through the public operations for cross-checking.
#[cfg(test)]
pub(crate) fn reference_refinement(
    model: &Model,
    params: &ParamVector,
    prep: &Prepared,
    coarse: &DepthMap,
) -> Result<(Vec<f64>, Vec<f64>, DepthMap)> {
    use crate::refinement::{
        compute_offset, estimate_fu, estimate_su, refine_depth, refine_depth_pixel, score_candidates, unfold_candidates,
        Field,
    };
    let warped = warp_right_to_left(&prep.f_r, coarse, &model.rig)?;
    let f_u: Field = compute_uncertainty_feature(&prep.f_l, &warped.features)?;
    let mut scaled = coarse.clone();
    scaled.depth.iter_mut().for_each(|d| *d /= model.su_depth_scale());
    let su = estimate_su(&f_u, &scaled, &SuHead::from_slice(params.group(Group::SuHead)))?;
    let fu = estimate_fu(&f_u, &su, &FuHead::from_slice(params.group(Group::FuHead)))?;
    let cand = build_similarity_features(&prep.f_l, &prep.f_r, coarse, &su, &model.rig, model.candidate_mode)?;
    let scores = score_candidates(&unfold_candidates(&cand), &fu, params.group(Group::Compression))?;
    let offset = compute_offset(&scores, &su)?;
    let refined = match model.candidate_mode {
        CandidateMode::Depth => refine_depth(coarse, &offset)?,
        CandidateMode::Pixel => refine_depth_pixel(coarse, &offset, &model.rig)?,
    };
    Ok((su.su, offset.offset, refined.depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_depth_planes, DisparityLevels};
    use crate::learning::finite_difference_gradient;
    use crate::params::InitConfig;
    use crate::scenes::{generate_scene, SceneSpec, Surface};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// fB = 5 px*m: depths 1-9 m map to 5-0.55 px.
    fn tiny_rig(w: usize, h: usize) -> StereoRig {
        StereoRig::new(0.1, 50.0, w, h).unwrap()
    }

    fn tiny_sample(w: usize, h: usize, seed: u64) -> Sample {
        let rig = tiny_rig(w, h);
        let spec = SceneSpec {
            rig,
            background: Surface {
                depth: 6.0,
                rect: None,
                slope_x: 0.004,
                slope_y: 0.0,
                texture_seed: seed,
                texture_frequency: 0.4,
            },
            primitives: vec![Surface {
                texture_frequency: 0.35,
                ..Surface::fronto_parallel(2.3, Some([w as f64 * 0.5, 0.0, w as f64 * 0.8, h as f64 * 0.6]), seed + 1)
            }],
            noise_sigma: 0.01,
        };
        generate_scene(&spec, seed).unwrap()
    }

    fn tiny_model(w: usize, h: usize) -> Model {
        let planes = sample_depth_planes(1.0, 9.0, 16).unwrap();
        let mut m = Model::new(tiny_rig(w, h), Sweep::Depth(planes));
        m.agg_radius = 1;
        m
    }

    fn perturbed(model: &Model, init: &InitConfig, seed: u64) -> ParamVector {
        let mut p = ParamVector::init(model.channels(), init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = p.flat();
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        p.set_flat(&flat).unwrap();
        p
    }

    #[test]
    fn forward_matches_standalone_operations() {
        for mode in [CandidateMode::Depth, CandidateMode::Pixel] {
            let mut model = tiny_model(32, 16);
            model.candidate_mode = mode;
            let init = InitConfig { su: if mode == CandidateMode::Depth { 0.7 } else { 0.8 }, ..Default::default() };
            let params = perturbed(&model, &init, 3);
            let sample = tiny_sample(32, 16, 4);
            let prep = model.prepare_sample(&sample).unwrap();
            let out = model.forward(&params, &prep).unwrap();
            let (su, offset, refined) = reference_refinement(&model, &params, &prep, &out.coarse).unwrap();
            for p in 0..out.su.len() {
                if !out.coarse.valid[p] {
                    continue;
                }
                assert!((out.su[p] - su[p]).abs() < 1e-9);
                assert!((out.offset[p] - offset[p]).abs() < 1e-9, "{mode:?} pixel {p}");
                assert!((out.refined.depth[p] - refined.depth[p]).abs() < 1e-9);
                assert!(out.offset[p].abs() <= 2.0 * out.su[p] + 1e-12);
            }
        }
    }

    #[test]
    fn coarse_logits_match_aggregate_costs() {
        let model = tiny_model(32, 16);
        let params = perturbed(&model, &InitConfig::default(), 5);
        let sample = tiny_sample(32, 16, 6);
        let prep = model.prepare(&sample.left, &sample.right).unwrap();
        let cl = extract_coarse_features(&sample.left, &model.extractor).unwrap();
        let cr = extract_coarse_features(&sample.right, &model.extractor).unwrap();
        let vol = build_sweep_cost_volume(&cl, &cr, &model.rig, &model.sweep).unwrap();
        let direct = crate::cost_volume::aggregate_costs(&vol, params.group(Group::Aggregation), model.agg_radius).unwrap();
        let ours = model.coarse_logits(params.group(Group::Aggregation), &prep);
        for (a, b) in ours.data.iter().zip(&direct.data) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut q = ScoreVolume::zeros(2, 3, 5);
        q.data.iter_mut().for_each(|v| *v = rng.random());
        let mut g = ScoreVolume::zeros(2, 12, 20);
        g.data.iter_mut().for_each(|v| *v = rng.random());
        let up = upsample_by(&q, 4);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let adj = upsample_adjoint(&g, 5, 3, 4);
        let rhs: f64 = q.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs());
    }

    fn check_gradient(model: &Model, params: &ParamVector, prep: &Prepared) -> (usize, f64) {
        let (_, analytic) = model.loss_and_grad(params, prep).unwrap();
        let fd = finite_difference_gradient(|p| model.loss_compensated(p, prep), params).unwrap();
        let (a, f) = (analytic.flat(), fd.flat());
        let mut worst = 0.0f64;
        let mut checked = 0;
        for k in 0..a.len() {
            let m = a[k].abs().max(f[k].abs());
            if m > 1e-8 {
                checked += 1;
                worst = worst.max((a[k] - f[k]).abs() / m);
            }
        }
        (checked, worst)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let sample = tiny_sample(16, 8, 11);
        for (mode, sup) in [
            (CandidateMode::Depth, Supervision::Depth),
            (CandidateMode::Pixel, Supervision::Disparity),
        ] {
            let mut model = tiny_model(16, 8);
            model.candidate_mode = mode;
            model.supervision = sup;
            let params = perturbed(&model, &InitConfig { su: 0.6, ..Default::default() }, 12);
            let prep = model.prepare_sample(&sample).unwrap();
            let (checked, worst) = check_gradient(&model, &params, &prep);
            assert!(checked > 100, "{checked}");
            assert!(worst < 1e-4, "{mode:?}/{sup:?}: worst relative error {worst}");
        }
    }

    #[test]
    #[ignore]
    fn gradient_diagnostics() {
        let sample = tiny_sample(16, 8, 11);
        let model = tiny_model(16, 8);
        let params = perturbed(&model, &InitConfig { su: 0.6, ..Default::default() }, 12);
        let prep = model.prepare_sample(&sample).unwrap();
        let (_, analytic) = model.loss_and_grad(&params, &prep).unwrap();
        let a = analytic.flat();
        let layout = params.flat_layout();
        let base = params.flat();
        for (k, (g, i)) in layout.iter().enumerate() {
            let mut row = format!("{:?}[{i}] a={:.6e}", g, a[k]);
            for h in [1e-3, 1e-4, 1e-5, 1e-6] {
                let mut f = base.clone();
                let mut p = params.clone();
                f[k] += h;
                p.set_flat(&f).unwrap();
                let up = model.loss(&p, &prep).unwrap().total;
                f[k] -= 2.0 * h;
                p.set_flat(&f).unwrap();
                let dn = model.loss(&p, &prep).unwrap().total;
                row += &format!(" h{h:e}={:.6e}", (up - dn) / (2.0 * h));
            }
            let fd = {
                let h = 1e-4 * base[k].abs().max(1.0);
                let mut f = base.clone();
                let mut p = params.clone();
                f[k] += h;
                p.set_flat(&f).unwrap();
                let up = model.loss(&p, &prep).unwrap().total;
                f[k] -= 2.0 * h;
                p.set_flat(&f).unwrap();
                let dn = model.loss(&p, &prep).unwrap().total;
                (up - dn) / (2.0 * h)
            };
            let rel = (a[k] - fd).abs() / a[k].abs().max(fd.abs()).max(1e-30);
            if rel > 5e-5 {
                println!("{row} rel={rel:.2e}");
            }
        }
    }

    #[test]
    fn disparity_sweep_model_runs() {
        let rig = tiny_rig(32, 16);
        let planes = sample_depth_planes(1.0, 9.0, 16).unwrap();
        let levels = DisparityLevels::matching_depth_range(&rig, &planes).unwrap();
        let mut model = Model::new(rig, Sweep::Disparity(levels));
        model.candidate_mode = CandidateMode::Pixel;
        assert!((model.depth_range.0 - 1.0).abs() < 1e-12 && (model.depth_range.1 - 9.0).abs() < 1e-12);
        let params = ParamVector::init(model.channels(), &InitConfig { su: 1.0, ..Default::default() }).unwrap();
        let prep = model.prepare_sample(&tiny_sample(32, 16, 2)).unwrap();
        let out = model.forward(&params, &prep).unwrap();
        assert!(out.refined.depth.iter().all(|d| d.is_finite() && *d > 0.0));
    }

    #[test]
    fn infer_pads_and_crops() {
        let model = tiny_model(30, 14);
        let s = tiny_sample(30, 14, 3);
        let params = ParamVector::init(model.channels(), &InitConfig::default()).unwrap();
        let out = model.infer(&params, &s.left, &s.right).unwrap();
        assert_eq!((out.refined.width, out.refined.height), (30, 14));
        assert_eq!(out.su.len(), 30 * 14);
    }
}
