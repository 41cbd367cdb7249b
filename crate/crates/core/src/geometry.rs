//! Rectified stereo geometry: triangulation, fronto-parallel plane sampling and
//! the propagation of disparity errors into depth errors.
//!
//! Convention: the left image is the reference. A left pixel `(x, y)` with
//! disparity `d` matches the right pixel `(x - d, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calibrated, rectified camera pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub baseline_m: f64,
    pub focal_px: f64,
    pub width_px: usize,
    pub height_px: usize,
}

impl StereoRig {
    pub fn new(baseline_m: f64, focal_px: f64, width_px: usize, height_px: usize) -> Result<Self> {
        if !(baseline_m.is_finite() && baseline_m > 0.0) {
            return Err(Error::Argument(format!("baseline must be > 0, got {baseline_m}")));
        }
        if !(focal_px.is_finite() && focal_px > 0.0) {
            return Err(Error::Argument(format!("focal length must be > 0, got {focal_px}")));
        }
        if width_px == 0 || height_px == 0 {
            return Err(Error::Argument("image dimensions must be >= 1".into()));
        }
        Ok(StereoRig {
            baseline_m,
            focal_px,
            width_px,
            height_px,
        })
    }

    /// SceneFlow-like synthetic rig: 27 cm baseline, 1050 px focal length.
    pub fn sceneflow(width_px: usize, height_px: usize) -> Self {
        StereoRig {
            baseline_m: 0.27,
            focal_px: 1050.0,
            width_px,
            height_px,
        }
    }

    /// DrivingStereo-like rig: 54 cm baseline, 1003 px focal length.
    pub fn drivingstereo(width_px: usize, height_px: usize) -> Self {
        StereoRig {
            baseline_m: 0.54,
            focal_px: 1003.0,
            width_px,
            height_px,
        }
    }

    /// Looks up a built-in rig by name.
    pub fn preset(name: &str, width_px: usize, height_px: usize) -> Result<Self> {
        match name {
            "sceneflow" => Ok(Self::sceneflow(width_px, height_px)),
            "drivingstereo" => Ok(Self::drivingstereo(width_px, height_px)),
            other => Err(Error::Config(format!("unknown rig preset '{other}'"))),
        }
    }

    /// The product `f * B` in pixel-meters.
    #[inline]
    pub fn fb(&self) -> f64 {
        self.focal_px * self.baseline_m
    }

    pub fn with_size(mut self, width_px: usize, height_px: usize) -> Self {
        self.width_px = width_px;
        self.height_px = height_px;
        self
    }
}

pub fn depth_to_disparity(rig: &StereoRig, depth: f64) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be > 0, got {depth}")));
    }
    Ok(rig.fb() / depth)
}

pub fn disparity_to_depth(rig: &StereoRig, disparity: f64) -> Result<f64> {
    if !(disparity > 0.0) {
        return Err(Error::Domain(format!("disparity must be > 0, got {disparity}")));
    }
    Ok(rig.fb() / disparity)
}

/// Disparity magnitude of the matching candidate for a fronto-parallel plane
/// at `plane_depth`. The candidate column is `x - candidate_disparity`.
pub fn candidate_disparity(rig: &StereoRig, plane_depth: f64) -> Result<f64> {
    if !(plane_depth > 0.0) {
        return Err(Error::Domain(format!(
            "plane depth must be > 0, got {plane_depth}"
        )));
    }
    Ok(rig.fb() / plane_depth)
}

/// Absolute depth error caused by a disparity error at a given true depth.
///
/// The predicted disparity is `dis_gt - disparity_error`; it must stay
/// positive, otherwise the point lies beyond the measurable range.
pub fn depth_error_from_disparity_error(
    rig: &StereoRig,
    depth_gt: f64,
    disparity_error: f64,
) -> Result<f64> {
    let dis_gt = depth_to_disparity(rig, depth_gt)?;
    let dis_pred = dis_gt - disparity_error;
    if !(dis_pred > 0.0) {
        return Err(Error::Domain(format!(
            "predicted disparity {dis_pred} <= 0: depth beyond measurable range"
        )));
    }
    Ok(depth_gt * disparity_error.abs() / dis_pred)
}

/// `D` uniformly spaced fronto-parallel planes starting at `d_min`.
///
/// Plane `i` sits at `d_min + i * (d_max - d_min) / D`, so `d_max` itself is
/// never sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlanes {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    pub planes: Vec<f64>,
}

impl DepthPlanes {
    #[inline]
    pub fn step(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    /// Metric depth of a (possibly fractional) plane index.
    #[inline]
    pub fn depth_at(&self, index: f64) -> f64 {
        self.d_min + index * self.step()
    }

    /// Index of the plane closest to `depth`, clamped to the valid range.
    pub fn nearest_index(&self, depth: f64) -> usize {
        let idx = ((depth - self.d_min) / self.step()).round();
        idx.clamp(0.0, (self.count - 1) as f64) as usize
    }
}

pub fn sample_depth_planes(d_min: f64, d_max: f64, count: usize) -> Result<DepthPlanes> {
    if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
        return Err(Error::Argument(format!(
            "need 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(Error::Argument(format!("need at least 2 planes, got {count}")));
    }
    let step = (d_max - d_min) / count as f64;
    let planes = (0..count).map(|i| d_min + i as f64 * step).collect();
    Ok(DepthPlanes {
        d_min,
        d_max,
        count,
        planes,
    })
}

/// Uniformly spaced disparity levels (pixels), the sampling used by
/// disparity-based cost volumes. Level `j` is `k_min + j * (k_max - k_min) / count`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityLevels {
    pub k_min: f64,
    pub k_max: f64,
    pub count: usize,
    pub levels: Vec<f64>,
}

impl DisparityLevels {
    pub fn new(k_min: f64, k_max: f64, count: usize) -> Result<Self> {
        if !(k_min >= 0.0 && k_max > k_min && k_max.is_finite()) {
            return Err(Error::Argument(format!(
                "need 0 <= k_min < k_max, got [{k_min}, {k_max}]"
            )));
        }
        if count < 2 {
            return Err(Error::Argument(format!("need at least 2 levels, got {count}")));
        }
        let step = (k_max - k_min) / count as f64;
        Ok(DisparityLevels {
            k_min,
            k_max,
            count,
            levels: (0..count).map(|j| k_min + j as f64 * step).collect(),
        })
    }

    /// Levels spanning the disparities of the depth range `[d_min, d_max]` with
    /// the same budget as a depth sweep.
    pub fn matching_depth_range(rig: &StereoRig, planes: &DepthPlanes) -> Result<Self> {
        Self::new(rig.fb() / planes.d_max, rig.fb() / planes.d_min, planes.count)
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.k_max - self.k_min) / self.count as f64
    }

    #[inline]
    pub fn disparity_at(&self, index: f64) -> f64 {
        self.k_min + index * self.step()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sf() -> StereoRig {
        StereoRig::sceneflow(256, 128)
    }

    #[test]
    fn triangulation_examples() {
        let rig = sf();
        assert_relative_eq!(depth_to_disparity(&rig, 8.0).unwrap(), 35.4375, epsilon = 1e-12);
        assert_relative_eq!(depth_to_disparity(&rig, 283.5).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(disparity_to_depth(&rig, 5.67).unwrap(), 50.0, epsilon = 1e-9);
        let ds = StereoRig::drivingstereo(256, 128);
        assert_relative_eq!(disparity_to_depth(&ds, 541.62).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_positive_inputs_are_domain_errors() {
        let rig = sf();
        assert!(matches!(depth_to_disparity(&rig, 0.0), Err(Error::Domain(_))));
        assert!(matches!(depth_to_disparity(&rig, -1.0), Err(Error::Domain(_))));
        assert!(matches!(disparity_to_depth(&rig, 0.0), Err(Error::Domain(_))));
        assert!(matches!(candidate_disparity(&rig, -3.0), Err(Error::Domain(_))));
        assert!(matches!(depth_to_disparity(&rig, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn disparity_to_depth_decreases_toward_zero() {
        let rig = sf();
        let mut prev = f64::INFINITY;
        for k in 1..40 {
            let d = disparity_to_depth(&rig, 2f64.powi(k)).unwrap();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn candidate_columns() {
        let rig = sf();
        let c = candidate_disparity(&rig, 28.35).unwrap();
        assert_relative_eq!(c, 10.0, epsilon = 1e-12);
        assert_relative_eq!(300.0 - c, 290.0, epsilon = 1e-12);
        assert_relative_eq!(candidate_disparity(&rig, 283.5).unwrap(), 1.0, epsilon = 1e-12);
        assert!(candidate_disparity(&rig, 1e300).unwrap() < 1e-290);
    }

    #[test]
    fn error_propagation_examples() {
        let rig = sf();
        let e = depth_error_from_disparity_error(&rig, 50.0, 0.5).unwrap();
        // dis_gt = 5.67, dis_pred = 5.17
        assert_relative_eq!(e, 283.5 / 5.17 - 50.0, epsilon = 1e-10);
        assert!((e - 4.8356).abs() < 1e-4);
        let e = depth_error_from_disparity_error(&rig, 10.0, 0.5).unwrap();
        assert_relative_eq!(e, 10.0 * 0.5 / 27.85, epsilon = 1e-12);
        assert!((e - 0.17953).abs() < 1e-5);
        assert_eq!(depth_error_from_disparity_error(&rig, 10.0, 0.0).unwrap(), 0.0);
        // 283.5 m has 1 px of disparity; a 1 px error leaves nothing to measure.
        assert!(matches!(
            depth_error_from_disparity_error(&rig, 283.5, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn plane_sampling_examples() {
        let p = sample_depth_planes(1.0, 81.0, 80).unwrap();
        assert_eq!(p.planes.len(), 80);
        for (i, d) in p.planes.iter().enumerate() {
            assert_eq!(*d, (i + 1) as f64);
        }
        let p = sample_depth_planes(2.0, 4.0, 2).unwrap();
        assert_eq!(p.planes, vec![2.0, 3.0]);
        let p = sample_depth_planes(1.0, 81.0, 160).unwrap();
        assert_eq!(p.step(), 0.5);
        assert_eq!(p.planes[1], 1.5);
        assert_eq!(p.nearest_index(40.4), 79);
        assert_eq!(p.nearest_index(500.0), 159);
    }

    #[test]
    fn plane_sampling_rejects_bad_ranges() {
        assert!(sample_depth_planes(0.0, 10.0, 4).is_err());
        assert!(sample_depth_planes(5.0, 5.0, 4).is_err());
        assert!(sample_depth_planes(1.0, 10.0, 1).is_err());
        assert!(sample_depth_planes(1.0, f64::INFINITY, 4).is_err());
    }

    #[test]
    fn disparity_levels_mirror_plane_formula() {
        let rig = sf();
        let planes = sample_depth_planes(1.0, 81.0, 80).unwrap();
        let lv = DisparityLevels::matching_depth_range(&rig, &planes).unwrap();
        assert_eq!(lv.count, 80);
        assert_relative_eq!(lv.k_min, 283.5 / 81.0, epsilon = 1e-12);
        assert_relative_eq!(lv.levels[1] - lv.levels[0], lv.step(), epsilon = 1e-12);
    }
}
