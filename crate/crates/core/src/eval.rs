//! Depth error metrics: MAE, MAE per ground-truth depth bin (PMAE), error
//! maps and CSV reports.

use std::path::Path;

use crate::cost_volume::DepthMap;
use crate::error::{Error, Result};
use crate::image::write_pgm_bytes;

/// Default saturation error of error maps, meters.
pub const DEFAULT_E_MAX: f64 = 5.0;

/// Ordered, disjoint half-open depth intervals `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    bins: Vec<(f64, f64)>,
}

impl Default for DepthBins {
    /// `[1,10), [10,20), ..., [70,80)`.
    fn default() -> Self {
        let mut bins = vec![(1.0, 10.0)];
        bins.extend((1..8).map(|k| (10.0 * k as f64, 10.0 * (k + 1) as f64)));
        DepthBins { bins }
    }
}

impl DepthBins {
    pub fn new(bins: Vec<(f64, f64)>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Argument("need at least one depth bin".into()));
        }
        for (k, &(lo, hi)) in bins.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Argument(format!("bin {k} [{lo}, {hi}) is empty")));
            }
            if k > 0 && lo < bins[k - 1].1 {
                return Err(Error::Argument(format!("bin {k} overlaps or precedes bin {}", k - 1)));
            }
        }
        Ok(DepthBins { bins })
    }

    pub fn bins(&self) -> &[(f64, f64)] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        let k = self.bins.partition_point(|&(_, hi)| hi <= depth);
        match self.bins.get(k) {
            Some(&(lo, _)) if depth >= lo => Some(k),
            _ => None,
        }
    }
}

fn check_aligned(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<()> {
    if !pred.same_shape(gt) || mask.len() != gt.depth.len() {
        return Err(Error::Argument(format!(
            "prediction {}x{}, ground truth {}x{} and mask of {} do not align",
            pred.width,
            pred.height,
            gt.width,
            gt.height,
            mask.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<f64> {
    check_aligned(pred, gt, mask)?;
    let mut acc = ErrorAccumulator::new(DepthBins::default());
    acc.add(pred, gt, mask)?;
    acc.mae().ok_or_else(|| Error::Argument("MAE over an empty mask".into()))
}

/// MAE per bin, keyed on ground-truth depth; `None` for empty bins.
pub fn pmae(pred: &DepthMap, gt: &DepthMap, mask: &[bool], bins: &DepthBins) -> Result<Vec<Option<f64>>> {
    check_aligned(pred, gt, mask)?;
    let mut acc = ErrorAccumulator::new(bins.clone());
    acc.add(pred, gt, mask)?;
    Ok(acc.bin_mae())
}

/// Pixels that count for evaluation: valid ground truth in `[d_min, d_max)`.
pub fn evaluation_mask(gt: &DepthMap, range: (f64, f64)) -> Vec<bool> {
    gt.depth
        .iter()
        .zip(&gt.valid)
        .map(|(&d, &v)| v && d >= range.0 && d < range.1)
        .collect()
}

/// Running absolute-error sums over many maps, accumulated in pixel order.
#[derive(Debug, Clone)]
pub struct ErrorAccumulator {
    bins: DepthBins,
    sum: f64,
    count: usize,
    bin_sum: Vec<f64>,
    bin_count: Vec<usize>,
}

impl ErrorAccumulator {
    pub fn new(bins: DepthBins) -> Self {
        let n = bins.len();
        ErrorAccumulator {
            bins,
            sum: 0.0,
            count: 0,
            bin_sum: vec![0.0; n],
            bin_count: vec![0; n],
        }
    }

    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<()> {
        check_aligned(pred, gt, mask)?;
        for p in 0..mask.len() {
            if !mask[p] {
                continue;
            }
            let g = gt.depth[p];
            let e = (g - pred.depth[p]).abs();
            self.sum += e;
            self.count += 1;
            if let Some(k) = self.bins.bin_of(g) {
                self.bin_sum[k] += e;
                self.bin_count[k] += 1;
            }
        }
        Ok(())
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn bin_mae(&self) -> Vec<Option<f64>> {
        self.bin_sum
            .iter()
            .zip(&self.bin_count)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect()
    }

    pub fn report(&self, meta: RunMeta) -> Result<EvalReport> {
        let mae = self
            .mae()
            .ok_or_else(|| Error::Argument("no pixels to evaluate".into()))?;
        let bins = self
            .bins
            .bins()
            .iter()
            .zip(self.bin_mae())
            .zip(&self.bin_count)
            .map(|((&(lo, hi), mae), &count)| BinStat { lo, hi, mae, count })
            .collect();
        Ok(EvalReport {
            meta,
            mae,
            count: self.count,
            bins,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMeta {
    pub variant: String,
    pub rig: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub mae: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub mae: f64,
    /// Pixels in the overall MAE.
    pub count: usize,
    pub bins: Vec<BinStat>,
}

impl EvalReport {
    pub fn bin_mae(&self, lo: f64) -> Option<f64> {
        self.bins.iter().find(|b| b.lo == lo).and_then(|b| b.mae)
    }
}

/// Writes `variant,bin_lo,bin_hi,mae_m,count` rows: one overall row with
/// empty bin bounds, then one per bin (empty `mae_m` for empty bins).
pub fn write_report_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "bin_lo", "bin_hi", "mae_m", "count"])?;
    for r in reports {
        w.write_record([r.meta.variant.as_str(), "", "", &format!("{:.6}", r.mae), &r.count.to_string()])?;
        for b in &r.bins {
            let mae = b.mae.map(|m| format!("{m:.6}")).unwrap_or_default();
            w.write_record([r.meta.variant.clone(), b.lo.to_string(), b.hi.to_string(), mae, b.count.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gray level of an absolute error: `|e|` clamped to `[0, e_max]`, mapped
/// linearly to `0..=255`, rounded half up.
pub fn error_gray(error: f64, e_max: f64) -> u8 {
    let t = (error.abs() / e_max).clamp(0.0, 1.0);
    (t * 255.0 + 0.5).floor() as u8
}

/// Grayscale error map: darker is lower error; unmasked pixels are white.
pub fn emit_error_map(pred: &DepthMap, gt: &DepthMap, mask: &[bool], e_max: f64, path: impl AsRef<Path>) -> Result<()> {
    check_aligned(pred, gt, mask)?;
    if !(e_max > 0.0) {
        return Err(Error::Argument(format!("e_max must be > 0, got {e_max}")));
    }
    let bytes: Vec<u8> = (0..mask.len())
        .map(|p| if mask[p] { error_gray(gt.depth[p] - pred.depth[p], e_max) } else { 255 })
        .collect();
    write_pgm_bytes(path.as_ref(), &bytes, gt.width, gt.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuf;

    fn map(d: &[f64]) -> DepthMap {
        DepthMap::new(d.len(), 1, d.to_vec(), vec![true; d.len()]).unwrap()
    }

    #[test]
    fn mae_examples() {
        let gt = map(&[10.0, 20.0]);
        assert_eq!(mae(&gt, &gt, &[true, true]).unwrap(), 0.0);
        assert_eq!(mae(&map(&[11.0, 18.0]), &gt, &[true, true]).unwrap(), 1.5);
        assert!(mae(&gt, &gt, &[false, false]).is_err());
    }

    #[test]
    fn pmae_examples() {
        let bins = DepthBins::new(vec![(1.0, 10.0), (10.0, 20.0)]).unwrap();
        let r = pmae(&map(&[6.0, 18.0]), &map(&[5.0, 15.0]), &[true, true], &bins).unwrap();
        assert_eq!(r, vec![Some(1.0), Some(3.0)]);
        let r = pmae(&map(&[6.0]), &map(&[5.0]), &[true], &bins).unwrap();
        assert_eq!(r, vec![Some(1.0), None]);
    }

    #[test]
    fn boundaries_go_to_the_upper_bin() {
        let bins = DepthBins::default();
        assert_eq!(bins.bin_of(10.0), Some(1));
        assert_eq!(bins.bin_of(9.999), Some(0));
        assert_eq!(bins.bin_of(1.0), Some(0));
        assert_eq!(bins.bin_of(0.99), None);
        assert_eq!(bins.bin_of(80.0), None);
        assert_eq!(bins.len(), 8);
    }

    #[test]
    fn bins_must_be_ordered() {
        assert!(DepthBins::new(vec![(1.0, 5.0), (4.0, 8.0)]).is_err());
        assert!(DepthBins::new(vec![(3.0, 3.0)]).is_err());
        assert!(DepthBins::new(vec![]).is_err());
    }

    #[test]
    fn gray_levels() {
        assert_eq!(error_gray(0.0, 5.0), 0);
        assert_eq!(error_gray(5.0, 5.0), 255);
        assert_eq!(error_gray(9.0, 5.0), 255);
        assert_eq!(error_gray(2.5, 5.0), 128);
        assert_eq!(error_gray(-2.5, 5.0), 128);
    }

    #[test]
    fn error_map_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pgm");
        let gt = map(&[10.0, 10.0, 10.0]);
        emit_error_map(&map(&[10.0, 15.0, 3.0]), &gt, &[true, true, false], 5.0, &path).unwrap();
        let img = ImageBuf::read_pnm(&path).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_report_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut acc = ErrorAccumulator::new(DepthBins::new(vec![(1.0, 10.0), (10.0, 20.0)]).unwrap());
        acc.add(&map(&[6.0, 30.0]), &map(&[5.0, 31.0]), &[true, true]).unwrap();
        let meta = RunMeta {
            variant: "BL+Dep".into(),
            ..Default::default()
        };
        write_report_csv(&[acc.report(meta).unwrap()], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "variant,bin_lo,bin_hi,mae_m,count\nBL+Dep,,,1.000000,2\nBL+Dep,1,10,1.000000,1\nBL+Dep,10,20,,0\n"
        );
    }
}
