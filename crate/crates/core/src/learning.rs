//! Loss, gradients and the three-phase training schedule.
//!
//! Phase 1 trains the aggregation and compression weights with the SU and FU
//! heads held at their constant initialisation, phase 2 adds the SU head and
//! phase 3 trains everything. Each phase runs momentum SGD with a cosine
//! annealed learning rate that restarts at the start of the phase.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compensated::Compensated;
use crate::cost_volume::DepthMap;
use crate::error::{Error, Result};
use crate::model::{Model, Prepared};
use crate::params::{Group, ParamVector};
use crate::scenes::Sample;

/// Mean absolute difference over masked pixels.
pub fn l1_depth_loss(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<f64> {
    if !pred.same_shape(gt) || mask.len() != gt.depth.len() {
        return Err(Error::Argument("loss: shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..mask.len() {
        if mask[p] {
            sum += (pred.depth[p] - gt.depth[p]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("loss mask is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Relative step used by the finite-difference gradient.
pub const FD_RELATIVE_STEP: f64 = 1e-4;

/// Central finite differences `(f(p + h) - f(p - h)) / 2h` with
/// `h = FD_RELATIVE_STEP * max(|p|, 1)`, for every unfrozen parameter.
pub fn finite_difference_gradient(
    f: impl Fn(&ParamVector) -> Result<Compensated> + Sync,
    params: &ParamVector,
) -> Result<ParamVector> {
    let f0 = f(params)?.value();
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("loss is {f0} at the evaluation point")));
    }
    let layout = params.flat_layout();
    let base = params.flat();
    let values: Vec<f64> = layout
        .par_iter()
        .enumerate()
        .map(|(k, &(g, _))| {
            if params.is_frozen(g) {
                return Ok(0.0);
            }
            let h = FD_RELATIVE_STEP * base[k].abs().max(1.0);
            let mut probe = params.clone();
            let mut flat = base.clone();
            flat[k] = base[k] + h;
            probe.set_flat(&flat)?;
            let up = f(&probe)?;
            flat[k] = base[k] - h;
            probe.set_flat(&flat)?;
            let down = f(&probe)?;
            Ok(up.difference(down) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let mut grad = params.zeros_like();
    grad.set_flat(&values)?;
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradMethod {
    #[default]
    Analytic,
    FiniteDifference,
}

/// Gradient of the mean loss over `samples`.
pub fn grad_params(model: &Model, params: &ParamVector, samples: &[Prepared], method: GradMethod) -> Result<ParamVector> {
    match method {
        GradMethod::Analytic => Ok(batch_loss_and_grad(model, params, samples)?.1),
        GradMethod::FiniteDifference => finite_difference_gradient(|p| mean_loss_compensated(model, p, samples), params),
    }
}

pub fn mean_loss(model: &Model, params: &ParamVector, samples: &[Prepared]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| model.loss(params, s).map(|l| l.total))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

pub fn mean_loss_compensated(model: &Model, params: &ParamVector, samples: &[Prepared]) -> Result<Compensated> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let losses: Vec<Compensated> = samples
        .par_iter()
        .map(|s| model.loss_compensated(params, s))
        .collect::<Result<_>>()?;
    let mut acc = Compensated::default();
    for l in losses {
        acc.add_compensated(l);
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Mean loss and gradient; samples are reduced in order.
pub fn batch_loss_and_grad(model: &Model, params: &ParamVector, samples: &[Prepared]) -> Result<(f64, ParamVector)> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let per: Vec<(f64, ParamVector)> = samples
        .par_iter()
        .map(|s| model.loss_and_grad(params, s).map(|(l, g)| (l.total, g)))
        .collect::<Result<_>>()?;
    let inv = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut acc = vec![0.0; params.len()];
    for (l, g) in &per {
        loss += l;
        for (a, b) in acc.iter_mut().zip(g.flat()) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|v| *v *= inv);
    let mut grad = params.zeros_like();
    grad.set_flat(&acc)?;
    Ok((loss * inv, grad))
}

/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * t / t_max)) / 2`.
pub fn cosine_lr(lr0: f64, eta_min: f64, t_max: f64, t: f64) -> f64 {
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t / t_max).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub t_max: f64,
    pub eta_min: f64,
    /// Epochs of phases 1, 2 and 3.
    pub epochs: [usize; 3],
    pub batch_size: usize,
    /// Random crop `(height, width)` applied to larger samples.
    pub crop: (usize, usize),
    /// When false the SU and FU heads stay frozen in every phase.
    pub learn_heads: bool,
    /// Run phases up to and including this one.
    pub last_phase: u8,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3.0,
            momentum: 0.8,
            t_max: 5.0,
            eta_min: 4e-8,
            epochs: [4, 4, 4],
            batch_size: 4,
            crop: (256, 512),
            learn_heads: true,
            last_phase: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Published schedule for SceneFlow-scale training.
    pub fn published_preset() -> Self {
        TrainConfig {
            lr: 0.001,
            epochs: [12, 8, 24],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.t_max > 0.0) || !(self.eta_min >= 0.0) {
            return Err(Error::Config("cosine schedule needs t_max > 0 and eta_min >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(1..=3).contains(&self.last_phase) {
            return Err(Error::Config(format!("last phase must be 1, 2 or 3, got {}", self.last_phase)));
        }
        if self.crop.0 % 4 != 0 || self.crop.1 % 4 != 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive multiples of 4".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs[..self.last_phase as usize].iter().sum()
    }

    /// Groups frozen during `phase`.
    pub fn frozen_in(&self, phase: u8) -> Vec<Group> {
        if !self.learn_heads {
            return vec![Group::SuHead, Group::FuHead];
        }
        match phase {
            1 => vec![Group::SuHead, Group::FuHead],
            2 => vec![Group::FuHead],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamVector,
    pub history: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Cuts a `(height, width)` window at `(x0, y0)` out of a sample.
pub fn crop_sample(s: &Sample, x0: usize, y0: usize, height: usize, width: usize) -> Result<Sample> {
    let (w, h) = (s.width(), s.height());
    if x0 + width > w || y0 + height > h {
        return Err(Error::Argument("crop window outside the sample".into()));
    }
    fn cut<T: Copy>(v: &[T], stride: usize, ch: usize, x0: usize, y0: usize, width: usize, height: usize) -> Vec<T> {
        (y0..y0 + height)
            .flat_map(|y| v[(y * stride + x0) * ch..(y * stride + x0 + width) * ch].iter().copied())
            .collect()
    }
    let img = |i: &crate::image::ImageBuf| crate::image::ImageBuf {
        width,
        height,
        channels: i.channels,
        data: cut(&i.data, w, i.channels, x0, y0, width, height),
    };
    Ok(Sample {
        left: img(&s.left),
        right: img(&s.right),
        depth: DepthMap {
            width,
            height,
            depth: cut(&s.depth.depth, w, 1, x0, y0, width, height),
            valid: cut(&s.depth.valid, w, 1, x0, y0, width, height),
        },
        occluded: cut(&s.occluded, w, 1, x0, y0, width, height),
        out_of_frame: cut(&s.out_of_frame, w, 1, x0, y0, width, height),
        surface: cut(&s.surface, w, 1, x0, y0, width, height),
    })
}

/// Training set: samples no larger than the crop are prepared once; larger
/// ones are cropped at a random 4-aligned offset every time they are drawn.
pub struct Dataset {
    samples: Vec<Sample>,
    cached: Vec<Option<Prepared>>,
}

impl Dataset {
    pub fn new(model: &Model, samples: Vec<Sample>, crop: (usize, usize)) -> Result<Self> {
        let cached = samples
            .par_iter()
            .map(|s| {
                if s.height() <= crop.0 && s.width() <= crop.1 {
                    model.prepare_sample(s).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, cached })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn draw(&self, model: &Model, k: usize, crop: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Prepared> {
        use rand::Rng;
        if let Some(p) = &self.cached[k] {
            return Ok(p.clone());
        }
        let s = &self.samples[k];
        let (ch, cw) = (crop.0.min(s.height()), crop.1.min(s.width()));
        let x0 = rng.random_range(0..=(s.width() - cw) / 4) * 4;
        let y0 = rng.random_range(0..=(s.height() - ch) / 4) * 4;
        let mut m = model.clone();
        m.rig = model.rig.with_size(cw, ch);
        m.prepare_sample(&crop_sample(s, x0, y0, ch, cw)?)
    }

    /// Prepared samples at full size (for evaluation of the training loss).
    pub fn full(&self, model: &Model) -> Result<Vec<Prepared>> {
        self.samples
            .par_iter()
            .zip(&self.cached)
            .map(|(s, c)| match c {
                Some(p) => Ok(p.clone()),
                None => model.prepare_sample(s),
            })
            .collect()
    }
}

pub fn train(model: &Model, data: &Dataset, config: &TrainConfig, init: &ParamVector) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let full = data.full(model)?;
    let initial_loss = mean_loss(model, init, &full)?;
    let mut params = init.clone();
    let mut history = Vec::with_capacity(config.total_epochs());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch = 0;
    for phase in 1..=config.last_phase {
        let frozen = config.frozen_in(phase);
        for g in Group::ALL {
            params.set_frozen(g, frozen.contains(&g));
        }
        let mut velocity = vec![0.0; params.len()];
        for t in 0..config.epochs[phase as usize - 1] {
            let lr = cosine_lr(config.lr, config.eta_min, config.t_max, t as f64);
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(config.batch_size) {
                let prepared: Vec<Prepared> = batch
                    .iter()
                    .map(|&k| data.draw(model, k, config.crop, &mut rng))
                    .collect::<Result<_>>()?;
                let (loss, grad) = batch_loss_and_grad(model, &params, &prepared)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("loss diverged ({loss}) in phase {phase}, epoch {epoch}")));
                }
                loss_sum += loss * batch.len() as f64;
                let g = grad.flat();
                let mut flat = params.flat();
                for k in 0..flat.len() {
                    velocity[k] = config.momentum * velocity[k] + g[k];
                    flat[k] -= lr * velocity[k];
                }
                let layout = params.flat_layout();
                for (k, (grp, _)) in layout.iter().enumerate() {
                    if params.is_frozen(*grp) {
                        flat[k] = params.group(*grp)[layout[k].1];
                    }
                }
                params.set_flat(&flat)?;
                params.check_finite().map_err(|e| {
                    Error::Numerical(format!("parameters diverged in phase {phase}, epoch {epoch}: {e}"))
                })?;
            }
            history.push(EpochRecord {
                epoch,
                phase,
                lr,
                loss: loss_sum / data.len() as f64,
            });
            epoch += 1;
        }
    }
    for g in Group::ALL {
        params.set_frozen(g, false);
    }
    let final_loss = mean_loss(model, &params, &full)?;
    Ok(TrainReport {
        params,
        history,
        initial_loss,
        final_loss,
    })
}

pub fn write_loss_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "lr", "loss"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.phase.to_string(), format!("{:e}", r.lr), format!("{:.9}", r.loss)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Argument(format!("loss CSV row missing column {i}")))
        };
        let parse_err = |e: std::num::ParseFloatError| Error::Argument(e.to_string());
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|e: std::num::ParseIntError| Error::Argument(e.to_string()))?,
            phase: field(1)?.parse().map_err(|e: std::num::ParseIntError| Error::Argument(e.to_string()))?,
            lr: field(2)?.parse().map_err(parse_err)?,
            loss: field(3)?.parse().map_err(parse_err)?,
        });
    }
    Ok(out)
}

/// Writes a one-line progress note for an epoch to `sink`.
pub fn log_epoch(sink: &mut impl Write, r: &EpochRecord) -> std::io::Result<()> {
    writeln!(sink, "epoch {:>3}  phase {}  lr {:.3e}  loss {:.5}", r.epoch, r.phase, r.lr, r.loss)
}
