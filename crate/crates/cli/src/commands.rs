//! The subcommands as library functions.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use depthsweep::ablation::{evaluate_params, SceneScore, Variant};
use depthsweep::dump::{write_heatmap, Volume};
use depthsweep::eval::{emit_error_map, evaluation_mask, write_report_csv, ErrorAccumulator, EvalReport, RunMeta};
use depthsweep::geometry::depth_error_from_disparity_error;
use depthsweep::learning::{train, write_loss_csv, Dataset, TrainReport};
use depthsweep::pfm::{load_depth_pfm, save_depth_pfm, FloatMap};
use depthsweep::scenes::{fronto_parallel_scene_spec, random_scene_spec};
use depthsweep::{generate_scene, DepthMap, Error, ImageBuf, Model, Outputs, ParamVector, Result, SceneSpec};

use crate::config::{RunConfig, SceneKind};
use crate::dataset::{write_sample, Manifest, MANIFEST_NAME};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn scene_spec(cfg: &RunConfig, seed: u64) -> Result<SceneSpec> {
    if let Some(p) = &cfg.gen.scene {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        return SceneSpec::from_toml(&text);
    }
    let rig = cfg.rig()?;
    Ok(match cfg.gen.kind {
        SceneKind::Random => random_scene_spec(&rig, cfg.gen.noise_sigma, seed),
        SceneKind::Fronto => {
            let near = (cfg.depth.d_min.ceil() as u32).max(1) + 2;
            let far = (cfg.depth.d_max - 1.0).floor() as u32;
            let mut spec = fronto_parallel_scene_spec(&rig, near, far.max(near + 1), seed);
            spec.noise_sigma = cfg.gen.noise_sigma;
            spec
        }
    })
}

/// Renders `count` samples with seeds `gen.seed + k` into `out_dir` and
/// writes the manifest.
pub fn cmd_gen(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    create_dir(out_dir)?;
    let entries = (0..count)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.gen.seed.wrapping_add(k as u64);
            let sample = generate_scene(&scene_spec(cfg, seed)?, seed)?;
            write_sample(out_dir, &format!("{k:06}"), &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn load_params(model: &Model, path: &Path) -> Result<ParamVector> {
    let p = ParamVector::read_checkpoint(path)?;
    if p.channels() != model.channels() {
        return Err(Error::Config(format!(
            "{} holds parameters for {} feature channels, the configured extractor has {}",
            path.display(),
            p.channels(),
            model.channels()
        )));
    }
    p.check_finite()?;
    Ok(p)
}

fn initial_params(cfg: &RunConfig, model: &Model) -> Result<ParamVector> {
    ParamVector::init(model.channels(), &cfg.init()?)
}

/// Trains on every sample of `data` and writes the checkpoint and the
/// per-epoch loss CSV.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out_checkpoint: &Path, loss_csv: &Path) -> Result<TrainReport> {
    let manifest = Manifest::read(data)?;
    let samples = manifest.load_all()?;
    let model = cfg.model()?;
    let init = initial_params(cfg, &model)?;
    let tc = cfg.train_config()?;
    let dataset = Dataset::new(&model, samples, tc.crop)?;
    let report = train(&model, &dataset, &tc, &init)?;
    report.params.write_checkpoint(out_checkpoint)?;
    write_loss_csv(&report.history, loss_csv)?;
    Ok(report)
}

/// Default loss CSV path next to a checkpoint: `model.ckpt` -> `model.loss.csv`.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

/// Runs the model on one pair and writes the refined depth as PFM. With a
/// dump directory, also writes the coarse depth, SU and offset maps as PFM
/// or DDLV volumes plus PGM heatmaps.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    left: &Path,
    right: &Path,
    out: &Path,
    dump_dir: Option<&Path>,
) -> Result<Outputs> {
    let l = ImageBuf::read_pnm(left)?;
    let r = ImageBuf::read_pnm(right)?;
    if (l.width, l.height) != (r.width, r.height) {
        return Err(Error::Argument(format!(
            "left image is {}x{}, right image is {}x{}",
            l.width, l.height, r.width, r.height
        )));
    }
    let model = cfg.model()?;
    let params = match checkpoint {
        Some(p) => load_params(&model, p)?,
        None => initial_params(cfg, &model)?,
    };
    let outputs = model.infer(&params, &l, &r)?;
    save_depth_pfm(&outputs.refined, out)?;
    if let Some(dir) = dump_dir {
        dump_outputs(dir, &outputs)?;
    }
    Ok(outputs)
}

fn dump_outputs(dir: &Path, o: &Outputs) -> Result<()> {
    create_dir(dir)?;
    let (w, h) = (o.coarse.width, o.coarse.height);
    save_depth_pfm(&o.coarse, dir.join("coarse_depth.pfm"))?;
    write_heatmap(dir.join("coarse_depth.pgm"), w, h, &o.coarse.depth)?;
    for (name, values) in [("su", &o.su), ("offset", &o.offset)] {
        Volume::from_map(w, h, values)?.save(dir.join(format!("{name}.ddlv")))?;
        write_heatmap(dir.join(format!("{name}.pgm")), w, h, values)?;
    }
    Ok(())
}

/// Where predictions come from when evaluating.
#[derive(Debug, Clone)]
pub enum Predictions {
    /// `{id}.pfm` files in a directory.
    Dir(PathBuf),
    /// Run the model with this checkpoint.
    Checkpoint(PathBuf),
}

/// Evaluates predictions against a dataset's ground truth and writes the
/// CSV report and optional error maps `{id}_err.pgm`.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    predictions: &Predictions,
    report: &Path,
    error_maps: Option<&Path>,
) -> Result<EvalReport> {
    let manifest = Manifest::read(data)?;
    let model = cfg.model()?;
    let params = match predictions {
        Predictions::Checkpoint(p) => Some(load_params(&model, p)?),
        Predictions::Dir(d) => {
            let missing: Vec<String> = manifest
                .entries
                .iter()
                .filter(|e| !d.join(format!("{}.pfm", e.id)).is_file())
                .map(|e| e.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Argument(format!(
                    "no prediction in {} for: {}",
                    d.display(),
                    missing.join(", ")
                )));
            }
            None
        }
    };
    if let Some(dir) = error_maps {
        create_dir(dir)?;
    }
    let range = (cfg.depth.d_min, cfg.depth.d_max);
    let per: Vec<(DepthMap, DepthMap)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let pred = match (&params, predictions) {
                (Some(p), _) => {
                    let s = manifest.load(e)?;
                    // score what `infer` would have written
                    let pred = FloatMap::from_depth(&model.infer(p, &s.left, &s.right)?.refined).to_depth()?;
                    return Ok((pred, s.depth));
                }
                (None, Predictions::Dir(d)) => load_depth_pfm(d.join(format!("{}.pfm", e.id)))?,
                (None, Predictions::Checkpoint(_)) => unreachable!(),
            };
            let gt = load_depth_pfm(manifest.resolve(&e.depth))?;
            if !pred.same_shape(&gt) {
                return Err(Error::Argument(format!(
                    "{}: prediction is {}x{}, ground truth {}x{}",
                    e.id, pred.width, pred.height, gt.width, gt.height
                )));
            }
            Ok((pred, gt))
        })
        .collect::<Result<_>>()?;
    let mut acc = ErrorAccumulator::new(cfg.bins()?);
    for (e, (pred, gt)) in manifest.entries.iter().zip(&per) {
        let mask = evaluation_mask(gt, range);
        acc.add(pred, gt, &mask)?;
        if let Some(dir) = error_maps {
            emit_error_map(pred, gt, &mask, cfg.eval.e_max, dir.join(format!("{}_err.pgm", e.id)))?;
        }
    }
    let meta = RunMeta {
        variant: cfg.model.variant.clone().unwrap_or_else(|| "model".into()),
        rig: cfg.rig_name(),
        seed: cfg.train.seed,
    };
    let r = acc.report(meta)?;
    write_report_csv(std::slice::from_ref(&r), report)?;
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub scenes: Vec<SceneScore>,
    /// Present when the variant was trained in this run.
    pub training: Option<TrainReport>,
}

/// Trains (or with `reuse`, loads) each variant with the shared schedule and
/// seed, evaluates it on `test` and writes `ablation.csv`, `scenes.csv`,
/// and per-variant checkpoints and loss CSVs into `out_dir`.
pub fn cmd_ablate(cfg: &RunConfig, train_data: &Path, test_data: &Path, out_dir: &Path, reuse: bool) -> Result<Vec<AblationRow>> {
    create_dir(out_dir)?;
    let train_set = if reuse { Vec::new() } else { Manifest::read(train_data)?.load_all()? };
    let test_set = Manifest::read(test_data)?.load_all()?;
    let base = cfg.base_model()?;
    let planes = cfg.planes()?;
    let bins = cfg.bins()?;
    let init = cfg.base_init();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let model = v.model(&base, &planes)?;
        let ckpt = out_dir.join(format!("{}.ckpt", v.slug()));
        let (params, training) = if reuse {
            if !ckpt.is_file() {
                return Err(Error::Argument(format!("missing checkpoint {}", ckpt.display())));
            }
            (load_params(&model, &ckpt)?, None)
        } else {
            let tc = v.train_config(&cfg.train);
            let start = ParamVector::init(model.channels(), &v.init(&init))?;
            let data = Dataset::new(&model, train_set.clone(), tc.crop)?;
            let report = train(&model, &data, &tc, &start)?;
            report.params.write_checkpoint(&ckpt)?;
            write_loss_csv(&report.history, loss_csv_path(&ckpt))?;
            (report.params.clone(), Some(report))
        };
        let meta = RunMeta {
            variant: v.name().into(),
            rig: cfg.rig_name(),
            seed: cfg.train.seed,
        };
        let (report, scenes) = evaluate_params(&model, &params, &test_set, &bins, meta)?;
        rows.push(AblationRow {
            variant: v,
            report,
            scenes,
            training,
        });
    }
    let reports: Vec<EvalReport> = rows.iter().map(|r| r.report.clone()).collect();
    write_report_csv(&reports, out_dir.join("ablation.csv"))?;
    write_scene_csv(&rows, &out_dir.join("scenes.csv"))?;
    Ok(rows)
}

fn write_scene_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "scene", "coarse_mae_m", "refined_mae_m"])?;
    for r in rows {
        for (k, s) in r.scenes.iter().enumerate() {
            w.write_record([
                r.variant.name().to_string(),
                k.to_string(),
                format!("{:.6}", s.coarse_mae),
                format!("{:.6}", s.refined_mae),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One curve of depth error against depth for a fixed disparity error.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub disparity_error: f64,
    /// `(depth, depth error)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of log(error) against log(depth); 0 for a zero
    /// disparity error.
    pub slope: f64,
}

/// Depth error at depths 1, 2, ..., 80 m for each disparity error. Depths
/// whose predicted disparity would be non-positive are skipped.
pub fn analyze_error(cfg: &RunConfig, disparity_errors: &[f64]) -> Result<Vec<ErrorCurve>> {
    let rig = cfg.rig()?;
    disparity_errors
        .iter()
        .map(|&de| {
            let mut points = Vec::new();
            for d in 1..=80 {
                let depth = d as f64;
                match depth_error_from_disparity_error(&rig, depth, de) {
                    Ok(e) => points.push((depth, e)),
                    Err(Error::Domain(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            let slope = if de == 0.0 { 0.0 } else { log_log_slope(&points) };
            Ok(ErrorCurve {
                disparity_error: de,
                points,
                slope,
            })
        })
        .collect()
}

pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Writes `dis_error_px,depth_m,depth_error_m,slope`.
pub fn cmd_analyze_error(cfg: &RunConfig, disparity_errors: &[f64], out: &Path) -> Result<Vec<ErrorCurve>> {
    let curves = analyze_error(cfg, disparity_errors)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["dis_error_px", "depth_m", "depth_error_m", "slope"])?;
    for c in &curves {
        for &(d, e) in &c.points {
            w.write_record([c.disparity_error.to_string(), d.to_string(), format!("{e:.6}"), format!("{:.4}", c.slope)])?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(curves)
}
