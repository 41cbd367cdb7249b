//! The three-way ablation: disparity-uniform baseline, depth-uniform sweep,
//! and depth-uniform sweep with learned uncertainty heads.

use std::fmt;

use crate::cost_volume::Sweep;
use crate::error::{Error, Result};
use crate::eval::{evaluation_mask, mae, DepthBins, ErrorAccumulator, EvalReport, RunMeta};
use crate::geometry::{DepthPlanes, DisparityLevels, StereoRig};
use crate::learning::{train, Dataset, TrainConfig, TrainReport};
use crate::model::{Model, Supervision};
use crate::params::{InitConfig, ParamVector};
use crate::refinement::CandidateMode;
use crate::scenes::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Disparity-uniform sweep, disparity supervision, pixel-step refinement
    /// with a constant 1 px scale.
    Baseline,
    /// Depth-uniform sweep, depth supervision, constant SU = 5 m and FU = 1.
    BlDep,
    /// Depth-uniform sweep with learned SU and FU.
    BlDepGu,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::BlDep, Variant::BlDepGu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::BlDep => "BL+Dep",
            Variant::BlDepGu => "BL+Dep+GU",
        }
    }

    /// Accepts the display name or a lowercase alias (`baseline`, `bl-dep`, `bl-dep-gu`).
    pub fn from_name(s: &str) -> Result<Variant> {
        let key = s.to_ascii_lowercase().replace(['+', '_'], "-");
        match key.as_str() {
            "baseline" | "bl" => Ok(Variant::Baseline),
            "bl-dep" => Ok(Variant::BlDep),
            "bl-dep-gu" => Ok(Variant::BlDepGu),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }

    /// File-name friendly identifier.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BlDep => "bl-dep",
            Variant::BlDepGu => "bl-dep-gu",
        }
    }

    /// The variant's model built on `base`, which supplies the rig,
    /// extractor and aggregation radius; `planes` fixes the depth range.
    pub fn model(self, base: &Model, planes: &DepthPlanes) -> Result<Model> {
        let mut m = base.clone();
        m.depth_range = (planes.d_min, planes.d_max);
        match self {
            Variant::Baseline => {
                m.sweep = Sweep::Disparity(DisparityLevels::matching_depth_range(&base.rig, planes)?);
                m.candidate_mode = CandidateMode::Pixel;
                m.supervision = Supervision::Disparity;
            }
            Variant::BlDep | Variant::BlDepGu => {
                m.sweep = Sweep::Depth(planes.clone());
                m.candidate_mode = CandidateMode::Depth;
                m.supervision = Supervision::Depth;
            }
        }
        Ok(m)
    }

    pub fn init(self, base: &InitConfig) -> InitConfig {
        match self {
            Variant::Baseline => InitConfig {
                su: 1.0,
                fu: 1.0,
                ..*base
            },
            Variant::BlDep | Variant::BlDepGu => InitConfig {
                su: 5.0,
                fu: 1.0,
                ..*base
            },
        }
    }

    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learn_heads: self == Variant::BlDepGu,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Coarse and refined MAE of one test scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneScore {
    pub coarse_mae: f64,
    pub refined_mae: f64,
}

/// Test-set report of one trained parameter set, plus per-scene scores.
pub fn evaluate_params(
    model: &Model,
    params: &ParamVector,
    test: &[Sample],
    bins: &DepthBins,
    meta: RunMeta,
) -> Result<(EvalReport, Vec<SceneScore>)> {
    use rayon::prelude::*;
    let per: Vec<_> = test
        .par_iter()
        .map(|s| {
            let out = model.infer(params, &s.left, &s.right)?;
            let mask = evaluation_mask(&s.depth, model.depth_range);
            Ok((out, mask))
        })
        .collect::<Result<_>>()?;
    let mut acc = ErrorAccumulator::new(bins.clone());
    let mut scores = Vec::with_capacity(test.len());
    for (s, (out, mask)) in test.iter().zip(&per) {
        acc.add(&out.refined, &s.depth, mask)?;
        scores.push(SceneScore {
            coarse_mae: mae(&out.coarse, &s.depth, mask)?,
            refined_mae: mae(&out.refined, &s.depth, mask)?,
        });
    }
    Ok((acc.report(meta)?, scores))
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub planes: DepthPlanes,
    pub bins: DepthBins,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub rig_name: String,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub training: TrainReport,
    pub report: EvalReport,
    pub scenes: Vec<SceneScore>,
}

/// Trains every variant on `train_set` with the same schedule and seed and
/// evaluates it on `test_set`.
pub fn run_ablation(
    base: &Model,
    train_set: &[Sample],
    test_set: &[Sample],
    variants: &[Variant],
    config: &AblationConfig,
) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|&v| {
            let model = v.model(base, &config.planes)?;
            let init = ParamVector::init(model.channels(), &v.init(&config.init))?;
            let tc = v.train_config(&config.train);
            let data = Dataset::new(&model, train_set.to_vec(), tc.crop)?;
            let training = train(&model, &data, &tc, &init)?;
            let meta = RunMeta {
                variant: v.name().to_string(),
                rig: config.rig_name.clone(),
                seed: tc.seed,
            };
            let (report, scenes) = evaluate_params(&model, &training.params, test_set, &config.bins, meta)?;
            Ok(VariantResult {
                variant: v,
                training,
                report,
                scenes,
            })
        })
        .collect()
}

/// Sceneflow-style rig and planes every metre from 1 to 80 m.
pub fn default_planes() -> DepthPlanes {
    crate::geometry::sample_depth_planes(1.0, 81.0, 80).expect("valid preset")
}

pub fn default_rig() -> StereoRig {
    StereoRig::sceneflow(256, 128)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
            assert_eq!(Variant::from_name(v.slug()).unwrap(), v);
        }
        assert!(Variant::from_name("full").is_err());
    }

    #[test]
    fn variant_models() {
        let rig = default_rig();
        let planes = default_planes();
        let base = Model::new(rig, Sweep::Depth(planes.clone()));
        let bl = Variant::Baseline.model(&base, &planes).unwrap();
        assert_eq!(bl.candidate_mode, CandidateMode::Pixel);
        assert_eq!(bl.supervision, Supervision::Disparity);
        assert_eq!(bl.sweep.count(), 80);
        match &bl.sweep {
            Sweep::Disparity(l) => assert!((l.k_max - rig.fb()).abs() < 1e-9),
            _ => panic!(),
        }
        assert_eq!(bl.depth_range, (1.0, 81.0));
        let gu = Variant::BlDepGu.model(&base, &planes).unwrap();
        assert_eq!(gu.sweep, Sweep::Depth(planes));
        assert!(!Variant::BlDep.train_config(&TrainConfig::default()).learn_heads);
        assert!(Variant::BlDepGu.train_config(&TrainConfig::default()).learn_heads);
        assert_eq!(Variant::Baseline.init(&InitConfig::default()).su, 1.0);
    }
}
