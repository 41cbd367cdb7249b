//! Run configuration: a TOML file of `[section]` tables whose keys can be
//! overridden one at a time with `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use depthsweep::ablation::Variant;
use depthsweep::eval::{DepthBins, DEFAULT_E_MAX};
use depthsweep::geometry::{sample_depth_planes, DepthPlanes, DisparityLevels, StereoRig};
use depthsweep::{CandidateMode, Error, ExtractorConfig, InitConfig, Model, Result, Supervision, Sweep, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSection {
    /// `sceneflow` or `drivingstereo`; ignored when both explicit values are set.
    pub preset: String,
    pub baseline_m: Option<f64>,
    pub focal_px: Option<f64>,
    pub width: usize,
    pub height: usize,
}

impl Default for RigSection {
    fn default() -> Self {
        RigSection {
            preset: "sceneflow".into(),
            baseline_m: None,
            focal_px: None,
            width: 256,
            height: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSection {
    pub d_min: f64,
    pub d_max: f64,
    pub planes: usize,
}

impl Default for DepthSection {
    fn default() -> Self {
        DepthSection {
            d_min: 1.0,
            d_max: 81.0,
            planes: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    #[default]
    Depth,
    Disparity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// When set, the variant's sweep, candidates, supervision and initial SU/FU
    /// replace the values below.
    pub variant: Option<String>,
    pub sweep: SweepKind,
    pub candidates: CandidateMode,
    pub supervision: Supervision,
    pub agg_radius: usize,
    pub abs_weight: f64,
    pub su: f64,
    pub fu: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let init = InitConfig::default();
        ModelSection {
            variant: None,
            sweep: SweepKind::Depth,
            candidates: CandidateMode::Depth,
            supervision: Supervision::Depth,
            agg_radius: 2,
            abs_weight: init.abs_weight,
            su: init.su,
            fu: init.fu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Slanted background with nearer planes.
    #[default]
    Random,
    /// Whole-metre fronto-parallel planes.
    Fronto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub kind: SceneKind,
    /// Scene file rendered instead of random scenes (one spec, varying seeds).
    pub scene: Option<PathBuf>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            kind: SceneKind::Random,
            scene: None,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub e_max: f64,
    /// `[lo, hi)` pairs in metres.
    pub bins: Vec<[f64; 2]>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            e_max: DEFAULT_E_MAX,
            bins: DepthBins::default().bins().iter().map(|&(lo, hi)| [lo, hi]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rig: RigSection,
    pub depth: DepthSection,
    pub features: ExtractorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub gen: GenSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `section.key=value`
    /// overrides in order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.rig()?;
        self.planes()?;
        self.bins()?;
        self.train.validate()?;
        self.variant()?;
        if self.model.agg_radius > 16 {
            return Err(Error::Config(format!("agg_radius {} is too large (max 16)", self.model.agg_radius)));
        }
        if !(self.model.su > 0.0 && self.model.fu > 0.0 && self.model.abs_weight.is_finite()) {
            return Err(Error::Config("model.su and model.fu must be > 0".into()));
        }
        if self.features.channel_count() == 0 {
            return Err(Error::Config("feature extractor produces no channels".into()));
        }
        if !(self.eval.e_max > 0.0) {
            return Err(Error::Config(format!("eval.e_max must be > 0, got {}", self.eval.e_max)));
        }
        if !(self.gen.noise_sigma >= 0.0) {
            return Err(Error::Config("gen.noise_sigma must be >= 0".into()));
        }
        if let Some(p) = &self.gen.scene {
            if !p.exists() {
                return Err(Error::Config(format!("gen.scene {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<StereoRig> {
        let r = &self.rig;
        let rig = match (r.baseline_m, r.focal_px) {
            (Some(b), Some(f)) => StereoRig::new(b, f, r.width, r.height),
            (None, None) => StereoRig::preset(&r.preset, r.width, r.height),
            _ => Err(Error::Config("rig needs both baseline_m and focal_px, or neither".into())),
        };
        rig.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn rig_name(&self) -> String {
        match (self.rig.baseline_m, self.rig.focal_px) {
            (Some(b), Some(f)) => format!("B={b}m f={f}px"),
            _ => self.rig.preset.clone(),
        }
    }

    pub fn planes(&self) -> Result<DepthPlanes> {
        sample_depth_planes(self.depth.d_min, self.depth.d_max, self.depth.planes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn bins(&self) -> Result<DepthBins> {
        DepthBins::new(self.eval.bins.iter().map(|b| (b[0], b[1])).collect()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn variant(&self) -> Result<Option<Variant>> {
        self.model.variant.as_deref().map(Variant::from_name).transpose()
    }

    /// Model shared by every variant: rig, features and aggregation radius.
    pub fn base_model(&self) -> Result<Model> {
        let mut m = Model::new(self.rig()?, Sweep::Depth(self.planes()?));
        m.extractor = self.features.clone();
        m.agg_radius = self.model.agg_radius;
        Ok(m)
    }

    pub fn model(&self) -> Result<Model> {
        let base = self.base_model()?;
        let planes = self.planes()?;
        if let Some(v) = self.variant()? {
            return v.model(&base, &planes);
        }
        let mut m = base;
        if self.model.sweep == SweepKind::Disparity {
            m.sweep = Sweep::Disparity(DisparityLevels::matching_depth_range(&m.rig, &planes)?);
        }
        m.candidate_mode = self.model.candidates;
        m.supervision = self.model.supervision;
        Ok(m)
    }

    /// Initial values from the model section, before any variant applies.
    pub fn base_init(&self) -> InitConfig {
        InitConfig {
            abs_weight: self.model.abs_weight,
            su: self.model.su,
            fu: self.model.fu,
        }
    }

    pub fn init(&self) -> Result<InitConfig> {
        let init = self.base_init();
        Ok(match self.variant()? {
            Some(v) => v.init(&init),
            None => init,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(match self.variant()? {
            Some(v) => v.train_config(&self.train),
            None => self.train.clone(),
        })
    }
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// value when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' must look like section.key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.planes().unwrap().count, 80);
        assert_eq!(c.rig().unwrap().fb(), 283.5);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = vec![
            "train.lr=0.5".to_string(),
            "rig.preset=drivingstereo".to_string(),
            "train.epochs=[1, 2, 3]".to_string(),
            "model.candidates=pixel".to_string(),
            "train.lr=0".to_string(),
        ];
        let c = RunConfig::load(None, &sets).unwrap();
        assert_eq!(c.train.lr, 0.0);
        assert_eq!(c.train.epochs, [1, 2, 3]);
        assert_eq!(c.rig.preset, "drivingstereo");
        assert_eq!(c.model.candidates, CandidateMode::Pixel);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[depth]\nd_min = 2.0\nd_max = 42.0\nplanes = 40\n[train]\nbatch_size = 2\n").unwrap();
        let c = RunConfig::load(Some(&path), &["depth.planes=20".into()]).unwrap();
        assert_eq!(c.depth.d_min, 2.0);
        assert_eq!(c.depth.planes, 20);
        assert_eq!(c.train.batch_size, 2);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for sets in [
            vec!["train.lrr=1".to_string()],
            vec!["nosuch.key=1".into()],
            vec!["depth.d_min=90".into()],
            vec!["train.momentum=1.5".into()],
            vec!["novalue".into()],
            vec!["rig.baseline_m=0.3".into()],
            vec!["model.variant=unknown".into()],
        ] {
            assert!(matches!(RunConfig::load(None, &sets), Err(Error::Config(_))), "{sets:?}");
        }
    }

    #[test]
    fn variant_overrides_model_section() {
        let c = RunConfig::load(None, &["model.variant=baseline".into()]).unwrap();
        let m = c.model().unwrap();
        assert_eq!(m.supervision, Supervision::Disparity);
        assert_eq!(c.init().unwrap().su, 1.0);
        assert!(!c.train_config().unwrap().learn_heads);
    }
}
