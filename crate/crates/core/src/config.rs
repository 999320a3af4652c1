//! JSON run configuration. Every field is optional; unknown fields are
//! rejected. The fully resolved document is what a run directory stores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneConfig;
use crate::spike::ExposureLayout;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeSection {
    pub threshold: f64,
    pub total_frames: usize,
    pub exposure_frames: usize,
    pub short_frames: usize,
    pub samples: usize,
}

impl Default for SpikeSection {
    fn default() -> Self {
        let l = ExposureLayout::default();
        Self {
            threshold: SceneConfig::default().threshold,
            total_frames: l.total_frames,
            exposure_frames: l.exposure_frames,
            short_frames: l.short_frames,
            samples: l.samples,
        }
    }
}

impl SpikeSection {
    pub fn layout(&self) -> ExposureLayout {
        ExposureLayout {
            total_frames: self.total_frames,
            exposure_frames: self.exposure_frames,
            short_frames: self.short_frames,
            samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Level used by `pose-eval` when none is given on the command line.
    pub pose_level: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { pose_level: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// Scene geometry; spike constants come from `spike`.
    #[serde(with = "scene_section")]
    pub scene: SceneConfig,
    pub spike: SpikeSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// `SceneConfig` without the fields owned by the spike section.
mod scene_section {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cfg: &SceneConfig, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(cfg).map_err(serde::ser::Error::custom)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("threshold");
            m.remove("layout");
        }
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SceneConfig, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        if let Some(m) = v.as_object() {
            for owned in ["threshold", "layout"] {
                if m.contains_key(owned) {
                    return Err(serde::de::Error::custom(format!(
                        "scene.{owned} belongs in the spike section"
                    )));
                }
            }
        }
        serde_json::from_value(v).map_err(serde::de::Error::custom)
    }
}

impl RunConfigFile {
    pub fn parse(json: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(json)?;
        cfg.scene.threshold = cfg.spike.threshold;
        cfg.scene.layout = cfg.spike.layout();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()
    }

    /// Resolved document with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainMode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfigFile::parse("{}").unwrap();
        assert_eq!(c, RunConfigFile::default());
        assert_eq!(c.scene.gaussians, 64);
        assert_eq!(c.train.iterations, 2000);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let c = RunConfigFile::parse(
            r#"{"scene": {"seed": 3}, "spike": {"threshold": 1.0}, "train": {"mode": "gs_only", "iterations": 5}}"#,
        )
        .unwrap();
        assert_eq!(c.scene.seed, 3);
        assert_eq!(c.scene.threshold, 1.0);
        assert_eq!(c.train.mode, TrainMode::GsOnly);
        assert_eq!(c.train.lr_twists, 1e-3);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfigFile::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfigFile::parse(r#"{"train": {"iters": 3}}"#).is_err());
        assert!(RunConfigFile::parse(r#"{"scene": {"threshold": 1.0}}"#).is_err());
        assert!(RunConfigFile::parse(r#"{"train": {"iterations": 0}}"#).is_err());
    }

    #[test]
    fn resolved_echo_reparses_identically() {
        let c = RunConfigFile::parse(r#"{"train": {"seed": 9}, "eval": {"pose_level": 20}}"#).unwrap();
        let again = RunConfigFile::parse(&c.to_json().unwrap()).unwrap();
        assert_eq!(again, c);
    }
}
