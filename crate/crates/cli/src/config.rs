//! The pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sitscd::losses::LossConfig;
use sitscd::pseudolabel::{LabelSource, PropagationConfig};
use sitscd::synth::SynthSpec;
use sitscd::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub pseudo: PseudoSection,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub workdir: PathBuf,
    /// Where checkpoints go instead of the `train` and `finetune` stage directories.
    pub checkpoints: Option<PathBuf>,
    /// Where `report` writes instead of the `report` stage directory.
    pub reports: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            checkpoints: None,
            reports: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Scene manifests. When empty, the scenes written by `synth` are used.
    pub scenes: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Scenes with an early event and a later strip of the same change.
    pub tracking_scenes: usize,
    /// Scenes generated from `spec` as written, events included.
    pub plain_scenes: usize,
    pub spec: SynthSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            tracking_scenes: 5,
            plain_scenes: 1,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub source: LabelSource,
    /// Per-frame embeddings `<scene_id>/frame_XXX.f32`; spectral features when unset.
    pub embeddings_dir: Option<PathBuf>,
    pub propagation: PropagationConfig,
}

impl Default for PseudoSection {
    fn default() -> Self {
        Self {
            source: LabelSource::FeatureTracking,
            embeddings_dir: None,
            propagation: PropagationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Probability at which a pixel counts as changed.
    pub threshold: f64,
    /// Whether `report` renders PNG figures of the map series.
    pub figures: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            figures: true,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when there is none. Relative paths in
    /// the file resolve against its directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let mut cfg = Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?;
                cfg.resolve_paths(p.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => Self::default(),
        };
        if let Some(w) = &overrides.workdir {
            cfg.paths.workdir = w.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
            cfg.synth.spec.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.workdir);
        if let Some(p) = self.paths.checkpoints.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.reports.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pseudo.embeddings_dir.as_mut() {
            fix(p);
        }
        self.data.scenes.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: sitscd::Error| CliError::Config(e.to_string());
        self.synth.spec.validate().map_err(invalid)?;
        self.pseudo.propagation.validate().map_err(invalid)?;
        self.loss.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(CliError::Config(format!("eval.threshold {} outside [0, 1]", self.eval.threshold)));
        }
        Ok(())
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.workdir.join(stage)
    }

    pub fn checkpoint_path(&self, stage: &str, file: &str) -> PathBuf {
        match &self.paths.checkpoints {
            Some(dir) => dir.join(file),
            None => self.stage_dir(stage).join(file),
        }
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.reports.clone().unwrap_or_else(|| self.stage_dir("report"))
    }
}
