//! Run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::content_filter::ThresholdSchedule;
use crate::encoder::{EncoderConfig, GatingMode};
use crate::error::{Error, Result};
use crate::instruction_filter::IfmConfig;

pub const SEED_ENV: &str = "HRVDA_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    PaperScale,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::PaperScale => "paper-scale",
        }
    }

    pub fn image_size(self) -> usize {
        match self {
            Profile::Desk => 256,
            Profile::PaperScale => 1536,
        }
    }

    pub fn encoder(self) -> EncoderConfig {
        match self {
            Profile::Desk => EncoderConfig::desk(),
            Profile::PaperScale => EncoderConfig::paper_scale(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorVariant {
    /// Ground-truth patch labels.
    #[default]
    Oracle,
    Mlp,
}

/// Optional overrides of the profile's encoder shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub patch: Option<usize>,
    pub embed_dim: Option<usize>,
    pub window: Option<usize>,
    pub depths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub variant: DetectorVariant,
    pub weights: Option<PathBuf>,
    /// Shape of a freshly trained MLP detector.
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            variant: DetectorVariant::Oracle,
            weights: None,
            embed_dim: 16,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IfmSection {
    pub weights: Option<PathBuf>,
    pub classifier_hidden: usize,
    pub position_encoding: bool,
}

impl Default for IfmSection {
    fn default() -> Self {
        let d = IfmConfig::default();
        Self {
            weights: None,
            classifier_hidden: d.classifier_hidden,
            position_encoding: d.position_encoding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub documents: usize,
    pub content_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            documents: 32,
            content_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    /// Data seed: corpus layout and instruction choice.
    pub seed: u64,
    /// Seed for every randomly initialised model weight.
    pub model_seed: u64,
    pub image_size: Option<usize>,
    pub context_budget: usize,
    pub gating: GatingMode,
    pub bypass: bool,
    /// Width of the projector output and the IFM.
    pub projector_dim: usize,
    pub encoder: EncoderSection,
    pub thresholds: ThresholdSchedule,
    pub detector: DetectorSection,
    pub ifm: IfmSection,
    pub corpus: CorpusSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            model_seed: 0,
            image_size: None,
            context_budget: 4096,
            gating: GatingMode::Hard,
            bypass: true,
            projector_dim: 64,
            encoder: EncoderSection::default(),
            thresholds: ThresholdSchedule::default(),
            detector: DetectorSection::default(),
            ifm: IfmSection::default(),
            corpus: CorpusSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a TOML file; relative weight paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.detector.weights, &mut cfg.ifm.weights]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The `HRVDA_SEED` environment value, if set.
    pub fn env_seed() -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                v.trim().parse().map(Some).map_err(|_| {
                    Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })
            }
            Err(_) => Ok(None),
        }
    }

    pub fn image_side(&self) -> usize {
        self.image_size.unwrap_or(self.profile.image_size())
    }

    /// Profile encoder with section overrides applied.
    pub fn encoder_config(&self) -> EncoderConfig {
        let base = self.profile.encoder();
        let e = &self.encoder;
        let depths = e
            .depths
            .clone()
            .unwrap_or_else(|| base.stages.iter().map(|s| s.depth).collect());
        let window = e.window.unwrap_or(base.stages[0].window);
        EncoderConfig::with_depths(
            &depths,
            window,
            e.patch.unwrap_or(base.patch),
            e.embed_dim.unwrap_or(base.embed_dim),
        )
    }

    pub fn ifm_config(&self) -> IfmConfig {
        IfmConfig {
            dim: self.projector_dim,
            classifier_hidden: self.ifm.classifier_hidden,
            position_encoding: self.ifm.position_encoding,
            ..IfmConfig::default()
        }
    }

    /// Checks everything that can be checked without touching weights.
    pub fn validate(&self) -> Result<()> {
        if self.context_budget == 0 {
            return Err(Error::Config("context_budget must be ≥ 1".into()));
        }
        if self.projector_dim < 4 {
            return Err(Error::Config("projector_dim must be ≥ 4".into()));
        }
        let enc = self.encoder_config();
        enc.validate()?;
        enc.stage_grids(self.image_side())?;
        self.thresholds.validate()?;
        if self.thresholds.eps_c.len() != enc.stages.len() {
            return Err(Error::Config(format!(
                "{} content thresholds for {} encoder stages",
                self.thresholds.eps_c.len(),
                enc.stages.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.corpus.content_fraction) {
            return Err(Error::Config(
                "corpus.content_fraction must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}
