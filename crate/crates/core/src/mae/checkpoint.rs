use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::config::ModelConfig;
use super::model::SpectralMae;
use crate::checkpoint::{stats_from_section, stats_section, Container, Section};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::preprocess::BandStats;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "finetuned" => Ok(Stage::Finetuned),
            _ => Err(Error::validation(format!("unknown stage {s:?}"))),
        }
    }
}

/// Model parameters together with everything needed to apply them:
/// training stage and the frozen normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeCheckpoint<T> {
    pub model: SpectralMae<T>,
    pub stage: Stage,
    /// Statistics (and band list) of the hyperspectral cubes the model reconstructs.
    pub hs_stats: BandStats,
    /// Statistics of the multispectral inputs; set once fine-tuned.
    pub ms_stats: Option<BandStats>,
}

impl<T: Scalar> MaeCheckpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::default();
        let mut meta = Section::new();
        meta.insert("kind".into(), "spectral_mae".into());
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("n_spatial".into(), self.model.n_spatial.to_string());
        c.sections.insert("meta".into(), meta);
        c.sections.insert("model".into(), self.model.config.to_map());
        c.sections.insert("hs_stats".into(), stats_section(&self.hs_stats));
        if let Some(ms) = &self.ms_stats {
            c.sections.insert("ms_stats".into(), stats_section(ms));
        }
        for (name, p) in self.model.params() {
            c.push_param(&name, p);
        }
        c.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(path)?;
        let meta = c.section("meta")?;
        if meta.get("kind").map(String::as_str) != Some("spectral_mae") {
            return Err(Error::validation("checkpoint does not hold a spectral autoencoder"));
        }
        let stage: Stage = meta.get("stage").ok_or_else(|| Error::validation("missing stage"))?.parse()?;
        let n_spatial: usize = meta
            .get("n_spatial")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::validation("missing n_spatial"))?;
        let mut config = ModelConfig::default();
        config.apply(c.section("model")?)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = SpectralMae::new(config, 1, &mut rng)?;
        model.n_spatial = n_spatial;
        c.fill_params(model.params_mut())?;
        let hs_stats = stats_from_section(c.section("hs_stats")?)?;
        let ms_stats = c.sections.get("ms_stats").map(stats_from_section).transpose()?;
        Ok(MaeCheckpoint { model, stage, hs_stats, ms_stats })
    }
}
