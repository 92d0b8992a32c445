use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture and optimization settings of the spectral autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Bands per hyperspectral token.
    pub band_group: usize,
    /// Spatial side of a token, in pixels.
    pub spatial_patch: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_fraction: f64,
    /// Wavelength scaling constant; `None` resolves to the patch-grid side `H / p`.
    pub n_spatial: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Validate every this many steps (0 disables validation).
    pub eval_every: usize,
    /// Restrict the reconstruction loss to masked groups.
    pub masked_only_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            band_group: 1,
            spatial_patch: 4,
            encoder_layers: 4,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            mask_fraction: 0.8,
            n_spatial: None,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 1000,
            eval_every: 50,
            masked_only_loss: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(2 * self.heads) {
            return bad(format!("embed_dim {} must be divisible by 2*heads ({})", self.embed_dim, 2 * self.heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return bad(format!("embed_dim {} must be divisible by 4 for the 2-D spatial encoding", self.embed_dim));
        }
        if self.band_group == 0 || self.spatial_patch == 0 {
            return bad("band_group and spatial_patch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad(format!("mask_fraction {} outside [0, 1)", self.mask_fraction));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("layer counts and mlp_ratio must be positive".into());
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive".into());
        }
        if self.n_spatial == Some(0) {
            return bad("n_spatial must be positive".into());
        }
        Ok(())
    }

    /// Checks divisibility against a cube shape.
    pub fn check_cube(&self, bands: usize, height: usize, width: usize) -> Result<()> {
        if !bands.is_multiple_of(self.band_group) {
            return Err(Error::config(format!("band_group {} does not divide {bands} bands", self.band_group)));
        }
        if !height.is_multiple_of(self.spatial_patch) || !width.is_multiple_of(self.spatial_patch) {
            return Err(Error::config(format!(
                "spatial_patch {} does not divide {height}x{width}",
                self.spatial_patch
            )));
        }
        Ok(())
    }

    pub fn resolved_n_spatial(&self, height: usize) -> usize {
        self.n_spatial.unwrap_or((height / self.spatial_patch).max(1))
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("embed_dim".into(), self.embed_dim.to_string());
        m.insert("band_group".into(), self.band_group.to_string());
        m.insert("spatial_patch".into(), self.spatial_patch.to_string());
        m.insert("encoder_layers".into(), self.encoder_layers.to_string());
        m.insert("decoder_layers".into(), self.decoder_layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("mlp_ratio".into(), self.mlp_ratio.to_string());
        m.insert("mask_fraction".into(), self.mask_fraction.to_string());
        m.insert("n_spatial".into(), self.n_spatial.map_or("auto".into(), |n| n.to_string()));
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("steps".into(), self.steps.to_string());
        m.insert("eval_every".into(), self.eval_every.to_string());
        m.insert("masked_only_loss".into(), self.masked_only_loss.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    /// Overrides fields from `key = value` pairs; unknown keys are errors.
    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            let bad = || Error::config(format!("invalid value {v:?} for model.{k}"));
            let us = || v.parse::<usize>().map_err(|_| bad());
            let fl = || v.parse::<f64>().map_err(|_| bad());
            match k.as_str() {
                "embed_dim" => self.embed_dim = us()?,
                "band_group" => self.band_group = us()?,
                "spatial_patch" => self.spatial_patch = us()?,
                "encoder_layers" => self.encoder_layers = us()?,
                "decoder_layers" => self.decoder_layers = us()?,
                "heads" => self.heads = us()?,
                "mlp_ratio" => self.mlp_ratio = us()?,
                "mask_fraction" => self.mask_fraction = fl()?,
                "n_spatial" => self.n_spatial = if v == "auto" { None } else { Some(us()?) },
                "learning_rate" => self.learning_rate = fl()?,
                "batch_size" => self.batch_size = us()?,
                "steps" => self.steps = us()?,
                "eval_every" => self.eval_every = us()?,
                "masked_only_loss" => self.masked_only_loss = v.parse().map_err(|_| bad())?,
                "seed" => self.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown model key {k:?}"))),
            }
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
