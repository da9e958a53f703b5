use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::augment::{CropMethod, TransformKind};
use crate::encoder::{EncoderConfig, NUM_BLOCKS};

/// Everything that determines a training run.
///
/// `Default` carries the reference protocol: 500-sample segments,
/// temperature 0.3, learning rate 5e-4, 1000 pairs per batch, 800 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub segment_len: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crops: Vec<CropMethod>,
    pub transforms: Vec<TransformKind>,
    pub seed: u64,
    /// Dataset ids to train on; empty means all.
    pub datasets: Vec<String>,
    /// Stop after this many optimizer steps in total.
    pub max_iterations: Option<u64>,
    /// Data-parallel kernels; results are identical either way.
    pub parallel: bool,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segment_len: 500,
            temperature: 0.3,
            lr: 5e-4,
            batch_size: 1000,
            epochs: 800,
            crops: CropMethod::ALL.to_vec(),
            transforms: TransformKind::ALL.to_vec(),
            seed: 0,
            datasets: Vec::new(),
            max_iterations: None,
            parallel: true,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reference protocol scaled to a CPU: 64 pairs per batch.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.segment_len < 10 {
            return bad("segment_len must be at least 10");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crops.is_empty() || self.transforms.is_empty() {
            return bad("crop and transform menus must be non-empty");
        }
        self.encoder.validate()?;
        Ok(())
    }

    /// Stable short digest of the configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Parses flat `key = value` text (TOML syntax) on top of `base`.
    /// Returns the config and a description of every overridden key.
    pub fn from_text_with_base(text: &str, base: TrainConfig) -> Result<(TrainConfig, Vec<String>)> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        file.apply(base)
    }

    pub fn from_text(text: &str) -> Result<(TrainConfig, Vec<String>)> {
        Self::from_text_with_base(text, TrainConfig::default())
    }
}

/// Flat key-value configuration file; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub segment_len: Option<usize>,
    pub temperature: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub crops: Option<Vec<String>>,
    pub transforms: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub datasets: Option<Vec<String>>,
    pub max_iterations: Option<u64>,
    pub parallel: Option<bool>,
    /// `default` or `uniform` (all widths `encoder_width`).
    pub encoder: Option<String>,
    pub encoder_width: Option<usize>,
    pub stem_width: Option<usize>,
    pub stem_kernel: Option<usize>,
    pub channel_plan: Option<Vec<usize>>,
    pub kernel_size: Option<usize>,
    pub dilation_plan: Option<Vec<usize>>,
    pub se_reduction: Option<usize>,
    pub proj_hidden: Option<usize>,
    pub d_z: Option<usize>,
}

/// Parses names into a de-duplicated menu, keeping first-seen order.
pub fn parse_menu<T>(names: &[String]) -> Result<Vec<T>>
where
    T: std::str::FromStr<Err = crate::augment::AugmentError> + Ord + Copy,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for n in names {
        let v: T = n.parse()?;
        if seen.insert(v) {
            out.push(v);
        }
    }
    Ok(out)
}

impl ConfigFile {
    pub fn apply(self, base: TrainConfig) -> Result<(TrainConfig, Vec<String>)> {
        let mut cfg = match self.preset.as_deref() {
            None => base,
            Some("full") => TrainConfig::default(),
            Some("desk") => TrainConfig::desk(),
            Some(other) => return Err(PipelineError::Config(format!("unknown preset `{other}`"))),
        };
        let reference = TrainConfig::default();
        let mut overrides = Vec::new();
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(segment_len);
        set!(temperature);
        set!(lr);
        set!(batch_size);
        set!(epochs);
        set!(seed);
        set!(datasets);
        set!(parallel);
        if self.max_iterations.is_some() {
            cfg.max_iterations = self.max_iterations;
        }
        if let Some(c) = &self.crops {
            cfg.crops = parse_menu(c)?;
        }
        if let Some(t) = &self.transforms {
            cfg.transforms = parse_menu(t)?;
        }

        match self.encoder.as_deref() {
            None => {}
            Some("default") => cfg.encoder = EncoderConfig::default(),
            Some("uniform") => {
                let w = self.encoder_width.ok_or_else(|| {
                    PipelineError::Config("encoder = \"uniform\" needs encoder_width".into())
                })?;
                cfg.encoder = EncoderConfig::uniform(w);
            }
            Some(other) => return Err(PipelineError::Config(format!("unknown encoder `{other}`"))),
        }
        let e = &mut cfg.encoder;
        if let Some(v) = self.stem_width {
            e.stem_width = v;
        }
        if let Some(v) = self.stem_kernel {
            e.stem_kernel = v;
        }
        if let Some(v) = self.channel_plan {
            e.channel_plan = v;
        }
        if let Some(v) = self.kernel_size {
            e.kernel_size = v;
        }
        if let Some(v) = self.dilation_plan {
            e.dilation_plan = v;
        }
        if let Some(v) = self.se_reduction {
            e.se_reduction = v;
        }
        if let Some(v) = self.proj_hidden {
            e.proj_hidden = v;
        }
        if let Some(v) = self.d_z {
            e.d_z = v;
        }
        if e.channel_plan.len() == NUM_BLOCKS {
            e.d_h = e.channel_plan[NUM_BLOCKS - 1];
        }

        macro_rules! diff {
            ($field:ident) => {
                if cfg.$field != reference.$field {
                    overrides.push(format!(
                        "{} = {:?} (reference {:?})",
                        stringify!($field),
                        cfg.$field,
                        reference.$field
                    ));
                }
            };
        }
        diff!(segment_len);
        diff!(temperature);
        diff!(lr);
        diff!(batch_size);
        diff!(epochs);
        diff!(crops);
        diff!(transforms);
        diff!(encoder);
        cfg.validate()?;
        Ok((cfg, overrides))
    }
}
