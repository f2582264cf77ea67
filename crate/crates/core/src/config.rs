//! `key = value` configuration files and the named presets.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::decoder::{AttnNorm, DecoderConfig, Variant};
use crate::encoder::EncoderConfig;
use crate::model::{ModelConfig, DEFAULT_TILE, MAX_TILE};
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(format!("unknown preset `{s}` (desk or paper)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub scales: Vec<f64>,
    pub tile: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scales: vec![2.0, 3.0, 4.0],
            tile: DEFAULT_TILE,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    /// When false, the latent width follows `decoder.C`.
    pub c_out_explicit: bool,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig {
                encoder: EncoderConfig {
                    c_enc: 32,
                    n_blocks: 4,
                    c_out: 64,
                    unfold: false,
                },
                c_out_explicit: false,
                decoder: DecoderConfig {
                    levels: 6,
                    width: 64,
                    base: 2,
                    blocks: 2,
                    heads: 4,
                    variant: Variant::Full,
                    attn_norm: AttnNorm::Reference(24 * 24),
                    zero_init_final: true,
                },
                train: TrainConfig {
                    patch: 24,
                    batch: 4,
                    epochs: 100,
                    lr0: 5e-4,
                    milestones: vec![60, 85],
                    decay_factor: 0.5,
                    scale_min: 1.0,
                    scale_max: 4.0,
                    repeat: 4,
                    seed: 0,
                },
                eval: EvalConfig::default(),
            },
            Preset::Paper => RunConfig {
                encoder: EncoderConfig {
                    c_enc: 64,
                    n_blocks: 16,
                    c_out: 256,
                    unfold: false,
                },
                c_out_explicit: false,
                decoder: DecoderConfig {
                    attn_norm: AttnNorm::Reference(48 * 48),
                    ..DecoderConfig::default()
                },
                train: TrainConfig {
                    repeat: 20,
                    ..TrainConfig::default()
                },
                eval: EvalConfig {
                    scales: vec![2.0, 3.0, 4.0, 6.0, 12.0, 18.0, 24.0, 30.0],
                    tile: DEFAULT_TILE,
                },
            },
        }
    }

    pub fn model(&self) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        if !self.c_out_explicit {
            encoder.c_out = self.decoder.width;
        }
        ModelConfig {
            encoder,
            decoder: self.decoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model().validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        if self.eval.tile == 0 || self.eval.tile > MAX_TILE {
            return Err(ConfigError::Invalid(format!("eval.tile must be in 1..={MAX_TILE}")));
        }
        if self.eval.scales.iter().any(|&r| !(r >= 1.0 && r.is_finite())) {
            return Err(ConfigError::Invalid("eval scales must be finite and ≥ 1".into()));
        }
        Ok(())
    }

    /// Sets one key. Errors are plain messages; callers add the location.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "encoder.c_enc" => self.encoder.c_enc = parse(key, v)?,
            "encoder.n_blocks" => self.encoder.n_blocks = parse(key, v)?,
            "encoder.c_out" => {
                self.encoder.c_out = parse(key, v)?;
                self.c_out_explicit = true;
            }
            "encoder.unfold" => self.encoder.unfold = parse(key, v)?,
            "decoder.L" => self.decoder.levels = parse(key, v)?,
            "decoder.C" => self.decoder.width = parse(key, v)?,
            "decoder.S" => self.decoder.base = parse(key, v)?,
            "decoder.B" => self.decoder.blocks = parse(key, v)?,
            "decoder.N" => self.decoder.heads = parse(key, v)?,
            "decoder.variant" => self.decoder.variant = v.parse()?,
            "decoder.attn_norm" => self.decoder.attn_norm = v.parse()?,
            "decoder.zero_init_final" => self.decoder.zero_init_final = parse(key, v)?,
            "train.patch" => self.train.patch = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr0" => self.train.lr0 = parse(key, v)?,
            "train.decay" => self.train.milestones = parse_list(key, v)?,
            "train.decay_factor" => self.train.decay_factor = parse(key, v)?,
            "train.scale_min" => self.train.scale_min = parse(key, v)?,
            "train.scale_max" => self.train.scale_max = parse(key, v)?,
            "train.repeat" => self.train.repeat = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "eval.scales" => self.eval.scales = parse_list(key, v)?,
            "eval.tile" => self.eval.tile = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding these
    /// back through [`RunConfig::set`] reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = self.model();
        let list = |xs: &[String]| if xs.is_empty() { "none".to_string() } else { xs.join(",") };
        let pairs: Vec<(&str, String)> = vec![
            ("encoder.c_enc", m.encoder.c_enc.to_string()),
            ("encoder.n_blocks", m.encoder.n_blocks.to_string()),
            ("encoder.c_out", m.encoder.c_out.to_string()),
            ("encoder.unfold", m.encoder.unfold.to_string()),
            ("decoder.L", m.decoder.levels.to_string()),
            ("decoder.C", m.decoder.width.to_string()),
            ("decoder.S", m.decoder.base.to_string()),
            ("decoder.B", m.decoder.blocks.to_string()),
            ("decoder.N", m.decoder.heads.to_string()),
            ("decoder.variant", m.decoder.variant.to_string()),
            ("decoder.attn_norm", m.decoder.attn_norm.to_string()),
            ("decoder.zero_init_final", m.decoder.zero_init_final.to_string()),
            ("train.patch", self.train.patch.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr0", self.train.lr0.to_string()),
            (
                "train.decay",
                list(&self.train.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>()),
            ),
            ("train.decay_factor", self.train.decay_factor.to_string()),
            ("train.scale_min", self.train.scale_min.to_string()),
            ("train.scale_max", self.train.scale_max.to_string()),
            ("train.repeat", self.train.repeat.to_string()),
            ("train.seed", self.train.seed.to_string()),
            (
                "eval.scales",
                list(&self.eval.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            ),
            ("eval.tile", self.eval.tile.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}
