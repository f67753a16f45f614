//! Run configuration: named presets, flat `key = value` files and overrides.
//!
//! Resolution is defaults ← preset ← config file ← command-line overrides,
//! the rightmost source winning. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DatError, Result};
use crate::features::{FeatureDims, Stream};
use crate::metrics::LossKind;
use crate::model::{ModelConfig, ModelVariant};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// NoXi setup: d=512, window 96, MSE loss, lr 5e-5, batch 128, 50 epochs.
    PaperNoxi,
    /// As `PaperNoxi` with the CCC loss.
    PaperMpiigi,
    /// Small model for CPU runs: d=32, batch 16.
    Desk,
}

impl FromStr for Preset {
    type Err = DatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-noxi" => Ok(Preset::PaperNoxi),
            "paper-mpiigi" => Ok(Preset::PaperMpiigi),
            "desk" => Ok(Preset::Desk),
            _ => Err(DatError::Config(format!(
                "unknown preset {s:?} (expected paper-noxi, paper-mpiigi or desk)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::PaperNoxi => "paper-noxi",
            Preset::PaperMpiigi => "paper-mpiigi",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::PaperNoxi)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::PaperNoxi => RunConfig {
                model: ModelConfig::default(),
                train: TrainConfig::default(),
            },
            Preset::PaperMpiigi => RunConfig {
                model: ModelConfig::default(),
                train: TrainConfig {
                    loss: LossKind::Ccc,
                    ..TrainConfig::default()
                },
            },
            Preset::Desk => RunConfig {
                model: ModelConfig {
                    d: 32,
                    heads: 4,
                    dropout: 0.1,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    lr: 1e-3,
                    batch_size: 16,
                    epochs: 30,
                    ema_decay: 0.98,
                    ..TrainConfig::default()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let key = key.trim();
        let value = value.trim();
        if let Some(stream) = key.strip_prefix("feature_dims.") {
            let s = Stream::ALL
                .into_iter()
                .find(|s| s.key() == stream || s.file_stem() == stream)
                .ok_or_else(|| DatError::Config(format!("unknown feature stream in key {key:?}")))?;
            m.feature_dims.set(s, parse(key, value)?);
            return Ok(());
        }
        match key {
            "variant" => {
                m.variant = match value {
                    "dat" => ModelVariant::Dat,
                    "six_encoder" => ModelVariant::SixEncoder,
                    _ => return Err(DatError::Config(format!("variant must be dat or six_encoder, got {value:?}"))),
                }
            }
            "d" => m.d = parse(key, value)?,
            "dae_layers" => m.dae_layers = parse(key, value)?,
            "encoder_depth" => m.encoder_depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "ffn_mult" => m.ffn_mult = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "core_len" => m.core_len = parse(key, value)?,
            "context_len" => m.context_len = parse(key, value)?,
            "feature_dims" => m.feature_dims = parse_dims(value)?,
            "use_mgf" => m.use_mgf = parse(key, value)?,
            "use_dae" => m.use_dae = parse(key, value)?,
            "share_mgf_weights" => m.share_mgf_weights = parse(key, value)?,
            "use_positional" => m.use_positional = parse(key, value)?,
            "head_hidden" => m.head_hidden = if value == "auto" { None } else { Some(parse(key, value)?) },
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "init_seed" => m.init_seed = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "ema_decay" => t.ema_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "loss" => {
                t.loss = match value {
                    "mse" => LossKind::Mse,
                    "ccc" => LossKind::Ccc,
                    _ => return Err(DatError::Config(format!("loss must be mse or ccc, got {value:?}"))),
                }
            }
            "report_every" => t.report_every = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            _ => return Err(DatError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat config text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DatError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)
                .map_err(|e| DatError::Config(format!("line {}: {}", n + 1, strip_config(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| DatError::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| DatError::Config(format!("{}: {}", path.display(), strip_config(e))))
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DatError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// The fully resolved configuration in the flat file format; feeding it
    /// back through [`RunConfig::apply_text`] reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut lines = vec![
            format!("variant = {}", match m.variant {
                ModelVariant::Dat => "dat",
                ModelVariant::SixEncoder => "six_encoder",
            }),
            format!("d = {}", m.d),
            format!("dae_layers = {}", m.dae_layers),
            format!("encoder_depth = {}", m.encoder_depth),
            format!("heads = {}", m.heads),
            format!("ffn_mult = {}", m.ffn_mult),
            format!("dropout = {}", m.dropout),
            format!("core_len = {}", m.core_len),
            format!("context_len = {}", m.context_len),
        ];
        for s in Stream::ALL {
            lines.push(format!("feature_dims.{} = {}", s.key(), m.feature_dims.get(s)));
        }
        lines.extend([
            format!("use_mgf = {}", m.use_mgf),
            format!("use_dae = {}", m.use_dae),
            format!("share_mgf_weights = {}", m.share_mgf_weights),
            format!("use_positional = {}", m.use_positional),
            format!(
                "head_hidden = {}",
                m.head_hidden.map_or_else(|| "auto".to_string(), |h| h.to_string())
            ),
            format!("ln_eps = {:e}", m.ln_eps),
            format!("max_len = {}", m.max_len),
            format!("init_seed = {}", m.init_seed),
            format!("lr = {:e}", t.lr),
            format!("batch_size = {}", t.batch_size),
            format!("epochs = {}", t.epochs),
            format!("beta1 = {}", t.beta1),
            format!("beta2 = {}", t.beta2),
            format!("adam_eps = {:e}", t.adam_eps),
            format!("ema_decay = {}", t.ema_decay),
            format!("seed = {}", t.seed),
            format!("loss = {}", match t.loss {
                LossKind::Mse => "mse",
                LossKind::Ccc => "ccc",
            }),
            format!("report_every = {}", t.report_every),
            format!("weight_decay = {}", t.weight_decay),
            format!("grad_clip = {}", t.grad_clip),
        ]);
        lines.join("\n") + "\n"
    }
}

fn strip_config(e: DatError) -> String {
    match e {
        DatError::Config(m) => m,
        other => other.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DatError::Config(format!("invalid value {value:?} for {key}")))
}

/// `E,W,C,OF,OP` as five comma-separated integers.
pub fn parse_dims(value: &str) -> Result<FeatureDims> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(DatError::Config(format!(
            "feature dims need five values E,W,C,OF,OP, got {value:?}"
        )));
    }
    let mut dims = FeatureDims::uniform(0);
    for (s, p) in Stream::ALL.into_iter().zip(parts) {
        dims.set(s, parse("feature_dims", p)?);
    }
    Ok(dims)
}
