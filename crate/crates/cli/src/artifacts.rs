//! Saving and restoring trained tokenizers and models as checkpoints.

use std::path::Path;

use kline_core::ar::{ArConfig, ArModel};
use kline_core::tokenizer::Tokenizer;
use kline_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TokenizerSection;

/// Architecture of an autoregressive model, as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub k: usize,
    pub max_context: usize,
    pub ffn_dropout: f64,
    pub resid_dropout: f64,
    pub attn_dropout: f64,
    pub token_dropout: f64,
}

impl From<ArConfig> for ArSection {
    fn from(c: ArConfig) -> Self {
        ArSection {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_ff: c.d_ff,
            n_heads: c.n_heads,
            k: c.k,
            max_context: c.max_context,
            ffn_dropout: c.ffn_dropout,
            resid_dropout: c.resid_dropout,
            attn_dropout: c.attn_dropout,
            token_dropout: c.token_dropout,
        }
    }
}

impl From<ArSection> for ArConfig {
    fn from(s: ArSection) -> Self {
        ArConfig {
            n_layers: s.n_layers,
            d_model: s.d_model,
            d_ff: s.d_ff,
            n_heads: s.n_heads,
            k: s.k,
            max_context: s.max_context,
            ffn_dropout: s.ffn_dropout,
            resid_dropout: s.resid_dropout,
            attn_dropout: s.attn_dropout,
            token_dropout: s.token_dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub kind: String,
    pub tokenizer: Option<TokenizerSection>,
    pub model: Option<ArSection>,
}

impl ArtifactMeta {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("metadata serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config block: {}", e.message())))
    }
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer, section: &TokenizerSection) -> Result<()> {
    let meta = ArtifactMeta {
        kind: "tokenizer".into(),
        tokenizer: Some(section.clone()),
        model: None,
    };
    Checkpoint {
        config: meta.to_text(),
        params: tok.params.clone(),
    }
    .save(path)
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let ckpt = Checkpoint::load(path)?;
    let meta = ArtifactMeta::parse(&ckpt.config)?;
    match (meta.kind.as_str(), meta.tokenizer) {
        ("tokenizer", Some(section)) => Tokenizer::from_params(section.model_config(), &ckpt.params),
        _ => Err(Error::Checkpoint(format!(
            "{} does not hold a tokenizer",
            path.display()
        ))),
    }
}

pub fn save_model(path: &Path, model: &ArModel) -> Result<()> {
    let meta = ArtifactMeta {
        kind: "model".into(),
        tokenizer: None,
        model: Some(model.cfg.into()),
    };
    Checkpoint {
        config: meta.to_text(),
        params: model.params.clone(),
    }
    .save(path)
}

pub fn load_model(path: &Path) -> Result<ArModel> {
    let ckpt = Checkpoint::load(path)?;
    let meta = ArtifactMeta::parse(&ckpt.config)?;
    match (meta.kind.as_str(), meta.model) {
        ("model", Some(section)) => ArModel::from_params(section.into(), &ckpt.params),
        _ => Err(Error::Checkpoint(format!("{} does not hold a model", path.display()))),
    }
}
