//! TOML run configuration: sensible defaults, strict key checking, and
//! conversion into the library's per-module configs.

use serde::{Deserialize, Serialize};
use std::path::Path;
use weasul::model::{DecodeConfig, ModelConfig};
use weasul::quality::QualityConfig;
use weasul::simulation::{SimConfig, DEFAULT_DULL_PHRASES, MAX_EPISODE_UTTERANCES};
use weasul::trainer::TrainConfig;
use weasul::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ModelSection {
            d_model: desk.d_model,
            layers: desk.layers,
            heads: desk.heads,
            ff_hidden: desk.ff_hidden,
            max_tokens: desk.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub top_k: usize,
    pub exploit_top: usize,
    pub blocking_enabled: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        DecodeSection {
            top_k: d.top_k,
            exploit_top: d.exploit_top,
            blocking_enabled: d.blocking_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualitySection {
    pub delta: f64,
}

impl Default for QualitySection {
    fn default() -> Self {
        QualitySection { delta: QualityConfig::default().delta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub max_utterances: usize,
    pub user_max_tokens: usize,
    pub dull_phrases: Vec<String>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            max_utterances: MAX_EPISODE_UTTERANCES,
            user_max_tokens: 16,
            dull_phrases: DEFAULT_DULL_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub vocab_limit: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { vocab_limit: 205 }
    }
}

/// The full run configuration; every field has a default, so an empty file is
/// a valid configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub quality: QualitySection,
    pub simulation: SimulationSection,
    pub corpus: CorpusSection,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: AppConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dump(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config dump failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.quality_config().validate()?;
        self.decode_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.d_model == 0
            || self.model.layers == 0
            || self.model.heads == 0
            || self.model.ff_hidden == 0
            || self.model.max_tokens == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.model.d_model % self.model.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.model.d_model, self.model.heads
            )));
        }
        if self.simulation.max_utterances < 2 {
            return Err(Error::Config("max_utterances must be at least 2".into()));
        }
        if self.simulation.user_max_tokens == 0
            || self.simulation.user_max_tokens > self.model.max_tokens
        {
            return Err(Error::Config(format!(
                "user_max_tokens {} outside 1..={}",
                self.simulation.user_max_tokens, self.model.max_tokens
            )));
        }
        if self.corpus.vocab_limit == 0 {
            return Err(Error::Config("vocab_limit must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            ff_hidden: self.model.ff_hidden,
            max_tokens: self.model.max_tokens,
            vocab_size,
        }
    }

    pub fn quality_config(&self) -> QualityConfig {
        QualityConfig { delta: self.quality.delta, alpha: self.train.alpha }
    }

    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            max_tokens: self.model.max_tokens,
            top_k: self.decode.top_k,
            exploit_top: self.decode.exploit_top,
            explore_rate: self.train.explore_rate,
            blocking_enabled: self.decode.blocking_enabled,
            seed,
        }
    }

    pub fn sim_config(&self, min_turns_for_rules: f64, seed: u64) -> SimConfig {
        SimConfig {
            max_utterances: self.simulation.max_utterances,
            min_turns_for_rules,
            dull_phrases: self.simulation.dull_phrases.clone(),
            decode: self.decode_config(seed),
            user_max_tokens: self.simulation.user_max_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_all_defaults() {
        let cfg = AppConfig::parse("").unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert_eq!(cfg.quality.delta, 0.54);
        assert_eq!(cfg.train.ewc_lambda, 0.4);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.decode.top_k, 7);
        assert_eq!(cfg.train.explore_rate, 0.6);
        assert_eq!(cfg.simulation.max_utterances, 20);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = AppConfig::parse("[train]\nmystery_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
        let err = AppConfig::parse("[nonsense]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let err = AppConfig::parse("[train]\npatience = \"three\"\n").unwrap_err();
        assert!(err.to_string().contains("patience") || err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn out_of_range_explore_rate_is_rejected() {
        let err = AppConfig::parse("[train]\nexplore_rate = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("explore_rate"), "{err}");
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = AppConfig::default();
        cfg.train.iterations = 3;
        cfg.train.seed = 99;
        cfg.quality.delta = 0.6;
        cfg.simulation.dull_phrases = vec!["beats me".to_string()];
        let dumped = cfg.dump().unwrap();
        let reloaded = AppConfig::parse(&dumped).unwrap();
        assert_eq!(cfg, reloaded);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = AppConfig::parse("[model]\nd_model = 16\n[train]\ngamma = 0.9\n").unwrap();
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.layers, ModelSection::default().layers);
        assert_eq!(cfg.train.gamma, 0.9);
        assert_eq!(cfg.train.patience, 3);
    }

    #[test]
    fn invalid_dimension_combinations_are_rejected() {
        assert!(AppConfig::parse("[model]\nd_model = 9\nheads = 2\n").is_err());
        assert!(AppConfig::parse("[simulation]\nuser_max_tokens = 0\n").is_err());
        assert!(AppConfig::parse("[quality]\ndelta = 0.2\n").is_err());
    }
}
