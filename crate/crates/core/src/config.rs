//! Run configuration: a JSON document whose every field has a default.
//!
//! Unknown keys and invalid values are rejected with the line they appear
//! on. The resolved configuration (defaults filled in) is what gets echoed
//! into a run directory and into checkpoints.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::learner::{EnvFactory, Learner, LossConfig, OptimConfig, PipelineConfig};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    SpanPenalty,
    LearningRate,
}

/// One run per value, each in its own subdirectory of `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Learner updates.
    pub total_steps: u64,
    pub deterministic: bool,
    pub out_dir: String,
    /// Learner steps between checkpoints; defaults to a tenth of the run.
    pub checkpoint_every: Option<u64>,
    pub eval_episodes: usize,
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 1,
            total_steps: 2000,
            deterministic: false,
            out_dir: "runs/default".into(),
            checkpoint_every: None,
            eval_episodes: 100,
            sweep: None,
        }
    }
}

/// Line of the first occurrence of `"key"` in `text`, or 1.
/// Line of the first of `keys` that appears quoted in `text`.
fn line_of(text: &str, keys: &[&str]) -> usize {
    keys.iter()
        .find_map(|key| {
            let quoted = format!("\"{key}\"");
            text.lines().position(|l| l.contains(&quoted))
        })
        .map_or(1, |i| i + 1)
}

type Invalid = (&'static [&'static str], String);

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            line: e.line().max(1),
            msg: e.to_string(),
        })?;
        if let Err((keys, msg)) = cfg.check() {
            return Err(Error::Config {
                line: line_of(text, keys),
                msg: format!("{}: {msg}", keys[0]),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Semantic checks; returns the offending key.
    fn check(&self) -> std::result::Result<(), Invalid> {
        let m = &self.model;
        self.model.validate().map_err(|e| {
            let key: &[&str] = if m.n_heads * m.d_head != m.d_model {
                &["d_model", "n_heads", "d_head", "model"][..]
            } else if m.n_layers == 0 {
                &["n_layers", "model"]
            } else if !(0.0..1.0).contains(&m.dropout) {
                &["dropout", "model"]
            } else if m.ramp < 2 {
                &["ramp", "model"]
            } else if m.mem_len == 0 {
                &["mem_len", "model"]
            } else {
                &["model"]
            };
            (key, e.to_string())
        })?;
        let p = &self.pipeline;
        p.validate().map_err(|e| {
            let key: &[&str] = if !p.unroll_length.is_multiple_of(p.mini_batch.max(1)) || p.mini_batch == 0 {
                &["mini_batch", "unroll_length", "pipeline"][..]
            } else {
                &["pipeline"]
            };
            (key, e.to_string())
        })?;
        self.loss.validate().map_err(|e| (&["loss"][..], e.to_string()))?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err((&["learning_rate", "optim"][..], "must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.alpha) || o.epsilon <= 0.0 {
            return Err((&["optim"][..], "need 0 <= alpha < 1 and epsilon > 0".into()));
        }
        if o.momentum < 0.0 || o.weight_decay < 0.0 || o.min_lr < 0.0 {
            return Err((&["optim"][..], "momentum, weight_decay and min_lr must be non-negative".into()));
        }
        if self.total_steps == 0 {
            return Err((&["total_steps"][..], "must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err((&["checkpoint_every"][..], "must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err((&["values", "sweep"][..], "sweep needs at least one value".into()));
            }
        }
        self.env.build().map_err(|e| (&["env"][..], e.to_string()))?;
        Ok(())
    }

    pub fn env_factory(&self) -> EnvFactory {
        let env = self.env.clone();
        Arc::new(move || env.build())
    }

    pub fn build_learner(&self) -> Result<Learner> {
        let env = self.env.build()?;
        Learner::new(
            &self.model,
            env.obs_spec(),
            env.n_actions(),
            self.loss.clone(),
            self.optim.clone(),
            self.pipeline.clone(),
            self.total_steps,
            self.env.name(),
            self.seed,
        )
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every
            .unwrap_or_else(|| (self.total_steps / 10).max(1))
    }

    /// The configuration of one sweep member.
    pub fn with_sweep_value(&self, key: SweepKey, value: f64) -> Self {
        let mut cfg = self.clone();
        cfg.sweep = None;
        match key {
            SweepKey::SpanPenalty => cfg.loss.span_penalty = value,
            SweepKey::LearningRate => cfg.optim.learning_rate = value,
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "{\n  \"seed\": 3,\n  \"model\": {\n    \"n_layer\": 3\n  }\n}";
        match RunConfig::parse(text) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 4, "{msg}");
                assert!(msg.contains("n_layer"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_value_reports_its_line() {
        let text = "{\n  \"pipeline\": {\n    \"unroll_length\": 64,\n    \"mini_batch\": 10\n  }\n}";
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let text = "{\n  \"model\": {\n    \"d_model\": 60\n  }\n}";
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_reports_its_line() {
        let text = "{\n  \"seed\": 1,\n  \"total_steps\": \"many\"\n}";
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn env_section_selects_variant() {
        let cfg = RunConfig::parse(r#"{"env": {"name": "catch"}}"#).unwrap();
        assert_eq!(cfg.env.name(), "catch");
        let cfg = RunConfig::parse(r#"{"env": {"name": "nonmatch", "delay": 16}}"#).unwrap();
        assert!(matches!(cfg.env, EnvConfig::Nonmatch(ref c) if c.delay == 16));
        assert!(RunConfig::parse(r#"{"env": {"name": "pong"}}"#).is_err());
        assert!(RunConfig::parse(r#"{"env": {"name": "catch", "depth": 3}}"#).is_err());
    }

    #[test]
    fn sweep_members_override_one_field() {
        let base = RunConfig::default();
        let m = base.with_sweep_value(SweepKey::SpanPenalty, 0.05);
        assert_eq!(m.loss.span_penalty, 0.05);
        assert_eq!(m.optim, base.optim);
    }
}
