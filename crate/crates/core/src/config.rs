//! Experiment configuration, read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::params::ParamGroup;
use crate::teacher::TeacherSpec;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "HAWAII_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    /// Parameter groups updated in this stage.
    pub fn trainable_groups(self) -> Vec<ParamGroup> {
        match self {
            Stage::Pretrain => vec![
                ParamGroup::Projector,
                ParamGroup::TeacherAdapters,
                ParamGroup::GeneralAdapters,
                ParamGroup::Routers,
                ParamGroup::TeacherProjections,
                ParamGroup::Summarizer,
                ParamGroup::GenHead,
            ],
            Stage::Finetune => ParamGroup::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub grid: usize,
    pub channels: usize,
    pub unshuffle: usize,
    /// Defaults to a value derived from the experiment seed and teacher index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TeacherConfig {
    pub fn new(grid: usize, channels: usize, unshuffle: usize) -> Self {
        Self {
            grid,
            channels,
            unshuffle,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Student token count `m` (a perfect square).
    pub tokens: usize,
    /// Student width `D`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub general_adapters: usize,
    /// LoRA rank; `None` resolves to 32 when `width ≥ 128`, else `min(32, width/4)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub teachers: Vec<TeacherConfig>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub stage: Stage,
    pub seed: u64,
    pub vocab: usize,
    pub instruction_len: usize,
    pub response_len: usize,
    pub dataset_size: usize,
    pub image_size: usize,
    pub image_channels: usize,
    /// Projector output width; defaults to `width`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_width: Option<usize>,
    /// Periodic checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub record_wall_time: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            width: 32,
            depth: 2,
            heads: 1,
            general_adapters: 3,
            rank: None,
            teachers: vec![
                TeacherConfig::new(8, 12, 2),
                TeacherConfig::new(4, 24, 1),
                TeacherConfig::new(8, 8, 2),
            ],
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            lr: 1e-3,
            steps: 500,
            batch_size: 1,
            stage: Stage::Pretrain,
            seed: 0,
            vocab: 32,
            instruction_len: 8,
            response_len: 4,
            dataset_size: 64,
            image_size: 8,
            image_channels: 3,
            lm_width: None,
            checkpoint_every: 100,
            record_wall_time: false,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    /// Smallest configuration that exercises every mechanism: m=4, D=8, two
    /// blocks, two teachers, two general adapters, rank 2.
    pub fn minimal() -> Self {
        Self {
            tokens: 4,
            width: 8,
            depth: 2,
            general_adapters: 2,
            rank: Some(2),
            teachers: vec![TeacherConfig::new(4, 3, 2), TeacherConfig::new(2, 5, 1)],
            steps: 20,
            vocab: 8,
            instruction_len: 3,
            response_len: 2,
            dataset_size: 8,
            image_size: 4,
            image_channels: 2,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `HAWAII_SEED` if set; returns an error if it is not an integer.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn num_teachers(&self) -> usize {
        self.teachers.len()
    }

    pub fn resolved_rank(&self) -> usize {
        self.rank.unwrap_or(if self.width >= 128 { 32 } else { (self.width / 4).min(32) })
    }

    pub fn resolved_lm_width(&self) -> usize {
        self.lm_width.unwrap_or(self.width)
    }

    pub fn teacher_specs(&self) -> Vec<TeacherSpec> {
        self.teachers
            .iter()
            .enumerate()
            .map(|(i, t)| TeacherSpec {
                grid: t.grid,
                channels: t.channels,
                unshuffle: t.unshuffle,
                seed: t.seed.unwrap_or_else(|| self.seed.wrapping_mul(7919).wrapping_add(1000 + i as u64)),
            })
            .collect()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            tokens: self.tokens,
            width: self.width,
            depth: self.depth,
            image_size: self.image_size,
            image_channels: self.image_channels,
            teacher_adapters: self.num_teachers(),
            general_adapters: self.general_adapters,
            rank: self.resolved_rank(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tokens", self.tokens),
            ("width", self.width),
            ("depth", self.depth),
            ("general_adapters", self.general_adapters),
            ("batch_size", self.batch_size),
            ("instruction_len", self.instruction_len),
            ("response_len", self.response_len),
            ("dataset_size", self.dataset_size),
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("lm_width", self.resolved_lm_width()),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.heads != 1 {
            return Err(Error::config("heads", "only single-head attention is supported"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "must be at least 2"));
        }
        if self.teachers.is_empty() {
            return Err(Error::config("teachers", "at least one teacher is required"));
        }
        let rank = self.resolved_rank();
        if rank == 0 || rank >= self.width {
            return Err(Error::config("rank", format!("{rank} must satisfy 0 < rank < width ({})", self.width)));
        }
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lr", self.lr)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("{v} must be finite and non-negative")));
            }
        }
        self.encoder_config().validate()?;
        for (i, spec) in self.teacher_specs().iter().enumerate() {
            spec.validate(self.tokens, self.image_size)
                .map_err(|m| Error::config(format!("teachers[{i}]"), m))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.resolved_rank(), 8);
        assert_eq!(cfg.lambda1, 0.5);
        assert_eq!(cfg.lambda2, 0.05);
        assert_eq!(cfg.general_adapters, 3);
        TrainConfig::minimal().validate().unwrap();
    }

    #[test]
    fn rank_rule() {
        let wide = TrainConfig {
            width: 256,
            ..TrainConfig::default()
        };
        assert_eq!(wide.resolved_rank(), 32);
        let mid = TrainConfig {
            width: 64,
            ..TrainConfig::default()
        };
        assert_eq!(mid.resolved_rank(), 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = TrainConfig::from_json_str(r#"{"lambda_1": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_1"), "{err}");
    }

    #[test]
    fn bad_teacher_names_index() {
        let mut cfg = TrainConfig::default();
        cfg.teachers[1] = TeacherConfig::new(8, 4, 1);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "teachers[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = TrainConfig::minimal();
        cfg.teachers[0].seed = Some(5);
        let back = TrainConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_json_str(r#"{"steps": 3}"#).unwrap();
        assert_eq!(partial.steps, 3);
        assert_eq!(partial.width, 32);
    }
}
