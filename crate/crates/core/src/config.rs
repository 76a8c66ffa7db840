//! Flat `key = value` run-configuration files.
//!
//! Every tunable of a run — optimizer, model dimensions, augmentation
//! ranges, ablation switches and benchmark composition — is addressable by a
//! single flat key, so a config file plus command-line overrides fully
//! determines a run. Unknown keys are rejected by name, and
//! parse(serialize(c)) == c.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{BenchmarkConfig, ShapeKind};
use crate::losses::TaskBranch;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let benchmark = BenchmarkConfig::default();
        let mut train = TrainConfig::default();
        train.dims.n_classes = benchmark.classes.len();
        Self { train, benchmark }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        line,
        key: key.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Apply one `key = value` override. `line` only feeds error messages
    /// (pass 0 for command-line overrides).
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let b = &mut self.benchmark;
        match key {
            "epochs" => t.epochs = parse_as(key, value, line)?,
            "batch_size" => t.batch_size = parse_as(key, value, line)?,
            "lr" => t.lr = parse_as(key, value, line)?,
            "lr_decay_every" => t.lr_decay_every = parse_as(key, value, line)?,
            "lr_decay_factor" => t.lr_decay_factor = parse_as(key, value, line)?,
            "weight_decay" => t.weight_decay = parse_as(key, value, line)?,
            "alpha" => t.weights.alpha = parse_as(key, value, line)?,
            "beta" => t.weights.beta = parse_as(key, value, line)?,
            "gamma" => t.weights.gamma = parse_as(key, value, line)?,
            "n_layers" => t.dims.n_layers = parse_as(key, value, line)?,
            "feat_dim" => t.dims.feat_dim = parse_as(key, value, line)?,
            "hidden_dim" => t.dims.hidden_dim = parse_as(key, value, line)?,
            "attn_dim" => t.dims.attn_dim = parse_as(key, value, line)?,
            "m_anchors" => t.dims.m_anchors = parse_as(key, value, line)?,
            "radius_sq" => t.dims.radius_sq = parse_as(key, value, line)?,
            "leaky_slope" => t.dims.leaky_slope = parse_as(key, value, line)?,
            "rot_x_half" => t.augment.rot_x_half = parse_as(key, value, line)?,
            "rot_y_half" => t.augment.rot_y_half = parse_as(key, value, line)?,
            "rot_z_half" => t.augment.rot_z_half = parse_as(key, value, line)?,
            "scale_min" => t.augment.scale_min = parse_as(key, value, line)?,
            "scale_max" => t.augment.scale_max = parse_as(key, value, line)?,
            "translation_max" => t.augment.translation_max = parse_as(key, value, line)?,
            "drop_keep_ratio" => t.drop_keep_ratio = parse_as(key, value, line)?,
            "seed" => t.seed = parse_as(key, value, line)?,
            "ablation" => t.ablation = parse_as(key, value, line)?,
            "task_branch" => {
                t.task_branch = match value {
                    "original" => TaskBranch::Original,
                    "both" => TaskBranch::Both,
                    _ => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            msg: format!("expected `original` or `both`, got `{value}`"),
                        })
                    }
                }
            }
            "normalize_local" => t.normalize_local = parse_as(key, value, line)?,
            "grad_clip" => t.grad_clip = parse_as(key, value, line)?,
            "classes" => {
                let mut classes = Vec::new();
                for part in value.split(',') {
                    classes.push(parse_as::<ShapeKind>(key, part.trim(), line)?);
                }
                b.classes = classes;
                t.dims.n_classes = b.classes.len();
            }
            "train_per_class" => b.train_per_class = parse_as(key, value, line)?,
            "test_per_class" => b.test_per_class = parse_as(key, value, line)?,
            "points_per_cloud" => b.points_per_cloud = parse_as(key, value, line)?,
            "crop_fraction" => b.corruption.crop_fraction = parse_as(key, value, line)?,
            "jitter_sigma" => b.corruption.jitter_sigma = parse_as(key, value, line)?,
            "density_bias" => b.corruption.density_bias = parse_as(key, value, line)?,
            "outlier_count" => b.corruption.outlier_count = parse_as(key, value, line)?,
            "outlier_range" => b.corruption.outlier_range = parse_as(key, value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` per line, `#` comments and
    /// blank lines ignored. Starts from defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::BadLine { line })?;
            config.apply(key.trim(), value.trim(), line)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.benchmark.classes.is_empty() {
            return Err(ConfigError::Invalid("classes must be non-empty".into()));
        }
        if self.train.dims.n_classes != self.benchmark.classes.len() {
            return Err(ConfigError::Invalid(format!(
                "model has {} output classes but the benchmark lists {}",
                self.train.dims.n_classes,
                self.benchmark.classes.len()
            )));
        }
        Ok(())
    }

    /// Render the full configuration; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let b = &self.benchmark;
        let classes = b
            .classes
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(",");
        let task_branch = match t.task_branch {
            TaskBranch::Original => "original",
            TaskBranch::Both => "both",
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(out, "{k} = {v}").unwrap();
        };
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("alpha", t.weights.alpha.to_string());
        kv("beta", t.weights.beta.to_string());
        kv("gamma", t.weights.gamma.to_string());
        kv("n_layers", t.dims.n_layers.to_string());
        kv("feat_dim", t.dims.feat_dim.to_string());
        kv("hidden_dim", t.dims.hidden_dim.to_string());
        kv("attn_dim", t.dims.attn_dim.to_string());
        kv("m_anchors", t.dims.m_anchors.to_string());
        kv("radius_sq", t.dims.radius_sq.to_string());
        kv("leaky_slope", t.dims.leaky_slope.to_string());
        kv("rot_x_half", t.augment.rot_x_half.to_string());
        kv("rot_y_half", t.augment.rot_y_half.to_string());
        kv("rot_z_half", t.augment.rot_z_half.to_string());
        kv("scale_min", t.augment.scale_min.to_string());
        kv("scale_max", t.augment.scale_max.to_string());
        kv("translation_max", t.augment.translation_max.to_string());
        kv("drop_keep_ratio", t.drop_keep_ratio.to_string());
        kv("seed", t.seed.to_string());
        kv("ablation", t.ablation.name().to_string());
        kv("task_branch", task_branch.to_string());
        kv("normalize_local", t.normalize_local.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("classes", classes);
        kv("train_per_class", b.train_per_class.to_string());
        kv("test_per_class", b.test_per_class.to_string());
        kv("points_per_cloud", b.points_per_cloud.to_string());
        kv("crop_fraction", b.corruption.crop_fraction.to_string());
        kv("jitter_sigma", b.corruption.jitter_sigma.to_string());
        kv("density_bias", b.corruption.density_bias.to_string());
        kv("outlier_count", b.corruption.outlier_count.to_string());
        kv("outlier_range", b.corruption.outlier_range.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, c);
        // Fixed point: serializing the parse changes nothing.
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn overrides_comments_and_blank_lines() {
        let text = "\n# a comment\nepochs = 5\nlr = 0.01  # inline comment\nclasses = sphere,cube\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.benchmark.classes, vec![ShapeKind::Sphere, ShapeKind::Cube]);
        assert_eq!(c.train.dims.n_classes, 2);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse("epochs = 5\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "learning_rate");
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_and_bad_line() {
        assert!(matches!(
            RunConfig::parse("epochs = many\n").unwrap_err(),
            ConfigError::BadValue { line: 1, .. }
        ));
        assert!(matches!(
            RunConfig::parse("just words\n").unwrap_err(),
            ConfigError::BadLine { line: 1 }
        ));
        assert!(matches!(
            RunConfig::parse("task_branch = sideways\n").unwrap_err(),
            ConfigError::BadValue { line: 1, .. }
        ));
    }

    #[test]
    fn enum_keys_parse() {
        let c = RunConfig::parse("ablation = no_local\ntask_branch = original\n").unwrap();
        assert_eq!(c.train.ablation, crate::train::Ablation::NoLocal);
        assert_eq!(c.train.task_branch, TaskBranch::Original);
    }
}
