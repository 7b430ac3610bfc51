//! Experiment configuration: one TOML file covering the class protocol,
//! the synthetic data generator, the backbone, and both training recipes.
//!
//! Every field has a default and unknown keys are rejected, so an empty
//! file is a valid experiment and typos fail loudly. Validation collects
//! every problem before reporting, so a broken config surfaces all of its
//! mistakes in one pass.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::protocol::ProtocolSpec;
use crate::harness::synthetic::SyntheticConfig;
use crate::inference::StrategyKind;
use crate::model::BackboneConfig;
use crate::trainer::TrainConfig;

/// Recipe for the supervised warm-up that produces the frozen backbone.
///
/// Pretraining runs on an auxiliary synthetic universe generated from its
/// own seed, so the backbone is identical across experiment runs that only
/// vary the training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub noise_std: f64,
    /// Confusable pairs inside the auxiliary universe, so the backbone
    /// learns to resolve near-prototype geometry before it is frozen.
    pub confusable_pairs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> PretrainConfig {
        PretrainConfig {
            num_classes: 64,
            train_per_class: 150,
            epochs: 25,
            batch_size: 48,
            lr0: 0.01,
            momentum: 0.9,
            noise_std: 0.3,
            confusable_pairs: 0,
            seed: 77,
        }
    }
}

impl PretrainConfig {
    fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.num_classes < 2 {
            problems.push("pretrain num_classes must be at least 2".into());
        }
        if self.train_per_class == 0 {
            problems.push("pretrain train_per_class must be at least 1".into());
        }
        if self.epochs == 0 {
            problems.push("pretrain epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("pretrain batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("pretrain lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("pretrain momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!("pretrain noise_std must be nonnegative, got {}", self.noise_std));
        }
        if self.confusable_pairs * 2 > self.num_classes {
            problems.push(format!(
                "pretrain confusable_pairs {} needs {} classes, universe has {}",
                self.confusable_pairs,
                self.confusable_pairs * 2,
                self.num_classes
            ));
        }
    }
}

/// Full description of one incremental experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub protocol: ProtocolSpec,
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Bottleneck width of every task adapter.
    pub adapter_rank: usize,
    /// Inference strategies to score after each stage.
    pub strategies: Vec<StrategyKind>,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            protocol: ProtocolSpec::default(),
            synthetic: SyntheticConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter_rank: 16,
            strategies: StrategyKind::ALL.to_vec(),
            eval_batch_size: 64,
        }
    }
}

fn push_result(problems: &mut Vec<String>, result: Result<()>) {
    if let Err(e) = result {
        problems.push(match e {
            Error::Config(m) | Error::Data(m) | Error::Numerical(m) => m,
            Error::Io(e) => e.to_string(),
        });
    }
}

impl ExperimentConfig {
    /// Check every section and every cross-section constraint, reporting
    /// all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        push_result(&mut problems, self.protocol.validate());
        push_result(&mut problems, self.synthetic.validate());
        push_result(&mut problems, self.backbone.validate());
        push_result(&mut problems, self.train.validate());
        self.pretrain.collect_problems(&mut problems);

        if self.adapter_rank == 0 {
            problems.push("adapter_rank must be at least 1".into());
        }
        if self.eval_batch_size == 0 {
            problems.push("eval_batch_size must be at least 1".into());
        }
        if self.strategies.is_empty() {
            problems.push("strategies must name at least one strategy".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                problems.push(format!("strategy {s} is listed twice"));
            }
        }

        if self.synthetic.num_classes != self.protocol.total_classes {
            problems.push(format!(
                "synthetic num_classes ({}) must equal protocol total_classes ({})",
                self.synthetic.num_classes, self.protocol.total_classes
            ));
        }
        if self.synthetic.token_dim != self.backbone.token_dim {
            problems.push(format!(
                "synthetic token_dim ({}) must equal backbone token_dim ({})",
                self.synthetic.token_dim, self.backbone.token_dim
            ));
        }
        if self.synthetic.seq_len != self.backbone.seq_len {
            problems.push(format!(
                "synthetic seq_len ({}) must equal backbone seq_len ({})",
                self.synthetic.seq_len, self.backbone.seq_len
            ));
        }
        if self.protocol.validate().is_ok()
            && self.synthetic.confusable_pairs > 0
            && self.protocol.num_tasks() < 2
        {
            problems.push("confusable pairs need at least 2 tasks to straddle".into());
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Parse and validate a TOML experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let cfg: ExperimentConfig = toml::from_str(
            "adapter_rank = 4\n\n[train]\nepochs = 3\n\n[protocol]\nincrement = 25\n",
        )
        .unwrap();
        assert_eq!(cfg.adapter_rank, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.protocol.increment, 25);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.backbone, BackboneConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("adaptor_rank = 4\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n").is_err());
    }

    #[test]
    fn validation_reports_every_problem_at_once() {
        let cfg = ExperimentConfig {
            adapter_rank: 0,
            eval_batch_size: 0,
            strategies: vec![StrategyKind::Ensemble, StrategyKind::Ensemble],
            ..ExperimentConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("adapter_rank"), "{msg}");
        assert!(msg.contains("eval_batch_size"), "{msg}");
        assert!(msg.contains("listed twice"), "{msg}");
    }

    #[test]
    fn cross_section_mismatches_are_reported() {
        let mut cfg = ExperimentConfig::default();
        cfg.synthetic.num_classes = 40;
        cfg.synthetic.token_dim = 8;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("total_classes"), "{msg}");
        assert!(msg.contains("token_dim"), "{msg}");
    }

    #[test]
    fn pairs_without_enough_tasks_are_reported() {
        let mut cfg = ExperimentConfig::default();
        cfg.protocol.base_classes = 50;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("straddle"), "{msg}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn load_config_reports_bad_paths_and_bad_toml() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_config(&dir.path().join("none.toml")), Err(Error::Config(_))));
        let path = dir.path().join("bad.toml");
        fs::write(&path, "adapter_rank = \"four\"").unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));
        let good = dir.path().join("good.toml");
        fs::write(&good, "[train]\nseed = 9\n").unwrap();
        assert_eq!(load_config(&good).unwrap().train.seed, 9);
    }
}
