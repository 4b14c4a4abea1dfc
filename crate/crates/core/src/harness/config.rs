//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are allowed; unknown keys are rejected.
//! Every key is listed in `ExperimentConfig::DOCUMENTED_KEYS` (and the
//! project README) together with its default.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Metric};
use crate::sampler::{SamplingStrategy, StrategyKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs_lower: usize,
    /// Fine-tuning (upper bound or semi-supervised) starts from the lower
    /// bound checkpoint at this epoch and runs to `epochs_lower`.
    pub branch_epoch: usize,
    pub metric: Metric,
    pub lambda_acd: f64,
    pub margin_acd: f64,
    pub lambda_l2: f64,
    pub margin_l2: f64,
    pub epsilon: f64,
    pub strategy: StrategyKind,
    pub n_e: usize,
    pub source: String,
    pub target: String,
    pub seeds: Vec<u64>,
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub template_k: usize,
    pub template_count: usize,
    /// Image channel used for template matching (the FLAIR analogue).
    pub prior_channel: usize,
    pub jsd_bins: usize,
    pub jsd_seeds: usize,
    pub eval_threshold: f32,
    pub sweep_n_e: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            batch_size: 12,
            lr: 1e-6,
            epochs_lower: 50,
            branch_epoch: 35,
            metric: Metric::Acd,
            lambda_acd: 1.0,
            margin_acd: 1.0,
            lambda_l2: 0.01,
            margin_l2: 1000.0,
            epsilon: 1e-7,
            strategy: StrategyKind::EightyTwenty,
            n_e: 100,
            source: "A".into(),
            target: "B".into(),
            seeds: vec![0, 1, 2, 3, 4],
            n_train_images: 30,
            n_test_images: 10,
            image_size: 64,
            patch_size: 32,
            patches_per_image: 10,
            template_k: 7,
            template_count: 30,
            prior_channel: 2,
            jsd_bins: 64,
            jsd_seeds: 10,
            eval_threshold: 0.5,
            sweep_n_e: vec![20, 100, 200, 500, 1000, 2000],
        }
    }
}

impl ExperimentConfig {
    pub const DOCUMENTED_KEYS: &'static [&'static str] = &[
        "data_dir",
        "out_dir",
        "batch_size",
        "lr",
        "epochs_lower",
        "branch_epoch",
        "metric",
        "lambda_acd",
        "margin_acd",
        "lambda_l2",
        "margin_l2",
        "epsilon",
        "strategy",
        "n_e",
        "source",
        "target",
        "seeds",
        "n_train_images",
        "n_test_images",
        "image_size",
        "patch_size",
        "patches_per_image",
        "template_k",
        "template_count",
        "prior_channel",
        "jsd_bins",
        "jsd_seeds",
        "eval_threshold",
        "sweep_n_e",
    ];

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got {raw:?}", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "epochs_lower" => self.epochs_lower = num(key, value)?,
            "branch_epoch" => self.branch_epoch = num(key, value)?,
            "metric" => self.metric = Metric::parse(value)?,
            "lambda_acd" => self.lambda_acd = num(key, value)?,
            "margin_acd" => self.margin_acd = num(key, value)?,
            "lambda_l2" => self.lambda_l2 = num(key, value)?,
            "margin_l2" => self.margin_l2 = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "strategy" => self.strategy = StrategyKind::parse(value)?,
            "n_e" => self.n_e = num(key, value)?,
            "source" => self.source = value.to_string(),
            "target" => self.target = value.to_string(),
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|p| num::<u64>(key, p.trim()))
                    .collect::<Result<_>>()?
            }
            "n_train_images" => self.n_train_images = num(key, value)?,
            "n_test_images" => self.n_test_images = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "patches_per_image" => self.patches_per_image = num(key, value)?,
            "template_k" => self.template_k = num(key, value)?,
            "template_count" => self.template_count = num(key, value)?,
            "prior_channel" => self.prior_channel = num(key, value)?,
            "jsd_bins" => self.jsd_bins = num(key, value)?,
            "jsd_seeds" => self.jsd_seeds = num(key, value)?,
            "eval_threshold" => self.eval_threshold = num(key, value)?,
            "sweep_n_e" => {
                self.sweep_n_e = value
                    .split(',')
                    .map(|p| num::<usize>(key, p.trim()))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2 (half labeled source, half unlabeled target), got {}",
                self.batch_size
            )));
        }
        if self.branch_epoch >= self.epochs_lower {
            return Err(Error::Config(format!(
                "branch_epoch {} must be < epochs_lower {}",
                self.branch_epoch, self.epochs_lower
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.patch_size % 4 != 0 || self.image_size % 4 != 0 {
            return Err(Error::Config("patch_size and image_size must be divisible by 4".into()));
        }
        if self.n_e < 2 {
            return Err(Error::Config(format!("n_e must be >= 2, got {}", self.n_e)));
        }
        if self.prior_channel > 2 {
            return Err(Error::Config("prior_channel must be 0, 1 or 2".into()));
        }
        self.loss_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Metric-paired loss settings: (lambda, margin) follow the active
    /// metric.
    pub fn loss_config(&self) -> LossConfig {
        self.loss_config_for(self.metric)
    }

    pub fn loss_config_for(&self, metric: Metric) -> LossConfig {
        let (lambda, margin) = match metric {
            Metric::Acd => (self.lambda_acd, self.margin_acd),
            Metric::L2 => (self.lambda_l2, self.margin_l2),
        };
        LossConfig {
            lambda,
            margin,
            metric,
            epsilon: self.epsilon,
        }
    }

    pub fn sampling_strategy(&self) -> Result<SamplingStrategy> {
        SamplingStrategy::new(self.strategy, self.n_e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.batch_size, 12);
        assert_eq!(cfg.lr, 1e-6);
        assert_eq!(cfg.branch_epoch, 35);
        assert_eq!(cfg.lambda_acd, 1.0);
        assert_eq!(cfg.margin_l2, 1000.0);
    }

    #[test]
    fn parses_keys_comments_and_lists() {
        let text = "\
# experiment
batch_size = 8
lr = 0.05
metric = l2
strategy = fifty_fifty
seeds = 3, 4, 5
sweep_n_e = 10,20
target = C   # fine-tuning target
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr, 0.05);
        assert_eq!(cfg.metric, Metric::L2);
        assert_eq!(cfg.strategy, StrategyKind::FiftyFifty);
        assert_eq!(cfg.seeds, vec![3, 4, 5]);
        assert_eq!(cfg.sweep_n_e, vec![10, 20]);
        assert_eq!(cfg.target, "C");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected_with_line_numbers() {
        let err = ExperimentConfig::parse("batch_size = twelve").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = ExperimentConfig::parse("\n\nbranch_epoch = 60").unwrap_err();
        assert!(err.to_string().contains("branch_epoch"), "{err}");
    }

    #[test]
    fn odd_batch_size_is_rejected() {
        assert!(ExperimentConfig::parse("batch_size = 7").is_err());
    }

    #[test]
    fn every_documented_key_is_settable() {
        for key in ExperimentConfig::DOCUMENTED_KEYS {
            let value = match *key {
                "data_dir" | "out_dir" => "x",
                "metric" => "acd",
                "strategy" => "eighty_twenty",
                "source" | "target" => "A",
                "seeds" => "1,2",
                "sweep_n_e" => "20,100",
                "lr" | "lambda_acd" | "margin_acd" | "lambda_l2" | "epsilon" | "eval_threshold" => "0.5",
                "margin_l2" => "10",
                "branch_epoch" => "3",
                "epochs_lower" => "5",
                "batch_size" => "4",
                "patch_size" | "image_size" => "16",
                "template_k" => "5",
                "prior_channel" => "2",
                _ => "10",
            };
            let text = format!("{key} = {value}");
            let mut cfg = ExperimentConfig::default();
            cfg.set(key, value).unwrap_or_else(|e| panic!("key {key}: {e}"));
            let _ = text;
        }
    }

    #[test]
    fn metric_pairs_flow_into_loss_config() {
        let cfg = ExperimentConfig::default();
        let acd = cfg.loss_config_for(Metric::Acd);
        assert_eq!((acd.lambda, acd.margin), (1.0, 1.0));
        let l2 = cfg.loss_config_for(Metric::L2);
        assert_eq!((l2.lambda, l2.margin), (0.01, 1000.0));
    }
}
