//! Experiment configuration and its TOML loader.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TaskKind, TaskValues};

/// Task importances used by the ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub play: f64,
    pub comment: f64,
    pub share: f64,
    pub like: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { play: 5.0, comment: 2.5, share: 2.5, like: 1.25 }
    }
}

impl TaskWeights {
    pub fn get(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Play => self.play,
            TaskKind::Comment => self.comment,
            TaskKind::Share => self.share,
            TaskKind::Like => self.like,
        }
    }

    pub fn values(&self) -> TaskValues {
        [self.play, self.comment, self.share, self.like]
    }
}

/// Knobs of the synthetic user population. None of these are observable in
/// a live system; they shape the simulated ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Mean number of "true interest" topics per user.
    pub hot_topics_mean: f64,
    /// Zipf exponent of topic popularity when drawing a user's interests.
    pub popularity_skew: f64,
    /// Beta shape of the play affinity on true-interest topics.
    pub hot_play_shape: [f64; 2],
    /// Beta shape of the play affinity on every other topic.
    pub cold_play_shape: [f64; 2],
    /// Comment/share/like affinity as a fraction of play affinity.
    pub comment_scale: f64,
    pub share_scale: f64,
    pub like_scale: f64,
    /// Beta shape of P(completed | play), drawn per user and topic.
    pub completion_shape: [f64; 2],
    /// Ignore `completion_shape`: completion given play equals the play
    /// affinity.
    pub completion_follows_play: bool,
    /// Probability of a loop given a play, as a fraction of play affinity.
    pub loop_scale: f64,
    /// Probability of a skip given a play that was not completed.
    pub skip_given_incomplete: f64,
    /// Log-normal location and scale of the daily activity probability.
    pub activity_log_mean: f64,
    pub activity_log_sd: f64,
    /// Multiplicative play-probability bump on a user's first exposure to a topic.
    pub novelty_lift: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            hot_topics_mean: 3.0,
            popularity_skew: 1.0,
            hot_play_shape: [8.0, 3.0],
            cold_play_shape: [1.2, 20.0],
            comment_scale: 0.1,
            share_scale: 0.05,
            like_scale: 0.3,
            completion_shape: [2.0, 2.0],
            completion_follows_play: false,
            loop_scale: 0.4,
            skip_given_incomplete: 0.6,
            activity_log_mean: -1.2,
            activity_log_sd: 0.8,
            novelty_lift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of topic arms, K.
    pub topics: u32,
    /// Number of users, U.
    pub users: u32,
    /// (production, control, test) fractions; control and test must match.
    pub group_fractions: [f64; 3],
    pub slots_per_active_day: u32,
    pub phase1_days: u32,
    pub phase2_days: u32,
    /// Exploration aggressiveness of the test group's ranking score.
    pub gamma: f64,
    pub alpha: TaskWeights,
    /// Strength of the beta prior used by the exploration-efficiency metrics.
    pub prior_strength: f64,
    /// Monte Carlo draws per user-day when estimating the argmax distribution.
    pub mc_samples: u32,
    /// Mass imputed for served-distribution zeros before the KL divergence.
    pub imputation_epsilon: f64,
    pub availability_fraction: f64,
    pub retrain_every_days: u32,
    /// Shrinkage weight of the reward model (pseudo-count toward the parent mean).
    pub shrinkage_lambda: f64,
    /// Log-scale activity buckets for the feedback-loop breakdown.
    pub activity_buckets: u32,
    pub seed: u64,
    pub environment: EnvironmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            topics: 30,
            users: 2000,
            group_fractions: [0.8, 0.1, 0.1],
            slots_per_active_day: 10,
            phase1_days: 21,
            phase2_days: 14,
            gamma: 2.0,
            alpha: TaskWeights::default(),
            prior_strength: 2.0,
            mc_samples: 1000,
            imputation_epsilon: 1e-4,
            availability_fraction: 0.5,
            retrain_every_days: 1,
            shrinkage_lambda: 25.0,
            activity_buckets: 10,
            seed: 0,
            environment: EnvironmentConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

impl ExperimentConfig {
    pub fn total_days(&self) -> u32 {
        self.phase1_days + self.phase2_days
    }

    /// Checks every bound, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        check(self.topics >= 1, "topics", "must be at least 1")?;
        check(self.users >= 1, "users", "must be at least 1")?;
        check(
            self.group_fractions.iter().all(|f| finite_nonneg(*f)),
            "group_fractions",
            "entries must be finite and non-negative",
        )?;
        let sum: f64 = self.group_fractions.iter().sum();
        check((sum - 1.0).abs() <= 1e-9, "group_fractions", &format!("must sum to 1 (got {sum})"))?;
        check(
            (self.group_fractions[1] - self.group_fractions[2]).abs() <= 1e-12,
            "group_fractions",
            "control and test fractions must be equal",
        )?;
        check(self.slots_per_active_day >= 1, "slots_per_active_day", "must be at least 1")?;
        check(self.total_days() >= 1, "phase1_days", "experiment must last at least one day")?;
        check(finite_nonneg(self.gamma), "gamma", "must be finite and >= 0")?;
        for task in TaskKind::ALL {
            check(finite_nonneg(self.alpha.get(task)), &format!("alpha.{}", task.name()), "must be finite and >= 0")?;
        }
        check(TaskKind::ALL.iter().any(|t| self.alpha.get(*t) > 0.0), "alpha", "at least one weight must be > 0")?;
        check(finite_nonneg(self.prior_strength), "prior_strength", "must be finite and >= 0")?;
        check(self.mc_samples >= 1, "mc_samples", "must be at least 1")?;
        check(
            self.imputation_epsilon.is_finite() && self.imputation_epsilon > 0.0,
            "imputation_epsilon",
            "must be finite and > 0",
        )?;
        check(
            self.availability_fraction > 0.0 && self.availability_fraction <= 1.0,
            "availability_fraction",
            "must lie in (0, 1]",
        )?;
        check(self.retrain_every_days >= 1, "retrain_every_days", "must be at least 1")?;
        check(
            self.shrinkage_lambda.is_finite() && self.shrinkage_lambda > 0.0,
            "shrinkage_lambda",
            "must be finite and > 0",
        )?;
        check(self.activity_buckets >= 2, "activity_buckets", "must be at least 2")?;
        self.environment.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl EnvironmentConfig {
    fn validate(&self) -> Result<()> {
        check(
            self.hot_topics_mean.is_finite() && self.hot_topics_mean >= 1.0,
            "environment.hot_topics_mean",
            "must be >= 1",
        )?;
        check(finite_nonneg(self.popularity_skew), "environment.popularity_skew", "must be finite and >= 0")?;
        let shapes = [("hot_play_shape", self.hot_play_shape), ("cold_play_shape", self.cold_play_shape), ("completion_shape", self.completion_shape)];
        for (name, shape) in shapes {
            check(
                shape.iter().all(|x| x.is_finite() && *x > 0.0),
                &format!("environment.{name}"),
                "beta shapes must be finite and > 0",
            )?;
        }
        for (name, x) in [
            ("comment_scale", self.comment_scale),
            ("share_scale", self.share_scale),
            ("like_scale", self.like_scale),
            ("loop_scale", self.loop_scale),
            ("skip_given_incomplete", self.skip_given_incomplete),
        ] {
            check((0.0..=1.0).contains(&x), &format!("environment.{name}"), "must lie in [0, 1]")?;
        }
        check(self.activity_log_mean.is_finite(), "environment.activity_log_mean", "must be finite")?;
        check(finite_nonneg(self.activity_log_sd), "environment.activity_log_sd", "must be finite and >= 0")?;
        check(finite_nonneg(self.novelty_lift), "environment.novelty_lift", "must be finite and >= 0")
    }
}

/// Reads and validates a TOML config file. Missing keys take their defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::ConfigRead { path: path.to_owned(), source })?;
    ExperimentConfig::from_toml_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.topics, 30);
        assert_eq!(cfg.gamma, 2.0);
        assert_eq!(cfg.phase1_days, 21);
        assert_eq!(cfg.phase2_days, 14);
        assert_eq!(cfg.slots_per_active_day, 10);
        assert_eq!(cfg.shrinkage_lambda, 25.0);
        assert_eq!(cfg.imputation_epsilon, 1e-4);
    }

    #[test]
    fn three_and_two_weeks() {
        let cfg = ExperimentConfig::from_toml_str("phase1_days = 21\nphase2_days = 14\n").unwrap();
        assert_eq!(cfg.total_days(), 35);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let err = ExperimentConfig::from_toml_str("group_fractions = [0.7, 0.1, 0.1]").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "group_fractions"), "{err}");
    }

    #[test]
    fn negative_gamma_names_field() {
        let err = ExperimentConfig::from_toml_str("gamma = -1.0").unwrap_err();
        assert!(err.to_string().contains("`gamma`"), "{err}");
    }

    #[test]
    fn every_bound_is_field_specific() {
        let cases = [
            ("topics = 0", "topics"),
            ("users = 0", "users"),
            ("slots_per_active_day = 0", "slots_per_active_day"),
            ("phase1_days = 0\nphase2_days = 0", "phase1_days"),
            ("mc_samples = 0", "mc_samples"),
            ("imputation_epsilon = 0.0", "imputation_epsilon"),
            ("availability_fraction = 0.0", "availability_fraction"),
            ("availability_fraction = 1.5", "availability_fraction"),
            ("retrain_every_days = 0", "retrain_every_days"),
            ("shrinkage_lambda = 0.0", "shrinkage_lambda"),
            ("prior_strength = -0.5", "prior_strength"),
            ("activity_buckets = 1", "activity_buckets"),
            ("group_fractions = [0.8, 0.05, 0.15]", "group_fractions"),
            ("[alpha]\nplay = -1.0", "alpha.play"),
            ("[alpha]\nplay = 0.0\ncomment = 0.0\nshare = 0.0\nlike = 0.0", "alpha"),
            ("[environment]\nnovelty_lift = -1.0", "environment.novelty_lift"),
            ("[environment]\nhot_topics_mean = 0.5", "environment.hot_topics_mean"),
            ("[environment]\ncompletion_shape = [0.0, 2.0]", "environment.completion_shape"),
        ];
        for (text, field) in cases {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("gama = 1.0"), Err(Error::ConfigSyntax(_))));
    }

    #[test]
    fn missing_file() {
        let err = load_config("/nonexistent/config.toml").unwrap_err();
        assert!(matches!(err, Error::ConfigRead { .. }));
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = ExperimentConfig { gamma: 0.75, ..Default::default() };
        cfg.environment.novelty_lift = 0.2;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
