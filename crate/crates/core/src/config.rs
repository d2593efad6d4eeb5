//! Training configuration. Every field is optional in JSON; omitted fields
//! take the defaults below.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::AdamWConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("mask fraction z must lie in [0, 1), got {0}")]
    MaskOutOfRange(f64),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the missing-event ratio is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QStrategy {
    #[default]
    Fixed,
    /// `Q = z / (1 - z)`
    Adaptive1,
    /// `Q = (1 + z) / (1 - z)`
    Adaptive2,
}

impl std::str::FromStr for QStrategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(QStrategy::Fixed),
            "adaptive1" => Ok(QStrategy::Adaptive1),
            "adaptive2" => Ok(QStrategy::Adaptive2),
            other => Err(ConfigError::Invalid {
                field: "q_strategy",
                reason: format!("{other:?} is not one of fixed, adaptive1, adaptive2"),
            }),
        }
    }
}

/// Missing-event ratio for a strategy at mask fraction `z`.
pub fn adaptive_q(strategy: QStrategy, fixed_q: f64, z: f64) -> Result<f64, ConfigError> {
    if !(0.0..1.0).contains(&z) {
        return Err(ConfigError::MaskOutOfRange(z));
    }
    Ok(match strategy {
        QStrategy::Fixed => fixed_q,
        QStrategy::Adaptive1 => z / (1.0 - z),
        QStrategy::Adaptive2 => (1.0 + z) / (1.0 - z),
    })
}

/// Which process generates missing events while evaluating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMissing {
    #[default]
    Prior,
    Posterior,
    Off,
}

impl std::str::FromStr for EvalMissing {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prior" => Ok(EvalMissing::Prior),
            "posterior" => Ok(EvalMissing::Posterior),
            "off" => Ok(EvalMissing::Off),
            other => Err(ConfigError::Invalid {
                field: "eval_missing",
                reason: format!("{other:?} is not one of prior, posterior, off"),
            }),
        }
    }
}

/// Rank tie handling: optimistic counts strictly higher scores only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    #[default]
    Optimistic,
    Pessimistic,
}

impl std::str::FromStr for TieRule {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimistic" => Ok(TieRule::Optimistic),
            "pessimistic" => Ok(TieRule::Pessimistic),
            other => Err(ConfigError::Invalid {
                field: "tie_rule",
                reason: format!("{other:?} is not one of optimistic, pessimistic"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub gnn_layers: usize,
    pub mixture_components: usize,
    pub missing_ratio: f64,
    pub bptt_steps: usize,
    pub mc_samples: usize,
    pub lr: f64,
    /// Candidate learning rates for `select_lr`.
    pub lr_grid: Vec<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Drop the missing-event processes entirely.
    pub wo_m: bool,
    /// Drop the interval terms from both message passes.
    pub w_t: bool,
    pub q_strategy: QStrategy,
    /// Fraction of training events masked before training.
    pub mask_z: f64,
    pub test_fraction: f64,
    pub dedup_test: bool,
    /// Renormalise the truncated posterior time density by its window mass.
    pub normalize_truncation: bool,
    pub eval_missing: EvalMissing,
    pub tie_rule: TieRule,
    /// Record validation metrics every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 64,
            gnn_layers: 2,
            mixture_components: 16,
            missing_ratio: 1.0,
            bptt_steps: 5,
            mc_samples: 10,
            lr: 1e-3,
            lr_grid: vec![1e-2, 1e-3, 1e-4, 2e-5, 1e-5],
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 1000,
            seed: 0,
            wo_m: false,
            w_t: false,
            q_strategy: QStrategy::Fixed,
            mask_z: 0.0,
            test_fraction: 0.15,
            dedup_test: true,
            normalize_truncation: true,
            eval_missing: EvalMissing::Prior,
            tie_rule: TieRule::Optimistic,
            eval_every: 0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("gnn_layers", self.gnn_layers),
            ("mixture_components", self.mixture_components),
            ("bptt_steps", self.bptt_steps),
            ("mc_samples", self.mc_samples),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if !(self.missing_ratio >= 0.0 && self.missing_ratio.is_finite()) {
            return Err(invalid("missing_ratio", format!("{} is not a finite non-negative ratio", self.missing_ratio)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("{} is not a finite non-negative rate", self.lr)));
        }
        if self.lr_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(invalid("lr_grid", "every entry must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.mask_z) {
            return Err(ConfigError::MaskOutOfRange(self.mask_z));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid("test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Ratio actually used for generation, after the adaptive strategy.
    pub fn effective_q(&self) -> Result<f64, ConfigError> {
        adaptive_q(self.q_strategy, self.missing_ratio, self.mask_z)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fields that fix the parameter layout; they must match between a
/// checkpoint and the configuration it is restored under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFingerprint {
    pub node_count: usize,
    pub embed_dim: usize,
    pub gnn_layers: usize,
    pub mixture_components: usize,
    pub w_t: bool,
}

impl ArchFingerprint {
    pub fn new(cfg: &TrainConfig, node_count: usize) -> Self {
        ArchFingerprint {
            node_count,
            embed_dim: cfg.embed_dim,
            gnn_layers: cfg.gnn_layers,
            mixture_components: cfg.mixture_components,
            w_t: cfg.w_t,
        }
    }

    /// First differing field as `(name, stored, requested)`.
    pub fn first_difference(&self, other: &ArchFingerprint) -> Option<(&'static str, String, String)> {
        let fields: [(&'static str, String, String); 5] = [
            ("node_count", self.node_count.to_string(), other.node_count.to_string()),
            ("embed_dim", self.embed_dim.to_string(), other.embed_dim.to_string()),
            ("gnn_layers", self.gnn_layers.to_string(), other.gnn_layers.to_string()),
            (
                "mixture_components",
                self.mixture_components.to_string(),
                other.mixture_components.to_string(),
            ),
            ("w_t", self.w_t.to_string(), other.w_t.to_string()),
        ];
        fields.into_iter().find(|(_, a, b)| a != b)
    }
}
