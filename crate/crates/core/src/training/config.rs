use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RankingForm;
use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::model::{HyperParams, DEFAULT_CONTEXT_LENGTH};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over all steps.
    Cosine,
}

/// Everything a training run depends on. Serialized as flat JSON; missing
/// keys take the defaults below, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Prompt context length `M`.
    pub context_length: usize,
    pub d_tok: usize,
    pub d: usize,
    pub n_im: usize,
    pub n_te: usize,
    /// Expected class count; checked against the data when present.
    pub num_classes: Option<usize>,
    pub noise_sigma: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub ranking_form: RankingForm,
    /// Weight of the global score in the final inference score.
    pub fusion_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let enc = EncoderSpec::default();
        Self {
            gamma: hp.gamma,
            alpha: hp.alpha,
            beta: hp.beta,
            eta: hp.eta,
            tau: hp.tau,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 40,
            seed: 0,
            context_length: DEFAULT_CONTEXT_LENGTH,
            d_tok: enc.d_tok,
            d: enc.d,
            n_im: enc.n_im,
            n_te: enc.n_te,
            num_classes: None,
            noise_sigma: enc.noise_sigma,
            weight_decay: 0.0,
            momentum: 0.0,
            lr_schedule: LrSchedule::Constant,
            ranking_form: RankingForm::Hinge,
            fusion_weight: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> HyperParams {
        HyperParams { gamma: self.gamma, alpha: self.alpha, beta: self.beta, eta: self.eta, tau: self.tau }
    }

    /// Encoder parameters; the encoder seed is derived from `seed`.
    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            seed: seed::derive_seed(self.seed, "encoder"),
            d_tok: self.d_tok,
            d: self.d,
            n_im: self.n_im,
            n_te: self.n_te,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        self.encoder_spec().validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.context_length == 0 {
            return Err(Error::invalid("epochs, batch_size and context_length must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0, 1) and weight_decay nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::invalid(format!("fusion weight {} outside [0, 1]", self.fusion_weight)));
        }
        if self.num_classes.is_some_and(|c| c < 2) {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
