//! Episodic objective, SGD loop, and evaluation protocol.

mod eval;
mod objective;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ablation::AblationSpec;
use crate::error::{Error, Result};
use crate::model::ModelDims;

pub use eval::{
    distance_statistic, evaluate, pairwise_distance, run_repetitions, EpisodeRecord, EvalSpec,
    Evaluation, RepetitionReport, RunSummary,
};
pub use objective::{
    episode_forward, loss_incon, loss_match, objective, EpisodeGraph, Forward, Objective,
    QueryScores,
};
pub use trainer::{train, DataBundle, MetricsRecord, StepMetrics, TrainOutcome, Trainer};

/// Which form of the matching objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-(1/R) Σ P(l_j | S, q_j)`.
    AsWritten,
    /// `-(1/R) Σ log P(l_j | S, q_j)`.
    Nll,
}

impl fmt::Display for LossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossForm::AsWritten => "as_written",
            LossForm::Nll => "nll",
        })
    }
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(LossForm::AsWritten),
            "nll" => Ok(LossForm::Nll),
            other => Err(Error::Config(format!("unknown loss_form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub k: usize,
    /// Queries per training episode.
    pub r: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub lambda: f64,
    pub dropout: f64,
    pub max_steps: u64,
    /// Validation cadence in steps; 0 validates only after the last step.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Training metrics are recorded every this many steps.
    pub log_every: u64,
    pub seed: u64,
    pub loss_form: LossForm,
    pub ablation_id: u8,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_train: 20,
            n_eval: 5,
            k: 1,
            r: 5,
            lr: 0.1,
            decay_rate: 0.1,
            decay_every: 20_000,
            lambda: 1.0,
            dropout: 0.2,
            max_steps: 50_000,
            eval_every: 1_000,
            eval_episodes: 1_000,
            log_every: 50,
            seed: 0,
            loss_form: LossForm::AsWritten,
            ablation_id: 1,
            dims: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_eval == 0 || self.k == 0 || self.r == 0 {
            return fail(format!(
                "n_train, n_eval, k and r must be positive (got {}, {}, {}, {})",
                self.n_train, self.n_eval, self.k, self.r
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) || self.decay_every == 0 {
            return fail("decay_rate must be in (0, 1] and decay_every positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_steps == 0 || self.eval_episodes == 0 || self.log_every == 0 {
            return fail("max_steps, eval_episodes and log_every must be positive".into());
        }
        self.dims.validate()?;
        AblationSpec::preset(self.ablation_id)?;
        Ok(())
    }

    pub fn ablation(&self) -> Result<AblationSpec> {
        AblationSpec::preset(self.ablation_id)
    }

    /// λ as applied: presets without the inconsistency term force it to 0.
    pub fn effective_lambda(&self) -> Result<f64> {
        Ok(if self.ablation()?.incon {
            self.lambda
        } else {
            0.0
        })
    }

    /// `lr · decay_rate^⌊step / decay_every⌋`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr * self.decay_rate.powi((step / self.decay_every) as i32)
    }
}
