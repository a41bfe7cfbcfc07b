use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalSpec};
use super::objective::{objective, Forward};
use super::TrainConfig;
use crate::ablation::AblationSpec;
use crate::data::{sample_episode, Corpus, EmbeddingTable, Episode};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::{sgd_step, Tape};

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
/// Seed offset for validation episodes.
const DEV_SEED_OFFSET: u64 = 0xDE7;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Corpora and frozen word vectors for one experiment.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Option<Corpus>,
    pub embeddings: EmbeddingTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub j_match: f64,
    pub j_incon: f64,
    pub j: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub j_match: f64,
    pub j_incon: f64,
    pub j: f64,
    pub eval_accuracy: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// SGD state for one model. Episode sampling, dropout and initialization
/// draw from separate streams of the configured seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub spec: AblationSpec,
    pub params: ParameterSet,
    lambda: f64,
    step: u64,
    sampler: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.ablation()?;
        let params = ParameterSet::init(
            config.dims,
            &spec.variant,
            &mut stream(config.seed, INIT_STREAM),
        )?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let spec = config.ablation()?;
        let params = params.adapted_to(&spec.variant)?;
        Ok(Trainer {
            lambda: config.effective_lambda()?,
            spec,
            params,
            step: 0,
            sampler: stream(config.seed, SAMPLE_STREAM),
            dropout_rng: stream(config.seed, DROPOUT_STREAM),
            config,
        })
    }

    /// Completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Samples an `n_train`-way episode and takes one step on it.
    pub fn train_step(
        &mut self,
        corpus: &Corpus,
        embeddings: &EmbeddingTable,
    ) -> Result<StepMetrics> {
        let c = &self.config;
        let episode = sample_episode(corpus, c.n_train, c.k, c.r, &mut self.sampler)?;
        self.step_on(&episode, embeddings)
    }

    /// Forward, backward and SGD update on one episode.
    pub fn step_on(
        &mut self,
        episode: &Episode,
        embeddings: &EmbeddingTable,
    ) -> Result<StepMetrics> {
        let lr = self.config.learning_rate(self.step);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &self.spec.variant, true)?;
        let fwd = Forward {
            params: &bound,
            dims: self.params.dims,
            variant: self.spec.variant,
            embeddings,
            dropout: Dropout::train(self.config.dropout),
        };
        let obj = objective(
            &mut tape,
            &fwd,
            episode,
            self.config.loss_form,
            self.lambda,
            &mut self.dropout_rng,
        )?;
        let j = tape.value(obj.j).item();
        if !j.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                norms: self.params.norms(),
            });
        }
        let grads = tape.backward(obj.j)?;
        self.params.zero_grad();
        self.params.accumulate(&bound, &grads);
        sgd_step(self.params.tensors_mut(), lr);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            lr,
            j_match: tape.value(obj.j_match).item(),
            j_incon: tape.value(obj.j_incon).item(),
            j,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (earliest on ties).
    pub best: ParameterSet,
    pub best_step: u64,
    pub best_accuracy: f64,
    pub last: ParameterSet,
}

/// Runs `config.max_steps` updates, validating every `eval_every` steps and
/// after the last one, and reports metrics to `sink`.
pub fn train(
    config: &TrainConfig,
    data: &DataBundle,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let dev_spec = EvalSpec {
        n: config.n_eval,
        k: config.k,
        episodes: config.eval_episodes,
        seed: config.seed + DEV_SEED_OFFSET,
    };
    let mut best: Option<(ParameterSet, u64, f64)> = None;
    for _ in 0..config.max_steps {
        let m = trainer.train_step(&data.train, &data.embeddings)?;
        let validate = (config.eval_every > 0 && m.step % config.eval_every == 0)
            || m.step == config.max_steps;
        let eval_accuracy = if validate {
            let acc = evaluate(
                &trainer.params,
                &trainer.spec.variant,
                &data.dev,
                &data.embeddings,
                dev_spec,
            )?
            .accuracy;
            if best.as_ref().map_or(true, |b| acc > b.2) {
                best = Some((trainer.params.clone(), m.step, acc));
            }
            Some(acc)
        } else {
            None
        };
        if validate || m.step % config.log_every == 0 {
            sink(&MetricsRecord {
                step: m.step,
                lr: m.lr,
                j_match: m.j_match,
                j_incon: m.j_incon,
                j: m.j,
                eval_accuracy,
            })?;
        }
    }
    let (best, best_step, best_accuracy) = best.expect("last step always validates");
    Ok(TrainOutcome {
        best,
        best_step,
        best_accuracy,
        last: trainer.params,
    })
}
