use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{episode_forward, Forward};
use super::trainer::{train, DataBundle, MetricsRecord};
use super::TrainConfig;
use crate::ablation::Variant;
use crate::data::{sample_episode, Corpus, EmbeddingTable};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tape;

/// Episode shape and count for evaluation-style sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSpec {
    pub n: usize,
    pub k: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub classes: Vec<String>,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub records: Vec<EpisodeRecord>,
}

/// Accuracy over `spec.episodes` single-query episodes with dropout off.
/// The episodes depend only on `corpus` and `spec.seed`.
pub fn evaluate(
    params: &ParameterSet,
    variant: &Variant,
    corpus: &Corpus,
    embeddings: &EmbeddingTable,
    spec: EvalSpec,
) -> Result<Evaluation> {
    let params = params.adapted_to(variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::with_capacity(spec.episodes);
    let mut correct = 0usize;
    for episode in 0..spec.episodes {
        let ep = sample_episode(corpus, spec.n, spec.k, 1, &mut rng)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, variant, false)?;
        let fwd = Forward {
            params: &bound,
            dims: params.dims,
            variant: *variant,
            embeddings,
            dropout: Dropout::OFF,
        };
        let graph = episode_forward(&mut tape, &fwd, &ep, &mut unused)?;
        let q = graph.query_scores(&tape).remove(0);
        correct += usize::from(q.predicted == q.label);
        records.push(EpisodeRecord {
            episode,
            classes: ep
                .classes
                .iter()
                .map(|&c| corpus.relation_name(c).to_string())
                .collect(),
            label: q.label,
            predicted: q.predicted,
            scores: q.scores,
        });
    }
    Ok(Evaluation {
        accuracy: correct as f64 / spec.episodes.max(1) as f64,
        records,
    })
}

/// `(2 / (N K (K − 1))) Σ_i Σ_{k<k'} ‖ŝ_k^i − ŝ_k'^i‖²` for one support set
/// given as per-class lists of instance vectors.
pub fn pairwise_distance(classes: &[Vec<Vec<f64>>]) -> Result<f64> {
    let k = classes.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(Error::Contract(format!(
            "the distance statistic needs K >= 2, got K = {k}"
        )));
    }
    let mut total = 0.0;
    for class in classes {
        if class.len() != k {
            return Err(Error::Contract("classes have different shot counts".into()));
        }
        for a in 0..k {
            for b in a + 1..k {
                total += class[a]
                    .iter()
                    .zip(&class[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
            }
        }
    }
    Ok(2.0 * total / (classes.len() * k * (k - 1)) as f64)
}

/// Mean pairwise support distance over `spec.episodes` sampled support
/// sets, each encoded against one sampled query.
pub fn distance_statistic(
    params: &ParameterSet,
    variant: &Variant,
    corpus: &Corpus,
    embeddings: &EmbeddingTable,
    spec: EvalSpec,
) -> Result<f64> {
    if spec.k < 2 {
        return Err(Error::Contract(format!(
            "the distance statistic needs K >= 2, got K = {}",
            spec.k
        )));
    }
    if spec.episodes == 0 {
        return Err(Error::Contract("need at least one support set".into()));
    }
    let params = params.adapted_to(variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0;
    for _ in 0..spec.episodes {
        let ep = sample_episode(corpus, spec.n, spec.k, 1, &mut rng)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, variant, false)?;
        let fwd = Forward {
            params: &bound,
            dims: params.dims,
            variant: *variant,
            embeddings,
            dropout: Dropout::OFF,
        };
        let graph = episode_forward(&mut tape, &fwd, &ep, &mut unused)?;
        let classes: Vec<Vec<Vec<f64>>> = graph.pairs[0]
            .iter()
            .map(|p| {
                p.supports
                    .iter()
                    .map(|&s| tape.value(s).data().to_vec())
                    .collect()
            })
            .collect();
        sum += pairwise_distance(&classes)?;
    }
    Ok(sum / spec.episodes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_step: u64,
    pub dev_accuracy: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub runs: Vec<RunSummary>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl RepetitionReport {
    pub fn from_runs(runs: Vec<RunSummary>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let std = if runs.len() < 2 {
            0.0
        } else {
            let ss: f64 = runs.iter().map(|r| (r.accuracy - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        };
        RepetitionReport { runs, mean, std }
    }
}

/// Seed offset separating final-test episodes from validation episodes.
pub(crate) const TEST_SEED_OFFSET: u64 = 0x7E57;

/// Trains `reps` models with seeds `seed, seed + 1, ...`, keeps each run's
/// best validation checkpoint, and scores it on the test corpus (or the
/// validation corpus when there is none).
pub fn run_repetitions(
    config: &TrainConfig,
    data: &DataBundle,
    reps: usize,
    sink: &mut dyn FnMut(usize, &MetricsRecord) -> Result<()>,
) -> Result<(RepetitionReport, Vec<ParameterSet>)> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let variant = config.ablation()?.variant;
    let mut runs = Vec::with_capacity(reps);
    let mut models = Vec::with_capacity(reps);
    for rep in 0..reps {
        let cfg = TrainConfig {
            seed: config.seed + rep as u64,
            ..config.clone()
        };
        let outcome = train(&cfg, data, &mut |rec| sink(rep, rec))?;
        let test = data.test.as_ref().unwrap_or(&data.dev);
        let eval = evaluate(
            &outcome.best,
            &variant,
            test,
            &data.embeddings,
            EvalSpec {
                n: cfg.n_eval,
                k: cfg.k,
                episodes: cfg.eval_episodes,
                seed: cfg.seed + TEST_SEED_OFFSET,
            },
        )?;
        runs.push(RunSummary {
            seed: cfg.seed,
            best_step: outcome.best_step,
            dev_accuracy: outcome.best_accuracy,
            accuracy: eval.accuracy,
        });
        models.push(outcome.best);
    }
    Ok((RepetitionReport::from_runs(runs), models))
}
