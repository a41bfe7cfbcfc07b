//! Generated pseudo-relation corpora for desk-scale experiments.
//!
//! Every pseudo-relation owns one trigger token. A sentence is a head entity,
//! the trigger, and a tail entity, in that order, so the label is recoverable
//! only from the token sitting between the entities. Filler words may pad the
//! sentence (`outer_gap`) or separate the trigger from the entities
//! (`inner_gap`); both are off by default.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, EmbeddingTable, Instance, Split};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub train_relations: usize,
    pub eval_relations: usize,
    pub instances_per_relation: usize,
    pub entities: usize,
    pub fillers: usize,
    /// Upper bound on filler words before the head and after the tail.
    pub outer_gap: usize,
    /// Upper bound on filler words between each entity and the trigger.
    pub inner_gap: usize,
    pub word_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_relations: 20,
            eval_relations: 5,
            instances_per_relation: 50,
            entities: 40,
            fillers: 60,
            outer_gap: 0,
            inner_gap: 0,
            word_dim: super::WORD_DIM,
        }
    }
}

impl SyntheticSpec {
    pub fn vocabulary_size(&self) -> usize {
        self.train_relations + self.eval_relations + self.entities + self.fillers
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Corpus,
    pub eval: Corpus,
    pub embeddings: EmbeddingTable,
}

fn sentence(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    trigger: &str,
) -> (Vec<String>, usize, usize) {
    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..spec.fillers));
    let mut tokens = Vec::new();
    let outer = |rng: &mut ChaCha8Rng| rng.gen_range(0..=spec.outer_gap);
    let inner = |rng: &mut ChaCha8Rng| rng.gen_range(0..=spec.inner_gap);
    for _ in 0..outer(rng) {
        tokens.push(filler(rng));
    }
    let head = tokens.len();
    let entities: Vec<usize> = (0..spec.entities).collect();
    let pair: Vec<_> = entities.choose_multiple(rng, 2).copied().collect();
    tokens.push(format!("e{}", pair[0]));
    for _ in 0..inner(rng) {
        tokens.push(filler(rng));
    }
    tokens.push(trigger.to_string());
    for _ in 0..inner(rng) {
        tokens.push(filler(rng));
    }
    let tail = tokens.len();
    tokens.push(format!("e{}", pair[1]));
    for _ in 0..outer(rng) {
        tokens.push(filler(rng));
    }
    (tokens, head, tail)
}

fn corpus(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    split: Split,
    relations: std::ops::Range<usize>,
) -> Result<Corpus> {
    let mut groups = Vec::new();
    for (id, r) in relations.enumerate() {
        let trigger = format!("t{r}");
        let mut group = Vec::with_capacity(spec.instances_per_relation);
        for _ in 0..spec.instances_per_relation {
            let (tokens, head, tail) = sentence(rng, spec, &trigger);
            group.push(Instance::new(tokens, head, tail, id)?);
        }
        groups.push((format!("P{r:03}"), group));
    }
    Corpus::from_groups(split, groups)
}

/// Generates disjoint train and evaluation corpora plus random frozen word
/// vectors covering the whole vocabulary.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train_relations + spec.eval_relations;
    let train = corpus(&mut rng, spec, Split::Train, 0..spec.train_relations)?;
    let eval = corpus(&mut rng, spec, Split::Dev, spec.train_relations..total)?;

    let mut embeddings = EmbeddingTable::new(spec.word_dim);
    let words = (0..total)
        .map(|r| format!("t{r}"))
        .chain((0..spec.entities).map(|e| format!("e{e}")))
        .chain((0..spec.fillers).map(|w| format!("w{w}")));
    for word in words {
        let v: Vec<f64> = (0..spec.word_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        embeddings.insert(&word, &v)?;
    }
    Ok(SyntheticData {
        train,
        eval,
        embeddings,
    })
}
