use rand::Rng;

use super::LossForm;
use crate::ablation::{LocalMatching, Variant};
use crate::data::{EmbeddingTable, Episode, Instance};
use crate::encoder::{encode_instance, Dropout};
use crate::error::{Error, Result};
use crate::matching::{encode_independent, encode_pair, match_class, ClassMatch, PairEncoding};
use crate::model::{BoundParams, ModelDims};
use crate::tensor::{Axis, Tape, Var};

/// Everything a forward pass reads besides the episode.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'a> {
    pub params: &'a BoundParams,
    pub dims: ModelDims,
    pub variant: Variant,
    pub embeddings: &'a EmbeddingTable,
    pub dropout: Dropout,
}

/// Tape handles for one episode: per query, the `N` class scores and their
/// normalization, plus every (query, class) encoding and match.
#[derive(Debug, Clone)]
pub struct EpisodeGraph {
    pub scores: Vec<Var>,
    pub log_probs: Vec<Var>,
    pub probs: Vec<Var>,
    pub pairs: Vec<Vec<PairEncoding>>,
    pub matches: Vec<Vec<ClassMatch>>,
    pub labels: Vec<usize>,
}

/// Class scores of one query as plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: usize,
    /// Argmax of `scores`; ties go to the lowest class index.
    pub predicted: usize,
}

impl EpisodeGraph {
    pub fn query_scores(&self, tape: &Tape) -> Vec<QueryScores> {
        self.scores
            .iter()
            .zip(&self.probs)
            .zip(&self.labels)
            .map(|((&s, &p), &label)| {
                let scores = tape.value(s).data().to_vec();
                let predicted = argmax(&scores);
                QueryScores {
                    probs: tape.value(p).data().to_vec(),
                    scores,
                    label,
                    predicted,
                }
            })
            .collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn encode_all<R: Rng + ?Sized>(
    tape: &mut Tape,
    fwd: &Forward,
    instances: &[&Instance],
    rng: &mut R,
) -> Result<Vec<Var>> {
    instances
        .iter()
        .map(|inst| {
            let ctx = encode_instance(
                tape,
                inst,
                fwd.embeddings,
                fwd.params,
                &fwd.dims,
                fwd.dropout,
                rng,
            )?;
            if fwd.variant.local == LocalMatching::NoLocalMatch {
                encode_independent(tape, ctx, fwd.params, fwd.dropout, rng)
            } else {
                Ok(ctx)
            }
        })
        .collect()
}

/// Scores every query of `episode` against every class.
pub fn episode_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    fwd: &Forward,
    episode: &Episode,
    rng: &mut R,
) -> Result<EpisodeGraph> {
    let k = episode.k_shot();
    let flat: Vec<&Instance> = episode.support.iter().flatten().copied().collect();
    let supports = encode_all(tape, fwd, &flat, rng)?;
    let query_instances: Vec<&Instance> = episode.queries.iter().map(|q| q.instance).collect();
    let queries = encode_all(tape, fwd, &query_instances, rng)?;

    let mut graph = EpisodeGraph {
        scores: Vec::new(),
        log_probs: Vec::new(),
        probs: Vec::new(),
        pairs: Vec::new(),
        matches: Vec::new(),
        labels: episode.queries.iter().map(|q| q.label).collect(),
    };
    for &q in &queries {
        let mut pairs = Vec::with_capacity(episode.n_way());
        let mut matches = Vec::with_capacity(episode.n_way());
        for class in supports.chunks(k) {
            let pair = match fwd.variant.local {
                LocalMatching::NoLocalMatch => PairEncoding {
                    query: q,
                    supports: class.to_vec(),
                },
                local => encode_pair(tape, q, class, fwd.params, local, fwd.dropout, rng)?,
            };
            matches.push(match_class(tape, &pair, fwd.params, &fwd.variant)?);
            pairs.push(pair);
        }
        let class_scores: Vec<Var> = matches.iter().map(|m| m.score).collect();
        let scores = tape.concat_cols(&class_scores)?;
        graph.log_probs.push(tape.log_softmax(scores, Axis::Rows)?);
        graph.probs.push(tape.softmax(scores, Axis::Rows)?);
        graph.scores.push(scores);
        graph.pairs.push(pairs);
        graph.matches.push(matches);
    }
    Ok(graph)
}

/// Matching loss over the queries of one episode.
pub fn loss_match(tape: &mut Tape, graph: &EpisodeGraph, form: LossForm) -> Result<Var> {
    if graph.labels.is_empty() {
        return Err(Error::Contract("episode has no queries".into()));
    }
    let source = match form {
        LossForm::AsWritten => &graph.probs,
        LossForm::Nll => &graph.log_probs,
    };
    let picked = source
        .iter()
        .zip(&graph.labels)
        .map(|(&v, &label)| tape.select(v, label))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat_cols(&picked)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, -1.0 / graph.labels.len() as f64))
}

/// `(1/(N K)) Σ_i Σ_k ‖ŝ_k^i − ŝ^i‖²` for one query's classes, each given as
/// (instance vectors, prototype).
pub fn loss_incon(tape: &mut Tape, classes: &[(&[Var], Var)]) -> Result<Var> {
    let mut terms = Vec::new();
    for (instances, proto) in classes {
        for &s in *instances {
            let d = tape.sub(s, *proto)?;
            terms.push(tape.sq_l2(d));
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract("no support instances".into()));
    }
    let n = terms.len() as f64;
    let all = tape.concat_cols(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / n))
}

/// `J = J_match + λ J_incon`, with `J_incon` averaged over queries.
#[derive(Debug, Clone)]
pub struct Objective {
    pub j: Var,
    pub j_match: Var,
    pub j_incon: Var,
    pub graph: EpisodeGraph,
}

pub fn objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    fwd: &Forward,
    episode: &Episode,
    form: LossForm,
    lambda: f64,
    rng: &mut R,
) -> Result<Objective> {
    let graph = episode_forward(tape, fwd, episode, rng)?;
    let j_match = loss_match(tape, &graph, form)?;
    let per_query = graph
        .pairs
        .iter()
        .zip(&graph.matches)
        .map(|(pairs, matches)| {
            let classes: Vec<(&[Var], Var)> = pairs
                .iter()
                .zip(matches)
                .map(|(p, m)| (p.supports.as_slice(), m.prototype))
                .collect();
            loss_incon(tape, &classes)
        })
        .collect::<Result<Vec<_>>>()?;
    let incon = tape.concat_cols(&per_query)?;
    let incon = tape.sum(incon);
    let j_incon = tape.scale(incon, 1.0 / per_query.len() as f64);
    let j = if lambda == 0.0 {
        j_match
    } else {
        let weighted = tape.scale(j_incon, lambda);
        tape.add(j_match, weighted)?
    };
    Ok(Objective {
        j,
        j_match,
        j_incon,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_episode, Corpus, Split};
    use crate::model::ParameterSet;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph_from_probs(tape: &mut Tape, probs: &[Vec<f64>], labels: &[usize]) -> EpisodeGraph {
        let p: Vec<Var> = probs
            .iter()
            .map(|row| tape.constant(Tensor::vector(row.clone())))
            .collect();
        let lp: Vec<Var> = probs
            .iter()
            .map(|row| tape.constant(Tensor::vector(row.iter().map(|x| x.ln()).collect())))
            .collect();
        EpisodeGraph {
            scores: p.clone(),
            log_probs: lp,
            probs: p,
            pairs: Vec::new(),
            matches: Vec::new(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn matching_loss_hand_cases() {
        let mut tape = Tape::new();
        let g = graph_from_probs(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let l = loss_match(&mut tape, &g, LossForm::AsWritten).unwrap();
        assert_eq!(tape.value(l).item(), -1.0);
        let l = loss_match(&mut tape, &g, LossForm::Nll).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let g = graph_from_probs(&mut tape, &[vec![0.2; 5]], &[3]);
        let l = loss_match(&mut tape, &g, LossForm::AsWritten).unwrap();
        assert!((tape.value(l).item() + 0.2).abs() < 1e-15);

        let g = graph_from_probs(&mut tape, &[vec![0.5, 0.5], vec![0.75, 0.25]], &[0, 1]);
        let l = loss_match(&mut tape, &g, LossForm::AsWritten).unwrap();
        assert!((tape.value(l).item() + 0.375).abs() < 1e-15);
    }

    #[test]
    fn inconsistency_hand_cases() {
        let mut tape = Tape::new();
        let s1 = tape.constant(Tensor::vector(vec![0.0]));
        let s2 = tape.constant(Tensor::vector(vec![2.0]));
        let proto = tape.constant(Tensor::vector(vec![1.0]));
        let sup = [s1, s2];
        let l = loss_incon(&mut tape, &[(&sup, proto)]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let one = [s2];
        let l = loss_incon(&mut tape, &[(&one, s2), (&one, s2)]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    fn toy_corpus(relations: usize, per: usize) -> Corpus {
        let groups = (0..relations)
            .map(|r| {
                let group = (0..per)
                    .map(|i| {
                        let tokens = vec![
                            format!("a{i}"),
                            format!("e{r}"),
                            format!("t{r}"),
                            format!("e{i}"),
                        ];
                        Instance::new(tokens, 1, 3, r).unwrap()
                    })
                    .collect();
                (format!("P{r}"), group)
            })
            .collect();
        Corpus::from_groups(Split::Train, groups).unwrap()
    }

    fn toy_embeddings(dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = EmbeddingTable::new(dim);
        for w in (0..10).flat_map(|i| [format!("a{i}"), format!("e{i}"), format!("t{i}")]) {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            e.insert(&w, &v).unwrap();
        }
        e
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            word_dim: 5,
            pos_dim: 2,
            channels: 4,
            hidden: 3,
            window: 3,
            max_distance: 5,
        }
    }

    #[test]
    fn zero_v_gives_uniform_probabilities() {
        let corpus = toy_corpus(6, 4);
        let emb = toy_embeddings(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParameterSet::init(small_dims(), &Variant::FULL, &mut rng).unwrap();
        p.matcher.v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let ep = sample_episode(&corpus, 5, 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &Variant::FULL, false).unwrap();
        let fwd = Forward {
            params: &b,
            dims: p.dims,
            variant: Variant::FULL,
            embeddings: &emb,
            dropout: Dropout::OFF,
        };
        let g = episode_forward(&mut tape, &fwd, &ep, &mut rng).unwrap();
        for q in g.query_scores(&tape) {
            assert!(q.scores.iter().all(|&s| s == 0.0));
            assert!(q.probs.iter().all(|&x| (x - 0.2).abs() < 1e-15));
            assert_eq!(q.predicted, 0);
        }
    }

    #[test]
    fn identical_class_supports_split_evenly() {
        let corpus = toy_corpus(3, 4);
        let emb = toy_embeddings(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ParameterSet::init(small_dims(), &Variant::FULL, &mut rng).unwrap();
        let mut ep = sample_episode(&corpus, 2, 1, 1, &mut rng).unwrap();
        ep.support[1] = ep.support[0].clone();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &Variant::FULL, false).unwrap();
        let fwd = Forward {
            params: &b,
            dims: p.dims,
            variant: Variant::FULL,
            embeddings: &emb,
            dropout: Dropout::OFF,
        };
        let g = episode_forward(&mut tape, &fwd, &ep, &mut rng).unwrap();
        let q = &g.query_scores(&tape)[0];
        assert!((q.probs[0] - 0.5).abs() < 1e-12 && (q.probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let shifted: Vec<f64> = [1.0, 3.0, 2.0].iter().map(|x| x + 7.5).collect();
        assert_eq!(argmax(&shifted), 1);
    }

    #[test]
    fn objective_adds_weighted_inconsistency() {
        let corpus = toy_corpus(4, 5);
        let emb = toy_embeddings(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ParameterSet::init(small_dims(), &Variant::FULL, &mut rng).unwrap();
        let ep = sample_episode(&corpus, 3, 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, &Variant::FULL, true).unwrap();
        let fwd = Forward {
            params: &b,
            dims: p.dims,
            variant: Variant::FULL,
            embeddings: &emb,
            dropout: Dropout::OFF,
        };
        let o = objective(&mut tape, &fwd, &ep, LossForm::Nll, 0.5, &mut rng).unwrap();
        let (j, m, i) = (
            tape.value(o.j).item(),
            tape.value(o.j_match).item(),
            tape.value(o.j_incon).item(),
        );
        assert!(i > 0.0);
        assert!((j - (m + 0.5 * i)).abs() < 1e-15);
    }
}
