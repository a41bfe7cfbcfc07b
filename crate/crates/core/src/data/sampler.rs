use rand::seq::index;
use rand::Rng;

use super::{Corpus, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub instance: &'a Instance,
    /// Position of the true class within [`Episode::classes`].
    pub label: usize,
}

/// One N-way K-shot task: `support[i]` holds the K instances of
/// `classes[i]`, and every query label indexes into `classes`.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<&'a Instance>>,
    pub queries: Vec<Query<'a>>,
}

impl Episode<'_> {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Samples `n` distinct relations, `k` supports from each, then `r` queries
/// uniformly from the pooled remaining instances of those relations.
pub fn sample_episode<'a, R: Rng + ?Sized>(
    corpus: &'a Corpus,
    n: usize,
    k: usize,
    r: usize,
    rng: &mut R,
) -> Result<Episode<'a>> {
    if n == 0 || k == 0 {
        return Err(Error::Sampling(format!(
            "need N >= 1 and K >= 1, got N={n} K={k}"
        )));
    }
    if corpus.num_relations() < n {
        return Err(Error::Sampling(format!(
            "{n}-way episode needs {n} relations, corpus has {}",
            corpus.num_relations()
        )));
    }
    let per_class = k + r.div_ceil(n);
    if let Some(short) =
        (0..corpus.num_relations()).find(|&c| corpus.instances(c).len() < per_class)
    {
        return Err(Error::Sampling(format!(
            "relation `{}` has {} instances, need at least {per_class}",
            corpus.relation_name(short),
            corpus.instances(short).len()
        )));
    }

    let classes = index::sample(rng, corpus.num_relations(), n).into_vec();
    let mut support = Vec::with_capacity(n);
    let mut pool = Vec::new();
    for (label, &class) in classes.iter().enumerate() {
        let members = corpus.instances(class);
        let order = index::sample(rng, members.len(), members.len()).into_vec();
        support.push(order[..k].iter().map(|&i| &members[i]).collect());
        pool.extend(order[k..].iter().map(|&i| (label, &members[i])));
    }
    let queries = index::sample(rng, pool.len(), r)
        .into_iter()
        .map(|i| Query {
            label: pool[i].0,
            instance: pool[i].1,
        })
        .collect();
    Ok(Episode {
        classes,
        support,
        queries,
    })
}
