//! Corpus ingestion, word vectors, position features and episode sampling.
//!
//! Corpus files use the FewRel JSON layout: a top-level object mapping each
//! relation name to its instances, where an instance looks like
//!
//! ```json
//! {"tokens": ["London", "is", "the", "capital", "of", "the", "UK"],
//!  "h": ["london", "Q84", [[0]]],
//!  "t": ["the uk", "Q145", [[5, 6]]]}
//! ```
//!
//! Each entity record is `[name, id, occurrences]`; the first token of the
//! first occurrence anchors the entity's position features.

mod embeddings;
mod position;
mod sampler;
pub mod synthetic;

pub use embeddings::{load_embeddings, read_embeddings, EmbeddingTable, WORD_DIM};
pub use position::{position_indices, MAX_DISTANCE};
pub use sampler::{sample_episode, Episode, Query};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "val" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// A tokenized sentence with two marked entities.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head: usize,
    pub tail: usize,
    /// Index into the owning corpus' relation list.
    pub relation: usize,
    /// Set when the two entity spans share their anchor token.
    pub overlapping: bool,
}

impl Instance {
    pub fn new(tokens: Vec<String>, head: usize, tail: usize, relation: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("instance has no tokens".into()));
        }
        if head >= tokens.len() || tail >= tokens.len() {
            return Err(Error::Contract(format!(
                "entity positions ({head}, {tail}) outside {} tokens",
                tokens.len()
            )));
        }
        Ok(Instance {
            overlapping: head == tail,
            tokens,
            head,
            tail,
            relation,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Instances grouped by relation, in sorted relation-name order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: Split,
    relations: Vec<String>,
    instances: Vec<Vec<Instance>>,
}

impl Corpus {
    /// Builds a corpus from `(relation name, instances)` groups. Instance
    /// relation ids are rewritten to match group order.
    pub fn from_groups(split: Split, groups: Vec<(String, Vec<Instance>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut relations = Vec::with_capacity(groups.len());
        let mut instances = Vec::with_capacity(groups.len());
        for (id, (name, mut group)) in groups.into_iter().enumerate() {
            if !seen.insert(name.clone()) {
                return Err(Error::Contract(format!("duplicate relation `{name}`")));
            }
            group.iter_mut().for_each(|inst| inst.relation = id);
            relations.push(name);
            instances.push(group);
        }
        Ok(Corpus {
            split,
            relations,
            instances,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn instances(&self, relation: usize) -> &[Instance] {
        &self.instances[relation]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.instances.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lowercased token vocabulary.
    pub fn vocabulary(&self) -> HashSet<String> {
        self.iter()
            .flat_map(|i| i.tokens.iter().map(|t| t.to_lowercase()))
            .collect()
    }

    /// Serializes back to the FewRel JSON layout.
    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (name, group) in self.relations.iter().zip(&self.instances) {
            let list = group
                .iter()
                .map(|inst| {
                    serde_json::json!({
                        "tokens": inst.tokens,
                        "h": [inst.tokens[inst.head], "", [[inst.head]]],
                        "t": [inst.tokens[inst.tail], "", [[inst.tail]]],
                    })
                })
                .collect();
            map.insert(name.clone(), Value::Array(list));
        }
        Value::Object(map)
    }
}

#[derive(Deserialize)]
struct RawInstance {
    tokens: Vec<String>,
    h: (String, Value, Vec<Vec<usize>>),
    t: (String, Value, Vec<Vec<usize>>),
}

fn entity_anchor(
    spans: &[Vec<usize>],
    tokens: usize,
    relation: &str,
    index: usize,
    which: &str,
) -> Result<usize> {
    let first = spans
        .first()
        .and_then(|s| s.first())
        .copied()
        .ok_or_else(|| Error::Ingestion {
            relation: relation.to_string(),
            index,
            reason: format!("{which} entity has no token span"),
        })?;
    if let Some(&bad) = spans.iter().flatten().find(|&&p| p >= tokens) {
        return Err(Error::Validation {
            relation: relation.to_string(),
            index,
            reason: format!("{which} entity index {bad} outside {tokens} tokens"),
        });
    }
    Ok(first)
}

/// Parses a corpus from FewRel-layout JSON text.
pub fn parse_corpus(text: &str, split: Split) -> Result<Corpus> {
    parse_from(text, split, Path::new("<memory>"))
}

fn parse_from(text: &str, split: Split, path: &Path) -> Result<Corpus> {
    let top: BTreeMap<String, Vec<Value>> =
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
    let mut groups = Vec::with_capacity(top.len());
    for (rel_id, (name, raw_list)) in top.into_iter().enumerate() {
        let mut group = Vec::with_capacity(raw_list.len());
        for (index, raw) in raw_list.into_iter().enumerate() {
            let raw: RawInstance = serde_json::from_value(raw).map_err(|e| Error::Ingestion {
                relation: name.clone(),
                index,
                reason: e.to_string(),
            })?;
            let n = raw.tokens.len();
            if n == 0 {
                return Err(Error::Ingestion {
                    relation: name,
                    index,
                    reason: "empty token list".into(),
                });
            }
            let head = entity_anchor(&raw.h.2, n, &name, index, "head")?;
            let tail = entity_anchor(&raw.t.2, n, &name, index, "tail")?;
            let overlap = {
                let hs: HashSet<_> = raw.h.2.iter().flatten().collect();
                raw.t.2.iter().flatten().any(|p| hs.contains(p))
            };
            let mut inst = Instance::new(raw.tokens, head, tail, rel_id)?;
            inst.overlapping |= overlap;
            group.push(inst);
        }
        groups.push((name, group));
    }
    Corpus::from_groups(split, groups)
}

/// Loads and validates a corpus file.
pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_from(&text, split, path)
}

/// Fails if any relation name appears in more than one corpus.
pub fn ensure_disjoint(corpora: &[&Corpus]) -> Result<()> {
    for (i, a) in corpora.iter().enumerate() {
        let names: HashSet<&str> = a.relations.iter().map(String::as_str).collect();
        for b in &corpora[i + 1..] {
            if let Some(shared) = b.relations.iter().find(|r| names.contains(r.as_str())) {
                return Err(Error::Contract(format!(
                    "relation `{shared}` appears in both {} and {} splits",
                    a.split, b.split
                )));
            }
        }
    }
    Ok(())
}
