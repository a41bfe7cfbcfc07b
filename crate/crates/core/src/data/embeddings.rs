use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// Width of pretrained word vectors.
pub const WORD_DIM: usize = 50;

/// Frozen word vectors. Lookups lowercase the token; misses resolve to the
/// all-zero UNK vector.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            index: HashMap::new(),
            vectors: Vec::new(),
            unk: vec![0.0; dim],
        }
    }

    /// Adds a vector, keeping the first one seen for a normalized token.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim("embedding insert", &[self.dim], &[vector.len()]));
        }
        let key = token.to_lowercase();
        if !self.index.contains_key(&key) {
            self.index.insert(key, self.index.len());
            self.vectors.extend_from_slice(vector);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        match self.index.get(&token.to_lowercase()) {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.unk,
        }
    }

    /// Writes the table as `token v1 .. vd` lines, sorted by token.
    pub fn to_text(&self) -> String {
        let mut keys: Vec<_> = self.index.iter().collect();
        keys.sort();
        let mut out = String::new();
        for (token, &i) in keys {
            out.push_str(token);
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Reads whitespace-separated `token v1 .. v_dim` lines. When `vocab` is
/// given, only (lowercased) tokens in it are kept.
pub fn read_embeddings(
    reader: impl Read,
    dim: usize,
    vocab: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(dim);
    let mut values = Vec::with_capacity(dim);
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::EmbeddingFormat {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        values.clear();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| Error::EmbeddingFormat {
                line: lineno + 1,
                reason: format!("`{field}` is not a number"),
            })?;
            values.push(v);
        }
        if values.len() != dim {
            return Err(Error::EmbeddingFormat {
                line: lineno + 1,
                reason: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if vocab.is_some_and(|v| !v.contains(&token.to_lowercase())) {
            continue;
        }
        table.insert(token, &values)?;
    }
    Ok(table)
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    dim: usize,
    vocab: Option<&HashSet<String>>,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(file, dim, vocab)
}
