//! Context encoder: word vectors plus two position features, then a CNN.

use rand::Rng;

use crate::data::{position_indices, EmbeddingTable, Instance};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelDims};
use crate::tensor::{dropout, Tape, Tensor, Var};

/// Word representation `T × (d_w + 2 d_p)`: each row is the frozen word
/// vector followed by the head and tail position embeddings.
pub fn embed(
    tape: &mut Tape,
    instance: &Instance,
    embeddings: &EmbeddingTable,
    params: &BoundParams,
    dims: &ModelDims,
) -> Result<Var> {
    if embeddings.dim() != dims.word_dim {
        return Err(Error::dim("embed", &[embeddings.dim()], &[dims.word_dim]));
    }
    let len = instance.len();
    let mut words = Vec::with_capacity(len * dims.word_dim);
    for token in &instance.tokens {
        words.extend_from_slice(embeddings.lookup(token));
    }
    let words = tape.constant(Tensor::new(&[len, dims.word_dim], words)?);
    let head = position_indices(len, instance.head, dims.max_distance);
    let tail = position_indices(len, instance.tail, dims.max_distance);
    let p1 = tape.gather_rows(params.pos_head, &head)?;
    let p2 = tape.gather_rows(params.pos_tail, &tail)?;
    tape.concat_cols(&[words, p1, p2])
}

/// Dropout rate and whether it is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub training: bool,
}

impl Dropout {
    pub const OFF: Dropout = Dropout {
        rate: 0.0,
        training: false,
    };

    pub fn train(rate: f64) -> Self {
        Dropout {
            rate,
            training: true,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
        dropout(tape, x, self.rate, self.training, rng)
    }
}

/// `ReLU(conv(dropout(W)))`, keeping the sequence length.
pub fn encode_context<R: Rng + ?Sized>(
    tape: &mut Tape,
    wordrep: Var,
    params: &BoundParams,
    drop: Dropout,
    rng: &mut R,
) -> Result<Var> {
    let x = drop.apply(tape, wordrep, rng)?;
    let conv = tape.conv1d_same(x, params.conv_filters, params.conv_bias)?;
    Ok(tape.relu(conv))
}

/// [`embed`] followed by [`encode_context`].
pub fn encode_instance<R: Rng + ?Sized>(
    tape: &mut Tape,
    instance: &Instance,
    embeddings: &EmbeddingTable,
    params: &BoundParams,
    dims: &ModelDims,
    drop: Dropout,
    rng: &mut R,
) -> Result<Var> {
    let w = embed(tape, instance, embeddings, params, dims)?;
    encode_context(tape, w, params, drop, rng)
}
