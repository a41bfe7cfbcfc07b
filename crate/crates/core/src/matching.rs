//! Local matching and aggregation, instance matching and aggregation, and
//! class matching.

use rand::Rng;

use crate::ablation::{Aggregation, ClassMetric, LocalMatching, Variant};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::{BoundParams, MatcherVars};
use crate::tensor::{Axis, LstmVars, Tape, Tensor, Var};

/// Row-stacks support contexts into `C`. Returns `C` and the segment lengths.
pub fn concat_support(tape: &mut Tape, contexts: &[Var]) -> Result<(Var, Vec<usize>)> {
    if contexts.is_empty() {
        return Err(Error::Contract("support set is empty".into()));
    }
    let lengths = contexts
        .iter()
        .map(|&c| tape.value(c).dims2().map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let c = tape.concat_rows(contexts)?;
    Ok((c, lengths))
}

/// Inverse of [`concat_support`].
pub fn split_support(tape: &mut Tape, c: Var, lengths: &[usize]) -> Result<Vec<Var>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let part = tape.slice_rows(c, start, len);
            start += len;
            part
        })
        .collect()
}

/// Soft alignment between a query `Q` (`T_q × d_c`) and support rows `C`.
#[derive(Debug, Clone, Copy)]
pub struct LocalMatch {
    /// `α = Q Cᵀ`.
    pub alpha: Var,
    /// `α` normalized over support positions; each row sums to one.
    pub query_weights: Var,
    /// `α` normalized over query positions; each column sums to one.
    pub support_weights: Var,
    pub q_tilde: Var,
    pub c_tilde: Var,
}

pub fn local_match(tape: &mut Tape, q: Var, c: Var) -> Result<LocalMatch> {
    let (_, dq) = tape.value(q).dims2()?;
    let (_, dc) = tape.value(c).dims2()?;
    if dq != dc {
        return Err(Error::dim("local_match", tape.shape(q), tape.shape(c)));
    }
    let c_t = tape.transpose(c)?;
    let alpha = tape.matmul(q, c_t)?;
    let query_weights = tape.softmax(alpha, Axis::Rows)?;
    let q_tilde = tape.matmul(query_weights, c)?;
    let support_weights = tape.softmax(alpha, Axis::Columns)?;
    let sw_t = tape.transpose(support_weights)?;
    let c_tilde = tape.matmul(sw_t, q)?;
    Ok(LocalMatch {
        alpha,
        query_weights,
        support_weights,
        q_tilde,
        c_tilde,
    })
}

/// `ReLU([X; X̃; |X − X̃|; X ⊙ X̃] W1)`.
pub fn fuse(tape: &mut Tape, x: Var, x_tilde: Var, w1: Var) -> Result<Var> {
    let diff = tape.sub(x, x_tilde)?;
    let diff = tape.abs(diff);
    let prod = tape.mul(x, x_tilde)?;
    let cat = tape.concat_cols(&[x, x_tilde, diff, prod])?;
    let pre = tape.matmul(cat, w1)?;
    Ok(tape.relu(pre))
}

fn lstm_direction(tape: &mut Tape, x: Var, w: &LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let (len, _) = tape.value(x).dims2()?;
    let hidden = tape.shape(w.w_hh)[0];
    let xw = tape.matmul(x, w.w_ih)?;
    let pre_all = tape.add_row(xw, w.bias)?;
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut h: Option<Var> = None;
    let mut states = vec![None; len];
    for step in 0..len {
        let t = if reverse { len - 1 - step } else { step };
        let mut pre = tape.slice_rows(pre_all, t, 1)?;
        // A zero initial state contributes nothing through `W_hh`.
        if let Some(h_prev) = h {
            let hw = tape.matmul(h_prev, w.w_hh)?;
            pre = tape.add(pre, hw)?;
        }
        let (h_t, c_t) = tape.lstm_cell(pre, c)?;
        states[t] = Some(h_t);
        h = Some(h_t);
        c = c_t;
    }
    Ok(states.into_iter().flatten().collect())
}

/// Single-layer bidirectional LSTM over the rows of `x`, with input
/// dropout. Row `t` of the output is `[h_fwd_t; h_bwd_t]`.
pub fn blstm_encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    fwd: &LstmVars,
    bwd: &LstmVars,
    drop: Dropout,
    rng: &mut R,
) -> Result<Var> {
    let x = drop.apply(tape, x, rng)?;
    let f = lstm_direction(tape, x, fwd, false)?;
    let b = lstm_direction(tape, x, bwd, true)?;
    let f = tape.concat_rows(&f)?;
    let b = tape.concat_rows(&b)?;
    tape.concat_cols(&[f, b])
}

/// `[max(X̂); ave(X̂)]`.
pub fn local_aggregate(tape: &mut Tape, x: Var) -> Result<Var> {
    let max = tape.pool_max_rows(x)?;
    let mean = tape.pool_mean_rows(x)?;
    tape.concat_cols(&[max, mean])
}

/// `v · ReLU(W2 [a; b])`.
pub fn match_score(tape: &mut Tape, a: Var, b: Var, m: &MatcherVars) -> Result<Var> {
    let x = tape.concat_cols(&[a, b])?;
    let hidden = tape.matmul(x, m.w2_t)?;
    let hidden = tape.relu(hidden);
    let weighted = tape.mul(hidden, m.v)?;
    Ok(tape.sum(weighted))
}

/// Class prototype from instance vectors. Attention mode also returns the
/// normalized instance weights.
pub fn aggregate_prototype(
    tape: &mut Tape,
    instances: &[Var],
    query: Var,
    m: &MatcherVars,
    mode: Aggregation,
) -> Result<(Var, Option<Var>)> {
    if instances.is_empty() {
        return Err(Error::Contract(
            "cannot aggregate an empty support set".into(),
        ));
    }
    let width = tape.value(instances[0]).len();
    let stacked = tape.concat_rows(instances)?;
    match mode {
        Aggregation::Attention => {
            let scores = instances
                .iter()
                .map(|&s| match_score(tape, s, query, m))
                .collect::<Result<Vec<_>>>()?;
            let beta = tape.concat_cols(&scores)?;
            let weights = tape.softmax(beta, Axis::Rows)?;
            let proto = tape.matmul(weights, stacked)?;
            Ok((tape.reshape(proto, &[width])?, Some(weights)))
        }
        Aggregation::Max => Ok((tape.pool_max_rows(stacked)?, None)),
        Aggregation::Mean => Ok((tape.pool_mean_rows(stacked)?, None)),
    }
}

/// Class-level matching score; larger means a better match.
pub fn class_score(
    tape: &mut Tape,
    prototype: Var,
    query: Var,
    m: &MatcherVars,
    metric: ClassMetric,
) -> Result<Var> {
    match metric {
        ClassMetric::Mlp => match_score(tape, prototype, query, m),
        ClassMetric::Euclidean => {
            let d = tape.sub(prototype, query)?;
            let sq = tape.sq_l2(d);
            Ok(tape.scale(sq, -1.0))
        }
    }
}

/// Query vector and per-support vectors for one (query, class) pair.
#[derive(Debug, Clone)]
pub struct PairEncoding {
    pub query: Var,
    pub supports: Vec<Var>,
}

/// CNN contexts straight through the BLSTM and pooling, without matching.
pub fn encode_independent<R: Rng + ?Sized>(
    tape: &mut Tape,
    context: Var,
    params: &BoundParams,
    drop: Dropout,
    rng: &mut R,
) -> Result<Var> {
    let h = blstm_encode(tape, context, &params.lstm_fwd, &params.lstm_bwd, drop, rng)?;
    local_aggregate(tape, h)
}

fn matched<R: Rng + ?Sized>(
    tape: &mut Tape,
    query: Var,
    supports: &[Var],
    params: &BoundParams,
    drop: Dropout,
    rng: &mut R,
) -> Result<PairEncoding> {
    let (c, lengths) = concat_support(tape, supports)?;
    let lm = local_match(tape, query, c)?;
    let q_bar = fuse(tape, query, lm.q_tilde, params.fuse)?;
    let c_bar = fuse(tape, c, lm.c_tilde, params.fuse)?;
    let (fwd, bwd) = (&params.lstm_fwd, &params.lstm_bwd);
    let q_hat = blstm_encode(tape, q_bar, fwd, bwd, drop, rng)?;
    let query = local_aggregate(tape, q_hat)?;
    let supports = split_support(tape, c_bar, &lengths)?
        .into_iter()
        .map(|s_bar| {
            let s_hat = blstm_encode(tape, s_bar, fwd, bwd, drop, rng)?;
            local_aggregate(tape, s_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairEncoding { query, supports })
}

/// Encodes a query against the supports of one class under `local`.
pub fn encode_pair<R: Rng + ?Sized>(
    tape: &mut Tape,
    query: Var,
    supports: &[Var],
    params: &BoundParams,
    local: LocalMatching,
    drop: Dropout,
    rng: &mut R,
) -> Result<PairEncoding> {
    match local {
        LocalMatching::Full => matched(tape, query, supports, params, drop, rng),
        LocalMatching::NoConcat => {
            if supports.is_empty() {
                return Err(Error::Contract("support set is empty".into()));
            }
            let mut queries = Vec::with_capacity(supports.len());
            let mut encoded = Vec::with_capacity(supports.len());
            for &s in supports {
                let pair = matched(tape, query, &[s], params, drop, rng)?;
                queries.push(pair.query);
                encoded.push(pair.supports[0]);
            }
            let stacked = tape.concat_rows(&queries)?;
            let query = tape.pool_mean_rows(stacked)?;
            Ok(PairEncoding {
                query,
                supports: encoded,
            })
        }
        LocalMatching::NoLocalMatch => {
            let query = encode_independent(tape, query, params, drop, rng)?;
            let supports = supports
                .iter()
                .map(|&s| encode_independent(tape, s, params, drop, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(PairEncoding { query, supports })
        }
    }
}

/// Prototype, class score and attention weights for one (query, class) pair.
#[derive(Debug, Clone, Copy)]
pub struct ClassMatch {
    pub score: Var,
    pub prototype: Var,
    pub weights: Option<Var>,
}

pub fn match_class(
    tape: &mut Tape,
    pair: &PairEncoding,
    params: &BoundParams,
    variant: &Variant,
) -> Result<ClassMatch> {
    let (prototype, weights) = aggregate_prototype(
        tape,
        &pair.supports,
        pair.query,
        &params.matcher,
        variant.aggregation,
    )?;
    let score = class_score(
        tape,
        prototype,
        pair.query,
        &params.class_matcher,
        variant.metric,
    )?;
    Ok(ClassMatch {
        score,
        prototype,
        weights,
    })
}

/// Attention of each support token over the query tokens (`T_q × T_k`,
/// columns sum to one), as used inside local matching.
pub fn attention_map(q: &Tensor, s: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(q.clone());
    let s = tape.constant(s.clone());
    let lm = local_match(&mut tape, q, s)?;
    Ok(tape.value(lm.support_weights).clone())
}
