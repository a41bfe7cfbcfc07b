//! Learnable parameters, their binding to a tape, and checkpoint files.
//!
//! Checkpoints are plain text:
//!
//! ```text
//! mlman-checkpoint 1
//! meta <key> <value>
//! tensor <name> <extent>...
//! <one line of values per row of the last extent>
//! ```
//!
//! Values use Rust's shortest round-trip exponent formatting, so a
//! checkpoint written and read back reproduces every weight bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::ablation::{LocalMatching, Tying, Variant};
use crate::data::{MAX_DISTANCE, WORD_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, LstmVars, Tape, Tensor, Var};

const MAGIC: &str = "mlman-checkpoint 1";

/// Layer widths. Defaults are the published hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub word_dim: usize,
    pub pos_dim: usize,
    /// CNN filter count `d_c`.
    pub channels: usize,
    /// LSTM hidden size per direction `d_h`.
    pub hidden: usize,
    pub window: usize,
    pub max_distance: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            word_dim: WORD_DIM,
            pos_dim: 5,
            channels: 200,
            hidden: 100,
            window: 3,
            max_distance: MAX_DISTANCE,
        }
    }
}

impl ModelDims {
    pub fn input_width(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }

    pub fn position_rows(&self) -> usize {
        2 * self.max_distance + 1
    }

    /// Width of an aggregated instance vector, `4 d_h`.
    pub fn instance_width(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.word_dim,
            self.pos_dim,
            self.channels,
            self.hidden,
            self.window,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution window must be odd, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

/// `W2` (`d_h × 8 d_h`) and `v` (`d_h`) of the matching MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub w2: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub dims: ModelDims,
    pub pos_head: Tensor,
    pub pos_tail: Tensor,
    pub conv_filters: Tensor,
    pub conv_bias: Tensor,
    /// Fusion matrix `W1`, `4 d_c × d_h`.
    pub fuse: Tensor,
    pub lstm_fwd: LstmParams,
    pub lstm_bwd: LstmParams,
    pub matcher: MatcherParams,
    /// Separate class-level matcher, present only for untied models.
    pub class_matcher: Option<MatcherParams>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)).requiring_grad()
}

/// `sqrt(6 / fan_in)`, for weights feeding a ReLU.
fn he(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// `sqrt(6 / (fan_in + fan_out))`.
fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn lstm_init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> LstmParams {
    LstmParams {
        w_ih: uniform(rng, &[input, 4 * hidden], glorot(input, 4 * hidden)),
        w_hh: uniform(rng, &[hidden, 4 * hidden], glorot(hidden, 4 * hidden)),
        bias: Tensor::zeros(&[4 * hidden]).requiring_grad(),
    }
}

fn matcher_init<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> MatcherParams {
    MatcherParams {
        w2: uniform(rng, &[hidden, 8 * hidden], he(8 * hidden)),
        v: uniform(rng, &[hidden], glorot(hidden, 1)),
    }
}

impl ParameterSet {
    /// Random initialization for a model following `variant`. Without local
    /// matching the LSTM reads CNN outputs directly, so its input width is
    /// `d_c` rather than `d_h`.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, variant: &Variant, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let lstm_in = match variant.local {
            LocalMatching::NoLocalMatch => dims.channels,
            _ => dims.hidden,
        };
        let pos_head = uniform(rng, &[dims.position_rows(), dims.pos_dim], 0.1);
        let pos_tail = uniform(rng, &[dims.position_rows(), dims.pos_dim], 0.1);
        let conv_filters = uniform(
            rng,
            &[dims.window, dims.input_width(), dims.channels],
            he(dims.window * dims.input_width()),
        );
        let conv_bias = Tensor::zeros(&[dims.channels]).requiring_grad();
        let fuse = uniform(
            rng,
            &[4 * dims.channels, dims.hidden],
            he(4 * dims.channels),
        );
        let lstm_fwd = lstm_init(rng, lstm_in, dims.hidden);
        let lstm_bwd = lstm_init(rng, lstm_in, dims.hidden);
        let matcher = matcher_init(rng, dims.hidden);
        let class_matcher = match variant.tying {
            Tying::Shared => None,
            Tying::Untied => Some(matcher_init(rng, dims.hidden)),
        };
        Ok(ParameterSet {
            dims,
            pos_head,
            pos_tail,
            conv_filters,
            conv_bias,
            fuse,
            lstm_fwd,
            lstm_bwd,
            matcher,
            class_matcher,
        })
    }

    pub fn lstm_input(&self) -> usize {
        self.lstm_fwd.w_ih.shape()[0]
    }

    /// Whether this parameter set can run the forward path of `variant`.
    pub fn supports(&self, variant: &Variant) -> bool {
        let lstm_in = match variant.local {
            LocalMatching::NoLocalMatch => self.dims.channels,
            _ => self.dims.hidden,
        };
        lstm_in == self.lstm_input()
    }

    /// Copy usable under `variant`. An untied variant evaluated on a shared
    /// model gets class-level weights equal to the instance-level ones.
    pub fn adapted_to(&self, variant: &Variant) -> Result<Self> {
        if !self.supports(variant) {
            return Err(Error::Checkpoint(format!(
                "LSTM input width {} does not fit local matching mode {:?}",
                self.lstm_input(),
                variant.local
            )));
        }
        let mut out = self.clone();
        if variant.tying == Tying::Untied && out.class_matcher.is_none() {
            out.class_matcher = Some(out.matcher.clone());
        }
        Ok(out)
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("pos_head", &self.pos_head),
            ("pos_tail", &self.pos_tail),
            ("conv_filters", &self.conv_filters),
            ("conv_bias", &self.conv_bias),
            ("fuse", &self.fuse),
            ("lstm_fwd.w_ih", &self.lstm_fwd.w_ih),
            ("lstm_fwd.w_hh", &self.lstm_fwd.w_hh),
            ("lstm_fwd.bias", &self.lstm_fwd.bias),
            ("lstm_bwd.w_ih", &self.lstm_bwd.w_ih),
            ("lstm_bwd.w_hh", &self.lstm_bwd.w_hh),
            ("lstm_bwd.bias", &self.lstm_bwd.bias),
            ("match.w2", &self.matcher.w2),
            ("match.v", &self.matcher.v),
        ];
        if let Some(cm) = &self.class_matcher {
            v.push(("class_match.w2", &cm.w2));
            v.push(("class_match.v", &cm.v));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.pos_head,
            &mut self.pos_tail,
            &mut self.conv_filters,
            &mut self.conv_bias,
            &mut self.fuse,
            &mut self.lstm_fwd.w_ih,
            &mut self.lstm_fwd.w_hh,
            &mut self.lstm_fwd.bias,
            &mut self.lstm_bwd.w_ih,
            &mut self.lstm_bwd.w_hh,
            &mut self.lstm_bwd.bias,
            &mut self.matcher.w2,
            &mut self.matcher.v,
        ];
        if let Some(cm) = self.class_matcher.as_mut() {
            v.push(&mut cm.w2);
            v.push(&mut cm.v);
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// `name=norm` summary used in diagnostics.
    pub fn norms(&self) -> String {
        self.named()
            .iter()
            .map(|(n, t)| format!("{n}={:.4e}", t.norm()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Records every parameter on `tape`. With `track` false they are plain
    /// constants and no gradient bookkeeping happens.
    pub fn bind(&self, tape: &mut Tape, variant: &Variant, track: bool) -> Result<BoundParams> {
        let mut put = |t: &Tensor| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant(Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor"))
            }
        };
        let pos_head = put(&self.pos_head);
        let pos_tail = put(&self.pos_tail);
        let conv_filters = put(&self.conv_filters);
        let conv_bias = put(&self.conv_bias);
        let fuse = put(&self.fuse);
        let mut lstm = |p: &LstmParams| LstmVars {
            w_ih: put(&p.w_ih),
            w_hh: put(&p.w_hh),
            bias: put(&p.bias),
        };
        let lstm_fwd = lstm(&self.lstm_fwd);
        let lstm_bwd = lstm(&self.lstm_bwd);
        let w2 = put(&self.matcher.w2);
        let v = put(&self.matcher.v);
        let class_raw = match (variant.tying, &self.class_matcher) {
            (Tying::Shared, _) => None,
            (Tying::Untied, Some(cm)) => Some((put(&cm.w2), put(&cm.v))),
            (Tying::Untied, None) => {
                return Err(Error::Contract(
                    "untied variant needs class-level matcher weights; use adapted_to".into(),
                ))
            }
        };
        let matcher = MatcherVars::new(tape, w2, v)?;
        let class_matcher = match class_raw {
            None => matcher,
            Some((w2, v)) => MatcherVars::new(tape, w2, v)?,
        };
        Ok(BoundParams {
            pos_head,
            pos_tail,
            conv_filters,
            conv_bias,
            fuse,
            lstm_fwd,
            lstm_bwd,
            matcher,
            class_matcher,
        })
    }

    /// Adds the gradients of every bound parameter into its accumulator.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients) {
        grads.accumulate_into(bound.pos_head, &mut self.pos_head);
        grads.accumulate_into(bound.pos_tail, &mut self.pos_tail);
        grads.accumulate_into(bound.conv_filters, &mut self.conv_filters);
        grads.accumulate_into(bound.conv_bias, &mut self.conv_bias);
        grads.accumulate_into(bound.fuse, &mut self.fuse);
        for (vars, p) in [
            (&bound.lstm_fwd, &mut self.lstm_fwd),
            (&bound.lstm_bwd, &mut self.lstm_bwd),
        ] {
            grads.accumulate_into(vars.w_ih, &mut p.w_ih);
            grads.accumulate_into(vars.w_hh, &mut p.w_hh);
            grads.accumulate_into(vars.bias, &mut p.bias);
        }
        grads.accumulate_into(bound.matcher.w2, &mut self.matcher.w2);
        grads.accumulate_into(bound.matcher.v, &mut self.matcher.v);
        if bound.class_matcher.w2 != bound.matcher.w2 {
            if let Some(cm) = self.class_matcher.as_mut() {
                grads.accumulate_into(bound.class_matcher.w2, &mut cm.w2);
                grads.accumulate_into(bound.class_matcher.v, &mut cm.v);
            }
        }
    }

    pub fn write_checkpoint(&self, meta: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        let d = &self.dims;
        for (k, v) in [
            ("word_dim", d.word_dim),
            ("pos_dim", d.pos_dim),
            ("channels", d.channels),
            ("hidden", d.hidden),
            ("window", d.window),
            ("max_distance", d.max_distance),
        ] {
            writeln!(out, "dim {k} {v}").unwrap();
        }
        for (k, v) in meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in self.named() {
            let extents: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} {}", extents.join(" ")).unwrap();
            let cols = *t.shape().last().unwrap();
            for row in t.data().chunks(cols) {
                let vals: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                writeln!(out, "{}", vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.write_checkpoint(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let err = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err("missing checkpoint header".into())),
        }
        let mut dims = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut pending: Option<(String, Vec<usize>, Vec<f64>)> = None;
        let flush = |p: &mut Option<(String, Vec<usize>, Vec<f64>)>,
                     tensors: &mut BTreeMap<String, Tensor>|
         -> Result<()> {
            if let Some((name, shape, data)) = p.take() {
                let t = Tensor::new(&shape, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
                tensors.insert(name, t.requiring_grad());
            }
            Ok(())
        };
        for (no, line) in lines {
            let mut fields = line.split_whitespace();
            match fields.next() {
                None => continue,
                Some("dim") => {
                    let (Some(k), Some(v)) = (fields.next(), fields.next()) else {
                        return Err(err(format!("line {}: malformed dim", no + 1)));
                    };
                    let v: usize = v
                        .parse()
                        .map_err(|_| err(format!("line {}: bad dim value", no + 1)))?;
                    dims.insert(k.to_string(), v);
                }
                Some("meta") => {
                    let k = fields.next().unwrap_or_default().to_string();
                    let v: Vec<&str> = fields.collect();
                    meta.insert(k, v.join(" "));
                }
                Some("tensor") => {
                    flush(&mut pending, &mut tensors)?;
                    let name = fields
                        .next()
                        .ok_or_else(|| err(format!("line {}: unnamed tensor", no + 1)))?;
                    let shape = fields
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| err(format!("line {}: bad extent", no + 1)))?;
                    pending = Some((name.to_string(), shape, Vec::new()));
                }
                Some(first) => {
                    let Some((_, _, data)) = pending.as_mut() else {
                        return Err(err(format!("line {}: values outside a tensor", no + 1)));
                    };
                    for f in std::iter::once(first).chain(fields) {
                        data.push(
                            f.parse()
                                .map_err(|_| err(format!("line {}: bad value `{f}`", no + 1)))?,
                        );
                    }
                }
            }
        }
        flush(&mut pending, &mut tensors)?;

        let get_dim = |k: &str| {
            dims.get(k)
                .copied()
                .ok_or_else(|| err(format!("missing dim {k}")))
        };
        let dims = ModelDims {
            word_dim: get_dim("word_dim")?,
            pos_dim: get_dim("pos_dim")?,
            channels: get_dim("channels")?,
            hidden: get_dim("hidden")?,
            window: get_dim("window")?,
            max_distance: get_dim("max_distance")?,
        };
        dims.validate()?;
        let h = dims.hidden;
        let lstm_in = tensors
            .get("lstm_fwd.w_ih")
            .map(|t| t.shape()[0])
            .ok_or_else(|| err("missing tensor lstm_fwd.w_ih".into()))?;
        if lstm_in != h && lstm_in != dims.channels {
            return Err(err(format!(
                "LSTM input width {lstm_in} fits neither d_h nor d_c"
            )));
        }
        let t = &mut tensors;
        let params = ParameterSet {
            pos_head: take(t, "pos_head", &[dims.position_rows(), dims.pos_dim])?,
            pos_tail: take(t, "pos_tail", &[dims.position_rows(), dims.pos_dim])?,
            conv_filters: take(
                t,
                "conv_filters",
                &[dims.window, dims.input_width(), dims.channels],
            )?,
            conv_bias: take(t, "conv_bias", &[dims.channels])?,
            fuse: take(t, "fuse", &[4 * dims.channels, h])?,
            lstm_fwd: take_lstm(t, "lstm_fwd", lstm_in, h)?,
            lstm_bwd: take_lstm(t, "lstm_bwd", lstm_in, h)?,
            matcher: MatcherParams {
                w2: take(t, "match.w2", &[h, 8 * h])?,
                v: take(t, "match.v", &[h])?,
            },
            class_matcher: if t.contains_key("class_match.w2") {
                Some(MatcherParams {
                    w2: take(t, "class_match.w2", &[h, 8 * h])?,
                    v: take(t, "class_match.v", &[h])?,
                })
            } else {
                None
            },
            dims,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(err(format!("unexpected tensor {extra}")));
        }
        Ok((params, meta))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&text)
    }
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn take_lstm(
    tensors: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Result<LstmParams> {
    Ok(LstmParams {
        w_ih: take(tensors, &format!("{prefix}.w_ih"), &[input, 4 * hidden])?,
        w_hh: take(tensors, &format!("{prefix}.w_hh"), &[hidden, 4 * hidden])?,
        bias: take(tensors, &format!("{prefix}.bias"), &[4 * hidden])?,
    })
}

/// Matcher weights on a tape. `w2_t` is `W2` transposed once per tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatcherVars {
    pub w2: Var,
    pub w2_t: Var,
    pub v: Var,
}

impl MatcherVars {
    fn new(tape: &mut Tape, w2: Var, v: Var) -> Result<Self> {
        let w2_t = tape.transpose(w2)?;
        Ok(MatcherVars { w2, w2_t, v })
    }
}

/// A [`ParameterSet`] recorded on one tape. With shared tying,
/// `class_matcher` is the very same set of vars as `matcher`.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub pos_head: Var,
    pub pos_tail: Var,
    pub conv_filters: Var,
    pub conv_bias: Var,
    pub fuse: Var,
    pub lstm_fwd: LstmVars,
    pub lstm_bwd: LstmVars,
    pub matcher: MatcherVars,
    pub class_matcher: MatcherVars,
}
