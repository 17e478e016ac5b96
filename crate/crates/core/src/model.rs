//! A small pre-LN transformer encoder-decoder with tied embeddings.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BOS, EOS, PAD};
use crate::rng::{stream, Stream};
use crate::tensor::{Grads, Indices, NodeId, Tape, Tensor, TensorError};

pub const MIN_SEQ_LEN: usize = 8;
pub const MAX_SEQ_LEN: usize = 64;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("example {0} has an empty target")]
    EmptyTarget(usize),
    #[error("example {0} has an empty source")]
    EmptySource(usize),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoding prefix of length {len} leaves no room under max_seq_len {max}")]
    PrefixOverflow { len: usize, max: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("expected {expected} parameter tensors, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size <= EOS {
            return fail(format!("vocab_size {} cannot hold the reserved tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_layers, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if !(MIN_SEQ_LEN..=MAX_SEQ_LEN).contains(&self.max_seq_len) {
            return fail(format!(
                "max_seq_len {} outside {MIN_SEQ_LEN}..={MAX_SEQ_LEN}",
                self.max_seq_len
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let ln = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gamma"), vec![d]);
            push(format!("{p}.beta"), vec![d]);
        };
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{w}"), vec![d, d]);
            }
        };
        let ff = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.w1"), vec![d, f]);
            push(format!("{p}.b1"), vec![f]);
            push(format!("{p}.w2"), vec![f, d]);
            push(format!("{p}.b2"), vec![d]);
        };
        for l in 0..self.n_layers {
            ln(&mut push, &format!("enc.{l}.ln1"));
            attn(&mut push, &format!("enc.{l}.self"));
            ln(&mut push, &format!("enc.{l}.ln2"));
            ff(&mut push, &format!("enc.{l}.ff"));
        }
        ln(&mut push, "enc.ln");
        for l in 0..self.n_layers {
            ln(&mut push, &format!("dec.{l}.ln1"));
            attn(&mut push, &format!("dec.{l}.self"));
            ln(&mut push, &format!("dec.{l}.ln2"));
            attn(&mut push, &format!("dec.{l}.cross"));
            ln(&mut push, &format!("dec.{l}.ln3"));
            ff(&mut push, &format!("dec.{l}.ff"));
        }
        ln(&mut push, "dec.ln");
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Arc<[String]>,
    tensors: Vec<Tensor>,
}

/// Weights are N(0, 1/d_model), layer-norm gains 1, biases and offsets 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let normal = Normal::new(0.0, (config.d_model as f64).powf(-0.5)).expect("positive std");
    let shapes = config.param_shapes();
    let names: Arc<[String]> = shapes.iter().map(|(n, _)| n.clone()).collect();
    let tensors = shapes
        .iter()
        .map(|(name, shape)| {
            if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if name.ends_with(".beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(shape)
            } else {
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape.clone(), data).expect("finite normal draws")
            }
        })
        .collect();
    Ok(ModelParams {
        config: *config,
        names,
        tensors,
    })
}

impl ModelParams {
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(ModelError::ParamCount {
                expected: shapes.len(),
                found: tensors.len(),
            });
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let names = shapes.into_iter().map(|(n, _)| n).collect();
        Ok(Self { config, names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &Arc<[String]> {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// One tensor per model parameter, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    names: Arc<[String]>,
    tensors: Vec<Tensor>,
}

impl GradMap {
    pub fn new(names: Arc<[String]>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len(), "one gradient per parameter");
        Self { names, tensors }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            names: params.names.clone(),
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn names(&self) -> &Arc<[String]> {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Global l2 norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(factor);
        }
    }
}

/// Per-example gradients, each parameter stacked as `[B, ...shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedGrads {
    names: Arc<[String]>,
    batch: usize,
    tensors: Vec<Tensor>,
}

impl StackedGrads {
    pub fn names(&self) -> &Arc<[String]> {
        &self.names
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Contiguous gradient of example `i` for parameter `p`.
    pub fn slice(&self, p: usize, i: usize) -> &[f64] {
        let inner = self.tensors[p].len() / self.batch;
        &self.tensors[p].data()[i * inner..(i + 1) * inner]
    }

    /// Global l2 norm of each example's gradient.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.batch)
            .map(|i| {
                (0..self.tensors.len())
                    .map(|p| self.slice(p, i).iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn example(&self, i: usize) -> GradMap {
        let tensors = self
            .tensors
            .iter()
            .enumerate()
            .map(|(p, t)| Tensor::from_parts(t.shape()[1..].to_vec(), self.slice(p, i).to_vec()))
            .collect();
        GradMap::new(self.names.clone(), tensors)
    }
}

/// Padded token matrices for teacher-forced training.
#[derive(Clone, Debug)]
pub struct Batch {
    size: usize,
    src: Indices,
    src_valid: Vec<bool>,
    tgt_in: Indices,
    tgt_valid: Vec<bool>,
    tgt_out: Indices,
}

impl Batch {
    /// Pads encoded `(source, target)` pairs. Each target is `BOS ... EOS`;
    /// the decoder reads `target[..-1]` and predicts `target[1..]`.
    pub fn new(config: &ModelConfig, examples: &[(&[usize], &[usize])]) -> Result<Self> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for (i, (s, t)) in examples.iter().enumerate() {
            if s.is_empty() {
                return Err(ModelError::EmptySource(i));
            }
            if t.len() < 2 {
                return Err(ModelError::EmptyTarget(i));
            }
            for seq in [s, t] {
                if seq.len() > config.max_seq_len {
                    return Err(ModelError::TooLong {
                        len: seq.len(),
                        max: config.max_seq_len,
                    });
                }
                if let Some(&id) = seq.iter().find(|&&id| id >= config.vocab_size) {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: config.vocab_size,
                    });
                }
            }
        }
        let b = examples.len();
        let s_len = examples.iter().map(|(s, _)| s.len()).max().unwrap();
        let t_len = examples.iter().map(|(_, t)| t.len() - 1).max().unwrap();
        let mut src = vec![PAD; b * s_len];
        let mut src_valid = vec![false; b * s_len];
        let mut tgt_in = vec![PAD; b * t_len];
        let mut tgt_valid = vec![false; b * t_len];
        let mut tgt_out = vec![PAD; b * t_len];
        for (i, (s, t)) in examples.iter().enumerate() {
            src[i * s_len..i * s_len + s.len()].copy_from_slice(s);
            src_valid[i * s_len..i * s_len + s.len()].fill(true);
            let n = t.len() - 1;
            tgt_in[i * t_len..i * t_len + n].copy_from_slice(&t[..n]);
            tgt_valid[i * t_len..i * t_len + n].fill(true);
            tgt_out[i * t_len..i * t_len + n].copy_from_slice(&t[1..]);
        }
        Ok(Self {
            size: b,
            src: Indices::new(vec![b, s_len], src)?,
            src_valid,
            tgt_in: Indices::new(vec![b, t_len], tgt_in)?,
            tgt_valid,
            tgt_out: Indices::new(vec![b, t_len], tgt_out)?,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

struct Ln {
    gamma: NodeId,
    beta: NodeId,
}

struct Attn {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
}

struct Ff {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ff: Ff,
}

struct DecLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ff: Ff,
}

/// Parameter nodes on a tape, consumed in `param_shapes` order.
struct Bound {
    embed: NodeId,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    all: Vec<NodeId>,
}

impl Bound {
    fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        let all: Vec<NodeId> = params.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter count matches layout");
        let embed = next();
        let ln = |next: &mut dyn FnMut() -> NodeId| Ln {
            gamma: next(),
            beta: next(),
        };
        let attn = |next: &mut dyn FnMut() -> NodeId| Attn {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        };
        let ff = |next: &mut dyn FnMut() -> NodeId| Ff {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let layers = params.config.n_layers;
        let enc = (0..layers)
            .map(|_| EncLayer {
                ln1: ln(&mut next),
                attn: attn(&mut next),
                ln2: ln(&mut next),
                ff: ff(&mut next),
            })
            .collect();
        let enc_ln = ln(&mut next);
        let dec = (0..layers)
            .map(|_| DecLayer {
                ln1: ln(&mut next),
                attn: attn(&mut next),
                ln2: ln(&mut next),
                cross: attn(&mut next),
                ln3: ln(&mut next),
                ff: ff(&mut next),
            })
            .collect();
        let dec_ln = ln(&mut next);
        Self {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            all,
        }
    }
}

fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("finite encodings")
}

struct Forward<'a> {
    tape: &'a mut Tape,
    p: &'a Bound,
    cfg: ModelConfig,
}

impl Forward<'_> {
    fn embed(&mut self, ids: &Indices) -> Result<NodeId> {
        let len = ids.shape()[1];
        let e = self.tape.embedding(self.p.embed, ids, true)?;
        let e = self.tape.scale(e, (self.cfg.d_model as f64).sqrt())?;
        let pe = self.tape.constant(positional_encoding(len, self.cfg.d_model));
        Ok(self.tape.add(e, pe)?)
    }

    fn layer_norm(&mut self, x: NodeId, ln: &Ln) -> Result<NodeId> {
        Ok(self.tape.layer_norm(x, ln.gamma, ln.beta, LN_EPS)?)
    }

    /// Multi-head attention; `mask` has one flag per `[B, Tq, Tk]` score.
    fn attention(&mut self, xq: NodeId, xkv: NodeId, w: &Attn, mask: &[bool]) -> Result<NodeId> {
        let t = &mut *self.tape;
        let q = t.matmul(xq, w.wq)?;
        let k = t.matmul(xkv, w.wk)?;
        let v = t.matmul(xkv, w.wv)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = t.slice(q, 2, lo, hi)?;
            let kh = t.slice(k, 2, lo, hi)?;
            let vh = t.slice(v, 2, lo, hi)?;
            let scores = t.matmul_t(qh, kh, false, true)?;
            let scores = t.scale(scores, inv)?;
            let probs = t.softmax(scores, Some(mask))?;
            heads.push(t.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { t.concat(&heads)? };
        Ok(t.matmul(joined, w.wo)?)
    }

    fn feed_forward(&mut self, x: NodeId, ff: &Ff) -> Result<NodeId> {
        let t = &mut *self.tape;
        let h = t.matmul(x, ff.w1)?;
        let h = t.add(h, ff.b1)?;
        let h = t.relu(h)?;
        let o = t.matmul(h, ff.w2)?;
        Ok(t.add(o, ff.b2)?)
    }

    fn encode(&mut self, src: &Indices, src_valid: &[bool]) -> Result<NodeId> {
        let (b, s) = (src.shape()[0], src.shape()[1]);
        let mask = key_mask(b, s, s, src_valid, false);
        let mut x = self.embed(src)?;
        for layer in &self.p.enc {
            let h = self.layer_norm(x, &layer.ln1)?;
            let a = self.attention(h, h, &layer.attn, &mask)?;
            x = self.tape.add(x, a)?;
            let h = self.layer_norm(x, &layer.ln2)?;
            let f = self.feed_forward(h, &layer.ff)?;
            x = self.tape.add(x, f)?;
        }
        self.layer_norm(x, &self.p.enc_ln)
    }

    /// Decoder logits `[B, T, vocab]`.
    fn decode(&mut self, memory: NodeId, src_valid: &[bool], tgt_in: &Indices, tgt_valid: &[bool]) -> Result<NodeId> {
        let (b, t) = (tgt_in.shape()[0], tgt_in.shape()[1]);
        let s = src_valid.len() / b;
        let self_mask = key_mask(b, t, t, tgt_valid, true);
        let cross_mask = key_mask(b, t, s, src_valid, false);
        let mut y = self.embed(tgt_in)?;
        for layer in &self.p.dec {
            let h = self.layer_norm(y, &layer.ln1)?;
            let a = self.attention(h, h, &layer.attn, &self_mask)?;
            y = self.tape.add(y, a)?;
            let h = self.layer_norm(y, &layer.ln2)?;
            let c = self.attention(h, memory, &layer.cross, &cross_mask)?;
            y = self.tape.add(y, c)?;
            let h = self.layer_norm(y, &layer.ln3)?;
            let f = self.feed_forward(h, &layer.ff)?;
            y = self.tape.add(y, f)?;
        }
        let out = self.layer_norm(y, &self.p.dec_ln)?;
        Ok(self.tape.matmul_t(out, self.p.embed, false, true)?)
    }
}

/// Score mask `[B, Tq, Tk]` allowing valid keys, and with `causal` only keys
/// at or before the query position.
fn key_mask(b: usize, tq: usize, tk: usize, key_valid: &[bool], causal: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(b * tq * tk);
    for i in 0..b {
        for q in 0..tq {
            for k in 0..tk {
                mask.push(key_valid[i * tk + k] && (!causal || k <= q));
            }
        }
    }
    mask
}

/// Teacher-forced loss graph: one mean token cross-entropy per example.
pub struct LossGraph {
    pub tape: Tape,
    pub losses: NodeId,
    params: Vec<NodeId>,
    names: Arc<[String]>,
}

impl LossGraph {
    pub fn losses(&self) -> &[f64] {
        self.tape.value(self.losses).data()
    }

    fn to_map(&self, grads: &Grads) -> GradMap {
        GradMap::new(self.names.clone(), self.params.iter().map(|id| grads[id].clone()).collect())
    }

    /// Gradient of the summed batch loss.
    pub fn sum_gradient(&mut self) -> Result<GradMap> {
        let total = self.tape.sum(self.losses)?;
        let grads = self.tape.backward(total)?;
        Ok(self.to_map(&grads))
    }

    /// One gradient per example, each equal to the gradient of that
    /// example's loss alone.
    pub fn per_example_gradients(&self) -> Result<Vec<GradMap>> {
        let stacked = self.per_example_stacked()?;
        Ok((0..stacked.batch).map(|i| stacked.example(i)).collect())
    }

    pub fn per_example_stacked(&self) -> Result<StackedGrads> {
        let mut grads = self.tape.per_example_stacked(self.losses)?;
        Ok(StackedGrads {
            names: self.names.clone(),
            batch: self.tape.value(self.losses).len(),
            tensors: self.params.iter().map(|id| grads.remove(id).expect("every parameter")).collect(),
        })
    }
}

pub fn loss_graph(params: &ModelParams, batch: &Batch) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let mut fwd = Forward {
        tape: &mut tape,
        p: &bound,
        cfg: params.config,
    };
    let memory = fwd.encode(&batch.src, &batch.src_valid)?;
    let logits = fwd.decode(memory, &batch.src_valid, &batch.tgt_in, &batch.tgt_valid)?;
    let losses = tape.cross_entropy(logits, &batch.tgt_out, Some(PAD))?;
    Ok(LossGraph {
        tape,
        losses,
        params: bound.all,
        names: params.names.clone(),
    })
}

/// Per-example mean token cross-entropy, `[B]`.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<Tensor> {
    let g = loss_graph(params, batch)?;
    Ok(g.tape.value(g.losses).clone())
}

fn check_ids(config: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.len() > config.max_seq_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: config.max_seq_len,
        });
    }
    match ids.iter().find(|&&id| id >= config.vocab_size) {
        Some(&id) => Err(ModelError::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        }),
        None => Ok(()),
    }
}

/// Encoder output for one source, reused across decoding steps.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    tape: Tape,
    bound: Bound,
    memory: NodeId,
    src_valid: Vec<bool>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams, source_ids: &[usize]) -> Result<Self> {
        if source_ids.is_empty() {
            return Err(ModelError::EmptySource(0));
        }
        check_ids(&params.config, source_ids)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let src = Indices::new(vec![1, source_ids.len()], source_ids.to_vec())?;
        let src_valid = vec![true; source_ids.len()];
        let memory = Forward {
            tape: &mut tape,
            p: &bound,
            cfg: params.config,
        }
        .encode(&src, &src_valid)?;
        Ok(Self {
            params,
            tape,
            bound,
            memory,
            src_valid,
        })
    }

    /// Logits `[T, vocab]` for every position of a decoder input.
    pub fn logits_all(&mut self, decoder_input: &[usize]) -> Result<Tensor> {
        if decoder_input.is_empty() {
            return Err(ModelError::EmptyTarget(0));
        }
        check_ids(&self.params.config, decoder_input)?;
        let t = decoder_input.len();
        let tgt = Indices::new(vec![1, t], decoder_input.to_vec())?;
        let logits = Forward {
            tape: &mut self.tape,
            p: &self.bound,
            cfg: self.params.config,
        }
        .decode(self.memory, &self.src_valid, &tgt, &vec![true; t])?;
        let value = self.tape.value(logits);
        Ok(Tensor::new(vec![t, self.params.config.vocab_size], value.data().to_vec())?)
    }

    /// Next-token logits after `BOS prefix`.
    pub fn step(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let max = self.params.config.max_seq_len;
        if prefix.len() >= max {
            return Err(ModelError::PrefixOverflow { len: prefix.len(), max });
        }
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let all = self.logits_all(&input)?;
        let v = self.params.config.vocab_size;
        Ok(all.data()[prefix.len() * v..].to_vec())
    }
}

/// Next-token logits for `source_ids` after the decoded `prefix`.
pub fn decode_step(params: &ModelParams, source_ids: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
    Decoder::new(params, source_ids)?.step(prefix)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until EOS or `max_len` tokens.
pub fn greedy_decode(params: &ModelParams, source_ids: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut dec = Decoder::new(params, source_ids)?;
    let limit = max_len.min(params.config.max_seq_len - 1);
    let mut out = Vec::new();
    while out.len() < limit {
        let tok = argmax(&dec.step(&out)?);
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

/// Random parameters of a config, for tests and benches.
pub fn random_params(config: &ModelConfig, rng: &mut impl Rng, scale: f64) -> Result<ModelParams> {
    config.validate()?;
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("finite")
        })
        .collect();
    ModelParams::from_tensors(*config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(50, 10).validate().is_ok());
        let mut c = ModelConfig::new(50, 10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(50, 4).validate().is_err());
        assert!(ModelConfig::new(50, 65).validate().is_err());
    }

    #[test]
    fn init_shapes_and_values() {
        let p = init_params(&tiny(), 1).unwrap();
        assert_eq!(p.get("embed").unwrap().shape(), &[9, 8]);
        assert!(p.get("enc.0.ln1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("dec.ln.beta").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(p, init_params(&tiny(), 1).unwrap());
        assert_ne!(p, init_params(&tiny(), 2).unwrap());
    }

    #[test]
    fn default_model_size() {
        let p = init_params(&ModelConfig::new(54, 10), 0).unwrap();
        assert!(p.num_parameters() > 100_000);
    }

    #[test]
    fn batch_validation() {
        let c = tiny();
        let src = [1, 4, 2];
        assert!(matches!(Batch::new(&c, &[(&src, &[1])]), Err(ModelError::EmptyTarget(0))));
        assert!(matches!(
            Batch::new(&c, &[(&src, &[1, 9, 2])]),
            Err(ModelError::TokenOutOfRange { id: 9, .. })
        ));
        assert!(matches!(Batch::new(&c, &[]), Err(ModelError::EmptyBatch)));
        let long = [4; 9];
        assert!(matches!(Batch::new(&c, &[(&long, &[1, 2])]), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn prefix_overflow() {
        let p = init_params(&tiny(), 0).unwrap();
        assert!(matches!(decode_step(&p, &[1, 2], &[4; 8]), Err(ModelError::PrefixOverflow { .. })));
        assert_eq!(decode_step(&p, &[1, 2], &[4; 7]).unwrap().len(), 9);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 3.0, 3.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
