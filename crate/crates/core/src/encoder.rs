//! Word embeddings plus a 3-layer recurrent encoder per direction, with
//! variational dropout, recurrent weight drop, and a linear-softmax language
//! model head. Three architecture variants: bidirectional, forward-only, and
//! embeddings-only (bypassing the recurrent stack).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, ParameterSet, Tape, TapeError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("language-model batch requires sentences with at least 2 tokens (got {0})")]
    SentenceTooShort(usize),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Bidirectional,
    ForwardOnly,
    EmbeddingsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub variant: Variant,
    pub dropout_embedding: f64,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub dropout_output: f64,
    pub weight_drop: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 400,
            hidden_dim: 1150,
            output_dim: 400,
            layers: 3,
            variant: Variant::Bidirectional,
            dropout_embedding: 0.05,
            dropout_input: 0.4,
            dropout_hidden: 0.4,
            dropout_output: 0.5,
            weight_drop: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("dropout_embedding", self.dropout_embedding),
            ("dropout_input", self.dropout_input),
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_output", self.dropout_output),
            ("weight_drop", self.weight_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(EncoderError::InvalidConfig(format!("{name} = {p} not in [0,1)")));
            }
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 || self.layers == 0 {
            return Err(EncoderError::InvalidConfig("dims and layer count must be positive".into()));
        }
        Ok(())
    }

    /// Width of the context embeddings fed to the decoder.
    pub fn context_width(&self) -> usize {
        match self.variant {
            Variant::Bidirectional => 2 * self.output_dim,
            Variant::ForwardOnly => self.output_dim,
            Variant::EmbeddingsOnly => self.embedding_dim,
        }
    }

    /// Per-layer (input, state) dims: the final layer's state is output_dim.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let d_in = if i == 0 { self.embedding_dim } else { self.hidden_dim };
                let d_out = if i + 1 == self.layers { self.output_dim } else { self.hidden_dim };
                (d_in, d_out)
            })
            .collect()
    }
}

/// Dense token-to-id map with a reserved unknown token and a reserved
/// sequence-boundary token used by the language model head.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";
pub const BOUNDARY_TOKEN: &str = "<s>";

impl Vocabulary {
    /// Build from a corpus with min-count 1; `<unk>` and `<s>` are always present.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_string(), BOUNDARY_TOKEN.to_string()];
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        let mut ordered: Vec<String> = Vec::new();
        for sent in sentences {
            for tok in sent {
                if tok != UNK_TOKEN && tok != BOUNDARY_TOKEN && seen.insert(tok, ()).is_none() {
                    ordered.push(tok.clone());
                }
            }
        }
        ordered.sort();
        tokens.extend(ordered);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn boundary_id(&self) -> usize {
        1
    }

    /// Id for a token, mapping unseen tokens to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Uniform init in +-1/sqrt(fan_in) for embedding and recurrent weights.
fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Initialize all encoder parameters (both directions plus LM heads).
pub fn init_encoder_params<S: Scalar>(
    config: &EncoderConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> ParameterSet<S> {
    let mut params = ParameterSet::new();
    params.insert(
        "enc.emb",
        uniform_init(rng, vec![vocab_size, config.embedding_dim], config.embedding_dim),
    );
    for dir in [Direction::Forward, Direction::Backward] {
        for (i, (d_in, d_out)) in config.layer_dims().into_iter().enumerate() {
            let tag = dir.tag();
            params.insert(
                &format!("enc.{tag}.l{i}.w_ih"),
                uniform_init(rng, vec![d_in, 4 * d_out], d_in),
            );
            params.insert(
                &format!("enc.{tag}.l{i}.w_hh"),
                uniform_init(rng, vec![d_out, 4 * d_out], d_out),
            );
            params.insert(&format!("enc.{tag}.l{i}.b"), Tensor::zeros(vec![4 * d_out]));
        }
        let tag = dir.tag();
        params.insert(
            &format!("enc.{tag}.lm.w"),
            uniform_init(rng, vec![config.output_dim, vocab_size], config.output_dim),
        );
        params.insert(&format!("enc.{tag}.lm.b"), Tensor::zeros(vec![vocab_size]));
    }
    params
}

/// Variational dropout mask: one Bernoulli draw per unit, replicated across
/// all timesteps of the sequence, scaled by 1/(1-p).
pub fn variational_mask<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor<S> {
    let keep = 1.0 - p;
    let unit: Vec<S> = (0..cols)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                S::from_f64(1.0 / keep)
            } else {
                S::ZERO
            }
        })
        .collect();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend_from_slice(&unit);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Per-entry Bernoulli mask for recurrent weight drop, drawn once per sequence.
pub fn weight_drop_mask<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Tensor<S> {
    let keep = 1.0 - p;
    let data = (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                S::from_f64(1.0 / keep)
            } else {
                S::ZERO
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Forward-pass context: training mode draws dropout masks from the RNG,
/// eval mode applies no dropout at all.
pub struct EncoderCtx<'a> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> EncoderCtx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        EncoderCtx { mode: Mode::Train, rng }
    }

    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        EncoderCtx { mode: Mode::Eval, rng }
    }

    fn apply_variational<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        x: NodeId,
        p: f64,
    ) -> Result<NodeId> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        let mask = variational_mask(self.rng, rows, cols, p);
        Ok(tape.dropout(x, mask)?)
    }
}

/// Embed a token-id sequence: one embedding-dim vector per token, with
/// embedding dropout in training mode.
pub fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &EncoderConfig,
    tokens: &[usize],
    ctx: &mut EncoderCtx,
) -> Result<NodeId> {
    let vocab = params.get("enc.emb").expect("missing enc.emb").rows();
    for &id in tokens {
        if id >= vocab {
            return Err(EncoderError::OutOfVocabulary { id, vocab });
        }
    }
    let emb = tape.param("enc.emb", params)?;
    let rows = tape.gather(emb, tokens)?;
    ctx.apply_variational(tape, rows, config.dropout_embedding)
}

/// Run one direction of the recurrent stack over a token sequence, returning
/// a (T, output_dim) matrix of context embeddings aligned with the original
/// token order. Forward position t depends only on tokens <= t; backward only
/// on tokens >= t.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &EncoderConfig,
    tokens: &[usize],
    direction: Direction,
    ctx: &mut EncoderCtx,
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    let ordered: Vec<usize> = match direction {
        Direction::Forward => tokens.to_vec(),
        Direction::Backward => tokens.iter().rev().copied().collect(),
    };
    let t_len = ordered.len();
    let mut layer_input = embed(tape, params, config, &ordered, ctx)?;

    let dims = config.layer_dims();
    for (i, (_, d_out)) in dims.iter().enumerate() {
        let p_in = if i == 0 { config.dropout_input } else { config.dropout_hidden };
        layer_input = ctx.apply_variational(tape, layer_input, p_in)?;

        let tag = direction.tag();
        let w_ih = tape.param(&format!("enc.{tag}.l{i}.w_ih"), params)?;
        let mut w_hh = tape.param(&format!("enc.{tag}.l{i}.w_hh"), params)?;
        if ctx.mode == Mode::Train && config.weight_drop > 0.0 {
            let (r, c) = {
                let t = tape.value(w_hh);
                (t.rows(), t.cols())
            };
            let mask = weight_drop_mask(ctx.rng, r, c, config.weight_drop);
            w_hh = tape.dropout(w_hh, mask)?;
        }
        let bias = tape.param(&format!("enc.{tag}.l{i}.b"), params)?;

        let mut h = tape.input(Tensor::zeros(vec![1, *d_out]))?;
        let mut c = tape.input(Tensor::zeros(vec![1, *d_out]))?;
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x_t = tape.slice(layer_input, t, t + 1, 0, tape.value(layer_input).cols())?;
            let xg = tape.matmul(x_t, w_ih)?;
            let hg = tape.matmul(h, w_hh)?;
            let pre = tape.add(xg, hg)?;
            let gates = tape.add_bias(pre, bias)?;
            let d = *d_out;
            let ig = tape.slice(gates, 0, 1, 0, d)?;
            let fg = tape.slice(gates, 0, 1, d, 2 * d)?;
            let gg = tape.slice(gates, 0, 1, 2 * d, 3 * d)?;
            let og = tape.slice(gates, 0, 1, 3 * d, 4 * d)?;
            let i_t = tape.sigmoid(ig)?;
            let f_t = tape.sigmoid(fg)?;
            let g_t = tape.tanh(gg)?;
            let o_t = tape.sigmoid(og)?;
            let fc = tape.mul(f_t, c)?;
            let ig_ = tape.mul(i_t, g_t)?;
            c = tape.add(fc, ig_)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o_t, tc)?;
            outputs.push(h);
        }
        layer_input = tape.concat(&outputs, 0)?;
    }
    let out = ctx.apply_variational(tape, layer_input, config.dropout_output)?;
    match direction {
        Direction::Forward => Ok(out),
        Direction::Backward => {
            let rev: Vec<usize> = (0..t_len).rev().collect();
            Ok(tape.gather(out, &rev)?)
        }
    }
}

/// Context embeddings for the configured architecture variant.
pub fn context_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &EncoderConfig,
    tokens: &[usize],
    ctx: &mut EncoderCtx,
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    match config.variant {
        Variant::Bidirectional => {
            let fwd = encode(tape, params, config, tokens, Direction::Forward, ctx)?;
            let bwd = encode(tape, params, config, tokens, Direction::Backward, ctx)?;
            Ok(tape.concat(&[fwd, bwd], 1)?)
        }
        Variant::ForwardOnly => encode(tape, params, config, tokens, Direction::Forward, ctx),
        Variant::EmbeddingsOnly => embed(tape, params, config, tokens, ctx),
    }
}

/// Mean negative log-likelihood of the next word (forward) or previous word
/// (backward) over a batch of sentences, under the linear-softmax head.
/// A sequence-boundary token supplies the context for the edge word.
pub fn lm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &EncoderConfig,
    batch: &[Vec<usize>],
    boundary_id: usize,
    direction: Direction,
    ctx: &mut EncoderCtx,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let total: usize = batch.iter().map(|s| s.len()).sum();
    let mut acc: Option<NodeId> = None;
    for sent in batch {
        if sent.len() < 2 {
            return Err(EncoderError::SentenceTooShort(sent.len()));
        }
        let t_len = sent.len();
        let (seq, target_rows, targets): (Vec<usize>, std::ops::Range<usize>, Vec<usize>) =
            match direction {
                Direction::Forward => {
                    // [<s>, w0..w_{T-1}]: row j sees prefix through w_{j-1}, predicts w_j.
                    let mut seq = Vec::with_capacity(t_len + 1);
                    seq.push(boundary_id);
                    seq.extend_from_slice(sent);
                    (seq, 0..t_len, sent.clone())
                }
                Direction::Backward => {
                    // [w0..w_{T-1}, <s>]: row j+1 sees suffix from w_{j+1}, predicts w_j.
                    let mut seq = Vec::with_capacity(t_len + 1);
                    seq.extend_from_slice(sent);
                    seq.push(boundary_id);
                    (seq, 1..t_len + 1, sent.clone())
                }
            };
        let context = encode(tape, params, config, &seq, direction, ctx)?;
        let rows = tape.slice(context, target_rows.start, target_rows.end, 0, config.output_dim)?;
        let tag = direction.tag();
        let lm_w = tape.param(&format!("enc.{tag}.lm.w"), params)?;
        let lm_b = tape.param(&format!("enc.{tag}.lm.b"), params)?;
        let proj = tape.matmul(rows, lm_w)?;
        let logits = tape.add_bias(proj, lm_b)?;
        let nll = tape.cross_entropy_rows(logits, &targets)?;
        // per-sentence mean scaled to its share of the batch token count
        let weighted = tape.scale(nll, S::from_f64(t_len as f64 / total as f64))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("non-empty batch"))
}

/// Log probability (nats, <= 0) of each word under the forward LM head in
/// eval mode; the decoder's side input.
pub fn word_log_probs<S: Scalar>(
    params: &ParameterSet<S>,
    config: &EncoderConfig,
    tokens: &[usize],
    boundary_id: usize,
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut ctx = EncoderCtx::eval(&mut rng);
    let mut tape: Tape<S> = Tape::new();
    let mut seq = Vec::with_capacity(tokens.len() + 1);
    seq.push(boundary_id);
    seq.extend_from_slice(tokens);
    let context = encode(&mut tape, params, config, &seq, Direction::Forward, &mut ctx)?;
    let rows = tape.slice(context, 0, tokens.len(), 0, config.output_dim)?;
    let lm_w = tape.param("enc.fwd.lm.w", params)?;
    let lm_b = tape.param("enc.fwd.lm.b", params)?;
    let proj = tape.matmul(rows, lm_w)?;
    let logits = tape.add_bias(proj, lm_b)?;
    let t = tape.value(logits);
    let cols = t.cols();
    let mut out = Vec::with_capacity(tokens.len());
    for (r, &tok) in tokens.iter().enumerate() {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(row[0], |m, &v| m.max(v));
        let mut lse = 0.0f64;
        for &v in row {
            lse += (v - mx).to_f64().exp();
        }
        let logp = (row[tok] - mx).to_f64() - lse.ln();
        out.push(logp.min(0.0));
    }
    Ok(out)
}

use rand::SeedableRng;
