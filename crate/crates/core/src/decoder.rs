//! Causal-convolution pair-embedding plus independent per-signal linear
//! heads. Each pair-embedding combines the context embeddings of the current
//! and previous word; the heads additionally see the word length and the
//! word's log probability. No dropout in the decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::signals::Signal;
use crate::tape::{NodeId, ParameterSet, Tape, TapeError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("no head configured for signal {0}")]
    MissingHead(Signal),
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("empty context sequence")]
    EmptyContext,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Width of the pair-embedding produced by the causal convolution.
    pub pair_dim: usize,
    /// Signals with a prediction head, in canonical order.
    pub signals: Vec<Signal>,
    /// Context-embedding width coming in from the encoder variant.
    pub input_width: usize,
}

impl DecoderConfig {
    pub fn new(input_width: usize, signals: Vec<Signal>) -> Self {
        DecoderConfig { pair_dim: 10, signals, input_width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pair_dim == 0 {
            return Err(DecoderError::InvalidConfig("pair_dim must be positive".into()));
        }
        if self.signals.is_empty() {
            return Err(DecoderError::InvalidConfig("signal list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.signals {
            if !seen.insert(*s) {
                return Err(DecoderError::InvalidConfig(format!("duplicate signal {s}")));
            }
        }
        Ok(())
    }

    pub fn head_index(&self, signal: Signal) -> Result<usize> {
        self.signals
            .iter()
            .position(|&s| s == signal)
            .ok_or(DecoderError::MissingHead(signal))
    }

    /// Head input width: pair-embedding plus the two standardized side inputs.
    pub fn feature_width(&self) -> usize {
        self.pair_dim + 2
    }
}

/// Training-set statistics used to standardize the word-length and log-prob
/// side inputs before they enter the heads.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SideInputStats {
    pub length_mean: f64,
    pub length_std: f64,
    pub logprob_mean: f64,
    pub logprob_std: f64,
}

impl Default for SideInputStats {
    fn default() -> Self {
        SideInputStats { length_mean: 0.0, length_std: 1.0, logprob_mean: 0.0, logprob_std: 1.0 }
    }
}

impl SideInputStats {
    pub fn fit(lengths: &[f64], logprobs: &[f64]) -> Self {
        fn mean_std(v: &[f64]) -> (f64, f64) {
            if v.is_empty() {
                return (0.0, 1.0);
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            let sd = var.sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        }
        let (lm, ls) = mean_std(lengths);
        let (pm, ps) = mean_std(logprobs);
        SideInputStats { length_mean: lm, length_std: ls, logprob_mean: pm, logprob_std: ps }
    }

    pub fn standardize_length(&self, len: f64) -> f64 {
        (len - self.length_mean) / self.length_std
    }

    pub fn standardize_logprob(&self, lp: f64) -> f64 {
        (lp - self.logprob_mean) / self.logprob_std
    }
}

/// Kaiming-style uniform init scaled by fan-in.
fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Initialize convolution and head parameters.
pub fn init_decoder_params<S: Scalar>(config: &DecoderConfig, rng: &mut ChaCha8Rng) -> ParameterSet<S> {
    let mut params = ParameterSet::new();
    let d = config.input_width;
    params.insert(
        "dec.conv.w",
        kaiming_uniform(rng, vec![2 * d, config.pair_dim], 2 * d),
    );
    params.insert("dec.conv.b", Tensor::zeros(vec![config.pair_dim]));
    for &sig in &config.signals {
        params.insert(
            &format!("dec.head.{sig}.w"),
            kaiming_uniform(rng, vec![config.feature_width(), 1], config.feature_width()),
        );
        params.insert(&format!("dec.head.{sig}.b"), Tensor::zeros(vec![1]));
    }
    params
}

/// ReLU'd pair-embeddings from context embeddings: output length equals input
/// length; position t is a function of context at t-1 and t only (zero pad at
/// position 0).
pub fn pair_embed<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    context: NodeId,
) -> Result<NodeId> {
    if tape.value(context).rows() == 0 {
        return Err(DecoderError::EmptyContext);
    }
    let w = tape.param("dec.conv.w", params)?;
    let b = tape.param("dec.conv.b", params)?;
    let conv = tape.causal_conv2(context, w, b)?;
    Ok(tape.relu(conv)?)
}

/// Predictions for every configured signal over a sequence: a (T, signals)
/// matrix node, column order matching `config.signals`. Side inputs are
/// standardized with the supplied training-set stats.
pub fn predict_all<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &DecoderConfig,
    context: NodeId,
    word_lengths: &[f64],
    log_probs: &[f64],
    side_stats: &SideInputStats,
) -> Result<NodeId> {
    let t_len = tape.value(context).rows();
    debug_assert_eq!(word_lengths.len(), t_len);
    debug_assert_eq!(log_probs.len(), t_len);
    let pair = pair_embed(tape, params, context)?;
    let side: Vec<S> = word_lengths
        .iter()
        .zip(log_probs)
        .flat_map(|(&len, &lp)| {
            [
                S::from_f64(side_stats.standardize_length(len)),
                S::from_f64(side_stats.standardize_logprob(lp)),
            ]
        })
        .collect();
    let side = tape.input(Tensor::new(vec![t_len, 2], side))?;
    let features = tape.concat(&[pair, side], 1)?;
    let mut cols = Vec::with_capacity(config.signals.len());
    for &sig in &config.signals {
        let w = tape.param(&format!("dec.head.{sig}.w"), params)?;
        let b = tape.param(&format!("dec.head.{sig}.b"), params)?;
        let proj = tape.matmul(features, w)?;
        cols.push(tape.add_bias(proj, b)?);
    }
    Ok(tape.concat(&cols, 1)?)
}

/// Scalar predictions for one word, keyed by signal.
pub fn predict<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParameterSet<S>,
    config: &DecoderConfig,
    context: NodeId,
    word_length: usize,
    log_prob: f64,
    side_stats: &SideInputStats,
    requested: &[Signal],
) -> Result<Vec<(Signal, S)>> {
    for &sig in requested {
        config.head_index(sig)?;
    }
    let t_len = tape.value(context).rows();
    let preds = predict_all(
        tape,
        params,
        config,
        context,
        &vec![word_length as f64; t_len],
        &vec![log_prob; t_len],
        side_stats,
    )?;
    let last = t_len - 1;
    let mut out = Vec::with_capacity(requested.len());
    for &sig in requested {
        let col = config.head_index(sig)?;
        out.push((sig, tape.value(preds).at(last, col)));
    }
    Ok(out)
}
